"""Vocabulary, checkpoint files and the shared optimisation loop."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
import torch
from safetensors.torch import load_file, save_file
from safetensors import safe_open

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "factarg-checkpoint"
CHECKPOINT_VERSION = "1"


class ModelStateError(RuntimeError):
    """Model used before it was initialised or trained."""


class Vocab:
    def __init__(self, tokens: Sequence[str], specials: Sequence[str] = ("<pad>", "<unk>")):
        seen: dict[str, int] = {}
        for t in [*specials, *tokens]:
            if t not in seen:
                seen[t] = len(seen)
        self.itos = list(seen)
        self.stoi = seen
        self.pad_id = self.stoi.get("<pad>", 0)
        self.unk_id = self.stoi.get("<unk>", 1)

    def __len__(self) -> int:
        return len(self.itos)

    def __contains__(self, tok: str) -> bool:
        return tok in self.stoi

    def id(self, tok: str) -> int:
        return self.stoi.get(tok, self.unk_id)

    def encode(self, tokens: Iterable[str]) -> list[int]:
        return [self.id(t) for t in tokens]

    def decode(self, ids: Iterable[int]) -> list[str]:
        return [self.itos[i] for i in ids]

    def to_json(self) -> list[str]:
        return list(self.itos)

    @classmethod
    def from_json(cls, itos: list[str]) -> "Vocab":
        return cls(itos, specials=())


@dataclass
class TrainSettings:
    learning_rate: float = 1e-5
    batch_size: int = 32
    early_stop_patience: int = 5
    grad_clip_norm: float = 1.0
    max_steps: int = 2000
    eval_every: int = 0  # 0 -> once per pass over the training data
    seed: int | None = 0

    def __post_init__(self):
        if self.early_stop_patience < 1:
            raise ValueError("early_stop_patience must be >= 1")
        if self.batch_size < 1 or self.max_steps < 0:
            raise ValueError("batch_size must be >= 1 and max_steps >= 0")


@dataclass
class TrainingLog:
    steps: list[dict] = field(default_factory=list)
    evaluations: list[dict] = field(default_factory=list)
    stopped: str = ""

    @property
    def losses(self) -> list[float]:
        return [s["loss"] for s in self.steps]

    def to_dict(self) -> dict:
        return asdict(self)


def global_grad_norm(params) -> float:
    grads = [p.grad.detach().double().norm() for p in params if p.grad is not None]
    if not grads:
        return 0.0
    return float(torch.stack(grads).norm())


def batches(n: int, batch_size: int, rng: np.random.Generator):
    """Endless stream of index batches, reshuffled every pass."""
    while True:
        order = rng.permutation(n)
        for i in range(0, n, batch_size):
            yield order[i:i + batch_size].tolist()


def fit(model: torch.nn.Module, n_train: int, batch_loss: Callable[[list[int]], torch.Tensor],
        settings: TrainSettings, val_loss: Callable[[], float] | None = None,
        until: Callable[[], bool] | None = None) -> TrainingLog:
    """AdamW with unit-norm clipping and early stopping on validation loss.

    ``batch_loss`` maps training indices to a scalar loss; ``val_loss`` is
    evaluated every ``eval_every`` steps; ``until`` may end training early once
    a caller-defined goal holds (checked at evaluation points).
    """
    if n_train == 0:
        raise ValueError("cannot train on an empty corpus")
    params = [p for p in model.parameters() if p.requires_grad]
    opt = torch.optim.AdamW(params, lr=settings.learning_rate)
    rng = np.random.default_rng(settings.seed)
    eval_every = settings.eval_every or max(1, math.ceil(n_train / settings.batch_size))
    trainlog = TrainingLog()
    best, bad = math.inf, 0
    stream = batches(n_train, settings.batch_size, rng)
    model.train()
    for step in range(1, settings.max_steps + 1):
        idx = next(stream)
        opt.zero_grad()
        loss = batch_loss(idx)
        loss.backward()
        pre = float(torch.nn.utils.clip_grad_norm_(params, settings.grad_clip_norm))
        post = global_grad_norm(params)
        opt.step()
        trainlog.steps.append({"step": step, "loss": float(loss.detach()), "grad_norm": pre, "clipped_norm": post})
        if step % eval_every == 0:
            model.eval()
            with torch.no_grad():
                v = val_loss() if val_loss is not None else float(loss.detach())
            model.train()
            trainlog.evaluations.append({"step": step, "val_loss": v})
            if v < best:
                best, bad = v, 0
            else:
                bad += 1
            if bad >= settings.early_stop_patience:
                trainlog.stopped = f"early stop at step {step}: no improvement for {bad} evaluations"
                break
            if until is not None:
                model.eval()
                done = until()
                model.train()
                if done:
                    trainlog.stopped = f"goal reached at step {step}"
                    break
    else:
        trainlog.stopped = f"max_steps={settings.max_steps} reached"
    model.eval()
    log.info("training finished: %s", trainlog.stopped)
    return trainlog


def save_checkpoint(path: str | Path, model: torch.nn.Module, kind: str, config: dict, **extra) -> None:
    tensors = {k: v.detach().contiguous().clone() for k, v in model.state_dict().items()}
    meta = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "kind": kind,
        "config": json.dumps(config, sort_keys=True),
    }
    for k, v in extra.items():
        meta[k] = json.dumps(v, sort_keys=True)
    save_file(tensors, str(path), metadata=meta)
    _canonicalise_header(Path(path))


def _canonicalise_header(path: Path) -> None:
    """Rewrite the header with sorted keys: the writer emits metadata in hash
    order, which would make identical checkpoints differ byte-wise."""
    raw = path.read_bytes()
    n = int.from_bytes(raw[:8], "little")
    header = json.loads(raw[8:8 + n])
    header["__metadata__"] = dict(sorted(header["__metadata__"].items()))
    text = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    if len(text) > n:  # pragma: no cover - compact JSON never grows
        raise RuntimeError(f"{path}: canonical header longer than the original")
    path.write_bytes(raw[:8] + text + b" " * (n - len(text)) + raw[8 + n:])


def load_checkpoint(path: str | Path, kind: str | None = None) -> tuple[dict, dict, dict]:
    """Return (state_dict, config, extra metadata)."""
    with safe_open(str(path), framework="pt") as f:
        meta = dict(f.metadata() or {})
    if meta.get("format") != CHECKPOINT_FORMAT:
        raise ModelStateError(f"{path} is not a {CHECKPOINT_FORMAT} file")
    if meta.get("version") != CHECKPOINT_VERSION:
        raise ModelStateError(f"{path}: unsupported checkpoint version {meta.get('version')!r}")
    if kind is not None and meta.get("kind") != kind:
        raise ModelStateError(f"{path} holds a {meta.get('kind')!r} model, expected {kind!r}")
    state = load_file(str(path))
    config = json.loads(meta.pop("config"))
    extra = {k: json.loads(v) for k, v in meta.items() if k not in ("format", "version", "kind")}
    return state, config, extra


def seed_everything(seed: int) -> None:
    torch.manual_seed(seed)
    np.random.seed(seed % (2**32))


def load_pretrained(model: torch.nn.Module, path: str | Path) -> list[str]:
    """Copy every tensor from a safetensors file whose name and shape match a
    parameter of ``model``; returns the names copied.  Used to start training
    from external weights instead of a random init."""
    source = load_file(str(path))
    own = model.state_dict()
    copied = sorted(k for k, v in source.items() if k in own and own[k].shape == v.shape)
    if not copied:
        raise ModelStateError(f"{path}: no tensor matches the model's parameter names and shapes")
    model.load_state_dict({k: source[k] for k in copied}, strict=False)
    log.info("initialised %d/%d tensors from %s", len(copied), len(own), path)
    return copied
