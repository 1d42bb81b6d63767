"""Drive the whole ``pipeline`` CLI in a scratch directory."""

from __future__ import annotations

from pathlib import Path

import yaml

from factarg.cli import main

FAST = {
    "seed": 0,
    "fixture": {"num_topics": 2, "examples_per_topic": 12, "pc_examples_per_topic": 12},
    "grounder": {"layers": 1, "hidden": 32, "reduced_dim": 16, "learning_rate": 1e-3, "batch_size": 8,
                 "max_steps": 60, "eval_every": 20},
    "tagger": {"layers": 1, "hidden": 32, "learning_rate": 1e-3, "batch_size": 8, "max_steps": 120,
               "eval_every": 40},
    "generator": {"encoder_layers": 1, "decoder_layers": 1, "hidden": 32, "learning_rate": 1e-3,
                  "batch_size": 16, "max_steps": 80, "eval_every": 40, "beam_width": 2, "max_length": 30},
}

STEPS = [
    ("fixture", [], "fixture"),
    ("train", ["fixture"], "argspan", ["--variant", "argspan"]),
    ("train", ["fixture"], "tagger", ["--variant", "argspanscheme-pipelined"]),
    ("annotate", ["fixture", "tagger"], "annotate"),
    ("normalize", ["annotate", "fixture"], "normalize"),
    ("filter", ["fixture", "normalize"], "filter"),
    ("train", ["fixture", "filter"], "argu", ["--variant", "argu-dual"]),
    ("generate", ["fixture", "filter", "argu"], "generate"),
    ("evaluate", ["generate"], "evaluate"),
]


def write_config(path: Path, overrides: dict | None = None) -> Path:
    data = {k: dict(v) if isinstance(v, dict) else v for k, v in FAST.items()}
    for k, v in (overrides or {}).items():
        if isinstance(v, dict):
            data.setdefault(k, {}).update(v)
        else:
            data[k] = v
    path.write_text(yaml.safe_dump(data))
    return path


def run_all(root: Path, config: Path, extra: list[str] | None = None) -> list[int]:
    codes = []
    for cmd, ins, out, *flags in STEPS:
        argv = [cmd, "--config", str(config), "--out", str(root / out)]
        if ins:
            argv += ["--in", *[str(root / d) for d in ins]]
        argv += (flags[0] if flags else []) + (extra or [])
        codes.append(main(argv))
        if codes[-1] != 0:
            break
    return codes


def snapshot(root: Path) -> dict[str, bytes]:
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}
