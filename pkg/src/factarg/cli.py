"""``pipeline`` command: fixture -> annotate -> normalize -> filter -> train -> generate -> evaluate.

Every stage reads named files from the ``--in`` directories (later
directories win when a name appears twice), writes its outputs to ``--out``
and leaves a ``manifest.json`` with the content hashes of its inputs and
outputs, the hash of the config blocks it used and the seed.  Re-running a
stage whose manifest still matches is a no-op; a manifest that disagrees is
refused unless ``--force`` is given.

Exit codes: 0 success, 1 invalid data or config, 2 usage, 3 manifest
mismatch, 4 missing upstream file.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import Callable

import torch

from . import generator as gen
from .config import ConfigError, PipelineConfig, dump_config, load_config
from .corpus import CorpusError, read_corpus, read_kb, write_corpus, write_kb
from .evaluation import RuleNli, evaluate
from .fixtures import fixture_corpus
from .grounder import evaluate_grounder, save_grounder, train_grounder
from .normalize import (HashingEmbedding, NormalizationResult, SentenceTransformerEmbedding, SpanOutcome,
                        apply_quality_filters, normalize, scheme_probability_filter)
from .plotting import plot_report, plot_training
from .tagger import annotate, evaluate_tagger, load_tagger, save_tagger, train_scheme_tagger
from .training import ModelStateError, load_pretrained, seed_everything

log = logging.getLogger("factarg.pipeline")

TRAIN_VARIANTS = ("argspan", "argspanscheme-parallel", "argspanscheme-pipelined",
                  "argu-mono", "argu-dual", "argu-stance", "argu-scheme")

# file name -> stage that produces it
PRODUCERS = {
    "p1.jsonl": "fixture", "pc.jsonl": "fixture", "kb.jsonl": "fixture or filter",
    "argspanscheme.safetensors": "train --variant argspanscheme-*",
    "argu.safetensors": "train --variant argu-*",
    "annotated.jsonl": "annotate", "normalized.jsonl": "normalize", "outcomes.jsonl": "normalize",
    "merged.jsonl": "filter", "generations.jsonl": "generate",
}


class StageError(Exception):
    code = 1


class MissingInput(StageError):
    code = 4


class ManifestMismatch(StageError):
    code = 3


def sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


class Stage:
    """Input lookup, output bookkeeping and the manifest for one run."""

    def __init__(self, name: str, args, cfg: PipelineConfig, blocks: tuple[str, ...], variant: str | None = None):
        self.name, self.cfg, self.blocks, self.variant = name, cfg, blocks, variant
        self.in_dirs = [Path(p) for p in (args.inputs or [])]
        self.out = Path(args.out)
        self.force = args.force
        self.used: dict[str, Path] = {}
        self.outputs: list[str] = []
        self.counts: dict = {}

    def find(self, name: str, required: bool = True) -> Path | None:
        hit = None
        for d in self.in_dirs:
            p = d if d.is_file() and d.name == name else d / name
            if p.is_file():
                hit = p
        if hit is None:
            if required:
                searched = ", ".join(str(d) for d in self.in_dirs) or "(no --in given)"
                raise MissingInput(f"{self.name}: missing {name} (produced by the "
                                   f"'{PRODUCERS.get(name, 'an earlier')}' stage); searched {searched}")
            return None
        self.used[name] = hit
        return hit

    def path(self, name: str) -> Path:
        self.outputs.append(name)
        return self.out / name

    def _identity(self) -> dict:
        return {
            "stage": self.name,
            "variant": self.variant,
            "seed": self.cfg.seed,
            "config_hash": self.cfg.digest(*self.blocks),
            "inputs": {k: sha256(v) for k, v in sorted(self.used.items())},
        }

    def up_to_date(self) -> bool:
        """Check an existing manifest; True means the outputs are already current."""
        mpath = self.out / "manifest.json"
        if not mpath.exists():
            return False
        old = json.loads(mpath.read_text())
        ident = self._identity()
        diffs = [k for k in ident if old.get(k) != ident[k]]
        if not diffs:
            outs = old.get("outputs", {})
            if all((self.out / n).is_file() and sha256(self.out / n) == h for n, h in outs.items()):
                return True
            diffs = ["outputs"]
        if self.force:
            return False
        raise ManifestMismatch(f"{self.name}: {mpath} was written for different {', '.join(diffs)}; "
                               f"refusing to overwrite (use a fresh --out or pass --force)")

    def finish(self) -> None:
        manifest = {**self._identity(), "counts": self.counts,
                    "outputs": {n: sha256(self.out / n) for n in sorted(set(self.outputs))}}
        (self.out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def run_stage(stage: Stage, body: Callable[[Stage], None], resolve_inputs: Callable[[Stage], None]) -> None:
    resolve_inputs(stage)
    if stage.up_to_date():
        print(f"{stage.name}: up to date ({stage.out})")
        return
    stage.out.mkdir(parents=True, exist_ok=True)
    body(stage)
    stage.finish()
    print(f"{stage.name}: wrote {', '.join(sorted(set(stage.outputs)))} to {stage.out}")


def write_json(path: Path, data) -> None:
    path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")


def embedding_provider(cfg: PipelineConfig):
    if cfg.eval.embedding == "sentence-transformers":  # pragma: no cover
        return SentenceTransformerEmbedding()
    return HashingEmbedding(cfg.eval.embedding_width)


def pretrained_hook(path: str | None):
    return None if path is None else (lambda model: load_pretrained(model, path))


# -- stages -------------------------------------------------------------


def cmd_fixture(args, cfg):
    def body(st):
        p1, pc, kb = fixture_corpus(cfg.fixture)
        st.counts = {"p1": write_corpus(p1, st.path("p1.jsonl")), "pc": write_corpus(pc, st.path("pc.jsonl")),
                     "kb": len(kb)}
        write_kb(kb, st.path("kb.jsonl"))

    run_stage(Stage("fixture", args, cfg, ("fixture",)), body, lambda st: None)


def cmd_train(args, cfg):
    variant = args.variant
    if variant == "argspan":
        blocks, needs = ("grounder",), ("p1.jsonl", "kb.jsonl")
    elif variant.startswith("argspanscheme"):
        blocks, needs = ("tagger",), ("p1.jsonl",)
    else:
        blocks, needs = ("generator",), ("kb.jsonl",)

    def resolve(st):
        for n in needs:
            st.find(n)
        if variant.startswith("argu") and st.find("merged.jsonl", required=False) is None:
            st.find("p1.jsonl")
        if args.init:
            st.used["init.safetensors"] = Path(args.init)

    def body(st):
        init = pretrained_hook(args.init)
        if variant == "argspan":
            data, kb = list(read_corpus(st.used["p1.jsonl"])), read_kb(st.used["kb.jsonl"])
            model, trainlog = train_grounder(data, kb, cfg.grounder, init=init)
            save_grounder(model, st.path("argspan.safetensors"))
            metrics = evaluate_grounder(model, data, kb)
        elif variant.startswith("argspanscheme"):
            data = list(read_corpus(st.used["p1.jsonl"]))
            tcfg = replace(cfg.tagger, variant=variant.split("-")[1])
            model, trainlog = train_scheme_tagger(data, tcfg, init=init)
            save_tagger(model, st.path("argspanscheme.safetensors"))
            metrics = evaluate_tagger(model, data)
        else:
            src = st.used.get("merged.jsonl") or st.used["p1.jsonl"]
            data, kb = list(read_corpus(src)), read_kb(st.used["kb.jsonl"])
            gcfg = replace(cfg.generator, variant=variant.split("-")[1])
            model, trainlog = gen.train_generator(data, kb, gcfg, init=init)
            gen.save_generator(model, st.path("argu.safetensors"))
            metrics = {"final_train_loss": trainlog.steps[-1]["loss"]}
        write_json(st.path("train_log.json"), trainlog.to_dict())
        write_json(st.path("train_metrics.json"), metrics)
        plot_training(trainlog, st.path("training.png"), variant)
        st.counts = {"examples": len(data), "steps": len(trainlog.steps)}

    run_stage(Stage("train", args, cfg, blocks, variant), body, resolve)


def cmd_annotate(args, cfg):
    def resolve(st):
        st.find("pc.jsonl")
        st.find("argspanscheme.safetensors")

    def body(st):
        model = load_tagger(st.used["argspanscheme.safetensors"])
        out = [annotate(model, ex) for ex in read_corpus(st.used["pc.jsonl"])]
        st.counts = {"annotated": write_corpus(out, st.path("annotated.jsonl")),
                     "with_spans": sum(bool(ex.spans.spans) for ex in out)}

    run_stage(Stage("annotate", args, cfg, ()), body, resolve)


def cmd_normalize(args, cfg):
    def resolve(st):
        st.find("annotated.jsonl")
        st.find("kb.jsonl")

    def body(st):
        examples = list(read_corpus(st.used["annotated.jsonl"]))
        kb = read_kb(st.used["kb.jsonl"])
        survivors = scheme_probability_filter(examples, cfg.filter.scheme_prob_factor)
        result = normalize(survivors, kb, embedding_provider(cfg), cfg.filter)
        write_corpus(result.examples, st.path("normalized.jsonl"))
        with open(st.path("outcomes.jsonl"), "w") as f:
            for o in result.outcomes:
                f.write(json.dumps(o.to_record(), sort_keys=True) + "\n")
        kinds = {k: sum(o.kind == k for o in result.outcomes) for k in ("preset", "direct", "indirect", "unmapped")}
        st.counts = {"input": len(examples), "scheme_filtered": len(examples) - len(survivors),
                     "normalized": len(survivors), "spans": kinds}
        write_json(st.path("normalize_report.json"), st.counts)

    run_stage(Stage("normalize", args, cfg, ("filter", "eval")), body, resolve)


def cmd_filter(args, cfg):
    def resolve(st):
        for n in ("normalized.jsonl", "outcomes.jsonl", "kb.jsonl", "p1.jsonl"):
            st.find(n)

    def body(st):
        examples = list(read_corpus(st.used["normalized.jsonl"]))
        outcomes = [SpanOutcome(**json.loads(line)) for line in st.used["outcomes.jsonl"].read_text().splitlines()
                    if line.strip()]
        kb = read_kb(st.used["kb.jsonl"])
        result = apply_quality_filters(NormalizationResult(examples, outcomes, kb), cfg.filter)
        p1 = list(read_corpus(st.used["p1.jsonl"]))
        clash = sorted({ex.id for ex in p1} & {ex.id for ex in result.kept})
        if clash:
            raise StageError(f"filter: example ids present in both P1 and the filtered corpus: {clash[:5]}")
        write_corpus(result.kept, st.path("filtered.jsonl"))
        write_corpus([*p1, *result.kept], st.path("merged.jsonl"))
        write_kb(result.kb, st.path("kb.jsonl"))
        st.counts = {"input": len(examples), "kept": len(result.kept), "merged": len(p1) + len(result.kept),
                     "kb_before": len(kb), "kb_after": len(result.kb), "dropped_by": result.reason_counts()}
        write_json(st.path("filter_report.json"), {**st.counts, "decisions": {k: list(v) for k, v in
                                                                               sorted(result.decisions.items())}})

    run_stage(Stage("filter", args, cfg, ("filter",)), body, resolve)


def cmd_generate(args, cfg):
    def resolve(st):
        st.find("argu.safetensors")
        st.find("kb.jsonl")
        if st.find("merged.jsonl", required=False) is None:
            st.find("p1.jsonl")

    def body(st):
        model = gen.load_generator(st.used["argu.safetensors"])
        src = st.used.get("merged.jsonl") or st.used["p1.jsonl"]
        kb = read_kb(st.used["kb.jsonl"])
        variant = model.config.variant
        records, skipped = [], 0
        for ex in read_corpus(src):
            if not gen.eligible(ex, variant):
                skipped += 1
                continue
            scheme = gen.control_scheme(ex)
            rec = gen.generate(model, gen.display_topic(ex.topic), gen.example_variables(ex, kb),
                               ex.stance if variant != "scheme" else None, scheme if variant != "stance" else None,
                               seed=cfg.seed, reference=ex.text, example_id=ex.id)
            records.append(rec)
        if not records:
            raise StageError("generate: no example has 1-4 variables and a controllable scheme")
        with open(st.path("generations.jsonl"), "w") as f:
            for r in records:
                f.write(json.dumps(r.to_record(), sort_keys=True) + "\n")
        st.counts = {"generated": len(records), "skipped": skipped,
                     "flagged": sum(bool(r.flags) for r in records)}

    run_stage(Stage("generate", args, cfg, ("generator",)), body, resolve)


def cmd_evaluate(args, cfg):
    def resolve(st):
        st.find("generations.jsonl")

    def body(st):
        recs = [gen.GenerationRecord.from_record(json.loads(line))
                for line in st.used["generations.jsonl"].read_text().splitlines() if line.strip()]
        if any(r.reference is None for r in recs):
            raise StageError("evaluate: every generation needs a reference argument")
        report = evaluate([r.argument for r in recs], [r.reference for r in recs], [r.variables for r in recs],
                          embedding_provider(cfg), RuleNli(cfg.eval.nli_threshold),
                          ids=[r.example_id or str(i) for i, r in enumerate(recs)])
        name = recs[0].variant if recs else "model"
        st.path("report.json").write_text(report.to_json())
        st.path("report.txt").write_text(report.table(name))
        buf = io.StringIO()
        w = csv.writer(buf, delimiter="\t", lineterminator="\n")
        w.writerow(["id", "rouge_l", "fact", "entails", "contradicts", "generated", "reference"])
        for r in report.rows:
            w.writerow([r["id"], f"{r['rouge_l']:.6f}", f"{r['fact']:.6f}", int(r["entails"]),
                        int(r["contradicts"]), r["generated"], r["reference"]])
        st.path("report_rows.tsv").write_text(buf.getvalue())
        plot_report(report, st.path("metrics.png"), name)
        st.counts = {"evaluated": report.n}
        sys.stdout.write(report.table(name))

    run_stage(Stage("evaluate", args, cfg, ("eval",)), body, resolve)


def cmd_config(args, cfg):
    text = dump_config(cfg)
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)


# -- entry point --------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML config file (defaults apply when omitted)")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("-v", "--verbose", action="store_true")

    io_args = argparse.ArgumentParser(add_help=False)
    io_args.add_argument("--in", dest="inputs", nargs="+", default=[], metavar="DIR",
                         help="directories (or files) holding the upstream stage outputs")
    io_args.add_argument("--out", required=True, help="output directory")
    io_args.add_argument("--force", action="store_true", help="overwrite outputs whose manifest differs")

    p = argparse.ArgumentParser(prog="pipeline", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    for name, fn, help_ in [
        ("fixture", cmd_fixture, "write a synthetic labelled corpus, unlabelled corpus and KB"),
        ("annotate", cmd_annotate, "label the unlabelled corpus with a trained scheme tagger"),
        ("normalize", cmd_normalize, "scheme-probability filter, then ground spans to the KB"),
        ("filter", cmd_filter, "quality filters, KB expansion and merge with the labelled corpus"),
        ("generate", cmd_generate, "generate an argument for every eligible corpus example"),
        ("evaluate", cmd_evaluate, "score generations (BLEU, RougeL, Fact, Entail, Contra)"),
    ]:
        sp = sub.add_parser(name, parents=[common, io_args], help=help_)
        sp.set_defaults(func=fn)
    sp = sub.add_parser("train", parents=[common, io_args], help="train one model variant")
    sp.add_argument("--variant", required=True, choices=TRAIN_VARIANTS)
    sp.add_argument("--init", help="safetensors file with starting weights (matched by name and shape)")
    sp.set_defaults(func=cmd_train)
    sp = sub.add_parser("config", parents=[common], help="print the effective config")
    sp.add_argument("--out", help="write to this file instead of stdout")
    sp.set_defaults(func=cmd_config)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg = cfg.with_seed(args.seed)
        seed_everything(cfg.seed)
        torch.use_deterministic_algorithms(True)
        args.func(args, cfg)
    except StageError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.code
    except (ConfigError, CorpusError, ModelStateError, gen.TemplateError, ValueError, KeyError, OSError) as e:
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
