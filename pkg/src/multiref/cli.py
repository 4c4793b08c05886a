"""Command-line pipeline: preprocess, gen-hyps, train, evaluate, analyze-latents.

Every command works inside one experiment directory::

    <out>/manifest.json   config, seed and per-command summaries
    <out>/data/           train/valid/test sessions and vocab.tsv
    <out>/hyps/           multi-reference training data
    <out>/ckpt/           model checkpoints
    <out>/reports/        metric reports (.json and .txt)

The configuration is a JSON file with one section per stage. Command-line
flags override the file. Nothing time-dependent is written, so reruns with
the same seed give byte-identical outputs.
"""

from __future__ import annotations

import argparse
import copy
import json
import logging
import sys
from pathlib import Path

import numpy as np
import torch

from . import corpus as C
from .latent import PriorSpec
from .metrics import WordEmbeddingTable, evaluate_model, per_variable_report, write_report
from .models import ModelConfig, build_model
from .teacher import (
    ModelTeacher,
    Reference,
    ScriptTeacher,
    TeacherError,
    TemplateTeacher,
    UniformTeacher,
    build_multiref_dataset,
    epoch_budget,
    read_multiref,
    write_multiref,
)
from .training import (
    TrainSchedule,
    fit,
    instances_for_token_kd,
    instances_from_multiref,
    instances_from_pairs,
    load_checkpoint,
    save_checkpoint,
)

logger = logging.getLogger("multiref")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_RUNTIME = 0, 1, 2, 3

DEFAULT_CONFIG = {
    "seed": 0,
    "out": "experiment",
    "corpus": {"path": None, "ratios": [0.8, 0.1, 0.1], "history": C.MAX_HISTORY,
               "max_len": C.MAX_UTTERANCE_LEN, "min_count": 1, "dedup": True},
    "teacher": {"name": "template", "path": None},
    "hyps": {"n": 5, "include_gt": False, "p": 0.95, "max_len": C.MAX_UTTERANCE_LEN},
    "model": {"prior": "none"},
    "train": {"mode": "gt", "schedule": {}},
    "eval": {"embeddings": None, "decode": "greedy", "split": "test", "per_variable": False},
}


class CliError(Exception):
    def __init__(self, message: str, code: int = EXIT_USAGE):
        super().__init__(message)
        self.code = code


def _merge(base: dict, update: dict) -> dict:
    out = copy.deepcopy(base)
    for key, value in update.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], value)
        else:
            out[key] = value
    return out


def _read_json(path, what: str) -> dict:
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise CliError(f"{what} not found: {path}")
    except json.JSONDecodeError as exc:
        raise CliError(f"{what} {path} is not valid JSON: {exc}")


def load_config(args: argparse.Namespace) -> dict:
    cfg = copy.deepcopy(DEFAULT_CONFIG)
    if args.config:
        cfg = _merge(cfg, _read_json(args.config, "config file"))
    if args.seed is not None:
        cfg["seed"] = args.seed
    if args.out is not None:
        cfg["out"] = args.out
    get = lambda name: getattr(args, name, None)  # noqa: E731
    if get("corpus") is not None:
        cfg["corpus"]["path"] = args.corpus
    if get("teacher") is not None:
        cfg["teacher"]["name"] = args.teacher
    if get("teacher_path") is not None:
        cfg["teacher"]["path"] = args.teacher_path
    if get("n_refs") is not None:
        cfg["hyps"]["n"] = args.n_refs
    if get("include_gt"):
        cfg["hyps"]["include_gt"] = True
    if get("mode") is not None:
        cfg["train"]["mode"] = args.mode
    if get("prior") is not None:
        cfg["model"]["prior"] = args.prior
    if get("K") is not None:
        cfg["model"]["K"] = args.K
    if get("schedule") is not None:
        cfg["train"]["schedule"] = _merge(cfg["train"]["schedule"], _read_json(args.schedule, "schedule file"))
    if get("embeddings") is not None:
        cfg["eval"]["embeddings"] = args.embeddings
    if get("per_variable"):
        cfg["eval"]["per_variable"] = True
    return cfg


class Experiment:
    """Paths and manifest of one experiment directory."""

    def __init__(self, root):
        self.root = Path(root)
        self.data = self.root / "data"
        self.hyps = self.root / "hyps"
        self.ckpt = self.root / "ckpt"
        self.reports = self.root / "reports"
        self.manifest_path = self.root / "manifest.json"

    def ensure(self):
        for d in (self.data, self.hyps, self.ckpt, self.reports):
            d.mkdir(parents=True, exist_ok=True)

    def manifest(self) -> dict:
        if self.manifest_path.exists():
            return json.loads(self.manifest_path.read_text(encoding="utf-8"))
        return {}

    def record(self, section: str, payload: dict, config: dict) -> None:
        manifest = self.manifest()
        manifest["seed"] = config["seed"]
        manifest[section] = {"config": config, **payload}
        self.manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")

    def split_path(self, name: str) -> Path:
        return self.data / f"{name}.jsonl"

    def vocab(self) -> C.Vocabulary:
        path = self.data / "vocab.tsv"
        if not path.exists():
            raise CliError(f"{path} is missing; run preprocess first", EXIT_DATA)
        return C.Vocabulary.load(path)

    def pairs(self, split: str, cfg: dict) -> list[C.ContextResponsePair]:
        path = self.split_path(split)
        if not path.exists():
            raise CliError(f"{path} is missing; run preprocess first", EXIT_DATA)
        sessions = C.read_sessions(path)
        return C.build_all_pairs(sessions, cfg["corpus"]["history"], cfg["corpus"]["max_len"])


def _seed_everything(seed: int) -> None:
    torch.manual_seed(seed)
    np.random.seed(seed)


# ---------------------------------------------------------------------------
# Commands


def cmd_preprocess(cfg: dict) -> dict:
    ccfg = cfg["corpus"]
    if not ccfg.get("path"):
        raise CliError("no corpus path given (--corpus or corpus.path)")
    if not Path(ccfg["path"]).exists():
        raise CliError(f"corpus file not found: {ccfg['path']}", EXIT_DATA)
    try:
        sessions = C.read_sessions(ccfg["path"])
    except C.CorpusFormatError as exc:
        for line, problem in exc.problems:
            print(f"{ccfg['path']}:{line}: {problem}", file=sys.stderr)
        raise CliError(f"{len(exc.problems)} malformed record(s)", EXIT_DATA)
    if not sessions:
        raise CliError("corpus is empty", EXIT_DATA)
    kept = C.deduplicate_sessions(sessions) if ccfg.get("dedup", True) else sessions
    try:
        splits = C.split_sessions(kept, tuple(ccfg["ratios"]), seed=cfg["seed"])
    except ValueError as exc:
        raise CliError(str(exc), EXIT_DATA)
    exp = Experiment(cfg["out"])
    exp.ensure()
    counts = {"sessions_read": len(sessions), "sessions_kept": len(kept)}
    all_pairs = {}
    for name, part in zip(("train", "valid", "test"), splits):
        C.write_sessions(exp.split_path(name), part)
        all_pairs[name] = C.build_all_pairs(part, ccfg["history"], ccfg["max_len"])
        counts[f"{name}_sessions"] = len(part)
        counts[f"{name}_pairs"] = len(all_pairs[name])
    vocab = C.build_vocab(all_pairs["train"], ccfg.get("min_count", 1))
    vocab.save(exp.data / "vocab.tsv")
    counts["vocab_size"] = len(vocab)
    counts["vocab_hash"] = vocab.digest()
    exp.record("preprocess", counts, cfg)
    return counts


def make_teacher(cfg: dict, vocab: C.Vocabulary | None = None):
    tcfg = cfg["teacher"]
    name = tcfg.get("name")
    tokens = list(vocab.id2token) if vocab is not None else None
    try:
        if name == "template":
            if not tcfg.get("path"):
                raise CliError("template teacher needs teacher.path", EXIT_USAGE)
            return TemplateTeacher.load(tcfg["path"], tokens)
        if name == "uniform":
            return UniformTeacher(tokens)
        if name == "script":
            return ScriptTeacher(tokens, tcfg.get("script", "").split())
        if name == "model":
            model, _ = load_checkpoint(tcfg["path"], vocab)
            return ModelTeacher(model, vocab)
    except FileNotFoundError as exc:
        raise CliError(f"teacher unavailable: {exc}", EXIT_RUNTIME)
    except ValueError as exc:
        raise CliError(f"teacher unavailable: {exc}", EXIT_RUNTIME)
    raise CliError(f"unknown teacher {name!r}")


def cmd_generate_hypotheses(cfg: dict) -> dict:
    exp = Experiment(cfg["out"])
    hcfg = cfg["hyps"]
    pairs = exp.pairs("train", cfg)
    teacher = make_teacher(cfg, None if cfg["teacher"]["name"] == "template" else exp.vocab())
    if hcfg["n"] < 1:
        raise CliError("gen-hyps needs --n-refs >= 1")
    data = build_multiref_dataset(pairs, teacher, hcfg["n"], hcfg["include_gt"], hcfg["p"], hcfg["max_len"],
                                  seed=cfg["seed"])
    if not data:
        raise CliError("teacher produced no hypotheses", EXIT_RUNTIME)
    exp.ensure()
    path = exp.hyps / "hyps.jsonl"
    write_multiref(path, data)
    summary = {
        "file": str(path.relative_to(exp.root)),
        "n": hcfg["n"],
        "include_gt": hcfg["include_gt"],
        "p": hcfg["p"],
        "teacher": cfg["teacher"]["name"],
        "pairs": len(data),
        "skipped": len(pairs) - len(data),
        "hypotheses": sum(r.source == "hypothesis" for ex in data for r in ex.references),
    }
    exp.record("gen-hyps", summary, cfg)
    return summary


def _model_config(cfg: dict, vocab_size: int) -> ModelConfig:
    mcfg = dict(cfg["model"])
    prior = mcfg.pop("prior", "none")
    K = mcfg.pop("K", None)
    spec = PriorSpec.parse(prior) if isinstance(prior, str) else PriorSpec(**prior)
    if K is not None:
        spec = PriorSpec(spec.family, int(K), spec.gmm_temperature)
    try:
        return ModelConfig(vocab_size=vocab_size, prior=spec, **mcfg)
    except TypeError as exc:
        raise CliError(f"bad model section: {exc}")


def _training_instances(cfg: dict, exp: Experiment, vocab: C.Vocabulary, train_pairs):
    mode = cfg["train"]["mode"]
    if mode == "gt":
        return instances_from_pairs(train_pairs), 0, True
    if mode in ("hyp", "mixed"):
        path = exp.hyps / "hyps.jsonl"
        if not path.exists():
            raise CliError(f"{path} is missing; run gen-hyps first", EXIT_DATA)
        data = read_multiref(path)
        n_cap = cfg["hyps"]["n"]
        gt = {p.pair_id: p.response for p in train_pairs}
        examples = []
        for ex in data:
            hyps = [r for r in ex.references if r.source == "hypothesis"][:n_cap]
            refs = list(hyps)
            if mode == "mixed":
                if ex.pair_id not in gt:
                    raise CliError(f"hypotheses for unknown pair {ex.pair_id}", EXIT_DATA)
                refs.append(Reference(gt[ex.pair_id], 0.0, "ground-truth"))
            for r in refs:
                r.weight = 1.0 / len(refs)
            ex.references = refs
            examples.append(ex)
        n = min(n_cap, min(sum(r.source == "hypothesis" for r in ex.references) for ex in examples))
        return instances_from_multiref(examples), n, mode == "mixed"
    if mode == "token-kd":
        teacher = make_teacher(cfg, vocab)
        try:
            return instances_for_token_kd(train_pairs, teacher, vocab), 0, True
        except (TeacherError, ValueError) as exc:
            raise CliError(f"token-level distillation failed: {exc}", EXIT_RUNTIME)
    raise CliError(f"unknown training mode {mode!r}")


def cmd_train(cfg: dict, resume_from: str | None = None) -> dict:
    exp = Experiment(cfg["out"])
    vocab = exp.vocab()
    train_pairs = exp.pairs("train", cfg)
    valid_pairs = exp.pairs("valid", cfg)
    instances, n, with_gt = _training_instances(cfg, exp, vocab, train_pairs)
    sched = dict(cfg["train"].get("schedule", {}))
    if "max_epochs" not in sched:
        sched["max_epochs"], _ = epoch_budget(n, with_gt, n_pairs=len(train_pairs))
    try:
        schedule = TrainSchedule.from_dict(sched)
    except (TypeError, ValueError) as exc:
        raise CliError(f"bad schedule: {exc}")
    _seed_everything(cfg["seed"])
    resume = None
    if resume_from:
        try:
            model, resume = load_checkpoint(resume_from, vocab)
        except ValueError as exc:
            raise CliError(str(exc))
    else:
        model = build_model(_model_config(cfg, len(vocab)), vocab)
    exp.ensure()
    ckpt_path = exp.ckpt / "model.pt"
    result = fit(model, instances, valid_pairs, vocab, schedule, seed=cfg["seed"], resume=resume)
    epoch = (result.log[-1]["epoch"] if result.log else (resume or {}).get("epoch", 0))
    save_checkpoint(ckpt_path, result.model, vocab, result.optimizer, result.step, result.lr_state, cfg["seed"],
                    epoch, ((resume or {}).get("log") or []) + result.log)
    log_path = exp.ckpt / "train_log.jsonl"
    with open(log_path, "a" if resume else "w", encoding="utf-8") as fh:
        for rec in result.log:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    summary = {
        "checkpoint": str(ckpt_path.relative_to(exp.root)),
        "mode": cfg["train"]["mode"],
        "n_refs": n,
        "instances": len(instances),
        "max_epochs": schedule.max_epochs,
        "epochs_run": len(result.log),
        "steps": result.step,
        "best_val": result.best_val,
    }
    exp.record("train", summary, cfg)
    return summary


def _load_for_eval(cfg: dict, checkpoint: str | None):
    exp = Experiment(cfg["out"])
    vocab = exp.vocab()
    path = Path(checkpoint) if checkpoint else exp.ckpt / "model.pt"
    if not path.exists():
        raise CliError(f"checkpoint not found: {path}", EXIT_DATA)
    try:
        model, _ = load_checkpoint(path, vocab)
    except ValueError as exc:
        raise CliError(str(exc))
    pairs = exp.pairs(cfg["eval"]["split"], cfg)
    if not pairs:
        raise CliError(f"{cfg['eval']['split']} split is empty", EXIT_DATA)
    table = None
    emb = cfg["eval"].get("embeddings")
    if emb:
        if not Path(emb).exists():
            raise CliError(f"embedding table not found: {emb}", EXIT_DATA)
        table = WordEmbeddingTable.load(emb)
    return exp, vocab, model, pairs, table


def cmd_evaluate(cfg: dict, checkpoint: str | None = None) -> dict:
    exp, vocab, model, pairs, table = _load_for_eval(cfg, checkpoint)
    _seed_everything(cfg["seed"])
    report, hyps = evaluate_model(model, pairs, vocab, table, cfg["eval"]["decode"], cfg["seed"])
    exp.ensure()
    extra = {"seed": cfg["seed"], "split": cfg["eval"]["split"], "decode": cfg["eval"]["decode"]}
    write_report(exp.reports / "metrics", [report], extra)
    with open(exp.reports / "responses.txt", "w", encoding="utf-8") as fh:
        for pair, hyp in zip(pairs, hyps):
            fh.write(f"{pair.pair_id}\t{hyp.text}\n")
    out = {"metrics": report.to_dict()}
    if cfg["eval"].get("per_variable"):
        out["per_variable"] = _per_variable(exp, model, pairs, vocab, table, cfg)
    exp.record("evaluate", out, cfg)
    return out


def _per_variable(exp, model, pairs, vocab, table, cfg) -> list[dict]:
    if not model.prior_spec.mixture:
        raise CliError("per-variable analysis needs a GMM or LGM checkpoint")
    rows = per_variable_report(model, pairs, vocab, table, cfg["seed"], cfg["eval"]["decode"])
    mixed, _ = evaluate_model(model, pairs, vocab, table, cfg["eval"]["decode"], cfg["seed"])
    mixed.avg_pi = float(sum(r.avg_pi for r in rows))
    rows.append(mixed)
    write_report(exp.reports / "per_variable", rows, {"seed": cfg["seed"], "split": cfg["eval"]["split"]})
    return [r.to_dict() for r in rows]


def cmd_analyze_latents(cfg: dict, checkpoint: str | None = None) -> dict:
    exp, vocab, model, pairs, table = _load_for_eval(cfg, checkpoint)
    if not model.variational:
        raise CliError("analyze-latents needs a variational checkpoint")
    if model.prior_spec.K < 2:
        raise CliError("analyze-latents needs a mixture prior with K > 1")
    _seed_everything(cfg["seed"])
    exp.ensure()
    rows = _per_variable(exp, model, pairs, vocab, table, cfg)
    exp.record("analyze-latents", {"rows": len(rows)}, cfg)
    return {"rows": rows}


# ---------------------------------------------------------------------------
# Argument parsing


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", help="experiment directory")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="multiref", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("preprocess", parents=[common], help="normalize, deduplicate, split and build the vocabulary")
    p.add_argument("--corpus", help="raw sessions (JSONL)")

    p = sub.add_parser("gen-hyps", parents=[common], help="sample teacher hypotheses for the training pairs")
    p.add_argument("--teacher", choices=["template", "uniform", "script", "model"])
    p.add_argument("--teacher-path", help="teacher file (template JSON or model checkpoint)")
    p.add_argument("--n-refs", type=int)
    p.add_argument("--include-gt", action="store_true")

    p = sub.add_parser("train", parents=[common], help="train a model")
    p.add_argument("--mode", choices=["gt", "hyp", "mixed", "token-kd"])
    p.add_argument("--n-refs", type=int, help="hypotheses per context to use")
    p.add_argument("--prior", choices=["none", "unimodal", "gmm", "lgm"])
    p.add_argument("--K", type=int)
    p.add_argument("--schedule", help="JSON file with training schedule overrides")
    p.add_argument("--teacher", choices=["template", "uniform", "script", "model"])
    p.add_argument("--teacher-path")
    p.add_argument("--resume", help="checkpoint to resume from")

    for name, help_ in (("evaluate", "score a checkpoint on the test split"),
                        ("analyze-latents", "per-variable report for a mixture-prior checkpoint")):
        p = sub.add_parser(name, parents=[common], help=help_)
        p.add_argument("--checkpoint")
        p.add_argument("--embeddings", help="word embedding table for the similarity metrics")
        if name == "evaluate":
            p.add_argument("--per-variable", action="store_true")
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args)
        if args.command == "preprocess":
            out = cmd_preprocess(cfg)
        elif args.command == "gen-hyps":
            out = cmd_generate_hypotheses(cfg)
        elif args.command == "train":
            out = cmd_train(cfg, args.resume)
        elif args.command == "evaluate":
            out = cmd_evaluate(cfg, args.checkpoint)
        else:
            out = cmd_analyze_latents(cfg, args.checkpoint)
    except CliError as exc:
        print(f"multiref {args.command}: error: {exc}", file=sys.stderr)
        return exc.code
    except (C.CorpusFormatError, KeyError, json.JSONDecodeError) as exc:
        print(f"multiref {args.command}: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except Exception as exc:  # noqa: BLE001
        logger.exception("unexpected failure")
        print(f"multiref {args.command}: failed: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    if args.verbose:
        print(json.dumps(out, indent=2, sort_keys=True))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
