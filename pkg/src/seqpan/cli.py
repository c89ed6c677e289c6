"""Command-line entry point: synth, train, eval, predict, gradcheck, ablate.

Exit codes: 0 success, 2 invalid input or configuration, 3 numerical
failure (non-finite values or a failed gradient check).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import gradcheck
from .data import (
    AnnotationError,
    FeatureFormatError,
    Vocabulary,
    load_annotations,
    load_split,
    load_word_vectors,
    synth_dataset,
    write_synthetic,
)
from .evaluation import predict, read_predictions, score_predictions, write_predictions
from .layers import CheckpointError, read_checkpoint, write_checkpoint
from .model import AttentionVariant, MatchMode, ModelConfig, SeqPAN
from .training import NumericalError, TrainConfig, train_loop

logger = logging.getLogger("seqpan")

EXIT_OK, EXIT_INVALID, EXIT_NUMERIC = 0, 2, 3
CHECKPOINT_NAME = "model.sqpn"


class UsageError(ValueError):
    """Bad flags, config values or file contents; maps to exit code 2."""


@dataclass
class RunConfig:
    """Everything a run needs, as flat keys (model fields included)."""

    # model
    d: int = 128
    heads: int = 8
    n_sgpa: int = 2
    tau: float = 0.3
    N: int = 64
    M: int = 20
    dropout: float = 0.2
    attention_variant: str = "SGPA"
    match_mode: str = "SQ_MATCH"
    eta: float = 0.25
    video_dim: int | None = None
    word_dim: int | None = None
    conv_kernel: int = 7
    conv_depth: int = 2
    attn_dropout: bool = True
    sublayer_dropout: bool = True
    share_cqa_weight: bool = True
    eval_sampling: bool = False
    # paths
    data: str | None = None
    word_vectors: str | None = None
    checkpoint: str | None = None
    out: str | None = None
    # optimisation
    seed: int = 0
    epochs: int = 100
    batch_size: int = 16
    lr: float = 1e-4
    weight_decay: float = 0.01
    clip_norm: float = 1.0
    patience: int = 10
    precision: str = "float32"

    def __post_init__(self):
        if self.precision not in ("float32", "float64"):
            raise UsageError(f"precision must be float32 or float64, got {self.precision!r}")
        for name in ("epochs", "batch_size", "patience"):
            if getattr(self, name) < 1:
                raise UsageError(f"{name} must be at least 1")
        if self.lr <= 0:
            raise UsageError("lr must be positive")

    @classmethod
    def keys(cls) -> set[str]:
        return {f.name for f in fields(cls)}

    @classmethod
    def from_sources(cls, *layers: dict) -> "RunConfig":
        """Later layers override earlier ones; ``None`` values are skipped."""
        merged: dict = {}
        for layer in layers:
            unknown = set(layer) - cls.keys()
            if unknown:
                raise UsageError(f"unknown config keys: {sorted(unknown)}")
            merged.update({k: v for k, v in layer.items() if v is not None})
        return cls(**merged)

    def model_config(self, video_dim: int, word_dim: int) -> ModelConfig:
        raw = {k: v for k, v in asdict(self).items() if k in {f.name for f in fields(ModelConfig)}}
        raw.update(video_dim=video_dim, word_dim=word_dim)
        try:
            return ModelConfig(**raw)
        except ValueError as exc:
            raise UsageError(str(exc)) from exc

    def train_config(self) -> TrainConfig:
        return TrainConfig(epochs=self.epochs, batch_size=self.batch_size, lr=self.lr,
                           weight_decay=self.weight_decay, clip_norm=self.clip_norm,
                           patience=self.patience, seed=self.seed)

    @property
    def dtype(self):
        return np.float32 if self.precision == "float32" else np.float64

    def to_dict(self) -> dict:
        return asdict(self)


def read_config_file(path) -> dict:
    try:
        raw = json.loads(Path(path).read_text())
    except FileNotFoundError as exc:
        raise UsageError(f"config file {path} not found") from exc
    except json.JSONDecodeError as exc:
        raise UsageError(f"config file {path} is not valid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise UsageError(f"config file {path} must hold a JSON object")
    return raw


# -- argument parsing ----------------------------------------------------

def _bool(text: str) -> bool:
    low = text.lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


_MODEL_FLAGS = [
    ("d", int), ("heads", int), ("n_sgpa", int), ("tau", float), ("N", int), ("M", int),
    ("dropout", float), ("eta", float), ("video_dim", int), ("word_dim", int),
    ("conv_kernel", int), ("conv_depth", int), ("attn_dropout", _bool), ("sublayer_dropout", _bool),
    ("share_cqa_weight", _bool), ("eval_sampling", _bool),
]
_TRAIN_FLAGS = [("epochs", int), ("batch_size", int), ("lr", float), ("weight_decay", float),
                ("clip_norm", float), ("patience", int)]


def _add_run_flags(p: argparse.ArgumentParser, train: bool) -> None:
    p.add_argument("--config", help="JSON file with flat RunConfig keys; flags override it")
    p.add_argument("--seed", type=int)
    p.add_argument("--word-vectors", dest="word_vectors", help="text word-vector file (random init if absent)")
    p.add_argument("--precision", choices=["float32", "float64"])
    g = p.add_argument_group("model")
    for name, typ in _MODEL_FLAGS:
        g.add_argument(f"--{name.replace('_', '-')}", dest=name, type=typ)
    g.add_argument("--attention-variant", dest="attention_variant", choices=[v.value for v in AttentionVariant])
    g.add_argument("--match-mode", dest="match_mode", choices=[m.value for m in MatchMode])
    if train:
        t = p.add_argument_group("training")
        for name, typ in _TRAIN_FLAGS:
            t.add_argument(f"--{name.replace('_', '-')}", dest=name, type=typ)


def _flag_layer(args: argparse.Namespace) -> dict:
    keys = RunConfig.keys()
    return {k: v for k, v in vars(args).items() if k in keys}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="seqpan", description="Span-based video grounding with sequence matching.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a synthetic planted-span dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--samples", type=int, default=1000)
    p.add_argument("--n", type=int, default=32, help="frames per video")
    p.add_argument("--dv", type=int, default=64, help="feature dimension")
    p.add_argument("--vocab", type=int, default=50)
    p.add_argument("--classes", type=int, default=8)
    p.add_argument("--signal", type=float, default=1.0, help="norm of the planted class direction")
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("train", help="train on <data>/train.jsonl, select on <data>/val.jsonl")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    _add_run_flags(p, train=True)

    for name, text in (("eval", "score a checkpoint on a split"), ("predict", "write predictions JSONL")):
        p = sub.add_parser(name, help=text)
        p.add_argument("--checkpoint", required=True, help=f"{CHECKPOINT_NAME} file or the train output dir")
        p.add_argument("--data", required=True)
        p.add_argument("--split", default="test")
        if name == "predict":
            p.add_argument("--out", required=True)
        _add_run_flags(p, train=False)

    p = sub.add_parser("gradcheck", help="finite-difference check of every op and the full loss")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--dims", choices=["tiny", "ops"], default="tiny",
                   help="tiny: ops plus the d=8/N=6/M=4 model; ops: primitives only")

    p = sub.add_parser("ablate", help="train the attention / matching ablation matrix")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seeds", type=int, default=5)
    p.add_argument("--jobs", type=int, default=1)
    _add_run_flags(p, train=True)
    return parser


# -- helpers ---------------------------------------------------------------

def _feature_dim(data_dir: Path) -> int:
    from .data import load_features

    records = load_annotations(data_dir / "train.jsonl")
    if not records:
        raise UsageError(f"{data_dir}/train.jsonl is empty")
    return load_features(data_dir / "features" / f"{records[0].video_id}.sqft").matrix.shape[0]


def _resolve_checkpoint(path: str) -> Path:
    p = Path(path)
    if p.is_dir():
        p = p / CHECKPOINT_NAME
    if not p.exists():
        raise UsageError(f"checkpoint {p} not found")
    return p


def _load_checkpoint(path: Path) -> dict[str, np.ndarray]:
    try:
        with open(path, "rb") as fh:
            return read_checkpoint(fh)
    except CheckpointError as exc:
        raise UsageError(f"{path}: {exc}") from exc


def _check_dims(state: dict[str, np.ndarray], cfg: ModelConfig) -> None:
    """Compare the config against the extents recorded in the checkpoint header."""
    w = state.get("ffn_v.weight")
    if w is None:
        raise UsageError("checkpoint has no ffn_v.weight entry")
    d_ckpt, dv_ckpt = w.shape
    if d_ckpt != cfg.d:
        raise UsageError(f"dimension mismatch: checkpoint has d={d_ckpt}, config has d={cfg.d}")
    if dv_ckpt != cfg.video_dim:
        raise UsageError(f"dimension mismatch: checkpoint has video_dim={dv_ckpt}, config has video_dim={cfg.video_dim}")


def _save_model(model: SeqPAN, path: Path) -> None:
    with open(path, "wb") as fh:
        write_checkpoint(fh, sorted(model.state_dict().items()))


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def fit(run: RunConfig, data_dir: Path, out_dir: Path | None = None, quiet: bool = False) -> dict:
    """Train one model; returns a summary dict (and writes artifacts if ``out_dir``)."""
    dv = _feature_dim(data_dir)
    if run.video_dim is not None and run.video_dim != dv:
        raise UsageError(f"config video_dim={run.video_dim} but features in {data_dir} have d_v={dv}")
    vocab = Vocabulary.build(load_annotations(data_dir / "train.jsonl"))
    rng = np.random.default_rng(run.seed)
    words = load_word_vectors(run.word_vectors, vocab, rng, dim=run.word_dim or 300)
    cfg = run.model_config(dv, words.shape[0])
    run.video_dim, run.word_dim = cfg.video_dim, cfg.word_dim
    train_set = load_split(data_dir, "train", vocab, cfg.N, cfg.M, cfg.eta)
    if (data_dir / "val.jsonl").exists():
        val_set = load_split(data_dir, "val", vocab, cfg.N, cfg.M, cfg.eta)
    else:
        # no validation file: hold out every tenth training sample
        idx = np.arange(len(train_set))
        val_set, train_set = train_set.subset(idx[::10]), train_set.subset(np.setdiff1d(idx, idx[::10]))
    model = SeqPAN(cfg, words, rng=rng, dtype=run.dtype)
    on_epoch = None if quiet else (lambda e: logger.info(e.line()))
    result = train_loop(model, train_set, val_set, run.train_config(), on_epoch=on_epoch)
    model.load_state_dict(result.best_state)
    summary = {"config": run.to_dict(), "seed": run.seed, "best_epoch": result.best_epoch,
               "stopped_early": result.stopped_early, "epochs_run": len(result.log),
               "val": result.best_report.to_dict(), "seconds": round(result.seconds, 2)}
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        _write_json(out_dir / "config.json", run.to_dict())
        vocab.save(out_dir / "vocab.json")
        _save_model(model, out_dir / CHECKPOINT_NAME)
        (out_dir / "metrics.csv").write_text(
            f"# seed={run.seed} config={json.dumps(run.to_dict(), sort_keys=True)}\n" + result.metric_log())
        _write_json(out_dir / "summary.json", summary)
    return summary


def _restore(args) -> tuple[SeqPAN, RunConfig, Vocabulary]:
    ckpt = _resolve_checkpoint(args.checkpoint)
    layers = []
    sibling = ckpt.parent / "config.json"
    if sibling.exists():
        layers.append(read_config_file(sibling))
    if args.config:
        layers.append(read_config_file(args.config))
    layers.append(_flag_layer(args))
    run = RunConfig.from_sources(*layers)
    vocab_path = ckpt.parent / "vocab.json"
    if not vocab_path.exists():
        raise UsageError(f"vocabulary {vocab_path} not found next to the checkpoint")
    vocab = Vocabulary.load(vocab_path)
    state = _load_checkpoint(ckpt)
    words = state.get("buffer.word_vectors")
    if words is None:
        raise UsageError("checkpoint lacks the word table")
    cfg = run.model_config(run.video_dim or state["ffn_v.weight"].shape[1], words.shape[0])
    _check_dims(state, cfg)
    model = SeqPAN(cfg, words, rng=run.seed, dtype=run.dtype)
    try:
        model.load_state_dict(state)
    except (KeyError, ValueError) as exc:
        raise UsageError(str(exc)) from exc
    return model, run, vocab


# -- commands --------------------------------------------------------------

def cmd_synth(args) -> int:
    if args.samples < 10:
        raise UsageError("--samples must be at least 10 for an 80/10/10 split")
    rng = np.random.default_rng(args.seed)
    try:
        data = synth_dataset(args.samples, args.n, args.dv, args.vocab, rng, n_classes=args.classes,
                             signal_scale=args.signal)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    n_train = int(round(0.8 * args.samples))
    n_val = int(round(0.1 * args.samples))
    idx = np.arange(args.samples)
    splits = {"train": idx[:n_train], "val": idx[n_train:n_train + n_val], "test": idx[n_train + n_val:]}
    meta = {"seed": args.seed, "samples": args.samples, "n": args.n, "dv": args.dv, "vocab": args.vocab,
            "classes": args.classes, "signal": args.signal,
            "splits": {k: len(v) for k, v in splits.items()}}
    try:
        write_synthetic(args.out, data, splits, meta)
    except OSError as exc:
        raise UsageError(f"cannot write to {args.out}: {exc}") from exc
    print(json.dumps(meta, sort_keys=True))
    return EXIT_OK


def cmd_train(args) -> int:
    layers = [read_config_file(args.config)] if args.config else []
    run = RunConfig.from_sources(*layers, _flag_layer(args), {"data": args.data, "out": args.out})
    summary = fit(run, Path(args.data), Path(args.out))
    print(json.dumps(summary, indent=2, sort_keys=True))
    return EXIT_OK


def _load_eval_split(args, run: RunConfig, vocab: Vocabulary, cfg: ModelConfig):
    return load_split(args.data, args.split, vocab, cfg.N, cfg.M, cfg.eta)


def cmd_eval(args) -> int:
    model, run, vocab = _restore(args)
    dataset = _load_eval_split(args, run, vocab, model.config)
    report = score_predictions(predict(model, dataset), dataset)
    report.extra.update(seed=run.seed, split=args.split, config=run.to_dict())
    print(report.to_json())
    print(report.histogram_text())
    return EXIT_OK


def cmd_predict(args) -> int:
    model, run, vocab = _restore(args)
    dataset = _load_eval_split(args, run, vocab, model.config)
    preds = predict(model, dataset)
    out = Path(args.out)
    write_predictions(out, preds)
    # JSONL rows stay in the documented shape; the run record goes alongside
    _write_json(out.with_name(out.name + ".meta.json"),
                {"seed": run.seed, "split": args.split, "count": len(preds), "config": run.to_dict()})
    report = score_predictions(read_predictions(out), dataset)
    print(json.dumps({"written": str(out), "count": len(preds), "miou": report.miou}, sort_keys=True))
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    report = gradcheck.run(args.seed, include_model=args.dims == "tiny")
    for line in report.lines():
        print(line)
    if not report.ok:
        print(f"FAILED: {', '.join(report.failures)}")
        return EXIT_NUMERIC
    return EXIT_OK


# Cells actually reported: the attention comparison runs without sequence
# matching and with a single attention block; the matching comparison uses
# the full model.
ABLATION_CELLS = (
    [("attention", v, "NONE", 1) for v in ("SGPA", "PA", "SE_TRM", "CO_TRM")]
    + [("matching", "SGPA", m, None) for m in ("FB_MATCH", "NONE", "GUMBEL_NO_EMB", "SQ_MATCH")]
)


def _ablation_job(job: tuple) -> dict:
    run_dict, data_dir = job
    run = RunConfig(**run_dict)
    s = fit(run, Path(data_dir), quiet=True)
    return {"miou": s["val"]["miou"], **{k: s["val"][k] for k in s["val"] if k.startswith("r1@")}}


def ablation_table(rows: list[dict]) -> str:
    metrics = ["r1@0.3", "r1@0.5", "r1@0.7", "miou"]
    head = "| table | attention | matching | n_sgpa | " + " | ".join(metrics) + " |"
    out = [head, "|" + "---|" * (4 + len(metrics))]
    for r in rows:
        cells = " | ".join(f"{100 * r['mean'][m]:.2f} ± {100 * r['std'][m]:.2f}" for m in metrics)
        out.append(f"| {r['table']} | {r['attention_variant']} | {r['match_mode']} | {r['n_sgpa']} | {cells} |")
    return "\n".join(out)


def cmd_ablate(args) -> int:
    if args.seeds < 1:
        raise UsageError("--seeds must be at least 1")
    layers = [read_config_file(args.config)] if args.config else []
    base = RunConfig.from_sources(*layers, _flag_layer(args), {"data": args.data})
    jobs, keys = [], []
    for table, variant, mode, n_sgpa in ABLATION_CELLS:
        for k in range(args.seeds):
            cell = base.to_dict()
            cell.update(attention_variant=variant, match_mode=mode, seed=base.seed + k)
            if n_sgpa is not None:
                cell["n_sgpa"] = n_sgpa
            jobs.append((cell, args.data))
            keys.append((table, variant, mode, cell["n_sgpa"]))
    if args.jobs > 1:
        with ProcessPoolExecutor(args.jobs) as pool:
            results = list(pool.map(_ablation_job, jobs))
    else:
        results = []
        for i, job in enumerate(jobs):
            logger.info("ablation run %d/%d %s seed=%d", i + 1, len(jobs), keys[i], job[0]["seed"])
            results.append(_ablation_job(job))
    rows = []
    for key in dict.fromkeys(keys):
        runs = [r for k, r in zip(keys, results) if k == key]
        metrics = runs[0].keys()
        rows.append({"table": key[0], "attention_variant": key[1], "match_mode": key[2], "n_sgpa": key[3],
                     "runs": runs,
                     "mean": {m: float(np.mean([r[m] for r in runs])) for m in metrics},
                     "std": {m: float(np.std([r[m] for r in runs])) for m in metrics}})
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    seeds = [base.seed + k for k in range(args.seeds)]
    _write_json(out / "ablation.json", {"config": base.to_dict(), "seeds": seeds, "rows": rows})
    table = ablation_table(rows)
    (out / "ablation.md").write_text(f"seeds: {seeds}\n\n{table}\n")
    print(table)
    return EXIT_OK


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "eval": cmd_eval, "predict": cmd_predict,
            "gradcheck": cmd_gradcheck, "ablate": cmd_ablate}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (UsageError, AnnotationError, FeatureFormatError, CheckpointError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (NumericalError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
