"""Experiment runner: ``freecsl mask | train | eval | sweep``.

Experiments are described by a flat ``key = value`` text file (``#`` starts a
comment).  Every key can also be given as a flag, e.g. ``--warmup-epochs 0``
for ``warmup_epochs``; flags win over the file.

Keys
  dataset           dataset directory, or ``synthetic`` for Gaussian blobs
  rates             comma-separated missing rates (sweep), default 0.1,0.3,0.5,0.7
  rate              single missing rate (train / eval), default 0
  seeds | repeats   explicit seed list, or ``repeats`` = n for seeds 0..n-1
  seed              single seed (train / eval), default 0
  tau alpha sinkhorn_iters zeta lambda gamma
  lr_warmup lr_finetune warmup_epochs finetune_epochs batch_size dtype
  use_cc use_gc     ablation switches (true / false)
  modes             comma list from freecsl, ilr, isr, ablation (sweep)
  checkpoint_every  write checkpoint.bin every n epochs during train (0 = end only)
  heatmaps          sweep writes a similarity heatmap per cell (true / false)
  synthetic_n synthetic_k synthetic_dims synthetic_separation synthetic_std
  output            output directory; FREECSL_OUTPUT overrides it, --output overrides both

Outputs (under the output directory): ``checkpoint.bin``, ``epochs.log``
(one JSON record per epoch), ``results.csv`` and ``sim_<tag>.csv`` plus
``sim_<tag>.pgm``.

``results.csv`` columns are fixed: dataset, mode, rate, seed, acc, nmi, ari,
acc_std, nmi_std, ari_std, status.  Per-cell rows leave the ``*_std`` fields
empty; aggregate rows carry ``seed = mean`` and the metric means and standard
deviations over the successful seeds of one (rate, mode).

Exit codes: 0 success, 1 runtime failure (divergence, failed sweep cell),
2 invalid configuration.
"""

from __future__ import annotations

import argparse
import csv
import math
import os
import sys
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional

import numpy as np

from .csl import CslConfig
from .cse import CseConfig
from .data import (
    DatasetError,
    MaskError,
    MaskSpec,
    MultiViewDataset,
    generate_mask,
    load_dataset,
    make_blobs,
    normalize,
    read_mask,
    write_mask,
)
from .evaluation import evaluate, save_similarity, similarity_matrix
from .nets import ShapeError, init_params, load_checkpoint, save_checkpoint
from .train import (
    TrainConfig,
    TrainingDiverged,
    consensus,
    finetune,
    impute_baseline,
    predict,
    warmup,
    warmup_optimizer,
)

OUTPUT_ENV = "FREECSL_OUTPUT"
DEFAULT_OUTPUT = "freecsl_out"
RESULT_COLUMNS = ["dataset", "mode", "rate", "seed", "acc", "nmi", "ari",
                  "acc_std", "nmi_std", "ari_std", "status"]
MODES = ("freecsl", "ilr", "isr", "ablation")
ABLATIONS = {
    "ablation:rec": (False, False),
    "ablation:rec+cc": (True, False),
    "ablation:rec+gc": (False, True),
    "ablation:rec+cc+gc": (True, True),
}
EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG = 0, 1, 2


class ConfigError(ValueError):
    pass


# -- configuration ------------------------------------------------------------

_FLOAT_KEYS = {"rate", "tau", "alpha", "lambda", "gamma", "lr_warmup", "lr_finetune",
               "synthetic_separation", "synthetic_std"}
_INT_KEYS = {"seed", "repeats", "sinkhorn_iters", "zeta", "warmup_epochs", "finetune_epochs",
             "batch_size", "checkpoint_every", "synthetic_n", "synthetic_k"}
_BOOL_KEYS = {"use_cc", "use_gc", "heatmaps"}
_LIST_KEYS = {"rates", "seeds", "modes", "synthetic_dims"}
_STR_KEYS = {"dataset", "output", "dtype", "mask", "checkpoint", "mode", "tag", "name"}
KEYS = _FLOAT_KEYS | _INT_KEYS | _BOOL_KEYS | _LIST_KEYS | _STR_KEYS


def read_config(path: str) -> Dict[str, str]:
    """Parse a flat ``key = value`` file into raw strings."""
    if not os.path.exists(path):
        raise ConfigError(f"config file not found: {path}")
    raw = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
            key, value = (s.strip() for s in line.split("=", 1))
            raw[key.lower().replace("-", "_")] = value
    return raw


def _bool(text: str) -> bool:
    low = str(text).strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {text!r}")


def _typed(raw: Dict[str, str]) -> dict:
    out = {}
    for key, value in raw.items():
        if key not in KEYS:
            raise ConfigError(f"unknown config key {key!r}")
        try:
            if key in _FLOAT_KEYS:
                out[key] = float(value)
            elif key in _INT_KEYS:
                out[key] = int(value)
            elif key in _BOOL_KEYS:
                out[key] = _bool(value)
            elif key in _LIST_KEYS:
                items = [s.strip() for s in str(value).split(",") if s.strip()]
                cast = {"rates": float, "seeds": int, "synthetic_dims": int}.get(key, str)
                out[key] = [cast(s) for s in items]
            else:
                out[key] = value
        except ValueError:
            raise ConfigError(f"bad value for {key}: {value!r}") from None
    return out


@dataclass
class ExperimentConfig:
    dataset: str = "synthetic"
    rates: List[float] = field(default_factory=lambda: [0.1, 0.3, 0.5, 0.7])
    seeds: List[int] = field(default_factory=lambda: [0])
    train: TrainConfig = field(default_factory=TrainConfig)
    output: str = DEFAULT_OUTPUT
    modes: List[str] = field(default_factory=lambda: ["freecsl"])
    rate: float = 0.0
    mask: Optional[str] = None
    checkpoint: Optional[str] = None
    checkpoint_every: int = 0
    heatmaps: bool = False
    mode: str = "freecsl"
    tag: Optional[str] = None
    synthetic: dict = field(default_factory=dict)
    seed: int = 0

    def __post_init__(self):
        for r in self.rates + [self.rate]:
            if not 0.0 <= r < 1.0:
                raise ConfigError(f"missing rate {r} outside [0, 1)")
        if not self.seeds:
            raise ConfigError("repeats must be >= 1")
        for m in self.modes:
            if m not in MODES:
                raise ConfigError(f"unknown mode {m!r}; choose from {', '.join(MODES)}")
        if self.mode not in MODES[:3]:
            raise ConfigError(f"eval mode must be one of freecsl, ilr, isr, got {self.mode!r}")
        if self.checkpoint_every < 0:
            raise ConfigError("checkpoint_every must be >= 0")


def build_config(raw: Dict[str, str]) -> ExperimentConfig:
    """Typed experiment configuration from raw key-value pairs (config file plus flags)."""
    t = _typed(raw)
    try:
        csl = CslConfig(temperature=t.get("tau", 0.1), alpha=t.get("alpha", 0.5),
                        sinkhorn_iters=t.get("sinkhorn_iters", 3))
        cse = CseConfig(neighbors=t.get("zeta", 3), kl_weight=t.get("lambda", 0.1),
                        t_dof=t.get("gamma", 1.0))
        if "seeds" in t:
            seeds = t["seeds"]
        elif "repeats" in t:
            if t["repeats"] < 1:
                raise ConfigError("repeats must be >= 1")
            seeds = list(range(t["repeats"]))
        else:
            seeds = [t.get("seed", 0)]
        seed = t.get("seed", seeds[0])
        train = TrainConfig(
            warmup_epochs=t.get("warmup_epochs", 100), finetune_epochs=t.get("finetune_epochs", 100),
            batch_size=t.get("batch_size", 512), lr_warmup=t.get("lr_warmup", 3e-4),
            lr_finetune=t.get("lr_finetune", 5e-4), seed=seed, csl=csl, cse=cse,
            use_cc=t.get("use_cc", True), use_gc=t.get("use_gc", True), dtype=t.get("dtype", "float32"))
        if train.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {train.dtype!r}")
        synthetic = {k[len("synthetic_"):]: v for k, v in t.items() if k.startswith("synthetic_")}
        return ExperimentConfig(
            dataset=t.get("dataset", "synthetic"), rates=t.get("rates", [0.1, 0.3, 0.5, 0.7]),
            seeds=seeds, train=train, output=t.get("output", DEFAULT_OUTPUT),
            modes=t.get("modes", ["freecsl"]), rate=t.get("rate", 0.0), mask=t.get("mask"),
            checkpoint=t.get("checkpoint"), checkpoint_every=t.get("checkpoint_every", 0),
            heatmaps=t.get("heatmaps", False), mode=t.get("mode", "freecsl").lower(),
            tag=t.get("tag"), synthetic=synthetic, seed=seed)
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def output_dir(cfg: ExperimentConfig, flag: Optional[str]) -> str:
    root = flag or os.environ.get(OUTPUT_ENV) or cfg.output
    os.makedirs(root, exist_ok=True)
    return root


# -- datasets -----------------------------------------------------------------

def _synthetic(cfg: ExperimentConfig, seed: int) -> MultiViewDataset:
    s = cfg.synthetic
    return make_blobs(n=s.get("n", 600), n_clusters=s.get("k", 3), dims=tuple(s.get("dims", (10, 10))),
                      separation=s.get("separation", 6.0), std=s.get("std", 1.0), seed=seed)


def _dataset_name(cfg: ExperimentConfig) -> str:
    if cfg.dataset == "synthetic":
        return "blobs"
    return os.path.basename(os.path.normpath(cfg.dataset))


def cell_dataset(cfg: ExperimentConfig, rate: float, seed: int, mask_file: Optional[str] = None,
                 use_mask_file: bool = False) -> MultiViewDataset:
    """Dataset for one (rate, seed) cell, masked and then min-max normalized.

    Synthetic data is regenerated from the cell seed; the mask comes from
    ``mask_file`` when given, else from the dataset's own ``mask.csv`` when
    ``use_mask_file``, else from the instance-incomplete protocol.
    """
    if cfg.dataset == "synthetic":
        base = _synthetic(cfg, seed)
    else:
        base = load_dataset(cfg.dataset, use_mask_file=False)
    if mask_file:
        mask = read_mask(mask_file, base.n, base.n_views)
    elif use_mask_file and cfg.dataset != "synthetic" and os.path.exists(os.path.join(cfg.dataset, "mask.csv")):
        mask = read_mask(os.path.join(cfg.dataset, "mask.csv"), base.n, base.n_views)
    else:
        mask = generate_mask(base.n, base.n_views, MaskSpec(rate, seed))
    return normalize(base.with_mask(mask))


# -- results ------------------------------------------------------------------

def _fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, float):
        return "nan" if math.isnan(x) else f"{x:.6f}"
    return str(x)


def result_row(dataset: str, mode: str, rate: float, seed, report=None, status: str = "ok") -> dict:
    row = dict.fromkeys(RESULT_COLUMNS, "")
    row.update(dataset=dataset, mode=mode, rate=f"{rate:g}", seed=str(seed), status=status)
    for key in ("acc", "nmi", "ari"):
        row[key] = _fmt(getattr(report, key) if report is not None else float("nan"))
    return row


def aggregate_rows(rows: List[dict]) -> List[dict]:
    """One mean/std row per (dataset, mode, rate), in first-appearance order."""
    groups: Dict[tuple, List[dict]] = {}
    for row in rows:
        groups.setdefault((row["dataset"], row["mode"], row["rate"]), []).append(row)
    out = []
    for (dataset, mode, rate), members in groups.items():
        ok = [r for r in members if r["status"] == "ok"]
        agg = dict.fromkeys(RESULT_COLUMNS, "")
        agg.update(dataset=dataset, mode=mode, rate=rate, seed="mean",
                   status=f"{len(ok)}/{len(members)} ok")
        for key in ("acc", "nmi", "ari"):
            vals = np.array([float(r[key]) for r in ok])
            agg[key] = _fmt(float(vals.mean()) if vals.size else float("nan"))
            agg[key + "_std"] = _fmt(float(vals.std()) if vals.size else float("nan"))
        out.append(agg)
    return out


def write_results(path: str, rows: List[dict], append: bool = False) -> None:
    exists = append and os.path.exists(path) and os.path.getsize(path) > 0
    with open(path, "a" if append else "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=RESULT_COLUMNS, lineterminator="\n")
        if not exists:
            writer.writeheader()
        writer.writerows(rows)


def read_results(path: str) -> List[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


# -- training / evaluation helpers -------------------------------------------

def train_state(dataset: MultiViewDataset, config: TrainConfig, log_path: Optional[str] = None,
                checkpoint_path: Optional[str] = None, checkpoint_every: int = 0):
    """Warm up and fine-tune, streaming one JSON line per epoch to ``log_path``."""
    state = init_params(config.architecture(dataset), seed=config.seed, dtype=config.torch_dtype)
    log = open(log_path, "w") if log_path else None
    counter = [0]

    def on_epoch(report, st):
        counter[0] += 1
        if log:
            log.write(report.to_json() + "\n")
            log.flush()
        if checkpoint_path and checkpoint_every and counter[0] % checkpoint_every == 0:
            save_checkpoint(st, checkpoint_path)

    try:
        opt = warmup_optimizer(state, config)
        warmup(state, dataset, config, on_epoch, optimizer=opt)
        finetune(state, dataset, config, on_epoch=on_epoch, warm_optimizer=opt)
    finally:
        if log:
            log.close()
    if checkpoint_path:
        save_checkpoint(state, checkpoint_path)
    return state


def score(state, dataset: MultiViewDataset, mode: str, config: TrainConfig):
    """Cluster with FreeCSL's predict or an imputation baseline, then score against the labels."""
    if dataset.labels is None:
        raise ConfigError("evaluation needs a labels.csv")
    mode = mode.lower()
    if mode == "ilr":
        pred = impute_baseline(state, dataset, "ILR", neighbors=config.cse.neighbors, seed=config.seed)
    elif mode == "isr":
        pred = impute_baseline(state, dataset, "ISR", neighbors=config.cse.neighbors, seed=config.seed)
    else:
        pred = predict(state, dataset, seed=config.seed)
    return evaluate(pred, dataset.labels, dataset.n_clusters)


def write_heatmap(state, dataset: MultiViewDataset, stem: str) -> tuple:
    h = consensus(state, dataset, semantic=True)
    order = dataset.labels if dataset.labels is not None else predict(state, dataset)
    return save_similarity(similarity_matrix(h, order_by=order), stem)


def _check_dims(state, dataset: MultiViewDataset) -> None:
    arch = state.arch
    if tuple(arch.view_dims) != tuple(dataset.dims) or arch.n_clusters != dataset.n_clusters:
        raise ShapeError(f"checkpoint expects views {tuple(arch.view_dims)} and K={arch.n_clusters}; "
                         f"dataset has {tuple(dataset.dims)} and K={dataset.n_clusters}")


# -- subcommands --------------------------------------------------------------

def cmd_mask(args, cfg: ExperimentConfig) -> int:
    if cfg.dataset == "synthetic":
        n, v = cfg.synthetic.get("n", 600), len(cfg.synthetic.get("dims", (10, 10)))
    else:
        base = load_dataset(cfg.dataset, use_mask_file=False)
        n, v = base.n, base.n_views
    mask = generate_mask(n, v, MaskSpec(cfg.rate, cfg.seed))
    out = args.out or os.path.join(output_dir(cfg, args.output), "mask.csv")
    write_mask(mask, out)
    print(out)
    return EXIT_OK


def cmd_train(args, cfg: ExperimentConfig) -> int:
    root = output_dir(cfg, args.output)
    dataset = cell_dataset(cfg, cfg.rate, cfg.seed, mask_file=cfg.mask, use_mask_file="rate" not in args.raw)
    ckpt = os.path.join(root, "checkpoint.bin")
    train_state(dataset, cfg.train, os.path.join(root, "epochs.log"), ckpt, cfg.checkpoint_every)
    print(ckpt)
    return EXIT_OK


def cmd_eval(args, cfg: ExperimentConfig) -> int:
    root = output_dir(cfg, args.output)
    path = cfg.checkpoint or os.path.join(root, "checkpoint.bin")
    if not os.path.exists(path):
        raise ConfigError(f"checkpoint not found: {path}")
    state = load_checkpoint(path)
    dataset = cell_dataset(cfg, cfg.rate, cfg.seed, mask_file=cfg.mask, use_mask_file="rate" not in args.raw)
    _check_dims(state, dataset)
    report = score(state, dataset, cfg.mode, cfg.train)
    tag = cfg.tag or cfg.mode
    row = result_row(dataset.name, tag, cfg.rate, cfg.seed, report)
    write_results(os.path.join(root, "results.csv"), [row], append=True)
    write_heatmap(state, dataset, os.path.join(root, f"sim_{tag}"))
    print(",".join(row[c] for c in RESULT_COLUMNS))
    return EXIT_OK


def _cell_tags(modes: List[str]) -> List[str]:
    tags = []
    for m in modes:
        tags.extend(ABLATIONS if m == "ablation" else [m])
    return tags


def _flags_for(tag: str, base: TrainConfig) -> tuple:
    if tag in ABLATIONS:
        return ABLATIONS[tag]
    if tag == "ilr":
        # latent imputation is the variant trained without consensus semantic learning
        return (False, base.use_gc)
    return (base.use_cc, base.use_gc)


def run_sweep(cfg: ExperimentConfig, root: str, log=print) -> List[dict]:
    """Train and score every (rate, seed, tag) cell; failed cells are recorded and skipped."""
    rows = []
    tags = _cell_tags(cfg.modes)
    for rate in cfg.rates:
        for seed in cfg.seeds:
            states: Dict[tuple, object] = {}
            dataset = None
            for tag in tags:
                name = dataset.name if dataset is not None else _dataset_name(cfg)
                try:
                    if dataset is None:
                        dataset = cell_dataset(cfg, rate, seed)
                    use_cc, use_gc = _flags_for(tag, cfg.train)
                    tc = replace(cfg.train, seed=seed, use_cc=use_cc, use_gc=use_gc)
                    if (use_cc, use_gc) not in states:
                        states[(use_cc, use_gc)] = train_state(dataset, tc)
                    state = states[(use_cc, use_gc)]
                    report = score(state, dataset, tag if tag in ("ilr", "isr") else "freecsl", tc)
                    row = result_row(dataset.name, tag, rate, seed, report)
                    if cfg.heatmaps:
                        stem = f"sim_{tag.replace(':', '_').replace('+', '_')}_r{rate:g}_s{seed}"
                        write_heatmap(state, dataset, os.path.join(root, stem))
                except (FloatingPointError, ValueError, RuntimeError) as exc:
                    row = result_row(name, tag, rate, seed, status=f"failed: {type(exc).__name__}: {exc}")
                rows.append(row)
                log(",".join(row[c] for c in RESULT_COLUMNS))
    return rows


def cmd_sweep(args, cfg: ExperimentConfig) -> int:
    root = output_dir(cfg, args.output)
    rows = run_sweep(cfg, root)
    write_results(os.path.join(root, "results.csv"), rows + aggregate_rows(rows))
    failed = [r for r in rows if r["status"] != "ok"]
    return EXIT_RUNTIME if failed else EXIT_OK


# -- entry point --------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="freecsl", description=__doc__.split("\n\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)
    specs = {
        "mask": "write an instance-incomplete mask file",
        "train": "warm up and fine-tune one model",
        "eval": "score a checkpoint and write a similarity heatmap",
        "sweep": "train and score across missing rates and seeds",
    }
    for name, help_text in specs.items():
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="flat key = value config file")
        p.add_argument("--output", help=f"output directory (overrides ${OUTPUT_ENV})")
        if name == "mask":
            p.add_argument("--out", help="mask file path (default <output>/mask.csv)")
        for key in sorted(KEYS - {"output"}):
            p.add_argument("--" + key.replace("_", "-"), dest="kv_" + key, metavar=key.upper())
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        raw = read_config(args.config) if args.config else {}
        for key, value in vars(args).items():
            if key.startswith("kv_") and value is not None:
                raw[key[3:]] = value
        args.raw = raw
        cfg = build_config(raw)
        handler = {"mask": cmd_mask, "train": cmd_train, "eval": cmd_eval, "sweep": cmd_sweep}[args.command]
        return handler(args, cfg)
    except (ConfigError, MaskError, DatasetError, ShapeError, FileNotFoundError) as exc:
        print(f"freecsl {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (TrainingDiverged, FloatingPointError, RuntimeError) as exc:
        print(f"freecsl {args.command}: failed: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
