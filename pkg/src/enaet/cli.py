"""Command-line entry point: train, eval, ablate, gen-data, dump-transforms, plot.

Exit codes: 0 success, 1 usage error, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from .data import (
    DataError,
    DatasetSplit,
    SyntheticConfig,
    load_labeled,
    make_shapes,
    make_synthetic,
    save_dataset,
    split_labels,
)
from .transforms import FAMILIES

log = logging.getLogger("enaet")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2

FAMILY_FLAGS = {"proj": 0, "affine": 1, "sim": 2, "euc": 3, "ccbs": 4}
FAMILY_TITLES = ("Projective", "Affine", "Similarity", "Euclidean", "CCBS")

# Keys accepted in a config file besides the TrainConfig fields.
DATA_KEYS = {
    "n_labels_per_class": 10,
    "image_size": 32,
    "num_classes": 4,
    "train_per_class": 200,
    "test_per_class": 100,
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):  # argparse would exit with status 2
        raise UsageError(message)


# --------------------------------------------------------------------------
# Config resolution: flags > config file > defaults


def _train_fields() -> dict[str, Any]:
    from .trainer import TrainConfig

    return {f.name: getattr(TrainConfig(), f.name) for f in dataclasses.fields(TrainConfig)}


def _coerce(key: str, raw: str, default: Any) -> Any:
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            kind = type(default[0]) if default else float
            return tuple(kind(v) for v in raw.replace(" ", "").split(",") if v)
        return raw
    except ValueError:
        raise UsageError(f"bad value for {key}: {raw!r}") from None


def parse_config_text(text: str) -> dict[str, Any]:
    """Parse flat ``key = value`` lines; ``#`` starts a comment."""
    defaults = {**_train_fields(), **DATA_KEYS}
    out: dict[str, Any] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"config line {lineno}: expected key = value")
        key, raw = (p.strip() for p in line.split("=", 1))
        if key not in defaults:
            raise UsageError(f"config line {lineno}: unknown key {key!r}")
        out[key] = _coerce(key, raw, defaults[key])
    return out


def load_config_file(path: str | Path | None) -> dict[str, Any]:
    if path is None:
        return {}
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"config file {p} not found")
    return parse_config_text(p.read_text())


@dataclass
class ExperimentSpec:
    name: str
    train: dict[str, Any]
    data: dict[str, Any]
    seeds: list[int]
    no_aet: bool = False
    no_cl: bool = False
    only_family: int | None = None
    ssl_only: bool = False
    dataset: str | None = None
    extra: dict = field(default_factory=dict)

    def train_config(self, seed: int):
        from .trainer import TrainConfig

        values = dict(self.train)
        values["seed"] = seed
        values.update(ablation_overrides(values, self.no_aet, self.no_cl, self.only_family, self.ssl_only))
        cfg = TrainConfig(**values)
        try:
            cfg.validate()
        except ValueError as exc:
            raise UsageError(str(exc)) from None
        return cfg


def ablation_overrides(
    values: dict[str, Any], no_aet: bool = False, no_cl: bool = False, only_family: int | None = None, ssl_only: bool = False
) -> dict[str, Any]:
    base_lk = tuple(values.get("lambda_k", _train_fields()["lambda_k"]))
    out: dict[str, Any] = {}
    if only_family is not None:
        out["lambda_k"] = tuple(w if k == only_family else 0.0 for k, w in enumerate(base_lk))
        out["family_mask"] = tuple(int(k == only_family) for k in range(len(FAMILIES)))
    if no_aet or ssl_only:
        out["lambda_k"] = (0.0,) * len(FAMILIES)
    if no_cl or ssl_only:
        out["gamma"] = 0.0
    return out


def parse_seeds(text: str | None, default: int = 0) -> list[int]:
    """``"4"`` means seeds 0..3; ``"3,7"`` is an explicit list."""
    if text is None:
        return [default]
    try:
        if "," in text:
            return [int(v) for v in text.split(",") if v.strip()]
        n = int(text)
    except ValueError:
        raise UsageError(f"bad --seeds value {text!r}") from None
    if n < 1:
        raise UsageError("--seeds must be >= 1")
    return list(range(n))


def resolve_spec(args: argparse.Namespace, name: str) -> ExperimentSpec:
    file_values = load_config_file(getattr(args, "config", None))
    train_keys = set(_train_fields())
    train = {k: v for k, v in file_values.items() if k in train_keys}
    data = {**DATA_KEYS, **{k: v for k, v in file_values.items() if k in DATA_KEYS}}
    if getattr(args, "epochs", None) is not None:
        train["epochs"] = args.epochs
    if getattr(args, "batch_size", None) is not None:
        train["batch_size"] = args.batch_size
    only = getattr(args, "only_family", None)
    spec = ExperimentSpec(
        name=name,
        train=train,
        data=data,
        seeds=parse_seeds(getattr(args, "seeds", None), train.get("seed", 0)),
        no_aet=getattr(args, "no_aet", False),
        no_cl=getattr(args, "no_cl", False),
        only_family=FAMILY_FLAGS[only] if only else None,
        ssl_only=getattr(args, "ssl_only", False),
        dataset=getattr(args, "dataset", None),
    )
    if spec.only_family is not None and (spec.no_aet or spec.ssl_only):
        raise UsageError("--only-family conflicts with --no-aet/--ssl-only")
    return spec


# --------------------------------------------------------------------------
# Datasets


def check_dataset(path: str | None) -> None:
    if path is not None and not Path(path).is_dir():
        raise DataError(f"dataset directory {path} does not exist")


def build_split(spec: ExperimentSpec, seed: int) -> DatasetSplit:
    d = spec.data
    if spec.dataset is not None:
        train = load_labeled(spec.dataset, "train")
        test = load_labeled(spec.dataset, "test")
        n_classes = int(max(train.labels.max(), test.labels.max())) + 1
        return split_labels(train, test, d["n_labels_per_class"] * n_classes, seed, num_classes=n_classes)
    cfg = SyntheticConfig(
        num_classes=d["num_classes"],
        image_size=d["image_size"],
        train_per_class=d["train_per_class"],
        test_per_class=d["test_per_class"],
    )
    return make_synthetic(cfg, seed, n_labels=d["n_labels_per_class"] * d["num_classes"])


def dataset_record(spec: ExperimentSpec, seed: int) -> dict:
    return {"dataset": spec.dataset or "synthetic", "data": spec.data, "seed": seed}


# --------------------------------------------------------------------------
# Runs


def run_seed(spec: ExperimentSpec, seed: int, out: Path | None):
    from .trainer import train

    cfg = spec.train_config(seed)
    split = build_split(spec, seed)
    run_dir = out / f"seed_{seed}" if out is not None else None
    if run_dir is not None:
        run_dir.mkdir(parents=True, exist_ok=True)
        (run_dir / "run.json").write_text(json.dumps(dataset_record(spec, seed), indent=2))
    result = train(cfg, split, out_dir=run_dir)
    final = result.final_error
    if run_dir is not None:
        (run_dir / "summary.json").write_text(
            json.dumps({"seed": seed, "error_last_k": final, "steps": result.state.step}, indent=2)
        )
    return result


def summarize(errors: Sequence[float]) -> tuple[float, float]:
    arr = np.asarray([e for e in errors if np.isfinite(e)], dtype=float)
    if len(arr) == 0:
        return float("nan"), float("nan")
    std = float(arr.std(ddof=1)) if len(arr) > 1 else 0.0
    return float(arr.mean()), std


def cmd_train(args) -> int:
    spec = resolve_spec(args, "train")
    check_dataset(spec.dataset)
    for s in spec.seeds:
        spec.train_config(s)  # fail on bad config before any output is written
    out = Path(args.out) if args.out else None
    errors = []
    for seed in spec.seeds:
        res = run_seed(spec, seed, out)
        errors.append(res.final_error)
        print(f"seed {seed}: error {res.final_error:.4f} (steps {res.state.step})")
    mean, std = summarize(errors)
    line = f"summary: error {mean:.4f} ± {std:.4f} over {len(spec.seeds)} seeds"
    print(line)
    if out is not None:
        (out / "summary.json").write_text(
            json.dumps({"seeds": spec.seeds, "errors": errors, "mean": mean, "std": std}, indent=2)
        )
    return EXIT_OK


ABLATION_ROWS = (
    ("EnAET", {}),
    *((f"Only {t} Transformation", {"only_family": k}) for k, t in enumerate(FAMILY_TITLES)),
    ("Remove CL loss", {"no_cl": True}),
    ("Remove AET loss", {"no_aet": True}),
    ("Baseline: MixMatch", {"ssl_only": True}),
)


def cmd_ablate(args) -> int:
    base = resolve_spec(args, "ablate")
    check_dataset(base.dataset)
    out = Path(args.out) if args.out else None
    rows = []
    for label, switches in ABLATION_ROWS:
        flags = {"no_aet": False, "no_cl": False, "only_family": None, "ssl_only": False, **switches}
        spec = dataclasses.replace(base, name=label, **flags)
        sub = out / _slug(label) if out is not None else None
        errors = [run_seed(spec, seed, sub).final_error for seed in spec.seeds]
        mean, std = summarize(errors)
        rows.append([label, f"{mean:.6f}", f"{std:.6f}", len(errors), " ".join(f"{e:.6f}" for e in errors)])
        print(f"{label}: {mean:.4f} ± {std:.4f}")
    header = ["method", "mean_error", "std_error", "n_seeds", "per_seed"]
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "ablation.csv", "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(header)
            w.writerows(rows)
    else:
        w = csv.writer(sys.stdout)
        w.writerow(header)
        w.writerows(rows)
    return EXIT_OK


def _slug(label: str) -> str:
    return "".join(c if c.isalnum() else "_" for c in label.lower()).strip("_")


def _latest_checkpoint(run_dir: Path) -> Path:
    ckpts = sorted(run_dir.glob("ckpt_epoch*.zip"), key=lambda p: int(p.stem.removeprefix("ckpt_epoch")))
    if not ckpts:
        raise FileNotFoundError(f"no checkpoints in {run_dir}")
    return ckpts[-1]


def cmd_eval(args) -> int:
    from . import checkpoint
    from .trainer import TrainConfig, evaluate, new_state

    run_dir = Path(args.run)
    if not run_dir.is_dir():
        raise FileNotFoundError(f"run directory {run_dir} not found")
    values = json.loads((run_dir / "config.json").read_text())
    for key in ("lambda_k", "widths", "family_mask"):
        values[key] = tuple(values[key])
    cfg = TrainConfig(**values)
    rec = json.loads((run_dir / "run.json").read_text())
    spec = ExperimentSpec(
        "eval", {}, rec["data"], [rec["seed"]], dataset=None if rec["dataset"] == "synthetic" else rec["dataset"]
    )
    split = build_split(spec, rec["seed"])
    state = new_state(cfg, split)
    ckpt = Path(args.checkpoint) if args.checkpoint else _latest_checkpoint(run_dir)
    meta = checkpoint.load_into(ckpt, state, cfg.hash())
    s_err = evaluate(state, split.test, use_teacher=False)
    t_err = evaluate(state, split.test, use_teacher=True)
    print(json.dumps({"checkpoint": str(ckpt), "epoch": meta["epoch"], "student_error": s_err, "teacher_error": t_err}))
    return EXIT_OK


def cmd_gen_data(args) -> int:
    spec = resolve_spec(args, "gen-data")
    d = spec.data
    cfg = SyntheticConfig(
        num_classes=d["num_classes"],
        image_size=d["image_size"],
        train_per_class=d["train_per_class"],
        test_per_class=d["test_per_class"],
    )
    cfg.validate()
    rng = np.random.default_rng(args.seed)
    train = make_shapes(cfg, cfg.train_per_class, rng)
    test = make_shapes(cfg, cfg.test_per_class, rng)
    save_dataset(args.out, {"train": train, "test": test}, {"synthetic": vars(cfg), "seed": args.seed})
    print(f"wrote {len(train)} train / {len(test)} test images to {args.out}")
    return EXIT_OK


def cmd_dump_transforms(args) -> int:
    """Grid: one row per source image, columns = original + one sample per family."""
    from PIL import Image

    from .transforms import apply_ccbs, sample_ccbs, sample_spatial, warp
    from .trainer import SPATIAL_KINDS

    spec = resolve_spec(args, "dump-transforms")
    check_dataset(spec.dataset)
    split = build_split(spec, args.seed)
    rng = np.random.default_rng(args.seed)
    pick = rng.choice(len(split.test), size=min(args.n, len(split.test)), replace=False)
    rows = []
    for i in pick:
        img = split.test.images[i]
        cells = [img]
        for kind in SPATIAL_KINDS:
            cells.append(warp(img, sample_spatial(kind, rng)))
        cells.append(apply_ccbs(img, sample_ccbs(rng)))
        rows.append(np.concatenate(cells, axis=1))
    grid = np.concatenate(rows, axis=0)
    arr = np.round(np.clip(grid, 0, 1) * 255).astype(np.uint8)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(arr if arr.shape[-1] == 3 else arr[..., 0]).save(args.out)
    print(f"columns: original, {', '.join(FAMILIES)}; wrote {args.out}")
    return EXIT_OK


# --------------------------------------------------------------------------
# Plotting


class MetricsFormatError(ValueError):
    pass


def read_jsonl(path: Path) -> list[dict]:
    records = []
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise MetricsFormatError(f"{path}:{lineno}: malformed JSON ({exc.msg})") from None
        if not isinstance(rec, dict) or "step" not in rec:
            raise MetricsFormatError(f"{path}:{lineno}: record without a step field")
        records.append(rec)
    return records


def loss_curves(records: list[dict]) -> dict[str, tuple[list[int], list[float]]]:
    """One series per loss term found in the records."""
    curves: dict[str, tuple[list[int], list[float]]] = {}

    def add(name, step, value):
        xs, ys = curves.setdefault(name, ([], []))
        xs.append(step)
        ys.append(value)

    for r in records:
        for key in ("total", "l_labeled", "l_unlabeled"):
            if r.get(key) is not None:
                add(key, r["step"], r[key])
        for key in ("l_aet", "l_cl"):
            for k, v in enumerate(r.get(key) or []):
                add(f"{key}[{FAMILIES[k]}]", r["step"], v)
    return curves


def render_plot(metrics: Path, out: Path, evals: Path | None = None) -> list[str]:
    """Write a loss panel and an error panel to ``out``; returns the legend labels."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    records = read_jsonl(metrics)
    ev = read_jsonl(evals) if evals is not None and evals.exists() else []
    if not records and not ev:
        log.warning("empty metrics file %s: writing an empty plot", metrics)
    curves = loss_curves(records)
    fig, (ax_l, ax_e) = plt.subplots(1, 2, figsize=(11, 4))
    for name, (xs, ys) in curves.items():
        ax_l.plot(xs, ys, label=name, linewidth=1)
    ax_l.set_xlabel("step")
    ax_l.set_ylabel("loss")
    if curves:
        ax_l.set_yscale("symlog", linthresh=1e-3)
        ax_l.legend(fontsize=6, ncol=2)
    for key in ("student_error", "teacher_error"):
        pts = [(r["step"], r[key]) for r in ev if r.get(key) is not None]
        if pts:
            xs, ys = zip(*pts)
            ax_e.plot(xs, ys, marker="o", markersize=2, label=key)
    ax_e.set_xlabel("step")
    ax_e.set_ylabel("test error")
    if ev:
        ax_e.legend(fontsize=7)
    fig.tight_layout()
    out.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(out, format="png", dpi=100, metadata={"Software": None})
    plt.close(fig)
    return list(curves)


def cmd_plot(args) -> int:
    src = Path(args.metrics)
    metrics = src / "metrics.jsonl" if src.is_dir() else src
    if not metrics.exists():
        raise FileNotFoundError(f"metrics file {metrics} not found")
    evals = metrics.with_name("evals.jsonl")
    out = Path(args.out) if args.out else metrics.with_name("curves.png")
    labels = render_plot(metrics, out, evals)
    print(f"wrote {out} ({len(labels)} loss curves)")
    return EXIT_OK


# --------------------------------------------------------------------------


def _add_common(p: argparse.ArgumentParser, train: bool = True) -> None:
    p.add_argument("--config", help="flat key = value file (TrainConfig and data keys)")
    p.add_argument("--dataset", help="dataset directory (images/<split>/*.png + labels_<split>.csv); default synthetic")
    if train:
        p.add_argument("--seeds", help="N (seeds 0..N-1) or a comma-separated list")
        p.add_argument("--epochs", type=int)
        p.add_argument("--batch-size", type=int)
        p.add_argument("--no-aet", action="store_true", help="set every lambda_k to 0")
        p.add_argument("--no-cl", action="store_true", help="set gamma to 0")
        p.add_argument("--only-family", choices=sorted(FAMILY_FLAGS), help="keep a single transformation family")
        p.add_argument("--ssl-only", action="store_true", help="MixMatch only")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="enaet", description="Ensemble AET semi-supervised training at desk scale.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train", help="train over one or more seeds")
    _add_common(p)
    p.add_argument("--out", help="output directory (one seed_<n> run directory per seed)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("ablate", help="run the nine-row ablation matrix and write ablation.csv")
    _add_common(p)
    p.add_argument("--out")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("eval", help="evaluate a run directory's checkpoint")
    p.add_argument("run", help="run directory (seed_<n>)")
    p.add_argument("--checkpoint", help="checkpoint file; default is the latest in the run directory")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gen-data", help="write a synthetic dataset in the directory layout")
    p.add_argument("--config")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("dump-transforms", help="PNG grid of sampled transformations per family")
    _add_common(p, train=False)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n", type=int, default=6, help="number of source images")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_dump_transforms)

    p = sub.add_parser("plot", help="loss and error curves from metrics JSONL")
    p.add_argument("metrics", help="metrics.jsonl or a run directory")
    p.add_argument("--out", help="PNG path; default curves.png next to the metrics")
    p.set_defaults(func=cmd_plot)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"enaet: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"enaet: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # runtime failure
        print(f"enaet: error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
