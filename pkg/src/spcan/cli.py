"""Command-line entry point: gen, train, eval, sweep, report.

Exit codes: 0 success, 2 bad input, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import shutil
import sys
from pathlib import Path

import numpy as np

from . import data as datamod
from .data import FormatError, ShiftSpec
from .model import load_checkpoint, save_checkpoint
from .trainer import METHODS, TrainConfig, evaluate, train
from .twostream import train_two_stream

log = logging.getLogger("spcan")

EXIT_OK, EXIT_INPUT, EXIT_RUNTIME = 0, 2, 3
PAIRED_FILES = ("source_A.csv", "target_A.csv", "source_B.csv", "target_B.csv")
REPORT_ORDER = ("source-only", "dann", "can", "spcan")


class InputError(Exception):
    pass


def _read_json(path) -> dict:
    try:
        doc = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise InputError(f"{path}: no such file") from None
    except json.JSONDecodeError as exc:
        raise InputError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(doc, dict):
        raise InputError(f"{path}: expected a JSON object")
    return doc


def _write_json(path, doc) -> None:
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _prepare_out(path, force: bool) -> Path:
    out = Path(path)
    if out.exists() and any(out.iterdir()):
        if not force:
            raise InputError(f"{out} exists and is not empty (use --force)")
        shutil.rmtree(out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _spec(path) -> ShiftSpec:
    try:
        return ShiftSpec.from_dict(_read_json(path))
    except (KeyError, TypeError, ValueError) as exc:
        raise InputError(f"{path}: {exc.args[0] if exc.args else exc}") from None


def _train_config(path, method: str | None, seed: int | None) -> TrainConfig:
    doc = _read_json(path) if path else {}
    if method:
        doc["method"] = method
    if seed is not None:
        doc["seed"] = seed
    try:
        return TrainConfig.from_dict(doc)
    except (KeyError, TypeError, ValueError) as exc:
        raise InputError(f"config: {exc.args[0] if exc.args else exc}") from None


# -- gen ------------------------------------------------------------------------------

def write_data(spec: ShiftSpec, out: Path, paired: bool, projection_seed: int, view_noise: float,
               view_dim: int | None = None) -> list:
    if paired:
        pd = datamod.generate_paired(spec, projection_seed, view_dim=view_dim or 2 * spec.dim,
                                     view_noise=view_noise)
        dsets = [pd.source_a, pd.target_a, pd.source_b, pd.target_b]
        return datamod.save_many(list(zip(PAIRED_FILES, dsets)), out)
    source, target = datamod.generate(spec)
    return datamod.save_many([("source.csv", source), ("target.csv", target)], out)


def cmd_gen(args) -> int:
    spec = _spec(args.spec)
    out = _prepare_out(args.out, args.force)
    files = write_data(spec, out, args.paired, args.projection_seed, args.view_noise, args.view_dim)
    _write_json(out / "spec.json", {"shift": spec.to_dict(), "paired": args.paired,
                                    "projection_seed": args.projection_seed, "view_noise": args.view_noise,
                                    "view_dim": args.view_dim or 2 * spec.dim})
    for f in files:
        print(f)
    return EXIT_OK


# -- train ----------------------------------------------------------------------------

def _load(path: Path) -> datamod.Dataset:
    if not path.exists():
        raise InputError(f"{path}: no such file")
    return datamod.load(path)


def _is_paired(d: Path) -> bool:
    return all((d / f).exists() for f in PAIRED_FILES)


def run_training(config: TrainConfig, data_dir: Path, out: Path, view: str = "A") -> dict:
    if config.method == "ts-spcan":
        if not _is_paired(data_dir):
            raise InputError(f"ts-spcan needs paired views ({', '.join(PAIRED_FILES)}) in {data_dir}")
        pd = datamod.PairedDataset(*(_load(data_dir / f) for f in PAIRED_FILES))
        res = train_two_stream(pd, config, out)
        for tag, s in (("A", res.pair.a), ("B", res.pair.b)):
            save_checkpoint(s.net, out / f"checkpoint_{tag}.json", extra={"epochs": config.epochs})
        return res.summary
    if (data_dir / "source.csv").exists():
        source, target = _load(data_dir / "source.csv"), _load(data_dir / "target.csv")
    elif _is_paired(data_dir):
        source, target = _load(data_dir / f"source_{view}.csv"), _load(data_dir / f"target_{view}.csv")
    else:
        raise InputError(f"{data_dir}: no source.csv/target.csv or paired view files")
    if source.quarantined:
        raise InputError("source file contains target-domain rows")
    res = train(source, target, config, out)
    save_checkpoint(res.net, out / "checkpoint.json", extra={"epochs": config.epochs})
    return res.summary


def cmd_train(args) -> int:
    config = _train_config(args.config, args.method, args.seed)
    data_dir = Path(args.data)
    out = _prepare_out(args.out, args.force)
    _write_json(out / "config.json", {"train": config.to_dict(), "data": str(data_dir), "view": args.view})
    summary = run_training(config, data_dir, out, args.view)
    print(json.dumps(summary))
    return EXIT_OK


# -- eval -----------------------------------------------------------------------------

def cmd_eval(args) -> int:
    try:
        net, _, _ = load_checkpoint(args.checkpoint)
    except FileNotFoundError:
        raise InputError(f"{args.checkpoint}: no such file") from None
    ds = _load(Path(args.data))
    if ds.dim != net.spec.input_dim:
        raise InputError(f"data has {ds.dim} features, checkpoint expects {net.spec.input_dim}")
    print(json.dumps({"accuracy": evaluate(net, ds), "n": len(ds)}))
    return EXIT_OK


# -- sweep ----------------------------------------------------------------------------

def _seeds(text: str) -> list[int]:
    out = []
    for part in text.split(","):
        if "-" in part:
            a, b = part.split("-")
            out.extend(range(int(a), int(b) + 1))
        else:
            out.append(int(part))
    return out


def cmd_sweep(args) -> int:
    spec = _spec(args.spec)
    base = _read_json(args.config) if args.config else {}
    methods = args.methods.split(",")
    bad = [m for m in methods if m not in METHODS]
    if bad:
        raise InputError(f"unknown method(s): {', '.join(bad)}")
    try:
        seeds = _seeds(args.seeds)
    except ValueError:
        raise InputError(f"bad seed list {args.seeds!r}") from None
    out = _prepare_out(args.out, args.force)
    paired = "ts-spcan" in methods
    for seed in seeds:
        ddir = out / "data" / f"seed{seed}"
        ddir.mkdir(parents=True)
        s = ShiftSpec.from_dict({**spec.to_dict(), "seed": seed})
        write_data(s, ddir, paired, seed, args.view_noise, args.view_dim)
        for m in methods:
            config = _train_config(None, m, seed) if not base else TrainConfig.from_dict({**base, "method": m, "seed": seed})
            rdir = out / "runs" / m / f"seed{seed}"
            rdir.mkdir(parents=True)
            _write_json(rdir / "config.json", {"train": config.to_dict(), "data": str(ddir), "view": "A"})
            summary = run_training(config, ddir, rdir)
            log.info("%s seed %d: last target accuracy %.4f", m, seed, summary["last_target_accuracy"])
    print(out / "runs")
    return EXIT_OK


# -- report ---------------------------------------------------------------------------

def read_run(run_dir: Path) -> dict | None:
    """Load a completed run; ``None`` (with a warning) if files are missing or partial."""
    metrics, cfg = run_dir / "metrics.jsonl", run_dir / "config.json"
    if not metrics.exists() or not cfg.exists():
        log.warning("skipping %s: missing metrics or config", run_dir)
        return None
    records = []
    for line in metrics.read_text().splitlines():
        try:
            records.append(json.loads(line))
        except json.JSONDecodeError:
            break  # torn final line from a run still writing
    if not records or not records[-1].get("summary"):
        log.warning("skipping %s: run incomplete", run_dir)
        return None
    train_cfg = json.loads(cfg.read_text())["train"]
    return {"dir": run_dir, "method": train_cfg["method"], "seed": train_cfg["seed"],
            "epochs": records[:-1], "summary": records[-1]}


def find_runs(roots) -> list[Path]:
    dirs = set()
    for root in map(Path, roots):
        if not root.exists():
            log.warning("skipping %s: does not exist", root)
            continue
        for p in [root, *root.rglob("*")]:
            if p.is_dir() and ((p / "metrics.jsonl").exists() or (p / "config.json").exists()):
                dirs.add(p)
    return sorted(dirs)


def ordering_holds(medians: dict) -> bool:
    present = [m for m in REPORT_ORDER if m in medians]
    return len(present) >= 2 and all(medians[a] < medians[b] for a, b in zip(present, present[1:]))


def _tsv(path: Path, header, rows) -> None:
    lines = ["\t".join(header)] + ["\t".join(str(c) for c in r) for r in rows]
    path.write_text("\n".join(lines) + "\n")


def write_report(runs: list[dict], out: Path) -> dict:
    out.mkdir(parents=True, exist_ok=True)
    by_method: dict[str, list] = {}
    for r in runs:
        by_method.setdefault(r["method"], []).append(r["summary"]["last_target_accuracy"])
    rows, medians = [], {}
    order = [m for m in METHODS if m in by_method]
    for m in order:
        a = np.array(by_method[m])
        q1, med, q3 = np.percentile(a, [25, 50, 75])
        medians[m] = float(med)
        rows.append([m, len(a), f"{med:.4f}", f"{q1:.4f}", f"{q3:.4f}", f"{q3 - q1:.4f}"])
    _tsv(out / "accuracy.tsv", ["method", "runs", "median", "q1", "q3", "iqr"], rows)
    _tsv(out / "ordering.tsv", ["ordering", "holds"],
         [[" < ".join(m for m in REPORT_ORDER if m in medians), int(ordering_holds(medians))]])
    lam, sched, hdiv = [], [], []
    for r in runs:
        tag = f"{r['method']}/seed{r['seed']}"
        for e in r["epochs"]:
            streams = [("", e)] if "lambda" in e else [(k, e[k]) for k in ("A", "B") if k in e]
            for sfx, rec in streams:
                name = f"{tag}{'/' + sfx if sfx else ''}"
                lam.append([name, e["epoch"]] + [f"{v:.6g}" for v in rec["lambda"]])
                sched.append([name, e["epoch"], rec["r_c"], rec["r_d"], rec["n_css"], rec["n_dss"]])
                if "h_divergence" in rec:
                    hdiv.append([name, e["epoch"], f"{rec['h_divergence']:.6g}"])
    width = max((len(r) - 2 for r in lam), default=0)
    _tsv(out / "lambda.tsv", ["run", "epoch"] + [f"lambda{i + 1}" for i in range(width)], lam)
    _tsv(out / "schedule.tsv", ["run", "epoch", "r_c", "r_d", "n_css", "n_dss"], sched)
    _tsv(out / "hdiv.tsv", ["run", "epoch", "h_divergence"], hdiv)
    return medians


def cmd_report(args) -> int:
    runs = [r for d in find_runs(args.runs) if (r := read_run(d)) is not None]
    if not runs:
        raise InputError("no completed runs found")
    out = Path(args.out) if args.out else Path(args.runs[0]) / "report"
    medians = write_report(runs, out)
    for m, v in medians.items():
        print(f"{m}\t{v:.4f}")
    print(f"ordering holds: {ordering_holds(medians)}")
    return EXIT_OK


# -- entry ----------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="spcan", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate source/target files")
    g.add_argument("--spec", required=True)
    g.add_argument("--out", required=True)
    g.add_argument("--paired", action="store_true", help="write two views per domain")
    g.add_argument("--projection-seed", type=int, default=0)
    g.add_argument("--view-noise", type=float, default=0.3)
    g.add_argument("--view-dim", type=int, help="width of each view (default: twice the latent width)")
    g.add_argument("--force", action="store_true")
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", help="train one method")
    t.add_argument("--method", choices=METHODS, required=True)
    t.add_argument("--data", required=True)
    t.add_argument("--config")
    t.add_argument("--out", required=True)
    t.add_argument("--seed", type=int)
    t.add_argument("--view", choices=("A", "B"), default="A", help="view used by single-stream methods on paired data")
    t.add_argument("--force", action="store_true")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="accuracy of a checkpoint on a labeled file")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("sweep", help="generate data and train methods over seeds")
    s.add_argument("--spec", required=True)
    s.add_argument("--config")
    s.add_argument("--methods", default=",".join(REPORT_ORDER))
    s.add_argument("--seeds", default="0-4")
    s.add_argument("--view-noise", type=float, default=0.3)
    s.add_argument("--view-dim", type=int)
    s.add_argument("--out", required=True)
    s.add_argument("--force", action="store_true")
    s.set_defaults(func=cmd_sweep)

    r = sub.add_parser("report", help="tabulate completed runs")
    r.add_argument("--runs", nargs="+", required=True)
    r.add_argument("--out")
    r.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s: %(message)s")
    try:
        return args.func(args)
    except (InputError, FormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except Exception as exc:  # noqa: BLE001 - report and map to the runtime exit code
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
