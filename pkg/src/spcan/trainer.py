"""Two-stage training loop, baselines, evaluation and metrics emission.

Stage 1 trains the collaborative/adversarial objective alone. Stage 2
re-selects pseudo-labeled target samples at the start of every epoch and
adds their classification and domain terms. ``source-only``, ``dann`` and
``can`` run the same loop with selection disabled, so all methods draw
from the random streams in the same order.
"""

from __future__ import annotations

import dataclasses
import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import rng as rngmod
from . import selfpaced as sp
from .autodiff import OptimizerConfig, adaptation_factor, inv_lr, progress, sgd_step
from .data import GUARD, Dataset
from .hdivergence import ProbeConfig, h_divergence_estimate
from .model import LR_MULT_HEAD, LambdaWeights, Network, NetworkSpec, onehot, update_lambda

METHODS = ("source-only", "dann", "can", "spcan", "ts-spcan")
SELECTING = ("spcan", "ts-spcan")
LAMBDA_MODES = ("fixed-last", "free")


@dataclass
class TrainConfig:
    method: str = "spcan"
    alpha: float = 0.4
    epochs: int = 60
    stage1_fraction: float = 0.1
    batch_size: int = 16
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    lambda_mode: str = "fixed-last"
    seed: int = 0
    block_dims: tuple = (32, 32, 32, 32)
    disc_hidden: int = 16
    lambda_every: str = "iteration"
    hdiv_every: int = 5
    dss_union: bool = False
    fixed_rc: float | None = None
    fixed_rd: float | None = None

    def __post_init__(self):
        if isinstance(self.optimizer, dict):
            self.optimizer = OptimizerConfig(**self.optimizer)
        self.block_dims = tuple(int(b) for b in self.block_dims)
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {', '.join(METHODS)}")
        if self.alpha < 0:
            raise ValueError("alpha must be >= 0")
        if not 0 < self.stage1_fraction < 1:
            raise ValueError("stage1_fraction must lie in (0, 1)")
        if self.epochs < 2:
            raise ValueError("epochs must be >= 2")
        if self.batch_size < 2 or self.batch_size % 2:
            raise ValueError("batch_size must be a positive even number")
        if self.lambda_mode not in LAMBDA_MODES:
            raise ValueError(f"lambda_mode must be one of {', '.join(LAMBDA_MODES)}")
        if self.lambda_every not in ("iteration", "epoch"):
            raise ValueError("lambda_every must be 'iteration' or 'epoch'")
        if self.hdiv_every < 0:
            raise ValueError("hdiv_every must be >= 0")
        for r in (self.fixed_rc, self.fixed_rd):
            if r is not None and not 0 <= r <= 1:
                raise ValueError("fixed selection proportions must lie in [0, 1]")

    @property
    def stage1_epochs(self) -> int:
        return min(self.epochs - 1, max(1, math.ceil(self.stage1_fraction * self.epochs)))

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise KeyError(f"unknown config key(s): {', '.join(unknown)}")
        opt = d.get("optimizer", {})
        if isinstance(opt, dict):
            bad = sorted(set(opt) - {f.name for f in dataclasses.fields(OptimizerConfig)})
            if bad:
                raise KeyError(f"unknown optimizer key(s): {', '.join(bad)}")
        return cls(**d)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["block_dims"] = list(self.block_dims)
        return d


def build_network(config: TrainConfig, input_dim: int, num_classes: int) -> Network:
    m = len(config.block_dims)
    discs = (m,) if config.method == "dann" else None
    spec = NetworkSpec(input_dim, config.block_dims, num_classes, config.disc_hidden, discs)
    if config.method == "source-only":
        lam = LambdaWeights(np.zeros(m), fixed_last=None, target_sum=0.0)
    elif config.method == "dann":
        lam = LambdaWeights([-1.0], fixed_last=None)
    else:
        lam = LambdaWeights.initial(m, -2.0 if config.lambda_mode == "fixed-last" else None)
    return Network(spec, rngmod.stream(config.seed, "init"), lam)


def evaluate(net: Network, dataset: Dataset) -> float:
    """Fraction of argmax predictions equal to the ground truth."""
    if len(dataset) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    with GUARD.evaluation():
        labels = dataset.labels
    _, pred = net.predict(dataset.features)
    return float(np.mean(pred == labels))


def iterations_per_epoch(n_source: int, n_target: int, batch_size: int) -> int:
    return math.ceil(max(n_source, n_target) / (batch_size // 2))


def _num_classes(source: Dataset) -> int:
    return int(source.source_labels.max()) + 1


class Stream:
    """One network with its optimizer clock, batch composer and schedule."""

    def __init__(self, config: TrainConfig, source: Dataset, target: Dataset,
                 num_classes: int | None = None):
        if source.dim != target.dim:
            raise ValueError("source and target feature widths differ")
        self.config = config
        self.source, self.target = source, target
        self.y_source = source.source_labels
        self.k = num_classes or _num_classes(source)
        self.net = build_network(config, source.dim, self.k)
        self.iters = iterations_per_epoch(len(source), len(target), config.batch_size)
        self.opt = dataclasses.replace(config.optimizer, total_iterations=self.iters * config.epochs)
        self.shuffle = rngmod.stream(config.seed, "shuffle")
        self.composer = sp.BatchComposer(len(source), len(target), config.batch_size)
        self.schedule = sp.ScheduleState(config.epochs - config.stage1_epochs)
        self.row_of = {int(i): r for r, i in enumerate(target.ids)}
        self.t = 0
        self.sets = sp.SelectionSets()
        self.source_accuracy: float | None = None
        self.graph = self.net.training_graph()
        self.params = self.net.parameters()

    @property
    def adapts_lambda(self) -> bool:
        return self.config.method in ("can", "spcan", "ts-spcan")

    # -- selection ---------------------------------------------------------------

    def confidence(self) -> list:
        probs, _ = self.net.predict(self.target.features)
        return sp.confidence_records(self.target.ids, probs, self.net.domain_prob(self.target.features))

    def advance_schedule(self) -> tuple[float, float]:
        """Feed last epoch's source accuracy to the schedule; return (r_c, r_d)."""
        sp.update_rc(self.schedule, self.source_accuracy)
        sp.update_rd(self.schedule)
        r_c = self.schedule.r_c if self.config.fixed_rc is None else self.config.fixed_rc
        r_d = self.schedule.r_d if self.config.fixed_rd is None else self.config.fixed_rd
        return r_c, r_d

    def begin_epoch(self, sets: sp.SelectionSets) -> None:
        self.sets = sets
        self.css_rows = np.array([self.row_of[e.sample_id] for e in sets.css], dtype=np.int64)
        self.css_y = np.array([e.pseudo_label for e in sets.css], dtype=np.int64)
        self.css_wc = np.array([e.w_c for e in sets.css])
        self.css_wd = np.array([e.w_d for e in sets.css])
        self.dss_rows = np.array([self.row_of[e.sample_id] for e in sets.dss], dtype=np.int64)
        self.dss_wd = np.array([e.w_d for e in sets.dss])
        positions = None
        if self.config.dss_union:
            in_css = {e.sample_id for e in sets.css}
            positions = [j for j, e in enumerate(sets.dss) if e.sample_id not in in_css]
        self.composer.start_epoch(len(sets.css), len(sets.dss), self.shuffle, positions)
        self.sums = {k: 0.0 for k in ("L_src", "L_tar_c", "L_CA", "L_tar_d", "L_total")}
        self.block_sums = np.zeros(len(self.net.discs))
        self.replaced = 0

    # -- one iteration -----------------------------------------------------------

    def feed(self, b: sp.ComposedBatch) -> dict:
        src, tgt = self.source.features, self.target.features
        ns, npl = len(b.cls_source), len(b.cls_pseudo)
        xc = np.vstack([src[b.cls_source], tgt[self.css_rows[b.cls_pseudo]]])
        yc = onehot(np.concatenate([self.y_source[b.cls_source], self.css_y[b.cls_pseudo]]), self.k)
        w_src = np.concatenate([np.ones(ns), np.zeros(npl)])
        w_tar = np.concatenate([np.zeros(ns), self.css_wc[b.cls_pseudo]])
        xd = np.vstack([src[b.dom_source], tgt[self.css_rows[b.dom_css]],
                        tgt[self.dss_rows[b.dom_dss]], tgt[b.dom_random]])
        n_src, n_c, n_d, n_r = len(b.dom_source), len(b.dom_css), len(b.dom_dss), len(b.dom_random)
        dd = np.concatenate([np.ones(n_src), np.zeros(n_c + n_d + n_r)])
        # selected rows carry their w_d in place of the unit weight of the plain domain term
        w_sel = np.concatenate([np.zeros(n_src), self.css_wd[b.dom_css], self.dss_wd[b.dom_dss], np.zeros(n_r)])
        w_ca = np.concatenate([np.ones(n_src), np.zeros(n_c + n_d), np.ones(n_r)])
        col = lambda a: a[:, None]
        return {"xc": xc, "yc": yc, "w_src": col(w_src), "w_tar": col(w_tar),
                "xd": xd, "dd": col(dd), "w_ca": col(w_ca), "w_sel": col(w_sel)}

    def step(self) -> dict:
        b = self.composer.next(self.shuffle)
        self.replaced += b.replaced
        p = progress(self.t, self.opt.total_iterations)
        out = self.graph.run(self.feed(b), self.net.lam.values, self.config.alpha, adaptation_factor(p))
        lr = sgd_step(self.params, self.opt, self.t)
        if self.adapts_lambda and self.config.lambda_every == "iteration":
            self.net.set_lambda(update_lambda(self.net.lam, out["block_losses"], lr * LR_MULT_HEAD))
        for k in self.sums:
            self.sums[k] += out[k]
        self.block_sums += out["block_losses"]
        self.t += 1
        return out

    def end_epoch(self) -> dict:
        n = self.iters
        block_means = self.block_sums / n
        if self.adapts_lambda and self.config.lambda_every == "epoch":
            lr = inv_lr(self.opt, self.t) * LR_MULT_HEAD
            self.net.set_lambda(update_lambda(self.net.lam, block_means, lr))
        self.source_accuracy = float(np.mean(self.net.predict(self.source.features)[1] == self.y_source))
        rec = {k: float(v / n) for k, v in self.sums.items()}
        rec.update({
            "source_accuracy": self.source_accuracy,
            "target_accuracy": evaluate(self.net, self.target),
            "lambda": self.net.lam.values.tolist(),
            "block_losses": block_means.tolist(),
            "n_css": len(self.sets.css),
            "n_dss": len(self.sets.dss),
            "replaced_batches": int(self.replaced),
        })
        return rec

    def h_divergence(self) -> float:
        return h_divergence_estimate(self.net.features(self.source.features),
                                     self.net.features(self.target.features),
                                     ProbeConfig(seed=self.config.seed))


RECORD_ORDER = ("epoch", "stage", "source_accuracy", "target_accuracy", "L_src", "L_CA", "L_tar_c",
                "L_tar_d", "L_total", "lambda", "block_losses", "r_c", "r_d", "n_css", "n_dss",
                "h_divergence", "replaced_batches")


def ordered(rec: dict) -> dict:
    head = {k: rec[k] for k in RECORD_ORDER if k in rec}
    head.update({k: v for k, v in rec.items() if k not in head})
    return head


def hdiv_due(config: TrainConfig, epoch: int) -> bool:
    k = config.hdiv_every
    return k > 0 and ((epoch + 1) % k == 0 or epoch + 1 == config.epochs)


def summarize(records: list[dict], key: str = "target_accuracy") -> dict:
    accs = [r[key] for r in records]
    best = int(np.argmax(accs))
    return {"summary": True, "epochs": len(records), "best_target_accuracy": accs[best],
            "best_epoch": records[best]["epoch"], "last_target_accuracy": accs[-1]}


@dataclass
class TrainResult:
    net: Network
    metrics: list
    summary: dict
    wall_times: list
    stream: Stream | None = None


class MetricsWriter:
    """Append-only JSONL metrics plus a separate wall-time log."""

    def __init__(self, out_dir):
        self.dir = Path(out_dir) if out_dir is not None else None
        if self.dir is not None:
            self.dir.mkdir(parents=True, exist_ok=True)
            (self.dir / "metrics.jsonl").write_text("")
            (self.dir / "timing.jsonl").write_text("")

    def _append(self, name: str, rec: dict) -> None:
        if self.dir is not None:
            with open(self.dir / name, "a") as fh:
                fh.write(json.dumps(rec) + "\n")

    def record(self, rec: dict) -> None:
        self._append("metrics.jsonl", rec)

    def timing(self, epoch: int, seconds: float) -> None:
        self._append("timing.jsonl", {"epoch": epoch, "wall_time": seconds})


def train(source: Dataset, target: Dataset, config: TrainConfig, out_dir=None) -> TrainResult:
    """Train one network; writes ``metrics.jsonl`` and ``timing.jsonl`` when ``out_dir`` is given."""
    if config.method == "ts-spcan":
        raise ValueError("ts-spcan needs paired views; use twostream.train_two_stream")
    if target.quarantined is False:
        raise ValueError("target dataset must hold target-domain rows")
    s = Stream(config, source, target)
    writer = MetricsWriter(out_dir)
    records, times = [], []
    for epoch in range(config.epochs):
        t0 = time.perf_counter()
        stage = 1 if epoch < config.stage1_epochs else 2
        r_c = r_d = 0.0
        sets = sp.SelectionSets()
        if stage == 2 and config.method in SELECTING:
            r_c, r_d = s.advance_schedule()
            sets = sp.select(s.confidence(), r_c, r_d)
        s.begin_epoch(sets)
        for _ in range(s.iters):
            s.step()
        rec = s.end_epoch()
        rec.update(epoch=epoch + 1, stage=stage, r_c=r_c, r_d=r_d)
        if hdiv_due(config, epoch):
            rec["h_divergence"] = s.h_divergence()
        rec = ordered(rec)
        records.append(rec)
        writer.record(rec)
        times.append(time.perf_counter() - t0)
        writer.timing(epoch + 1, times[-1])
    summary = summarize(records)
    writer.record(summary)
    return TrainResult(s.net, records, summary, times, s)
