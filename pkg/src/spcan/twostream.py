"""Two-view co-training: each stream trains on the other's selections.

At the start of every stage-2 epoch both streams snapshot their confidence
tables. Stream A's classifier and last discriminator pick the pseudo-labeled
and domain-confident samples that stream B trains on, and vice versa.
Iterations alternate A then B. Predictions are fused by averaging the two
softmax rows.
"""

from __future__ import annotations

import dataclasses
import time
from dataclasses import dataclass

import numpy as np

from . import selfpaced as sp
from .data import GUARD, Dataset, PairedDataset
from .model import Network
from .trainer import MetricsWriter, Stream, TrainConfig, hdiv_due, ordered, summarize


def fuse_probs(pa, pb) -> tuple[np.ndarray, np.ndarray]:
    probs = 0.5 * (np.asarray(pa, dtype=np.float64) + np.asarray(pb, dtype=np.float64))
    return probs, probs.argmax(axis=1)


def fuse_predict(net_a: Network, net_b: Network, x_a, x_b) -> tuple[np.ndarray, np.ndarray]:
    """Equal-weight mean of both streams' softmax rows; argmax ties go low."""
    if len(x_a) != len(x_b):
        raise ValueError("views must carry the same samples")
    return fuse_probs(net_a.predict(x_a)[0], net_b.predict(x_b)[0])


def fused_accuracy(net_a: Network, net_b: Network, view_a: Dataset, view_b: Dataset) -> float:
    if not np.array_equal(view_a.ids, view_b.ids):
        raise ValueError("views disagree on sample ids")
    with GUARD.evaluation():
        labels = view_a.labels
    _, pred = fuse_predict(net_a, net_b, view_a.features, view_b.features)
    return float(np.mean(pred == labels))


def exchange(records_a, records_b, rates_a, rates_b) -> tuple[sp.SelectionSets, sp.SelectionSets]:
    """Return (sets for A, sets for B): each built from the other stream's table and rates."""
    ids_a = sorted(r.sample_id for r in records_a)
    if ids_a != sorted(r.sample_id for r in records_b):
        raise ValueError("confidence tables cover different sample ids")
    return sp.select(records_b, *rates_b), sp.select(records_a, *rates_a)


@dataclass
class StreamPair:
    a: Stream
    b: Stream

    def __iter__(self):
        return iter((self.a, self.b))


@dataclass
class TwoStreamResult:
    pair: StreamPair
    metrics: list
    summary: dict
    wall_times: list


def make_pair(paired: PairedDataset, config: TrainConfig) -> StreamPair:
    cfg = dataclasses.replace(config, method="ts-spcan")
    k = int(max(paired.source_a.source_labels.max(), paired.source_b.source_labels.max())) + 1
    return StreamPair(Stream(cfg, paired.source_a, paired.target_a, k),
                      Stream(cfg, paired.source_b, paired.target_b, k))


def ts_epoch(pair: StreamPair, epoch: int, config: TrainConfig) -> dict:
    """One epoch for both streams; returns the combined metrics record."""
    stage = 1 if epoch < config.stage1_epochs else 2
    rates = {"A": (0.0, 0.0), "B": (0.0, 0.0)}
    sets_a = sets_b = sp.SelectionSets()
    if stage == 2:
        rates = {"A": pair.a.advance_schedule(), "B": pair.b.advance_schedule()}
        sets_a, sets_b = exchange(pair.a.confidence(), pair.b.confidence(), rates["A"], rates["B"])
    pair.a.begin_epoch(sets_a)
    pair.b.begin_epoch(sets_b)
    for _ in range(max(pair.a.iters, pair.b.iters)):
        for s in pair:
            if s.t < s.iters * (epoch + 1):
                s.step()
    rec = {"epoch": epoch + 1, "stage": stage}
    for tag, s in (("A", pair.a), ("B", pair.b)):
        r = s.end_epoch()
        r["r_c"], r["r_d"] = rates[tag]
        if hdiv_due(config, epoch):
            r["h_divergence"] = s.h_divergence()
        rec[tag] = ordered(r)
    rec["target_accuracy"] = fused_accuracy(pair.a.net, pair.b.net, pair.a.target, pair.b.target)
    return rec


def train_two_stream(paired: PairedDataset, config: TrainConfig, out_dir=None) -> TwoStreamResult:
    pair = make_pair(paired, config)
    writer = MetricsWriter(out_dir)
    records, times = [], []
    for epoch in range(config.epochs):
        t0 = time.perf_counter()
        rec = ts_epoch(pair, epoch, config)
        records.append(rec)
        writer.record(rec)
        times.append(time.perf_counter() - t0)
        writer.timing(epoch + 1, times[-1])
    summary = summarize(records)
    for tag in ("A", "B"):
        summary[f"last_target_accuracy_{tag}"] = records[-1][tag]["target_accuracy"]
    writer.record(summary)
    return TwoStreamResult(pair, records, summary, times)
