"""Self-paced pseudo-label selection, sample weights and batch quotas.

Selection ranks target samples by classifier confidence (CSS) or by
target-domain confidence of the last discriminator (DSS) and keeps the top
proportion. CSS's proportion grows by one step per epoch unless source
accuracy fell below its running mean two epochs in a row, in which case it
shrinks by one step; DSS's proportion grows linearly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .model import DomainBatch, Network, ca_loss, src_loss

RANK_EPS = 1e-9


@dataclass(frozen=True)
class ConfidenceRecord:
    sample_id: int
    pseudo_label: int
    class_conf: float
    domain_conf: float  # 1 - d(x), d = predicted probability of "source"

    def __post_init__(self):
        if not (0.0 <= self.class_conf <= 1.0 and 0.0 <= self.domain_conf <= 1.0):
            raise ValueError(f"confidences of sample {self.sample_id} must lie in [0, 1]")


def confidence_records(ids, probs, source_prob) -> list[ConfidenceRecord]:
    probs = np.asarray(probs, dtype=np.float64)
    labels = probs.argmax(axis=1)
    conf = probs[np.arange(len(probs)), labels]
    dconf = 1.0 - np.asarray(source_prob, dtype=np.float64).ravel()
    return [ConfidenceRecord(int(i), int(y), float(c), float(d))
            for i, y, c, d in zip(ids, labels, conf, dconf)]


@dataclass
class ScheduleState:
    horizon: int
    accuracies: list = field(default_factory=list)
    etas: list = field(default_factory=list)
    r_c: float = 0.0
    r_d: float = 0.0

    def __post_init__(self):
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")

    @property
    def epoch(self) -> int:
        return len(self.accuracies)

    @property
    def eta_sum(self) -> int:
        return int(sum(self.etas))


def update_rc(state: ScheduleState, accuracy: float) -> ScheduleState:
    """Record this epoch's source accuracy and recompute ``r_c``."""
    if not 0.0 <= accuracy <= 1.0:
        raise ValueError("accuracy must lie in [0, 1]")
    acc = state.accuracies
    acc.append(float(accuracy))
    e = len(acc)
    eta = 1
    if e >= 2:
        mean_now = sum(acc) / e
        mean_prev = sum(acc[:-1]) / (e - 1)
        if acc[-1] < mean_now and acc[-2] < mean_prev:
            eta = -1
    state.etas.append(eta)
    state.r_c = min(1.0, max(0.0, state.eta_sum / state.horizon))
    return state


def update_rd(state: ScheduleState) -> ScheduleState:
    state.r_d = min(state.epoch, state.horizon) / state.horizon
    return state


def n_selected(r: float, n: int) -> int:
    # guard against r = k/T landing a hair below an integer after scaling
    return max(0, min(n, math.floor(r * n + RANK_EPS)))


@dataclass(frozen=True)
class CssEntry:
    sample_id: int
    pseudo_label: int
    w_c: float
    w_d: float


@dataclass(frozen=True)
class DssEntry:
    sample_id: int
    w_d: float


@dataclass(frozen=True)
class SelectionSets:
    css: tuple = ()
    dss: tuple = ()


def dss_weight(source_prob: float) -> float:
    """``2 * (1 - d(x))``: 1 at d=0.5, 2 for confidently-target samples."""
    return 2.0 * (1.0 - source_prob)


def _ranked(records, key):
    return sorted(records, key=lambda r: (-key(r), r.sample_id))


def css_select(records: Sequence[ConfidenceRecord], r_c: float) -> tuple:
    k = n_selected(r_c, len(records))
    top = _ranked(records, lambda r: r.class_conf)[:k]
    return tuple(CssEntry(r.sample_id, r.pseudo_label, r.class_conf, 2.0 * r.domain_conf) for r in top)


def dss_select(records: Sequence[ConfidenceRecord], r_d: float) -> tuple:
    k = n_selected(r_d, len(records))
    top = _ranked(records, lambda r: r.domain_conf)[:k]
    return tuple(DssEntry(r.sample_id, 2.0 * r.domain_conf) for r in top)


def select(records: Sequence[ConfidenceRecord], r_c: float, r_d: float) -> SelectionSets:
    return SelectionSets(css_select(records, r_c), dss_select(records, r_d))


# -- target losses over the full selected sets ----------------------------------

def tar_c_loss(net: Network, features_by_id: dict, css: Sequence[CssEntry], n_target: int,
               backward: bool = False, loss_scale: float = 1.0) -> float:
    """``(1/N_t) * sum w_c * CE(C(F(x)), pseudo_label)`` over the CSS set."""
    if not css:
        return 0.0
    x = np.stack([features_by_id[e.sample_id] for e in css])
    return src_loss(net, x, [e.pseudo_label for e in css], [e.w_c for e in css],
                    backward=backward, normalizer=n_target, loss_scale=loss_scale)


def selection_multiplicity(sets: SelectionSets, union: bool = False) -> dict:
    """Per-id ``(s_c + s_d) * w_d`` weights (or ``max`` under union semantics)."""
    mult: dict[int, list] = {}
    for e in sets.css:
        mult.setdefault(e.sample_id, [0, e.w_d])[0] += 1
    for e in sets.dss:
        mult.setdefault(e.sample_id, [0, e.w_d])[0] += 1
    return {i: (min(c, 1) if union else c) * w for i, (c, w) in mult.items()}


def tar_d_loss(net: Network, features_by_id: dict, sets: SelectionSets, n_target: int,
               union: bool = False, backward: bool = False, loss_scale: float = 1.0,
               adapt: float = 1.0) -> float:
    """``(1/N_t) * sum (s_c + s_d) * w_d * L_CA(x, domain 0)`` over both sets."""
    weights = selection_multiplicity(sets, union)
    if not weights:
        return 0.0
    ids = sorted(weights)
    x = np.stack([features_by_id[i] for i in ids])
    batch = DomainBatch(x, np.zeros(len(ids)), [weights[i] for i in ids])
    rescale = len(ids) / n_target
    value, _ = ca_loss(net, batch, backward=backward, loss_scale=loss_scale * rescale, adapt=adapt)
    return value * rescale


# -- batch composition ----------------------------------------------------------

def round_half_up(x: float) -> int:
    return math.floor(x + 0.5)


@dataclass(frozen=True)
class Quotas:
    cls_source: int
    cls_pseudo: int
    dom_source: int
    dom_css: int
    dom_dss: int
    dom_random: int


def batch_quotas(batch_size: int, n_source: int, n_css: int, n_dss: int, n_target: int) -> Quotas:
    """Per-batch slot counts for the classifier and domain mini-batches.

    With ``beta = n_css / (n_source + n_css)`` and ``h = B / 2``: the
    classifier half-batch takes ``round(h beta)`` pseudo-labeled rows and
    the rest source; the domain batch takes ``h`` source rows,
    ``round(h beta)`` CSS rows, ``round(h (1 - beta) n_dss / n_target)`` DSS
    rows and fills the remainder with random target rows.
    """
    if batch_size < 2 or batch_size % 2:
        raise ValueError("batch size must be a positive even number")
    h = batch_size // 2
    beta = n_css / (n_source + n_css) if n_source + n_css else 0.0
    pseudo = round_half_up(h * beta)
    dss = min(round_half_up(h * (1.0 - beta) * n_dss / n_target), h - pseudo) if n_target else 0
    return Quotas(h - pseudo, pseudo, h, pseudo, dss, h - pseudo - dss)


class _Pool:
    def __init__(self, items):
        self.items = np.asarray(items, dtype=np.int64)
        self.order = np.arange(0)
        self.pos = 0

    def reshuffle(self, rng):
        self.order = rng.permutation(len(self.items)) if len(self.items) else np.arange(0)
        self.pos = 0

    def draw(self, k: int, rng) -> tuple[np.ndarray, bool]:
        n = len(self.items)
        if k == 0:
            return self.items[:0], False
        if k > n:
            if n == 0:
                raise ValueError("cannot draw from an empty pool")
            return self.items[rng.integers(0, n, size=k)], True
        if self.pos + k > n:
            self.reshuffle(rng)
        out = self.items[self.order[self.pos:self.pos + k]]
        self.pos += k
        return out, False


@dataclass
class ComposedBatch:
    cls_source: np.ndarray   # rows of the source set
    cls_pseudo: np.ndarray   # positions in the CSS list
    dom_source: np.ndarray   # rows of the source set
    dom_css: np.ndarray      # positions in the CSS list
    dom_dss: np.ndarray      # positions in the DSS list
    dom_random: np.ndarray   # rows of the target set
    replaced: bool = False


class BatchComposer:
    """Draws mixed mini-batches without replacement inside an epoch."""

    def __init__(self, n_source: int, n_target: int, batch_size: int = 16):
        self.n_source, self.n_target, self.batch_size = n_source, n_target, batch_size
        self.pools = {}
        self.quotas = batch_quotas(batch_size, n_source, 0, 0, n_target)
        self.replacement_draws = 0

    def start_epoch(self, n_css: int, n_dss: int, rng, dss_positions=None) -> Quotas:
        """Reset pools for a new epoch.

        ``dss_positions`` restricts which DSS list positions may be drawn
        (union semantics drop ids already in the CSS list).
        """
        dss = np.arange(n_dss) if dss_positions is None else np.asarray(dss_positions)
        self.pools = {
            "cls_source": _Pool(np.arange(self.n_source)),
            "cls_pseudo": _Pool(np.arange(n_css)),
            "dom_source": _Pool(np.arange(self.n_source)),
            "dom_css": _Pool(np.arange(n_css)),
            "dom_dss": _Pool(dss),
            "dom_random": _Pool(np.arange(self.n_target)),
        }
        for pool in self.pools.values():
            pool.reshuffle(rng)
        self.quotas = batch_quotas(self.batch_size, self.n_source, n_css, len(dss), self.n_target)
        return self.quotas

    def next(self, rng) -> ComposedBatch:
        parts, replaced = {}, False
        for name in ("cls_source", "cls_pseudo", "dom_source", "dom_css", "dom_dss", "dom_random"):
            parts[name], flag = self.pools[name].draw(getattr(self.quotas, name), rng)
            replaced |= flag
        self.replacement_draws += replaced
        return ComposedBatch(replaced=replaced, **parts)


def compose_batches(n_source: int, sets: SelectionSets, n_target: int, batch_size: int, rng) -> ComposedBatch:
    """Single draw with fresh pools; training uses :class:`BatchComposer` directly."""
    comp = BatchComposer(n_source, n_target, batch_size)
    comp.start_epoch(len(sets.css), len(sets.dss), rng)
    return comp.next(rng)
