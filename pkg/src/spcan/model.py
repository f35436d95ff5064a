"""Collaborative and adversarial network over dense blocks.

The feature extractor is a stack of ``m`` dense+relu blocks. A label
classifier reads the last block; a small domain discriminator reads each
block that carries one. Every discriminator input passes through a
grad-scale node whose factor is that block's weight ``lambda_l`` (times
the adaptation ramp), so positive weights train the block to help domain
classification and negative weights train it to confuse it, while the
discriminator's own parameters always descend their loss.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .autodiff import Graph, Parameter, glorot_uniform, sigmoid, softmax

LR_MULT_HEAD = 10.0
CHECKPOINT_FORMAT = "spcan-checkpoint"
CHECKPOINT_VERSION = 1


# -- lambda constraint set ------------------------------------------------

def project_lambda(v, target_sum: float, box: float, tol: float = 1e-12) -> np.ndarray:
    """Euclidean projection of ``v`` onto ``{x : sum(x) = c, |x_i| <= b}``.

    The minimizer has the form ``clip(v - tau, -b, b)``; ``tau`` is located
    by bisection on the monotone residual ``sum(x) - c`` and then solved
    exactly on the final active set.
    """
    v = np.asarray(v, dtype=np.float64)
    n = v.size
    if n == 0:
        raise ValueError("nothing to project")
    if box < 0 or abs(target_sum) > n * box + 1e-12:
        raise ValueError(f"infeasible: |{target_sum}| > {n} * {box}")
    if np.all(np.abs(v) <= box) and abs(v.sum() - target_sum) <= tol:
        return v.copy()

    def resid(tau):
        return np.clip(v - tau, -box, box).sum() - target_sum

    lo, hi = v.min() - box - 1.0, v.max() + box + 1.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if resid(mid) > 0:
            lo = mid
        else:
            hi = mid
        if hi - lo <= tol:
            break
    tau = 0.5 * (lo + hi)
    x = np.clip(v - tau, -box, box)
    free = np.abs(v - tau) < box
    if free.any():
        tau2 = (v[free].sum() - (target_sum - x[~free].sum())) / free.sum()
        x2 = np.clip(v - tau2, -box, box)
        if abs(x2.sum() - target_sum) <= abs(x.sum() - target_sum):
            x = x2
    return x


@dataclass
class LambdaWeights:
    """Discriminator weights with the sum/box constraint.

    With ``fixed_last`` set, the last entry is pinned to that value and the
    remaining entries sum to ``target_sum - fixed_last`` inside the box; the
    pinned entry is exempt from the box.
    """

    values: np.ndarray
    fixed_last: float | None = -2.0
    box: float = 1.0
    target_sum: float = -1.0

    def __post_init__(self):
        self.values = np.array(self.values, dtype=np.float64).ravel()

    @classmethod
    def initial(cls, n: int, fixed_last: float | None = -2.0, box: float = 1.0,
                target_sum: float = -1.0) -> "LambdaWeights":
        if fixed_last is None:
            vals = np.full(n, target_sum / n)
        else:
            if n < 2:
                raise ValueError("fixed-last mode needs at least two blocks")
            vals = np.full(n, (target_sum - fixed_last) / (n - 1))
            vals[-1] = fixed_last
        lam = cls(vals, fixed_last, box, target_sum)
        lam.check()
        return lam

    @property
    def n_free(self) -> int:
        return self.values.size - (self.fixed_last is not None)

    @property
    def free_sum(self) -> float:
        return self.target_sum - (self.fixed_last or 0.0)

    def violation(self) -> float:
        free = self.values[: self.n_free]
        v = abs(free.sum() - self.free_sum)
        v = max(v, float(np.max(np.abs(free) - self.box, initial=0.0)))
        if self.fixed_last is not None:
            v = max(v, abs(self.values[-1] - self.fixed_last))
        return v

    def feasible(self, tol: float = 1e-10) -> bool:
        return self.violation() <= tol

    def check(self, tol: float = 1e-10) -> None:
        if not self.feasible(tol):
            raise ValueError(f"infeasible lambda {self.values.tolist()} "
                             f"(violation {self.violation():.3g})")

    def copy(self) -> "LambdaWeights":
        return LambdaWeights(self.values.copy(), self.fixed_last, self.box, self.target_sum)

    def to_dict(self) -> dict:
        return {"values": self.values.tolist(), "fixed_last": self.fixed_last,
                "box": self.box, "target_sum": self.target_sum}

    @classmethod
    def from_dict(cls, d: dict) -> "LambdaWeights":
        return cls(d["values"], d["fixed_last"], d["box"], d["target_sum"])


def update_lambda(lam: LambdaWeights, block_losses: Sequence[float], step: float) -> LambdaWeights:
    """One projected-gradient step on ``sum_l lambda_l * L_l``."""
    losses = np.asarray(block_losses, dtype=np.float64)
    if losses.shape != lam.values.shape or not np.isfinite(losses).all():
        raise ValueError("need one finite loss per lambda entry")
    if step < 0:
        raise ValueError("step must be >= 0")
    new = lam.copy()
    if step == 0:
        return new
    k = lam.n_free
    if k:
        new.values[:k] = project_lambda(lam.values[:k] - step * losses[:k], lam.free_sum, lam.box)
    return new


# -- network ---------------------------------------------------------------

@dataclass(frozen=True)
class NetworkSpec:
    input_dim: int
    block_dims: tuple = (32, 32, 32, 32)
    num_classes: int = 2
    disc_hidden: int = 16
    disc_blocks: tuple | None = None  # 1-based block indices; None = every block

    def __post_init__(self):
        object.__setattr__(self, "block_dims", tuple(int(b) for b in self.block_dims))
        if self.disc_blocks is not None:
            object.__setattr__(self, "disc_blocks", tuple(int(b) for b in self.disc_blocks))
        if len(self.block_dims) < 2:
            raise ValueError("need at least two blocks")
        if min((self.input_dim, self.num_classes, self.disc_hidden) + self.block_dims) < 1:
            raise ValueError("all dimensions must be >= 1")
        if not set(self.discriminated) <= set(range(1, self.m + 1)) or not self.discriminated:
            raise ValueError("disc_blocks must name blocks 1..m")

    @property
    def m(self) -> int:
        return len(self.block_dims)

    @property
    def discriminated(self) -> tuple:
        return tuple(range(1, self.m + 1)) if self.disc_blocks is None else tuple(sorted(self.disc_blocks))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["block_dims"] = list(self.block_dims)
        d["disc_blocks"] = None if self.disc_blocks is None else list(self.disc_blocks)
        return d


@dataclass
class DomainBatch:
    features: np.ndarray
    domain_labels: np.ndarray
    weights: np.ndarray | None = None

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.domain_labels = np.asarray(self.domain_labels, dtype=np.float64).ravel()
        n = self.features.shape[0]
        if n == 0:
            raise ValueError("empty domain batch")
        if self.weights is None:
            self.weights = np.ones(n)
        self.weights = np.asarray(self.weights, dtype=np.float64).ravel()
        if len(self.domain_labels) != n or len(self.weights) != n:
            raise ValueError("features, domain labels and weights must have equal length")
        if (self.weights < 0).any():
            raise ValueError("per-sample weights must be >= 0")


class Network:
    def __init__(self, spec: NetworkSpec, rng: np.random.Generator,
                 lam: LambdaWeights | None = None):
        self.spec = spec
        dims = (spec.input_dim,) + spec.block_dims
        self.blocks = []
        for l in range(spec.m):
            w = Parameter(glorot_uniform(rng, dims[l], dims[l + 1]), name=f"block{l + 1}.w")
            b = Parameter(np.zeros((1, dims[l + 1])), name=f"block{l + 1}.b")
            self.blocks.append((w, b))
        self.classifier = (
            Parameter(glorot_uniform(rng, dims[-1], spec.num_classes), LR_MULT_HEAD, "cls.w"),
            Parameter(np.zeros((1, spec.num_classes)), LR_MULT_HEAD, "cls.b"),
        )
        self.discs = {}
        for l in spec.discriminated:
            d_in = spec.block_dims[l - 1]
            self.discs[l] = (
                Parameter(glorot_uniform(rng, d_in, spec.disc_hidden), LR_MULT_HEAD, f"disc{l}.w1"),
                Parameter(np.zeros((1, spec.disc_hidden)), LR_MULT_HEAD, f"disc{l}.b1"),
                Parameter(glorot_uniform(rng, spec.disc_hidden, 1), LR_MULT_HEAD, f"disc{l}.w2"),
                Parameter(np.zeros((1, 1)), LR_MULT_HEAD, f"disc{l}.b2"),
            )
        if lam is None:
            lam = LambdaWeights.initial(len(self.discs), -2.0 if len(self.discs) > 1 else None)
        self.set_lambda(lam)
        self._graphs: dict[str, tuple] = {}

    def set_lambda(self, lam: LambdaWeights) -> None:
        if lam.values.size != len(self.discs):
            raise ValueError(f"lambda has {lam.values.size} entries for {len(self.discs)} discriminators")
        self.lam = lam

    def parameters(self) -> list[Parameter]:
        out = [p for blk in self.blocks for p in blk]
        out += list(self.classifier)
        for l in sorted(self.discs):
            out += list(self.discs[l])
        return out

    def feature_parameters(self) -> list[Parameter]:
        return [p for blk in self.blocks for p in blk]

    # -- graph pieces -----------------------------------------------------

    def _features(self, g: Graph, x) -> list:
        hs, h = [], x
        for l, (w, b) in enumerate(self.blocks, start=1):
            h = g.relu(g.add_bias(g.matmul(h, g.param(w)), g.param(b)), name=f"h{l}")
            hs.append(h)
        return hs

    def _logits(self, g: Graph, h):
        w, b = self.classifier
        return g.add_bias(g.matmul(h, g.param(w)), g.param(b), name="logits")

    def _disc(self, g: Graph, l: int, h, factor: float = 1.0):
        w1, b1, w2, b2 = self.discs[l]
        gs = g.grad_scale(h, factor, name=f"gs{l}")
        z = g.relu(g.add_bias(g.matmul(gs, g.param(w1)), g.param(b1)))
        return gs, g.add_bias(g.matmul(z, g.param(w2)), g.param(b2), name=f"dlogit{l}")

    def _graph(self, kind: str):
        if kind in self._graphs:
            return self._graphs[kind]
        g = Graph()
        s = self.spec
        if kind == "infer":
            x = g.input("x", s.input_dim)
            hs = self._features(g, x)
            logits = self._logits(g, hs[-1])
            dl = {l: self._disc(g, l, hs[l - 1])[1] for l in self.discs}
            out = (g, hs, logits, dl)
        elif kind == "domain":
            x = g.input("x", s.input_dim)
            d = g.input("d", 1)
            w = g.input("w", 1)
            hs = self._features(g, x)
            gs, losses = {}, {}
            for l in self.discs:
                gs[l], z = self._disc(g, l, hs[l - 1])
                losses[l] = g.sigmoid_bce(z, d, w, name=f"ld{l}")
            out = (g, x, hs, gs, losses)
        elif kind == "cls":
            x = g.input("x", s.input_dim)
            y = g.input("y", s.num_classes)
            w = g.input("w", 1)
            hs = self._features(g, x)
            out = (g, g.softmax_xent(self._logits(g, hs[-1]), y, w, name="xent"))
        elif kind == "train":
            out = TrainGraph(self)
        else:
            raise KeyError(kind)
        self._graphs[kind] = out
        return out

    def training_graph(self) -> "TrainGraph":
        return self._graph("train")

    # -- inference --------------------------------------------------------

    def forward_all(self, x):
        g, hs, logits, dl = self._graph("infer")
        g.forward({"x": np.asarray(x, dtype=np.float64)})
        return ([h.value for h in hs], logits.value,
                {l: node.value for l, node in dl.items()})

    def predict(self, x) -> tuple[np.ndarray, np.ndarray]:
        """Softmax rows and argmax labels (ties go to the lowest class index)."""
        _, logits, _ = self.forward_all(self._check_x(x))
        probs = softmax(logits)
        return probs, probs.argmax(axis=1)

    def domain_prob(self, x, block: int | None = None) -> np.ndarray:
        """Probability of "source" from a discriminator (default: the last one)."""
        block = max(self.discs) if block is None else block
        _, _, dl = self.forward_all(self._check_x(x))
        return sigmoid(dl[block]).ravel()

    def features(self, x, block: int | None = None) -> np.ndarray:
        hs, _, _ = self.forward_all(self._check_x(x))
        return hs[(block or self.spec.m) - 1]

    def _check_x(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.spec.input_dim:
            raise ValueError(f"expected (n, {self.spec.input_dim}) features, got {x.shape}")
        return x

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()


def onehot(labels, k: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"label outside [0, {k})")
    out = np.zeros((labels.size, k))
    out[np.arange(labels.size), labels] = 1.0
    return out


class TrainGraph:
    """Joint graph for one iteration: classifier batch plus domain batch.

    Classifier rows carry two weight columns (source rows, pseudo-labeled
    rows) and domain rows two more (unselected rows, selected rows) so the
    recorded L_src, L_tar_c, per-block CA and per-block selected-target
    losses come straight from graph nodes.
    """

    def __init__(self, net: Network):
        s = net.spec
        g = self.graph = Graph()
        xc = g.input("xc", s.input_dim)
        yc = g.input("yc", s.num_classes)
        w_src = g.input("w_src", 1)
        w_tar = g.input("w_tar", 1)
        logits = net._logits(g, net._features(g, xc)[-1])
        self.l_src = g.softmax_xent(logits, yc, w_src, name="L_src")
        self.l_tar_c = g.softmax_xent(logits, yc, w_tar, name="L_tar_c")
        xd = g.input("xd", s.input_dim)
        dd = g.input("dd", 1)
        w_ca = g.input("w_ca", 1)
        w_sel = g.input("w_sel", 1)
        hs = net._features(g, xd)
        self.blocks = sorted(net.discs)
        self.gs, self.l_ca, self.l_sel = {}, {}, {}
        for l in self.blocks:
            self.gs[l], z = net._disc(g, l, hs[l - 1])
            self.l_ca[l] = g.sigmoid_bce(z, dd, w_ca, name=f"L_ca{l}")
            self.l_sel[l] = g.sigmoid_bce(z, dd, w_sel, name=f"L_sel{l}")

    def run(self, feed: dict, lam: np.ndarray, alpha: float, adapt: float, backward: bool = True) -> dict:
        for i, l in enumerate(self.blocks):
            self.gs[l].factor = float(lam[i]) * adapt
        self.graph.forward(feed)
        ca = np.array([self.l_ca[l].value[0, 0] for l in self.blocks])
        sel = np.array([self.l_sel[l].value[0, 0] for l in self.blocks])
        out = {
            "L_src": self.l_src.value[0, 0],
            "L_tar_c": self.l_tar_c.value[0, 0],
            "L_CA": float(np.dot(lam, ca)),
            "L_tar_d": float(np.dot(lam, sel)),
            "block_losses": ca + sel,
        }
        out["L_total"] = out["L_src"] + out["L_tar_c"] + alpha * (out["L_CA"] + out["L_tar_d"])
        if backward:
            terms = [(self.l_src, 1.0), (self.l_tar_c, 1.0)]
            for l in self.blocks:
                terms += [(self.l_ca[l], alpha), (self.l_sel[l], alpha)]
            self.graph.backward_terms(terms)
        return out


# -- loss operations ---------------------------------------------------------

def per_block_domain_loss(net: Network, batch: DomainBatch, block: int, backward: bool = False,
                          loss_scale: float = 1.0, adapt: float = 1.0) -> float:
    """Weighted mean BCE of discriminator ``block`` against the domain labels.

    With ``backward``, discriminator parameters receive ``loss_scale`` times
    the plain gradient and the feature path receives it scaled by the
    block's lambda (times ``adapt``).
    """
    if block not in net.discs:
        raise ValueError(f"block {block} has no discriminator")
    g, x, hs, gs, losses = net._graph("domain")
    _set_factors(net, gs, adapt)
    g.forward(_domain_feed(batch))
    if backward:
        g.backward(losses[block], loss_scale)
    return float(losses[block].value[0, 0])


def ca_loss(net: Network, batch: DomainBatch, backward: bool = False,
            loss_scale: float = 1.0, adapt: float = 1.0) -> tuple[float, np.ndarray]:
    """``sum_l lambda_l * L_D(l)`` and the per-block losses."""
    net.lam.check()
    g, x, hs, gs, losses = net._graph("domain")
    _set_factors(net, gs, adapt)
    g.forward(_domain_feed(batch))
    blocks = sorted(net.discs)
    per = np.array([losses[l].value[0, 0] for l in blocks])
    if backward:
        g.backward_terms([(losses[l], loss_scale) for l in blocks])
    return float(np.dot(net.lam.values, per)), per


def _set_factors(net, gs, adapt):
    for i, l in enumerate(sorted(net.discs)):
        gs[l].factor = float(net.lam.values[i]) * adapt


def _domain_feed(batch: DomainBatch) -> dict:
    return {"x": batch.features, "d": batch.domain_labels[:, None], "w": batch.weights[:, None]}


def src_loss(net: Network, x, labels, weights=None, backward: bool = False,
             normalizer: float | None = None, loss_scale: float = 1.0) -> float:
    """Mean (optionally weighted) cross-entropy of the classifier.

    ``normalizer`` replaces the batch size in the mean, e.g. the total
    target count for the pseudo-label loss.
    """
    x = net._check_x(x)
    y = onehot(labels, net.spec.num_classes)
    if len(y) != len(x):
        raise ValueError("one label per sample required")
    if len(x) == 0:
        raise ValueError("empty batch")
    w = np.ones((len(x), 1)) if weights is None else np.asarray(weights, dtype=np.float64).reshape(-1, 1)
    g, xent = net._graph("cls")
    g.forward({"x": x, "y": y, "w": w})
    rescale = len(x) / normalizer if normalizer else 1.0
    if backward:
        g.backward(xent, loss_scale * rescale)
    return float(xent.value[0, 0]) * rescale


# -- checkpoints --------------------------------------------------------------

def _dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")) + "\n"


def save_checkpoint(net: Network, path, rng_state: dict | None = None, extra: dict | None = None) -> None:
    doc = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "spec": net.spec.to_dict(),
        "params": [
            {"name": p.name, "shape": list(p.shape), "value": p.value.ravel().tolist(),
             "momentum": p.momentum.ravel().tolist()}
            for p in net.parameters()
        ],
        "lambda": net.lam.to_dict(),
        "rng_state": rng_state,
        "extra": extra or {},
    }
    Path(path).write_text(_dumps(doc))


def load_checkpoint(path) -> tuple[Network, dict | None, dict]:
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: not a checkpoint")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {doc.get('version')}")
    sd = doc["spec"]
    spec = NetworkSpec(sd["input_dim"], tuple(sd["block_dims"]), sd["num_classes"],
                       sd["disc_hidden"], None if sd["disc_blocks"] is None else tuple(sd["disc_blocks"]))
    net = Network(spec, np.random.default_rng(0), LambdaWeights.from_dict(doc["lambda"]))
    params = net.parameters()
    if len(params) != len(doc["params"]):
        raise ValueError(f"{path}: parameter count mismatch")
    for p, rec in zip(params, doc["params"]):
        if rec["name"] != p.name or tuple(rec["shape"]) != p.shape:
            raise ValueError(f"{path}: parameter {rec['name']} does not match {p.name}")
        p.value[...] = np.array(rec["value"], dtype=np.float64).reshape(p.shape)
        p.momentum[...] = np.array(rec["momentum"], dtype=np.float64).reshape(p.shape)
    return net, doc["rng_state"], doc["extra"]
