import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from spcan import model
from spcan.autodiff import Graph
from spcan.data import ShiftSpec, generate
from spcan.hdivergence import ProbeConfig, h_divergence_estimate
from spcan.model import DomainBatch, LambdaWeights, Network, NetworkSpec, project_lambda

LEARNED_A = (0.75, 0.425, -0.175, -2.0)
LEARNED_B = (0.999, 0.745, -0.745, -2.0)


def grid_projection(v, c, b, step=1e-3):
    """Brute-force minimizer of ||x - v||^2 on the grid of the constraint set."""
    v = np.asarray(v, float)
    axis = np.round(np.arange(-b, b + step / 2, step), 12)
    n = len(v)
    if n == 1:
        return np.array([c])
    if n == 2:
        x1 = axis
        x2 = c - x1
        ok = np.abs(x2) <= b + 1e-12
        pts = np.stack([x1[ok], x2[ok]], axis=1)
    else:
        x1, x2 = np.meshgrid(axis, axis, indexing="ij")
        x3 = c - x1 - x2
        ok = np.abs(x3) <= b + 1e-12
        pts = np.stack([x1[ok], x2[ok], x3[ok]], axis=1)
    return pts[np.argmin(((pts - v) ** 2).sum(axis=1))]


# -- projection ------------------------------------------------------------------

def test_projection_examples():
    assert np.allclose(project_lambda([0, 0, 0], 1, 1), [1 / 3] * 3, atol=1e-12)
    assert np.allclose(project_lambda([2, 0, -2], 1, 1), [1, 1, -1], atol=1e-12)


def test_projection_example_matches_grid():
    assert np.abs(grid_projection([2, 0, -2], 1, 1) - [1, 1, -1]).max() <= 2e-3


@pytest.mark.parametrize("seed", range(12))
def test_projection_agrees_with_grid_oracle(seed):
    rng = np.random.default_rng(seed)
    n = 2 + seed % 2
    b = 1.0
    c = float(rng.uniform(-n * b * 0.9, n * b * 0.9))
    v = rng.normal(scale=1.5, size=n)
    x = project_lambda(v, c, b)
    assert abs(x.sum() - c) <= 1e-10
    assert np.all(np.abs(x) <= b + 1e-10)
    assert np.abs(x - grid_projection(v, c, b)).max() <= 2e-3


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(-5, 5), min_size=1, max_size=8), st.floats(-0.95, 0.95))
def test_projection_feasible_and_idempotent(vals, frac):
    n = len(vals)
    c = frac * n
    x = project_lambda(vals, c, 1.0)
    assert abs(x.sum() - c) <= 1e-10
    assert np.all(np.abs(x) <= 1.0 + 1e-10)
    assert np.array_equal(project_lambda(x, c, 1.0), x)


def test_projection_rejects_infeasible():
    with pytest.raises(ValueError, match="infeasible"):
        project_lambda([0, 0], 3.0, 1.0)


# -- lambda weights --------------------------------------------------------------

@pytest.mark.parametrize("vals", [LEARNED_A, LEARNED_B])
def test_learned_vectors_feasible_fixed_last(vals):
    lam = LambdaWeights(vals, fixed_last=-2.0)
    # (0.999, 0.745, -0.745) sums to 0.999: exactly on the 1e-3 boundary
    tol = 1e-3 + 1e-12
    assert abs(sum(vals) - (-1.0)) <= tol
    assert lam.feasible(tol)


def test_fixed_last_exempt_from_box_but_free_mode_is_not():
    assert LambdaWeights(LEARNED_A, fixed_last=-2.0).feasible(1e-12)
    assert not LambdaWeights(LEARNED_A, fixed_last=None).feasible()


def test_initial_lambda():
    lam = LambdaWeights.initial(4)
    assert np.allclose(lam.values, [1 / 3, 1 / 3, 1 / 3, -2])
    free = LambdaWeights.initial(4, fixed_last=None)
    assert np.allclose(free.values, [-0.25] * 4)


def test_update_lambda_equal_losses_is_identity():
    lam = LambdaWeights([0.5, 0.3, 0.2, -2.0])
    new = model.update_lambda(lam, [0.7] * 4, 0.1)
    assert np.allclose(new.values, lam.values, atol=1e-12)


def test_update_lambda_step_zero_is_identity():
    lam = LambdaWeights(LEARNED_A)
    assert np.array_equal(model.update_lambda(lam, [0.1, 0.2, 0.3, 0.4], 0.0).values, lam.values)


def test_update_lambda_keeps_fixed_last():
    lam = LambdaWeights.initial(4)
    new = model.update_lambda(lam, [0.3, 0.5, 0.9, 0.1], 0.5)
    assert new.values[-1] == -2.0
    assert new.feasible()


def test_update_lambda_large_step_reaches_lp_minimizer():
    losses = np.array([0.1, 0.2, 0.7])
    # brute-force LP over the feasible polytope on a 0.01 grid
    axis = np.round(np.arange(-1, 1.0001, 0.01), 10)
    best, arg = np.inf, None
    for a, b in itertools.product(axis, axis):
        c = 1.0 - a - b
        if abs(c) <= 1 + 1e-9:
            val = losses @ (a, b, c)
            if val < best - 1e-12:
                best, arg = val, (a, b, c)
    assert np.allclose(arg, (1, 1, -1))
    lam = LambdaWeights([1 / 3] * 3, fixed_last=None, target_sum=1.0)
    new = model.update_lambda(lam, losses, 100.0)
    assert np.allclose(new.values, arg, atol=1e-9)
    small = model.update_lambda(lam, losses, 0.1)
    assert small.values[0] > lam.values[0] and small.values[2] < lam.values[2]


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(0, 5), min_size=4, max_size=4), st.floats(0, 10))
def test_update_lambda_always_feasible(losses, step):
    lam = LambdaWeights(LEARNED_A)
    assert model.update_lambda(lam, losses, step).feasible()


# -- network and losses -------------------------------------------------------------

def small_net(seed=0, block_dims=(5, 4, 4, 3), lam=None, disc_blocks=None):
    spec = NetworkSpec(2, block_dims, 2, 4, disc_blocks)
    return Network(spec, np.random.default_rng(seed), lam)


def _flat_disc_outputs(net):
    for _, _, w2, b2 in net.discs.values():
        w2.value[...] = 0.0
        b2.value[...] = 0.0


def test_parameter_lr_multipliers():
    net = small_net()
    for p in net.parameters():
        assert p.lr_mult == (1.0 if p.name.startswith("block") else 10.0)


def test_domain_loss_at_half_is_ln2():
    net = small_net()
    _flat_disc_outputs(net)
    x = np.random.default_rng(1).normal(size=(6, 2))
    batch = DomainBatch(x, [1, 1, 1, 0, 0, 0])
    for l in range(1, 5):
        assert model.per_block_domain_loss(net, batch, l) == pytest.approx(math.log(2), abs=1e-12)


def test_domain_loss_zero_weights():
    net = small_net()
    batch = DomainBatch(np.ones((3, 2)), [1, 0, 1], [0, 0, 0])
    net.zero_grad()
    assert model.per_block_domain_loss(net, batch, 2, backward=True) == 0.0
    assert all(not p.grad.any() for p in net.parameters())


def test_domain_batch_rejects_empty_and_negative():
    with pytest.raises(ValueError, match="empty"):
        DomainBatch(np.zeros((0, 2)), [])
    with pytest.raises(ValueError):
        DomainBatch(np.zeros((2, 2)), [1, 0], [1, -1])


def test_ca_loss_learned_vector_is_minus_ln2():
    net = small_net(lam=LambdaWeights(LEARNED_A))
    _flat_disc_outputs(net)
    batch = DomainBatch(np.random.default_rng(2).normal(size=(4, 2)), [1, 0, 1, 0])
    val, per = model.ca_loss(net, batch)
    assert np.allclose(per, math.log(2), atol=1e-12)
    assert val == pytest.approx(-math.log(2), abs=1e-12)


def test_ca_loss_rejects_infeasible_lambda():
    net = small_net()
    net.lam.values[0] += 0.5
    with pytest.raises(ValueError, match="infeasible"):
        model.ca_loss(net, DomainBatch(np.ones((2, 2)), [1, 0]))


def _dann_reference(net, batch):
    """Plain DANN pass: block-m discriminator, no coupling node, features negated."""
    g = Graph()
    x = g.input("x", 2)
    d = g.input("d", 1)
    w = g.input("w", 1)
    h = x
    for wb, bb in net.blocks:
        h = g.relu(g.add_bias(g.matmul(h, g.param(wb)), g.param(bb)))
    w1, b1, w2, b2 = net.discs[net.spec.m]
    z = g.relu(g.add_bias(g.matmul(h, g.param(w1)), g.param(b1)))
    loss = g.sigmoid_bce(g.add_bias(g.matmul(z, g.param(w2)), g.param(b2)), d, w)
    net.zero_grad()
    g.forward({"x": batch.features, "d": batch.domain_labels[:, None], "w": batch.weights[:, None]})
    g.backward(loss)
    grads = {p.name: (-p.grad if p.name.startswith("block") else p.grad).copy() for p in net.parameters()}
    net.zero_grad()
    return float(loss.value[0, 0]), grads


@pytest.mark.parametrize("seed", range(3))
def test_reduction_to_dann(seed):
    lam = LambdaWeights([0, 0, 0, -1.0], fixed_last=None)
    net = small_net(seed, lam=lam)
    rng = np.random.default_rng(seed + 10)
    batch = DomainBatch(rng.normal(size=(8, 2)), rng.integers(0, 2, 8), rng.uniform(0.5, 1.5, 8))
    ref_loss, ref = _dann_reference(net, batch)
    val, per = model.ca_loss(net, batch, backward=True)
    assert val == pytest.approx(-ref_loss, abs=1e-12)
    # upper-block discriminators receive their own plain gradient; the one at m matches DANN exactly
    for p in net.parameters():
        if p.name.startswith("block") or p.name.startswith("disc4"):
            assert np.max(np.abs(p.grad - ref[p.name])) <= 1e-10, p.name


def test_dann_network_single_disc():
    net = small_net(disc_blocks=(4,))
    assert list(net.discs) == [4]
    assert net.lam.values.tolist() == [-1.0]


def test_src_loss_examples():
    net = small_net()
    w, b = net.classifier
    w.value[...] = 0.0
    b.value[...] = [[math.log(0.8), math.log(0.2)]]
    assert model.src_loss(net, np.zeros((1, 2)), [0]) == pytest.approx(-math.log(0.8), abs=1e-12)
    b.value[...] = 0.0
    assert model.src_loss(net, np.ones((5, 2)), [0, 1, 1, 0, 1]) == pytest.approx(math.log(2), abs=1e-12)
    b.value[...] = [[100.0, -100.0]]
    assert model.src_loss(net, np.ones((3, 2)), [0, 0, 0]) <= 2 * 1e-7
    with pytest.raises(ValueError, match="label"):
        model.src_loss(net, np.ones((1, 2)), [2])


def test_src_loss_normalizer():
    net = small_net()
    x = np.random.default_rng(0).normal(size=(3, 2))
    full = model.src_loss(net, x, [0, 1, 0], [0.5, 1.0, 0.2])
    assert model.src_loss(net, x, [0, 1, 0], [0.5, 1.0, 0.2], normalizer=30) == pytest.approx(full / 10, rel=1e-12)


def test_predict_ties_and_rows():
    net = small_net()
    w, b = net.classifier
    w.value[...] = 0.0
    b.value[...] = [[1.0, 1.0]]
    probs, labels = net.predict(np.random.default_rng(0).normal(size=(4, 2)))
    assert labels.tolist() == [0, 0, 0, 0]
    spec = NetworkSpec(2, (3, 3), 3, 2)
    net3 = Network(spec, np.random.default_rng(0))
    net3.classifier[0].value[...] = 0.0
    net3.classifier[1].value[...] = [[3.0, 1.0, 1.0]]
    probs, labels = net3.predict(np.zeros((2, 2)))
    assert labels.tolist() == [0, 0]
    probs, _ = small_net(4).predict(np.random.default_rng(1).normal(size=(50, 2)) * 10)
    assert np.abs(probs.sum(axis=1) - 1).max() <= 1e-12


def test_network_spec_validation():
    with pytest.raises(ValueError):
        NetworkSpec(2, (4,))
    with pytest.raises(ValueError):
        NetworkSpec(2, (4, 4), disc_blocks=(3,))


def test_checkpoint_round_trip_byte_identical(tmp_path):
    net = small_net(3)
    net.set_lambda(LambdaWeights(LEARNED_A))
    for p in net.parameters():
        p.momentum[...] = 0.125
    a, b = tmp_path / "a.json", tmp_path / "b.json"
    model.save_checkpoint(net, a, {"k": 1}, {"epoch": 4})
    back, state, extra = model.load_checkpoint(a)
    model.save_checkpoint(back, b, state, extra)
    assert a.read_bytes() == b.read_bytes()
    x = np.random.default_rng(0).normal(size=(5, 2))
    assert np.array_equal(net.predict(x)[0], back.predict(x)[0])
    assert extra == {"epoch": 4}


def test_checkpoint_rejects_foreign_file(tmp_path):
    p = tmp_path / "x.json"
    p.write_text('{"format": "other"}')
    with pytest.raises(ValueError, match="not a checkpoint"):
        model.load_checkpoint(p)


# -- H-divergence proxy -------------------------------------------------------------

@pytest.mark.parametrize("seed", range(5))
def test_hdiv_identical_distributions_near_zero(seed):
    s, t = generate(ShiftSpec(seed=seed))
    assert h_divergence_estimate(s.features, t.features) < 0.2


def test_hdiv_separated_near_two():
    s, t = generate(ShiftSpec(translation=[6.0, 0.0], seed=1))
    assert h_divergence_estimate(s.features, t.features) > 1.8


def test_hdiv_symmetric_and_bounded():
    s, t = generate(ShiftSpec(rotation=math.pi / 6, seed=2, n_source=200, n_target=150))
    a = h_divergence_estimate(s.features, t.features)
    b = h_divergence_estimate(t.features, s.features)
    assert a == b
    assert 0.0 <= a <= 2.0


def test_hdiv_rejects_tiny_sets():
    with pytest.raises(ValueError, match="2 samples"):
        h_divergence_estimate(np.zeros((1, 2)), np.zeros((5, 2)))


def test_hdiv_config_seed_changes_probe():
    s, t = generate(ShiftSpec(rotation=0.5, seed=4, n_source=100, n_target=100))
    vals = {h_divergence_estimate(s.features, t.features, ProbeConfig(seed=k)) for k in range(4)}
    assert len(vals) > 1
