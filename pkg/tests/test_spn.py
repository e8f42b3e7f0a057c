import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from spnseq import oracle, spn
from spnseq.errors import ContractError, InputError, NumericError, StructureError

from conftest import small_topology


# -- enumerate_prefixes ----------------------------------------------------

def test_depth_zero_prefixes_are_labels():
    topo = small_topology()
    prefixes = spn.enumerate_prefixes(topo, 0)
    assert prefixes == [spn.PathPrefix(0), spn.PathPrefix(1)]


def test_depth_one_prefix_count():
    assert len(spn.enumerate_prefixes(small_topology(), 1)) == 8


def test_depth_two_prefix_count_matches_recursive_enumeration():
    topo = spn.SpnTopology(2, 2, 3, 3, 1)

    def count(depth):
        # independent recursive count: every prefix branches into I children x H states
        if depth == 0:
            return topo.num_labels
        return count(depth - 1) * topo.children_per_parent * topo.states_per_hidden

    prefixes = spn.enumerate_prefixes(topo, 2)
    assert len(prefixes) == count(2) == 108
    assert len(set(prefixes)) == 108


def test_prefix_order_is_canonical_and_index_roundtrips():
    topo = spn.SpnTopology(2, 2, 3, 2, 1)
    for depth in range(3):
        prefixes = spn.enumerate_prefixes(topo, depth)
        keys = [(p.label, *[v for pair in p.per_layer for v in pair]) for p in prefixes]
        assert keys == sorted(keys)
        for i, p in enumerate(prefixes):
            assert p.index(topo) == i
            assert spn.PathPrefix.from_index(topo, depth, i) == p


def test_depth_out_of_range():
    with pytest.raises(StructureError):
        spn.enumerate_prefixes(small_topology(), 2)
    with pytest.raises(StructureError):
        spn.enumerate_prefixes(small_topology(), -1)


def test_invalid_prefix_rejected():
    topo = small_topology()
    with pytest.raises(StructureError):
        spn.PathPrefix(0, ((2, 0),)).index(topo)
    with pytest.raises(StructureError):
        spn.PathPrefix(5).index(topo)


def test_topology_counts():
    topo = spn.SpnTopology(3, 2, 2, 3, 4)
    assert topo.num_hidden == 2 + 4 + 8
    assert topo.num_paths == 8
    assert topo.num_prefixes(3) == 3 * 4 ** 3


@pytest.mark.parametrize("field", ["num_layers", "children_per_parent", "states_per_hidden",
                                   "num_labels", "input_dim"])
def test_topology_rejects_non_positive(field):
    kw = dict(num_layers=1, children_per_parent=2, states_per_hidden=2, num_labels=2, input_dim=3)
    kw[field] = 0
    with pytest.raises(StructureError):
        spn.SpnTopology(**kw)


# -- evaluate --------------------------------------------------------------

def test_zero_weights_count_hidden_configurations():
    topo = small_topology()
    ev = spn.evaluate(topo, spn.SpnWeights.zeros(topo), np.ones(3))
    np.testing.assert_allclose(ev.q_values, np.log(4.0), rtol=0, atol=1e-15)
    np.testing.assert_allclose(spn.posterior(ev), [0.5, 0.5], atol=1e-15)


def test_zero_weights_two_layers():
    topo = spn.SpnTopology(2, 2, 2, 2, 2)
    ev = spn.evaluate(topo, spn.SpnWeights.zeros(topo), np.array([0.3, -1.0]))
    np.testing.assert_allclose(np.exp(ev.q_values), 64.0, rtol=1e-14)


def test_frozen_oracle_values():
    rng = np.random.default_rng(12345)
    topo = spn.SpnTopology(2, 2, 3, 3, 4)
    w = spn.SpnWeights.random(topo, rng)
    x = rng.uniform(-1, 1, 4)
    # computed once with oracle.spn_brute_force (729 configurations per label)
    frozen = [5.982476471102714, 6.445553299441775, 8.35601301982436]
    np.testing.assert_allclose(spn.evaluate(topo, w, x).q_values, frozen, rtol=1e-12)


def test_random_model_matches_oracle(rng):
    topo = spn.SpnTopology(2, 2, 3, 3, 4)
    for _ in range(5):
        w = spn.SpnWeights.random(topo, rng)
        x = rng.uniform(-1, 1, 4)
        fast = spn.evaluate(topo, w, x).q_values
        ref = oracle.spn_brute_force(topo, w, x)
        assert np.max(np.abs(np.expm1(fast - ref))) <= 1e-10


def test_max_semiring_matches_oracle(rng):
    topo = spn.SpnTopology(2, 2, 2, 3, 2, spn.Semiring.MAX_PRODUCT)
    w = spn.SpnWeights.random(topo, rng)
    x = rng.normal(size=2)
    np.testing.assert_allclose(spn.evaluate(topo, w, x).q_values,
                               oracle.spn_brute_force(topo, w, x), rtol=1e-12)


def test_evaluate_rejects_bad_input():
    topo = small_topology()
    w = spn.SpnWeights.zeros(topo)
    with pytest.raises(InputError):
        spn.evaluate(topo, w, np.zeros(4))
    with pytest.raises(NumericError):
        spn.evaluate(topo, w, np.array([0.0, np.nan, 1.0]))
    w.leaf_weights[0, 0] = np.inf
    with pytest.raises(NumericError):
        spn.evaluate(topo, w, np.zeros(3))


def test_batch_evaluation_matches_single(rng):
    topo = spn.SpnTopology(2, 2, 2, 3, 3)
    w = spn.SpnWeights.random(topo, rng)
    X = rng.normal(size=(5, 3))
    batch = spn.log_q(topo, w, X)
    for b in range(5):
        np.testing.assert_allclose(batch[b], spn.evaluate(topo, w, X[b]).q_values, rtol=1e-14)


def test_complexity_counters():
    for L, I, H, Y in [(1, 2, 2, 3), (2, 2, 3, 2), (3, 2, 2, 2), (2, 3, 1, 4)]:
        topo = spn.SpnTopology(L, I, H, Y, 2)
        counter = spn.EvalCounter()
        spn.evaluate(topo, spn.SpnWeights.zeros(topo), np.zeros(2), counter)
        assert counter.leaf_products == Y * (I * H) ** L
        # one sum per (parent prefix, child): Y * sum_p I^p H^(p-1)
        assert counter.sum_nodes == Y * sum(I ** p * H ** (p - 1) for p in range(1, L + 1))
        if H == 1:
            assert counter.sum_nodes == Y * sum(I ** l for l in range(1, L + 1))


def test_single_state_semirings_agree(rng):
    topo = spn.SpnTopology(2, 2, 1, 3, 2)
    w = spn.SpnWeights.random(topo, rng)
    x = rng.normal(size=2)
    a = spn.evaluate(topo, w, x).q_values
    b = spn.evaluate(topo.with_semiring(spn.Semiring.MAX_PRODUCT), w, x).q_values
    np.testing.assert_array_equal(a, b)


# -- posterior ---------------------------------------------------------------

def test_posterior_direct_normalization():
    ev = spn.SpnEvaluation(np.log([3.0, 1.0]), [], math.log(4.0))
    np.testing.assert_allclose(spn.posterior(ev), [0.75, 0.25], rtol=1e-15)


def test_posterior_uniform():
    ev = spn.SpnEvaluation(np.full(4, 2.5), [], 2.5 + math.log(4))
    np.testing.assert_allclose(spn.posterior(ev), 0.25)


def test_posterior_matches_oracle(rng):
    topo = spn.SpnTopology(2, 2, 2, 3, 2)
    w = spn.SpnWeights.random(topo, rng)
    x = rng.normal(size=2)
    ref = oracle.spn_brute_force(topo, w, x)
    expected = np.exp(ref) / math.fsum(np.exp(ref))
    np.testing.assert_allclose(spn.posterior(spn.evaluate(topo, w, x)), expected,
                               rtol=0, atol=1e-10)


def test_posterior_forbidden_under_max():
    topo = small_topology(semiring=spn.Semiring.MAX_PRODUCT)
    ev = spn.evaluate(topo, spn.SpnWeights.zeros(topo), np.zeros(3))
    with pytest.raises(ContractError):
        spn.posterior(ev)
    with pytest.raises(ContractError):
        spn.gradient(topo, spn.SpnWeights.zeros(topo), np.zeros(3), 0)


topologies = st.builds(
    spn.SpnTopology,
    num_layers=st.integers(1, 3), children_per_parent=st.integers(1, 2),
    states_per_hidden=st.integers(1, 3), num_labels=st.integers(1, 3),
    input_dim=st.integers(1, 5))


@settings(max_examples=60, deadline=None)
@given(topo=topologies, seed=st.integers(0, 2 ** 31), shift=st.floats(-50, 50))
def test_posterior_properties(topo, seed, shift):
    rng = np.random.default_rng(seed)
    w = spn.SpnWeights.random(topo, rng, scale=2.0)
    x = rng.normal(size=topo.input_dim)
    p = spn.posterior(spn.evaluate(topo, w, x))
    assert abs(p.sum() - 1.0) <= 1e-12
    assert np.all((p >= 0) & (p <= 1))
    w.prefix_weights[0] += shift
    p2 = spn.posterior(spn.evaluate(topo, w, x))
    np.testing.assert_allclose(p2, p, rtol=0, atol=1e-12)


# -- gradient ----------------------------------------------------------------

def _fd(topo, w, x, label, step=1e-5):
    out = w.zeros_like()
    for arr, garr in zip(w.arrays(), out.arrays()):
        for i in np.ndindex(arr.shape):
            orig = arr[i]
            arr[i] = orig + step
            up = spn.gradient(topo, w, x, label)[1]
            arr[i] = orig - step
            down = spn.gradient(topo, w, x, label)[1]
            arr[i] = orig
            garr[i] = (up - down) / (2 * step)
    return out


def test_zero_weight_root_gradient():
    topo = spn.SpnTopology(1, 2, 2, 4, 3)
    g, ll = spn.gradient(topo, spn.SpnWeights.zeros(topo), np.ones(3), 2)
    np.testing.assert_allclose(g.prefix_weights[0], np.eye(4)[2] - 0.25, atol=1e-15)
    assert ll == pytest.approx(math.log(0.25))


def test_root_gradient_sums_to_zero(rng):
    topo = spn.SpnTopology(2, 2, 2, 3, 3)
    w = spn.SpnWeights.random(topo, rng)
    g, _ = spn.gradient(topo, w, rng.normal(size=3), 1)
    assert abs(g.prefix_weights[0].sum()) < 1e-14


def test_gradient_matches_finite_differences(rng):
    topo = spn.SpnTopology(2, 2, 2, 3, 3)
    for label in range(3):
        w = spn.SpnWeights.random(topo, rng)
        x = rng.normal(size=3)
        g, _ = spn.gradient(topo, w, x, label)
        num = _fd(topo, w, x, label)
        for a, n in zip(g.arrays(), num.arrays()):
            diff = np.abs(a - n)
            rel = diff / np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-300)
            assert np.all((diff <= 1e-8) | (rel <= 1e-5))


def test_max_semiring_backprop_is_argmax_path(rng):
    # away from ties, d max / d w is the indicator of the maximizing path
    topo = spn.SpnTopology(2, 2, 2, 2, 2, spn.Semiring.MAX_PRODUCT)
    w = spn.SpnWeights.random(topo, rng)
    x = rng.normal(size=2)
    g = spn.backprop(topo, w, x, np.array([[1.0, 0.0]]))
    step = 1e-6
    for arr, garr in zip(w.arrays(), g.arrays()):
        for i in np.ndindex(arr.shape):
            orig = arr[i]
            arr[i] = orig + step
            up = spn.log_q(topo, w, x)[0, 0]
            arr[i] = orig - step
            down = spn.log_q(topo, w, x)[0, 0]
            arr[i] = orig
            assert (up - down) / (2 * step) == pytest.approx(garr[i], abs=1e-6)


# -- marginal_hidden ---------------------------------------------------------

def _oracle_marginal(topo, w, x, prefix):
    """Posterior mass of configurations consistent with ``prefix``, by enumeration."""
    import itertools
    Y, L, I, H = topo.num_labels, topo.num_layers, topo.children_per_parent, topo.states_per_hidden
    paths = [p for l in range(1, L + 1) for p in itertools.product(range(I), repeat=l)]
    slot = {p: k for k, p in enumerate(paths)}
    leaf = w.leaf_weights @ x
    num, den = [], []
    for y in range(Y):
        for conf in itertools.product(range(H), repeat=len(paths)):
            total = w.prefix_weights[0][y]
            for path in paths:
                idx = y
                for level in range(len(path)):
                    idx = (idx * I + path[level]) * H + conf[slot[path[:level + 1]]]
                total += w.prefix_weights[len(path)][idx]
                if len(path) == L:
                    total += leaf[idx]
            den.append(total)
            # the prefix names a path by its child indices; check its states
            match = y == prefix.label
            for level, (child, state) in enumerate(prefix.per_layer):
                key = tuple(c for c, _ in prefix.per_layer[:level + 1])
                match &= conf[slot[key]] == state
            if match:
                num.append(total)
    return math.exp(oracle._log_fsum_exp(num) - oracle._log_fsum_exp(den))


def test_marginal_depth_zero_is_posterior(rng):
    topo = spn.SpnTopology(2, 2, 2, 3, 2)
    w = spn.SpnWeights.random(topo, rng)
    x = rng.normal(size=2)
    post = spn.posterior(spn.evaluate(topo, w, x))
    for y in range(3):
        assert spn.marginal_hidden(topo, w, x, spn.PathPrefix(y)) == pytest.approx(post[y], abs=1e-14)


def test_marginal_uniform_depth_one():
    topo = spn.SpnTopology(2, 2, 3, 2, 2)
    w = spn.SpnWeights.zeros(topo)
    p = spn.marginal_hidden(topo, w, np.zeros(2), spn.PathPrefix(1, ((1, 2),)))
    assert p == pytest.approx(1 / (2 * 3), abs=1e-15)


def test_marginal_matches_oracle_and_sums_to_one(rng):
    topo = spn.SpnTopology(2, 2, 2, 2, 2)
    w = spn.SpnWeights.random(topo, rng)
    x = rng.normal(size=2)
    for depth in (1, 2):
        prefixes = spn.enumerate_prefixes(topo, depth)
        vals = {p: spn.marginal_hidden(topo, w, x, p) for p in prefixes}
        for p in prefixes[::3]:
            assert vals[p] == pytest.approx(_oracle_marginal(topo, w, x, p), abs=1e-10)
        # fix the structural position (child indices) and sum over labels and states
        by_position = {}
        for p, v in vals.items():
            key = tuple(c for c, _ in p.per_layer)
            by_position[key] = by_position.get(key, 0.0) + v
        for total in by_position.values():
            assert total == pytest.approx(1.0, abs=1e-12)


# -- serialization -----------------------------------------------------------

def test_json_roundtrip_is_bit_exact(rng):
    topo = spn.SpnTopology(2, 2, 3, 2, 3, spn.Semiring.MAX_PRODUCT)
    w = spn.SpnWeights.random(topo, rng)
    text = spn.dumps(topo, w)
    topo2, w2 = spn.loads(text)
    assert topo2 == topo
    for a, b in zip(w.arrays(), w2.arrays()):
        assert np.array_equal(a, b)
    doc = json.loads(text)
    assert list(doc) == ["topology", "prefix_weights", "leaf_weights"]


def test_initialization_scale(rng):
    topo = spn.SpnTopology(1, 2, 2, 3, 16)
    w = spn.SpnWeights.initialize(topo, rng)
    assert all(np.all(p == 0) for p in w.prefix_weights)
    assert np.max(np.abs(w.leaf_weights)) <= 0.25
