"""Desk-scale verification suites: fast paths against exhaustive oracles and
analytic gradients against finite differences."""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import chain, memm, oracle, spn
from .data import LabeledSequence
from .training import finite_difference_check

SPN_REL_TOL = 1e-10
CHAIN_REL_TOL = 1e-10
FB_AGREEMENT_TOL = 1e-9
FD_REL_TOL = 1e-5
FD_STEP = 1e-5
# keeps the exhaustive SPN sum fast enough for hundreds of draws
SPN_SUITE_MAX_CONFIGS = 200_000


@dataclass
class SuiteResult:
    name: str
    passed: bool
    max_error: float
    instances: int
    seconds: float
    failures: list = field(default_factory=list)

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (f"[{status}] {self.name}: {self.instances} instances, "
                f"max error {self.max_error:.3e}, {self.seconds:.1f}s")


def random_topology(rng, max_layers=3, max_children=2, max_states=3, max_labels=3,
                    max_input=5, max_configs=SPN_SUITE_MAX_CONFIGS):
    """Draw a topology uniformly from the ranges, redrawing while the
    exhaustive sum would exceed ``max_configs``."""
    while True:
        topo = spn.SpnTopology(int(rng.integers(1, max_layers + 1)),
                               int(rng.integers(1, max_children + 1)),
                               int(rng.integers(1, max_states + 1)),
                               int(rng.integers(1, max_labels + 1)),
                               int(rng.integers(1, max_input + 1)))
        if topo.num_labels * topo.states_per_hidden ** topo.num_hidden <= max_configs:
            return topo


def _fill(params, rng, scale=1.0):
    for p in params:
        p[...] = rng.uniform(-scale, scale, size=p.shape)


def random_chain_model(rng, Y, D, max_order=2, small_spn=True):
    """Random chain model with n-gram orders drawn from {1, 2, 3} and one or
    two local factors of order at most ``max_order``."""
    orders = sorted({2} | {int(o) for o in rng.choice([1, 3], size=rng.integers(0, 3))})
    ngrams = []
    for o in orders:
        if rng.random() < 0.5:
            ngrams.append(chain.NGramDictionary.dense(o, Y))
        else:
            fake = [rng.integers(0, Y, size=int(rng.integers(1, 7))) for _ in range(3)]
            ngrams.append(chain.NGramDictionary.from_sequences(o, Y, fake))
    factors = []
    factor_orders = [1] + ([2] if max_order >= 2 and rng.random() < 0.5 else [])
    for n in factor_orders:
        window = int(rng.integers(1, 4))
        kw = dict(num_layers=int(rng.integers(1, 3)),
                  children_per_parent=int(rng.integers(1, 3)),
                  states_per_hidden=int(rng.integers(1, 3)))
        if not small_spn:
            kw = dict(num_layers=1, children_per_parent=2, states_per_hidden=2)
        factors.append(chain.make_factor(Y, D, window, n, kw))
    model = chain.ChainModel(Y, D, ngrams, [np.zeros(len(d)) for d in ngrams], factors)
    _fill(model.parameters(), rng)
    return model


def random_memm_model(rng, Y, D, M):
    kw = dict(num_layers=int(rng.integers(1, 3)), children_per_parent=int(rng.integers(1, 3)),
              states_per_hidden=int(rng.integers(1, 3)))
    model = memm.MemmModel.create(M, Y, D, kw, window=int(rng.integers(1, 3)))
    _fill(model.parameters(), rng)
    return model


def spn_oracle_suite(num_models=200, seed=0, tolerance=SPN_REL_TOL, inject_fault=False):
    """``exp(q_values)`` from the recursion against the exhaustive sum."""
    rng = np.random.default_rng(seed)
    start = time.perf_counter()
    worst, failures = 0.0, []
    for k in range(num_models):
        topo = random_topology(rng)
        w = spn.SpnWeights.random(topo, rng)
        x = rng.uniform(-1, 1, topo.input_dim)
        fast = spn.evaluate(topo, w, x).q_values
        if inject_fault:
            w.prefix_weights[0][0] += 1e-3
        ref = oracle.spn_brute_force(topo, w, x)
        # relative error of Q itself
        err = float(np.max(np.abs(np.expm1(fast - ref))))
        worst = max(worst, err)
        if err > tolerance:
            failures.append((k, topo, err))
    return SuiteResult("spn oracle equivalence", not failures, worst, num_models,
                       time.perf_counter() - start, failures)


def chain_instances(num_models=100, seed=1):
    rng = np.random.default_rng(seed)
    for _ in range(num_models):
        Y = int(rng.integers(2, 5))
        T = int(rng.integers(1, 7))
        D = int(rng.integers(1, 4))
        model = random_chain_model(rng, Y, D)
        yield model, rng.normal(size=(T, D))


def chain_partition_suite(num_models=100, seed=1, tolerance=CHAIN_REL_TOL,
                          agreement=FB_AGREEMENT_TOL, inject_fault=False):
    """Forward log Z against enumeration of all label sequences, plus
    forward/backward agreement."""
    start = time.perf_counter()
    worst, failures = 0.0, []
    for k, (model, obs) in enumerate(chain_instances(num_models, seed)):
        msg = chain.forward_backward(model, obs)
        if inject_fault:
            model.transition_weights[0][0] += 1e-3
        ref = oracle.chain_brute_force(model, obs)
        err = abs(np.expm1(msg.log_partition - ref.log_partition))
        gap = abs(msg.log_partition - msg.log_partition_backward)
        worst = max(worst, err)
        if err > tolerance or gap > agreement:
            failures.append((k, err, gap))
    return SuiteResult("chain partition oracle", not failures, worst, num_models,
                       time.perf_counter() - start, failures)


def decoding_suite(num_chain=100, num_memm=100, seed=2, chain_seed=1, inject_fault=False):
    """CRF Viterbi, M = 1 MEMM decoding and exhaustive-width beam search
    against exhaustive argmax."""
    start = time.perf_counter()
    failures = []
    count = 0
    for k, (model, obs) in enumerate(chain_instances(num_chain, chain_seed)):
        labels, score = chain.viterbi(model, obs)
        if inject_fault:
            model.local_factors[0].weights.leaf_weights[...] *= -1.0
        ref = oracle.chain_brute_force(model, obs)
        count += 1
        if not np.array_equal(labels, ref.argmax) or abs(score - ref.best_score) > 1e-9 * max(1, abs(score)):
            failures.append(("crf", k))
    rng = np.random.default_rng(seed)
    for k in range(num_memm):
        Y = int(rng.integers(2, 4))
        T = int(rng.integers(1, 6))
        M = int(rng.integers(1, 4))
        D = int(rng.integers(1, 4))
        model = random_memm_model(rng, Y, D, M)
        obs = rng.normal(size=(T, D))
        beam = memm.decode_beam(model, obs, Y ** (M - 1))
        if inject_fault:
            model.spn_weights.leaf_weights[...] *= -1.0
        ref, _ = oracle.memm_brute_force(model, obs)
        count += 1
        if not np.array_equal(beam, ref):
            failures.append(("beam", k))
        if M == 1 and not inject_fault:
            count += 1
            if not np.array_equal(memm.decode_viterbi(model, obs), ref):
                failures.append(("memm-viterbi", k))
    return SuiteResult("decoding exactness", not failures, float(len(failures)), count,
                       time.perf_counter() - start, failures)


def _spn_as_model(topo, weights, x, label):
    """Adapter giving a single-label SPN the model interface used by the
    finite-difference harness."""

    class _Single:
        def parameters(self):
            return weights.arrays()

        def gradient(self, _seq):
            g, ll = spn.gradient(topo, weights, x, label)
            return _Grad(g), ll

        def log_likelihood(self, _seq):
            return spn.gradient(topo, weights, x, label)[1]

    class _Grad:
        def __init__(self, g):
            self.g = g

        def parameters(self):
            return self.g.arrays()

    return _Single()


def gradient_suite(instances=20, seed=3, tolerance=FD_REL_TOL, max_params=500,
                   kinds=("crf", "memm", "spn"), inject_fault=False):
    """Central differences (step 1e-5) for every parameter of random models
    with at most ``max_params`` parameters."""
    rng = np.random.default_rng(seed)
    start = time.perf_counter()
    worst, failures, count = 0.0, [], 0
    corrupt = None
    if inject_fault:
        def corrupt(m, s):
            g, ll = m.gradient(s)
            g.parameters()[0].reshape(-1)[0] = 2 * g.parameters()[0].reshape(-1)[0] + 1.0
            return g, ll
    for kind in kinds:
        done = 0
        while done < instances:
            Y = int(rng.integers(2, 4))
            D = int(rng.integers(1, 4))
            T = int(rng.integers(1, 6))
            if kind == "crf":
                model = random_chain_model(rng, Y, D)
            elif kind == "memm":
                model = random_memm_model(rng, Y, D, int(rng.integers(1, 4)))
            else:
                topo = random_topology(rng, max_layers=2, max_input=3)
                w = spn.SpnWeights.random(topo, rng)
                x = rng.uniform(-1, 1, topo.input_dim)
                model = _spn_as_model(topo, w, x, int(rng.integers(0, topo.num_labels)))
            if sum(p.size for p in model.parameters()) > max_params:
                continue
            seq = LabeledSequence(rng.normal(size=(T, D)), rng.integers(0, Y, size=T))
            report = finite_difference_check(model, seq, tolerance, FD_STEP, gradient_fn=corrupt)
            worst = max(worst, report.max_relative_error)
            if not report.passed:
                failures.append((kind, done, report.failing[:3]))
            done += 1
            count += 1
    return SuiteResult("gradient finite differences", not failures, worst, count,
                       time.perf_counter() - start, failures)


SUITES = {
    "spn": spn_oracle_suite,
    "chain": chain_partition_suite,
    "decoding": decoding_suite,
    "gradients": gradient_suite,
}
