"""Exhaustive reference computations.

Everything here enumerates the full configuration space, so it is only
usable on tiny models. The point is independence: none of these functions
reuse the recursions they are meant to check.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np

from .errors import BudgetExceeded, InputError

DEFAULT_MAX_CONFIGURATIONS = 10 ** 7


@dataclass(frozen=True)
class ExhaustiveBudget:
    max_configurations: int = DEFAULT_MAX_CONFIGURATIONS

    def check(self, count: int, what: str) -> None:
        if count > self.max_configurations:
            raise BudgetExceeded(
                f"{what}: {count} configurations exceed the cap of {self.max_configurations}")


def _log_fsum_exp(values) -> float:
    """log(sum(exp(values))) with compensated summation of the shifted terms."""
    values = np.asarray(values, dtype=float).ravel()
    top = values.max()
    if not np.isfinite(top):
        return float(top)
    return float(top + math.log(math.fsum(np.exp(values - top))))


def _hidden_paths(num_layers, children):
    """Child-index paths of every hidden variable, layer by layer."""
    paths = []
    for l in range(1, num_layers + 1):
        paths.extend(itertools.product(range(children), repeat=l))
    return paths


def spn_brute_force(topology, weights, x, budget: ExhaustiveBudget = ExhaustiveBudget()):
    """``log Q(y, x)`` for every label by summing over all hidden configurations.

    The product of factors for one configuration is accumulated in the log
    domain; the sum over configurations uses ``math.fsum``. With the max
    semiring the sum is replaced by a maximum.
    """
    from .spn import Semiring

    x = np.asarray(x, dtype=float)
    if x.shape != (topology.input_dim,):
        raise InputError("input dimension mismatch")
    Y, L = topology.num_labels, topology.num_layers
    I, H = topology.children_per_parent, topology.states_per_hidden
    paths = _hidden_paths(L, I)
    slot = {p: k for k, p in enumerate(paths)}
    n_conf = H ** len(paths)
    budget.check(Y * n_conf, "spn_brute_force")

    # configs[c, k] = state of hidden variable k in configuration c
    configs = np.array(list(itertools.product(range(H), repeat=len(paths))), dtype=np.int64)
    if configs.ndim == 1:
        configs = configs.reshape(n_conf, len(paths))
    leaf_scores = weights.leaf_weights @ x

    out = np.empty(Y)
    for y in range(Y):
        total = np.full(n_conf, weights.prefix_weights[0][y])
        for path in paths:
            depth = len(path)
            # mixed-radix index of (y, c1, s1, ..., cl, sl)
            idx = np.full(n_conf, y, dtype=np.int64)
            for level in range(depth):
                state = configs[:, slot[path[:level + 1]]]
                idx = (idx * I + path[level]) * H + state
            total += weights.prefix_weights[depth][idx]
            if depth == L:
                total += leaf_scores[idx]
        if topology.semiring is Semiring.MAX_PRODUCT:
            out[y] = total.max()
        else:
            out[y] = _log_fsum_exp(total)
    return out


def _windows(observations, width):
    obs = np.asarray(observations, dtype=float)
    T, D = obs.shape
    out = np.zeros((T, width * D))
    for t in range(T):
        for i in range(width):
            u = t - width // 2 + i
            if 0 <= u < T:
                out[t, i * D:(i + 1) * D] = obs[u]
    return out


def _all_sequences(Y, T, budget, what):
    budget.check(Y ** T, what)
    return np.indices((Y,) * T).reshape(T, -1).T


@dataclass
class ChainOracleResult:
    log_partition: float
    sequences: np.ndarray
    scores: np.ndarray
    argmax: np.ndarray
    best_score: float


def chain_sequence_scores(model, observations, sequences):
    """Unnormalised log scores of the given label sequences."""
    from .spn import log_q

    obs = np.asarray(observations, dtype=float)
    Y = model.num_labels
    START = Y
    N, T = sequences.shape
    padded = np.concatenate([np.full((N, 3), START), sequences], axis=1)
    scores = np.zeros(N)
    for dictionary, w in zip(model.ngrams, model.transition_weights):
        n = dictionary.order
        for t in range(T):
            grams = padded[:, 3 + t - n + 1:3 + t + 1]
            for row, gram in enumerate(map(tuple, grams)):
                k = dictionary.entries.get(tuple(int(g) for g in gram))
                if k is not None:
                    scores[row] += w[k]
    for factor in model.local_factors:
        n = factor.order
        q = log_q(factor.topology, factor.weights, _windows(obs, factor.window))
        for t in range(n - 1, T):
            gram_idx = np.zeros(N, dtype=np.int64)
            for u in range(t - n + 1, t + 1):
                gram_idx = gram_idx * Y + sequences[:, u]
            scores += q[t, gram_idx]
    return scores


def chain_brute_force(model, observations, budget: ExhaustiveBudget = ExhaustiveBudget()):
    """Partition function, all sequence scores and the lexicographically
    first highest-scoring sequence of a chain model."""
    obs = np.asarray(observations, dtype=float)
    T = obs.shape[0]
    if T < 1:
        raise InputError("empty sequence")
    seqs = _all_sequences(model.num_labels, T, budget, "chain_brute_force")
    scores = chain_sequence_scores(model, obs, seqs)
    best = int(np.argmax(scores))
    return ChainOracleResult(_log_fsum_exp(scores), seqs, scores, seqs[best].copy(),
                             float(scores[best]))


def memm_sequence_log_probs(model, observations, sequences):
    """``log p(y_1:T | x)`` for each row of ``sequences``, recomputed term by term."""
    from .spn import log_q

    obs = np.asarray(observations, dtype=float)
    Y = model.num_labels
    q = log_q(model.topology, model.spn_weights, _windows(obs, model.window))
    out = np.zeros(len(sequences))
    for row, seq in enumerate(sequences):
        total = 0.0
        for t, y in enumerate(seq):
            logits = q[t].copy()
            for m in range(1, model.order):
                g = seq[t - m] if t - m >= 0 else Y
                logits += model.history_weights[m - 1, g]
            z = _log_fsum_exp(logits)
            total += logits[y] - z
        out[row] = total
    return out


def memm_brute_force(model, observations, budget: ExhaustiveBudget = ExhaustiveBudget()):
    """Most probable label sequence of an MEMM by full enumeration.

    Returns ``(argmax, log_prob)``; ties go to the lexicographically
    smallest sequence.
    """
    obs = np.asarray(observations, dtype=float)
    T = obs.shape[0]
    if T < 1:
        raise InputError("empty sequence")
    seqs = _all_sequences(model.num_labels, T, budget, "memm_brute_force")
    scores = memm_sequence_log_probs(model, obs, seqs)
    best = int(np.argmax(scores))
    return seqs[best].copy(), float(scores[best])
