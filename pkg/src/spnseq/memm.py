"""Higher-order maximum-entropy Markov model with an SPN local factor.

Each position is a separate softmax over labels whose logits are the SPN
score ``log Q(y, window_t)`` plus one distant-bigram weight
``w[m, y_{t-m}, y]`` for every distance ``m = 1 .. M-1``. History slots
before the start of the sequence hold START (row ``Y`` of each weight
block). Positions are 0-based.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from . import spn
from .chain import windows
from .data import LabeledSequence
from .errors import InputError, StructureError


@dataclass
class MemmModel:
    order: int
    num_labels: int
    window: int
    topology: spn.SpnTopology
    spn_weights: spn.SpnWeights
    history_weights: np.ndarray
    beam_width: int = 20

    def __post_init__(self):
        if self.order < 1:
            raise StructureError("MEMM order must be >= 1")
        if self.window < 1:
            raise StructureError("window must be >= 1")
        if self.topology.num_labels != self.num_labels:
            raise StructureError("SPN label count must equal the MEMM label count")
        if self.topology.input_dim % self.window:
            raise StructureError("SPN input_dim must be a multiple of the window width")
        self.history_weights = np.asarray(self.history_weights, dtype=float)
        expected = (self.order - 1, self.num_labels + 1, self.num_labels)
        if self.history_weights.shape != expected:
            raise StructureError(f"history weights have shape {self.history_weights.shape}, "
                                 f"expected {expected}")
        if not np.all(np.isfinite(self.history_weights)):
            raise StructureError("non-finite history weight")

    @classmethod
    def create(cls, order, num_labels, input_dim, topology_kwargs, window=1,
               rng=None, beam_width=20, semiring=spn.Semiring.SUM_PRODUCT):
        if order < 1:
            raise StructureError("MEMM order must be >= 1")
        topo = spn.SpnTopology(num_labels=num_labels, input_dim=window * input_dim,
                               semiring=spn.Semiring(semiring), **topology_kwargs)
        weights = spn.SpnWeights.zeros(topo) if rng is None else spn.SpnWeights.initialize(topo, rng)
        hist = np.zeros((order - 1, num_labels + 1, num_labels))
        return cls(order, num_labels, window, topo, weights, hist, beam_width)

    @property
    def input_dim(self) -> int:
        return self.topology.input_dim // self.window

    def parameters(self) -> list:
        return [self.history_weights, *self.spn_weights.arrays()]

    @property
    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def copy(self) -> "MemmModel":
        return MemmModel(self.order, self.num_labels, self.window, self.topology,
                         self.spn_weights.copy(), self.history_weights.copy(), self.beam_width)

    def zeros_like(self) -> "MemmModel":
        g = self.copy()
        for p in g.parameters():
            p[...] = 0.0
        return g

    def log_likelihood(self, seq):
        return sequence_log_likelihood(self, seq)

    def gradient(self, seq):
        return gradient(self, seq)

    def predict(self, observations):
        if self.order == 1:
            return decode_viterbi(self, observations)
        return decode_beam(self, observations, self.beam_width)


def _spn_scores(model: MemmModel, observations):
    obs = np.asarray(observations, dtype=float)
    if obs.ndim != 2 or obs.shape[0] < 1:
        raise InputError("observations must be a non-empty (T, D) array")
    if obs.shape[1] != model.input_dim:
        raise InputError(f"observation dimension {obs.shape[1]} != {model.input_dim}")
    X = windows(obs, model.window)
    values = spn.upward(model.topology, model.spn_weights, X)
    return X, values


def _history_digits(model: MemmModel, history) -> list[int]:
    """``[y_{t-1}, y_{t-2}, ..., y_{t-M+1}]`` with START beyond the given history."""
    hist = [int(v) for v in history]
    out = []
    for m in range(1, model.order):
        out.append(hist[-m] if m <= len(hist) else model.num_labels)
    return out


def _logits(model: MemmModel, q_t, history) -> np.ndarray:
    logits = np.array(q_t, dtype=float)
    for m, g in enumerate(_history_digits(model, history), start=1):
        logits = logits + model.history_weights[m - 1, g]
    return logits


def local_log_posterior(model: MemmModel, q_t, history) -> np.ndarray:
    logits = _logits(model, q_t, history)
    return logits - logsumexp(logits)


def local_posterior(model: MemmModel, observations, t: int, history) -> np.ndarray:
    """``p(y_t | g_t, x)`` where ``history`` lists the labels before ``t``
    (only the last ``M - 1`` matter)."""
    _, values = _spn_scores(model, observations)
    if not 0 <= t < values[0].shape[0]:
        raise InputError(f"position {t} out of range")
    return np.exp(local_log_posterior(model, values[0][t], history))


def sequence_log_likelihood(model: MemmModel, seq: LabeledSequence) -> float:
    seq.validate(model.num_labels, model.input_dim)
    _, values = _spn_scores(model, seq.observations)
    q = values[0]
    total = 0.0
    for t, y in enumerate(seq.labels):
        total += local_log_posterior(model, q[t], seq.labels[:t])[y]
    return float(total)


def gradient(model: MemmModel, seq: LabeledSequence):
    """Gradient of the teacher-forced log-likelihood; ``(grad_model, loglik)``."""
    seq.validate(model.num_labels, model.input_dim)
    X, values = _spn_scores(model, seq.observations)
    q = values[0]
    T = len(seq)
    grad = model.zeros_like()
    coeffs = np.zeros((T, model.num_labels))
    total = 0.0
    for t, y in enumerate(seq.labels):
        logp = local_log_posterior(model, q[t], seq.labels[:t])
        total += logp[y]
        c = -np.exp(logp)
        c[y] += 1.0
        coeffs[t] = c
        for m, g in enumerate(_history_digits(model, seq.labels[:t]), start=1):
            grad.history_weights[m - 1, g] += c
    g = spn.backprop(model.topology, model.spn_weights, X, coeffs, values)
    for dst, src in zip(grad.spn_weights.arrays(), g.arrays()):
        dst[...] = src
    return grad, float(total)


def decode_viterbi(model: MemmModel, observations) -> np.ndarray:
    """Exact decoding for ``M = 1``: positions are independent given ``x``."""
    if model.order != 1:
        raise InputError("exact decoding is implemented for M = 1; use decode_beam")
    _, values = _spn_scores(model, observations)
    return values[0].argmax(axis=1).astype(np.int64)


@dataclass
class BeamHypothesis:
    full_prefix: tuple
    cumulative_log_prob: float

    def label_history(self, model: MemmModel) -> list[int]:
        return _history_digits(model, self.full_prefix)


def decode_beam(model: MemmModel, observations, beam_width: int, return_score: bool = False):
    """Left-to-right beam search on cumulative log local posteriors.

    Hypotheses that end in the same ``M - 1`` labels are recombined (only
    the best survives) before the top ``beam_width`` are kept, so a beam of
    ``Y**(M-1)`` hypotheses is exact. Ties in score are broken towards the
    lexicographically smaller prefix.
    """
    if beam_width < 1:
        raise InputError("beam width must be >= 1")
    _, values = _spn_scores(model, observations)
    q = values[0]
    beam = [BeamHypothesis((), 0.0)]
    for t in range(q.shape[0]):
        candidates = []
        for hyp in beam:
            logp = local_log_posterior(model, q[t], hyp.full_prefix)
            for y in range(model.num_labels):
                candidates.append(BeamHypothesis(hyp.full_prefix + (y,),
                                                 hyp.cumulative_log_prob + logp[y]))
        candidates.sort(key=lambda h: (-h.cumulative_log_prob, h.full_prefix))
        survivors, seen = [], set()
        for hyp in candidates:
            key = tuple(hyp.label_history(model))
            if key in seen:
                continue
            seen.add(key)
            survivors.append(hyp)
            if len(survivors) == beam_width:
                break
        beam = survivors
    best = beam[0]
    labels = np.array(best.full_prefix, dtype=np.int64)
    if return_score:
        return labels, float(best.cumulative_log_prob)
    return labels


def model_to_dict(model: MemmModel) -> dict:
    return {
        "kind": "memm",
        "order": model.order,
        "num_labels": model.num_labels,
        "window": model.window,
        "beam_width": model.beam_width,
        "history_weights": model.history_weights.tolist(),
        "spn": spn.weights_to_dict(model.topology, model.spn_weights),
    }


def model_from_dict(d: dict) -> MemmModel:
    topo, w = spn.weights_from_dict(d["spn"])
    hist = np.asarray(d["history_weights"], dtype=float).reshape(
        int(d["order"]) - 1, int(d["num_labels"]) + 1, int(d["num_labels"]))
    return MemmModel(int(d["order"]), int(d["num_labels"]), int(d["window"]), topo, w,
                     hist, int(d.get("beam_width", 20)))
