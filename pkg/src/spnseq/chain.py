"""Linear-chain CRF with SPN local factors and higher-order n-gram factors.

Two kinds of factors are supported:

* input-independent n-gram weights (orders 1 to 3) looked up in an
  :class:`NGramDictionary`; positions before the first label are filled
  with a dedicated START symbol, so ``(START, y_1)`` bigrams act as start
  weights;
* input-dependent local factors ``log Q(y_{t-n+1:t}, window_t)`` computed
  by an SPN whose root label ranges over all ``Y**n`` label n-grams and
  whose input is the concatenation of ``m`` observation vectors.

Inference runs on an expanded state space where the state at position
``t`` is the tuple of the last ``K`` labels (START-padded), with ``K`` the
smallest history that makes every factor local to a node or an edge. For a
first-order model ``K = 1`` and the state is simply the label.

Positions are 0-based throughout.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from scipy.special import logsumexp

from . import spn
from .data import LabeledSequence
from .errors import InputError, StructureError

NEG_INF = -np.inf
MAX_NGRAM_ORDER = 3


@dataclass
class NGramDictionary:
    """Index of label n-grams that own a learnable weight.

    Label ``num_labels`` stands for START and may only occupy a leading run
    of positions. N-grams missing from ``entries`` have a fixed weight of 0.
    """

    order: int
    num_labels: int
    entries: dict = field(default_factory=dict)
    include_unseen: bool = False
    _feature_cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        if not 1 <= self.order <= MAX_NGRAM_ORDER:
            raise StructureError(f"n-gram order must be in 1..{MAX_NGRAM_ORDER}")
        self.entries = {tuple(int(v) for v in k): int(i) for k, i in self.entries.items()}
        if sorted(self.entries.values()) != list(range(len(self.entries))):
            raise StructureError("n-gram indices must be dense 0..count-1")
        for gram in self.entries:
            if len(gram) != self.order or not self._legal(gram):
                raise StructureError(f"illegal n-gram {gram} for order {self.order}")

    def __len__(self):
        return len(self.entries)

    @property
    def start(self) -> int:
        return self.num_labels

    def _legal(self, gram) -> bool:
        seen_label = False
        for v in gram:
            if v == self.start:
                if seen_label:
                    return False
            elif 0 <= v < self.num_labels:
                seen_label = True
            else:
                return False
        return seen_label

    def all_grams(self):
        """Every legal n-gram in lexicographic order."""
        for gram in itertools.product(range(self.num_labels + 1), repeat=self.order):
            if self._legal(gram):
                yield gram

    @classmethod
    def dense(cls, order: int, num_labels: int) -> "NGramDictionary":
        d = cls(order, num_labels, {}, True)
        d.entries = {g: i for i, g in enumerate(d.all_grams())}
        return d

    @classmethod
    def from_sequences(cls, order: int, num_labels: int, label_sequences,
                       include_unseen: bool = False) -> "NGramDictionary":
        """Dictionary of the n-grams occurring in ``label_sequences``
        (or of all n-grams when ``include_unseen``)."""
        if include_unseen:
            return cls.dense(order, num_labels)
        seen = set()
        for labels in label_sequences:
            for gram in padded_ngrams(labels, order, num_labels):
                seen.add(gram)
        ordered = sorted(seen)
        return cls(order, num_labels, {g: i for i, g in enumerate(ordered)}, False)

    def lookup(self, gram) -> int:
        return self.entries.get(tuple(int(v) for v in gram), -1)

    def to_dict(self) -> dict:
        items = sorted(self.entries.items(), key=lambda kv: kv[1])
        return {"order": self.order, "num_labels": self.num_labels,
                "include_unseen": self.include_unseen,
                "grams": [list(g) for g, _ in items]}

    @classmethod
    def from_dict(cls, d: dict) -> "NGramDictionary":
        return cls(int(d["order"]), int(d["num_labels"]),
                   {tuple(g): i for i, g in enumerate(d["grams"])},
                   bool(d.get("include_unseen", False)))


def padded_ngrams(labels, order: int, num_labels: int):
    """The n-gram ending at each position, START-padded on the left."""
    padded = [num_labels] * (order - 1) + [int(v) for v in labels]
    return [tuple(padded[t:t + order]) for t in range(len(labels))]


@dataclass
class LocalFactor:
    """SPN factor mapping ``window`` observations to ``order`` consecutive labels."""

    window: int
    order: int
    topology: spn.SpnTopology
    weights: spn.SpnWeights

    def copy(self) -> "LocalFactor":
        return LocalFactor(self.window, self.order, self.topology, self.weights.copy())


@dataclass
class ChainModel:
    num_labels: int
    input_dim: int
    ngrams: list = field(default_factory=list)
    transition_weights: list = field(default_factory=list)
    local_factors: list = field(default_factory=list)

    def __post_init__(self):
        if self.num_labels < 1 or self.input_dim < 1:
            raise StructureError("num_labels and input_dim must be positive")
        if len(self.ngrams) != len(self.transition_weights):
            raise StructureError("one weight vector per n-gram dictionary")
        for d, w in zip(self.ngrams, self.transition_weights):
            if d.num_labels != self.num_labels:
                raise StructureError("n-gram dictionary label count mismatch")
            if np.shape(w) != (len(d),):
                raise StructureError(f"order-{d.order} weights have shape {np.shape(w)}")
        for f in self.local_factors:
            if f.window < 1 or not 1 <= f.order <= MAX_NGRAM_ORDER:
                raise StructureError("local factor needs window >= 1 and order in 1..3")
            if f.topology.num_labels != self.num_labels ** f.order:
                raise StructureError(
                    f"order-{f.order} factor needs {self.num_labels ** f.order} SPN labels")
            if f.topology.input_dim != f.window * self.input_dim:
                raise StructureError(
                    f"window-{f.window} factor needs SPN input_dim {f.window * self.input_dim}")
        self.transition_weights = [np.asarray(w, dtype=float) for w in self.transition_weights]

    @property
    def history(self) -> int:
        """Number of labels held by an expanded state."""
        k = 1
        for d in self.ngrams:
            k = max(k, d.order - 1)
        for f in self.local_factors:
            k = max(k, f.order)
        return k

    @property
    def num_states(self) -> int:
        return _state_space(self.num_labels, self.history).size

    def parameters(self) -> list:
        out = list(self.transition_weights)
        for f in self.local_factors:
            out.extend(f.weights.arrays())
        return out

    @property
    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def copy(self) -> "ChainModel":
        return ChainModel(self.num_labels, self.input_dim, list(self.ngrams),
                          [w.copy() for w in self.transition_weights],
                          [f.copy() for f in self.local_factors])

    def zeros_like(self) -> "ChainModel":
        g = self.copy()
        for p in g.parameters():
            p[...] = 0.0
        return g

    # thin method wrappers so training code can treat models uniformly
    def log_likelihood(self, seq):
        return sequence_log_likelihood(self, seq)

    def gradient(self, seq):
        return gradient(self, seq)

    def predict(self, observations):
        return viterbi(self, observations)[0]


def first_order_model(num_labels: int, input_dim: int, topology_kwargs: dict,
                      rng: np.random.Generator | None = None, window: int = 1,
                      semiring=spn.Semiring.SUM_PRODUCT) -> ChainModel:
    """SPN-LC-CRF with dense bigram transitions and one ``n = 1`` factor."""
    factor = make_factor(num_labels, input_dim, window, 1, topology_kwargs, rng, semiring)
    bigrams = NGramDictionary.dense(2, num_labels)
    return ChainModel(num_labels, input_dim, [bigrams], [np.zeros(len(bigrams))], [factor])


def make_factor(num_labels, input_dim, window, order, topology_kwargs, rng=None,
                semiring=spn.Semiring.SUM_PRODUCT) -> LocalFactor:
    topo = spn.SpnTopology(num_labels=num_labels ** order, input_dim=window * input_dim,
                           semiring=spn.Semiring(semiring), **topology_kwargs)
    if rng is None:
        weights = spn.SpnWeights.zeros(topo)
    else:
        weights = spn.SpnWeights.initialize(topo, rng)
    return LocalFactor(window, order, topo, weights)


# -- expanded state space ------------------------------------------------

@dataclass(frozen=True)
class _States:
    """Tables describing the expanded state space for ``(Y, K)``.

    A state is a tuple ``(a_1, ..., a_K)`` whose last entry is a real label
    and whose other entries may be START (``Y``). Its flat index uses radix
    ``Y + 1`` for the first ``K - 1`` digits and ``Y`` for the last.
    """

    Y: int
    K: int
    digits: np.ndarray        # (S, K)
    valid: np.ndarray         # (K, S): valid[min(t, K - 1)] masks position t
    pred: np.ndarray          # (S, Y + 1): index of (j, a_1..a_{K-1}) or -1
    succ: np.ndarray          # (S, Y): index of (a_2..a_K, k)

    @property
    def size(self) -> int:
        return self.digits.shape[0]

    def encode(self, digits) -> int:
        idx = 0
        for a in digits[:-1]:
            idx = idx * (self.Y + 1) + int(a)
        return idx * self.Y + int(digits[-1])

    def valid_at(self, t: int) -> np.ndarray:
        return self.valid[min(t, self.K - 1)]

    def history_grams(self, order: int) -> np.ndarray:
        """``(S, Y + 1, order)`` array: the last ``order`` labels of
        ``(j, a_1, ..., a_K)`` for each state and predecessor digit ``j``."""
        S = self.size
        hist = np.concatenate([np.broadcast_to(np.arange(self.Y + 1)[None, :, None],
                                               (S, self.Y + 1, 1)),
                               np.broadcast_to(self.digits[:, None, :],
                                               (S, self.Y + 1, self.K))], axis=2)
        return hist[:, :, hist.shape[2] - order:]


@lru_cache(maxsize=32)
def _state_space(Y: int, K: int) -> _States:
    radices = [Y + 1] * (K - 1) + [Y]
    digits = np.array(list(itertools.product(*[range(r) for r in radices])), dtype=np.int64)
    digits = digits.reshape(-1, K)
    S = digits.shape[0]
    start = Y

    valid = np.zeros((K, S), dtype=bool)
    for t in range(K):
        n_start = K - 1 - t
        lead = np.all(digits[:, :n_start] == start, axis=1)
        rest = np.all(digits[:, n_start:] < Y, axis=1)
        valid[t] = lead & rest

    def encode(ds):
        idx = 0
        for a in ds[:-1]:
            idx = idx * (Y + 1) + int(a)
        return idx * Y + int(ds[-1])

    pred = np.full((S, Y + 1), -1, dtype=np.int64)
    succ = np.zeros((S, Y), dtype=np.int64)
    for s in range(S):
        a = digits[s]
        for j in range(Y + 1):
            cand = (j, *a[:-1])
            if cand[-1] < Y:
                pred[s, j] = encode(cand)
        for k in range(Y):
            succ[s, k] = encode((*a[1:], k))
    return _States(Y, K, digits, valid, pred, succ)


def _gram_index(grams: np.ndarray, Y: int) -> np.ndarray:
    """Row-major index of real-label n-grams over radix ``Y``; -1 if any
    entry is START."""
    idx = np.zeros(grams.shape[:-1], dtype=np.int64)
    ok = np.all(grams < Y, axis=-1)
    for i in range(grams.shape[-1]):
        idx = idx * Y + np.minimum(grams[..., i], Y - 1)
    return np.where(ok, idx, -1)


@dataclass
class _Tables:
    states: _States
    edge: np.ndarray            # (S, Y + 1) log weight of entering s from predecessor digit j
    node: np.ndarray            # (T, S) summed local log factors
    feats: list                 # per dictionary, (S, Y + 1) weight index or -1
    factor_grams: list          # per local factor, (S,) label-gram index or -1
    factor_q: list              # per local factor, (T, Y**n) log Q
    factor_x: list              # per local factor, (T, m * D) window inputs
    factor_values: list         # per local factor, cached SPN upward pass


def _feature_table(d: NGramDictionary, states: _States) -> np.ndarray:
    """Weight index of the n-gram on each (state, predecessor digit) edge."""
    key = states.K
    if key not in d._feature_cache:
        grams = states.history_grams(d.order)
        f = np.full((states.size, states.Y + 1), -1, dtype=np.int64)
        for s in range(states.size):
            for j in range(states.Y + 1):
                f[s, j] = d.entries.get(tuple(int(v) for v in grams[s, j]), -1)
        d._feature_cache[key] = f
    return d._feature_cache[key]


def windows(observations: np.ndarray, width: int) -> np.ndarray:
    """Rows ``t - width//2 .. t - width//2 + width - 1`` concatenated,
    zero-padded outside the sequence. Odd widths are centred on ``t``; even
    widths lean to the left, so ``width = 2`` covers ``t - 1`` and ``t``."""
    obs = np.asarray(observations, dtype=float)
    T, D = obs.shape
    left = width // 2
    padded = np.zeros((T + width, D))
    padded[left:left + T] = obs
    return np.stack([padded[t:t + width].ravel() for t in range(T)])


def _check_observations(model: ChainModel, observations) -> np.ndarray:
    obs = np.asarray(observations, dtype=float)
    if obs.ndim != 2 or obs.shape[0] < 1:
        raise InputError("observations must be a non-empty (T, D) array")
    if obs.shape[1] != model.input_dim:
        raise InputError(f"observation dimension {obs.shape[1]} != {model.input_dim}")
    return obs


def _tables(model: ChainModel, observations) -> _Tables:
    obs = _check_observations(model, observations)
    T = obs.shape[0]
    Y = model.num_labels
    states = _state_space(Y, model.history)
    S = states.size

    edge = np.zeros((S, Y + 1))
    feats = []
    for d, w in zip(model.ngrams, model.transition_weights):
        f = _feature_table(d, states)
        edge += np.where(f >= 0, w[np.maximum(f, 0)] if len(w) else 0.0, 0.0)
        feats.append(f)

    node = np.zeros((T, S))
    factor_grams, factor_q, factor_x, factor_values = [], [], [], []
    for fac in model.local_factors:
        X = windows(obs, fac.window)
        values = spn.upward(fac.topology, fac.weights, X)
        q = values[0]
        g = _gram_index(states.digits[:, states.K - fac.order:], Y)
        node += np.where(g[None, :] >= 0, q[:, np.maximum(g, 0)], 0.0)
        factor_grams.append(g)
        factor_q.append(q)
        factor_x.append(X)
        factor_values.append(values)
    return _Tables(states, edge, node, feats, factor_grams, factor_q, factor_x, factor_values)


# -- message passing -----------------------------------------------------

@dataclass
class ChainMessages:
    alpha_trans: np.ndarray
    alpha: np.ndarray
    beta_trans: np.ndarray
    beta: np.ndarray
    beta_local: np.ndarray
    log_partition: float
    log_partition_backward: float
    alpha_local: np.ndarray


def _messages(tables: _Tables) -> ChainMessages:
    st, edge, node = tables.states, tables.edge, tables.node
    T, S = node.shape
    Y = st.Y
    pred_ok = st.pred >= 0
    pred_idx = np.maximum(st.pred, 0)

    alpha_trans = np.full((T, S), NEG_INF)
    alpha = np.full((T, S), NEG_INF)
    alpha_trans[0] = np.where(st.valid_at(0), edge[:, Y], NEG_INF)
    alpha[0] = node[0] + alpha_trans[0]
    for t in range(1, T):
        prev = np.where(pred_ok, alpha[t - 1][pred_idx], NEG_INF)
        at = logsumexp(edge + prev, axis=1)
        alpha_trans[t] = np.where(st.valid_at(t), at, NEG_INF)
        alpha[t] = node[t] + alpha_trans[t]

    first = st.digits[:, 0]
    beta_trans = np.full((T, S), NEG_INF)
    beta = np.full((T, S), NEG_INF)
    beta_trans[T - 1] = np.where(st.valid_at(T - 1), 0.0, NEG_INF)
    beta[T - 1] = node[T - 1] + beta_trans[T - 1]
    for t in range(T - 2, -1, -1):
        nxt = st.succ
        bt = logsumexp(edge[nxt, first[:, None]] + beta[t + 1][nxt], axis=1)
        beta_trans[t] = np.where(st.valid_at(t), bt, NEG_INF)
        beta[t] = node[t] + beta_trans[t]

    log_z = float(logsumexp(alpha[T - 1]))
    log_z_back = float(logsumexp(alpha_trans[0] + beta[0]))
    return ChainMessages(alpha_trans, alpha, beta_trans, beta, alpha_trans + beta_trans,
                         log_z, log_z_back, node)


def forward_backward(model: ChainModel, observations) -> ChainMessages:
    return _messages(_tables(model, observations))


@dataclass
class ChainMarginals:
    states: np.ndarray      # (T, S) expanded-state marginals
    edges: np.ndarray       # (T - 1, S, Y + 1): p(state s at t, predecessor digit j) for t >= 1
    labels: np.ndarray      # (T, Y) per-position label marginals
    log_partition: float


def _marginals(tables: _Tables, msg: ChainMessages) -> ChainMarginals:
    st = tables.states
    T, S = msg.alpha.shape
    log_z = msg.log_partition
    node = np.exp(msg.alpha_trans + msg.beta - log_z)
    pred_ok = st.pred >= 0
    pred_idx = np.maximum(st.pred, 0)
    edges = np.zeros((max(T - 1, 0), S, st.Y + 1))
    for t in range(1, T):
        prev = np.where(pred_ok, msg.alpha[t - 1][pred_idx], NEG_INF)
        edges[t - 1] = np.exp(prev + tables.edge + msg.beta[t][:, None] - log_z)
    labels = np.zeros((T, st.Y))
    np.add.at(labels.T, st.digits[:, -1], node.T)
    return ChainMarginals(node, edges, labels, log_z)


def posterior_marginals(model: ChainModel, observations) -> ChainMarginals:
    tables = _tables(model, observations)
    return _marginals(tables, _messages(tables))


def _gold_states(states: _States, labels) -> tuple[np.ndarray, np.ndarray]:
    """Expanded gold state and gold predecessor digit at each position."""
    K, Y = states.K, states.Y
    padded = [Y] * K + [int(v) for v in labels]
    s_idx = np.array([states.encode(padded[t + 1:t + 1 + K]) for t in range(len(labels))])
    j_idx = np.array([padded[t] for t in range(len(labels))])
    return s_idx, j_idx


def _check_labels(model: ChainModel, seq: LabeledSequence):
    seq.validate(model.num_labels, model.input_dim)


def sequence_log_likelihood(model: ChainModel, seq: LabeledSequence) -> float:
    _check_labels(model, seq)
    tables = _tables(model, seq.observations)
    msg = _messages(tables)
    s_idx, j_idx = _gold_states(tables.states, seq.labels)
    T = len(seq)
    score = tables.node[np.arange(T), s_idx].sum() + tables.edge[s_idx, j_idx].sum()
    return float(score - msg.log_partition)


def gradient(model: ChainModel, seq: LabeledSequence):
    """Gradient of ``log p(y_1:T | x_1:T)``; returns ``(grad_model, loglik)``.

    N-gram weights get observed minus expected counts. Each SPN factor
    receives, per position, the coefficient vector ``onehot(gold gram) -
    p(gram | x)`` where the gram marginals come from ``beta_local``; the SPN
    turns that into weight gradients by a downward pass.
    """
    _check_labels(model, seq)
    tables = _tables(model, seq.observations)
    msg = _messages(tables)
    marg = _marginals(tables, msg)
    st = tables.states
    T = len(seq)
    s_idx, j_idx = _gold_states(st, seq.labels)
    score = tables.node[np.arange(T), s_idx].sum() + tables.edge[s_idx, j_idx].sum()

    grad = model.zeros_like()
    # expected edge usage: (T, S, Y + 1); position 0 enters from the virtual all-START history
    usage = np.zeros((T, st.size, st.Y + 1))
    usage[0, :, st.Y] = marg.states[0]
    if T > 1:
        usage[1:] = marg.edges
    for f, g in zip(tables.feats, grad.transition_weights):
        mask = f >= 0
        expected = usage[:, mask].sum(axis=0)
        np.add.at(g, f[mask], -expected)
        for t in range(T):
            k = f[s_idx[t], j_idx[t]]
            if k >= 0:
                g[k] += 1.0

    for i, fac in enumerate(model.local_factors):
        gidx = tables.factor_grams[i]
        n_grams = fac.topology.num_labels
        coeffs = np.zeros((T, n_grams))
        ok = gidx >= 0
        for t in range(T):
            np.add.at(coeffs[t], gidx[ok], -marg.states[t, ok])
            if gidx[s_idx[t]] >= 0:
                coeffs[t, gidx[s_idx[t]]] += 1.0
        g = spn.backprop(fac.topology, fac.weights, tables.factor_x[i], coeffs,
                         tables.factor_values[i])
        for dst, src in zip(grad.local_factors[i].weights.arrays(), g.arrays()):
            dst[...] = src
    return grad, float(score - msg.log_partition)


def viterbi(model: ChainModel, observations):
    """Highest-scoring label sequence and its unnormalised log score.

    Ties go to the lowest expanded-state index, both for the final state
    and for each backpointer.
    """
    tables = _tables(model, observations)
    st, edge, node = tables.states, tables.edge, tables.node
    T, S = node.shape
    Y = st.Y
    pred_ok = st.pred >= 0
    pred_idx = np.maximum(st.pred, 0)
    delta = np.where(st.valid_at(0), edge[:, Y] + node[0], NEG_INF)
    back = np.zeros((T, S), dtype=np.int64)
    for t in range(1, T):
        cand = edge + np.where(pred_ok, delta[pred_idx], NEG_INF)
        best_j = cand.argmax(axis=1)
        back[t] = pred_idx[np.arange(S), best_j]
        delta = np.where(st.valid_at(t), cand[np.arange(S), best_j] + node[t], NEG_INF)
    s = int(delta.argmax())
    score = float(delta[s])
    path = [s]
    for t in range(T - 1, 0, -1):
        s = int(back[t, s])
        path.append(s)
    path.reverse()
    labels = st.digits[np.array(path), -1]
    return labels.astype(np.int64), score


def sequence_score(model: ChainModel, observations, labels) -> float:
    """Unnormalised log score of one labelling, computed factor by factor
    without the expanded-state tables."""
    obs = _check_observations(model, observations)
    labels = [int(v) for v in labels]
    if len(labels) != obs.shape[0]:
        raise InputError("labels and observations differ in length")
    Y = model.num_labels
    total = 0.0
    for d, w in zip(model.ngrams, model.transition_weights):
        for gram in padded_ngrams(labels, d.order, Y):
            k = d.lookup(gram)
            if k >= 0:
                total += w[k]
    for fac in model.local_factors:
        X = windows(obs, fac.window)
        for t in range(fac.order - 1, len(labels)):
            gram = 0
            for u in range(t - fac.order + 1, t + 1):
                gram = gram * Y + labels[u]
            total += spn.evaluate(fac.topology, fac.weights, X[t]).q_values[gram]
    return float(total)


# -- serialization -------------------------------------------------------

def model_to_dict(model: ChainModel) -> dict:
    return {
        "kind": "chain",
        "num_labels": model.num_labels,
        "input_dim": model.input_dim,
        "ngrams": [d.to_dict() for d in model.ngrams],
        "transition_weights": [w.tolist() for w in model.transition_weights],
        "local_factors": [{"window": f.window, "order": f.order,
                           "spn": spn.weights_to_dict(f.topology, f.weights)}
                          for f in model.local_factors],
    }


def model_from_dict(d: dict) -> ChainModel:
    factors = []
    for f in d["local_factors"]:
        topo, w = spn.weights_from_dict(f["spn"])
        factors.append(LocalFactor(int(f["window"]), int(f["order"]), topo, w))
    return ChainModel(int(d["num_labels"]), int(d["input_dim"]),
                      [NGramDictionary.from_dict(g) for g in d["ngrams"]],
                      [np.asarray(w, dtype=float) for w in d["transition_weights"]],
                      factors)
