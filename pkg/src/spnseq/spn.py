"""Tree-structured sum-product network classifier.

The network scores a label ``y`` against an input vector ``x`` by
marginalising a regular tree of discrete hidden variables: the root is the
label, every node at layer ``l - 1`` has ``I`` children at layer ``l`` and
every hidden variable takes one of ``H`` states. A factor
``exp(w[S_0:l])`` is attached to every path prefix and the leaves add a
linear score ``w[S_0:L] . x``. Because the factor graph is a tree, the
marginal ``Q(y, x)`` can be computed by alternating products (over
children) and sums (over states), which is what :func:`evaluate` does in
the log domain.

Prefixes at depth ``l`` are stored flat in canonical order: label-major,
then for each layer the child index followed by the state, i.e. the flat
index of ``(y, (c1, s1), ..., (cl, sl))`` is the row-major index of the
tuple ``(y, c1, s1, ..., cl, sl)`` with radices ``(Y, I, H, ..., I, H)``.
"""

from __future__ import annotations

import enum
import itertools
import json
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .errors import ContractError, InputError, NumericError, StructureError


class Semiring(enum.Enum):
    SUM_PRODUCT = "sum"
    MAX_PRODUCT = "max"


@dataclass(frozen=True)
class SpnTopology:
    num_layers: int
    children_per_parent: int
    states_per_hidden: int
    num_labels: int
    input_dim: int
    semiring: Semiring = Semiring.SUM_PRODUCT

    def __post_init__(self):
        for name in ("num_layers", "children_per_parent", "states_per_hidden",
                     "num_labels", "input_dim"):
            value = getattr(self, name)
            if not isinstance(value, (int, np.integer)) or value < 1:
                raise StructureError(f"{name} must be a positive integer, got {value!r}")
        if not isinstance(self.semiring, Semiring):
            object.__setattr__(self, "semiring", Semiring(self.semiring))

    @property
    def branching(self) -> int:
        """Number of (child, state) pairs below one prefix."""
        return self.children_per_parent * self.states_per_hidden

    @property
    def num_hidden(self) -> int:
        """Hidden variables in the tree, sum of I**l for l = 1..L."""
        i = self.children_per_parent
        return sum(i ** l for l in range(1, self.num_layers + 1))

    @property
    def num_paths(self) -> int:
        return self.children_per_parent ** self.num_layers

    def num_prefixes(self, depth: int) -> int:
        self._check_depth(depth)
        return self.num_labels * self.branching ** depth

    @property
    def num_parameters(self) -> int:
        n_prefix = sum(self.num_prefixes(l) for l in range(self.num_layers + 1))
        return n_prefix + self.num_prefixes(self.num_layers) * self.input_dim

    def with_semiring(self, semiring: Semiring) -> "SpnTopology":
        return SpnTopology(self.num_layers, self.children_per_parent,
                           self.states_per_hidden, self.num_labels,
                           self.input_dim, Semiring(semiring))

    def _check_depth(self, depth):
        if not 0 <= depth <= self.num_layers:
            raise StructureError(
                f"depth {depth} outside [0, {self.num_layers}]")

    def to_dict(self) -> dict:
        return {
            "num_layers": self.num_layers,
            "children_per_parent": self.children_per_parent,
            "states_per_hidden": self.states_per_hidden,
            "num_labels": self.num_labels,
            "input_dim": self.input_dim,
            "semiring": self.semiring.value,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SpnTopology":
        return cls(int(d["num_layers"]), int(d["children_per_parent"]),
                   int(d["states_per_hidden"]), int(d["num_labels"]),
                   int(d["input_dim"]), Semiring(d.get("semiring", "sum")))


@dataclass(frozen=True)
class PathPrefix:
    """Assignment of the root label and the first ``len(per_layer)`` hidden
    variables along one root-to-leaf path."""

    label: int
    per_layer: tuple = ()

    @property
    def depth(self) -> int:
        return len(self.per_layer)

    def validate(self, topology: SpnTopology) -> None:
        if not 0 <= self.label < topology.num_labels:
            raise StructureError(f"label {self.label} out of range")
        if self.depth > topology.num_layers:
            raise StructureError(f"prefix depth {self.depth} exceeds {topology.num_layers}")
        for child, state in self.per_layer:
            if not 0 <= child < topology.children_per_parent:
                raise StructureError(f"child index {child} out of range")
            if not 0 <= state < topology.states_per_hidden:
                raise StructureError(f"state {state} out of range")

    def index(self, topology: SpnTopology) -> int:
        """Flat canonical index among the prefixes of the same depth."""
        self.validate(topology)
        idx = self.label
        for child, state in self.per_layer:
            idx = (idx * topology.children_per_parent + child) * topology.states_per_hidden + state
        return idx

    @classmethod
    def from_index(cls, topology: SpnTopology, depth: int, index: int) -> "PathPrefix":
        topology._check_depth(depth)
        if not 0 <= index < topology.num_prefixes(depth):
            raise StructureError(f"prefix index {index} out of range at depth {depth}")
        pairs = []
        for _ in range(depth):
            index, state = divmod(index, topology.states_per_hidden)
            index, child = divmod(index, topology.children_per_parent)
            pairs.append((child, state))
        return cls(index, tuple(reversed(pairs)))


def enumerate_prefixes(topology: SpnTopology, depth: int) -> list[PathPrefix]:
    """All prefixes of the given depth in canonical order."""
    topology._check_depth(depth)
    pairs = list(itertools.product(range(topology.children_per_parent),
                                   range(topology.states_per_hidden)))
    out = []
    for label in range(topology.num_labels):
        for combo in itertools.product(pairs, repeat=depth):
            out.append(PathPrefix(label, tuple(combo)))
    return out


@dataclass
class SpnWeights:
    """``prefix_weights[l]`` has one entry per depth-``l`` prefix;
    ``leaf_weights`` has one row of length ``input_dim`` per full path."""

    prefix_weights: list
    leaf_weights: np.ndarray

    @classmethod
    def zeros(cls, topology: SpnTopology) -> "SpnWeights":
        prefix = [np.zeros(topology.num_prefixes(l)) for l in range(topology.num_layers + 1)]
        leaf = np.zeros((topology.num_prefixes(topology.num_layers), topology.input_dim))
        return cls(prefix, leaf)

    @classmethod
    def initialize(cls, topology: SpnTopology, rng: np.random.Generator) -> "SpnWeights":
        """Zero prefix weights, leaf weights uniform in +-1/sqrt(input_dim)."""
        w = cls.zeros(topology)
        a = 1.0 / np.sqrt(topology.input_dim)
        w.leaf_weights[...] = rng.uniform(-a, a, size=w.leaf_weights.shape)
        return w

    @classmethod
    def random(cls, topology: SpnTopology, rng: np.random.Generator,
               scale: float = 1.0) -> "SpnWeights":
        w = cls.zeros(topology)
        for arr in w.arrays():
            arr[...] = rng.uniform(-scale, scale, size=arr.shape)
        return w

    def arrays(self) -> list:
        return [*self.prefix_weights, self.leaf_weights]

    def copy(self) -> "SpnWeights":
        return SpnWeights([p.copy() for p in self.prefix_weights], self.leaf_weights.copy())

    def zeros_like(self) -> "SpnWeights":
        return SpnWeights([np.zeros_like(p) for p in self.prefix_weights],
                          np.zeros_like(self.leaf_weights))

    def prefix_weight(self, topology: SpnTopology, prefix: PathPrefix) -> float:
        return float(self.prefix_weights[prefix.depth][prefix.index(topology)])

    def leaf_weight(self, topology: SpnTopology, prefix: PathPrefix) -> np.ndarray:
        if prefix.depth != topology.num_layers:
            raise StructureError("leaf weights exist only for full-length prefixes")
        return self.leaf_weights[prefix.index(topology)]

    def validate(self, topology: SpnTopology) -> None:
        if len(self.prefix_weights) != topology.num_layers + 1:
            raise StructureError("prefix weight depth count does not match topology")
        for l, p in enumerate(self.prefix_weights):
            if p.shape != (topology.num_prefixes(l),):
                raise StructureError(f"prefix weights at depth {l} have shape {p.shape}")
        expected = (topology.num_prefixes(topology.num_layers), topology.input_dim)
        if self.leaf_weights.shape != expected:
            raise StructureError(f"leaf weights have shape {self.leaf_weights.shape}, expected {expected}")
        if not all(np.all(np.isfinite(a)) for a in self.arrays()):
            raise NumericError("non-finite SPN weight")


@dataclass
class SpnEvaluation:
    q_values: np.ndarray
    node_values: list
    partition: float
    semiring: Semiring = Semiring.SUM_PRODUCT


@dataclass
class EvalCounter:
    """Instrumentation for the complexity checks."""

    sum_nodes: int = 0
    leaf_products: int = 0


def _as_batch(topology: SpnTopology, x) -> np.ndarray:
    X = np.asarray(x, dtype=float)
    if X.ndim == 1:
        X = X[None, :]
    if X.ndim != 2 or X.shape[1] != topology.input_dim:
        raise InputError(f"input has shape {np.shape(x)}, expected (..., {topology.input_dim})")
    if not np.all(np.isfinite(X)):
        raise NumericError("non-finite input")
    return X


def _reduce(values, semiring, axis):
    if semiring is Semiring.MAX_PRODUCT:
        return values.max(axis=axis)
    return logsumexp(values, axis=axis)


def upward(topology: SpnTopology, weights: SpnWeights, X: np.ndarray,
           counter: EvalCounter | None = None) -> list:
    """Subtree log values for every prefix, for a batch of inputs.

    Returns ``values`` with ``values[l]`` of shape ``(B, num_prefixes(l))``;
    ``values[0]`` holds ``log Q(y, x)``.
    """
    weights.validate(topology)
    X = _as_batch(topology, X)
    B = X.shape[0]
    L, I, H = topology.num_layers, topology.children_per_parent, topology.states_per_hidden
    values = [None] * (L + 1)
    values[L] = weights.prefix_weights[L][None, :] + X @ weights.leaf_weights.T
    if counter is not None:
        counter.leaf_products += values[L].size
    for l in range(L, 0, -1):
        n_parent = topology.num_prefixes(l - 1)
        blocks = values[l].reshape(B, n_parent, I, H)
        summed = _reduce(blocks, topology.semiring, axis=3)
        if counter is not None:
            counter.sum_nodes += summed.size
        values[l - 1] = weights.prefix_weights[l - 1][None, :] + summed.sum(axis=2)
    return values


def downward(topology: SpnTopology, values: list, coeffs: np.ndarray) -> list:
    """Propagate per-label coefficients down the tree.

    ``coeffs`` has shape ``(B, Y)``. Returns ``mass[l]`` of shape
    ``(B, num_prefixes(l))`` where ``mass[l][b, k]`` is
    ``sum_y coeffs[b, y] * p(prefix k | y, x_b)``; with the max semiring the
    conditional is the indicator of the maximising states.
    """
    L, I, H = topology.num_layers, topology.children_per_parent, topology.states_per_hidden
    B = coeffs.shape[0]
    mass = [np.asarray(coeffs, dtype=float)]
    for l in range(1, L + 1):
        n_parent = topology.num_prefixes(l - 1)
        blocks = values[l].reshape(B, n_parent, I, H)
        if topology.semiring is Semiring.MAX_PRODUCT:
            cond = np.zeros_like(blocks)
            best = blocks.argmax(axis=3)
            np.put_along_axis(cond, best[..., None], 1.0, axis=3)
        else:
            cond = np.exp(blocks - logsumexp(blocks, axis=3, keepdims=True))
        mass.append((mass[-1][:, :, None, None] * cond).reshape(B, -1))
    return mass


def log_q(topology: SpnTopology, weights: SpnWeights, X) -> np.ndarray:
    """``log Q(y, x)`` for a batch, shape ``(B, Y)``."""
    return upward(topology, weights, X)[0]


def backprop(topology: SpnTopology, weights: SpnWeights, X, coeffs,
             values: list | None = None) -> SpnWeights:
    """Gradient of ``sum_b sum_y coeffs[b, y] * log Q(y, x_b)``."""
    X = _as_batch(topology, X)
    coeffs = np.asarray(coeffs, dtype=float).reshape(X.shape[0], topology.num_labels)
    if values is None:
        values = upward(topology, weights, X)
    mass = downward(topology, values, coeffs)
    grad = SpnWeights([m.sum(axis=0) for m in mass], mass[-1].T @ X)
    return grad


def evaluate(topology: SpnTopology, weights: SpnWeights, x,
             counter: EvalCounter | None = None) -> SpnEvaluation:
    x = np.asarray(x, dtype=float)
    if x.ndim != 1:
        raise InputError("evaluate takes a single input vector")
    values = upward(topology, weights, x, counter)
    q = values[0][0]
    if topology.semiring is Semiring.MAX_PRODUCT:
        partition = float(q.max())
    else:
        partition = float(logsumexp(q))
    return SpnEvaluation(q, [v[0] for v in values], partition, topology.semiring)


def posterior(evaluation: SpnEvaluation) -> np.ndarray:
    if evaluation.semiring is not Semiring.SUM_PRODUCT:
        raise ContractError("posterior is undefined under the max-product semiring")
    p = np.exp(evaluation.q_values - evaluation.partition)
    return p / p.sum()


def gradient(topology: SpnTopology, weights: SpnWeights, x, observed_label: int):
    """Gradient of ``log p(observed_label | x)``; returns ``(grad, loglik)``."""
    if topology.semiring is not Semiring.SUM_PRODUCT:
        raise ContractError("the label likelihood needs the sum-product semiring")
    if not 0 <= observed_label < topology.num_labels:
        raise InputError(f"label {observed_label} out of range")
    x = np.asarray(x, dtype=float)
    values = upward(topology, weights, x)
    q = values[0][0]
    log_z = logsumexp(q)
    coeffs = -np.exp(q - log_z)
    coeffs[observed_label] += 1.0
    grad = backprop(topology, weights, x, coeffs[None, :], values)
    return grad, float(q[observed_label] - log_z)


def marginal_hidden(topology: SpnTopology, weights: SpnWeights, x, prefix: PathPrefix) -> float:
    """Posterior probability that the path variables take the prefix's values."""
    if topology.semiring is not Semiring.SUM_PRODUCT:
        raise ContractError("marginals need the sum-product semiring")
    prefix.validate(topology)
    values = upward(topology, weights, np.asarray(x, dtype=float))
    q = values[0][0]
    post = np.exp(q - logsumexp(q))
    mass = downward(topology, values, post[None, :])
    return float(mass[prefix.depth][0, prefix.index(topology)])


# -- serialization -------------------------------------------------------

def weights_to_dict(topology: SpnTopology, weights: SpnWeights) -> dict:
    weights.validate(topology)
    return {
        "topology": topology.to_dict(),
        "prefix_weights": [p.tolist() for p in weights.prefix_weights],
        "leaf_weights": weights.leaf_weights.tolist(),
    }


def weights_from_dict(d: dict) -> tuple[SpnTopology, SpnWeights]:
    topology = SpnTopology.from_dict(d["topology"])
    weights = SpnWeights([np.asarray(p, dtype=float) for p in d["prefix_weights"]],
                         np.asarray(d["leaf_weights"], dtype=float).reshape(
                             topology.num_prefixes(topology.num_layers), topology.input_dim))
    weights.validate(topology)
    return topology, weights


def dumps(topology: SpnTopology, weights: SpnWeights) -> str:
    # json renders floats with repr(), which round-trips exactly
    return json.dumps(weights_to_dict(topology, weights))


def loads(text: str) -> tuple[SpnTopology, SpnWeights]:
    return weights_from_dict(json.loads(text))
