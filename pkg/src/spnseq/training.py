"""Stochastic gradient ascent on the conditional log-likelihood.

Models are duck-typed: anything with ``parameters()``, ``gradient(seq)``,
``log_likelihood(seq)``, ``predict(observations)`` and ``copy()`` can be
trained, which covers :class:`~spnseq.chain.ChainModel` and
:class:`~spnseq.memm.MemmModel`.
"""

from __future__ import annotations

import itertools
import json
import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from .data import error_rate
from .errors import InputError, NumericError

log = logging.getLogger(__name__)

DEFAULT_LEARNING_RATES = (1e-2, 1e-3, 1e-4)
DEFAULT_L2 = (1e-2, 1e-3, 1e-4)


@dataclass
class TrainConfig:
    learning_rate: float = 1e-2
    l2: float = 1e-4
    epochs: int = 50
    batch_size: int = 1
    shuffle_seed: int = 0
    eval_every: int = 1

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise InputError("learning_rate must be > 0")
        if not self.l2 >= 0:
            raise InputError("l2 must be >= 0")
        if int(self.epochs) != self.epochs or self.epochs < 1:
            raise InputError("epochs must be a positive integer")
        if self.batch_size != 1:
            raise InputError("only batch_size = 1 is supported")
        if self.eval_every < 1:
            raise InputError("eval_every must be >= 1")


@dataclass
class TrainReport:
    objective: list = field(default_factory=list)
    dev_error: list = field(default_factory=list)
    dev_epochs: list = field(default_factory=list)
    best_epoch: int | None = None
    best_dev_error: float | None = None
    config: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2)


def evaluate_error(model, dataset) -> float:
    preds = [model.predict(s.observations) for s in dataset.sequences]
    return error_rate(preds, [s.labels for s in dataset.sequences])


def sgd_step(model, grad, learning_rate: float, l2_per_sample: float) -> None:
    """``w <- w + lr * (g - l2_per_sample * w)`` in place."""
    for p, g in zip(model.parameters(), grad.parameters()):
        p += learning_rate * (g - l2_per_sample * p)


def regularized_objective(model, sequences, l2: float) -> float:
    """``sum_n log p(y_n | x_n) - l2/2 * ||w||^2``: what an epoch of SGD ascends."""
    ll = sum(model.log_likelihood(s) for s in sequences)
    sq = sum(float(np.sum(p * p)) for p in model.parameters())
    return ll - 0.5 * l2 * sq


def train(model, train_set, dev_set, config: TrainConfig, progress=None):
    """Train ``model`` in place and return ``(report, best_model)``.

    The per-sample update applies ``l2 / N`` of weight decay so one epoch
    applies ``l2`` once. ``report.objective[e]`` is the sum of the
    per-sample log-likelihoods seen during epoch ``e`` (each evaluated just
    before its update). The returned model is a snapshot from the epoch
    with the lowest dev error (earliest on ties); without a dev set it is
    the final model.
    """
    sequences = list(train_set.sequences)
    if not sequences:
        raise InputError("empty training set")
    N = len(sequences)
    rng = np.random.default_rng(config.shuffle_seed)
    report = TrainReport(config=asdict(config))
    best = None
    decay = config.l2 / N
    for epoch in range(config.epochs):
        order = rng.permutation(N)
        total = 0.0
        for i in order:
            grad, ll = model.gradient(sequences[i])
            total += ll
            sgd_step(model, grad, config.learning_rate, decay)
        if not np.isfinite(total) or not all(np.all(np.isfinite(p)) for p in model.parameters()):
            raise NumericError(f"non-finite weights or objective in epoch {epoch}")
        report.objective.append(total)
        msg = f"epoch {epoch + 1}/{config.epochs} objective {total:.4f}"
        if dev_set is not None and len(dev_set) and (epoch + 1) % config.eval_every == 0:
            err = evaluate_error(model, dev_set)
            report.dev_error.append(err)
            report.dev_epochs.append(epoch)
            msg += f" dev error {err:.4f}"
            if report.best_dev_error is None or err < report.best_dev_error:
                report.best_dev_error = err
                report.best_epoch = epoch
                best = model.copy()
        log.info(msg)
        if progress is not None:
            progress(epoch, report)
    if best is None:
        best = model.copy()
        report.best_epoch = config.epochs - 1
    return report, best


def grid_search(model_factory, train_set, dev_set, base: TrainConfig,
                learning_rates=DEFAULT_LEARNING_RATES, l2_values=DEFAULT_L2):
    """Train one fresh model per ``(learning_rate, l2)`` pair.

    ``model_factory()`` must return a new, identically initialized model.
    Returns ``(best_pair, results)`` where ``results`` lists
    ``(learning_rate, l2, best_dev_error)`` in grid order; ties keep the
    first pair. A run that diverges is recorded with an infinite error.
    """
    if dev_set is None or not len(dev_set):
        raise InputError("grid search needs a non-empty dev set")
    results = []
    best_pair, best_err = None, None
    for lr, l2 in itertools.product(learning_rates, l2_values):
        cfg = TrainConfig(lr, l2, base.epochs, base.batch_size, base.shuffle_seed, base.eval_every)
        try:
            with np.errstate(over="ignore", invalid="ignore"):
                report, _ = train(model_factory(), train_set, dev_set, cfg)
            err = report.best_dev_error
        except NumericError as exc:
            log.warning("grid lr=%g l2=%g diverged: %s", lr, l2, exc)
            err = float("inf")
        results.append((lr, l2, err))
        log.info("grid lr=%g l2=%g dev error %.4f", lr, l2, err)
        if best_err is None or err < best_err:
            best_pair, best_err = (lr, l2), err
    return best_pair, results


@dataclass
class FiniteDifferenceReport:
    max_relative_error: float
    failing: list
    num_checked: int
    tolerance: float

    @property
    def passed(self) -> bool:
        return not self.failing


def finite_difference_check(model, sequence, tolerance: float = 1e-5, step: float = 1e-5,
                            abs_floor: float = 1e-8, gradient_fn=None,
                            objective_fn=None) -> FiniteDifferenceReport:
    """Compare the analytic gradient with central differences, coordinate by
    coordinate.

    A coordinate fails when its absolute difference exceeds ``abs_floor``
    and its relative difference exceeds ``tolerance``. ``failing`` holds
    ``(parameter_index, flat_index, analytic, numeric)`` tuples.
    """
    gradient_fn = gradient_fn or (lambda m, s: m.gradient(s))
    objective_fn = objective_fn or (lambda m, s: m.log_likelihood(s))
    grad, _ = gradient_fn(model, sequence)
    failing = []
    worst = 0.0
    checked = 0
    for k, (p, g) in enumerate(zip(model.parameters(), grad.parameters())):
        flat = p.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            up = objective_fn(model, sequence)
            flat[i] = orig - step
            down = objective_fn(model, sequence)
            flat[i] = orig
            numeric = (up - down) / (2 * step)
            analytic = float(gflat[i])
            diff = abs(analytic - numeric)
            checked += 1
            scale = max(abs(analytic), abs(numeric))
            rel = diff / scale if scale > abs_floor else 0.0
            worst = max(worst, rel)
            if diff > abs_floor and rel > tolerance:
                failing.append((k, i, analytic, numeric))
    return FiniteDifferenceReport(worst, failing, checked, tolerance)
