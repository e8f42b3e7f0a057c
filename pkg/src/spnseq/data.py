"""Datasets: OCR letter files, JSON-lines sequences, synthetic tasks,
feature normalization and cross-validation folds."""

from __future__ import annotations

import gzip
import json
import string
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import InputError, ParseError

OCR_PIXELS = 128
OCR_ALPHABET = list(string.ascii_lowercase)
STD_FLOOR = 1e-8


@dataclass
class LabeledSequence:
    observations: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.observations = np.atleast_2d(np.asarray(self.observations, dtype=float))
        self.labels = np.asarray(self.labels, dtype=np.int64).ravel()
        if self.observations.shape[0] < 1:
            raise InputError("a sequence needs at least one position")
        if self.observations.shape[0] != self.labels.shape[0]:
            raise InputError(
                f"{self.observations.shape[0]} observations but {self.labels.shape[0]} labels")

    def __len__(self):
        return self.labels.shape[0]

    def validate(self, num_labels: int, input_dim: int | None = None) -> None:
        if np.any(self.labels < 0) or np.any(self.labels >= num_labels):
            raise InputError(f"label outside [0, {num_labels})")
        if input_dim is not None and self.observations.shape[1] != input_dim:
            raise InputError(
                f"observation dimension {self.observations.shape[1]} != {input_dim}")


@dataclass
class FoldSpec:
    num_folds: int
    assignment: list

    def __post_init__(self):
        bad = [f for f in self.assignment if not 0 <= f < self.num_folds]
        if bad:
            raise InputError(f"fold id {bad[0]} outside [0, {self.num_folds})")

    def indices(self, fold: int) -> list[int]:
        return [i for i, f in enumerate(self.assignment) if f == fold]


@dataclass
class Dataset:
    sequences: list
    label_alphabet: list
    feature_dim: int
    normalization_stats: tuple | None = None
    folds: FoldSpec | None = None
    info: dict = field(default_factory=dict)

    def __post_init__(self):
        for seq in self.sequences:
            seq.validate(len(self.label_alphabet), self.feature_dim)

    def __len__(self):
        return len(self.sequences)

    @property
    def num_labels(self) -> int:
        return len(self.label_alphabet)

    @property
    def num_positions(self) -> int:
        return sum(len(s) for s in self.sequences)

    def subset(self, indices) -> "Dataset":
        return Dataset([self.sequences[i] for i in indices], list(self.label_alphabet),
                       self.feature_dim, self.normalization_stats, None, dict(self.info))

    def split_fold(self, test_fold: int, dev_fold: int | None = None):
        """``(train, dev, test)`` datasets for one cross-validation fold.

        ``dev`` is ``None`` unless ``dev_fold`` is given; the dev fold is
        removed from the training portion.
        """
        if self.folds is None:
            raise InputError("dataset has no fold assignment")
        assign = self.folds.assignment
        test = [i for i, f in enumerate(assign) if f == test_fold]
        dev = [i for i, f in enumerate(assign) if dev_fold is not None and f == dev_fold]
        train = [i for i, f in enumerate(assign) if f != test_fold and (dev_fold is None or f != dev_fold)]
        return self.subset(train), (self.subset(dev) if dev_fold is not None else None), self.subset(test)


def _open_text(path):
    path = Path(path)
    if path.suffix == ".gz":
        return gzip.open(path, "rt")
    return open(path, "r")


def load_ocr(path) -> Dataset:
    """Read the tab-separated OCR letter file.

    Each row is ``id, letter, next_id, word_id, position, fold, p_1 .. p_128``.
    Words are rebuilt by following ``next_id`` links (``-1`` ends a word).
    """
    rows = {}
    order = []
    with _open_text(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 6 + OCR_PIXELS:
                raise ParseError(f"expected {6 + OCR_PIXELS} fields, got {len(parts)}"
                                 f" ({max(0, len(parts) - 6)} pixels)", path, lineno)
            try:
                row_id, next_id, fold = int(parts[0]), int(parts[2]), int(parts[5])
                pixels = np.array([float(v) for v in parts[6:]])
            except ValueError as exc:
                raise ParseError(f"bad numeric field: {exc}", path, lineno) from None
            letter = parts[1]
            if letter not in OCR_ALPHABET:
                raise ParseError(f"unknown letter {letter!r}", path, lineno)
            if row_id in rows:
                raise ParseError(f"duplicate id {row_id}", path, lineno)
            rows[row_id] = (lineno, OCR_ALPHABET.index(letter), next_id, fold, pixels)
            order.append(row_id)

    referenced = set()
    for row_id in order:
        lineno, _, next_id, _, _ = rows[row_id]
        if next_id == -1:
            continue
        if next_id not in rows:
            raise ParseError(f"next id {next_id} does not exist", path, lineno)
        if next_id in referenced:
            raise ParseError(f"id {next_id} is the successor of two rows", path, lineno)
        referenced.add(next_id)

    sequences, folds, visited = [], [], set()
    for row_id in order:
        if row_id in referenced:
            continue
        chain = []
        cur = row_id
        while cur != -1:
            if cur in visited:
                raise ParseError(f"cycle through id {cur}", path, rows[cur][0])
            visited.add(cur)
            chain.append(rows[cur])
            cur = rows[cur][2]
        fold_ids = {r[3] for r in chain}
        if len(fold_ids) != 1:
            raise ParseError(f"word starting at id {row_id} spans folds {sorted(fold_ids)}",
                             path, chain[0][0])
        sequences.append(LabeledSequence(np.stack([r[4] for r in chain]),
                                         [r[1] for r in chain]))
        folds.append(fold_ids.pop())
    if len(visited) != len(rows):
        stray = next(r for r in order if r not in visited)
        raise ParseError(f"id {stray} is not reachable from any word start (cycle)",
                         path, rows[stray][0])

    fold_values = sorted(set(folds))
    # the distributed file numbers folds 0..9
    num_folds = max(fold_values) + 1 if fold_values else 0
    spec = FoldSpec(num_folds, folds) if folds else None
    return Dataset(sequences, list(OCR_ALPHABET), OCR_PIXELS, folds=spec)


def load_jsonl(path, num_labels: int | None = None) -> Dataset:
    """One record per line: ``{"labels": [...], "features": [[...], ...]}``."""
    sequences = []
    dim = None
    max_label = -1
    with _open_text(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                labels = [int(v) for v in rec["labels"]]
                feats = rec["features"]
            except (ValueError, KeyError, TypeError) as exc:
                raise ParseError(f"bad record: {exc}", path, lineno) from None
            widths = {len(f) for f in feats}
            if len(widths) != 1:
                raise ParseError("ragged feature rows", path, lineno)
            width = widths.pop()
            if dim is None:
                dim = width
            elif width != dim:
                raise ParseError(f"feature dimension {width} differs from {dim}", path, lineno)
            if len(labels) != len(feats):
                raise ParseError("labels and features differ in length", path, lineno)
            if any(v < 0 for v in labels):
                raise ParseError("negative label", path, lineno)
            if num_labels is not None and any(v >= num_labels for v in labels):
                raise ParseError(f"label outside [0, {num_labels})", path, lineno)
            max_label = max([max_label, *labels])
            sequences.append(LabeledSequence(np.asarray(feats, dtype=float), labels))
    if num_labels is None:
        num_labels = max_label + 1
    return Dataset(sequences, [str(i) for i in range(num_labels)], dim or 0)


def save_jsonl(dataset: Dataset, path) -> None:
    with open(path, "w") as fh:
        for seq in dataset.sequences:
            fh.write(json.dumps({"labels": seq.labels.tolist(),
                                 "features": seq.observations.tolist()}) + "\n")


def normalization_stats(dataset: Dataset):
    if not dataset.sequences:
        raise InputError("cannot compute statistics of an empty dataset")
    allx = np.concatenate([s.observations for s in dataset.sequences])
    mean = allx.mean(axis=0)
    std = np.maximum(allx.std(axis=0), STD_FLOOR)
    return mean, std


def apply_normalization(dataset: Dataset, stats) -> Dataset:
    mean, std = stats
    seqs = [LabeledSequence((s.observations - mean) / std, s.labels) for s in dataset.sequences]
    return replace(dataset, sequences=seqs, normalization_stats=(mean, std))


def normalize(train: Dataset, others=()):
    """Standardize every dataset with statistics of ``train``.

    Returns ``(train_norm, [others_norm...], stats)``.
    """
    stats = normalization_stats(train)
    return (apply_normalization(train, stats),
            [apply_normalization(d, stats) for d in others], stats)


def _spread_codes(rng, Y, D, tries=200):
    """Sign codes for the class means, picked to maximize the minimum
    Hamming distance among ``tries`` random draws."""
    best, best_dist = None, -1
    for _ in range(tries):
        codes = rng.choice([-1.0, 1.0], size=(Y, D))
        if Y < 2:
            return codes
        dist = min(int(np.sum(codes[a] != codes[b]))
                   for a in range(Y) for b in range(a + 1, Y))
        if dist > best_dist:
            best, best_dist = codes, dist
    return best


def synth_task(seed: int, num_sequences: int, T: int, Y: int, feature_dim: int,
               separation: float = 3.0, bayes_samples: int = 20000) -> Dataset:
    """Labels from a random Markov chain, features from label-conditioned
    isotropic Gaussians with unit variance.

    The class means sit on corners of a hypercube with per-coordinate gap
    ``separation`` (in units of the noise standard deviation). The frame
    error of the nearest-mean classifier is estimated by Monte Carlo and
    stored in ``info["bayes_error"]``.
    """
    if min(T, Y, feature_dim) < 1 or num_sequences < 0:
        raise InputError("T, Y and feature_dim must be positive")
    rng = np.random.default_rng(seed)
    means = _spread_codes(rng, Y, feature_dim) * (separation / 2.0)
    trans = rng.dirichlet(np.ones(Y), size=Y)
    init = rng.dirichlet(np.ones(Y))
    sequences = []
    for _ in range(num_sequences):
        labels = np.empty(T, dtype=np.int64)
        labels[0] = rng.choice(Y, p=init)
        for t in range(1, T):
            labels[t] = rng.choice(Y, p=trans[labels[t - 1]])
        feats = means[labels] + rng.standard_normal((T, feature_dim))
        sequences.append(LabeledSequence(feats, labels))

    mc = np.random.default_rng([seed, 1])
    ys = mc.integers(0, Y, size=bayes_samples)
    xs = means[ys] + mc.standard_normal((bayes_samples, feature_dim))
    d2 = ((xs[:, None, :] - means[None, :, :]) ** 2).sum(axis=2)
    bayes_error = float(np.mean(d2.argmin(axis=1) != ys))
    return Dataset(sequences, [str(i) for i in range(Y)], feature_dim,
                   info={"bayes_error": bayes_error, "means": means, "transitions": trans})


def error_rate(predictions, references) -> float:
    """Wrongly assigned labels over total labels."""
    wrong = total = 0
    for p, r in zip(predictions, references):
        p, r = np.asarray(p), np.asarray(r)
        if p.shape != r.shape:
            raise InputError("prediction and reference lengths differ")
        wrong += int(np.sum(p != r))
        total += r.size
    return wrong / total if total else 0.0
