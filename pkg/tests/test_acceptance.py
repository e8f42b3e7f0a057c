"""Acceptance criteria. Each test prints one PASS/FAIL line at the stated
tolerance and runtime budget.

The OCR comparisons need the letter file: point ``SPNSEQ_OCR_PATH`` at it.
The full ten-fold run additionally needs ``SPNSEQ_RUN_EXTENDED=1``.
"""

import os
import time

import numpy as np
import pytest

from spnseq import chain, data, memm, training, verify

OCR_PATH = os.environ.get("SPNSEQ_OCR_PATH")
RUN_EXTENDED = os.environ.get("SPNSEQ_RUN_EXTENDED") == "1"
KW = dict(num_layers=1, children_per_parent=2, states_per_hidden=2)


@pytest.fixture
def say(capsys):
    def emit(criterion, passed, detail):
        status = passed if isinstance(passed, str) else ("PASS" if passed else "FAIL")
        with capsys.disabled():
            print(f"\n[{status}] criterion {criterion}: {detail}")
    return emit


def _suite(say, number, suite, budget, **kw):
    result = suite(**kw)
    ok = result.passed and result.seconds < budget
    limit = f" (budget {budget:.0f}s)" if np.isfinite(budget) else ""
    say(number, ok, result.line() + limit)
    assert result.passed, result.failures[:5]
    assert result.seconds < budget


def test_1_spn_oracle_equivalence(say):
    _suite(say, 1, verify.spn_oracle_suite, 10.0, num_models=200, tolerance=1e-10)


def test_2_chain_partition_oracle(say):
    _suite(say, 2, verify.chain_partition_suite, 30.0, num_models=100, tolerance=1e-10,
           agreement=1e-9)


def test_3_decoding_exactness(say):
    _suite(say, 3, verify.decoding_suite, float("inf"), num_chain=100, num_memm=100)


def test_4_gradient_checks(say):
    _suite(say, 4, verify.gradient_suite, 60.0, instances=20, tolerance=1e-5, max_params=500)


@pytest.mark.slow
def test_5_toy_learning(say):
    start = time.perf_counter()
    full = data.synth_task(0, 200, 8, 4, 8, separation=3.0)
    train_raw, held_raw = full.subset(range(150)), full.subset(range(150, 200))
    train_set, (held,), _ = data.normalize(train_raw, [held_raw])
    model = chain.first_order_model(4, 8, KW, np.random.default_rng(0))
    cfg = training.TrainConfig(learning_rate=1e-2, l2=1e-4, epochs=50)
    _, final = training.train(model, train_set, None, cfg)
    held_err = training.evaluate_error(final, held)
    train_err = training.evaluate_error(final, train_set)
    seconds = time.perf_counter() - start
    ok = held_err <= 0.05 and seconds < 300
    say(5, ok, f"held-out error {held_err:.4f} (<= 0.05), train accuracy {1 - train_err:.4f}, "
               f"generator bayes error {full.info['bayes_error']:.4f}, {seconds:.1f}s (budget 300s)")
    assert held_err <= 0.05
    assert 1 - train_err >= 0.99
    assert seconds < 300


def _ocr_fold0():
    full = data.load_ocr(OCR_PATH)
    train_raw, dev_raw, test_raw = full.split_fold(0, 1)
    train_set, (dev, test), _ = data.normalize(train_raw, [dev_raw, test_raw])
    return train_set, dev, test


def _fit_and_test(model, train_set, dev, test, epochs):
    cfg = training.TrainConfig(learning_rate=1e-2, l2=1e-4, epochs=epochs)
    _, best = training.train(model, train_set, dev, cfg)
    return training.evaluate_error(best, test)


@pytest.mark.ocr
def test_6_ocr_directional_claims(say):
    if not OCR_PATH:
        reason = "SPNSEQ_OCR_PATH not set; OCR letter file unavailable, claims unverified"
        say(6, "SKIP", reason)
        pytest.skip(reason)
    train_set, dev, test = _ocr_fold0()
    Y, D = train_set.num_labels, train_set.feature_dim
    rng = lambda: np.random.default_rng(0)  # noqa: E731
    start = time.perf_counter()
    crf = _fit_and_test(chain.first_order_model(Y, D, KW, rng()), train_set, dev, test, 25)
    memm2 = _fit_and_test(memm.MemmModel.create(2, Y, D, KW, rng=rng()), train_set, dev, test, 25)
    memm5 = _fit_and_test(memm.MemmModel.create(5, Y, D, KW, rng=rng()), train_set, dev, test, 25)
    seconds = time.perf_counter() - start
    say("6a", crf < memm2, f"CRF CER {crf:.4f} < MEMM(M-1=1) CER {memm2:.4f}")
    say("6b", memm5 < memm2, f"MEMM(M-1=4) CER {memm5:.4f} < MEMM(M-1=1) CER {memm2:.4f}, "
                             f"{seconds:.0f}s total")
    assert crf < memm2
    assert memm5 < memm2


@pytest.mark.ocr
def test_7_ocr_ten_fold_extended(say):
    if not (OCR_PATH and RUN_EXTENDED):
        reason = "optional; needs SPNSEQ_OCR_PATH and SPNSEQ_RUN_EXTENDED=1"
        say(7, "SKIP", reason)
        pytest.skip(reason)
    full = data.load_ocr(OCR_PATH)
    kw = dict(num_layers=2, children_per_parent=3, states_per_hidden=2)
    errors = []
    for k in range(full.folds.num_folds):
        train_raw, dev_raw, test_raw = full.split_fold(k, (k + 1) % full.folds.num_folds)
        train_set, (dev, test), _ = data.normalize(train_raw, [dev_raw, test_raw])
        model = chain.first_order_model(train_set.num_labels, train_set.feature_dim, kw,
                                        np.random.default_rng(k))
        errors.append(_fit_and_test(model, train_set, dev, test, 100))
    cer = float(np.mean(errors))
    inside = abs(cer - 0.0575) <= 0.015
    # outside the band calls for a written analysis rather than a failure
    say(7, "PASS" if inside else "OUT OF BAND", f"10-fold CER {cer:.4f}, target band 0.0575 +/- 0.015")


def test_8_speech_results_not_reproducible(say):
    say(8, "NOT REPRODUCIBLE", "speech-corpus results are out of scope (licensed data); the higher-order "
                 "machinery is covered by criteria 1-5")
