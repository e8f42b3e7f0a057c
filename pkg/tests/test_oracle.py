import itertools
import math

import numpy as np
import pytest

from spnseq import chain, oracle, spn
from spnseq.errors import BudgetExceeded


def test_budget_refuses_large_spn():
    topo = spn.SpnTopology(3, 2, 3, 2, 1)   # 2 * 3^14 configurations
    with pytest.raises(BudgetExceeded):
        oracle.spn_brute_force(topo, spn.SpnWeights.zeros(topo), np.zeros(1),
                               oracle.ExhaustiveBudget(10 ** 6))


def test_budget_refuses_long_chain():
    model = chain.first_order_model(4, 1, dict(num_layers=1, children_per_parent=1,
                                               states_per_hidden=1))
    with pytest.raises(BudgetExceeded):
        oracle.chain_brute_force(model, np.zeros((12, 1)))   # 4^12 > 10^7


def test_spn_oracle_counts_configurations():
    topo = spn.SpnTopology(2, 2, 2, 3, 1)
    ref = oracle.spn_brute_force(topo, spn.SpnWeights.zeros(topo), np.zeros(1))
    np.testing.assert_allclose(ref, math.log(2 ** 6))


def test_log_fsum_exp_handles_scale():
    vals = [1000.0, 1000.0, -np.inf]
    assert oracle._log_fsum_exp(vals) == pytest.approx(1000 + math.log(2))


def test_chain_oracle_enumerates_in_lexicographic_order():
    model = chain.first_order_model(2, 1, dict(num_layers=1, children_per_parent=1,
                                               states_per_hidden=1))
    ref = oracle.chain_brute_force(model, np.zeros((3, 1)))
    assert [tuple(s) for s in ref.sequences] == list(itertools.product(range(2), repeat=3))
    np.testing.assert_array_equal(ref.argmax, [0, 0, 0])
