import numpy as np
import pytest

from spnseq import spn


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)


def small_topology(**kw):
    base = dict(num_layers=1, children_per_parent=2, states_per_hidden=2,
                num_labels=2, input_dim=3)
    base.update(kw)
    return spn.SpnTopology(**base)
