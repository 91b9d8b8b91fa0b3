import dataclasses
import os

import numpy as np
import pytest

from mdnkit import config as cf
from mdnkit import experiments as ex


def test_config_key_ignores_run_plumbing():
    cfg = cf.preset("inverse_sine", scale="desk")
    key = ex.config_key(cfg, 3)
    assert len(key) == 16
    assert ex.config_key(dataclasses.replace(cfg, workers=7, ensemble_size=2, seed=99), 3) == key
    assert ex.config_key(cfg, 4) != key
    assert ex.config_key(dataclasses.replace(cfg, K=cfg.K + 1), 3) != key


@pytest.mark.parametrize("experiment, d_in, d_out", [
    ("inverse_sine", 1, 1), ("saddle_node", 1, 20), ("gravity_case1", 2, 22), ("gravity_case3", 2, 22),
])
def test_make_dataset_shapes(experiment, d_in, d_out):
    ds = ex.make_dataset(cf.preset(experiment), 12, 0)
    assert ds.X.shape == (12, d_in)
    assert ds.Y.shape[0] == 12
    assert ex.model_dims(cf.preset(experiment), ds) == (ds.d_in, ds.d_out)


def test_lorenz_dims_are_state_to_state():
    cfg = cf.preset("lorenz")
    assert ex.model_dims(cfg, ex.make_dataset(cfg, 1, 0)) == (3, 3)


def test_gravity_case_from_name():
    assert [ex.gravity_case(cf.preset(f"gravity_case{c}")) for c in (1, 2, 3)] == [1, 2, 3]


def test_resolve_workers():
    assert ex.resolve_workers(3) == 3
    assert ex.resolve_workers(0) == (os.cpu_count() or 1)


def _grid(labels: np.ndarray, K: int = 3) -> ex.InterpretGrid:
    n = labels.shape[0]
    alpha = np.full((n, n, K), 0.1 / (K - 1))
    for k in range(K):
        alpha[labels == k, k] = 0.9
    mask = np.ones((n, n), dtype=bool)
    xs = np.linspace(-1, 1, n)
    return ex.InterpretGrid(xs, xs, mask, alpha, np.zeros((n, n)), np.arange(K), np.full(K, 1 / K))


def test_regions_counts_connected_pieces():
    lab = np.zeros((6, 6), dtype=int)
    lab[:, 2:4] = 1
    lab[:, 4:] = 2
    assert _grid(lab).regions() == {0: 1, 1: 1, 2: 1}
    lab[:, 5] = 0                      # label 0 now appears in two separate strips
    assert _grid(lab).regions() == {0: 2, 1: 1, 2: 1}


def test_diagonal_contact_is_not_connected():
    lab = np.full((4, 4), 1)
    lab[0, 0] = lab[1, 1] = 0
    assert _grid(lab, K=2).regions()[0] == 2


def test_argmax_and_spread_respect_mask():
    lab = np.zeros((5, 5), dtype=int)
    lab[0, :] = 1
    g = _grid(lab, K=2)
    g.mask[0, 0] = False
    assert g.argmax()[0, 0] == -1 and g.argmax()[0, 1] == 1
    assert g.spread(0) == pytest.approx(0.8)


def test_saddle_clusters_split_at_the_bimodal_input():
    clean = ex.saddle_clusters(0.5)
    assert clean.shape == (5, 20)
    assert np.all(clean[:, 0] == 0.5)
    final = clean[:, -1]
    assert np.any(final < 5.0) and np.any(final >= 5.0)
    assert np.all(np.abs(clean) <= 10.0)
