import csv

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from faust.metrics import accuracy, export_embeddings, fisher_report, fisher_score
from faust.model import init_layers, stack_forward


def _scatter_oracle(x, labels):
    """Full scatter matrices, then their traces."""
    mu = x.mean(0)
    SB = np.zeros((x.shape[1],) * 2)
    SW = np.zeros_like(SB)
    for c in np.unique(labels):
        xc = x[labels == c]
        mc = xc.mean(0)
        SB += len(xc) * np.outer(mc - mu, mc - mu)
        for row in xc:
            SW += np.outer(row - mc, row - mc)
    return np.trace(SB) / (np.trace(SW) + 1e-12)


class TestAccuracy:
    def test_cases(self):
        assert accuracy([1, 2, 3], [1, 2, 3]) == 1.0
        assert accuracy([0, 1], [1, 0]) == 0.0
        assert accuracy([1, 2, 3], [1, 2, 4]) == pytest.approx(2 / 3)

    def test_errors(self):
        with pytest.raises(ValueError):
            accuracy([], [])
        with pytest.raises(ValueError):
            accuracy([1], [1, 2])


class TestFisher:
    def test_zero_within_scatter(self):
        x = np.array([[0.0, 0], [0, 0], [1, 1], [1, 1]])
        f = fisher_score(x, [0, 0, 1, 1])
        assert f == pytest.approx(2.0 / 1e-12)

    def test_identical_points(self):
        assert fisher_score(np.ones((6, 3)), [0, 1, 0, 1, 2, 2]) == 0

    def test_blobs_match_oracle(self, rng):
        x = np.concatenate([rng.normal(0, 1, (30, 2)), rng.normal(3, 1, (20, 2))])
        labels = np.repeat([0, 1], [30, 20])
        assert fisher_score(x, labels) == pytest.approx(_scatter_oracle(x, labels), rel=1e-9)

    @settings(max_examples=40, deadline=None)
    @given(arrays(np.float64, (12, 3), elements=st.floats(-10, 10, width=64)))
    def test_invariant_to_rotation_and_shift(self, x):
        labels = np.arange(12) % 3
        q, _ = np.linalg.qr(np.random.default_rng(0).normal(size=(3, 3)))
        a = fisher_score(x, labels)
        b = fisher_score(x @ q + 5.0, labels)
        assert b == pytest.approx(a, rel=1e-6, abs=1e-6)

    def test_needs_two_classes(self):
        with pytest.raises(ValueError):
            fisher_score(np.ones((3, 2)), [1, 1, 1])

    def test_report(self, blobs3):
        layers = init_layers([12, 8, 8], 4, 0)
        rep = fisher_report(layers, blobs3, sample_limit=50, rng_seed=1)
        assert rep.sample_count == 50 and len(rep.scores) == 2
        assert rep.table().splitlines()[0].split()[:2] == ["layer", "F"]


class TestExport:
    def test_rows_and_values(self, tmp_path, blobs3):
        layers = init_layers([12, 8, 8, 8], 5, 0)
        out = export_embeddings(layers, blobs3, 10, 4, tmp_path / "e.csv")
        with open(out) as f:
            rows = list(csv.reader(f))
        assert rows[0] == ["layer", "label"] + [f"e_{j}" for j in range(5)]
        assert len(rows) == 31
        idx = np.random.default_rng(4).choice(len(blobs3), size=10, replace=False)
        embs, _ = stack_forward(layers, blobs3.images[idx])
        for i in range(3):
            block = rows[1 + 10 * i: 11 + 10 * i]
            assert {r[0] for r in block} == {str(i + 1)}
            assert [int(r[1]) for r in block] == blobs3.labels[idx].tolist()
            got = np.array([[float(v) for v in r[2:]] for r in block], dtype=np.float32)
            np.testing.assert_array_equal(got, embs[i])

    def test_deterministic(self, tmp_path, blobs3):
        layers = init_layers([12, 8], 5, 0)
        a = export_embeddings(layers, blobs3, 10, 4, tmp_path / "a.csv").read_bytes()
        b = export_embeddings(layers, blobs3, 10, 4, tmp_path / "b.csv").read_bytes()
        assert a == b
