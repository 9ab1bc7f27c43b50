import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from deepcut import autograd as ag
from deepcut.autograd import Tape, Tensor
from deepcut.data import DataError, collate
from deepcut.engines import TrainConfig, model_config
from deepcut.model import init_parameters
from deepcut.objectives import (ContrastPool, DualViews, PoolError, build_contrast_pool, combined_objective,
                                dual_dropout_views, forget_loss, forget_loss_from_scores, supcon_loss,
                                token_cross_entropy)
from deepcut.rng import Rng


def naive_forget(z, labels, anchors, tau, own=None):
    """Loop-by-loop forget loss straight from its definition."""
    z = z / np.linalg.norm(z, axis=1, keepdims=True)
    own = own if own is not None else {a: {a} for a in anchors}
    total = 0.0
    for a in anchors:
        y = labels[a]
        same = [j for j in range(len(z)) if labels[j] == y and j not in own[a]]
        diff = [i for i in range(len(z)) if labels[i] != y]
        terms = []
        for i in diff:
            num = math.exp(z[i] @ z[a] / tau)
            den = num + sum(math.exp(z[j] @ z[a] / tau) for j in same)
            terms.append(-math.log(num / den))
        total += sum(terms) / len(terms)
    return total


def pool_from(z, labels, anchors, tau):
    labels = np.asarray(labels)
    n = len(labels)
    same = np.array([(labels == labels[a]) & (np.arange(n) != a) for a in anchors])
    diff = np.array([labels != labels[a] for a in anchors])
    z = z if isinstance(z, Tensor) else Tensor(z)
    return ContrastPool(z, labels, np.asarray(anchors), same, diff, tau)


class TestCrossEntropy:
    def test_uniform_logits_give_log_c(self):
        for c in (2, 3, 6, 11):
            loss = token_cross_entropy(Tensor(np.zeros((2, 5, c))), np.zeros((2, 5), int), np.ones((2, 5), bool))
            assert abs(loss.item() - math.log(c)) < 1e-12

    def test_mask_excludes_padding(self):
        logits = np.zeros((1, 3, 2))
        logits[0, 2] = [100.0, -100.0]
        loss = token_cross_entropy(Tensor(logits), [[0, 0, 1]], [[True, True, False]])
        assert abs(loss.item() - math.log(2)) < 1e-12

    def test_label_out_of_range(self):
        with pytest.raises(DataError):
            token_cross_entropy(Tensor(np.zeros((1, 2, 3))), [[0, 3]], [[True, True]])


class TestSupCon:
    def test_uniform_similarity_closed_form(self):
        z = np.ones((4, 5))
        loss = supcon_loss(Tensor(z), [0, 0, 1, 1], tau=0.1)
        assert abs(loss.item() - math.log(3)) < 1e-12

    def test_large_tau_flattens(self):
        z = np.random.default_rng(0).normal(size=(4, 5))
        assert abs(supcon_loss(Tensor(z), [0, 0, 1, 1], tau=1e9).item() - math.log(3)) < 1e-8

    def test_missing_positive(self):
        with pytest.raises(PoolError):
            supcon_loss(Tensor(np.ones((3, 2))), [0, 0, 1], 0.1)


class TestForgetLoss:
    @pytest.mark.parametrize("n_same,expected", [(1, math.log(2)), (3, math.log(4))])
    def test_uniform_closed_form(self, n_same, expected):
        labels = [1] * (n_same + 1) + [2, 0, 0]
        pool = pool_from(np.ones((len(labels), 4)), labels, [0], 0.1)
        assert abs(forget_loss(pool).item() - expected) < 1e-12

    def test_scalar_evaluation(self):
        scores = Tensor([[1.0, 0.0]])
        out = forget_loss_from_scores(scores, [[False, True]], [[True, False]])
        assert abs(out.item() - math.log(1 + math.exp(-1))) < 1e-12

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 10_000))
    def test_matches_naive_reference(self, seed):
        r = np.random.default_rng(seed)
        labels = r.integers(0, 3, 9)
        labels[:3] = [1, 1, 0]
        z = r.normal(size=(9, 4))
        anchors = [0, 1]
        got = forget_loss(pool_from(z, labels, anchors, 0.3)).item()
        assert abs(got - naive_forget(z, labels, anchors, 0.3)) < 1e-9

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 10_000), st.floats(0.1, 10.0))
    def test_tau_scaling(self, seed, k):
        r = np.random.default_rng(seed)
        s = r.normal(size=(2, 6))
        same = np.array([[0, 1, 1, 0, 0, 0], [1, 0, 0, 0, 0, 1]], bool)
        diff = ~same & ~np.eye(2, 6, dtype=bool)
        a = forget_loss_from_scores(Tensor(s / 0.2), same, diff).item()
        b = forget_loss_from_scores(Tensor((k * s) / (k * 0.2)), same, diff).item()
        assert abs(a - b) < 1e-12

    def test_empty_sets_rejected(self):
        with pytest.raises(PoolError):
            forget_loss_from_scores(Tensor(np.zeros((1, 3))), [[False] * 3], [[True, False, False]])

    def test_gradient_step_direction(self):
        r = np.random.default_rng(3)
        z = r.normal(size=(8, 8))
        labels = np.array([1, 1, 1, 1, 0, 0, 2, 2])
        anchor = 0
        unit = lambda v: v / np.linalg.norm(v)

        def cosines(zz):
            zn = zz / np.linalg.norm(zz, axis=1, keepdims=True)
            a = zn[anchor]
            return a @ unit(zn[1:4].mean(0)), a @ unit(zn[4:].mean(0))

        x = Tensor(z, requires_grad=True)
        with Tape() as tape:
            loss = forget_loss(pool_from(x, labels, [anchor], 0.1))
        g = ag.backward(tape, loss, {"z": x})["z"]
        stepped = z.copy()
        stepped[anchor] -= 1e-3 * g[anchor]
        (s0, d0), (s1, d1) = cosines(z), cosines(stepped)
        assert s1 < s0
        assert d1 > d0

    def test_no_anchors_is_zero(self):
        pool = ContrastPool(Tensor(np.ones((2, 3))), np.zeros(2), np.zeros(0, int),
                            np.zeros((0, 2), bool), np.zeros((0, 2), bool), 0.1)
        assert forget_loss(pool).item() == 0.0


class TestCombined:
    def _pool(self):
        return pool_from(np.ones((4, 3)), [1, 1, 0, 0], [0], 0.1)

    def test_gamma_zero_is_ce(self):
        ce = Tensor(1.234)
        assert combined_objective(ce, self._pool(), 0.0).combined is ce

    def test_arithmetic(self):
        parts = combined_objective(Tensor(2.0), self._pool(), 0.3)
        assert abs(parts.combined.item() - (2.0 + 0.3 * math.log(2))) < 1e-12
        assert abs(parts.combined.item() - (parts.ce_retained + parts.gamma * parts.forget_loss)) < 1e-12

    def test_monotone_affine_in_gamma(self):
        vals = [combined_objective(Tensor(0.7), self._pool(), g).combined.item() for g in np.linspace(0, 1, 6)]
        steps = np.diff(vals)
        assert (steps > 0).all()
        np.testing.assert_allclose(steps, steps[0], rtol=1e-10)

    def test_negative_gamma(self):
        with pytest.raises(ValueError):
            combined_objective(Tensor(1.0), None, -0.1)


@pytest.fixture(scope="module")
def views(tiny_ds):
    cfg = TrainConfig(hidden_dim=16, num_heads=2)
    mcfg = model_config(tiny_ds, cfg)
    params = {k: Tensor(v) for k, v in init_parameters(mcfg, Rng(0)).params.items()}
    fb = collate(tiny_ds.train[:2])
    rb = collate(tiny_ds.train[2:8])
    return (dual_dropout_views(mcfg, params, fb, Rng(1), Rng(2)),
            dual_dropout_views(mcfg, params, rb, Rng(3), Rng(4)), mcfg, params, fb)


class TestPools:
    def test_views_differ(self, views):
        f = views[0]
        assert not np.array_equal(f.first_rows.data, f.second_rows.data)

    def test_eval_mode_rejected(self, views):
        _, _, mcfg, params, fb = views
        with pytest.raises(ValueError):
            dual_dropout_views(mcfg, params, fb, Rng(1), Rng(2), train=False)

    def test_pool_sets(self, views, tiny_ds):
        f, r, *_ = views
        pool = build_contrast_pool(f, r, 0.1, tiny_ds.outside_index)
        nf, nr = f.labels.size, r.labels.size
        assert pool.embeddings.shape[0] == 2 * (nf + nr)
        for k, a in enumerate(pool.anchors):
            assert pool.labels[a] != tiny_ds.outside_index
            tok = a % nf if a < 2 * nf else None
            own = {tok, tok + nf}
            assert not any(pool.same[k, j] for j in own)
            assert not (pool.same[k] & pool.diff[k]).any()
            assert (pool.labels[pool.diff[k]] != pool.labels[a]).all()
        assert pool.num_anchors + pool.skipped == 2 * int((f.labels != tiny_ds.outside_index).sum())

    def test_set_sizes_on_fixture(self):
        # one forget token of class 1 against 3 other class-1 tokens and 5 others
        d = 4
        fl = np.array([1])
        rl = np.array([1, 1, 1, 0, 0, 2, 2, 0])
        mk = lambda n: Tensor(np.random.default_rng(n).normal(size=(n, d)))
        f = DualViews(None, None, mk(1), mk(1), fl)
        r = DualViews(None, None, mk(8), mk(8), rl)
        pool = build_contrast_pool(f, r, 0.1, 0)
        assert pool.num_anchors == 2
        assert pool.same.sum(1).tolist() == [6, 6]
        assert pool.diff.sum(1).tolist() == [10, 10]

    def test_only_outside_tokens_no_anchors(self):
        f = DualViews(None, None, Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))), np.array([0, 0]))
        pool = build_contrast_pool(f, None, 0.1, 0)
        assert pool.num_anchors == 0
        assert forget_loss(pool).item() == 0.0
