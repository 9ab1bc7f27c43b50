import logging
import time
from dataclasses import replace

import numpy as np
import pytest

from deepcut.data import Sentence, UnlearnRequest, select_forget
from deepcut.engines import (Evaluator, TrainConfig, params_digest, shard_assignment, shard_seed, sisa_train,
                             sisa_unlearn, train_model, unlearn_deepcut, unlearn_finetune, unlearn_retrain,
                             unlearn_reverse_gradient)
from deepcut.evaluation import evaluate_split

FAST = TrainConfig(seed=3, epochs=3, unlearn_epochs=2, hidden_dim=16, num_heads=2, warmup_steps=10)


@pytest.fixture(scope="module")
def original(tiny_ds):
    return train_model(tiny_ds, FAST)


@pytest.fixture(scope="module")
def request_(tiny_ds):
    return select_forget(tiny_ds, 0.1, FAST.seed)


def trajectory(outcome):
    return [r.digest for r in outcome.epochs]


class TestTraining:
    def test_bitwise_deterministic(self, tiny_ds, original):
        assert train_model(tiny_ds, FAST).equals(original)

    def test_zero_epochs_returns_initialisation(self, tiny_ds):
        a = train_model(tiny_ds, replace(FAST, epochs=0))
        b = train_model(tiny_ds, replace(FAST, epochs=0, lr=0.5))
        assert a.equals(b)

    def test_learnable(self, tiny_ds):
        m = train_model(tiny_ds, TrainConfig(seed=0, epochs=20, warmup_steps=20))
        assert evaluate_split(m, tiny_ds.train, tiny_ds.label_names).f1 >= 0.95

    def test_progress_lines(self, tiny_ds):
        import io
        buf = io.StringIO()
        train_model(tiny_ds, replace(FAST, epochs=1), progress=buf)
        rows = [line.split("\t") for line in buf.getvalue().splitlines()]
        assert all(len(r) == 4 for r in rows)
        assert ("1", "dev", "micro_f1") in {tuple(r[:3]) for r in rows}

    def test_retrain_on_tiny_forget_set_matches_plain_training(self, tiny_ds):
        cfg = replace(FAST, epochs=1)
        empty = UnlearnRequest(frozenset(), 0.0, 0)
        assert unlearn_retrain(tiny_ds, empty, cfg).model.equals(train_model(tiny_ds, cfg))


class TestApproximateMethods:
    def test_finetune_zero_epochs_is_identity(self, tiny_ds, original, request_):
        out = unlearn_finetune(original, tiny_ds, request_, replace(FAST, unlearn_epochs=0))
        assert out.model.equals(original)

    def test_deepcut_gamma_zero_equals_finetune(self, tiny_ds, original, request_):
        ft = unlearn_finetune(original, tiny_ds, request_, FAST)
        dc = unlearn_deepcut(original, tiny_ds, request_, replace(FAST, gamma=0.0))
        assert trajectory(ft) == trajectory(dc)
        assert dc.model.equals(ft.model)

    def test_revgrad_weight_zero_equals_finetune(self, tiny_ds, original, request_):
        ft = unlearn_finetune(original, tiny_ds, request_, FAST)
        rg = unlearn_reverse_gradient(original, tiny_ds, request_, replace(FAST, forget_weight=0.0))
        assert trajectory(ft) == trajectory(rg)
        assert rg.model.equals(ft.model)

    def test_deepcut_deterministic_and_records_losses(self, tiny_ds, original, request_):
        a = unlearn_deepcut(original, tiny_ds, request_, FAST)
        b = unlearn_deepcut(original, tiny_ds, request_, FAST)
        assert trajectory(a) == trajectory(b)
        info = a.losses[0]
        assert abs(info["combined"] - (info["ce_retained"] + info["gamma"] * info["forget_loss"])) < 1e-12
        assert any(i["anchors"] > 0 for i in a.losses)

    def test_deepcut_moves_parameters(self, tiny_ds, original, request_):
        ft = unlearn_finetune(original, tiny_ds, request_, FAST)
        dc = unlearn_deepcut(original, tiny_ds, request_, FAST)
        assert trajectory(ft) != trajectory(dc)

    def test_forget_f1_not_above_original(self, tiny_ds, request_):
        cfg = TrainConfig(seed=0, epochs=20, warmup_steps=20)
        m = train_model(tiny_ds, cfg)
        _, forget = request_.split(tiny_ds.train)
        before = evaluate_split(m, forget, tiny_ds.label_names).f1
        after = evaluate_split(unlearn_deepcut(m, tiny_ds, request_, cfg).model, forget, tiny_ds.label_names).f1
        assert after <= before

    def test_outside_only_forget_set_warns(self, tiny_ds, original, request_, caplog):
        blank = [s if s.id not in request_.forget_ids else
                 Sentence(s.id, s.tokens, ("O",) * len(s), s.token_ids, (0,) * len(s)) for s in tiny_ds.train]
        ds = replace(tiny_ds, train=blank)
        with caplog.at_level(logging.WARNING):
            out = unlearn_deepcut(original, ds, request_, replace(FAST, unlearn_epochs=1))
        assert "no usable forget anchors" in caplog.text
        assert all(i["anchors"] == 0 for i in out.losses)

    def test_timing_excludes_evaluation(self, tiny_ds, original, request_):
        class Slow(Evaluator):
            def __call__(self, model, sentences):
                time.sleep(0.3)
                return super().__call__(model, sentences)

        cfg = replace(FAST, unlearn_epochs=2)
        fast = unlearn_finetune(original, tiny_ds, request_, cfg)
        slow = unlearn_finetune(original, tiny_ds, request_, cfg, evaluator=Slow(tiny_ds.label_names))
        # four slow evaluations add 1.2 s of wall time that must not be counted
        assert slow.seconds < fast.seconds + 0.6
        assert slow.seconds > 0


@pytest.fixture(scope="module")
def ensemble(tiny_ds):
    return sisa_train(tiny_ds, TestSisa.K, FAST)


class TestSisa:
    K = 5

    def test_assignment_balanced_and_total(self, tiny_ds):
        ids = [s.id for s in tiny_ds.train]
        a = shard_assignment(ids, self.K, 0)
        assert set(a) == set(ids)
        sizes = np.bincount(list(a.values()), minlength=self.K)
        assert sizes.max() - sizes.min() <= 1

    def test_assignment_errors(self):
        with pytest.raises(ValueError):
            shard_assignment([1, 2], 3, 0)
        with pytest.raises(ValueError):
            shard_assignment([1, 2], 0, 0)

    def test_single_shard_isolation(self, tiny_ds, ensemble):
        shard2 = ensemble.shard_ids(2)[:5]
        out = sisa_unlearn(ensemble, tiny_ds, UnlearnRequest(frozenset(shard2), 0.0, 0), FAST)
        assert out.retrained_shards == (2,)
        for k in range(self.K):
            same = out.model.members[k].equals(ensemble.members[k])
            assert same == (k != 2)

    def test_spread_forget_retrains_all(self, tiny_ds, ensemble):
        ids = frozenset(ensemble.shard_ids(k)[0] for k in range(self.K))
        out = sisa_unlearn(ensemble, tiny_ds, UnlearnRequest(ids, 0.0, 0), FAST)
        assert out.retrained_shards == tuple(range(self.K))

    def test_exactness(self, tiny_ds, ensemble, request_):
        out = sisa_unlearn(ensemble, tiny_ds, request_, FAST)
        kept = [s.id for s in tiny_ds.train if s.id not in request_.forget_ids]
        oracle = sisa_train(tiny_ds.subset_train(kept), self.K, FAST, assignment=ensemble.assignment)
        assert out.model.equals(oracle)

    def test_k1_equals_plain_training(self, tiny_ds):
        cfg = replace(FAST, epochs=1)
        ens = sisa_train(tiny_ds, 1, cfg)
        assert shard_seed(cfg.seed, 0) == cfg.seed
        assert ens.members[0].equals(train_model(tiny_ds, cfg))

    def test_identical_members_aggregate_to_member(self, tiny_ds, original):
        from deepcut.data import collate
        from deepcut.engines import SisaEnsemble
        ens = SisaEnsemble([original] * 3, {}, [0, 0, 0])
        b = collate(tiny_ds.test[:4])
        np.testing.assert_allclose(ens.predict_proba(b.ids, b.mask), original.predict_proba(b.ids, b.mask),
                                   rtol=1e-14)

    def test_missing_member(self, tiny_ds, original):
        from deepcut.data import collate
        from deepcut.engines import SisaEnsemble
        b = collate(tiny_ds.test[:2])
        with pytest.raises(ValueError):
            SisaEnsemble([original, None], {}, [0, 1]).predict_proba(b.ids, b.mask)


def test_digest_changes_with_params(original):
    p = dict(original.params)
    before = params_digest(p)
    p["cls.b"] = p["cls.b"] + 1.0
    assert params_digest(p) != before
