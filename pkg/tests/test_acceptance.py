"""Acceptance criteria 1-9, one verdict line each.

Run alone with ``python tests/test_acceptance.py`` (or ``pytest -s``) to see
the verdict lines; under plain ``pytest -v`` they are echoed as well. The
directional benchmark (criteria 4-6) trains at WNUT16 scale over five seeds
and takes about 20 minutes on one core. Its timing covers all four methods
in the shared run (revgrad included), so the 30 minute bound is checked
conservatively.
"""

import itertools
import math
import sys
import time
from dataclasses import replace

import numpy as np
import pytest

from deepcut.autograd import Tensor
from deepcut.data import (PRESETS, build_vocab_and_encode, generate_synthetic, parse_conll, select_forget,
                          write_conll)
from deepcut.engines import TrainConfig, sisa_train, sisa_unlearn, train_model, unlearn_deepcut, unlearn_finetune
from deepcut.engines import unlearn_reverse_gradient
from deepcut.evaluation import token_micro_f1
from deepcut.objectives import ContrastPool, forget_loss, supcon_loss, token_cross_entropy
from gradcheck import check_case, model_loss_check, primitive_cases
from test_evaluation import confusion_oracle

SEEDS = (0, 1, 2, 3, 4)


@pytest.fixture
def verdict(capsys):
    def report(n: int, ok: bool, detail: str):
        with capsys.disabled():
            print(f"\ncriterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
        assert ok, f"criterion {n}: {detail}"
    return report


def test_criterion_1_gradient_suite(verdict, tiny_ds):
    start = time.perf_counter()
    worst_prim, worst_model = 0.0, 0.0
    for seed in range(20):
        for name, fn, inputs in primitive_cases(seed):
            worst_prim = max(worst_prim, check_case(fn, inputs))
        worst_model = max(worst_model, model_loss_check(tiny_ds, seed, coords=30))
    secs = time.perf_counter() - start
    ok = worst_prim < 1e-4 and worst_model < 1e-4 and secs < 60
    verdict(1, ok, f"20 seeds, max rel err primitives {worst_prim:.2e}, model loss {worst_model:.2e}, "
                   f"{secs:.1f}s")


def test_criterion_2_closed_forms(verdict):
    errs = []
    for n_same in (1, 2, 3, 5):
        labels = np.array([1] * (n_same + 1) + [0, 2])
        n = labels.size
        pool = ContrastPool(Tensor(np.ones((n, 4))), labels, np.array([0]),
                            ((labels == 1) & (np.arange(n) != 0))[None], (labels != 1)[None], 0.1)
        errs.append(abs(forget_loss(pool).item() - math.log(1 + n_same)))
    for labels, a_size in (([0, 0, 1, 1], 3), ([0, 0, 0, 1, 1, 2, 2], 6)):
        errs.append(abs(supcon_loss(Tensor(np.ones((len(labels), 3))), labels, 0.1).item() - math.log(a_size)))
    for c in (2, 5, 11):
        ce = token_cross_entropy(Tensor(np.zeros((3, 4, c))), np.zeros((3, 4), int), np.ones((3, 4), bool))
        errs.append(abs(ce.item() - math.log(c)))
    worst = max(errs)
    verdict(2, worst <= 1e-12, f"max deviation from ln closed forms {worst:.1e}")


def test_criterion_3_sisa_exactness(verdict):
    start = time.perf_counter()
    ds = build_vocab_and_encode(generate_synthetic(PRESETS["tiny"], 0))
    cfg = TrainConfig(seed=0)
    request = select_forget(ds, 0.05, 0)
    ensemble = sisa_train(ds, 5, cfg)
    out = sisa_unlearn(ensemble, ds, request, cfg)
    kept = [s.id for s in ds.train if s.id not in request.forget_ids]
    oracle = sisa_train(ds.subset_train(kept), 5, cfg, assignment=ensemble.assignment)
    secs = time.perf_counter() - start
    ok = len(ds.train) == 200 and len(request.forget_ids) == 10 and out.model.equals(oracle) and secs < 300
    verdict(3, ok, f"N={len(ds.train)}, |D_f|={len(request.forget_ids)}, shards retrained "
                   f"{list(out.retrained_shards)}, bitwise equal={out.model.equals(oracle)}, {secs:.0f}s")


@pytest.mark.slow
def test_criterion_4_forget_ordering(verdict, wnut_bench):
    result, secs, out = wnut_bench
    rt, ft, dc = (result.cell(m, 0.10) for m in ("retrain", "finetune", "deepcut"))
    f = {m.method: 100 * m.forget.f1 for m in (rt, ft, dc)}
    gap = f["finetune"] - f["deepcut"]
    retained_gap = 100 * abs(dc.retained.f1 - rt.retained.f1)
    ok = (f["finetune"] > f["retrain"] >= f["deepcut"] and gap >= 10 and retained_gap <= 5
          and not result.failures and secs < 1800)
    verdict(4, ok, f"forget F1 finetune {f['finetune']:.2f} > retrain {f['retrain']:.2f} >= deepcut "
                   f"{f['deepcut']:.2f}, gap {gap:.2f}; retained deepcut {100 * dc.retained.f1:.2f} vs "
                   f"retrain {100 * rt.retained.f1:.2f}; {secs / 60:.1f} min; reports in {out}")


@pytest.mark.slow
def test_criterion_5_total_variation(verdict, wnut_bench):
    result, _, _ = wnut_bench
    dc, ft = result.cell("deepcut", 0.10), result.cell("finetune", 0.10)
    verdict(5, dc.tv < ft.tv, f"mean TV to retrained model: deepcut {dc.tv:.4f}, finetune {ft.tv:.4f}")


@pytest.mark.slow
def test_criterion_6_wall_clock(verdict, wnut_bench):
    result, _, _ = wnut_bench
    pairs = [(result.cell("deepcut", 0.10, s).seconds, result.cell("retrain", 0.10, s).seconds) for s in SEEDS]
    ok = all(d < r for d, r in pairs)
    detail = ", ".join(f"seed {s}: {d:.1f}s vs {r:.1f}s" for s, (d, r) in zip(SEEDS, pairs))
    verdict(6, ok, f"deepcut vs retrain unlearning time, {detail}")


def test_criterion_7_ablation_identities(verdict):
    ds = build_vocab_and_encode(generate_synthetic(PRESETS["tiny"], 1))
    cfg = TrainConfig(seed=2, epochs=4, unlearn_epochs=3)
    original = train_model(ds, cfg)
    request = select_forget(ds, 0.1, 2)
    ft = unlearn_finetune(original, ds, request, cfg)
    dc = unlearn_deepcut(original, ds, request, replace(cfg, gamma=0.0))
    rg = unlearn_reverse_gradient(original, ds, request, replace(cfg, forget_weight=0.0))
    digests = [r.digest for r in ft.epochs]
    same_dc = digests == [r.digest for r in dc.epochs] and dc.model.equals(ft.model)
    same_rg = digests == [r.digest for r in rg.epochs] and rg.model.equals(ft.model)
    verdict(7, same_dc and same_rg, f"gamma=0 deepcut == finetune: {same_dc}; "
                                    f"weight-0 revgrad == finetune: {same_rg} ({len(digests)} epochs)")


def test_criterion_8_data_layer(verdict, tmp_path):
    ds = generate_synthetic(PRESETS["wnut16-scale"], 0)
    checks = {}
    path = tmp_path / "train.conll"
    write_conll(ds.train, path)
    back = parse_conll(path)
    checks["round trip"] = [(s.tokens, s.tags) for s in back] == [(s.tokens, s.tags) for s in ds.train]
    enc = build_vocab_and_encode(ds)
    sizes_ok, partition_ok = True, True
    for frac, seed in itertools.product((0.01, 0.05, 0.10, 0.37), (0, 1, 2)):
        req = select_forget(enc, frac, seed)
        sizes_ok &= len(req.forget_ids) == math.floor(frac * len(enc.train))
        kept, gone = req.split(enc.train)
        partition_ok &= (len(kept) + len(gone) == len(enc.train)
                         and not {s.id for s in kept} & {s.id for s in gone})
    checks["floor sizes"] = sizes_ok
    checks["partition"] = partition_ok
    checks["|D_f|=23 at 1%"] = len(select_forget(enc, 0.01, 0).forget_ids) == 23
    again = generate_synthetic(PRESETS["wnut16-scale"], 0)
    checks["regeneration"] = (again.train, again.dev, again.test) == (ds.train, ds.dev, ds.test)
    verdict(8, all(checks.values()), ", ".join(f"{k}: {v}" for k, v in checks.items()))


def test_criterion_9_metric_oracle(verdict):
    worst = 0.0
    cases = list(itertools.product(range(3), repeat=4))
    for gold in cases:
        for pred in cases:
            worst = max(worst, abs(token_micro_f1(np.array(pred), np.array(gold)).f1
                                   - confusion_oracle(pred, gold, 3)))
    verdict(9, worst == 0.0, f"{len(cases) ** 2} prediction/gold pairs, max deviation {worst}")


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-v", "-s"]))
