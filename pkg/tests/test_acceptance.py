"""Acceptance criteria, one test each; every test prints a PASS/FAIL line.

Run ``pytest tests/test_acceptance.py -v -s`` to see the lines inline; they are
also repeated in the terminal summary.
"""

import dataclasses
import time

import numpy as np
import pytest

from vmcnet import VMCNet, audit_parameters, fuse_scores, roi_align, train_toy, vlm_score
from vmcnet.autodiff import Tensor
from vmcnet.cli import main
from vmcnet.cnn import CnnBranch, MultiScaleTokens
from vmcnet.config import RunConfig, toy_config
from vmcnet.params import ParameterStore
from vmcnet.roi import pooled
from vmcnet.suites import COMPOSITE_CHECKS, OP_CHECKS, run_check, run_suite
from vmcnet.vmc import VmcModule, msda

from acceptance_log import record
from oracles import dense_roi_oracle, msda_degenerate_oracle


def rand_image(size, seed=0):
    return np.random.default_rng(seed).standard_normal((1, size, size, 3))


def ablation_probe(cfg, size):
    """Max abs change of each mode's pyramid when every ``vit.*`` tensor is redrawn."""
    model = VMCNet(cfg)
    img = rand_image(size, cfg.seed + 1)
    modes = ("cnn_only", "fm_star", "full")
    before = {m: [l.data.copy() for l in model.forward(img, mode=m).levels] for m in modes}
    model.store.rerandomize("vit.", cfg.seed + 1000)
    after = {m: [l.data for l in model.forward(img, mode=m).levels] for m in modes}
    identical = {m: all(a.tobytes() == b.tobytes() for a, b in zip(before[m], after[m])) for m in modes}
    delta = {m: max(float(np.abs(a - b).max()) for a, b in zip(before[m], after[m])) for m in modes}
    return identical, delta


def ablation_ok(identical, delta):
    return identical["cnn_only"] and identical["fm_star"] and delta["full"] > 1e-6


def extents_ok(cfg, sizes=(32, 64, 96)):
    model = VMCNet(cfg)
    for s in sizes:
        ext = model.forward(rand_image(s)).extents()
        if ext != [(s // r, s // r) for r in (4, 8, 16, 32)]:
            return False, f"{s}: {ext}"
    return True, ""


# ---------------------------------------------------------------- 1


def test_criterion_01_gradcheck_suite():
    t0 = time.perf_counter()
    results = run_suite(seeds=range(10), end_to_end_seeds=range(2))
    elapsed = time.perf_counter() - t0
    failed = sorted({r.name for r in results if not r.passed})
    seeds_per = {n: sum(r.name == n for r in results) for n in list(OP_CHECKS) + list(COMPOSITE_CHECKS)}
    covered = all(c >= 10 for n, c in seeds_per.items() if n != "end_to_end")
    worst_op = max(r.report.max_rel for r in results if r.name in OP_CHECKS)
    worst_comp = max(r.report.max_rel for r in results if r.name in COMPOSITE_CHECKS)
    ok = not failed and covered and elapsed < 60
    record(1, "gradcheck suite", ok,
           f"{len(results)} checks, ops max rel {worst_op:.1e}, composites {worst_comp:.1e}, {elapsed:.1f}s"
           + (f", failed {failed}" if failed else ""))
    assert not failed
    assert covered
    assert elapsed < 60


# ---------------------------------------------------------------- 2


def test_criterion_02_freeze_audit():
    cfg = RunConfig(seed=0).validate()
    model = VMCNet(cfg)
    snap = model.store.snapshot()
    train_toy(cfg, steps=5, model=model)
    changed = model.store.diff(snap)
    vit_moved = [n for n in changed if n.startswith("vit.")]
    each_moved = {p: any(n.startswith(p) for n in changed) for p in ("cnn.", "vmc.", "assembly.")}
    frozen_rep = audit_parameters(model.store)

    tcfg = RunConfig(seed=0).validate()
    tcfg.vit.trainable = True
    trainable_rep = audit_parameters(VMCNet(tcfg).store, trainable_vit=True)
    more = trainable_rep.trainable_total > frozen_rep.trainable_total
    ok = not vit_moved and all(each_moved.values()) and more
    record(2, "freeze audit", ok,
           f"vit changed {len(vit_moved)}, trainable {frozen_rep.trainable_total} -> {trainable_rep.trainable_total} with ViT unfrozen")
    assert not vit_moved
    assert all(each_moved.values()), each_moved
    assert more


# ---------------------------------------------------------------- 3


def test_criterion_03_structural_ablation():
    t0 = time.perf_counter()
    identical, delta = ablation_probe(RunConfig(seed=0).validate(), 64)
    elapsed = time.perf_counter() - t0
    ok = ablation_ok(identical, delta) and elapsed < 10
    record(3, "structural ablation", ok,
           f"cnn_only same={identical['cnn_only']}, fm_star same={identical['fm_star']}, "
           f"full max diff {delta['full']:.2e}, {elapsed:.1f}s")
    assert identical["cnn_only"] and identical["fm_star"]
    assert delta["full"] > 1e-6
    assert elapsed < 10


# ---------------------------------------------------------------- 4


def test_criterion_04_msda_oracle():
    cfg = RunConfig(seed=0).validate()
    d = cfg.cnn.dim
    rng = np.random.default_rng(44)
    worst = 0.0
    for trial in range(6):
        store = ParameterStore(trial)
        m = VmcModule(cfg.vmc, d, cfg.vit.embed_dim, len(cfg.vit.tap_layers), store)
        p = m.params("vmc.group1.fm1.msda.")
        p["value.w"].data[...] = np.eye(d)
        p["out.w"].data[...] = np.eye(d)
        for k in ("value.b", "out.b", "offset.w", "offset.b", "attn.w", "attn.b"):
            p[k].data[...] = 0
        h, w = (int(v) for v in rng.integers(1, 4, size=2) * 32)
        shapes = [(h // r, w // r) for r in (8, 16, 32)]
        x = rng.standard_normal((1, sum(a * b for a, b in shapes), d))
        tok = MultiScaleTokens(Tensor(x), shapes)
        got = msda(tok, p, cfg.vmc.heads, cfg.vmc.points).data.data[0]
        want = msda_degenerate_oracle([u.data[0] for u in tok.unflatten()])
        worst = max(worst, float(np.abs(got - want).max()))
    ok = worst <= 1e-6
    record(4, "MSDA degenerate oracle", ok, f"6 pyramids, max abs err {worst:.1e}")
    assert ok


# ---------------------------------------------------------------- 5


def test_criterion_05_shapes():
    cfg = RunConfig(seed=0).validate()
    ext_ok, why = extents_ok(cfg)
    cnn = CnnBranch(cfg.cnn, ParameterStore(0))
    _, cm = cnn.forward(Tensor(rand_image(64)))
    tok_ok = cm.sizes == [64, 16, 4] and cm.offsets == [0, 64, 80] and cm.data.shape[1] == 84
    ok = ext_ok and tok_ok
    record(5, "shape suite", ok, f"extents {'ok' if ext_ok else why}; 64x64 sizes {cm.sizes} offsets {cm.offsets}")
    assert ext_ok, why
    assert tok_ok


# ---------------------------------------------------------------- 6


def test_criterion_06_toy_overfit():
    cfg = RunConfig(seed=0).validate()
    t0 = time.perf_counter()
    _, losses = train_toy(cfg)
    elapsed = time.perf_counter() - t0
    ratio = losses[-1] / losses[0]
    ok = len(losses) == 200 and ratio <= 0.1 and elapsed < 120
    record(6, "toy overfit", ok, f"200 steps, final/initial {ratio:.3f}, {elapsed:.1f}s")
    assert len(losses) == 200
    assert ratio <= 0.1
    assert elapsed < 120


# ---------------------------------------------------------------- 7


def test_criterion_07_score_fusion():
    rng = np.random.default_rng(7)
    sp, sv = rng.uniform(size=(8, 5)), rng.uniform(size=(8, 5))
    endpoints = np.array_equal(fuse_scores(sp, sv, 1.0), sp) and np.array_equal(fuse_scores(sp, sv, 0.0), sv)
    example = abs(fuse_scores([[0.8]], [[0.2]], 0.5)[0, 0] - 0.4) < 1e-12
    rows = vlm_score(rng.standard_normal((20, 16)), rng.standard_normal((9, 16)), beta=50.0).sum(axis=1)
    rows_ok = bool(np.all(np.abs(rows - 1.0) <= 1e-6))
    bounds_ok = True
    for _ in range(1000):
        shape = tuple(rng.integers(1, 8, size=2))
        a, b = rng.uniform(size=shape), rng.uniform(size=shape)
        a[rng.uniform(size=shape) < 0.05] = 0.0
        b[rng.uniform(size=shape) < 0.05] = 1.0
        s = fuse_scores(a, b, float(rng.uniform()))
        bounds_ok &= bool(np.all(np.minimum(a, b) <= s) and np.all(s <= np.maximum(a, b)))
    ok = endpoints and example and rows_ok and bounds_ok
    record(7, "score fusion", ok,
           f"endpoints={endpoints}, 0.8/0.2/0.5->0.4={example}, rows sum={rows_ok}, bounds on 1000 grids={bounds_ok}")
    assert endpoints and example and rows_ok and bounds_ok


# ---------------------------------------------------------------- 8


def test_criterion_08_roi_align():
    const_ok = all(
        np.all(roi_align(np.full((7, 9, 4), v), [[0.0, 0.0, 1.0, 1.0]]) == v) for v in (0.0, 1.0, -3.3, 0.1 + 0.2)
    )
    rng = np.random.default_rng(8)
    worst = 0.0
    for trial in range(4):
        h, w, c = 10 + trial, 12 - trial, 3
        ys, xs = np.meshgrid((np.arange(h) + 0.5) / h, (np.arange(w) + 0.5) / w, indexing="ij")
        coef = rng.uniform(0.5, 2.0, size=(c, 3))
        f = np.stack([np.sin(a * xs + b) * np.cos(g * ys) for a, b, g in coef], axis=-1)
        for _ in range(3):
            x0, y0 = rng.uniform(0.05, 0.5, size=2)
            box = [x0, y0, x0 + rng.uniform(0.1, 0.45), y0 + rng.uniform(0.1, 0.45)]
            got = pooled(roi_align(f, [box], out_size=(2, 2)))[0]
            worst = max(worst, float(np.abs(got - dense_roi_oracle(f, box, 100)).max()))
    ok = const_ok and worst <= 2e-2
    record(8, "RoIAlign oracle", ok, f"constant exact={const_ok}, dense oracle max err {worst:.1e} over 12 boxes")
    assert const_ok
    assert worst <= 2e-2


# ---------------------------------------------------------------- 9


def test_criterion_09_determinism(tmp_path):
    cfg_path = tmp_path / "run.json"
    RunConfig(seed=5).validate().dump(str(cfg_path))
    same = {}
    for kind, argv in (
        ("forward", ["forward", "--config", str(cfg_path), "--full-depth"]),
        ("train-toy", ["train-toy", "--config", str(cfg_path), "--steps", "20", "--min-reduction", "0"]),
    ):
        outs = []
        for run in range(2):
            out = tmp_path / f"{kind}.{run}"
            assert main(argv + ["--out", str(out)]) == 0
            outs.append(out.read_bytes())
        same[kind] = outs[0] == outs[1] and len(outs[0]) > 0
    ok = all(same.values())
    record(9, "determinism", ok, ", ".join(f"{k} byte-identical={v}" for k, v in same.items()))
    assert ok


# ---------------------------------------------------------------- 10


def _variants():
    out = []
    for g, b in [(1, 2), (1, 3), (1, 4), (2, 3), (3, 1)]:
        cfg = toy_config(0)
        cfg.vmc = dataclasses.replace(cfg.vmc, num_groups=g, blocks_per_group=b)
        out.append((f"layout {g}x{b}", cfg, ("vmc_forward",)))
    for n in (0, 1, 2):
        cfg = toy_config(0)
        cfg.cnn = dataclasses.replace(cfg.cnn, mrfp_count=n)
        out.append((f"N_MRFP={n}", cfg, ("cnn_chain", "mrfp", "vmc_forward")))
    for taps in [(4, 6, 8, 12), (1, 5, 7), (2,), (1, 3, 5, 7, 9, 11)]:
        cfg = toy_config(0)
        cfg.vit = dataclasses.replace(cfg.vit, depth=12, tap_layers=taps)
        out.append((f"taps {set(taps)}", cfg, ("vmc_forward",)))
    return out


def test_criterion_10_config_parity():
    failures = []
    t0 = time.perf_counter()
    variants = _variants()
    for label, cfg, checks in variants:
        cfg.validate()
        ext_ok, why = extents_ok(cfg)
        if not ext_ok:
            failures.append(f"{label}: extents {why}")
        identical, delta = ablation_probe(cfg, 32)
        if not ablation_ok(identical, delta):
            failures.append(f"{label}: ablation {identical} full diff {delta['full']:.1e}")
        for name in checks:
            for seed in range(2):
                res = run_check(name, seed, cfg=cfg)
                if not res.passed:
                    failures.append(f"{label}: {res.line()}")
    ok = not failures
    record(10, "config parity", ok,
           f"{len(variants)} variants (layouts, N_MRFP, tap sets) x shapes/ablation/gradcheck, "
           f"{time.perf_counter() - t0:.1f}s" + (f"; {failures}" if failures else ""))
    assert ok, failures
