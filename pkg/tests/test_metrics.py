import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from noniso import oracles
from noniso.data import DataConfig, make_chain_skeleton, make_dataset
from noniso.errors import ValidationError
from noniso.metrics import (
    ade, apd, apde, body_realism, build_mmgt, cmd, delta_apd, evaluate_predictions, fde, frame_velocity,
    mae_angle, mmade, mmfde, validity_curve, zero_velocity_predictions,
)
from noniso.skeleton import Skeleton


def one_bone(length=1.0):
    return Skeleton(["a", "b"], [(0, 1)], [length])


def bone_motion(lengths, direction=(1.0, 0.0, 0.0)):
    """(F, 2, 3) motion whose single bone has the given per-frame lengths."""
    d = np.asarray(direction, dtype=np.float64)
    out = np.zeros((len(lengths), 2, 3))
    out[:, 1] = np.asarray(lengths)[:, None] * d
    return out


# -- hand cases ----------------------------------------------------------------------


def test_ade_fde_hand_case():
    gt = np.zeros((2, 1, 3))
    pred = gt + np.array([1.0, 0.0, 0.0])
    assert ade(pred[None], gt) == 1.0
    assert fde(pred[None], gt) == 1.0


def test_ade_contains_gt_and_duplicates():
    rng = np.random.default_rng(0)
    gt = rng.normal(size=(5, 3, 3))
    preds = rng.normal(size=(4, 5, 3, 3))
    assert ade(np.concatenate([preds, gt[None]]), gt) == 0.0
    wrong = np.repeat(preds[:1], 6, axis=0)
    assert ade(wrong, gt) == ade(preds[:1], gt)
    with pytest.raises(ValidationError):
        ade(preds, gt[:4])


def test_mm_cases():
    rng = np.random.default_rng(1)
    gt = rng.normal(size=(4, 2, 3))
    preds = rng.normal(size=(3, 4, 2, 3))
    assert mmade(preds, gt[None]) == ade(preds, gt)
    assert mmfde(preds, gt[None]) == fde(preds, gt)
    mm = rng.normal(size=(2, 4, 2, 3))
    four = [oracles.seq_dist_loop(p, g) for p in preds[:2] for g in mm]
    assert mmade(preds[:2], mm) == pytest.approx(min(four), abs=1e-12)
    assert mmade(np.concatenate([preds, mm[1:]]), mm) == 0.0


def test_build_mmgt_limits():
    x = np.random.default_rng(0).normal(size=(6, 3, 3))
    assert all(len(i) == 0 for i in build_mmgt(x, 1e-12))
    big = build_mmgt(x, 1e9)
    for j, idx in enumerate(big):
        assert list(idx) == [m for m in range(6) if m != j]
    with pytest.raises(ValidationError):
        build_mmgt(x, 0.0)


def test_apd_cases():
    rng = np.random.default_rng(0)
    p = rng.normal(size=(1, 4, 3, 3))
    assert apd(np.repeat(p, 5, axis=0)) == 0.0
    assert apd(p) == 0.0
    q = rng.normal(size=(4, 3, 3))
    d = oracles.seq_dist_loop(p[0], q)
    assert apd(np.stack([p[0], q])) == pytest.approx(d, abs=1e-14)
    s = rng.normal(size=(4, 4, 3, 3))
    assert apde(s, s[::-1]) == pytest.approx(0.0, abs=1e-14)


def test_cmd_cases():
    rng = np.random.default_rng(0)
    frozen = np.repeat(rng.normal(size=(3, 1, 4, 3)), 6, axis=1)
    assert cmd(frozen, 0.7) == pytest.approx(0.7 * 6 * 5 / 2)
    # constant speed 0.3 per frame for every joint
    F = 5
    steady = np.zeros((2, F, 4, 3))
    steady[..., 0] = 0.3 * np.arange(F)[None, :, None]
    assert cmd(steady, 0.3) == pytest.approx(0.0, abs=1e-14)
    # F = 3, M = [a, b]
    m3 = np.zeros((1, 3, 1, 3))
    m3[0, 1, 0, 0] = 0.2
    m3[0, 2, 0, 0] = 0.2 + 0.5
    a, b = frame_velocity(m3)
    assert (a, b) == pytest.approx((0.2, 0.5))
    assert cmd(m3, 0.4) == pytest.approx(2 * abs(a - 0.4) + abs(b - 0.4))
    with pytest.raises(ValidationError):
        cmd(m3[:, :1], 0.4)


def test_body_realism_hand_cases():
    sk = one_bone(1.0)
    rigid = bone_motion(np.ones(6))[None]
    br = body_realism(rigid, sk)
    assert (br.str_mean, br.jit_mean, br.str_rmse, br.jit_rmse) == (0.0, 0.0, 0.0, 0.0)
    st10 = body_realism(bone_motion(np.full(6, 1.1))[None], sk)
    assert st10.str_mean == pytest.approx(10.0)
    assert st10.jit_mean == pytest.approx(0.0, abs=1e-12)
    alt = body_realism(bone_motion(np.array([1.1, 0.9] * 3))[None], sk)
    assert alt.jit_mean == pytest.approx(20.0)
    assert alt.str_mean == pytest.approx(10.0)


def test_mae_cases():
    sk = one_bone()
    gt = bone_motion(np.ones(3))
    assert mae_angle(gt[None], gt, sk).degrees == 0.0
    perp = bone_motion(np.ones(3), (0.0, 1.0, 0.0))
    assert mae_angle(perp[None], gt, sk).degrees == pytest.approx(90.0)
    c, s = math.cos(math.radians(30)), math.sin(math.radians(30))
    r30 = bone_motion(np.ones(3), (c, s, 0.0))
    assert mae_angle(r30[None], gt, sk).degrees == pytest.approx(30.0)
    collapsed = np.zeros((3, 2, 3))
    res = mae_angle(collapsed[None], gt, sk)
    assert res.degrees == 90.0 and res.zero_length


def test_validity_and_delta_apd():
    sk = one_bone()
    r1 = bone_motion(np.ones(4))
    r2 = bone_motion(np.ones(4), (0.0, 1.0, 0.0))
    stretched = bone_motion(np.full(4, 1.15), (0.0, 0.0, 1.0))
    preds = np.stack([r1, r2, stretched])
    assert validity_curve(preds, [0.10], sk, "stretch")[0] == pytest.approx(2 / 3)
    assert np.all(validity_curve(preds[:2], [0.0, 0.5, 1.0], sk) == 1.0)
    jittery = bone_motion(np.array([1.0, 1.15, 1.0, 1.15]), (0.0, 0.0, 1.0))
    jset = np.stack([r1, r2, jittery])
    d = delta_apd(jset, [0.10, np.inf], sk)
    assert d[0] == pytest.approx(apd(jset[:2]))
    assert d[1] == pytest.approx(apd(jset))
    assert delta_apd(jset, [0.0], sk, "stretch")[0] == pytest.approx(apd(jset[:2]))
    with pytest.raises(ValidationError):
        validity_curve(preds, [0.2, 0.1], sk)


# -- oracle agreement ------------------------------------------------------------------


def random_chain(rng, J):
    return make_chain_skeleton(J, rng.uniform(0.2, 1.0, size=J - 1))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10**6), st.integers(1, 8), st.integers(2, 16), st.integers(2, 7))
def test_kernels_match_loops(seed, N, F, J):
    rng = np.random.default_rng(seed)
    sk = random_chain(rng, J)
    preds = rng.normal(size=(N, F, J, 3))
    gt = rng.normal(size=(F, J, 3))
    mm = rng.normal(size=(int(rng.integers(1, 5)), F, J, 3))
    tol = 1e-10
    assert abs(ade(preds, gt) - oracles.ade_loop(preds, gt)) < tol
    assert abs(fde(preds, gt) - oracles.fde_loop(preds, gt)) < tol
    assert abs(mmade(preds, mm) - oracles.mm_loop(preds, mm)) < tol
    assert abs(mmfde(preds, mm) - oracles.mm_loop(preds, mm, final=True)) < tol
    assert abs(apd(preds) - oracles.apd_loop(preds)) < tol
    assert abs(cmd(preds, 0.3) - oracles.cmd_loop(preds, 0.3)) < tol
    br = body_realism(preds, sk)
    ref = oracles.body_realism_loop(preds, sk.edges, sk.bone_lengths)
    assert np.max(np.abs(np.array([br.str_mean, br.jit_mean, br.str_rmse, br.jit_rmse]) - ref)) < tol
    assert abs(mae_angle(preds, gt, sk).degrees - oracles.mae_loop(preds, gt, sk.edges)) < tol


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10**6))
def test_apd_invariances(seed):
    rng = np.random.default_rng(seed)
    p = rng.normal(size=(5, 4, 3, 3))
    base = apd(p)
    assert apd(p[rng.permutation(5)]) == pytest.approx(base, rel=1e-12)
    assert apd(p + rng.normal(size=(1, 4, 3, 3))) == pytest.approx(base, rel=1e-10)
    assert base > 0


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10**6))
def test_validity_monotone(seed):
    rng = np.random.default_rng(seed)
    sk = random_chain(rng, 4)
    p = rng.normal(size=(6, 5, 4, 3))
    th = np.sort(rng.uniform(0, 3, size=8))
    v = validity_curve(p, th, sk, "jitter")
    assert np.all(np.diff(v) >= 0)


# -- dataset-level evaluation ---------------------------------------------------------


@pytest.fixture(scope="module")
def toy():
    return make_dataset(DataConfig(n_train=10, n_val=10, n_test=24), 5)


def test_gt_copies_evaluate_to_zero(toy):
    split = toy.test
    cfg = DataConfig(noise_std=0.0, n_train=2, n_val=2, n_test=12)
    clean = make_dataset(cfg, 5).test
    preds = np.repeat(clean.future[:, None], 3, axis=1)
    rep = evaluate_predictions(preds, clean, cfg.skeleton(), 0.1)
    assert rep.ade == 0.0 and rep.fde == 0.0 and rep.apd == 0.0
    assert rep.str_mean < 1e-10 and rep.jit_mean < 1e-10
    assert len(split) == 24


def test_zero_velocity_pattern_exact(toy):
    split = toy.test
    zv = zero_velocity_predictions(split.past, 5, split.future.shape[1])
    rep = evaluate_predictions(zv, split, toy.skeleton, 0.1, reference="gt_median")
    assert rep.apd == 0.0
    assert rep.jit_mean == 0.0 and rep.jit_rmse == 0.0
    assert rep.ade > 0
    # frozen predictions: CMD collapses to M-bar F (F-1) / 2
    F = split.future.shape[1]
    assert rep.cmd == pytest.approx(split.mean_velocity * F * (F - 1) / 2)


def test_report_json_sorted_and_reproducible(toy, tmp_path):
    split = toy.test
    zv = zero_velocity_predictions(split.past, 2, split.future.shape[1])
    a = evaluate_predictions(zv, split, toy.skeleton, 0.1).to_json()
    b = evaluate_predictions(zv, split, toy.skeleton, 0.1).to_json()
    assert a == b
    d = json.loads(a)
    assert list(d) == sorted(d)
    rep = evaluate_predictions(zv, split, toy.skeleton, 0.1)
    rep.write_segments_csv(tmp_path / "seg.csv")
    assert len((tmp_path / "seg.csv").read_text().splitlines()) == len(split) + 1
    with pytest.raises(ValidationError):
        evaluate_predictions(zv[:-1], split, toy.skeleton, 0.1)


def test_mmgt_fallback_flag():
    ds = make_dataset(DataConfig(futures_per_past=1, n_train=2, n_val=2, n_test=6), 0)
    zv = zero_velocity_predictions(ds.test.past, 2, ds.test.future.shape[1])
    rep = evaluate_predictions(zv, ds.test, ds.skeleton, 1e-9)
    assert rep.flags["mmgt_fallback_segments"] == 6
    assert rep.mmade == pytest.approx(rep.ade)
