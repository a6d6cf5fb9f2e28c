"""Acceptance criteria, one test per criterion.

Each test records a PASS/FAIL line (shown in the terminal summary) before
asserting.  Criteria 6 and 7 share one set of training runs on the toy task.
"""
from __future__ import annotations

import math
import time
from pathlib import Path

import numpy as np
import pytest
import torch

from enaet import cli
from enaet import transforms as T
from enaet.losses import consistency_loss, sharpen
from enaet.trainer import ema_update, mixmatch_step, new_state, train, train_step
from enaet.transforms import Kind
from support import batch, gradient_check, params_vector, tiny_config, tiny_split

TOY_CFG = Path(__file__).resolve().parents[1] / "configs" / "toy.cfg"
N_SAMPLES = 1000
SEEDS = (0, 1, 2, 3, 4)


# -- 1. transform algebra --------------------------------------------------------


def _algebra_failures(rng) -> list[str]:
    fails = []

    def check(ok, what):
        if not ok:
            fails.append(what)

    for kind in Kind:
        for _ in range(N_SAMPLES):
            t = T.sample_spatial(kind, rng)
            m = t.matrix
            # hierarchy
            check(m[2, 2] == 1.0, f"{kind.name}: h33 != 1")
            if kind != Kind.PROJECTIVE:
                check(T.is_affine(m), f"{kind.name}: not affine")
            if kind >= Kind.SIMILARITY:
                check(T.is_similarity(m), f"{kind.name}: not similarity")
            if kind == Kind.EUCLIDEAN:
                check(T.is_euclidean(m), "euclidean: not rigid")
                p, q = rng.uniform(-1, 1, (2, 2))
                a, b = T.apply_homography(m, np.array([p, q]))
                check(abs(np.linalg.norm(a - b) - np.linalg.norm(p - q)) < 1e-9, "euclidean: isometry")
            if kind != Kind.PROJECTIVE:
                p, d, q = rng.uniform(-1, 1, (3, 2))
                img = T.apply_homography(m, np.array([p, p + d, q, q + 2 * d]))
                v1, v2 = img[1] - img[0], img[3] - img[2]
                check(abs(v1[0] * v2[1] - v1[1] * v2[0]) < 1e-9, f"{kind.name}: parallelism")
            p, d = rng.uniform(-1, 1, 2), rng.uniform(-0.5, 0.5, 2)
            pts = T.apply_homography(m, np.array([p, p + d, p + 0.3 * d]))
            u, v = pts[1] - pts[0], pts[2] - pts[0]
            check(abs(u[0] * v[1] - u[1] * v[0]) < 1e-8, f"{kind.name}: collinearity")
            # compose / invert
            c = T.compose(t, T.invert(t))
            check(np.allclose(c.matrix, np.eye(3), atol=1e-9, rtol=0), f"{kind.name}: t o t^-1")
            s = T.sample_spatial(kind, rng)
            ts = T.compose(t, s)
            in_family = {
                Kind.PROJECTIVE: lambda mm: abs(np.linalg.det(mm)) > 1e-12,
                Kind.AFFINE: T.is_affine,
                Kind.SIMILARITY: T.is_similarity,
                Kind.EUCLIDEAN: T.is_euclidean,
            }[kind]
            check(in_family(ts.matrix) and ts.kind >= kind, f"{kind.name}: closure")
            if kind == Kind.EUCLIDEAN:
                r = ts.matrix[:2, :2]
                check(np.allclose(r @ r.T, np.eye(2), atol=1e-9) and ts.kind == Kind.EUCLIDEAN, "euclidean closure")
            # target round trip
            v = T.target_vector(t)
            check(np.all(np.abs(v) <= 1.0), f"{kind.name}: target range")
            back = T.spatial_from_target(kind, v)
            check(np.allclose(back.params, t.params, atol=1e-9, rtol=0), f"{kind.name}: target round trip")
    for _ in range(N_SAMPLES):
        c = T.sample_ccbs(rng)
        v = T.target_vector(c)
        ok = np.all(np.abs(v) <= 1) and np.allclose(T.photometric_from_target(v).params, c.params, atol=1e-9, rtol=0)
        check(ok, "ccbs: target round trip")
    return fails


def test_criterion_1_transform_algebra(criterion):
    t0 = time.perf_counter()
    fails = _algebra_failures(np.random.default_rng(2024))
    elapsed = time.perf_counter() - t0
    ok = not fails and elapsed < 60
    criterion(1, ok, f"{N_SAMPLES} samples/family, {len(fails)} violations, {elapsed:.1f}s (limit 60s)")
    assert not fails, fails[:5]
    assert elapsed < 60


# -- 2. warp correctness ------------------------------------------------------------


def test_criterion_2_warp(criterion):
    t0 = time.perf_counter()
    rng = np.random.default_rng(7)
    img = rng.random((31, 37, 3))
    identity_exact = bool(np.array_equal(T.warp(img, T.identity()), img))
    n = 48
    gx, gy = T.pixel_grid(n, n)
    smooth = np.stack([0.5 + 0.4 * np.sin(a * gx + b * gy + c) for a, b, c in rng.uniform(1, 3, (3, 3))], -1)
    crop = slice(n // 4, 3 * n // 4)
    maes = []
    for i in range(50):
        t = T.sample_spatial(list(Kind)[i % 4], rng)
        back = T.warp(T.warp(smooth, t), T.invert(t))
        maes.append(float(np.abs(back[crop, crop] - smooth[crop, crop]).mean()))
    elapsed = time.perf_counter() - t0
    ok = identity_exact and max(maes) < 0.05 and elapsed < 60
    criterion(2, ok, f"identity exact={identity_exact}, max central MAE {max(maes):.4f} (<0.05), {elapsed:.1f}s")
    assert identity_exact and max(maes) < 0.05 and elapsed < 60


# -- 3. loss analytics --------------------------------------------------------------


def test_criterion_3_loss_analytics(criterion):
    d = torch.float64
    checks = {
        "kl_ln2": (float(consistency_loss(torch.tensor([[1.0, 0.0]], dtype=d), torch.tensor([[0.5, 0.5]], dtype=d))), math.log(2)),
        "kl_0.1438": (
            float(consistency_loss(torch.tensor([[0.5, 0.5]], dtype=d), torch.tensor([[0.25, 0.75]], dtype=d))),
            0.5 * math.log(2) + 0.5 * math.log(2 / 3),
        ),
    }
    sh = sharpen(torch.tensor([0.5, 0.25, 0.25], dtype=d), 0.5).tolist()
    for i, want in enumerate((2 / 3, 1 / 6, 1 / 6)):
        checks[f"sharpen[{i}]"] = (sh[i], want)
    teacher, student = torch.nn.Linear(1, 1, dtype=d), torch.nn.Linear(1, 1, dtype=d)
    with torch.no_grad():
        for p in teacher.parameters():
            p.fill_(0.0)
        for p in student.parameters():
            p.fill_(1.0)
    ema_update(teacher, student, 0.999)
    checks["ema"] = (float(teacher.weight.detach()[0, 0]), 0.001)
    errs = {k: abs(a - b) for k, (a, b) in checks.items()}
    worst = max(errs.values())
    assert abs(checks["kl_0.1438"][1] - 0.1438) < 1e-4
    criterion(3, worst < 1e-9, f"{len(checks)} analytic values, max abs error {worst:.2e} (<1e-9)")
    assert worst < 1e-9, errs


# -- 4. gradient check ----------------------------------------------------------------


def test_criterion_4_gradient_check(criterion):
    t0 = time.perf_counter()
    worst, n_params = gradient_check(n_coords=50)
    elapsed = time.perf_counter() - t0
    ok = worst < 1e-4 and n_params <= 2000 and elapsed < 120
    criterion(4, ok, f"{n_params} params, 50 coords, max rel error {worst:.2e} (<1e-4), {elapsed:.1f}s")
    assert n_params <= 2000 and worst < 1e-4 and elapsed < 120


# -- 5. zero-weight equivalence ---------------------------------------------------------


def test_criterion_5_zero_weight_equivalence(criterion):
    split = tiny_split()
    rng = np.random.default_rng(0)
    worst = 0.0
    for skip in (True, False):
        cfg = tiny_config(lambda_k=(0.0,) * 5, gamma=0.0, skip_inactive=skip, ramp_steps=10)
        a, b = new_state(cfg, split), new_state(cfg, split)
        for step in range(50):
            off = int(rng.integers(0, len(split.labeled) - 4))
            x, y, u = batch(split, 4, offset=off)
            train_step(a, x, y, u, cfg, split.num_classes, 50)
            mixmatch_step(b, x, y, u, cfg, split.num_classes, 50)
        for ma, mb in ((a.student, b.student), (a.teacher, b.teacher)):
            worst = max(worst, float(np.abs(params_vector(ma) - params_vector(mb)).max()))
    criterion(5, worst <= 1e-10, f"50 steps, max parameter difference {worst:.2e} (<=1e-10)")
    assert worst <= 1e-10


# -- 6 & 7. toy task ------------------------------------------------------------------------

VARIANTS = {
    "full": {},
    "remove_cl": {"no_cl": True},
    "remove_aet": {"no_aet": True},
    "ssl_only": {"ssl_only": True},
}


@pytest.fixture(scope="module")
def toy_runs():
    """Teacher error (mean of the last-K evaluations) per variant and seed."""
    base = cli.resolve_spec(_Args(config=TOY_CFG), "toy")
    out = {}
    for name, switches in VARIANTS.items():
        spec = cli.ExperimentSpec(base.name, base.train, base.data, list(SEEDS), dataset=None, **switches)
        errors, t0 = [], time.perf_counter()
        for seed in SEEDS:
            res = train(spec.train_config(seed), cli.build_split(spec, seed))
            errors.append(res.final_error)
        out[name] = (np.array(errors), time.perf_counter() - t0)
    return out


class _Args:
    def __init__(self, **kw):
        self.__dict__.update(kw)

    def __getattr__(self, name):
        return None


@pytest.mark.slow
def test_criterion_6_toy_task(criterion, toy_runs):
    errors, elapsed = toy_runs["full"]
    mean = float(errors.mean())
    ok = mean <= 0.15 and elapsed < 600
    per_seed = ", ".join(f"{e:.3f}" for e in errors)
    criterion(6, ok, f"full EnAET teacher error {mean:.4f} (<=0.15) over 5 seeds [{per_seed}], {elapsed:.0f}s (<600s)")
    assert mean <= 0.15
    assert elapsed < 600


@pytest.mark.slow
def test_criterion_7_ablation_direction(criterion, toy_runs):
    m = {k: float(v[0].mean()) for k, v in toy_runs.items()}
    full = toy_runs["full"][0]
    sem = float(full.std(ddof=1) / math.sqrt(len(full)))
    ordering = m["full"] <= m["remove_cl"] <= m["remove_aet"]
    margin = m["ssl_only"] - m["full"]
    ok = ordering and margin > sem
    detail = ", ".join(f"{k} {v:.4f}" for k, v in m.items())
    criterion(7, ok, f"{detail}; ordering={ordering}, margin vs SSL-only {margin:.4f} vs SE {sem:.4f}")
    assert ordering, m
    assert margin > sem, (margin, sem)


# -- 8. reproducibility ---------------------------------------------------------------------


def _records(path):
    import json

    recs = []
    for line in path.read_text().splitlines():
        r = json.loads(line)
        r.pop("wall_time")
        recs.append(r)
    return recs


def test_criterion_8_reproducibility(criterion, tmp_path):
    torch.set_num_threads(1)
    split = tiny_split()
    cfg = tiny_config(epochs=4, steps_per_epoch=3)
    train(cfg, split, out_dir=tmp_path / "a")
    full = train(cfg, split, out_dir=tmp_path / "b")
    streams_equal = all(
        _records(tmp_path / "a" / f) == _records(tmp_path / "b" / f) for f in ("metrics.jsonl", "evals.jsonl")
    )
    train(cfg, split, out_dir=tmp_path / "c", stop_after_epoch=2)
    resumed = train(cfg, split, out_dir=tmp_path / "c", resume_from=tmp_path / "c" / "ckpt_epoch2.zip")
    same_params = np.array_equal(params_vector(full.state.net), params_vector(resumed.state.net)) and np.array_equal(
        params_vector(full.state.teacher), params_vector(resumed.state.teacher)
    )
    resumed_stream = _records(tmp_path / "c" / "metrics.jsonl") == _records(tmp_path / "b" / "metrics.jsonl")
    ok = streams_equal and same_params and resumed_stream
    criterion(8, ok, f"metrics streams identical={streams_equal}, resume params bit-identical={same_params}, "
              f"resumed stream identical={resumed_stream}")
    assert ok
