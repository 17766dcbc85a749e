"""Acceptance criteria, one test (and one PASS/FAIL line) per criterion.

Run with ``pytest tests/test_acceptance.py -v`` or ``python tests/test_acceptance.py``.
Criteria 6 and 7 are long (roughly 15 and 8 minutes on one core).
"""

from __future__ import annotations

import math
import sys
import time
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from gradcheck import check_unary, numeric_grad, rel_error  # noqa: E402
from immoco.autodiff import (BatchNormState, Tensor, avg_pool2d, batch_norm, concat, conv2d, div,  # noqa: E402
                             exp, fft2_centered, grid_sample_bilinear, identity_grid, log, matmul, mean,
                             power, relu, reshape, sigmoid, sqrt, square, stack, tabs, tanh, transpose,
                             tsum, upsample2x, where)
from immoco.cli import main as cli_main, make_instance  # noqa: E402
from immoco.detection import KldNet, TrainConfig, score_detector, train_kldnet  # noqa: E402
from immoco.groups import MovementGroups, group_movements, groups_from_schedule  # noqa: E402
from immoco.inr import HashGridConfig, HashGridEncoding  # noqa: E402
from immoco.metrics import evaluate, haarpsi, psnr, ssim  # noqa: E402
from immoco.moco import MocoConfig, gradient_entropy, guided_forward, lambda_schedule, run_moco  # noqa: E402
from immoco.physics import (ComplexImage, KSpaceData, MotionScenario, RigidMotion, SamplingSchedule,  # noqa: E402
                            fft_image, forward_model, generate_phantom, simulate_motion)

LINES: list[str] = []


def report(cid: int, ok: bool, detail: str) -> None:
    line = f"[{'PASS' if ok else 'FAIL'}] C{cid}: {detail}"
    LINES.append(line)
    print(line, flush=True)
    assert ok, line


def dft_oracle(z: np.ndarray) -> np.ndarray:
    """Centered orthonormal DFT from the index formula (phase matrices, no FFT)."""
    h, w = z.shape
    u, v = np.arange(h) - h // 2, np.arange(w) - w // 2
    eh = np.exp(-2j * np.pi * np.outer(u, u) / h)
    ew = np.exp(-2j * np.pi * np.outer(v, v) / w)
    return eh @ z @ ew.T / math.sqrt(h * w)


def as_channels(z):
    return np.stack([z.real, z.imag])


# ---- 1 -----------------------------------------------------------------------

def test_c1_fft_matches_bruteforce_dft():
    rng = np.random.default_rng(1)
    start = time.perf_counter()
    worst = 0.0
    for h in range(1, 17):
        for w in range(1, 17):
            z = rng.standard_normal((h, w)) + 1j * rng.standard_normal((h, w))
            out = fft2_centered(Tensor(as_channels(z))).data
            worst = max(worst, float(np.max(np.abs(out[0] + 1j * out[1] - dft_oracle(z)))))
    elapsed = time.perf_counter() - start
    report(1, worst < 1e-10 and elapsed < 1.0,
           f"max |fft - DFT| = {worst:.2e} over all sizes up to 16x16, {elapsed:.2f} s")


# ---- 2 -----------------------------------------------------------------------

def _primitive_errors(rng) -> dict[str, float]:
    def shape():
        return int(rng.integers(8, 17)), int(rng.integers(8, 17))

    h, w = shape()
    x = rng.standard_normal((h, w))
    pos = rng.uniform(0.5, 2.0, (h, w))
    other = rng.standard_normal((h, w))
    errs = {
        "add": check_unary(lambda t: t + Tensor(other[:1]), x),
        "sub": check_unary(lambda t: Tensor(other) - t, x),
        "mul": check_unary(lambda t: t * Tensor(other), x),
        "div": check_unary(lambda t: div(Tensor(other), t), pos),
        "neg": check_unary(lambda t: -t, x),
        "exp": check_unary(exp, x * 0.5),
        "log": check_unary(log, pos),
        "sqrt": check_unary(sqrt, pos),
        "abs": check_unary(tabs, x + np.sign(x) * 0.1),
        "relu": check_unary(relu, x + np.sign(x) * 0.1),
        "tanh": check_unary(tanh, x),
        "sigmoid": check_unary(sigmoid, x),
        "power": check_unary(lambda t: power(t, 1.7), pos),
        "square": check_unary(square, x),
        "matmul": check_unary(lambda t: matmul(t, Tensor(other.T)), x),
        "sum": check_unary(lambda t: tsum(t, axis=0), x),
        "mean": check_unary(lambda t: mean(t, axis=1, keepdims=True), x),
        "reshape": check_unary(lambda t: reshape(t, (-1,)), x),
        "transpose": check_unary(transpose, x),
        "getitem": check_unary(lambda t: t[1:5, ::2], x),
        "concat": check_unary(lambda t: concat([t, t * 2.0], axis=1), x),
        "stack": check_unary(lambda t: stack([t, -t]), x),
        "where": check_unary(lambda t: where(other > 0, t, t * 3.0), x),
    }
    h, w = shape()
    img = rng.standard_normal((2, h - h % 2, w - w % 2))
    k = rng.standard_normal((3, 2, 3, 3))
    errs["conv2d(x)"] = check_unary(lambda t: conv2d(t, Tensor(k), padding=1), img)
    errs["conv2d(k)"] = check_unary(lambda t: conv2d(Tensor(img), t, padding=1), k)
    errs["avg_pool2d"] = check_unary(avg_pool2d, img)
    errs["upsample2x"] = check_unary(upsample2x, img)
    gamma, beta = rng.uniform(0.5, 1.5, 2), rng.standard_normal(2)
    errs["batch_norm"] = check_unary(
        lambda t: batch_norm(t, Tensor(gamma), Tensor(beta), BatchNormState(2), True), img[None])
    errs["fft"] = check_unary(lambda t: fft2_centered(t), img)
    errs["ifft"] = check_unary(lambda t: fft2_centered(t, "inverse"), img)
    grid = identity_grid(img.shape[1], img.shape[2]) + rng.uniform(-0.2, 0.2, img.shape[1:] + (2,))
    errs["grid_sample(img)"] = check_unary(lambda t: grid_sample_bilinear(t, Tensor(grid)), img)
    errs["grid_sample(grid)"] = check_unary(lambda t: grid_sample_bilinear(Tensor(img), t), grid)
    errs["entropy"] = check_unary(lambda t: gradient_entropy(t, 1e-8), img)
    enc = HashGridEncoding(3, HashGridConfig(3, 2, 6, 3, 2.0, init_scale=1.0), rng)
    coords = rng.uniform(-0.9, 0.9, (12, 3))
    wts = rng.standard_normal((12, 6))
    table = enc.table.data.copy()

    def f(arr):
        enc.table.data = arr
        return float(np.sum(enc(coords).data * wts))

    (enc(coords) * wts).sum().backward()
    analytic = enc.table.grad.copy()
    errs["hash_encode"] = rel_error(analytic, numeric_grad(f, table))
    return errs


def test_c2_gradient_suite():
    import test_moco

    start = time.perf_counter()
    errs = _primitive_errors(np.random.default_rng(2))
    worst_name = max(errs, key=errs.get)
    composed_ok = True
    try:
        test_moco.test_total_loss_gradients()  # 16x16, >= 20 sampled parameters per network, < 1e-3
    except AssertionError:
        composed_ok = False
    elapsed = time.perf_counter() - start
    ok = errs[worst_name] < 1e-4 and composed_ok and elapsed < 30
    report(2, ok, f"{len(errs)} primitives, worst {worst_name} rel err {errs[worst_name]:.1e}; "
                  f"composed loss check {'ok' if composed_ok else 'failed'}; {elapsed:.1f} s")


# ---- 3 -----------------------------------------------------------------------

class _PinnedImage:
    def __init__(self, data):
        self.data = data

    def channels_first(self):
        return Tensor(self.data)


class _IdentityMotion:
    def __init__(self, h, w):
        self.h, self.w = h, w

    def __call__(self, code):
        return Tensor(np.broadcast_to(identity_grid(self.h, self.w), (len(code), self.h, self.w, 2)).copy())


def test_c3_forward_model_collapse():
    gt = generate_phantom("shepp_logan", 64, 64)
    reference = fft2_centered(Tensor(gt.data)).data
    sched = SamplingSchedule(64, [(0, 9), (10, 40), (41, 63)], [RigidMotion()] * 3)
    err_forward = float(np.max(np.abs(forward_model(gt, sched).data - reference)))
    groups = MovementGroups(64, [list(range(0, 10)), list(range(41, 64))])
    k, _, _ = guided_forward(_PinnedImage(gt.data), _IdentityMotion(64, 64), groups)
    err_guided = float(np.max(np.abs(k.data - reference)))
    report(3, err_forward < 1e-8 and err_guided < 1e-8,
           f"forward_model {err_forward:.1e}, guided_forward {err_guided:.1e} vs fft2_centered")


# ---- 4 -----------------------------------------------------------------------

def test_c4_grouping():
    g = group_movements([1, 1, 0, 0, 0, 1, 1, 1])
    example_ok = g.groups == [[0, 1], [5, 6, 7]] and g.n_movements == 2 and g.reference_lines == [2, 3, 4]
    rng = np.random.default_rng(4)
    failures = 0
    for _ in range(1000):
        n = int(rng.integers(1, 80))
        mask = (rng.uniform(size=n) < rng.uniform()).astype(int)
        grp = group_movements(mask)
        flat = sorted([i for gr in grp.groups for i in gr] + grp.reference_lines)
        runs = sum(1 for i in range(n) if mask[i] and (i == 0 or not mask[i - 1]))
        maximal = all((gr[0] == 0 or not mask[gr[0] - 1]) and (gr[-1] == n - 1 or not mask[gr[-1] + 1])
                      for gr in grp.groups)
        covered = all(mask[i] for gr in grp.groups for i in gr)
        if flat != list(range(n)) or grp.n_movements != runs or not maximal or not covered:
            failures += 1
    report(4, example_ok and failures == 0,
           f"worked example {'exact' if example_ok else 'WRONG'}; 1000 random masks, {failures} partition failures")


# ---- 5 -----------------------------------------------------------------------

def test_c5_lambda_schedule():
    cfg = MocoConfig()
    got = [lambda_schedule(i, cfg) for i in (0, 99, 100, 130)]
    want = [1e-2, 1e-2, 5e-3, 6.25e-4]
    values = [lambda_schedule(i, cfg) for i in range(200)]
    monotone = all(a >= b for a, b in zip(values, values[1:]))
    ok = all(math.isclose(a, b, rel_tol=1e-15) for a, b in zip(got, want)) and monotone
    report(5, ok, f"lambda(0, 99, 100, 130) = {got}; non-increasing over 200 steps: {monotone}")


# ---- 6 -----------------------------------------------------------------------

E2E_SEEDS = {"light": 600, "heavy": 700}
E2E_CONFIG = dict(precision="float32")


def _e2e(scenario: str) -> list[tuple[float, float, float, float, float]]:
    rows = []
    for i in range(10):
        gt, k, sched = make_instance(scenario, "mixed", 64, E2E_SEEDS[scenario], i)
        res = run_moco(k, groups_from_schedule(sched), MocoConfig(**E2E_CONFIG))
        before, after = evaluate(k.to_image(), gt), evaluate(res.image, gt)
        rows.append((before.ssim, after.ssim, before.psnr, after.psnr, res.duration_s))
        print(f"  {scenario} #{i}: SSIM {before.ssim:.3f} -> {after.ssim:.3f}, "
              f"PSNR {before.psnr:.2f} -> {after.psnr:.2f}, {res.duration_s:.0f} s", flush=True)
    return rows


@pytest.mark.slow
def test_c6_end_to_end_correction():
    light, heavy = np.array(_e2e("light")), np.array(_e2e("heavy"))
    ssim_gain = light[:, 1].mean() - light[:, 0].mean()
    psnr_gain = light[:, 3].mean() - light[:, 2].mean()
    heavy_wins = int(np.sum(heavy[:, 1] > heavy[:, 0]))
    slowest = float(max(light[:, 4].max(), heavy[:, 4].max()))
    ok = ssim_gain > 0 and psnr_gain >= 3.0 and heavy_wins >= 8 and slowest < 300
    report(6, ok, f"light mean SSIM {light[:, 0].mean():.3f} -> {light[:, 1].mean():.3f}, "
                  f"PSNR {light[:, 2].mean():.2f} -> {light[:, 3].mean():.2f} ({psnr_gain:+.2f} dB, need +3); "
                  f"heavy SSIM improved on {heavy_wins}/10 (need 8); slowest instance {slowest:.0f} s")


# ---- 7 -----------------------------------------------------------------------

DETECTOR_EPOCHS = 40
DETECTOR_LR = 1e-3


def _detector_sample(seed: int, i: int):
    scenario = "light" if (i // 2) % 2 else "heavy"
    _, k, sched = make_instance(scenario, "mixed", 64, seed, i)
    return k, sched.line_labels()


@pytest.mark.slow
def test_c7_detector_quality():
    start = time.perf_counter()
    train = [_detector_sample(0, i) for i in range(200)]
    test = [_detector_sample(1, i) for i in range(50)]
    net, curve = train_kldnet(train, TrainConfig(epochs=DETECTOR_EPOCHS, batch_size=4, lr=DETECTOR_LR, seed=0),
                              KldNet(depth=2, seed=0))
    scores = score_detector(net, test)
    elapsed = time.perf_counter() - start
    ok = scores.line_f1 >= 0.85 and scores.pixel_accuracy >= 0.9 and elapsed < 1800
    report(7, ok, f"{DETECTOR_EPOCHS} epochs on 200 phantoms: line F1 {scores.line_f1:.3f}, "
                  f"pixel accuracy {scores.pixel_accuracy:.3f} on 50 held-out, loss {curve[0]:.3f} -> "
                  f"{curve[-1]:.3f}, {elapsed / 60:.1f} min")


# ---- 8 -----------------------------------------------------------------------

def test_c8_metric_oracles():
    from test_metrics import loop_haarpsi, loop_ssim, smooth_image

    x, y = smooth_image(seed=11), smooth_image(seed=12)
    self_ssim, self_haar = ssim(x, x), haarpsi(x, x)
    d_ssim = abs(ssim(x, y) - loop_ssim(x, y))
    d_haar = abs(haarpsi(x, y) - loop_haarpsi(x, y))
    noise = np.random.default_rng(13).uniform(-1, 1, x.shape)
    p = [psnr(x + a * noise, x) for a in (0.01, 0.05, 0.2)]
    ok = (abs(self_ssim - 1) < 1e-6 and abs(self_haar - 1) < 1e-6 and d_ssim < 1e-8 and d_haar < 1e-6
          and p[0] > p[1] > p[2])
    report(8, ok, f"self-similarity ssim {self_ssim:.8f} haarpsi {self_haar:.8f}; oracle gaps ssim {d_ssim:.1e} "
                  f"haarpsi {d_haar:.1e}; PSNR {p[0]:.1f} > {p[1]:.1f} > {p[2]:.1f}")


# ---- 9 -----------------------------------------------------------------------

def _tree(root: Path) -> dict[str, bytes]:
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_c9_determinism(tmp_path):
    trees = []
    for run in ("a", "b"):
        d = tmp_path / run
        assert cli_main(["simulate", "--out", str(d / "data"), "--count", "2", "--size", "32", "--seed", "9"]) == 0
        assert cli_main(["correct", "--data", str(d / "data"), "--out", str(d / "out"), "--oracle-mask",
                         "--iterations", "10"]) == 0
        trees.append(_tree(d))
    same = trees[0] == trees[1]
    report(9, same and len(trees[0]) > 10,
           f"simulate + correct reruns byte-identical over {len(trees[0])} files: {same}")


# ---- 10 ----------------------------------------------------------------------

def test_c10_degenerate_inputs():
    notes, ok = [], True
    # all-zero image
    zero = ComplexImage.from_real(np.zeros((32, 32)))
    res = run_moco(fft_image(zero), MovementGroups(32, []), MocoConfig(n_iterations=20, schedule_start_iter=10))
    z_ok = np.all(np.isfinite(res.image.data)) and np.allclose(res.image.data, 0) and \
        all(math.isfinite(r["total"]) for r in res.trace) and float(gradient_entropy(zero).data) == 0.0
    notes.append(f"zero image {'ok' if z_ok else 'BAD'}")
    ok &= z_ok
    # zero-motion scenario
    gt = generate_phantom("shepp_logan", 64, 64, seed=3)
    k, sched, _ = simulate_motion(gt, MotionScenario("light", seed=3, amplitude_range=(0.0, 0.0)))
    same = np.allclose(k.data, fft_image(gt).data, atol=1e-12)
    groups = groups_from_schedule(sched)
    res = run_moco(k, groups, MocoConfig(precision="float32"))
    p = evaluate(res.image, gt).psnr
    m_ok = same and groups.n_movements == 0 and p > 30 and np.all(np.isfinite(res.image.data))
    notes.append(f"zero motion: k-space equals clean FFT {same}, corrected PSNR {p:.1f} dB")
    ok &= m_ok
    # empty detection
    g = group_movements(np.zeros(64, dtype=int))
    res = run_moco(KSpaceData(k.data), g, MocoConfig(n_iterations=5, schedule_start_iter=5, precision="float32"))
    e_ok = g.n_movements == 0 and g.reference_lines == list(range(64)) and res.grids.shape[0] == 0 and \
        np.all(np.isfinite(res.image.data))
    notes.append(f"empty detection {'ok' if e_ok else 'BAD'}")
    ok &= e_ok
    report(10, bool(ok), "; ".join(notes))


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-v", "-s"]))
