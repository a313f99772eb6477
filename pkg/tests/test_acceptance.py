"""Acceptance criteria; the terminal summary prints one PASS/FAIL line per criterion."""

import math
import os
import time
import warnings
from pathlib import Path

import numpy as np
import pytest

from mspd import tensor as T
from mspd.baselines import bilinear_demosaic, fit_linear_estimator, wiener_demosaic, wiener_train
from mspd.checkpoint import load_checkpoint, save_checkpoint
from mspd.cube import ImageCube, read_cube, synthetic_cube, wavelength_grid, write_cube
from mspd.loss import gradient_map, loss
from mspd.metrics import StokesCube, dolp, psnr, stokes
from mspd.model import VARIANTS, MSPDNet, NetworkConfig, parameter_shapes, zero_mapping_weights
from mspd.pattern import (PatternError, PatternSpec, extract_sparse, generate_pattern, load_pattern, mosaic,
                          save_pattern, sparse_stack, validate_pattern)
from mspd.pipeline import DATA_ROOT_ENV, Catalog, ExperimentSpec, ingest, run_experiment
from mspd.report import REFERENCE_COMPARISON, REFERENCE_SCENES
from mspd.tensor import Tensor, gradcheck
from mspd.train import Patch, TrainConfig, read_log, train

from helpers import parity_pattern_c4, random_cube, tiny_pattern

criterion = pytest.mark.criterion


def rand(rng, *shape):
    return Tensor(rng.standard_normal(shape), requires_grad=True)


# ---------------------------------------------------------------------------
# 1. gradient correctness
# ---------------------------------------------------------------------------

def per_op_checks(rng):
    """(name, loss builder, inputs) for every differentiable op."""
    a, b, c = rand(rng, 3, 4), rand(rng, 3, 4), rand(rng, 1, 4)
    r = rng.standard_normal((4, 5))
    r[np.abs(r) < 0.1] = 0.5
    rl = Tensor(r, requires_grad=True)
    x = rand(rng, 2, 3, 4)
    p, q = rand(rng, 2, 3), rand(rng, 2, 5)
    w = Tensor(rng.standard_normal((2, 8)))
    x3, k3, b3 = rand(rng, 1, 2, 3, 5, 4), rand(rng, 3, 2, 2, 3, 3), rand(rng, 3)
    x2, k2, b2 = rand(rng, 2, 3, 5, 6), rand(rng, 2, 3, 3, 3), rand(rng, 2)
    sq = lambda t: T.tensor_sum(T.square(t))
    return [
        ("add", lambda: sq(a + b), [a, b]),
        ("sub", lambda: sq(a - c), [a, c]),
        ("mul", lambda: T.tensor_sum(a * b * c), [a, b, c]),
        ("square", lambda: T.tensor_sum(T.square(a) * b), [a, b]),
        ("relu", lambda: sq(T.relu(rl)), [rl]),
        ("sum", lambda: T.tensor_sum(a) * T.tensor_sum(b), [a, b]),
        ("reshape", lambda: sq(T.reshape(x, (6, 4)) + 1.0), [x]),
        ("transpose", lambda: T.tensor_sum(T.square(T.transpose(x, (2, 0, 1))) * Tensor(np.arange(24.0).reshape(4, 2, 3))), [x]),
        ("getitem", lambda: sq(x[1:, ::2]), [x]),
        ("concat", lambda: T.tensor_sum(T.concat([p, q], axis=1) * w), [p, q]),
        ("slice_axis", lambda: sq(T.slice_axis(x, 2, 1, 3)), [x]),
        ("pad_zero", lambda: sq(T.pad_zero(x, [(1, 0), (0, 2), (1, 1)]) + 1.0), [x]),
        ("conv3d", lambda: sq(T.conv3d(x3, k3, b3, [(0, 1), (1, 1), (2, 0)])), [x3, k3, b3]),
        ("conv2d", lambda: sq(T.conv2d(x2, k2, b2, 1)), [x2, k2, b2]),
    ]


@pytest.mark.slow
@criterion(1, "finite-difference gradient checks (per-op < 1e-4, miniature network < 1e-3, < 60 s)")
def test_criterion_01_gradients(acceptance_detail):
    start = time.perf_counter()
    rng = np.random.default_rng(0)
    worst_op = 0.0
    for name, fn, inputs in per_op_checks(rng):
        err = max(gradcheck(fn, inputs))
        assert err < 1e-4, f"{name}: relative error {err:.2e}"
        worst_op = max(worst_op, err)

    net = MSPDNet(NetworkConfig(2, 2, 2, ms_filters=(2, 2, 2, 2), seed=1))
    # nonzero biases keep ReLU inputs off the exact kink that zero-initialised biases create on sparse input
    brng = np.random.default_rng(5)
    for key, prm in net.params.items():
        if key.endswith(".bias"):
            prm.data[...] = brng.uniform(-0.1, 0.1, prm.shape)
    cube = random_cube(8, 8, 2, 0)
    sp = sparse_stack(mosaic(cube, tiny_pattern()))
    errs = gradcheck(lambda: loss(net.forward_sparse(sp), cube.values), list(net.params.values()), eps=1e-6)
    elapsed = time.perf_counter() - start
    acceptance_detail(f"worst per-op {worst_op:.1e}, network {max(errs):.1e} over {net.num_parameters()} "
                      f"parameters, {elapsed:.0f} s")
    assert max(errs) < 1e-3
    assert elapsed < 60.0


# ---------------------------------------------------------------------------
# 2. architecture identities
# ---------------------------------------------------------------------------

@criterion(2, "architecture identities (zero MS-Modules = Net1, shape grid, parameter tally)")
def test_criterion_02_zero_mapping_equals_net1():
    for c, ph, pw, pattern in ((4, 4, 4, parity_pattern_c4()), (2, 2, 2, tiny_pattern())):
        full = MSPDNet(NetworkConfig(c, ph, pw, seed=7))
        zero_mapping_weights(full)
        net1 = MSPDNet(NetworkConfig(c, ph, pw, variant="Net1", seed=7))
        net1.load_state_dict({k: v for k, v in full.state_dict().items() if k.startswith("tri")})
        y = mosaic(random_cube(16, 16, c, 3), pattern)
        assert full.forward(y).data.tobytes() == net1.forward(y).data.tobytes()


@criterion(2, "architecture identities (zero MS-Modules = Net1, shape grid, parameter tally)")
def test_criterion_02_shape_grid():
    rng = np.random.default_rng(0)
    for variant in VARIANTS:
        for m, n, c, ph, pw in ((4, 4, 1, 2, 2), (8, 4, 2, 2, 2), (6, 8, 3, 2, 4), (8, 8, 4, 4, 4), (8, 16, 16, 8, 8)):
            cells = np.stack([rng.integers(0, c, (ph, pw)), rng.integers(0, 4, (ph, pw))], axis=-1)
            net = MSPDNet(NetworkConfig(c, ph, pw, variant=variant, ms_filters=(2, 2, 2, 2)))
            out = net.forward(mosaic(random_cube(m, n, c), PatternSpec(cells, c)))
            assert out.shape == (m, n, c, 4)


@criterion(2, "architecture identities (zero MS-Modules = Net1, shape grid, parameter tally)")
def test_criterion_02_parameter_tally(acceptance_detail):
    c, h, w = 4, 4, 4
    expected = {}
    for a in range(4):
        expected[f"tri{a}.weight"] = (1, 1, c, 2 * h - 1, 2 * w - 1)
        expected[f"tri{a}.bias"] = (1,)
    for prefix in [f"ms{a}" for a in range(4)] + ["joint"]:
        for name, cout, cin, k in (("conv1", 8, 1, 3), ("conv2", 16, 8, 3), ("res1", 16, 16, 3),
                                   ("res2", 16, 16, 3), ("conv3", 32, 16, 3), ("conv4", 64, 32, 3),
                                   ("out", 1, 64, 1)):
            expected[f"{prefix}.{name}.weight"] = (cout, cin, k, k, k)
            expected[f"{prefix}.{name}.bias"] = (cout,)
    got = parameter_shapes(NetworkConfig(c, h, w))
    assert got == expected
    total = sum(math.prod(s) for s in expected.values())
    assert MSPDNet(NetworkConfig(c, h, w)).num_parameters() == total == 434953
    acceptance_detail(f"Full (c=4, 4x4) has {total} parameters in {len(expected)} tensors")


# ---------------------------------------------------------------------------
# 3. overfit sanity
# ---------------------------------------------------------------------------

@pytest.mark.slow
@criterion(3, "overfit one 16x16 patch: loss drop >= 10x and PSNR > 40 dB within 200 steps, < 120 s")
def test_criterion_03_overfit(acceptance_detail):
    waves = [450.0, 520.0, 590.0, 660.0]
    # c=4 at 4x4 cannot satisfy the adjacency rule; use the closest layout the generator finds
    pattern = generate_pattern(4, 4, 4, seed=0, wavelengths=waves, strict=False)
    scene = synthetic_cube(64, 64, waves, seed=0)
    cube = ImageCube(scene.values[24:40, 24:40].copy(), waves)
    patch = Patch(mosaic(cube, pattern), cube)
    net = MSPDNet(NetworkConfig(4, 4, 4, seed=0))
    start = time.perf_counter()
    res = train(net, [patch], cfg=TrainConfig(epochs=200, learning_rate=1e-3, shuffle=False))
    elapsed = time.perf_counter() - start
    pred = net.forward_sparse(patch.sparse).data
    final = loss(pred, cube.values, 1.0)
    ratio = res.step_losses[0] / final
    score = psnr(pred, cube.values)
    acceptance_detail(f"loss drop {ratio:.0f}x, PSNR {score:.2f} dB, {elapsed:.0f} s")
    assert len(res.step_losses) == 200
    assert ratio >= 10.0
    assert elapsed < 120.0
    assert score > 40.0


# ---------------------------------------------------------------------------
# 4. loss semantics
# ---------------------------------------------------------------------------

def direct_loss(p, t, lam):
    m, n, c, a = p.shape
    total = 0.0
    for y in range(m):
        for x in range(n):
            for i in range(c):
                for j in range(a):
                    total += (p[y, x, i, j] - t[y, x, i, j]) ** 2
                    if y + 1 < m:
                        total += lam * ((p[y + 1, x, i, j] - p[y, x, i, j]) - (t[y + 1, x, i, j] - t[y, x, i, j])) ** 2
                    if x + 1 < n:
                        total += lam * ((p[y, x + 1, i, j] - p[y, x, i, j]) - (t[y, x + 1, i, j] - t[y, x, i, j])) ** 2
    return total


@criterion(4, "loss semantics (formula oracle to 1e-12, lambda = 0, gradient-map examples)")
def test_criterion_04_loss():
    pred = np.array([[1.0, 2.0], [3.0, 5.0]]).reshape(2, 2, 1, 1)
    truth = np.ones((2, 2, 1, 1))
    assert loss(pred, truth, 1.0) == 39.0
    rng = np.random.default_rng(0)
    for lam in (0.0, 0.5, 1.0, 3.0):
        p, t = rng.uniform(size=(2, 4, 3, 2, 4))
        assert abs(loss(p, t, lam) - direct_loss(p, t, lam)) < 1e-12
        pt = Tensor(p.copy())
        assert abs(float(loss(pt, t, lam).data) - direct_loss(p, t, lam)) < 1e-12
    p, t = rng.uniform(size=(2, 5, 5, 2, 4))
    assert loss(p, t, 0.0) == np.sum((p - t) ** 2)
    assert not gradient_map(np.full((4, 4, 2, 4), 0.3)).any()
    ramp = np.broadcast_to(np.arange(5.0)[None, :, None, None], (3, 5, 1, 4))
    g = gradient_map(ramp)
    assert np.all(g[:, :-1, ..., 1] == 1.0) and np.all(g[:, -1, ..., 1] == 0.0) and not g[..., 0].any()


# ---------------------------------------------------------------------------
# 5. DoLP / Stokes
# ---------------------------------------------------------------------------

@criterion(5, "Stokes/DoLP (oracle to 1e-12, unpolarized 0, fully polarized 1, dark-pixel rule)")
def test_criterion_05_dolp():
    v = np.random.default_rng(0).uniform(0, 1, (6, 5, 3, 4))
    s = stokes(v)
    s0 = (v[..., 0] + v[..., 1] + v[..., 2] + v[..., 3]) / 2
    s1, s2 = v[..., 0] - v[..., 2], v[..., 1] - v[..., 3]
    for got, want in ((s.s0, s0), (s.s1, s1), (s.s2, s2), (dolp(s), np.sqrt(s1 ** 2 + s2 ** 2) / s0)):
        assert np.abs(got - want).max() < 1e-12
    one = lambda *i: dolp(stokes(np.array(i, float).reshape(1, 1, 1, 4))).item()
    assert one(0.4, 0.4, 0.4, 0.4) == 0.0
    assert one(2, 1, 0, 1) == 1.0
    assert one(1, 2, 1, 0) == 1.0
    assert one(3, 2, 1, 2) == 0.5
    assert one(0, 0, 0, 0) == 0.0
    dark = StokesCube(np.array([0.0, 1e-9]), np.array([1.0, 1.0]), np.array([0.0, 0.0]))
    assert dolp(dark).tolist() == [0.0, 0.0]


# ---------------------------------------------------------------------------
# 6. baseline oracles
# ---------------------------------------------------------------------------

@criterion(6, "baselines (bilinear affine exact < 1e-10, Wiener planted map < 1e-8, Wiener beats bilinear)")
def test_criterion_06_baselines(acceptance_detail):
    rng = np.random.default_rng(0)
    coef = rng.uniform(-1, 1, (3, 4, 4))
    yy, xx = np.mgrid[0:24, 0:32]
    affine = coef[0] * xx[..., None, None] + coef[1] * yy[..., None, None] + coef[2]
    cube = ImageCube(affine, [450.0, 520.0, 590.0, 660.0], reconstructed=True)
    err = np.abs(bilinear_demosaic(mosaic(cube, parity_pattern_c4())).values - affine)[4:-4, 4:-4].max()
    assert err < 1e-10

    obs = rng.standard_normal((500, 16))
    planted = rng.standard_normal((6, 16))
    fit = fit_linear_estimator(obs, obs @ planted.T, regularization=0.0)
    recovery = np.abs(fit.matrix - planted).max() / np.abs(planted).max()
    assert recovery < 1e-8 and fit.residual < 1e-8

    p = parity_pattern_c4()
    scene = synthetic_cube(32, 32, [450.0, 520.0, 590.0, 660.0], seed=4)
    y = mosaic(scene, p)
    op = wiener_train([scene], p, margin=(2, 2))
    assert op.residual < 1e-8
    w = psnr(wiener_demosaic(y, op), scene)
    b = psnr(bilinear_demosaic(y), scene)
    acceptance_detail(f"bilinear affine error {err:.1e}, planted-map error {recovery:.1e}, "
                      f"in-sample Wiener {w:.2f} dB vs bilinear {b:.2f} dB")
    assert w >= b


# ---------------------------------------------------------------------------
# 7. pattern constraints
# ---------------------------------------------------------------------------

@criterion(7, "pattern constraints ((16, 8x8) and (4, 4x4) valid; planted defects reported exactly)")
def test_criterion_07_c16_8x8():
    for seed in range(3):
        p = generate_pattern(16, 8, 8, seed=seed)
        assert validate_pattern(p) == []


@criterion(7, "pattern constraints ((16, 8x8) and (4, 4x4) valid; planted defects reported exactly)")
def test_criterion_07_c4_4x4(acceptance_detail):
    try:
        p = generate_pattern(4, 4, 4, seed=0)
    except PatternError as exc:
        best = generate_pattern(4, 4, 4, seed=0, strict=False)
        left = len(validate_pattern(best))
        acceptance_detail(f"(c=4, 4x4) unsatisfiable: no layout avoids adjacent bands "
                          f"(best found has {left} violation(s))")
        pytest.fail(f"no valid c=4, 4x4 pattern: {exc}")
    assert validate_pattern(p) == []


@criterion(7, "pattern constraints ((16, 8x8) and (4, 4x4) valid; planted defects reported exactly)")
def test_criterion_07_planted_defects():
    p = generate_pattern(16, 8, 8, seed=0)
    lam, ang = p.wavelength_map, p.angle_map
    # adjacency: swap two same-angle cells so band 4 lands beside band 3
    planted = None
    for y, x in zip(*np.nonzero(lam == 3)):
        for dy, dx in ((0, 1), (0, -1), (1, 0), (-1, 0)):
            target = ((int(y) + dy) % 8, (int(x) + dx) % 8)
            src = tuple(int(v) for v in np.argwhere((lam == 4) & (ang == ang[target]))[0])
            trial = lam.copy()
            trial[target], trial[src] = trial[src], trial[target]
            found = validate_pattern(PatternSpec(np.stack([trial, ang], -1), 16))
            if len(found) == 1:
                planted = (found[0], {(int(y), int(x)), target})
                break
        if planted:
            break
    assert planted is not None
    violation, cells = planted
    assert violation.rule == "adjacent-bands" and set(violation.cells) == cells
    # angle count: one relabelled cell also breaks its four 2x2 windows and its pair count
    cells = p.cells.copy()
    y, x = map(int, np.argwhere(cells[..., 1] == 1)[0])
    cells[y, x, 1] = 0
    rules = sorted(v.rule for v in validate_pattern(PatternSpec(cells, 16)))
    assert rules == ["angle-balance"] + ["angle-block"] * 4 + ["pair-balance"]


# ---------------------------------------------------------------------------
# 8. round-trips and determinism
# ---------------------------------------------------------------------------

@criterion(8, "round-trips bit-exact, seeded training logs identical, sparse masks partition the mosaic")
def test_criterion_08_round_trips_and_determinism(tmp_path, acceptance_detail):
    cube = random_cube(9, 7, 3, 1)
    assert read_cube(write_cube(tmp_path / "c.mspc", cube)).values.tobytes() == cube.values.tobytes()
    p = generate_pattern(16, 8, 8, seed=1, wavelengths=wavelength_grid(420, 720, 20))
    back = load_pattern(save_pattern(tmp_path / "p.txt", p))
    assert back == p and back.digest() == p.digest()
    arrays = {"a": np.random.default_rng(0).standard_normal((3, 4)), "b": np.arange(5, dtype=np.int32)}
    save_checkpoint(tmp_path / "ck", arrays)
    loaded, _ = load_checkpoint(tmp_path / "ck")
    assert all(loaded[k].tobytes() == v.tobytes() and loaded[k].dtype == v.dtype for k, v in arrays.items())

    logs = []
    for k in range(2):
        patches = [Patch(mosaic(c, tiny_pattern()), c) for c in (random_cube(4, 4, 2, s) for s in range(3))]
        net = MSPDNet(NetworkConfig(2, 2, 2, ms_filters=(2, 2, 2, 2), seed=3))
        out = tmp_path / f"run{k}"
        train(net, patches, patches[:1], TrainConfig(epochs=3, learning_rate=1e-3, seed=11, output_dir=str(out)))
        logs.append([{c: r[c] for c in ("epoch", "train_loss", "val_loss")} for r in read_log(out / "train_log.csv")])
        assert (out / "last.bin").exists()
    assert logs[0] == logs[1]
    assert (tmp_path / "run0" / "last.bin").read_bytes() == (tmp_path / "run1" / "last.bin").read_bytes()
    acceptance_detail("log comparison covers epoch/train_loss/val_loss; wall_time is a clock reading")

    y = mosaic(random_cube(16, 16, 16, 2), p)
    masks = np.stack([extract_sparse(y, a).mask for a in range(4)])
    assert np.all(masks.sum(axis=(0, 3)) == 1)
    total = sum(extract_sparse(y, a).values.sum(axis=2) for a in range(4))
    assert total.tobytes() == y.values.tobytes()


# ---------------------------------------------------------------------------
# 9-10. dataset-backed checks (optional)
# ---------------------------------------------------------------------------

def _dataset():
    root = os.environ.get(DATA_ROOT_ENV)
    if not root or not Path(root).is_dir():
        pytest.skip(f"${DATA_ROOT_ENV} not set; dataset-backed criterion skipped")
    scenes = os.environ.get("MSPD_TEST_SCENES", ",".join(REFERENCE_SCENES)).split(",")
    catalog = ingest(root, wavelength_grid(420, 720, 20), strict=False)
    missing = [s for s in scenes if s not in catalog.scenes]
    if missing:
        pytest.skip(f"dataset under {root} lacks test scenes {missing}")
    return root, catalog, scenes


def _dataset_spec(tmp_path, catalog: Catalog, scenes, **kw) -> ExperimentSpec:
    pattern = save_pattern(tmp_path / "pattern.txt",
                           generate_pattern(16, 8, 8, seed=0, wavelengths=wavelength_grid(420, 720, 20)))
    train_scenes = [s for s in catalog.names() if s not in scenes]
    return ExperimentSpec(pattern=str(pattern), train_scenes=train_scenes, test_scenes=list(scenes),
                          wavelengths=wavelength_grid(420, 720, 20), output_dir=str(tmp_path / "runs"), **kw)


@pytest.mark.dataset
@criterion(9, "dataset: bilinear average MSPI PSNR within 2 dB of the published 28.02 dB (flag on miss)")
def test_criterion_09_bilinear_on_dataset(tmp_path, acceptance_detail):
    _, catalog, scenes = _dataset()
    res = run_experiment(_dataset_spec(tmp_path, catalog, scenes, methods=["bilinear"]), catalog)
    got = res.reports[0].average_mspi
    ref = REFERENCE_COMPARISON["Bilinear"][-1][0]
    acceptance_detail(f"bilinear average {got:.2f} dB vs published {ref:.2f} dB")
    if abs(got - ref) > 2.0:
        acceptance_detail("FLAG: outside the 2 dB band")
        warnings.warn(f"bilinear average {got:.2f} dB is more than 2 dB from {ref:.2f} dB")


@pytest.mark.dataset
@criterion(10, "dataset: reduced Full training (c=16, 8x8, 10 epochs) beats bilinear")
def test_criterion_10_network_beats_bilinear(tmp_path, acceptance_detail):
    _, catalog, scenes = _dataset()
    spec = _dataset_spec(tmp_path, catalog, scenes, methods=["bilinear", "Full"], epochs=10, max_steps=None,
                         patch_size=128, learning_rate=1e-4)
    res = run_experiment(spec, catalog)
    bil, full = (r.average_mspi for r in res.reports)
    acceptance_detail(f"Full {full:.2f} dB vs bilinear {bil:.2f} dB")
    assert full > bil
