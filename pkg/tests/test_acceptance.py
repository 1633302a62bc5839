"""Acceptance criteria 1-10. Each test carries ``criterion(n)``; conftest prints one line per criterion."""
import importlib.util
import time
from pathlib import Path

import numpy as np
import pytest
import torch

import oracles
from conftest import KinkWatch, campaign_manifest, finite_difference_check
from lstfusion import metrics as M
from lstfusion.dataset import check_leakage, extract_patches
from lstfusion.discriminator import Discriminator, DiscriminatorConfig
from lstfusion.generator import INPUT_KEYS, Generator, GeneratorConfig, TemporalAttention, adain, refine_features
from lstfusion.raster import gaussian_kernel, gaussian_smooth
from lstfusion.synthscene import SynthConfig, generate_scene
from lstfusion.training import (
    LossWeights,
    TrainConfig,
    batch_tensors,
    generator_pass,
    moving_average,
    train,
    weak_supervision_pool,
)

ROOT = Path(__file__).resolve().parents[1]


def _load_benchmark():
    spec = importlib.util.spec_from_file_location("synthetic_benchmark", ROOT / "scripts" / "synthetic_benchmark.py")
    mod = importlib.util.module_from_spec(spec)
    spec.loader.exec_module(mod)
    return mod


# ---------------------------------------------------------------- 1: metric oracles


@pytest.mark.criterion(1)
def test_metrics_match_oracles():
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    image_metrics = {
        "rmse": (M.rmse, oracles.rmse),
        "psnr": (M.psnr, oracles.psnr),
        "ssim": (M.ssim, oracles.ssim),
        "ms_ssim": (M.ms_ssim, oracles.ms_ssim),
        "sam": (M.sam, oracles.sam),
        "cc": (M.cc, oracles.cc),
        "ergas": (M.ergas, oracles.ergas),
    }
    worst = {k: 0.0 for k in (*image_metrics, "pcc", "srcc")}
    for _ in range(50):
        ref = rng.uniform(5, 40, (8, 8))
        pred = ref + rng.normal(0, rng.uniform(0.1, 4), (8, 8))
        P, R = pred.tolist(), ref.tolist()
        for name, (ours, brute) in image_metrics.items():
            worst[name] = max(worst[name], abs(ours(pred, ref) - brute(P, R)))
        x = rng.normal(size=20)
        y = 0.7 * x + rng.normal(size=20)
        y[rng.integers(0, 20, 3)] = y[0]  # force ties into the ranking
        worst["pcc"] = max(worst["pcc"], abs(M.pearson(x, y) - oracles.pearson(x.tolist(), y.tolist())))
        worst["srcc"] = max(worst["srcc"], abs(M.spearman(x, y) - oracles.spearman(x.tolist(), y.tolist())))
    elapsed = time.perf_counter() - t0
    bad = {k: v for k, v in worst.items() if not v <= 1e-6}
    assert not bad, f"metric disagreements above 1e-6: {bad}"
    assert elapsed < 10.0, f"oracle suite took {elapsed:.1f} s"


# ---------------------------------------------------------------- 2: weak-supervision pooling


@pytest.mark.criterion(2)
def test_pool_equals_block_means():
    rng = np.random.default_rng(7)
    worst = 0.0
    for _ in range(100):
        x = rng.normal(0, 10, (96, 96))
        ours = weak_supervision_pool(torch.from_numpy(x)).numpy()
        brute = np.empty((32, 32))
        for i in range(32):
            for j in range(32):
                s = 0.0
                for di in range(3):
                    for dj in range(3):
                        s += x[3 * i + di, 3 * j + dj]
                brute[i, j] = s / 9
        worst = max(worst, float(np.abs(ours - brute).max()))
    assert worst <= 1e-9


@pytest.mark.criterion(2)
def test_pool_gradient_is_one_ninth():
    x = torch.randn(1, 1, 96, 96, dtype=torch.float64, generator=torch.Generator().manual_seed(0))
    h = 1e-6
    rng = np.random.default_rng(1)
    for r, c in rng.integers(0, 96, (20, 2)):
        e = torch.zeros_like(x)
        e[0, 0, r, c] = h
        fd = (weak_supervision_pool(x + e) - weak_supervision_pool(x - e)) / (2 * h)
        expected = torch.zeros_like(fd)
        expected[0, 0, r // 3, c // 3] = 1 / 9
        torch.testing.assert_close(fd, expected, rtol=0, atol=1e-8)
    xg = x.clone().requires_grad_()
    weak_supervision_pool(xg).sum().backward()
    assert torch.allclose(xg.grad, torch.full_like(x, 1 / 9), rtol=0, atol=1e-15)


# ---------------------------------------------------------------- 3: Gaussian stage


@pytest.mark.criterion(3)
def test_gaussian_kernel_and_constant_field():
    k = gaussian_kernel(1.0)
    assert k.shape == (7, 7)
    assert abs(k.sum() - 1.0) <= 1e-9
    field = torch.full((2, 1, 40, 33), 296.4, dtype=torch.float64)
    assert torch.max(torch.abs(gaussian_smooth(field, 1.0) - field)).item() <= 1e-6
    arr = np.full((1, 25, 25), -0.3)
    assert np.abs(gaussian_smooth(arr, 1.0) - arr).max() <= 1e-6


# ---------------------------------------------------------------- 4: fusion-stage algebra

SHAPES = [(2, 4, 24, 24), (2, 6, 12, 12), (2, 8, 6, 6)]


def _pyramid(seed, scale=1.0, shift=0.0):
    g = torch.Generator().manual_seed(seed)
    return [torch.randn(*s, generator=g, dtype=torch.float64) * scale + shift for s in SHAPES]


@pytest.mark.criterion(4)
def test_refine_identity_when_pyramids_coincide():
    f, l = _pyramid(0), _pyramid(1)
    for out, ref in zip(refine_features(f, l, l), f):
        assert torch.max(torch.abs(out - ref)).item() <= 1e-6


@pytest.mark.criterion(4)
def test_adain_matches_style_statistics():
    content, style = _pyramid(2, 0.3, -1.0), _pyramid(3, 4.0, 5.0)
    for out, s in zip(adain(content, style), style):
        torch.testing.assert_close(out.mean(dim=(2, 3)), s.mean(dim=(2, 3)), rtol=0, atol=1e-4)
        torch.testing.assert_close(out.std(dim=(2, 3), unbiased=False), s.std(dim=(2, 3), unbiased=False), rtol=0, atol=1e-4)


@pytest.mark.criterion(4)
def test_attention_output_between_sources():
    f1, f2, fn = _pyramid(4), _pyramid(5), _pyramid(6)
    for draw in range(100):
        torch.manual_seed(1000 + draw)
        ta = TemporalAttention(tuple(s[1] for s in SHAPES)).double()
        with torch.no_grad():
            for p in ta.parameters():
                p.normal_(0, 2)
        with torch.no_grad():
            out = ta(f1, f2, fn)
        for o, a, b in zip(out, f2, fn):
            assert torch.all(o >= torch.minimum(a, b)) and torch.all(o <= torch.maximum(a, b)), f"draw {draw}"


# ---------------------------------------------------------------- 5: gradient integrity


@pytest.mark.criterion(5)
def test_composite_loss_finite_differences():
    t0 = time.perf_counter()
    torch.manual_seed(0)
    G = Generator(GeneratorConfig(levels=3, channels=(3, 4, 6), res_blocks=1, base_size=48)).double()
    D = Discriminator(DiscriminatorConfig(channels=(4, 8, 8))).double()
    scene = generate_scene(SynthConfig(seed=3, size=96))
    batch = {k: v.double() for k, v in batch_tensors(extract_patches(scene.sample, fine_size=48, fine_stride=48), [0, 1]).items()}
    # Reference = pooled output +- 0.05..0.15: keeps MS-SSIM off its clamp and L1 off its kink,
    # so every term is smooth and contributes gradient at the probe point.
    with torch.no_grad():
        fake = weak_supervision_pool(G({k: batch[k] for k in INPUT_KEYS}))
    g = torch.Generator().manual_seed(0)
    offset = 0.05 + 0.1 * torch.rand(fake.shape, generator=g, dtype=torch.float64)
    batch["mid_lst_t2"] = fake + torch.where(torch.rand(fake.shape, generator=g) < 0.5, -offset, offset)
    w = LossWeights(1.0, 100.0, 1.0, 1.0)

    def loss():
        return generator_pass(G, D, batch, w)[0]

    _, terms, *_ = generator_pass(G, D, batch, w)
    assert all(t.item() > 0 for t in terms.values())
    assert terms["l_vision"].item() < 0.9

    err = finite_difference_check(loss, [*G.parameters(), *D.parameters()], per_tensor=3, watch=KinkWatch(G, D))
    assert err < 1e-3, f"max relative error {err:.2e}"
    assert time.perf_counter() - t0 < 120


# ---------------------------------------------------------------- 6: overfit oracle


@pytest.mark.criterion(6)
def test_overfit_four_patches():
    t0 = time.perf_counter()
    torch.set_num_threads(1)
    ps = extract_patches(generate_scene(SynthConfig(seed=5, size=192)).sample, fine_size=96, fine_stride=96)
    assert len(ps) == 4
    gcfg = GeneratorConfig(channels=(16, 16, 32, 32, 64), res_blocks=1)
    dcfg = DiscriminatorConfig(channels=(16, 32, 64, 64))
    trace = train(ps, gcfg, dcfg, TrainConfig(steps=500, batch_size=4, seed=0, log_every=0)).trace
    content = trace.terms["l_content"]
    assert content[-1] < 0.1 * content[0], f"content {content[0]:.4f} -> {content[-1]:.4f}"
    assert time.perf_counter() - t0 < 300


# ---------------------------------------------------------------- 7-9: synthetic end-to-end


@pytest.fixture(scope="module")
def benchmark():
    return _load_benchmark()


def _timed_run(bench, out):
    t0 = time.perf_counter()
    res = bench.run_pipeline(out, seed=0, steps=1000)
    res["elapsed"] = time.perf_counter() - t0
    return res


@pytest.fixture(scope="module")
def e2e_run(benchmark, tmp_path_factory):
    return _timed_run(benchmark, tmp_path_factory.mktemp("e2e_a"))


@pytest.fixture(scope="module")
def e2e_rerun(benchmark, tmp_path_factory):
    return _timed_run(benchmark, tmp_path_factory.mktemp("e2e_b"))


@pytest.mark.criterion(7)
def test_fused_beats_bicubic_on_fine_truth(e2e_run):
    rows = e2e_run["metrics"]["meta"]["fine_truth_rmse_k"]
    assert len(rows) == 2
    for label, r in rows.items():
        assert r["Fused"] <= 0.9 * r["BicubicI"], f"{label}: fused {r['Fused']:.3f} vs bicubic {r['BicubicI']:.3f}"
    assert e2e_run["elapsed"] <= 3600


@pytest.mark.criterion(7)
def test_pooled_rmse_not_worse_than_bicubic(e2e_run):
    for label, row in e2e_run["metrics"]["dates"].items():
        assert row["Fused"]["rmse"] <= row["BicubicI"]["rmse"], label


@pytest.mark.criterion(8)
def test_training_dynamics(e2e_run):
    tr = e2e_run["trace"]
    g, d = np.asarray(tr.loss_g), np.asarray(tr.loss_d)
    assert np.isfinite(g).all() and np.isfinite(d).all()
    assert all(np.isfinite(v).all() for v in tr.terms.values())
    ma_g, ma_d = moving_average(g, 100), moving_average(d, 100)
    assert ma_g[-1] < ma_g[0], f"generator MA {ma_g[0]:.4f} -> {ma_g[-1]:.4f}"
    assert ma_d[-1] > d[:100].mean(), f"discriminator first-100 mean {d[:100].mean():.4f}, final MA {ma_d[-1]:.4f}"


@pytest.mark.criterion(9)
def test_pipeline_determinism(e2e_run, e2e_rerun):
    a, b = e2e_run["trace"], e2e_rerun["trace"]
    assert a.step == b.step and a.loss_g == b.loss_g and a.loss_d == b.loss_d and a.terms == b.terms
    names_a = [p.name for p in e2e_run["predictions"]]
    assert names_a == [p.name for p in e2e_rerun["predictions"]] and len(names_a) == 2
    for pa, pb in zip(e2e_run["predictions"], e2e_rerun["predictions"]):
        assert pa.read_bytes() == pb.read_bytes(), pa.name


# ---------------------------------------------------------------- 10: leakage validator


@pytest.mark.criterion(10)
def test_field_campaign_has_no_leakage():
    rep = check_leakage(campaign_manifest())
    assert rep.ok, str(rep)


@pytest.mark.criterion(10)
def test_constructed_leak_is_flagged():
    m = campaign_manifest()
    train_ = m.split("train")
    train_[3].t1 = train_[1].t2  # reference image of one pair is the target of another
    rep = check_leakage(m)
    assert not rep.ok
    assert any(train_[3].id in v and train_[1].id in v for v in rep.violations), str(rep)
