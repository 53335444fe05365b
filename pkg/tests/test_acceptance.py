"""Acceptance suite: nine end-to-end criteria, one test each, at pinned
tolerances.  Each test reports a single PASS line with its measured numbers;
a pytest failure on any test is that criterion's FAIL line."""

import os
import time

import numpy as np
import pytest

from dico.cli import main
from dico.costing import (
    attention_macs_per_token,
    conv_module_macs_per_token,
    count_macs_params,
)
from dico.diagnostics import (
    bench_rows_to_csv,
    channel_activation_scores,
    measure_config_macs,
    throughput_bench,
)
from dico.diffusion import (
    GuidanceConfig,
    NetOutput,
    cfg_combine,
    losses,
    make_schedule,
    model_mean_var,
    p_sample_loop,
    q_sample,
)
from dico.modules import DiCoBlock, build_model, config_replace, get_preset
from dico.serialization import load_checkpoint, save_checkpoint
from dico.tensor import (
    Tensor,
    conv2d,
    finite_diff_grad,
    gelu,
    matmul,
    no_grad,
    pixel_shuffle,
    pixel_unshuffle,
    sigmoid,
    silu,
    softmax,
    channel_layer_norm,
)
from dico.train import AdamW, Ema, ToyDataSpec, make_toy_data, train_loop, train_step


@pytest.fixture
def announce(request):
    reporter = request.config.pluginmanager.getplugin("terminalreporter")

    def emit(line: str) -> None:
        if reporter is not None:
            reporter.ensure_newline()
            reporter.write_line(line)
        else:
            print(line)

    return emit


def rel_err(analytic, numeric) -> float:
    scale = max(1.0, float(np.abs(numeric).max(initial=0.0)))
    return float(np.abs(analytic - numeric).max(initial=0.0)) / scale


def test_criterion_1_cost_calibration(announce):
    """Reference-transformer totals within 2% (MACs) / 3% (params), under 1 s."""
    start = time.perf_counter()
    small = count_macs_params("dit-s2", (32, 32))
    xl = count_macs_params("dit-xl2", (32, 32))
    err_small = abs(small.total_macs - 6.06e9) / 6.06e9
    err_xl = abs(xl.total_macs - 118.66e9) / 118.66e9
    err_params = abs(small.total_params - 32.9e6) / 32.9e6
    elapsed = time.perf_counter() - start
    assert err_small < 0.02
    assert err_xl < 0.02
    assert err_params < 0.03
    assert elapsed < 1.0
    announce(
        "PASS criterion 1: cost calibration - dit-s2 "
        f"{small.total_macs / 1e9:.3f}G ({err_small:.2%} off 6.06G), dit-xl2 "
        f"{xl.total_macs / 1e9:.2f}G ({err_xl:.2%} off 118.66G), params "
        f"{small.total_params / 1e6:.2f}M ({err_params:.2%} off 32.9M) in {elapsed * 1e3:.0f} ms"
    )


def test_criterion_2_counter_equals_enumerator(announce):
    """Analytic counter matches the executed-model enumeration exactly."""
    checked = []
    for preset in ("dico-s", "dico-b"):
        config = get_preset(preset)
        report = count_macs_params(config, (32, 32))
        macs, params = measure_config_macs(config, 32)
        assert report.total_macs == macs, preset
        assert report.total_params == params, preset
        checked.append(f"{preset} {macs:,} MACs / {params:,} params")
    announce("PASS criterion 2: counter == enumerator exactly - " + "; ".join(checked))


def test_criterion_3_gradient_suite(announce):
    """Analytic vs central finite differences in float64: primitives at 1e-5,
    the end-to-end tiny denoiser at 1e-4."""
    start = time.perf_counter()
    rng = np.random.default_rng(0)

    def weighted(shape, seed):
        w = Tensor(np.random.default_rng(seed).standard_normal(shape))
        return lambda y: (y * w).sum()

    worst_prim = 0.0
    w3 = Tensor(rng.standard_normal((3, 2, 3, 3)))
    w1 = Tensor(rng.standard_normal((4, 2, 1, 1)))
    wd = Tensor(rng.standard_normal((2, 1, 3, 3)))
    wm = Tensor(rng.standard_normal((1, 2, 5, 3)))
    primitives = {
        "conv3x3": lambda x: conv2d(x, w3, padding=1),
        "conv1x1": lambda x: conv2d(x, w1),
        "depthwise": lambda x: conv2d(x, wd, padding=1, groups=2),
        "matmul": lambda x: matmul(x, wm),
        "softmax": softmax,
        "gelu": gelu,
        "silu": silu,
        "sigmoid": sigmoid,
        "layer_norm": channel_layer_norm,
        "pixel_shuffle_pair": lambda x: pixel_shuffle(pixel_unshuffle(x, 2), 2),
    }
    shapes = {"matmul": (1, 2, 4, 5), "pixel_shuffle_pair": (2, 4, 4, 4)}
    for name, op in primitives.items():
        shape = shapes.get(name, (2, 2, 4, 5))
        data = np.random.default_rng(hash(name) % 2**32).standard_normal(shape)
        x = Tensor(data, requires_grad=True)
        wrap = weighted(op(x).shape, seed=1)
        wrap(op(x)).backward()
        numeric = finite_diff_grad(lambda z: wrap(op(z)), x)
        err = rel_err(x.grad, numeric)
        assert err <= 1e-5, f"{name}: {err:.3e}"
        worst_prim = max(worst_prim, err)

    # end-to-end: the 8-wide single-depth denoiser, all float64
    model = build_model(get_preset("dico-micro"), 0)
    params = list(model.named_parameters())
    for _, p in params:
        p.data = p.data.astype(np.float64)
    x_data = rng.standard_normal((2, 1, 8, 8))
    t = np.array([3, 977])
    y = np.array([0, 1])
    w_eps = Tensor(rng.standard_normal(x_data.shape))
    w_v = Tensor(rng.standard_normal(x_data.shape))

    def loss_from(x: Tensor) -> Tensor:
        out = model.forward(x, t, y)
        return (out.eps * w_eps).sum() + (out.v * w_v).sum()

    x = Tensor(x_data.copy(), requires_grad=True)
    loss_from(x).backward()
    numeric_x = finite_diff_grad(loss_from, x)
    err_x = rel_err(x.grad, numeric_x)
    assert err_x <= 1e-4, f"input gradient: {err_x:.3e}"

    def loss_value() -> float:
        with no_grad():
            return loss_from(Tensor(x_data.copy())).item()

    step = 1e-6
    worst_param = 0.0
    pick = np.random.default_rng(1)
    sampled = 0
    for name, p in params:
        flat = p.data.reshape(-1)
        grad = p.grad.reshape(-1) if p.grad is not None else np.zeros_like(flat)
        for i in pick.choice(flat.size, size=min(2, flat.size), replace=False):
            orig = flat[i]
            flat[i] = orig + step
            hi = loss_value()
            flat[i] = orig - step
            lo = loss_value()
            flat[i] = orig
            numeric = (hi - lo) / (2.0 * step)
            err = abs(grad[i] - numeric) / max(1.0, abs(numeric))
            assert err <= 1e-4, f"{name}[{i}]: {err:.3e}"
            worst_param = max(worst_param, err)
            sampled += 1

    elapsed = time.perf_counter() - start
    assert elapsed < 120.0
    announce(
        "PASS criterion 3: gradients - primitives worst "
        f"{worst_prim:.2e} (tol 1e-5); end-to-end input {err_x:.2e}, "
        f"{sampled} parameter coords worst {worst_param:.2e} (tol 1e-4) in {elapsed:.1f} s"
    )


def test_criterion_4_diffusion_identities(announce):
    sched = make_schedule("linear", 1000, 1e-4, 0.02)
    rng = np.random.default_rng(0)

    # forward-noising moments over 1e4 draws, 3 sigma
    n = 10_000
    x0_small = rng.uniform(-0.9, 0.9, (1, 1, 2, 2))
    x0 = Tensor(np.repeat(x0_small, n, axis=0))
    t = np.full(n, 400)
    eps = Tensor(rng.standard_normal(x0.shape))
    xt = q_sample(x0, t, eps, sched).data
    ab = sched.alpha_bar[400]
    mean_err = np.abs(xt.mean(axis=0) - np.sqrt(ab) * x0_small[0])
    mean_bound = 3.0 * np.sqrt(1.0 - ab) / np.sqrt(n)
    assert (mean_err < mean_bound).all()
    var_err = np.abs(xt.var(axis=0) - (1.0 - ab))
    var_bound = 3.0 * (1.0 - ab) * np.sqrt(2.0 / (n - 1))
    assert (var_err < var_bound).all()

    # exact posterior output => zero KL term
    x0d = Tensor(rng.uniform(-0.9, 0.9, (4, 1, 4, 4)))
    td = rng.integers(1, 1000, 4)
    epsd = Tensor(rng.standard_normal(x0d.shape))
    xtd = q_sample(x0d, td, epsd, sched)
    exact = NetOutput(eps=Tensor(epsd.data.copy()), v=Tensor(np.full(x0d.shape, -1.0)))
    terms = losses(exact, x0d, xtd, td, epsd, sched)
    kl = float(terms.vlb.item())
    assert kl <= 1e-18

    # f(v) endpoints are the exact schedule values
    xt32 = Tensor(rng.standard_normal((1, 1, 2, 2)).astype(np.float32))
    t123 = np.array([123])
    zero_eps = Tensor(np.zeros_like(xt32.data))
    _, lv_hi = model_mean_var(NetOutput(zero_eps, Tensor(np.ones_like(xt32.data))), xt32, t123, sched)
    _, lv_lo = model_mean_var(
        NetOutput(zero_eps, Tensor(np.full_like(xt32.data, -1.0))), xt32, t123, sched
    )
    assert (lv_hi.data == np.float32(sched.log_beta[123])).all()
    assert (lv_lo.data == np.float32(sched.log_posterior_var_clipped[123])).all()

    # scale-1 guidance is bitwise the conditional prediction
    cond = Tensor(rng.standard_normal((2, 1, 4, 4)))
    uncond = Tensor(rng.standard_normal((2, 1, 4, 4)))
    assert cfg_combine(cond, uncond, 1.0) is cond

    announce(
        "PASS criterion 4: diffusion identities - moments within 3 sigma over 1e4 draws, "
        f"exact-posterior KL {kl:.1e} nats, f(v) endpoints bitwise, cfg s=1 bitwise"
    )


def test_criterion_5_structural_invariants(announce, tmp_path):
    rng = np.random.default_rng(0)

    x = Tensor(rng.standard_normal((2, 8, 8, 8)).astype(np.float32))
    assert (pixel_unshuffle(pixel_shuffle(x, 2), 2).data == x.data).all()
    assert (pixel_shuffle(pixel_unshuffle(x, 2), 2).data == x.data).all()

    config = get_preset("dico-tiny")
    block = DiCoBlock(16, config, np.random.default_rng(1))
    bx = Tensor(rng.standard_normal((2, 16, 8, 8)).astype(np.float32))
    cond = Tensor(rng.standard_normal((2, config.cond_dim, 1, 1)).astype(np.float32))
    assert (block.forward(bx, cond).data == bx.data).all()

    model = build_model(config, 2)
    out = model.forward(
        Tensor(rng.standard_normal((2, 1, 16, 16)).astype(np.float32)),
        np.array([5, 10]),
        np.array([0, 1]),
    )
    assert (out.eps.data == 0).all() and (out.v.data == 0).all()

    sched = make_schedule("linear", T=50)
    opt = AdamW(model.named_parameters(), lr=1e-3)
    ema = Ema(model.named_parameters(), decay=0.99)
    data = make_toy_data(ToyDataSpec(n_images=8, seed=0))
    train_loop(model, data, sched, opt, ema, steps=2, batch_size=4,
               rng=np.random.default_rng(0))
    path = tmp_path / "ck.bin"
    save_checkpoint(path, model, opt, ema, step=2)
    clone = build_model(config, 3)
    opt2 = AdamW(clone.named_parameters(), lr=1e-3)
    ema2 = Ema(clone.named_parameters(), decay=0.99)
    assert load_checkpoint(path, clone, opt=opt2, ema=ema2) == 2
    for (name, p), (_, q) in zip(model.named_parameters(), clone.named_parameters()):
        assert (p.data == q.data).all(), name
        assert (opt.m[name] == opt2.m[name]).all(), name
        assert (ema.shadow[name] == ema2.shadow[name]).all(), name

    announce(
        "PASS criterion 5: structure - shuffle round-trips bitwise, zero-gate block "
        "is the identity, fresh head emits zeros, checkpoint round-trips bitwise"
    )


def orientation_accuracy(images: np.ndarray, labels: np.ndarray) -> float:
    """Classify stripes by whether the row or column profile carries the energy."""
    col_profile = images[:, 0].mean(axis=1)
    row_profile = images[:, 0].mean(axis=2)
    pred = (row_profile.var(axis=1) > col_profile.var(axis=1)).astype(np.int64)
    return float((pred == labels).mean())


def test_criterion_6_toy_generative_run(announce):
    """Train the 32-wide denoiser on 16x16 stripes, then sample with guidance.

    Thresholds frozen from the first passing calibration run: loss ratio must
    reach 0.5 by contract; orientation accuracy at 90% (floor 65% = clearly
    above chance).
    """
    steps, batch = 1000, 32
    start = time.perf_counter()
    data = make_toy_data(ToyDataSpec(n_images=1024, image_size=16, seed=0))
    model = build_model(get_preset("dico-tiny"), 0)
    sched = make_schedule("linear", 1000, 1e-4, 0.02, num_respaced=50)
    opt = AdamW(model.named_parameters(), lr=1e-3)
    ema = Ema(model.named_parameters(), decay=0.995)
    history = train_loop(
        model, data, sched, opt, ema, steps=steps, batch_size=batch,
        rng=np.random.default_rng(0),
    )
    simple = [h[1] for h in history]
    tenth = steps // 10
    first, last = float(np.mean(simple[:tenth])), float(np.mean(simple[-tenth:]))
    assert steps <= 5000 and batch == 32
    assert last <= 0.5 * first, f"loss ratio {last / first:.3f} > 0.5"

    labels = np.repeat(np.array([0, 1], dtype=np.int64), 200)
    with ema.swapped_in():
        images = p_sample_loop(
            model, (400, 1, 16, 16), labels, sched, np.random.default_rng(1),
            guidance=GuidanceConfig(scale=3.0, enabled=True),
        )
    acc = orientation_accuracy(images, labels)
    elapsed = time.perf_counter() - start
    assert acc >= 0.90, f"orientation accuracy {acc:.3f} < 0.90"
    assert acc > 0.65
    assert elapsed < 1800.0
    announce(
        f"PASS criterion 6: toy run - l_simple {first:.3f} -> {last:.3f} "
        f"(ratio {last / first:.2f} <= 0.5), guided accuracy {acc:.1%} >= 90% "
        f"over 400 samples in {elapsed / 60:.1f} min"
    )


def test_criterion_7_efficiency_direction(announce, tmp_path):
    points = ((256, 128), (1024, 128), (4096, 384))
    margins = []
    for n, d in points:
        conv = conv_module_macs_per_token(d, n)
        attn = attention_macs_per_token(d, n)
        assert conv < attn, (n, d)
        margins.append(f"(N={n},d={d}) {conv / attn:.2f}x")

    rows = throughput_bench(shapes=points, warmup=0, iters=1)
    csv_path = tmp_path / "bench.csv"
    csv_path.write_text(bench_rows_to_csv(rows))
    assert len(rows) == 6 and csv_path.exists()  # report-only, no timing assertion
    announce(
        "PASS criterion 7: per-token conv/attention MAC ratios "
        + ", ".join(margins) + "; timing CSV emitted (report-only)"
    )


def test_criterion_8_ablation_plumbing(announce, tmp_path):
    base = get_preset("dico-tiny")
    variants = {
        "kernel5": config_replace(base, kernel_size=5),
        "kernel7": config_replace(base, kernel_size=7),
        "relu": config_replace(base, activation="relu"),
        "no-cca": config_replace(base, use_cca=False),
    }
    data = make_toy_data(ToyDataSpec(n_images=8, seed=0))
    sched = make_schedule("linear", T=100)
    counts = {}
    for name, config in variants.items():
        model = build_model(config, 0)
        opt = AdamW(model.named_parameters(), lr=1e-3)
        ema = Ema(model.named_parameters(), decay=0.99)
        l_simple, l_vlb = train_step(
            model, (data.images, data.labels), sched, opt, ema, np.random.default_rng(0)
        )
        assert np.isfinite(l_simple) and np.isfinite(l_vlb), name
        report = count_macs_params(config, (16, 16))
        counts[name] = (report.total_macs, report.total_params)
    counts["base"] = (
        count_macs_params(base, (16, 16)).total_macs,
        count_macs_params(base, (16, 16)).total_params,
    )
    structural = {k: counts[k] for k in ("base", "kernel5", "kernel7", "no-cca")}
    assert len(set(structural.values())) == 4, structural
    assert counts["relu"] == counts["base"]  # activation changes no counts

    csvs = []
    for tag, config in (("with-cca", base), ("without-cca", variants["no-cca"])):
        model = build_model(config, 0)
        capture = {}
        with no_grad():
            model.forward(
                Tensor(data.images), np.zeros(8, dtype=np.int64), data.labels,
                capture=capture,
            )
        report = channel_activation_scores(capture, "stage5")
        path = tmp_path / f"channels-{tag}.csv"
        path.write_text(report.to_csv())
        assert path.read_text().startswith("channel,score\n")
        csvs.append(path.name)
    announce(
        "PASS criterion 8: ablations - kernel5/kernel7/no-cca/relu all train one step; "
        f"distinct counts {sorted(set(v[0] for v in structural.values()))} MACs; "
        f"activation CSVs {csvs}"
    )


def test_criterion_9_bitwise_determinism(announce, tmp_path, monkeypatch):
    """Two identically-configured pipeline runs in different directories give
    bitwise-identical artifact bytes."""
    argv_sets = (
        ["make-data", "--data-path", "toy.dids", "--n-images", "64",
         "--image-size", "16", "--seed", "0"],
        ["train", "--preset", "dico-tiny", "--data-path", "toy.dids",
         "--steps", "10", "--batch-size", "8", "--lr", "1e-3",
         "--image-size", "16", "--out-dir", "out", "--seed", "0"],
        ["sample", "--checkpoint", "out/model.dico", "--out-dir", "out",
         "--num-samples", "4", "--image-size", "16", "--sample-steps", "10",
         "--seed", "1"],
    )
    artifacts = (
        "toy.dids", "toy.dids.config", "out/model.dico", "out/model.dico.config",
        "out/loss.csv", "out/loss.png", "out/samples.pgm", "out/samples.npy",
        "out/samples.npy.config",
    )
    blobs = []
    for run in ("a", "b"):
        workdir = tmp_path / run
        workdir.mkdir()
        monkeypatch.chdir(workdir)
        for argv in argv_sets:
            assert main(list(argv)) == 0
        blobs.append({name: (workdir / name).read_bytes() for name in artifacts})
    mismatched = [name for name in artifacts if blobs[0][name] != blobs[1][name]]
    assert not mismatched, mismatched
    announce(
        f"PASS criterion 9: determinism - {len(artifacts)} artifacts "
        "(dataset, checkpoint, CSVs, PNG figure, PGM grid, tensor dump) bitwise identical"
    )
