"""Tests for the optimizer, EMA shadows, toy stripe data, and the training loop."""

import numpy as np
import pytest

from dico.diffusion import make_schedule
from dico.errors import ConfigError, DimensionError, NumericError
from dico.modules import build_model, get_preset
from dico.tensor import Tensor, backward
from dico.train import (
    AdamW,
    Ema,
    ToyDataSpec,
    hflip_augment,
    make_toy_data,
    train_loop,
    train_step,
)


def named(*tensors):
    return [(f"p{i}", t) for i, t in enumerate(tensors)]


class TestAdamW:
    def test_zero_grad_clears(self):
        p = Tensor(np.ones((2, 1, 1, 1), np.float32))
        p.grad = np.ones_like(p.data)
        opt = AdamW(named(p))
        opt.zero_grad()
        assert p.grad is None

    def test_first_step_closed_form(self):
        """After one step the update is g / (|g| + eps), scaled by lr."""
        rng = np.random.default_rng(0)
        p = Tensor(rng.standard_normal((3, 2, 1, 1)))
        g = rng.standard_normal(p.data.shape)
        before = p.data.copy()
        p.grad = g.copy()
        opt = AdamW(named(p), lr=0.01, eps=1e-8)
        opt.step()
        expect = before - 0.01 * g / (np.abs(g) + 1e-8)
        np.testing.assert_allclose(p.data, expect, rtol=1e-12)

    def test_matches_manual_adam_bitwise(self):
        """weight_decay=0 replays plain Adam: mirror the op order in numpy."""
        rng = np.random.default_rng(1)
        p = Tensor(rng.standard_normal((4, 3, 2, 2)).astype(np.float32))
        ref = p.data.copy()
        m = np.zeros_like(ref)
        v = np.zeros_like(ref)
        lr, b1, b2, eps = 3e-3, 0.9, 0.999, 1e-8
        opt = AdamW(named(p), lr=lr, betas=(b1, b2), eps=eps, weight_decay=0.0)
        for k in range(1, 6):
            g = rng.standard_normal(ref.shape).astype(np.float32)
            p.grad = g.copy()
            opt.step()
            np.multiply(m, b1, out=m)
            m += (1.0 - b1) * g
            np.multiply(v, b2, out=v)
            v += (1.0 - b2) * (g * g)
            ref -= lr * ((m / (1.0 - b1**k)) / (np.sqrt(v / (1.0 - b2**k)) + eps))
            np.testing.assert_array_equal(p.data, ref)

    def test_weight_decay_is_decoupled(self):
        """Decay shifts the update by lr*wd*p and leaves the moments untouched."""
        base = np.linspace(-1.0, 1.0, 8).reshape(2, 2, 2, 1)
        g = np.full_like(base, 0.5)
        pa, pb = Tensor(base.copy()), Tensor(base.copy())
        oa = AdamW(named(pa), lr=0.01, weight_decay=0.0)
        ob = AdamW(named(pb), lr=0.01, weight_decay=0.1)
        pa.grad, pb.grad = g.copy(), g.copy()
        oa.step()
        ob.step()
        np.testing.assert_array_equal(oa.m["p0"], ob.m["p0"])
        np.testing.assert_array_equal(oa.v["p0"], ob.v["p0"])
        np.testing.assert_allclose(pa.data - pb.data, 0.01 * 0.1 * base, rtol=1e-12)

    def test_quadratic_bowl_converges(self):
        p = Tensor(np.full((1, 1, 1, 1), 5.0), requires_grad=True)
        opt = AdamW(named(p), lr=0.1)
        for _ in range(300):
            opt.zero_grad()
            diff = p + (-3.0)
            backward((diff * diff).sum())
            opt.step()
        assert abs(p.data.item() - 3.0) < 1e-3

    def test_missing_grad_is_zero_update(self):
        p = Tensor(np.ones((2, 1, 1, 1)))
        before = p.data.copy()
        opt = AdamW(named(p), lr=0.5)
        opt.step()
        np.testing.assert_array_equal(p.data, before)
        assert opt.step_count == 1

    def test_nonfinite_grad_names_parameter(self):
        p = Tensor(np.ones((2, 1, 1, 1)))
        p.grad = np.array([[[[np.inf]]], [[[0.0]]]])
        opt = AdamW(named(p))
        with pytest.raises(NumericError, match="p0"):
            opt.step()

    def test_lr_zero_moves_nothing(self):
        p = Tensor(np.ones((2, 1, 1, 1)))
        p.grad = np.full_like(p.data, 2.0)
        opt = AdamW(named(p), lr=0.0)
        opt.step()
        np.testing.assert_array_equal(p.data, np.ones_like(p.data))
        assert np.any(opt.m["p0"] != 0.0)


class TestEma:
    def test_geometric_closed_form(self):
        """Constant params: shadow_k = d^k shadow_0 + (1 - d^k) param."""
        p = Tensor(np.full((1, 1, 1, 2), 2.0))
        ema = Ema(named(p), decay=0.9)
        ema.shadow["p0"] = np.zeros_like(p.data)
        for _ in range(10):
            ema.update()
        expect = (1.0 - 0.9**10) * 2.0
        np.testing.assert_allclose(ema.shadow["p0"], expect, rtol=1e-12)

    def test_decay_one_is_frozen(self):
        p = Tensor(np.zeros((1, 1, 1, 1)))
        ema = Ema(named(p), decay=1.0)
        ema.shadow["p0"] = np.full_like(p.data, 7.0)
        p.data[...] = 3.0
        ema.update()
        np.testing.assert_array_equal(ema.shadow["p0"], np.full_like(p.data, 7.0))

    @pytest.mark.parametrize("decay", [0.0, -0.5, 1.5])
    def test_invalid_decay_rejected(self, decay):
        p = Tensor(np.zeros((1, 1, 1, 1)))
        with pytest.raises(ConfigError):
            Ema(named(p), decay=decay)

    def test_swapped_in_restores_exactly(self):
        p = Tensor(np.full((1, 1, 2, 2), 1.0))
        live = p.data
        ema = Ema(named(p), decay=0.5)
        ema.shadow["p0"] = np.full_like(p.data, -4.0)
        with ema.swapped_in():
            np.testing.assert_array_equal(p.data, np.full_like(live, -4.0))
        assert p.data is live

    def test_load_state_validation(self):
        p = Tensor(np.zeros((1, 1, 2, 2)))
        ema = Ema(named(p))
        with pytest.raises(DimensionError, match="missing"):
            ema.load_state({})
        with pytest.raises(DimensionError, match="shape"):
            ema.load_state({"p0": np.zeros((1, 1, 3, 3))})

    def test_state_seeds_new_instance(self):
        p = Tensor(np.ones((1, 1, 1, 3)))
        ema = Ema(named(p), decay=0.9)
        ema.shadow["p0"] = np.array([[[[1.0, 2.0, 3.0]]]])
        clone = Ema(named(p), decay=0.9, shadow=ema.state())
        np.testing.assert_array_equal(clone.shadow["p0"], ema.shadow["p0"])


class TestToyData:
    def test_shapes_and_dtypes(self):
        data = make_toy_data(ToyDataSpec(n_images=10, image_size=8, channels=3))
        assert data.images.shape == (10, 3, 8, 8)
        assert data.images.dtype == np.float32
        assert data.labels.shape == (10,)
        assert data.labels.dtype == np.int64

    def test_labels_alternate(self):
        data = make_toy_data(ToyDataSpec(n_images=9))
        np.testing.assert_array_equal(data.labels, np.arange(9) % 2)

    def test_values_clipped_to_unit_range(self):
        data = make_toy_data(ToyDataSpec(n_images=64, noise=0.9))
        assert data.images.min() >= -1.0
        assert data.images.max() <= 1.0

    def test_stripe_orientations(self):
        """Class 0 is vertical bars (rows repeat); class 1 horizontal (columns repeat)."""
        data = make_toy_data(ToyDataSpec(n_images=8, image_size=8, noise=0.0))
        for img, label in zip(data.images[:, 0], data.labels):
            if label == 0:
                np.testing.assert_array_equal(img, np.broadcast_to(img[0:1, :], img.shape))
            else:
                np.testing.assert_array_equal(img, np.broadcast_to(img[:, 0:1], img.shape))

    def test_noise_free_values_are_square_wave(self):
        spec = ToyDataSpec(n_images=6, noise=0.0, amplitude=0.8)
        data = make_toy_data(spec)
        assert set(np.unique(data.images)) == {np.float32(-0.8), np.float32(0.8)}

    def test_stripe_period_repeats(self):
        spec = ToyDataSpec(n_images=4, image_size=16, noise=0.0, stripe_period=4)
        data = make_toy_data(spec)
        img = data.images[0, 0]
        row = img[0]
        np.testing.assert_array_equal(row[:-4], row[4:])
        assert np.all(row[:-2] == -row[2:])

    def test_channels_repeat(self):
        data = make_toy_data(ToyDataSpec(n_images=4, channels=2))
        np.testing.assert_array_equal(data.images[:, 0], data.images[:, 1])

    def test_seed_determinism(self):
        a = make_toy_data(ToyDataSpec(seed=5))
        b = make_toy_data(ToyDataSpec(seed=5))
        np.testing.assert_array_equal(a.images, b.images)
        np.testing.assert_array_equal(a.labels, b.labels)

    @pytest.mark.parametrize(
        "bad",
        [
            {"n_images": 0},
            {"image_size": 10},
            {"channels": 0},
            {"num_classes": 3},
            {"stripe_period": 3},
            {"noise": -0.1},
            {"amplitude": 0.0},
        ],
    )
    def test_spec_validation(self, bad):
        with pytest.raises(ConfigError):
            make_toy_data(ToyDataSpec(**bad))


class TestHflip:
    def test_p_zero_is_noop(self):
        batch = np.arange(16.0).reshape(1, 1, 4, 4)
        out = hflip_augment(batch, np.random.default_rng(0), p=0.0)
        assert out is batch

    def test_p_one_mirrors_every_image(self):
        rng = np.random.default_rng(0)
        batch = rng.standard_normal((5, 2, 4, 4))
        out = hflip_augment(batch, np.random.default_rng(1), p=1.0)
        np.testing.assert_array_equal(out, batch[:, :, :, ::-1])

    def test_double_flip_is_identity(self):
        rng = np.random.default_rng(2)
        batch = rng.standard_normal((3, 1, 4, 4))
        once = hflip_augment(batch, np.random.default_rng(0), p=1.0)
        twice = hflip_augment(once, np.random.default_rng(0), p=1.0)
        np.testing.assert_array_equal(twice, batch)

    def test_partial_flip_rows_are_original_or_mirror(self):
        rng = np.random.default_rng(3)
        batch = rng.standard_normal((16, 1, 4, 4))
        out = hflip_augment(batch, np.random.default_rng(4), p=0.5)
        same = [np.array_equal(out[i], batch[i]) for i in range(16)]
        flipped = [np.array_equal(out[i], batch[i, :, :, ::-1]) for i in range(16)]
        assert all(s or f for s, f in zip(same, flipped))
        assert any(flipped) and any(same)

    def test_rank_validated(self):
        with pytest.raises(DimensionError):
            hflip_augment(np.zeros((4, 4, 4)), np.random.default_rng(0))


def micro_setup(seed=0, lr=1e-3):
    config = get_preset("dico-micro")
    model = build_model(config, seed)
    sched = make_schedule("linear", T=100)
    opt = AdamW(model.named_parameters(), lr=lr)
    ema = Ema(model.named_parameters(), decay=0.99)
    data = make_toy_data(ToyDataSpec(n_images=32, image_size=8, seed=seed))
    return model, sched, opt, ema, data


class TestTrainStep:
    def test_returns_finite_floats(self):
        model, sched, opt, ema, data = micro_setup()
        rng = np.random.default_rng(0)
        l_simple, l_vlb = train_step(
            model, (data.images[:4], data.labels[:4]), sched, opt, ema, rng
        )
        assert isinstance(l_simple, float) and np.isfinite(l_simple)
        assert isinstance(l_vlb, float) and np.isfinite(l_vlb)
        assert opt.step_count == 1

    def test_loss_decreases_over_short_run(self):
        model, sched, opt, ema, data = micro_setup(lr=3e-3)
        history = train_loop(
            model, data, sched, opt, ema, steps=60, batch_size=8,
            rng=np.random.default_rng(0),
        )
        simple = [h[1] for h in history]
        assert np.mean(simple[-10:]) < np.mean(simple[:10])

    def test_two_runs_bitwise_identical(self):
        histories = []
        for _ in range(2):
            model, sched, opt, ema, data = micro_setup(seed=7)
            histories.append(
                train_loop(
                    model, data, sched, opt, ema, steps=5, batch_size=4,
                    rng=np.random.default_rng(7),
                )
            )
        assert histories[0] == histories[1]

    def test_numeric_failure_reports_step(self):
        model, sched, opt, ema, data = micro_setup()
        next(iter(model.named_parameters()))[1].data.fill(np.nan)
        with pytest.raises(NumericError, match="step 0"):
            train_loop(
                model, data, sched, opt, ema, steps=1, batch_size=4,
                rng=np.random.default_rng(0),
            )

    def test_history_and_log_callback_agree(self):
        model, sched, opt, ema, data = micro_setup()
        seen = []
        history = train_loop(
            model, data, sched, opt, ema, steps=3, batch_size=4,
            rng=np.random.default_rng(1),
            log_fn=lambda s, a, b: seen.append((s, a, b)),
        )
        assert history == seen
        assert [h[0] for h in history] == [0, 1, 2]
