"""Blend arithmetic, the joint objective, key divergence against its closed
form, and cell-grid verification with a majority-vote oracle."""

import numpy as np
import pytest

from dualmark import autodiff as ad
from dualmark import diffusion as df
from dualmark import model_watermark as mw
from dualmark import payload as pl
from dualmark.autodiff import RngStream, Tensor
from dualmark.errors import RejectedInput, RejectedKey, ShapeError

from conftest import gradcheck


def make_key(shape=(1, 4, 4), gamma=0.7, seed=5):
    return mw.make_trigger_key(shape, seed=seed, gamma_kappa=gamma)


class TestBlendState:
    def test_gamma_one_limit_returns_state(self, rng):
        z = rng.gaussian((1, 4, 4))
        key = mw.TriggerKey(kappa=rng.gaussian((1, 4, 4)), gamma_kappa=1 - 1e-12,
                            seed=0)
        assert np.allclose(mw.blend_state(z, key), z, atol=1e-9)

    def test_gamma_zero_is_rejected_boundary(self, rng):
        # gamma = 0 violates the key invariant (mathematically it would
        # return kappa); the constructor refuses it.
        with pytest.raises(RejectedInput):
            mw.TriggerKey(kappa=rng.gaussian((4, 4)), gamma_kappa=0.0, seed=0)

    def test_half_blend_arithmetic(self):
        key = mw.TriggerKey(kappa=np.ones((2, 2)), gamma_kappa=0.5, seed=0)
        out = mw.blend_state(np.zeros((2, 2)), key)
        assert np.allclose(out, 0.5)

    def test_shape_mismatch_rejected(self, rng):
        key = make_key((1, 4, 4))
        with pytest.raises(ShapeError):
            mw.blend_state(rng.gaussian((1, 5, 5)), key)

    def test_invertibility(self, rng):
        key = make_key((1, 6, 6), gamma=0.7)
        z = rng.gaussian((1, 6, 6))
        blended = mw.blend_state(z, key)
        assert np.allclose(mw.unblend_state(blended, key), z, atol=1e-12)


class TestWdpTrainState:
    def setup_method(self):
        self.sched = df.make_schedule()

    def test_composition_identity(self, rng):
        key = make_key((1, 8, 8))
        z0 = rng.gaussian((2, 1, 8, 8))
        eps = rng.gaussian((2, 1, 8, 8))
        t = 37
        composed = mw.blend_state(df.q_sample(z0, t, eps, self.sched), key)
        direct = mw.wdp_train_state(z0, t, eps, self.sched, key)
        assert np.array_equal(composed, direct)

    def test_alpha_bar_one_limit(self, rng):
        s = df.make_schedule(T=2, beta_start=1e-15, beta_end=1e-15)
        key = make_key((1, 4, 4), gamma=0.7)
        z0 = rng.gaussian((1, 1, 4, 4))
        out = mw.wdp_train_state(z0, 1, np.zeros_like(z0), s, key)
        expected = 0.7 * z0 + 0.3 * key.kappa
        assert np.allclose(out, expected, atol=1e-7)

    def test_direct_arithmetic(self):
        # gamma=0.8, abar=0.25, z0=1, eps=0, kappa=-1 -> 0.8*0.5 - 0.2 = 0.2
        sched = df.NoiseSchedule(T=1, betas=np.array([0.75]), alphas=np.array([0.25]),
                                 alpha_bars=np.array([0.25]), sigmas=np.array([0.5]))
        key = mw.TriggerKey(kappa=-np.ones((2, 2)), gamma_kappa=0.8, seed=0)
        out = mw.wdp_train_state(np.ones((2, 2)), 1, np.zeros((2, 2)), sched, key)
        assert np.allclose(out, 0.2)


class TestWdpLoss:
    def setup_method(self):
        self.sched = df.make_schedule()
        self.key = make_key((1, 6, 6))
        self.cfg = mw.WDPConfig(gamma_eps=1.0, steps=1)

    def test_perfect_stub_gives_zero(self, rng):
        eps = rng.gaussian((1, 1, 6, 6))
        eps_w = rng.gaussian((1, 1, 6, 6))
        calls = []

        class Stub:
            def __call__(self, z, t):
                calls.append(t)
                return Tensor(eps if len(calls) % 2 == 0 else eps_w)

        # watermark term evaluates first inside wdp_loss
        loss = mw.wdp_loss(Stub(), rng.gaussian((1, 1, 6, 6)),
                           rng.gaussian((1, 1, 6, 6)), 10, eps, eps_w,
                           self.sched, self.key, self.cfg)
        assert float(loss.data) == 0.0

    def test_gamma_eps_zero_equals_watermark_term_alone(self, rng):
        from dualmark.nets import Denoiser
        model = Denoiser(seed=3, hidden=4, emb_dim=4)
        z0 = rng.gaussian((1, 1, 6, 6))
        z0w = rng.gaussian((1, 1, 6, 6))
        eps = rng.gaussian((1, 1, 6, 6))
        eps_w = rng.gaussian((1, 1, 6, 6))
        cfg0 = mw.WDPConfig(gamma_eps=0.0, steps=1)
        loss0 = mw.wdp_loss(model, z0, z0w, 5, eps, eps_w, self.sched, self.key, cfg0)
        zw = mw.blend_state(df.q_sample(z0w, 5, eps_w, self.sched), self.key)
        with ad.no_grad():
            wm_only = ad.mse(Tensor(eps_w), model(Tensor(zw), 5))
        assert float(loss0.data) == pytest.approx(float(wm_only.data), abs=1e-15)

    def test_gradient_matches_finite_differences(self, rng):
        from dualmark.nets import Denoiser
        model = Denoiser(seed=4, hidden=4, emb_dim=4)
        z0 = rng.gaussian((1, 1, 6, 6)) * 0.5
        z0w = rng.gaussian((1, 1, 6, 6)) * 0.5
        eps = rng.gaussian((1, 1, 6, 6))
        eps_w = rng.gaussian((1, 1, 6, 6))
        gradcheck(lambda: mw.wdp_loss(model, z0, z0w, 9, eps, eps_w,
                                      self.sched, self.key, self.cfg),
                  model.param_list())


class TestKeyDivergence:
    def test_gamma_near_one_gives_near_zero(self):
        key = mw.TriggerKey(kappa=2.0 + RngStream(1).gaussian((1, 8, 8)),
                            gamma_kappa=1 - 1e-9, seed=1)
        score = mw.key_divergence(key, RngStream(2), n_samples=2000)
        assert score < 0.05

    def test_constant_kappa_closed_form(self):
        # kappa = c constant: mu_blend = (1-g)c per dim, sd_blend = g
        c, g, dim = 1.5, 0.7, 64
        key = mw.TriggerKey(kappa=np.full((1, 8, 8), c), gamma_kappa=g, seed=0)
        score = mw.key_divergence(key, RngStream(3), n_samples=20000)
        analytic = dim * (((1 - g) * c) ** 2 + (g - 1) ** 2)
        assert score == pytest.approx(analytic, rel=0.05)

    def test_sample_count_validated(self):
        key = make_key()
        with pytest.raises(RejectedInput):
            mw.key_divergence(key, RngStream(1), n_samples=50)

    def test_accepted_keys_exceed_threshold(self):
        for seed in range(5):
            key = mw.make_trigger_key((1, 16, 16), seed=seed, gamma_kappa=0.7)
            threshold = mw.default_divergence_threshold((1, 16, 16), 0.7)
            assert key.divergence_score >= threshold

    def test_embedding_rejects_low_divergence_key(self, rng):
        key = mw.TriggerKey(kappa=np.zeros((1, 16, 16)), gamma_kappa=0.95, seed=0)
        mw.key_divergence(key, RngStream(1))
        cfg = mw.WDPConfig(steps=1)
        from dualmark.nets import Denoiser
        with pytest.raises(RejectedKey):
            mw.embed_model_watermark(Denoiser(seed=1, hidden=4, emb_dim=4),
                                     rng.gaussian((4, 1, 16, 16)),
                                     rng.gaussian((16, 16)), key, cfg,
                                     RngStream(2), df.make_schedule())


class TestVerify:
    def setup_method(self):
        rec = pl.MetadataRecord(ipv4=bytes([10, 0, 0, 1]), timestamp=1700000000,
                                model_id=b"\x01\x01\x02\x02")
        self.bm = pl.encode_payload(rec, B=16, c=3)

    def test_rendered_reference_scores_one(self):
        v = mw.verify_model_watermark(self.bm.render(), self.bm)
        assert v.bit_accuracy == 1.0
        assert v.accepted
        assert v.matched_bits == v.total_bits == 256

    def test_inverted_reference_scores_zero(self):
        v = mw.verify_model_watermark(1.0 - self.bm.render(), self.bm)
        assert v.bit_accuracy == 0.0
        assert not v.accepted

    def test_ten_percent_pixel_flips_majority_vote(self):
        # Brute-force majority-vote oracle against the implementation.
        img = self.bm.render()
        rng = RngStream(17)
        n = img.size
        flips = rng.integers(0, n, (int(0.10 * n),))
        noisy = img.copy()
        noisy.reshape(-1)[flips] = 1.0 - noisy.reshape(-1)[flips]
        cells_expected = np.zeros((16, 16), dtype=np.uint8)
        dark = noisy < 0.5
        for r in range(16):
            for ccol in range(16):
                block = dark[r * 3:(r + 1) * 3, ccol * 3:(ccol + 1) * 3]
                cells_expected[r, ccol] = 1 if block.mean() >= 0.5 else 0
        got = pl.cells_from_image(noisy, 16, 3)
        assert np.array_equal(got, cells_expected)
        v = mw.verify_model_watermark(noisy, self.bm)
        assert v.bit_accuracy >= 0.95

    def test_zero_step_budget_leaves_model_unchanged(self, rng):
        from dualmark.nets import Denoiser
        model = Denoiser(seed=2, hidden=4, emb_dim=4)
        before = {k: v.copy() for k, v in model.state_dict().items()}
        key = make_key((1, 16, 16))
        cfg = mw.WDPConfig(steps=0)
        mw.embed_model_watermark(model, rng.gaussian((4, 1, 16, 16)),
                                 rng.gaussian((16, 16)), key, cfg, RngStream(1),
                                 df.make_schedule())
        after = model.state_dict()
        for name in before:
            assert np.array_equal(before[name], after[name])

    def test_resolution_mismatch_rejected(self):
        with pytest.raises(RejectedInput):
            mw.verify_model_watermark(np.zeros((30, 30)), self.bm)

    def test_extraction_determinism(self):
        from dualmark.nets import Denoiser
        model = Denoiser(seed=3, hidden=6, emb_dim=6)
        key = make_key((1, 16, 16))
        sched = df.make_schedule(T=10)
        a = mw.extract_model_watermark(model, key, sched, RngStream(4))
        b = mw.extract_model_watermark(model, key, sched, RngStream(4))
        assert np.array_equal(a, b)
