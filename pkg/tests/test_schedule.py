"""Noise schedule construction and the DDIM step algebra."""

import math

import numpy as np
import pytest

from latentpatch import (ConditionEmbedding, ConfigurationError, GuidanceConfig,
                         LatentState, NoiseSchedule, build_schedule, cfg_noise,
                         ddim_invert_step, ddim_sample_step)


def test_single_beta_alpha_bar():
    s = NoiseSchedule.from_betas([0.1], ddim_steps=1)
    assert s.alpha_bar.tolist() == [0.9]


def test_three_step_alpha_bar_hand_product():
    s = NoiseSchedule.from_betas([0.1, 0.1, 0.1], ddim_steps=3)
    np.testing.assert_allclose(s.alpha_bar, [0.9, 0.81, 0.729], rtol=0, atol=1e-15)


def test_default_subsample_stride():
    s = build_schedule(1000, 0.00085, 0.012, 50)
    assert s.timestep_index.shape == (50,)
    assert s.timestep_index[0] == 0
    np.testing.assert_array_equal(np.diff(s.timestep_index), 20)


def test_scaled_linear_betas_match_direct_formula():
    s = build_schedule(100, 0.001, 0.02, 10)
    want = np.linspace(math.sqrt(0.001), math.sqrt(0.02), 100) ** 2
    np.testing.assert_allclose(s.betas, want, rtol=1e-15)
    np.testing.assert_allclose(s.alpha_bar, np.cumprod(1.0 - want), rtol=1e-15)


def test_alpha_ladder_starts_clean():
    s = build_schedule(100, 0.001, 0.02, 10)
    assert s.alpha_ladder[0] == 1.0
    assert s.alpha_ladder.shape == (11,)
    np.testing.assert_array_equal(s.alpha_ladder[1:], s.alpha_bar[s.timestep_index])
    assert np.all(np.diff(s.alpha_ladder) < 0)


@pytest.mark.parametrize("args", [
    (0, 0.001, 0.02, 1),        # no training steps
    (100, 0.02, 0.001, 10),     # min above max
    (100, 0.0, 0.02, 10),       # zero beta
    (100, 0.001, 1.0, 10),      # beta at 1
    (10, 0.001, 0.02, 11),      # more ddim steps than training steps
    (10, 0.001, 0.02, 0),       # no sampling steps
])
def test_build_schedule_rejects_bad_ranges(args):
    with pytest.raises(ConfigurationError):
        build_schedule(*args)


def test_schedule_rejects_nonmonotone_alpha_bar():
    betas = np.array([0.1, 0.2])
    with pytest.raises(ConfigurationError):
        NoiseSchedule(betas=betas, alpha_bar=np.array([0.9, 0.95]),
                      ddim_steps=2, timestep_index=np.array([0, 1]))


def test_schedule_csv_dump(tmp_path):
    s = NoiseSchedule.from_betas([0.1, 0.1, 0.1], ddim_steps=3)
    path = tmp_path / "schedule.csv"
    s.to_csv(path)
    lines = path.read_text().strip().splitlines()
    assert lines[0] == "rung,train_timestep,beta,alpha_bar"
    assert len(lines) == 5  # header + clean rung + 3 sampling rungs
    rung1 = lines[2].split(",")
    assert float(rung1[3]) == s.alpha_ladder[1]


class _StubBackend:
    """predict_noise keyed off the embedding's first entry."""

    def __init__(self, table):
        self.table = table
        self.calls = 0

    def predict_noise(self, z, t, e):
        self.calls += 1
        return np.full_like(z, self.table[float(e[0, 0])])


def _emb(v):
    return ConditionEmbedding(e=np.array([[v]]))


def test_cfg_noise_w1_skips_unconditional():
    backend = _StubBackend({1.0: 2.5, 0.0: -7.0})
    z = LatentState(z=np.zeros((1, 2, 2)), step=3)
    g = GuidanceConfig(w=1.0, cond=_emb(1.0), uncond=_emb(0.0))
    out = cfg_noise(z, 5, g, backend)
    np.testing.assert_array_equal(out, 2.5)
    assert backend.calls == 1  # the unconditional branch never ran


def test_cfg_noise_equal_embeddings_collapse():
    backend = _StubBackend({1.0: 0.3})
    z = LatentState(z=np.zeros((1, 2, 2)), step=0)
    for w in (0.0, 1.0, 7.5, 30.0):
        g = GuidanceConfig(w=w, cond=_emb(1.0), uncond=_emb(1.0))
        np.testing.assert_allclose(cfg_noise(z, 0, g, backend), 0.3)


def test_cfg_noise_default_guidance_scalar_case():
    backend = _StubBackend({1.0: 1.0, 0.0: 0.0})
    z = LatentState(z=np.zeros((1, 1, 1)), step=0)
    g = GuidanceConfig(w=7.5, cond=_emb(1.0), uncond=_emb(0.0))
    np.testing.assert_allclose(cfg_noise(z, 0, g, backend), 7.5)


def test_cfg_noise_affine_in_predictions():
    # coefficients are (w, 1-w): check against a direct evaluation
    rng = np.random.default_rng(7)
    for _ in range(10):
        w = float(rng.uniform(0, 12))
        ec, eu = rng.normal(size=2)
        backend = _StubBackend({1.0: ec, 0.0: eu})
        z = LatentState(z=np.zeros((1, 2, 2)), step=0)
        g = GuidanceConfig(w=w, cond=_emb(1.0), uncond=_emb(0.0))
        np.testing.assert_allclose(cfg_noise(z, 0, g, backend), w * ec + (1 - w) * eu,
                                   rtol=1e-15, atol=1e-15)


def test_guidance_weight_must_be_nonnegative():
    with pytest.raises(ConfigurationError):
        GuidanceConfig(w=-0.5, cond=_emb(1.0), uncond=_emb(0.0))


def test_invert_step_zero_noise_is_pure_rescale():
    s = NoiseSchedule.from_betas([0.1, 0.1, 0.1], ddim_steps=3)
    z = LatentState(z=np.full((1, 2, 2), 2.0), step=0)
    out = ddim_invert_step(z, np.zeros((1, 2, 2)), s, "paper")
    np.testing.assert_allclose(out.z, 2.0 * math.sqrt(0.9))
    assert out.step == 1


def test_invert_step_near_degenerate_schedule_is_identity():
    # equal neighbouring alpha-bars are forbidden by the type invariant,
    # so drive beta toward zero and check the limit behaviour
    s = NoiseSchedule.from_betas([1e-14, 1e-14], ddim_steps=2)
    z = LatentState(z=np.full((1, 2, 2), 3.0), step=0)
    out = ddim_invert_step(z, np.zeros((1, 2, 2)), s, "paper")
    np.testing.assert_allclose(out.z, 3.0, rtol=1e-10)


@pytest.mark.parametrize("formula", ["paper", "standard"])
def test_invert_step_scalar_hand_case(formula):
    # rung alpha-bars 0.81 -> 0.729 with z = eps = 1
    s = NoiseSchedule.from_betas([0.1, 0.1, 0.1], ddim_steps=3)
    z = LatentState(z=np.ones((1, 1, 1)), step=2)
    spread = math.sqrt(1 / 0.729 - 1) - math.sqrt(1 / 0.81 - 1)
    if formula == "standard":
        spread *= math.sqrt(0.729)
    want = math.sqrt(0.729 / 0.81) + spread
    out = ddim_invert_step(z, np.ones((1, 1, 1)), s, formula)
    np.testing.assert_allclose(out.z, want, rtol=1e-15)


@pytest.mark.parametrize("formula", ["paper", "standard"])
def test_sample_step_scalar_hand_case(formula):
    # the mirror image of the inversion hand case: solve for z_prev
    s = NoiseSchedule.from_betas([0.1, 0.1, 0.1], ddim_steps=3)
    spread = math.sqrt(1 / 0.729 - 1) - math.sqrt(1 / 0.81 - 1)
    if formula == "standard":
        spread *= math.sqrt(0.729)
    z = LatentState(z=np.ones((1, 1, 1)), step=3)
    out = ddim_sample_step(z, np.ones((1, 1, 1)), s, formula)
    np.testing.assert_allclose(out.z, (1.0 - spread) / math.sqrt(0.729 / 0.81), rtol=1e-15)
    assert out.step == 2


def test_sample_step_zero_noise():
    s = NoiseSchedule.from_betas([0.1, 0.1], ddim_steps=2)
    z = LatentState(z=np.full((1, 2, 2), 5.0), step=1)
    out = ddim_sample_step(z, np.zeros((1, 2, 2)), s)
    np.testing.assert_allclose(out.z, 5.0 / math.sqrt(0.9))


def test_sample_below_zero_rejected():
    s = NoiseSchedule.from_betas([0.1], ddim_steps=1)
    z = LatentState(z=np.zeros((1, 1, 1)), step=0)
    with pytest.raises(ConfigurationError):
        ddim_sample_step(z, np.zeros((1, 1, 1)), s)


def test_unknown_formula_variant_rejected():
    s = NoiseSchedule.from_betas([0.1], ddim_steps=1)
    z = LatentState(z=np.zeros((1, 1, 1)), step=0)
    with pytest.raises(ConfigurationError):
        ddim_invert_step(z, np.zeros((1, 1, 1)), s, formula="midpoint")


@pytest.mark.parametrize("formula", ["paper", "standard"])
def test_round_trip_identity_random_schedules(formula):
    """invert then sample with the same noise tensor returns the input."""
    rng = np.random.default_rng(42)
    for trial in range(20):
        t_train = int(rng.integers(4, 60))
        bmin = float(rng.uniform(1e-4, 5e-3))
        bmax = float(rng.uniform(6e-3, 0.05))
        steps = int(rng.integers(1, t_train + 1))
        s = build_schedule(t_train, bmin, bmax, steps)
        z = LatentState(z=rng.normal(size=(3, 4, 4)), step=int(rng.integers(0, steps)))
        eps = rng.normal(size=(3, 4, 4))
        up = ddim_invert_step(z, eps, s, formula)
        back = ddim_sample_step(up, eps, s, formula)
        assert back.step == z.step
        err = np.abs(back.z - z.z).max() / max(np.abs(z.z).max(), 1e-12)
        assert err < 1e-13, f"trial {trial}: round-trip error {err}"


def test_latent_state_rejects_negative_step():
    with pytest.raises(ConfigurationError):
        LatentState(z=np.zeros((1, 1, 1)), step=-1)


def test_embedding_must_be_two_dimensional():
    with pytest.raises(ConfigurationError):
        ConditionEmbedding(e=np.zeros(4))
