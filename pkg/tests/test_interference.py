import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from innlab import autodiff as ad
from innlab.autodiff import Tensor
from innlab.errors import ConfigError, DimensionError, LabelError
from innlab.interference import (
    RECIPES,
    STREAM_EVAL,
    STREAM_TRAIN,
    Background,
    InterferenceConfig,
    apply_interference,
    decode_label,
    draw_batch,
    draw_realization,
    encode_label,
    generate_backgrounds,
    make_background,
    overlay,
    salt_pepper,
    white_noise,
)

F32_EPS = float(np.finfo(np.float32).eps)


def rand_images(seed, shape=(1, 8, 8)):
    return np.random.default_rng(seed).random(shape, dtype=np.float32)


# ---------------------------------------------------------------------------
# white noise


def test_white_noise_beta_zero_is_identity():
    x = rand_images(0)
    n = rand_images(1)
    assert white_noise(x, 0.0, n).data.tobytes() == x.tobytes()


def test_white_noise_worked_example():
    out = white_noise(np.full((1, 1, 1), 0.5), 0.4, np.full((1, 1, 1), 0.25, np.float32))
    assert out.data.item() == pytest.approx(0.6 / 1.4, rel=1e-6)


def test_white_noise_top_of_range():
    n = np.full((1, 2, 2), np.nextafter(np.float32(1), np.float32(0)))
    out = white_noise(np.ones((1, 2, 2)), 0.4, n).data
    assert (out <= 1.0).all() and (out > 0.9999).all()


def test_white_noise_formula_1000_triples():
    rng = np.random.default_rng(11)
    worst = 0.0
    for _ in range(1000):
        x = rng.random((1, 3, 3)).astype(np.float32)
        n = rng.random((1, 3, 3)).astype(np.float32)
        beta = float(rng.uniform(0, 2))
        got = white_noise(x, beta, n).data.astype(np.float64)
        ref = (x.astype(np.float64) + beta * n) / (1 + beta)
        worst = max(worst, float(np.max(np.abs(got - ref) / np.maximum(np.abs(ref), 1e-30))))
        assert 0.0 <= got.min() and got.max() <= 1.0
    assert worst <= 4 * F32_EPS


def test_white_noise_negative_beta():
    with pytest.raises(ConfigError):
        white_noise(rand_images(0), -0.1, rand_images(1))


def test_white_noise_gradient_is_scaled():
    x = Tensor(rand_images(2), requires_grad=True)
    with ad.ComputationTape() as tape:
        ad.backward(white_noise(x, 0.4, rand_images(3)).sum(), tape)
    np.testing.assert_allclose(x.grad, np.full(x.shape, 1 / 1.4), rtol=1e-6)


# ---------------------------------------------------------------------------
# salt and pepper


def test_salt_pepper_empty_and_full_mask():
    x = rand_images(4, (3, 6, 6))
    none = np.zeros((6, 6), bool)
    assert salt_pepper(x, 0.0, none, none).data.tobytes() == x.tobytes()
    full = np.ones((6, 6), bool)
    vals = np.random.default_rng(0).random((6, 6)) < 0.5
    out = salt_pepper(x, 1.0, full, vals).data
    assert set(np.unique(out)) <= {0.0, 1.0}
    # channels are replaced jointly
    assert (out == out[0:1]).all()
    np.testing.assert_array_equal(out[0], vals.astype(np.float32))


def test_salt_pepper_fraction_concentrates():
    cfg = InterferenceConfig(alpha=0.0, beta=0.0, gamma=0.4, K=1, master_seed=0)
    fractions = []
    for seed in range(1000):
        real = draw_realization(InterferenceConfig(0.0, 0.0, 0.4, 1, seed), (1, 32, 32), image_id=0)
        fractions.append(real.sp_mask.mean())
    assert abs(np.mean(fractions) - cfg.gamma) <= 0.01
    salt = np.mean([draw_realization(cfg, (1, 32, 32), i).sp_value.mean() for i in range(200)])
    assert abs(salt - 0.5) < 0.01


def test_salt_pepper_validates():
    x = rand_images(0)
    m = np.zeros((8, 8), bool)
    with pytest.raises(ConfigError):
        salt_pepper(x, 1.5, m, m)
    with pytest.raises(DimensionError):
        salt_pepper(x, 0.5, np.zeros((4, 8), bool), np.zeros((4, 8), bool))


# ---------------------------------------------------------------------------
# overlay


def test_overlay_examples():
    x = rand_images(5)
    assert overlay(x, rand_images(6), 0.0).data.tobytes() == x.tobytes()
    out = overlay(np.zeros((1, 4, 4)), np.ones((1, 4, 4), np.float32), 0.5).data
    np.testing.assert_array_equal(out, np.full((1, 4, 4), 0.5, np.float32))


def test_overlay_range_on_1000_inputs():
    rng = np.random.default_rng(7)
    for _ in range(1000):
        alpha = float(rng.uniform(0, 1))
        out = overlay(rng.random((1, 4, 4)), rng.random((1, 4, 4)).astype(np.float32), alpha).data
        assert out.min() >= 0.0 and out.max() <= np.float32(1 + alpha)


def test_overlay_errors():
    with pytest.raises(DimensionError):
        overlay(rand_images(0), np.zeros((1, 4, 4), np.float32), 0.5)
    with pytest.raises(ConfigError):
        overlay(rand_images(0), rand_images(1), -1.0)


def test_associativity_on_dyadic_grid():
    # multiples of 1/256 below 4 add exactly in float32, so the two groupings agree bit for bit
    rng = np.random.default_rng(9)
    for _ in range(200):
        x = Tensor(rng.integers(0, 257, (1, 8, 8)) / 256)
        d = Tensor(rng.integers(-16, 17, (1, 8, 8)) / 256)
        y = rng.integers(0, 257, (1, 8, 8)) / 256
        ay = Tensor(np.float32(0.5) * y.astype(np.float32))
        left = (x + d) + ay
        right = x + (d + ay)
        assert left.data.tobytes() == right.data.tobytes()


# ---------------------------------------------------------------------------
# full pipeline


def test_identity_config_is_identity():
    cfg = InterferenceConfig.identity()
    bgs = [Background(np.zeros((1, 8, 8), np.float32), 0, "zero", 0)]
    x = rand_images(8, (4, 1, 8, 8))
    real = draw_batch(cfg, (1, 8, 8), range(4))
    assert apply_interference(x, cfg, bgs, real).data.tobytes() == x.tobytes()
    # the generated gray background contributes nothing at alpha=0
    gray = generate_backgrounds(1, 1, 8, 8)
    assert apply_interference(x, cfg, gray, real).data.tobytes() == x.tobytes()


def test_pipeline_equals_manual_composition():
    cfg = InterferenceConfig(0.5, 0.4, 0.4, 8, master_seed=3)
    bgs = generate_backgrounds(8, 1, 16, 16, 3)
    x = rand_images(9, (5, 1, 16, 16))
    real = draw_batch(cfg, (1, 16, 16), range(5))
    got = apply_interference(x, cfg, bgs, real).data
    for i in range(5):
        step = white_noise(x[i], cfg.beta, real.white[i])
        step = salt_pepper(step, cfg.gamma, real.sp_mask[i], real.sp_value[i])
        step = overlay(step, bgs[real.background_index[i]].pixels, cfg.alpha)
        assert step.data.tobytes() == got[i].tobytes()
        assert got[i].min() >= 0 and got[i].max() <= 1.5


def test_pipeline_checks_background_count():
    cfg = InterferenceConfig(0.5, 0.4, 0.4, 8)
    real = draw_realization(cfg, (1, 8, 8), 0)
    with pytest.raises(ConfigError):
        apply_interference(rand_images(0), cfg, generate_backgrounds(4, 1, 8, 8), real)


_SNIPPET = """
import sys
from innlab.interference import *
import numpy as np
cfg = InterferenceConfig(0.5, 0.4, 0.4, 8, master_seed=1234)
x = np.linspace(0, 1, 2 * 3 * 16 * 16, dtype=np.float32).reshape(2, 3, 16, 16)
real = draw_batch(cfg, (3, 16, 16), [5, 9], counter=2)
sys.stdout.write(apply_interference(x, cfg, generate_backgrounds(8, 3, 16, 16, 1234), real).data.tobytes().hex())
"""


def test_pipeline_bit_identical_across_processes():
    runs = [subprocess.run([sys.executable, "-c", _SNIPPET], capture_output=True, text=True, check=True).stdout for _ in range(2)]
    assert runs[0] == runs[1] and len(runs[0]) > 0


def test_realization_keyed_by_seed_id_counter():
    cfg = InterferenceConfig(0.5, 0.4, 0.4, 8, master_seed=5)
    a = draw_realization(cfg, (1, 8, 8), 3, 1)
    b = draw_realization(cfg, (1, 8, 8), 3, 1)
    assert a.white.tobytes() == b.white.tobytes()
    assert (a.sp_mask == b.sp_mask).all() and a.background_index == b.background_index
    for other in (draw_realization(cfg, (1, 8, 8), 4, 1), draw_realization(cfg, (1, 8, 8), 3, 2),
                  draw_realization(cfg, (1, 8, 8), 3, 1, STREAM_EVAL)):
        assert a.white.tobytes() != other.white.tobytes()
    assert (a.white > 0).all() and (a.white < 1).all()


def test_batch_draw_matches_single_draws():
    cfg = InterferenceConfig(0.3, 0.3, 0.4, 4, master_seed=2)
    batch = draw_batch(cfg, (1, 8, 8), [7, 2, 7], 4, STREAM_TRAIN)
    for row, img_id in enumerate([7, 2, 7]):
        one = draw_realization(cfg, (1, 8, 8), img_id, 4, STREAM_TRAIN)
        assert batch.white[row].tobytes() == one.white.tobytes()
        assert batch.background_index[row] == one.background_index


def test_background_indices_cover_range():
    cfg = InterferenceConfig(0.5, 0.4, 0.4, 8)
    idx = draw_batch(cfg, (1, 4, 4), range(800)).background_index
    assert set(idx.tolist()) == set(range(8))
    counts = np.bincount(idx, minlength=8)
    assert counts.min() > 60


# ---------------------------------------------------------------------------
# labels


def test_codec_examples():
    assert encode_label(0, 0, 8) == 0
    assert encode_label(3, 2, 8) == 26
    assert decode_label(26, 8) == (3, 2)
    assert decode_label(0, 1) == (0, 0)


def test_codec_round_trip_n10_k8():
    for c in range(10):
        for k in range(8):
            assert decode_label(encode_label(c, k, 8), 8) == (c, k)


def test_codec_is_bijection_exhaustive():
    for K in range(1, 9):
        for N in (1, 2, 7, 10, 100):
            c, k = np.meshgrid(np.arange(N), np.arange(K), indexing="ij")
            codes = encode_label(c.ravel(), k.ravel(), K)
            assert sorted(codes.tolist()) == list(range(N * K))
            back_c, back_k = decode_label(codes, K)
            assert (back_c == c.ravel()).all() and (back_k == k.ravel()).all()


@given(st.integers(0, 10**6), st.integers(1, 64), st.data())
def test_codec_round_trip_property(c, K, data):
    k = data.draw(st.integers(0, K - 1))
    assert decode_label(encode_label(c, k, K), K) == (c, k)


def test_codec_errors():
    with pytest.raises(LabelError):
        encode_label(1, 8, 8)
    with pytest.raises(LabelError):
        encode_label(1, -1, 8)
    with pytest.raises(LabelError):
        decode_label(-1, 8)


# ---------------------------------------------------------------------------
# backgrounds


def test_single_background_is_mid_gray():
    (bg,) = generate_backgrounds(1, 3, 16, 16, 99)
    assert bg.generator_name == "solid_gray" and bg.index == 0
    assert (bg.pixels == 0.5).all()


def test_backgrounds_are_deterministic_and_in_range():
    a = generate_backgrounds(12, 3, 20, 24, 7)
    b = generate_backgrounds(12, 3, 20, 24, 7)
    for x, y in zip(a, b):
        assert x.pixels.tobytes() == y.pixels.tobytes()
        assert x.pixels.shape == (3, 20, 24) and x.pixels.dtype == np.float32
        assert 0 <= x.pixels.min() and x.pixels.max() <= 1
        again = make_background(x.generator_name, x.seed, 3, 20, 24, x.index)
        assert again.pixels.tobytes() == x.pixels.tobytes()
    assert [bg.generator_name for bg in a[:8]] == list(RECIPES)
    # repeats beyond the eight recipes are shifted copies, not duplicates
    assert a[9].pixels.tobytes() != a[1].pixels.tobytes()


def test_backgrounds_are_distinct():
    bgs = generate_backgrounds(8, 1, 32, 32, 0)
    flat = {bg.pixels.tobytes() for bg in bgs}
    assert len(flat) == 8


def test_checkerboard_cells():
    bg = make_background("checkerboard", 0, 1, 32, 32)
    p = bg.pixels[0]
    assert p[0, 0] != p[8, 0]
    assert p[0, 0] == p[16, 0]
    assert p[0, 0] != p[0, 8]


def test_background_errors():
    with pytest.raises(ConfigError):
        generate_backgrounds(0, 1, 8, 8)
    with pytest.raises(ConfigError):
        make_background("plaid", 0, 1, 8, 8)
    with pytest.raises(ConfigError):
        InterferenceConfig(gamma=1.2)
