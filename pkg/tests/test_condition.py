"""Speech conditioning pipeline."""

import numpy as np
import pytest

from conftest import fd_check
from ssmgesture.autograd import Tensor, TensorError
from ssmgesture.condition import (ConditionConfig, ConditionExtractor, FileFeatureProvider,
                                  LocalFeatureSequence, LogMelProvider, gesture_frames,
                                  interpolation_matrix, mel_filterbank, timestep_embedding)


@pytest.fixture
def small():
    cfg = ConditionConfig(d_a=6, d_c=5, N=50, kernel_size=7, d_state=4, n_heads=2)
    return ConditionExtractor(cfg, np.random.default_rng(0))


class TestLogMel:
    def test_one_second_gives_50_frames(self, rng):
        feats = LogMelProvider()(rng.standard_normal(16000))
        assert abs(feats.Z.shape[0] - 50) <= 1
        assert feats.Z.shape[1] == 80 and feats.rate_hz == 50.0

    def test_silence_at_floor(self):
        Z = LogMelProvider()(np.zeros(8000)).Z
        np.testing.assert_array_equal(Z, np.full_like(Z, np.log(1e-10)))

    def test_rejects_wrong_rate(self):
        with pytest.raises(ValueError):
            LogMelProvider()(np.zeros(100), sr=44100)

    def test_rejects_empty(self):
        with pytest.raises(ValueError):
            LogMelProvider()(np.zeros(0))

    def test_tone_lands_in_matching_band(self):
        t = np.arange(16000) / 16000
        Z = LogMelProvider()(np.sin(2 * np.pi * 1000 * t)).Z
        fb = mel_filterbank(80, 512, 16000)
        bin1k = round(1000 * 512 / 16000)
        assert Z[10:-10].mean(axis=0).argmax() == fb[:, bin1k].argmax()

    def test_filterbank_shape_nonnegative(self):
        fb = mel_filterbank(80, 512, 16000)
        assert fb.shape == (80, 257) and fb.min() >= 0
        assert np.all(fb.sum(axis=1) > 0)


class TestFileProvider:
    def test_round_trip_bit_exact(self, tmp_path, rng):
        feats = LocalFeatureSequence(rng.standard_normal((30, 7)), 49.5, "imported")
        FileFeatureProvider.save(feats, tmp_path / "f.dimt")
        back = FileFeatureProvider(tmp_path / "f.dimt")()
        assert back.Z.tobytes() == feats.Z.tobytes()
        assert (back.rate_hz, back.source) == (49.5, "imported")

    def test_invalid_rate(self):
        with pytest.raises(ValueError):
            LocalFeatureSequence(np.ones((2, 2)), 0.0)


class TestStyle:
    def test_single_frame(self, small, rng):
        Z = Tensor(rng.standard_normal((1, 6)))
        np.testing.assert_array_equal(small.global_style(Z).data, small.style(Z).data[0])

    def test_depends_on_first_frame(self, small, rng):
        Z = rng.standard_normal((20, 6))
        base = small.global_style(Tensor(Z)).data
        Z[0] += 1.0
        assert not np.allclose(small.global_style(Tensor(Z)).data, base)

    def test_shape(self, small, rng):
        assert small.global_style(Tensor(rng.standard_normal((9, 6)))).shape == (6,)

    def test_time_reversal_changes_token(self, small, rng):
        Z = rng.standard_normal((25, 6))
        assert not np.allclose(small.global_style(Tensor(Z)).data,
                               small.global_style(Tensor(Z[::-1].copy())).data)


class TestFuse:
    def test_zero_style(self, small, rng):
        Z = rng.standard_normal((4, 6))
        out = small.broadcast_and_fuse(Tensor(Z), Tensor(np.zeros(6))).data
        expect = np.hstack([Z, np.zeros((4, 6))]) @ small.fuse.weight.data + small.fuse.bias.data
        np.testing.assert_allclose(out, expect, atol=1e-14)

    def test_style_half_is_shared(self, small, rng):
        # project with the style block only: every row equal
        zs = rng.standard_normal(6)
        out = small.broadcast_and_fuse(Tensor(np.zeros((5, 6))), Tensor(zs)).data
        np.testing.assert_allclose(out, np.tile(out[0], (5, 1)), atol=0)

    def test_gradient(self, small, rng):
        def f(Z, zs, w, b):
            small.fuse.weight, small.fuse.bias = w, b
            return small.broadcast_and_fuse(Z, zs)

        args = [rng.standard_normal((4, 6)), rng.standard_normal(6),
                small.fuse.weight.data.copy(), small.fuse.bias.data.copy()]
        assert fd_check(f, args) < 1e-4


class TestDownsample:
    @pytest.mark.parametrize("Ta,T", [(1000, 400), (500, 400), (400, 400), (3, 17), (1, 5)])
    def test_exact_length(self, Ta, T):
        ext = ConditionExtractor(ConditionConfig(d_a=2, d_c=2, d_state=2, n_heads=1),
                                 np.random.default_rng(0))
        assert ext.downsample(Tensor(np.ones((Ta, 2))), T).shape == (T, 2)

    def test_delta_identity(self, rng):
        ext = ConditionExtractor(ConditionConfig(d_a=3, d_c=3, kernel_size=201, d_state=2,
                                                 n_heads=1), rng, down_init="delta")
        x = rng.standard_normal((40, 3))
        np.testing.assert_array_equal(ext.downsample(Tensor(x), 40).data, x)

    def test_constant_stays_constant(self, rng):
        ext = ConditionExtractor(ConditionConfig(d_a=3, d_c=3, kernel_size=201, d_state=2,
                                                 n_heads=1), rng)
        x = np.tile(rng.standard_normal(3), (150, 1))
        out = ext.downsample(Tensor(x), 60).data
        np.testing.assert_allclose(out, np.tile(out[0], (60, 1)), atol=1e-12)
        k = ext.down.kernel.data.sum(axis=0)
        np.testing.assert_allclose(out[0], x[0] @ k + ext.down.bias.data, atol=1e-12)

    def test_interpolation_rows_sum_to_one(self):
        for Ta, T in [(1000, 400), (7, 20), (400, 400)]:
            np.testing.assert_allclose(interpolation_matrix(Ta, T).sum(axis=1), 1.0)

    def test_interpolation_preserves_ramps(self):
        Ta, T = 50, 20
        W = interpolation_matrix(Ta, T)
        src = np.arange(Ta, dtype=float)
        out = W @ src
        inner = (np.arange(T) + 0.5) * Ta / T - 0.5
        np.testing.assert_allclose(out, inner, atol=1e-12)

    def test_empty(self, small):
        with pytest.raises(TensorError):
            small.downsample(Tensor(np.ones((0, 5))), 4)


class TestTimestep:
    def test_zero_condition_gives_identical_rows(self, small):
        out = small.fuse_timestep(Tensor(np.zeros((6, 5))), 7).data
        np.testing.assert_array_equal(out, np.tile(out[0], (6, 1)))

    def test_out_of_range(self, small):
        for n in (0, 51):
            with pytest.raises(ValueError):
                small.fuse_timestep(Tensor(np.zeros((2, 5))), n)

    def test_embedding_injective(self):
        E = np.stack([timestep_embedding(n, 8) for n in range(1, 1001)])
        d = np.linalg.norm(E[:, None] - E[None], axis=2)
        assert d[~np.eye(1000, dtype=bool)].min() > 1e-6

    def test_distinct_steps_distinct_condition(self, small, rng):
        feats = rng.standard_normal((30, 6))
        Cs = [small(feats, 12, n).data for n in range(1, 51, 7)]
        for i in range(len(Cs)):
            for j in range(i):
                assert np.linalg.norm(Cs[i] - Cs[j]) > 0


class TestPipeline:
    @pytest.mark.parametrize("seconds", [20.0, 3.3, 1.0])
    def test_row_count(self, seconds, rng):
        audio = 0.1 * rng.standard_normal(int(seconds * 16000))
        ext = ConditionExtractor(ConditionConfig(d_a=80, d_c=4, d_state=2, n_heads=2), rng)
        T = gesture_frames(audio.size)
        assert T == round(20 * seconds)
        assert ext(LogMelProvider()(audio), T, 10).shape == (T, 4)

    def test_deterministic(self, rng):
        audio = rng.standard_normal(16000)

        def run():
            ext = ConditionExtractor(ConditionConfig(d_a=80, d_c=4, d_state=2, n_heads=2),
                                     np.random.default_rng(3))
            return ext(LogMelProvider()(audio), 20, 5).data

        assert run().tobytes() == run().tobytes()

    def test_feature_width_checked(self, small):
        with pytest.raises(TensorError):
            small.audio_condition(np.ones((5, 4)), 3)
