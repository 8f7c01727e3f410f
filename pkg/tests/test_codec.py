import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ssmgesture.autograd import NonFiniteError, Tensor
from ssmgesture.codec import GestureDecoder, GestureEncoder, Normalizer, gesture_channels


class TestEncoder:
    def test_delta_center_tap_is_per_frame_projection(self, rng):
        enc = GestureEncoder(5, 5, rng, init="delta")
        y = rng.standard_normal((9, 5))
        np.testing.assert_array_equal(enc(Tensor(y)).data, y)

    def test_length_preserved(self, rng):
        enc = GestureEncoder(4, 7, rng)
        assert enc(Tensor(rng.standard_normal((13, 4)))).shape == (13, 7)

    def test_receptive_field_is_three_frames(self, rng):
        enc = GestureEncoder(3, 6, rng)
        y = rng.standard_normal((12, 3))
        base = enc(Tensor(y)).data
        for t in range(1, 11):
            y2 = y.copy()
            y2[t] += 1.0
            changed = np.flatnonzero(np.any(enc(Tensor(y2)).data != base, axis=1))
            assert set(changed) == {t - 1, t, t + 1}

    def test_non_finite_rejected(self, rng):
        enc = GestureEncoder(2, 2, rng)
        with pytest.raises(NonFiniteError):
            enc(Tensor(np.array([[1.0, np.inf]] * 3)))


class TestDecoder:
    def test_zero_hidden_gives_zero(self, rng):
        dec = GestureDecoder(8, 5, rng)
        assert not dec(Tensor(np.zeros((4, 8)))).data.any()

    def test_bias_option(self, rng):
        dec = GestureDecoder(8, 5, rng, bias=True)
        np.testing.assert_array_equal(dec(Tensor(np.zeros((2, 8)))).data,
                                      np.tile(dec.bias.data, (2, 1)))

    def test_frame_local(self, rng):
        dec = GestureDecoder(6, 4, rng)
        h = rng.standard_normal((8, 6))
        base = dec(Tensor(h)).data
        h[3] += 1.0
        changed = np.flatnonzero(np.any(dec(Tensor(h)).data != base, axis=1))
        assert list(changed) == [3]

    @given(st.integers(1, 70))
    def test_channel_round_trip(self, J):
        r = np.random.default_rng(J)
        C = gesture_channels(J)
        out = GestureDecoder(4, C, r)(GestureEncoder(C, 4, r)(Tensor(r.standard_normal((5, C)))))
        assert out.shape == (5, 3 * J + 6)

    def test_59_joints(self):
        assert gesture_channels(59) == 183


class TestNormalizer:
    def test_round_trip_and_unit_scale(self, rng):
        clips = [rng.normal(3, 5, (40, 4)) for _ in range(3)]
        norm = Normalizer.fit(clips)
        z = np.concatenate([norm.normalize(c) for c in clips])
        np.testing.assert_allclose(z.mean(axis=0), 0, atol=1e-12)
        np.testing.assert_allclose(z.std(axis=0), 1, atol=1e-12)
        np.testing.assert_allclose(norm.denormalize(norm.normalize(clips[0])), clips[0])

    def test_constant_channel_floored(self):
        norm = Normalizer.fit([np.ones((5, 2))])
        assert np.all(norm.std > 0)

    def test_dict_round_trip(self, rng):
        norm = Normalizer.fit([rng.standard_normal((6, 3))])
        back = Normalizer.from_dict(norm.to_dict())
        assert back.mean.tobytes() == norm.mean.tobytes()
        assert back.std.tobytes() == norm.std.tobytes()
