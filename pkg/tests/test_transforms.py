import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nsti import transforms as tf
from nsti.errors import UsageError, ValidationError


class ForcedDraws:
    """Stands in for a Generator and replays fixed integers."""

    def __init__(self, values):
        self.values = list(values)

    def integers(self, lo, hi=None):
        return self.values.pop(0)


def test_identity_is_bit_exact():
    x = np.random.default_rng(0).normal(size=(10, 8))
    out = tf.apply(tf.draw_spec("identity"), x, np.random.default_rng(1))
    assert np.array_equal(out, x) and out is not x


def test_forced_freq_mask():
    x = np.random.default_rng(0).normal(size=(5, 8))
    out = tf.apply(tf.TransformSpec("freq_mask", n_masks=1, max_width=4), x, ForcedDraws([2, 3]))
    assert np.all(out[:, 3:5] == 0.0)
    keep = [0, 1, 2, 5, 6, 7]
    assert np.array_equal(out[:, keep], x[:, keep])


def test_mask_wider_than_bins_rejected():
    with pytest.raises(ValidationError):
        tf.apply(tf.TransformSpec("freq_mask", n_masks=1, max_width=9), np.zeros((3, 8)), np.random.default_rng(0))


def test_negative_fields_rejected():
    with pytest.raises(ValidationError):
        tf.TransformSpec("noise", sigma=-1.0)
    with pytest.raises(ValidationError):
        tf.TransformSpec("blur")


def test_draw_spec_defaults():
    sa = tf.draw_spec("specaugment")
    assert (sa.kind, sa.n_masks, sa.max_width) == ("freq_mask", 6, 13)
    assert tf.scaled_mask_width(80) == 34
    assert tf.draw_spec("identity").kind == "identity"
    assert tf.draw_spec("cutout").kind == "cutout"
    assert tf.draw_spec("noise").sigma > 0
    with pytest.raises(UsageError):
        tf.draw_spec("mixup")


def test_masked_fraction_matches_expectation():
    rng = np.random.default_rng(7)
    spec = tf.TransformSpec("freq_mask", n_masks=1, max_width=13, fill=np.nan)
    x = np.zeros((1, 32))
    frac = np.mean([np.isnan(tf.apply(spec, x, rng)).mean() for _ in range(10_000)])
    expected = 1 * (13 / 2) / 32
    assert abs(frac - expected) / expected < 0.05


def test_noise_statistics():
    out = tf.apply(tf.TransformSpec("noise", sigma=0.5), np.zeros((200, 32)), np.random.default_rng(2))
    assert abs(out.std() - 0.5) < 0.02


def test_time_masks_only_when_requested():
    x = np.ones((40, 8))
    spec = tf.TransformSpec("identity", n_time_masks=2, max_time_width=5)
    out = tf.apply(spec, x, np.random.default_rng(3))
    rows = (out == 0).all(axis=1)
    assert rows.sum() <= 10 and np.all(out[~rows] == 1)
    assert np.array_equal(tf.apply(tf.draw_spec("identity"), x, np.random.default_rng(3)), x)


specs = st.sampled_from([tf.draw_spec(n) for n in ("specaugment", "identity", "noise", "cutout")])


@settings(max_examples=60, deadline=None)
@given(specs, st.integers(1, 50), st.integers(0, 2**32 - 1))
def test_apply_preserves_shape_and_input(spec, T, seed):
    x = np.random.default_rng(seed).normal(size=(T, 32))
    copy = x.copy()
    a = tf.apply(spec, x, np.random.default_rng(seed))
    b = tf.apply(spec, x, np.random.default_rng(seed))
    assert a.shape == x.shape and np.array_equal(x, copy)
    assert np.array_equal(a, b)
    if spec.kind in ("freq_mask", "cutout"):
        changed = a != x
        assert np.all(a[changed] == spec.fill)


def test_independent_streams_differ():
    x = np.random.default_rng(0).normal(size=(96, 32))
    rng = np.random.default_rng(1)
    spec = tf.draw_spec("specaugment")
    assert not np.array_equal(tf.apply(spec, x, rng), tf.apply(spec, x, rng))
