import numpy as np
import pytest

from ticketlab.checkpoint import Checkpoint, decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint
from ticketlab.errors import (
    CheckpointDigestError,
    CheckpointMagicError,
    CheckpointTruncatedError,
    CheckpointVersionError,
    PrecisionMismatchError,
)
from ticketlab.model import init_params
from ticketlab.pruning import one_shot_prune


@pytest.fixture
def checkpoint(tiny_model, theta_0, half_prune):
    mask = one_shot_prune(theta_0, half_prune)
    mask.metadata.update({"algorithm": "one_shot", "residuals": [0.5, 0.25]})
    return Checkpoint("f32", tiny_model.digest(), params=theta_0, mask=mask, epoch=3)


def test_round_trip_is_bit_exact(tmp_path, tiny_model, checkpoint):
    save_checkpoint(tmp_path / "a" / "theta0.tklb", checkpoint)
    loaded = load_checkpoint(tmp_path / "a" / "theta0.tklb", model_digest=tiny_model.digest(), precision="f32")
    assert loaded.provenance == "init"
    assert loaded.epoch == 3
    assert loaded.params.names == checkpoint.params.names
    assert loaded.params.prunable_names == checkpoint.params.prunable_names
    assert loaded.params.metadata == checkpoint.params.metadata
    for a, b in zip(loaded.params, checkpoint.params):
        assert a.value.dtype == b.value.dtype
        assert a.value.tobytes() == b.value.tobytes()
    assert loaded.mask.equals(checkpoint.mask)
    assert loaded.mask.exempt_names == checkpoint.mask.exempt_names
    assert loaded.mask.metadata == checkpoint.mask.metadata


def test_f64_round_trip(tiny_model):
    params = init_params(tiny_model, 4, precision="f64")
    loaded = decode_checkpoint(encode_checkpoint(Checkpoint("f64", tiny_model.digest(), params=params)))
    assert loaded.mask is None and loaded.epoch is None
    for a, b in zip(loaded.params, params):
        np.testing.assert_array_equal(a.value, b.value)
        assert a.value.dtype == np.float64


def test_mask_only(tiny_model, checkpoint):
    loaded = decode_checkpoint(encode_checkpoint(Checkpoint("f32", tiny_model.digest(), mask=checkpoint.mask)))
    assert loaded.params is None
    assert loaded.mask.kept_counts() == checkpoint.mask.kept_counts()


def test_corrupt_magic(checkpoint):
    data = bytearray(encode_checkpoint(checkpoint))
    data[0] ^= 0xFF
    with pytest.raises(CheckpointMagicError):
        decode_checkpoint(bytes(data))


def test_unknown_version(checkpoint):
    data = bytearray(encode_checkpoint(checkpoint))
    data[4] = 9
    with pytest.raises(CheckpointVersionError):
        decode_checkpoint(bytes(data))


@pytest.mark.parametrize("cut", [10, 100, -1])
def test_truncated(checkpoint, cut):
    data = encode_checkpoint(checkpoint)
    with pytest.raises(CheckpointTruncatedError):
        decode_checkpoint(data[:cut])


def test_trailing_bytes(checkpoint):
    with pytest.raises(CheckpointTruncatedError):
        decode_checkpoint(encode_checkpoint(checkpoint) + b"\x00")


def test_model_digest_mismatch(tmp_path, checkpoint):
    save_checkpoint(tmp_path / "m.tklb", checkpoint)
    with pytest.raises(CheckpointDigestError):
        load_checkpoint(tmp_path / "m.tklb", model_digest="f" * 64)


def test_precision_mismatch(tmp_path, tiny_model):
    params = init_params(tiny_model, 0, precision="f64")
    save_checkpoint(tmp_path / "p.tklb", Checkpoint("f64", tiny_model.digest(), params=params))
    with pytest.raises(PrecisionMismatchError):
        load_checkpoint(tmp_path / "p.tklb", precision="f32")
    with pytest.raises(PrecisionMismatchError):
        encode_checkpoint(Checkpoint("f32", tiny_model.digest(), params=params))
