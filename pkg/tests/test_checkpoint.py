import struct

import numpy as np
import pytest

from vgse.checkpoint import (
    MAGIC,
    decode_checkpoint,
    encode_checkpoint,
    load_checkpoint,
    save_checkpoint,
    to_storage_precision,
)
from vgse.errors import FormatError
from vgse.nn import EncoderConfig, init_params


@pytest.fixture(params=[("gru", "attention"), ("lstm", "max")])
def model(request):
    kind, pooling = request.param
    config = EncoderConfig(30, char_embed_dim=5, hidden_size=7, rnn_kind=kind, pooling=pooling, image_feature_dim=11)
    return init_params(config, 4), config


def test_round_trip_within_float32(tmp_path, model):
    params, config = model
    meta = {"epoch": 12, "dev_recall_at_10": 71.25, "vocab": ["a", "ß"]}
    path = tmp_path / "m.gcpt"
    save_checkpoint(params, config, meta, path)
    back, back_config, back_meta = load_checkpoint(path)
    assert back_config == config
    assert back_meta == meta
    assert list(back) == list(params)
    for k, v in params.as_arrays().items():
        assert back[k].data.dtype == np.float64
        np.testing.assert_allclose(back[k].data, v, rtol=2**-24, atol=0)


def test_storage_precision_is_a_fixed_point(model):
    params, config = model
    frozen = to_storage_precision(params)
    back, _, _ = decode_checkpoint(encode_checkpoint(frozen, config, {}))
    for k, v in frozen.as_arrays().items():
        np.testing.assert_array_equal(back[k].data, v)
    # encoding is a pure function of its inputs
    assert encode_checkpoint(frozen, config, {"x": 1}) == encode_checkpoint(frozen, config, {"x": 1})


def test_layout_prefix(model):
    params, config = model
    blob = encode_checkpoint(params, config, {})
    assert blob[:4] == MAGIC
    version, header_len = struct.unpack_from("<HI", blob, 4)
    assert version == 1
    n_floats = sum(v.size for v in params.as_arrays().values())
    assert len(blob) == 10 + header_len + 4 * n_floats


def test_corruption_is_detected(model):
    params, config = model
    blob = encode_checkpoint(params, config, {})
    with pytest.raises(FormatError, match="magic"):
        decode_checkpoint(b"XCPT" + blob[4:])
    with pytest.raises(FormatError, match="version"):
        decode_checkpoint(blob[:4] + struct.pack("<H", 9) + blob[6:])
    with pytest.raises(FormatError):
        decode_checkpoint(blob[:-4])
    with pytest.raises(FormatError):
        decode_checkpoint(blob[:12])
    with pytest.raises(FormatError):
        decode_checkpoint(blob + b"\0\0\0\0")
