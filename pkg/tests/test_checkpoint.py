from __future__ import annotations

import json
import struct

import numpy as np
import pytest

from mobichain.checkpoint import load_checkpoint, read_header, save_checkpoint
from mobichain.errors import CheckpointError
from mobichain.model import init_model, predict_proba


@pytest.fixture
def saved(tmp_path, tiny_config):
    params = init_model(tiny_config).set_trainable(["embeddings", "block_1", "mlp_head"])
    path = save_checkpoint(tmp_path / "models" / "base.ckpt", params, extra={"epoch": 4})
    return params, path


def _rewrite_header(path, edit):
    blob = path.read_bytes()
    (length,) = struct.unpack_from("<Q", blob, 8)
    header = json.loads(blob[16:16 + length])
    edit(header)
    raw = json.dumps(header).encode("utf-8")
    path.write_bytes(blob[:8] + struct.pack("<Q", len(raw)) + raw + blob[16 + length:])


def test_checkpoint_restores_parameters(saved, complete_dataset):
    params, path = saved
    loaded, extra = load_checkpoint(path)
    assert extra == {"epoch": 4}
    assert loaded.config == params.config
    assert loaded.trainable_groups == {"embeddings", "block_1", "mlp_head"}
    for name, tensor in params.tensors.items():
        assert np.array_equal(loaded[name].data, tensor.data)
        assert loaded[name].dtype == tensor.dtype
    tokens, dow = complete_dataset.tokens[:2], complete_dataset.day_of_week[:2]
    assert np.array_equal(predict_proba(loaded, tokens, dow), predict_proba(params, tokens, dow))
    assert not path.with_suffix(".ckpt.tmp").exists()


def test_header_fields(saved):
    _, path = saved
    header, payload = read_header(path)
    assert header["format_version"] == 1
    assert header["manifest"][0]["name"] == "embeddings.token"
    assert header["manifest"][0]["offset"] == 0
    assert len(payload) == sum(int(np.prod(e["shape"])) * 8 for e in header["manifest"])


def test_bad_magic(tmp_path):
    path = tmp_path / "junk.ckpt"
    path.write_bytes(b"NOTACKPT" + b"\x00" * 32)
    with pytest.raises(CheckpointError):
        load_checkpoint(path)


def test_truncated_file(saved):
    _, path = saved
    path.write_bytes(path.read_bytes()[:12])
    with pytest.raises(CheckpointError):
        load_checkpoint(path)


def test_flipped_payload_byte(saved):
    _, path = saved
    blob = bytearray(path.read_bytes())
    blob[-5] ^= 0xFF
    path.write_bytes(bytes(blob))
    with pytest.raises(CheckpointError, match="payload digest"):
        load_checkpoint(path)


def test_corrupt_header(saved):
    _, path = saved
    blob = bytearray(path.read_bytes())
    blob[17] = 0xFF
    path.write_bytes(bytes(blob))
    with pytest.raises(CheckpointError):
        load_checkpoint(path)


def test_unsupported_version(saved):
    _, path = saved
    _rewrite_header(path, lambda header: header.update(format_version=99))
    with pytest.raises(CheckpointError, match="version"):
        load_checkpoint(path)


def test_edited_config_breaks_manifest_digest(saved):
    _, path = saved
    _rewrite_header(path, lambda header: header["config"].update(d_model=32))
    with pytest.raises(CheckpointError, match="manifest digest"):
        load_checkpoint(path)
