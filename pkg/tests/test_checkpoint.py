"""
체크포인트 저장/로드 테스트
"""
import json
import os
import struct

import pytest
import torch

from core.exceptions import CheckpointFormatError
from core.checkpoint import (
    MAGIC, checkpoint_size, load_checkpoint, params_from_bytes, params_to_bytes, save_checkpoint,
)


def test_save_load_preserves_everything(tmp_path, tiny_params):
    path = str(tmp_path / "model.ckpt")
    tiny_params.version = 7
    size = save_checkpoint(tiny_params, path)
    loaded = load_checkpoint(path)
    assert size == os.path.getsize(path) == checkpoint_size(tiny_params.config)
    assert loaded.config == tiny_params.config
    assert loaded.version == 7
    for name in tiny_params.names():
        assert torch.equal(loaded[name], tiny_params[name])
    assert not os.path.exists(path + ".tmp")


def test_blob_starts_with_magic(tiny_params):
    assert params_to_bytes(tiny_params).startswith(MAGIC)


def test_load_missing_file(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_checkpoint(str(tmp_path / "nope.ckpt"))


def test_bad_magic(tiny_params):
    blob = params_to_bytes(tiny_params)
    with pytest.raises(CheckpointFormatError):
        params_from_bytes(b"XXXXX" + blob[len(MAGIC):])


@pytest.mark.parametrize("cut", [3, 20, 200, -1])
def test_truncated_blob(tiny_params, cut):
    blob = params_to_bytes(tiny_params)
    with pytest.raises(CheckpointFormatError):
        params_from_bytes(blob[:cut])


def test_trailing_bytes(tiny_params):
    with pytest.raises(CheckpointFormatError):
        params_from_bytes(params_to_bytes(tiny_params) + b"\x00")


def test_float64_params_saved_as_float32(tiny_params64):
    loaded = params_from_bytes(params_to_bytes(tiny_params64))
    assert loaded.dtype == torch.float32
    assert torch.allclose(loaded["tok_emb"].double(), tiny_params64["tok_emb"], atol=1e-7)


def _with_meta(blob, edit):
    # 메타데이터 JSON 만 바꿔 다시 조립 (텐서 영역은 그대로)
    (meta_len,) = struct.unpack("<Q", blob[len(MAGIC):len(MAGIC) + 8])
    start = len(MAGIC) + 8
    meta = json.loads(blob[start:start + meta_len].decode("utf-8"))
    edit(meta)
    encoded = json.dumps(meta).encode("utf-8")
    return MAGIC + struct.pack("<Q", len(encoded)) + encoded + blob[start + meta_len:]


def test_meta_round_trip_is_readable(tiny_params):
    blob = _with_meta(params_to_bytes(tiny_params), lambda meta: None)
    assert params_from_bytes(blob).config == tiny_params.config


@pytest.mark.parametrize("edit", [
    lambda meta: meta["config"].update(n_heads=3),
    lambda meta: meta["config"].update(block_size=0),
    lambda meta: meta.update(tensor_count="many"),
    lambda meta: meta.update(version="v2"),
    lambda meta: meta["config"].update(colour="blue"),
    lambda meta: meta.pop("tensor_count"),
])
def test_invalid_meta_is_a_format_error(tiny_params, edit):
    blob = _with_meta(params_to_bytes(tiny_params), edit)
    with pytest.raises(CheckpointFormatError):
        params_from_bytes(blob)
