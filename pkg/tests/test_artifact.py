"""Model artifact file format: roundtrips, header layout, corruption."""

import json
import struct

import numpy as np
import pytest

from minirec.artifact import (
    MAGIC,
    ModelArtifact,
    expected_tensor_shapes,
    load_artifact,
    save_artifact,
)
from minirec.errors import FormatError
from minirec.model import init_params, params_equal, tensor_items

from helpers import make_config


def _artifact(tmp_path, seed=42):
    cfg = make_config(tmp_path)
    params = init_params(cfg, np.random.default_rng([seed, 0]))
    return ModelArtifact(config=cfg, params=params, seed=seed, step_count=0)


def test_roundtrip_bitwise(tmp_path):
    art = _artifact(tmp_path)
    path = str(tmp_path / "model.erm")
    save_artifact(art, path)
    loaded = load_artifact(path)
    assert params_equal(art.params, loaded.params)
    assert loaded.config == art.config
    assert loaded.seed == art.seed
    assert loaded.step_count == art.step_count


def test_roundtrip_many_seeds(tmp_path):
    for seed in range(10):
        art = _artifact(tmp_path, seed=seed)
        for _, arr in tensor_items(art.params):
            arr += np.random.default_rng(seed).normal(0, 1, arr.shape).astype(np.float32)
        path = str(tmp_path / f"m{seed}.erm")
        save_artifact(art, path)
        assert params_equal(load_artifact(path).params, art.params)


def test_save_is_deterministic(tmp_path):
    art = _artifact(tmp_path)
    a, b = str(tmp_path / "a.erm"), str(tmp_path / "b.erm")
    save_artifact(art, a)
    save_artifact(art, b)
    assert open(a, "rb").read() == open(b, "rb").read()


def test_header_layout(tmp_path):
    art = _artifact(tmp_path)
    path = str(tmp_path / "model.erm")
    save_artifact(art, path)
    blob = open(path, "rb").read()
    assert blob[:8] == MAGIC
    header_len = struct.unpack("<I", blob[8:12])[0]
    header = json.loads(blob[12:12 + header_len])
    assert set(header) == {"config", "model_version", "seed", "step_count", "tensors"}
    shapes = expected_tensor_shapes(art.config)
    offset = 0
    for entry in header["tensors"]:
        assert entry["offset"] == offset
        assert tuple(entry["shape"]) == shapes[entry["name"]]
        offset += 4 * int(np.prod(entry["shape"]))
    assert len(blob) == 12 + header_len + offset


def test_tensor_directory_order(tmp_path):
    """Directory lists emb/fo pairs in feature order, then MLP, then bias."""
    art = _artifact(tmp_path)
    path = str(tmp_path / "model.erm")
    save_artifact(art, path)
    blob = open(path, "rb").read()
    header_len = struct.unpack("<I", blob[8:12])[0]
    names = [t["name"] for t in json.loads(blob[12:12 + header_len])["tensors"]]
    assert names == [name for name, _ in tensor_items(art.params)]
    assert names[0].startswith("emb:") and names[1].startswith("fo:")
    assert names[-1] == "bias"


def test_bad_magic(tmp_path):
    art = _artifact(tmp_path)
    path = str(tmp_path / "model.erm")
    save_artifact(art, path)
    blob = bytearray(open(path, "rb").read())
    blob[:8] = b"XXMODEL1"
    bad = tmp_path / "bad.erm"
    bad.write_bytes(bytes(blob))
    with pytest.raises(FormatError):
        load_artifact(str(bad))


@pytest.mark.parametrize("cut", [4, 11, 40, -1])
def test_truncation(tmp_path, cut):
    art = _artifact(tmp_path)
    path = str(tmp_path / "model.erm")
    save_artifact(art, path)
    blob = open(path, "rb").read()
    bad = tmp_path / "cut.erm"
    bad.write_bytes(blob[:cut] if cut > 0 else blob[:len(blob) - 1])
    with pytest.raises(FormatError):
        load_artifact(str(bad))


def test_trailing_garbage(tmp_path):
    art = _artifact(tmp_path)
    path = str(tmp_path / "model.erm")
    save_artifact(art, path)
    bad = tmp_path / "long.erm"
    bad.write_bytes(open(path, "rb").read() + b"\x00\x00\x00\x00")
    with pytest.raises(FormatError):
        load_artifact(str(bad))


def test_model_version_passthrough(tmp_path):
    art = _artifact(tmp_path)
    art.params.model_version = 17
    path = str(tmp_path / "model.erm")
    save_artifact(art, path)
    assert load_artifact(path).model_version == 17
