import json

import numpy as np
import pytest
import torch

from hypernst.checkpoint import (CheckpointError, directory_hash, load_checkpoint, read_manifest,
                                 save_checkpoint, state_hash)
from hypernst.generator import GeneratorSpec, build_generator, generator_from_tensors, generator_tensors


def test_round_trip_bit_exact(tmp_path):
    g = torch.Generator().manual_seed(0)
    tensors = {"a": torch.randn(3, 4, generator=g), "b.weight": torch.randn(5, generator=g), "s": torch.tensor(2.5)}
    save_checkpoint(tmp_path / "ck", tensors, {"seed": 3})
    back, manifest = load_checkpoint(tmp_path / "ck")
    for k, v in tensors.items():
        assert torch.equal(back[k], v)
    assert manifest["meta"]["seed"] == 3
    assert state_hash(back) == state_hash(tensors)


def test_params_bin_layout(tmp_path):
    tensors = {"x": torch.tensor([1.0, -2.0]), "y": torch.tensor([[3.0]])}
    save_checkpoint(tmp_path, tensors)
    raw = (tmp_path / "params.bin").read_bytes()
    assert np.array_equal(np.frombuffer(raw, "<f4"), np.array([1, -2, 3], np.float32))
    m = read_manifest(tmp_path)
    assert [e["offset"] for e in m["tensors"]] == [0, 8]
    assert m["total_bytes"] == 12
    assert all(e["dtype"] == "float32" for e in m["tensors"])


def test_generator_manifest_records_layers(tmp_path):
    gen = build_generator(GeneratorSpec(image_size=8, base_channels=4, max_channels=4), 7)
    tensors, info = generator_tensors(gen)
    save_checkpoint(tmp_path, tensors, {"spec": gen.spec.to_dict(), "seed": 7}, info)
    m = read_manifest(tmp_path)
    kinds = {e["kind"] for e in m["tensors"]}
    assert {"mapping", "modulated_conv", "torgb"} <= kinds
    back, _ = load_checkpoint(tmp_path)
    gen2 = generator_from_tensors(m["meta"]["spec"], back, 7)
    assert state_hash(gen2.state_dict()) == state_hash(gen.state_dict())


def test_truncated_params_detected(tmp_path):
    save_checkpoint(tmp_path, {"x": torch.ones(4)})
    (tmp_path / "params.bin").write_bytes(b"\0" * 8)
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path)


def test_missing_manifest(tmp_path):
    with pytest.raises(CheckpointError):
        read_manifest(tmp_path)


def test_directory_hash_sensitive(tmp_path):
    save_checkpoint(tmp_path / "a", {"x": torch.ones(2)})
    save_checkpoint(tmp_path / "b", {"x": torch.ones(2)})
    assert directory_hash(tmp_path / "a") == directory_hash(tmp_path / "b")
    save_checkpoint(tmp_path / "b", {"x": torch.tensor([1.0, 1.0000001])})
    assert directory_hash(tmp_path / "a") != directory_hash(tmp_path / "b")
