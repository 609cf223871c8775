"""Tests for datasets, the raw-tensor directory format and the named-tensor codec."""

from __future__ import annotations

import json

import numpy as np
import pytest
import torch

from fcil.data.codec import CodecError, decode_tensors, encode_tensors, read_tensor_file, write_tensor_file
from fcil.data.datasets import (
    DatasetError,
    DatasetSpec,
    LabeledBatch,
    load_dataset,
    load_raw_dir,
    make_synthetic_split,
    split_train_test,
    write_raw_dir,
)


class TestSyntheticSplit:
    def test_shapes_and_counts(self):
        train, test = make_synthetic_split(5, 10, 4, image_size=8, channels=3, seed=1)
        assert train.images.shape == (50, 3, 8, 8)
        assert test.images.shape == (20, 3, 8, 8)
        assert np.bincount(train.labels.numpy()).tolist() == [10] * 5

    def test_deterministic(self):
        a, _ = make_synthetic_split(3, 4, 2, image_size=8, seed=9)
        b, _ = make_synthetic_split(3, 4, 2, image_size=8, seed=9)
        assert torch.equal(a.images, b.images)

    def test_load_dataset_resolves_synthetic(self):
        train, test = load_dataset(
            "synthetic",
            synthetic_classes=2,
            samples_per_class=3,
            test_per_class=1,
            image_size=8,
            channels=1,
            test_fraction=0.2,
            seed=0,
        )
        assert train.class_count == 2
        assert test.image_shape == (1, 8, 8)


class TestDatasetSpec:
    def test_rejects_out_of_range_label(self):
        with pytest.raises(DatasetError, match="class ids"):
            DatasetSpec(torch.zeros(2, 1, 2, 2), torch.tensor([0, 3]), class_count=2)

    def test_rejects_class_without_samples(self):
        with pytest.raises(DatasetError, match="classes without samples"):
            DatasetSpec(torch.zeros(2, 1, 2, 2), torch.tensor([0, 0]), class_count=2)

    def test_non_strict_allows_missing_class(self):
        spec = DatasetSpec(torch.zeros(2, 1, 2, 2), torch.tensor([0, 0]), class_count=2, strict=False)
        assert len(spec) == 2

    def test_rejects_non_image_tensor(self):
        with pytest.raises(DatasetError, match="N×C×H×W"):
            DatasetSpec(torch.zeros(2, 4), torch.tensor([0, 1]), class_count=2)

    def test_indices_of(self, toy_split):
        train, _ = toy_split
        idx = train.indices_of([1, 3])
        assert set(train.labels[idx].tolist()) == {1, 3}
        assert idx.tolist() == sorted(idx.tolist())

    def test_split_keeps_every_class_on_both_sides(self, toy_split):
        train, _ = toy_split
        a, b = split_train_test(train, 0.25, seed=0)
        assert len(a) + len(b) == len(train)
        assert set(b.labels.tolist()) == {0, 1, 2, 3}


class TestLabeledBatch:
    def test_of_class_keeps_origin(self):
        batch = LabeledBatch(torch.zeros(3, 1, 2, 2), torch.tensor([0, 1, 1]), "condensed")
        sub = batch.of_class(1)
        assert len(sub) == 2
        assert sub.origin == "condensed"
        assert batch.classes() == [0, 1]

    def test_empty(self):
        assert len(LabeledBatch.empty((3, 4, 4))) == 0


class TestRawDir:
    def test_write_then_load_quantizes_to_u8(self, tmp_path, toy_split):
        train, _ = toy_split
        clamped = DatasetSpec(train.images.clamp(-1, 1), train.labels, train.class_count)
        write_raw_dir(clamped, tmp_path / "raw")
        loaded = load_raw_dir(tmp_path / "raw")
        assert loaded.class_count == 4
        # Files are grouped by class, so compare class by class
        for k in range(4):
            original = clamped.images[clamped.labels == k]
            restored = loaded.images[loaded.labels == k]
            assert torch.allclose(original, restored, atol=2 / 255 + 1e-6)

    def test_missing_meta(self, tmp_path):
        with pytest.raises(DatasetError, match="meta.json"):
            load_raw_dir(tmp_path)

    def test_ragged_class_file(self, tmp_path):
        meta = {"class_count": 1, "height": 2, "width": 2, "channels": 1, "dtype": "u8"}
        (tmp_path / "meta.json").write_text(json.dumps(meta))
        (tmp_path / "class_0.bin").write_bytes(b"\x00" * 5)
        with pytest.raises(DatasetError, match="not a multiple"):
            load_raw_dir(tmp_path)

    def test_rejects_other_dtypes(self, tmp_path):
        meta = {"class_count": 1, "height": 2, "width": 2, "channels": 1, "dtype": "f32"}
        (tmp_path / "meta.json").write_text(json.dumps(meta))
        with pytest.raises(DatasetError, match="Unsupported dtype"):
            load_raw_dir(tmp_path)


class TestNamedTensorCodec:
    def test_header_and_tensors_survive(self):
        tensors = {"w": torch.arange(6, dtype=torch.float32).reshape(2, 3), "b": torch.tensor([0.5])}
        header, decoded = decode_tensors(encode_tensors({"round": 3, "task": 1}, tensors))
        assert header == {"round": 3, "task": 1}
        assert list(decoded) == ["w", "b"]
        assert torch.equal(decoded["w"], tensors["w"])

    def test_file_helpers(self, tmp_path):
        path = write_tensor_file(tmp_path / "sub" / "ck.bin", {"seed": 1}, {"x": torch.ones(2, 2)})
        header, tensors = read_tensor_file(path)
        assert header["seed"] == 1
        assert tensors["x"].shape == (2, 2)

    def test_reserved_header_key(self):
        with pytest.raises(CodecError, match="reserved"):
            encode_tensors({"names": []}, {})

    def test_truncated_blob(self):
        blob = encode_tensors({}, {"x": torch.ones(4)})
        with pytest.raises(CodecError):
            decode_tensors(blob[:-3])

    def test_trailing_bytes(self):
        blob = encode_tensors({}, {"x": torch.ones(1)})
        with pytest.raises(CodecError, match="trailing"):
            decode_tensors(blob + b"\x00")

    def test_garbage_header(self):
        with pytest.raises(CodecError):
            decode_tensors(b"\x03\x00\x00\x00abc")
