"""Tests for the dataset directory and the checkpoint file"""
import json
import math
import struct

import numpy as np
import pytest

from bags.blur_synth import BlurSpec, synthesize
from bags.errors import CheckpointError, DatasetError
from bags.rng import RngStreams
from dataset import CheckpointStore, DatasetStore, read_gaussians_ply, read_metrics, write_gaussians_ply, write_metrics
from dataset.store import png_ids, read_png, write_png
from tests.oracles import front_camera, random_cloud


@pytest.fixture
def store(tmp_path):
    return DatasetStore(tmp_path / "data")


class TestCameras:
    def test_round_trip(self, store):
        train = [front_camera(16, view_index=0), front_camera(16, distance=4.0, view_index=1)]
        store.write_cameras(train, [front_camera(16, distance=5.0)])
        cameras = store.read_cameras()
        assert len(cameras["train"]) == 2 and len(cameras["test"]) == 1
        loaded = cameras["train"][1]
        np.testing.assert_allclose(loaded.rotation, train[1].rotation)
        np.testing.assert_allclose(loaded.translation, train[1].translation)
        assert loaded.view_index == 1
        assert loaded.image_path == "train/0001.png"

    def test_missing_field_is_named(self, store):
        store.write_cameras([front_camera(16)], [])
        payload = json.loads(store.cameras_path.read_text())
        del payload["train"][0]["fx"]
        store.cameras_path.write_text(json.dumps(payload))
        with pytest.raises(DatasetError) as info:
            store.read_cameras()
        assert info.value.field == "0.fx"
        assert "cameras.json" in str(info.value)

    def test_bad_rotation(self, store):
        store.write_cameras([front_camera(16)], [])
        payload = json.loads(store.cameras_path.read_text())
        payload["train"][0]["rotation"] = [1.0, 0.0, 0.0]
        store.cameras_path.write_text(json.dumps(payload))
        with pytest.raises(DatasetError) as info:
            store.read_cameras()
        assert info.value.field == "0.rotation"

    def test_missing_file(self, store):
        with pytest.raises(DatasetError):
            store.read_cameras()


class TestImages:
    def test_png_round_trip_within_quantization(self, tmp_path, rng):
        image = rng.uniform(size=(3, 9, 7))
        read = read_png(write_png(tmp_path / "a.png", image))
        assert read.shape == (3, 9, 7)
        assert np.abs(read - image).max() <= 0.5 / 255.0 + 1e-12

    def test_size_must_match_camera(self, store, rng):
        camera = front_camera(16)
        store.write_cameras([camera], [])
        store.write_image("train", 0, rng.uniform(size=(3, 8, 8)))
        with pytest.raises(DatasetError) as info:
            store.read_image("train", 0, store.read_cameras()["train"][0])
        assert info.value.field == "width/height"

    def test_missing_image(self, store):
        with pytest.raises(DatasetError):
            store.read_image("test", 3)

    def test_png_ids(self, tmp_path, rng):
        for name in ("0002.png", "0010.png", "notes.png"):
            write_png(tmp_path / name, rng.uniform(size=(3, 2, 2)))
        assert sorted(png_ids(tmp_path)) == [2, 10]
        with pytest.raises(DatasetError):
            png_ids(tmp_path / "missing")


class TestPoints:
    @pytest.mark.parametrize("text", [False, True])
    def test_round_trip(self, store, rng, text):
        points = rng.normal(size=(12, 3))
        colors = rng.uniform(size=(12, 3))
        store.write_points(points, colors, text=text)
        read_points, read_colors = store.read_points()
        np.testing.assert_allclose(read_points, points, atol=1e-6)
        np.testing.assert_allclose(read_colors, colors, atol=0.5 / 255.0 + 1e-12)

    def test_gray_without_color(self, store, rng):
        store.write_points(rng.normal(size=(4, 3)))
        _, colors = store.read_points()
        np.testing.assert_array_equal(colors, 0.5)

    def test_not_a_ply(self, store):
        store.root.mkdir(parents=True)
        store.points_path.write_text("hello")
        with pytest.raises(DatasetError):
            store.read_points()


class TestGaussianPly:
    def test_round_trip(self, tmp_path, rng):
        cloud = random_cloud(rng, 6)
        path = tmp_path / "out" / "gaussians.ply"
        write_gaussians_ply(cloud, path)
        loaded = read_gaussians_ply(path)
        for name, values in cloud.arrays().items():
            np.testing.assert_allclose(loaded.arrays()[name], values, rtol=1e-6, atol=1e-6)


class TestSyntheticDataset:
    def test_write_and_load(self, store):
        data = synthesize(BlurSpec("motion", length=2.0, seed=3), n_gaussians=12, n_views=4, size=16)
        store.write_synthetic(data)
        cameras, images = store.load_split("train")
        assert len(cameras) == 4 and len(images) == 4
        assert np.abs(images[2] - data.train_images[2]).max() <= 0.5 / 255.0 + 1e-12
        assert store.read_degradation()["spec"]["kind"] == "motion"
        assert len(store.read_points()[0]) == len(data.points)


class TestMetrics:
    def test_infinite_psnr_is_a_string(self, tmp_path):
        path = tmp_path / "metrics.json"
        write_metrics(path, [{"view": 0, "psnr": math.inf, "ssim": 1.0}], {"psnr": math.inf, "ssim": 1.0})
        assert json.loads(path.read_text())["mean"]["psnr"] == "inf"
        assert read_metrics(path)["views"][0]["psnr"] == math.inf
        assert read_metrics(path)["count"] == 1


def sections(with_bpn=True):
    rngs = RngStreams(3)
    rngs.get("views").random()
    out = {
        "cloud": ({}, {"positions": np.arange(6.0).reshape(2, 3)}),
        "optimizer": ({"steps": {"positions": 4}}, {"m/positions": np.ones((2, 3), dtype=np.float32)}),
        "schedule": ({"stage_index": 1, "view_queue": [2, 0]}, {"count": np.array([1, 2], dtype=np.int64),
                                                                 "flags": np.array([True, False])}),
        "rng": ({"streams": rngs.state()}, {}),
    }
    if with_bpn:
        out["bpn"] = ({"heads": {"3": 5}}, {"bpn.view_table": np.zeros((4, 8))})
    return out


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        store = CheckpointStore(tmp_path / "run" / "checkpoint.bags")
        original = sections()
        store.save(original)
        loaded = store.load()
        assert set(loaded) == set(original)
        for name, (meta, arrays) in original.items():
            assert loaded[name][0] == meta
            for key, value in arrays.items():
                np.testing.assert_array_equal(loaded[name][1][key], value)
                assert loaded[name][1][key].dtype == value.dtype
        assert not (tmp_path / "run" / "checkpoint.bags.tmp").exists()

    def test_rng_state_restores_the_stream(self, tmp_path):
        store = CheckpointStore(tmp_path / "c.bags")
        original = sections()
        store.save(original)
        expected = RngStreams(0)
        expected.load_state(original["rng"][0]["streams"])
        restored = RngStreams(0)
        restored.load_state(store.load()["rng"][0]["streams"])
        assert restored.get("views").random() == expected.get("views").random()

    def test_without_network(self, tmp_path):
        store = CheckpointStore(tmp_path / "c.bags")
        store.save(sections(with_bpn=False))
        assert not store.has_section("bpn")
        assert store.has_section("cloud")

    def test_layout(self, tmp_path):
        store = CheckpointStore(tmp_path / "c.bags")
        store.save(sections())
        raw = store.path.read_bytes()
        assert raw[:4] == b"BAGS"
        assert struct.unpack("<I", raw[4:8]) == (1,)
        assert raw[8:12] == b"CLD\0"

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "c.bags"
        path.write_bytes(b"NOPE" + b"\0" * 16)
        with pytest.raises(CheckpointError):
            CheckpointStore(path).load()

    def test_bad_version(self, tmp_path):
        path = tmp_path / "c.bags"
        path.write_bytes(b"BAGS" + struct.pack("<I", 9))
        with pytest.raises(CheckpointError):
            CheckpointStore(path).load()

    def test_truncated(self, tmp_path):
        store = CheckpointStore(tmp_path / "c.bags")
        store.save(sections())
        store.path.write_bytes(store.path.read_bytes()[:-10])
        with pytest.raises(CheckpointError):
            store.load()

    def test_required_sections(self, tmp_path):
        incomplete = sections()
        del incomplete["optimizer"]
        with pytest.raises(CheckpointError):
            CheckpointStore(tmp_path / "c.bags").save(incomplete)

    def test_unsupported_dtype(self, tmp_path):
        bad = sections()
        bad["cloud"] = ({}, {"positions": np.zeros(3, dtype=np.complex128)})
        with pytest.raises(CheckpointError):
            CheckpointStore(tmp_path / "c.bags").save(bad)
