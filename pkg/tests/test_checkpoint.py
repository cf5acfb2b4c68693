import numpy as np
import pytest
from _toys import tiny_run_config

from queryrec import pipeline
from queryrec.autograd import ShapeError
from queryrec.checkpoint import (
    CheckpointCorruptError,
    CheckpointVersionError,
    check_shapes,
    load_checkpoint,
    save_checkpoint,
)
from queryrec.synthetic import SyntheticConfig


def sample_tensors(rng64):
    return {
        "a": rng64.normal(size=(3, 4)).astype(np.float32),
        "b.scalar": np.array(np.float32(-0.0)),
        "c": np.array([np.inf, -np.inf, 1e-45, 3.4e38], dtype=np.float32),
        "empty": np.zeros((0, 5), dtype=np.float32),
        "ünïcode": np.arange(6, dtype=np.float32).reshape(1, 2, 3),
    }


def test_round_trip_is_bitwise(tmp_path, rng64):
    tensors = sample_tensors(rng64)
    path = tmp_path / "x.qrec"
    save_checkpoint(path, tensors, "lr = 0.001\n# note\n", step=123_456)
    ckpt = load_checkpoint(path)
    assert list(ckpt.tensors) == list(tensors)
    for name, value in tensors.items():
        assert ckpt.tensors[name].shape == value.shape
        assert ckpt.tensors[name].tobytes() == value.tobytes()
    assert ckpt.config_text == "lr = 0.001\n# note\n" and ckpt.step == 123_456 and ckpt.version == 1


def test_file_layout(tmp_path):
    path = tmp_path / "x.qrec"
    save_checkpoint(path, {"w": np.array([1.0], dtype=np.float32)})
    raw = path.read_bytes()
    assert raw[:4] == b"QREC"
    assert int.from_bytes(raw[4:8], "little") == 1
    assert int.from_bytes(raw[8:12], "little") == 3  # w plus the config and step records
    assert int.from_bytes(raw[12:14], "little") == 1 and raw[14:15] == b"w"


def test_float64_values_must_be_exact_in_float32(tmp_path):
    save_checkpoint(tmp_path / "ok.qrec", {"w": np.array([0.5, 2.0])})
    with pytest.raises(ValueError):
        save_checkpoint(tmp_path / "bad.qrec", {"w": np.array([0.1])})
    with pytest.raises(ValueError):
        save_checkpoint(tmp_path / "bad.qrec", {"__step__": np.zeros(2, np.float32)})


def test_corrupt_magic_is_a_version_error(tmp_path, rng64):
    path = tmp_path / "x.qrec"
    save_checkpoint(path, sample_tensors(rng64))
    raw = bytearray(path.read_bytes())
    raw[0:4] = b"XXXX"
    path.write_bytes(bytes(raw))
    with pytest.raises(CheckpointVersionError):
        load_checkpoint(path)


def test_unknown_version_is_rejected(tmp_path, rng64):
    path = tmp_path / "x.qrec"
    save_checkpoint(path, sample_tensors(rng64))
    raw = bytearray(path.read_bytes())
    raw[4:8] = (2).to_bytes(4, "little")
    path.write_bytes(bytes(raw))
    with pytest.raises(CheckpointVersionError, match="version 2"):
        load_checkpoint(path)


@pytest.mark.parametrize("cut", [1, 5, 40, 100])
def test_truncation_is_detected(tmp_path, rng64, cut):
    path = tmp_path / "x.qrec"
    save_checkpoint(path, sample_tensors(rng64))
    raw = path.read_bytes()
    path.write_bytes(raw[:-cut])
    with pytest.raises(CheckpointCorruptError):
        load_checkpoint(path)


def test_flipped_bit_fails_the_crc(tmp_path, rng64):
    path = tmp_path / "x.qrec"
    save_checkpoint(path, sample_tensors(rng64))
    raw = bytearray(path.read_bytes())
    raw[len(raw) // 2] ^= 0x01
    path.write_bytes(bytes(raw))
    with pytest.raises(CheckpointCorruptError, match="CRC"):
        load_checkpoint(path)


def test_check_shapes_names_the_tensor():
    with pytest.raises(ShapeError, match="emb.item"):
        check_shapes({"emb.item": (5, 4)}, {"emb.item": np.zeros((6, 4))})
    with pytest.raises(KeyError, match="head.w0"):
        check_shapes({"head.w0": (2,)}, {})


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    cfg = tiny_run_config()
    model = pipeline.train(cfg, out)
    return cfg, out, model


def test_saved_model_round_trips_and_evaluates_identically(trained):
    cfg, out, model = trained
    ckpt = load_checkpoint(out / pipeline.CHECKPOINT_NAME)
    for name, value in pipeline.model_tensors(model).items():
        assert ckpt.tensors[name].tobytes() == np.asarray(value, dtype=np.float32).tobytes()
    assert ckpt.step == model.best_step_
    cfg2, bundle, restored = pipeline.load_model(out / pipeline.CHECKPOINT_NAME)
    assert cfg2 == cfg
    for split in ("val", "test"):
        assert restored.evaluate(split) == model.evaluate(split)
    assert restored.augmenter_ is not None


def test_loading_into_a_different_vocabulary_names_the_tensor(trained):
    cfg, out, _ = trained
    other = pipeline.make_dataset(
        cfg.with_overrides(synthetic=SyntheticConfig(n_users=60, n_items=41, n_queries=12, n_categories=4, sessions=6))
    )
    with pytest.raises(ShapeError, match="emb.item"):
        pipeline.load_model(out / pipeline.CHECKPOINT_NAME, bundle=other)
