import struct
import zlib

import numpy as np
import pytest

from cmunet.checkpoint import (
    MAGIC,
    decode,
    encode,
    load_checkpoint,
    load_into,
    model_tensors,
    restore_adam,
    restore_model,
    save_checkpoint,
)
from cmunet.config import RunConfig, format_config, load_config, parse_config, parse_overrides, save_config
from cmunet.data import synthetic_dataset
from cmunet.errors import CheckpointError, ConfigError
from cmunet.model import ModelConfig, build_model
from cmunet.training import train


@pytest.fixture
def small_cfg():
    return RunConfig.from_model_config(ModelConfig.small(16), epochs=2, batch_size=4, lr=3e-3)


def test_config_round_trip(tmp_path, small_cfg):
    cfg = small_cfg.replace(seed=4, augment=False, data="some/dir", threshold=0.25)
    assert parse_config(format_config(cfg)) == cfg
    save_config(cfg, tmp_path / "c.txt")
    assert load_config(tmp_path / "c.txt") == cfg


def test_config_parsing():
    cfg = parse_config("# comment\nlr = 0.001\nchannels = 2,4,8,16,32\nuse_msag = false\n\n")
    assert cfg.lr == 0.001 and cfg.channels == (2, 4, 8, 16, 32) and cfg.use_msag is False
    assert cfg.model_config().channels == (2, 4, 8, 16, 32)
    assert parse_overrides({"epochs": " 3"}) == {"epochs": 3}


@pytest.mark.parametrize("text", ["nonsense", "lr = fast", "bogus = 1", "use_msag = maybe", "dtype = float16",
                                  "epochs = -1"])
def test_config_errors(text):
    with pytest.raises(ConfigError):
        parse_config(text)


def test_missing_config_file(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "nope.txt")


def test_header_layout(small_cfg):
    blob = encode(small_cfg, 7, {"a": np.arange(3, dtype=np.int64)})
    assert blob[:5] == MAGIC
    (cfg_len,) = struct.unpack_from("<I", blob, 5)
    epoch, count = struct.unpack_from("<QI", blob, 9 + cfg_len)
    assert (epoch, count) == (7, 1)
    assert struct.unpack("<I", blob[-4:])[0] == zlib.crc32(blob[:-4])


def test_encode_decode_all_dtypes(small_cfg):
    tensors = {"f": np.linspace(0, 1, 6, dtype=np.float32).reshape(2, 3), "d": np.array([np.pi]),
               "i": np.asarray(5, dtype=np.int64)}
    back = decode(encode(small_cfg, 3, tensors))
    assert back.epoch == 3 and back.config == small_cfg
    for k, v in tensors.items():
        assert back.tensors[k].dtype == v.dtype and back.tensors[k].shape == v.shape
        assert back.tensors[k].tobytes() == v.tobytes()


def test_unsupported_dtype(small_cfg):
    with pytest.raises(CheckpointError):
        encode(small_cfg, 0, {"x": np.zeros(2, dtype=np.int8)})


def test_model_round_trip_is_bitwise(tmp_path, small_cfg):
    samples = synthetic_dataset(6, 16, seed=0)
    res = train(small_cfg, samples, tmp_path, with_optimizer=True)
    ckpt = load_checkpoint(tmp_path / "last.ckpt")
    assert ckpt.epoch == 2
    model = restore_model(ckpt)
    for (name, a), (_, b) in zip(res.model.named_tensors(), model.named_tensors()):
        assert a.data.tobytes() == b.data.tobytes(), name
    assert np.any(model["enc1.bn1.running_mean"].data != 0)
    adam = restore_adam(ckpt, model)
    assert adam.t == res.adam.t == 4
    for name in model.params:
        assert adam.m[name].tobytes() == res.adam.m[name].tobytes()
        assert adam.v[name].tobytes() == res.adam.v[name].tobytes()
    assert restore_adam(load_checkpoint(tmp_path / "best.ckpt"), model) is not None


def test_checkpoint_without_optimizer(tmp_path, small_cfg):
    model = build_model(small_cfg.model_config())
    save_checkpoint(tmp_path / "m.ckpt", model, small_cfg, 0)
    ckpt = load_checkpoint(tmp_path / "m.ckpt")
    assert restore_adam(ckpt, model) is None
    assert not any(n.startswith("adam.") for n in ckpt.tensors)


def test_corruption_is_detected(tmp_path, small_cfg):
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, build_model(small_cfg.model_config()), small_cfg, 0)
    blob = bytearray(path.read_bytes())
    blob[len(blob) // 2] ^= 0xFF
    path.write_bytes(bytes(blob))
    with pytest.raises(CheckpointError, match="checksum"):
        load_checkpoint(path)
    with pytest.raises(CheckpointError, match="magic"):
        decode(b"XXXXX" + bytes(blob[5:]))
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "missing.ckpt")


def test_mismatched_model_is_rejected_without_partial_load(small_cfg):
    src = build_model(small_cfg.model_config(), seed=1)
    ckpt = decode(encode(small_cfg, 0, model_tensors(src)))
    wide = build_model(ModelConfig.small(16, channels=(4, 8, 16, 32, 48)), seed=2)
    before = {n: t.data.copy() for n, t in wide.named_tensors()}
    with pytest.raises(CheckpointError, match="shape mismatch"):
        load_into(wide, ckpt)
    for n, t in wide.named_tensors():
        assert t.data.tobytes() == before[n].tobytes()
    ablated = build_model(ModelConfig.small(16, use_msag=False))
    with pytest.raises(CheckpointError, match="does not"):
        load_into(ablated, ckpt)
