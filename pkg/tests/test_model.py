import numpy as np
import pytest

from cmunet.engine import Tape, Tensor, no_grad
from cmunet.errors import ConfigError, DimensionError
from cmunet.model import (
    ModelConfig,
    build_model,
    conv_block,
    convmixer_layer,
    convmixer_spatial,
    forward,
    msag,
    parameter_count,
    parameter_specs,
)

# enumerated once from build_model(ModelConfig()) by summing every trainable tensor's size
DEFAULT_PARAMETER_COUNT = 49_930_433


@pytest.fixture(scope="module")
def small():
    return build_model(ModelConfig.small(32), seed=0, dtype=np.float64)


def test_config_validation():
    with pytest.raises(ConfigError, match="input_size"):
        ModelConfig(input_size=100).validate()
    with pytest.raises(ConfigError, match="convmixer_kernel"):
        ModelConfig(convmixer_kernel=4).validate()
    with pytest.raises(ConfigError, match="channels"):
        build_model(ModelConfig(channels=(1, 2, 3)))


def test_parameter_names_follow_scheme():
    names = [s.name for s in parameter_specs(ModelConfig())]
    for expected in ("enc1.conv1.weight", "enc1.bn1.gamma", "cm.3.dw.weight", "msag2.dil.bn.running_var",
                     "dec4.up.weight", "head.weight"):
        assert expected in names
    assert len(names) == len(set(names))


def test_toggles_off_gives_plain_unet_names():
    cfg = ModelConfig.small(32, use_convmixer=False, use_msag=False)
    names = {s.name for s in parameter_specs(cfg)}
    assert not any(n.startswith(("cm.", "msag")) for n in names)
    full = {s.name for s in parameter_specs(ModelConfig.small(32))}
    assert names == {n for n in full if not n.startswith(("cm.", "msag"))}


def test_parameter_count_closed_form_matches_built():
    for cfg in (ModelConfig.small(32), ModelConfig.small(32, use_msag=False),
                ModelConfig.small(32, use_convmixer=False, use_msag=False),
                ModelConfig.small(32, in_channels=1, convmixer_depth=3, convmixer_kernel=5)):
        assert parameter_count(cfg) == build_model(cfg).num_parameters()


def test_parameter_count_default_regression():
    assert parameter_count(ModelConfig()) == DEFAULT_PARAMETER_COUNT


def test_single_pointwise_conv_count():
    from cmunet.model import _conv_specs

    assert sum(int(np.prod(s.shape)) for s in _conv_specs("x", 3, 8, 1)) == 32


def test_msag_toggle_reduces_count():
    assert parameter_count(ModelConfig(use_msag=False)) < parameter_count(ModelConfig())


def test_build_is_deterministic():
    a = build_model(ModelConfig.small(32), seed=7)
    b = build_model(ModelConfig.small(32), seed=7)
    c = build_model(ModelConfig.small(32), seed=8)
    for (na, ta), (nb, tb) in zip(a.named_tensors(), b.named_tensors()):
        assert na == nb and ta.data.tobytes() == tb.data.tobytes()
    assert a["enc1.conv1.weight"].data.tobytes() != c["enc1.conv1.weight"].data.tobytes()


def test_initialization_scheme():
    m = build_model(ModelConfig.small(32), seed=0, dtype=np.float64)
    w = m["enc2.conv1.weight"].data
    bound = np.sqrt(6.0 / (4 * 9))
    assert np.abs(w).max() <= bound and np.abs(w).max() > 0.9 * bound
    assert np.all(m["enc2.conv1.bias"].data == 0)
    assert np.all(m["enc2.bn1.gamma"].data == 1) and np.all(m["enc2.bn1.beta"].data == 0)
    assert np.all(m["enc2.bn1.running_var"].data == 1)


def test_conv_block_shape_and_sign(small, rng):
    x = Tensor(rng.normal(size=(2, 3, 32, 32)))
    out = conv_block(small, "enc1", x, training=True)
    assert out.shape == (2, 4, 32, 32)
    assert np.all(out.data >= 0)


def test_convmixer_zero_depthwise_is_identity(rng):
    m = build_model(ModelConfig.small(32), seed=0, dtype=np.float64)
    m["cm.0.dw.weight"].data = np.zeros_like(m["cm.0.dw.weight"].data)
    m["cm.0.dw.bias"].data = np.zeros_like(m["cm.0.dw.bias"].data)
    f = Tensor(rng.normal(size=(2, 64, 2, 2)))
    np.testing.assert_array_equal(convmixer_spatial(m, "cm.0", f, training=True).data, f.data)
    assert convmixer_layer(m, "cm.0", f, training=True).shape == f.shape


def test_msag_zero_weights_gives_one_and_a_half(rng):
    m = build_model(ModelConfig.small(32), seed=0, dtype=np.float64)
    for name in m.params:
        if name.startswith("msag3.") and (name.endswith(".weight") or name.endswith(".bias")):
            m[name].data = np.zeros_like(m[name].data)
    f = Tensor(rng.normal(size=(2, 16, 8, 8)))
    np.testing.assert_array_equal(msag(m, "msag3", f, training=True).data, 1.5 * f.data)


def test_msag_bounds_and_shape(small, rng):
    f = Tensor(rng.uniform(0, 2, size=(1, 8, 16, 16)))
    out = msag(small, "msag2", f, training=True).data
    assert out.shape == f.shape
    assert np.all(out >= f.data) and np.all(out <= 2 * f.data)


def test_forward_shape_and_eval_determinism(small, rng):
    x = Tensor(rng.random((2, 3, 32, 32)))
    with no_grad():
        a = forward(small, x, training=False).data
        b = forward(small, x, training=False).data
    assert a.shape == (2, 1, 32, 32)
    assert a.tobytes() == b.tobytes()


def test_forward_rejects_wrong_size(small):
    with pytest.raises(DimensionError) as err:
        forward(small, Tensor(np.zeros((1, 3, 64, 32))))
    assert err.value.axis == "H"
    with pytest.raises(DimensionError):
        forward(small, Tensor(np.zeros((1, 1, 32, 32))))


def test_ablation_forward_has_no_gate_ops(rng):
    m = build_model(ModelConfig.small(32, use_convmixer=False, use_msag=False), seed=0)
    with Tape() as tape, no_grad():
        out = forward(m, Tensor(rng.random((1, 3, 32, 32)).astype(np.float32)), training=True)
    assert out.shape == (1, 1, 32, 32)
    convs = tape.find("conv2d")
    assert all(e.meta["groups"] == 1 and e.meta["dilation"] == 1 for e in convs)
    assert not any((e.meta.get("tag") or "").startswith(("msag", "cm.")) for e in tape)
    assert "gelu" not in tape.ops() and "sigmoid" not in tape.ops()


def test_full_model_tape_contains_every_component(small, rng):
    with Tape() as tape, no_grad():
        forward(small, Tensor(rng.random((1, 3, 32, 32))), training=False)
    assert len(tape.find("conv2d", groups=64)) == 2
    assert len(tape.find("conv2d", dilation=2)) == 4
    assert len(tape.find("sigmoid")) == 4
