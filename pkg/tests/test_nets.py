"""Unit tests for model assembly, parameter counting, and the checkpoint format."""

import numpy as np
import pytest

from hyve.errors import ConfigError, FormatError, InputError
from hyve.nets import ModelConfig, build_model, count_parameters, load_model, save_model


def _first_layer_count(kind, c_in=200, c_out=25, k=3, g=5):
    if kind in ("hyve", "hyve++"):
        cfg = ModelConfig(kind, 2, widths=(c_out,), kernel_size=k, num_wrois=g,
                          wavelength_range=(400.0, 1000.0))
    else:
        cfg = ModelConfig(kind, 2, widths=(c_out,), kernel_size=k, c_in=c_in)
    return count_parameters(build_model(cfg).first)


def test_first_layer_parameter_counts():
    assert _first_layer_count("conv2d") == 45000   # 200*25*9
    assert _first_layer_count("ds") == 6800        # 200*9 + 200*25
    assert _first_layer_count("hyve") == 1135      # 5*25*9 + 2*5
    assert _first_layer_count("hyve++") == 1371    # 1135 + 25*9 + 9 + 2


def test_model_parameter_count_totals():
    cfg = ModelConfig("hyve++", 3, wavelength_range=(400.0, 1000.0))
    model = build_model(cfg)
    total = sum(p.size for _, p in model.parameters())
    assert count_parameters(model) == total
    # hidden ds blocks: (25*9 + 25*30) + (30*9 + 30*50); head: 50*3 + 3
    assert total == 1371 + (225 + 750) + (270 + 1500) + 153


def test_config_validation():
    with pytest.raises(ConfigError):
        ModelConfig("resnet", 3, c_in=10).validate()
    with pytest.raises(ConfigError):
        ModelConfig("conv2d", 3).validate()  # fixed kind needs c_in
    with pytest.raises(ConfigError):
        ModelConfig("hyve", 3, c_in=10, wavelength_range=(400.0, 1000.0)).validate()
    with pytest.raises(ConfigError):
        ModelConfig("hyve", 3).validate()  # aware kind needs a range
    with pytest.raises(ConfigError):
        ModelConfig("conv2d", 1, c_in=10).validate()
    with pytest.raises(ConfigError):
        ModelConfig("conv2d", 3, c_in=10, kernel_size=4).validate()


def test_forward_shapes_and_wavelength_contract():
    aware = build_model(ModelConfig("hyve++", 3, widths=(4, 5),
                                    wavelength_range=(400.0, 1000.0)))
    lam = np.linspace(450.0, 950.0, 6)
    x = np.random.default_rng(0).normal(size=(2, 6, 8, 8))
    assert aware.forward(x, lam).shape == (2, 3)
    with pytest.raises(InputError):
        aware.forward(x)  # aware model needs wavelengths

    fixed = build_model(ModelConfig("conv2d", 3, widths=(4, 5), c_in=6))
    assert fixed.forward(x).shape == (2, 3)
    with pytest.raises(InputError):
        fixed.forward(x, lam)  # fixed model takes no wavelengths
    with pytest.raises(InputError):
        fixed.forward(np.zeros((1, 7, 8, 8)))  # wrong channel count


def test_seeded_build_is_reproducible():
    cfg = ModelConfig("hyve++", 3, widths=(4, 5), wavelength_range=(400.0, 1000.0), seed=9)
    a, b = build_model(cfg), build_model(cfg)
    for (na, pa), (nb, pb) in zip(a.parameters(), b.parameters()):
        assert na == nb
        np.testing.assert_array_equal(pa.value, pb.value)


def test_checkpoint_round_trip_is_byte_stable(tmp_path):
    model = build_model(ModelConfig("hyve++", 3, widths=(4, 5),
                                    wavelength_range=(400.0, 1000.0), seed=2))
    p1 = tmp_path / "a.hyve"
    p2 = tmp_path / "b.hyve"
    save_model(model, p1, extras={"preproc": "none"})
    loaded, extras = load_model(p1)
    assert extras == {"preproc": "none"}
    save_model(loaded, p2, extras=extras)
    assert p1.read_bytes() == p2.read_bytes()
    for (na, pa), (nb, pb) in zip(model.parameters(), loaded.parameters()):
        assert na == nb
        np.testing.assert_array_equal(pa.value, pb.value)


def test_checkpoint_format_errors(tmp_path):
    model = build_model(ModelConfig("conv2d", 2, widths=(3,), c_in=4, seed=1))
    path = tmp_path / "m.hyve"
    save_model(model, path)
    blob = path.read_bytes()

    bad_magic = tmp_path / "bad_magic.hyve"
    bad_magic.write_bytes(b"NOPE" + blob[4:])
    with pytest.raises(FormatError, match="magic"):
        load_model(bad_magic)

    truncated = tmp_path / "trunc.hyve"
    truncated.write_bytes(blob[:-16])
    with pytest.raises(FormatError, match="byte"):
        load_model(truncated)

    trailing = tmp_path / "trail.hyve"
    trailing.write_bytes(blob + b"\x00" * 8)
    with pytest.raises(FormatError, match="trailing"):
        load_model(trailing)
