import json
import logging

import numpy as np
import pytest

from wnetct import models
from wnetct.models import (NAMES, UNetConfig, build_unet, compose, load_checkpoint, param_count,
                           save_checkpoint, spec_param_formula, unet_param_formula, wnet_spec)
from wnetct.nn.gradcheck import check_gradients
from wnetct.nn.tensor import Tensor
from wnetct.objectives import LossConfig, network_loss


def counts(depth):
    return {name: spec_param_formula(wnet_spec(name, depth)) for name in NAMES}


@pytest.mark.parametrize("depth", [1, 2, 3, 4, 5])
def test_parameter_identities_every_depth(depth):
    c = counts(depth)
    assert c["F"] - c["I"] == 641
    assert c["II"] == 2 * c["I"]
    assert c["FF"] == 2 * c["F"]
    assert c["FI"] == c["IF"] == c["I"] + c["F"]


def test_depth_one_closed_form():
    assert unet_param_formula(UNetConfig(depth=1)) == 640 + 36_928 + 65 == 37_633
    assert unet_param_formula(UNetConfig(depth=1, in_channels=2, out_channels=2)) == 1_216 + 36_928 + 130 == 38_274


@pytest.mark.parametrize("depth", [1, 2, 4])
def test_runtime_enumeration_matches_formula(depth):
    for name in NAMES:
        model = compose(name, 0, depth=depth)
        assert param_count(model) == spec_param_formula(model.spec)


def test_layer_shapes_match_formula():
    cfg = UNetConfig(depth=3, in_channels=2, out_channels=2)
    total = 0
    for _, shape, _ in models.unet_layer_shapes(cfg):
        total += int(np.prod(shape))
        total += shape[1] if len(shape) == 4 and shape[2] == 2 else shape[0]
    assert total == unet_param_formula(cfg)


def test_config_invariants():
    with pytest.raises(ValueError):
        UNetConfig(base_filters=32)
    with pytest.raises(ValueError):
        UNetConfig(depth=0)
    with pytest.raises(ValueError):
        wnet_spec("FIF")


def test_compose_i_is_single_unet():
    model = compose("I", 3, depth=2)
    unet = build_unet(UNetConfig(depth=2), np.random.default_rng(3))
    assert len(model.stages) == 1
    ours = [p.data for p in model.parameters()]
    ref = [p.data for p in unet.parameters()]
    assert all(a.tobytes() == b.tobytes() for a, b in zip(ours, ref))


@pytest.mark.parametrize("name,expected", [
    ("I", ["unet:image"]),
    ("F", ["fft2+pack", "unet:fourier", "unpack+ifft2"]),
    ("FI", ["fft2+pack", "unet:fourier", "unpack+ifft2", "unet:image"]),
    ("IF", ["unet:image", "fft2+pack", "unet:fourier", "unpack+ifft2"]),
    ("II", ["unet:image", "unet:image"]),
    ("FF", ["fft2+pack", "unet:fourier", "unet:fourier", "unpack+ifft2"]),
])
def test_bridge_trace(name, expected):
    assert compose(name, 0, depth=1).trace() == expected


def test_all_variants_shape_preserving():
    x = np.random.default_rng(0).random((2, 1, 64, 64)).astype(np.float32)
    for name in NAMES:
        out, stages = compose(name, 0, depth=4)(x)
        assert out.shape == x.shape
        assert stages.domains == [models.DOMAINS[c] for c in name]
        assert len(stages) == len(name)


def test_zero_weights_give_zero_output():
    model = compose("FI", 0, depth=2)
    for p in model.parameters():
        p.data[...] = 0
    out, _ = model(np.random.default_rng(1).random((1, 1, 16, 16)))
    assert np.all(out.data == 0)


def test_indivisible_size_rejected():
    with pytest.raises(ValueError):
        compose("I", 0, depth=4)(np.zeros((1, 1, 20, 20), dtype=np.float32))


def test_bad_input_shape_rejected():
    with pytest.raises(ValueError):
        compose("I", 0, depth=1)(np.zeros((1, 2, 16, 16), dtype=np.float32))


def test_ff_residual_reported(caplog):
    model = compose("FF", 0, depth=2)
    with caplog.at_level(logging.DEBUG, logger="wnetct.models"):
        _, stages = model(np.random.default_rng(2).random((1, 1, 16, 16)).astype(np.float32))
    assert np.isfinite(stages.imag_residual) and stages.imag_residual > 0
    assert any("imaginary residual" in r.message for r in caplog.records)


def test_enhance_clamps():
    model = compose("I", 0, depth=2)
    for p in model.parameters():
        p.data[...] = 0
    model.stages[0].params["stage0.final.bias"].data[...] = 5.0
    out = model.enhance(np.zeros((3, 16, 16), dtype=np.float32))
    assert out.shape == (3, 16, 16) and np.all(out == 1.0)


def test_composition_deterministic():
    a, b = compose("IF", 11, depth=2), compose("IF", 11, depth=2)
    assert all(p.data.tobytes() == q.data.tobytes() for p, q in zip(a.parameters(), b.parameters()))
    c = compose("IF", 12, depth=2)
    assert any(p.data.tobytes() != q.data.tobytes() for p, q in zip(a.parameters(), c.parameters()))


def test_stages_independent():
    model = compose("II", 0, depth=1)
    a, b = (s.parameters() for s in model.stages)
    assert all(p.data.tobytes() != q.data.tobytes() for p, q in zip(a, b) if p.name.endswith("weight"))


def _restrict(model, keep):
    """Freeze all but a few parameters to keep finite differences cheap."""
    leaves = [p for p in model.parameters() if any(k in p.name for k in keep)]
    return leaves


def _jittered_fi(seed=0):
    """Micro FI net nudged off the identity start.

    The identity lanes see the exact zeros of real-image spectra (imaginary DC
    and Nyquist terms), which sit on relu kinks where central differences are
    meaningless.
    """
    model = compose("FI", seed, np.float64, depth=2)
    rng = np.random.default_rng(99)
    for p in model.parameters():
        p.data += 1e-2 * rng.standard_normal(p.data.shape)
    return model


def test_micro_fi_gradient_through_bridge():
    model = _jittered_fi()
    x = np.random.default_rng(1).random((2, 1, 8, 8))
    r = np.random.default_rng(2).standard_normal((2, 1, 8, 8))
    xt = Tensor(x, requires_grad=True, name="input")
    fn = lambda: (model(xt)[0] * r).sum()  # noqa: E731
    # Stage-0 (Fourier) weights are upstream of the bridge.
    leaves = _restrict(model, ["stage0.enc0.conv0", "stage0.final", "stage1.enc1.conv1", "stage1.final"]) + [xt]
    errors = check_gradients(fn, leaves, h=1e-6, max_entries=15)
    assert max(errors.values()) < 1e-4, errors


def test_micro_fi_combined_loss_gradient():
    model = _jittered_fi()
    rng = np.random.default_rng(3)
    x = rng.random((2, 1, 16, 16))
    y = np.clip(x + 0.05 * rng.standard_normal(x.shape), 0, 1)
    # With K = 2e6 the total is ~1e6, so image-stage differences drown in rounding;
    # check the Fourier stage on the real loss and every stage with K = 1.
    full = lambda: network_loss(model(x)[1], y, LossConfig())  # noqa: E731
    errors = check_gradients(full, _restrict(model, ["stage0.enc0.conv0", "stage0.dec0.up", "stage0.final"]),
                             h=1e-6, max_entries=12)
    assert max(errors.values()) < 1e-4, errors
    unit = lambda: network_loss(model(x)[1], y, LossConfig(k_fourier=1.0))  # noqa: E731
    leaves = _restrict(model, ["stage0.enc0.conv0", "stage0.dec0.up", "stage1.enc0.conv1", "stage1.final"])
    errors = check_gradients(unit, leaves, h=1e-6, max_entries=12)
    assert max(errors.values()) < 1e-4, errors


def test_checkpoint_round_trip(tmp_path):
    model = compose("IF", 4, depth=2)
    save_checkpoint(model, tmp_path / "ck", seed=4, extra={"epoch": 3})
    manifest = json.loads((tmp_path / "ck" / "manifest.json").read_text())
    assert manifest["spec"]["name"] == "IF" and manifest["seed"] == 4 and manifest["epoch"] == 3
    assert manifest["n_params"] == param_count(model)
    loaded = load_checkpoint(tmp_path / "ck")
    assert loaded.spec == model.spec
    for p, q in zip(model.parameters(), loaded.parameters()):
        assert p.name == q.name and p.data.tobytes() == q.data.tobytes()
    x = np.random.default_rng(0).random((1, 1, 16, 16)).astype(np.float32)
    assert np.array_equal(model(x)[0].data, loaded(x)[0].data)


def test_missing_checkpoint(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_checkpoint(tmp_path / "nope")


def test_spec_dict_round_trip():
    spec = wnet_spec("FI", 3, shifted=False, spectrum_scale=2.0)
    assert models.WNetSpec.from_dict(json.loads(json.dumps(spec.to_dict()))) == spec


class TestFourierInit:
    @pytest.mark.parametrize("depth", [1, 2, 4])
    def test_identity_start_is_exact(self, depth):
        from wnetct import spectral
        model = compose("F", 0, np.float64, depth=depth)
        x = np.random.default_rng(depth).random((2, 1, 16, 16))
        out, stages = model(x)
        assert np.abs(out.data - x).max() < 1e-12
        assert np.array_equal(stages.outputs[0].data, spectral.image_to_channels(x))

    def test_defaults_per_domain(self):
        spec = wnet_spec("FI")
        assert [cfg.init for _, cfg in spec.stages] == ["identity", "he"]
        assert all(cfg.init == "he" for _, cfg in wnet_spec("FI", fourier_init="he").stages)

    def test_same_parameter_count(self):
        for name in NAMES:
            a, b = wnet_spec(name), wnet_spec(name, fourier_init="he")
            assert spec_param_formula(a) == spec_param_formula(b)

    def test_he_fourier_is_not_identity(self):
        model = models.WNet(wnet_spec("F", 2, fourier_init="he"), np.random.default_rng(0), np.float64)
        x = np.random.default_rng(1).random((1, 1, 16, 16))
        assert np.abs(model(x)[0].data - x).max() > 1e-3

    def test_other_channels_keep_he_draws(self):
        he = models.WNet(wnet_spec("F", 2, fourier_init="he"), np.random.default_rng(0))
        ident = compose("F", 0, depth=2)
        a, b = he.named_parameters(), ident.named_parameters()
        assert np.array_equal(a["stage0.enc0.conv0.weight"].data[4:], b["stage0.enc0.conv0.weight"].data[4:])
        assert np.array_equal(a["stage0.enc1.conv0.weight"].data, b["stage0.enc1.conv0.weight"].data)

    def test_invalid(self):
        with pytest.raises(ValueError):
            UNetConfig(init="xavier")
        with pytest.raises(ValueError):
            UNetConfig(in_channels=1, out_channels=2, init="identity")
