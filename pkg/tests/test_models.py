import struct

import numpy as np
import pytest

from lesionnet.models import (B0, B7, B0_STAGES, EfficientNet, MultiscaleEfficientNet, ScaledVariant,
                              WeightFileError, build_efficientnet, load_weights, param_count,
                              read_weights, round_filters, save_weights, variant_from_name)
from lesionnet.nn import Conv, Dense, MultiscaleSpec
from lesionnet.tensor import Tensor

import gradsuite
import oracles

TINY = ScaledVariant(0.25, 0.5, "tiny")


def test_b0_table():
    assert [B0.repeats(s.base_repeats) for s in B0_STAGES] == [1, 2, 2, 3, 3, 4, 1]
    assert [B0.channels(s.base_channels) for s in B0_STAGES] == [16, 24, 40, 80, 112, 192, 320]
    assert B0.channels(1280) == 1280


def test_b7_repeats_and_doubled_widths():
    assert [B7.repeats(s.base_repeats) for s in B0_STAGES] == [4, 7, 7, 10, 10, 13, 4]
    widths = [B7.channels(s.base_channels) for s in B0_STAGES]
    assert widths == [2 * B0.channels(s.base_channels) for s in B0_STAGES]
    assert all(w % 8 == 0 for w in widths)
    assert B7.channels(1280) == 2560


@pytest.mark.parametrize("c,w,expected", [(32, 0.25, 8), (40, 0.25, 16), (80, 0.25, 24), (112, 0.25, 32),
                                          (1280, 0.25, 320), (16, 1.1, 16), (24, 1.1, 24), (40, 1.1, 48),
                                          (16, 2.0, 32)])
def test_round_filters(c, w, expected):
    assert round_filters(c, w) == expected


def test_variant_lookup():
    assert variant_from_name("B7") is B7
    assert variant_from_name("custom", 0.5, 0.5) == ScaledVariant(0.5, 0.5, "custom")
    with pytest.raises(ValueError):
        variant_from_name("custom")
    with pytest.raises(ValueError):
        variant_from_name("b3")
    with pytest.raises(ValueError):
        ScaledVariant(0.0, 1.0)


def test_rank3_64_trace_and_forward_agree():
    m = EfficientNet(3, B0, 1, (4, 64, 64))
    trace = dict(m.trace)
    assert trace["head"] == (1280, 4, 2, 2)
    assert trace["stem"] == (32, 4, 32, 32)
    seen = []
    m.eval()
    out = m(np.zeros((1, 1, 4, 64, 64), np.float32), collect=seen)
    assert out.shape == (1, 1)
    assert [(n, tuple(s)) for n, s in seen] == m.trace


def test_too_small_input_names_stage():
    with pytest.raises(ValueError, match=r"input too small: stage \d"):
        EfficientNet(3, TINY, 1, (4, 16, 16))


def test_wrong_input_shape_rejected():
    m = EfficientNet(3, TINY, 1, (4, 32, 32))
    with pytest.raises(ValueError, match="expects input"):
        m(np.zeros((1, 1, 4, 32, 16), np.float32))


def test_fused_feature_lengths():
    assert MultiscaleEfficientNet(B0, (32, 32)).feature_dim == 1344
    assert MultiscaleEfficientNet(B7, (32, 32)).feature_dim == 2624


def test_multiscale_branch_ablation_identity():
    m = MultiscaleEfficientNet(TINY, (32, 32), seed=3, dtype=np.float64)
    for p in m.multiscale.parameters():
        p.data[:] = 0
    m.eval()
    x = np.random.default_rng(0).random((2, 3, 32, 32))
    fused = m(x).data
    backbone = m.backbone.features(Tensor(x)).data
    w, b = m.classifier.weight.data, m.classifier.bias.data
    head = backbone @ w[:, :m.backbone.feature_dim].T + b
    np.testing.assert_allclose(fused, head, rtol=1e-12)


def test_param_count_small_layers():
    assert param_count(Dense(10, 1)) == 11
    assert param_count(Conv(2, 3, 8, 3)) == 216


def test_param_count_tiny_matches_layer_arithmetic():
    m2 = EfficientNet(2, TINY, 3, (32, 32))
    assert param_count(m2) == oracles.tiny_param_count(2, 3)
    m3 = EfficientNet(3, TINY, 1, (4, 32, 32))
    assert param_count(m3) == oracles.tiny_param_count(3, 1)
    ms = MultiscaleEfficientNet(TINY, (32, 32))
    expected = (oracles.tiny_param_count(2, 3, include_top=False) + oracles.multiscale_branch_params(3)
                + (oracles.TINY_HEAD + 64) + 1)
    assert param_count(ms) == expected


def test_param_count_excludes_bn_statistics():
    m = EfficientNet(2, TINY, 3, (32, 32))
    state = sum(a.size for a in m.state_dict().values())
    buffers = sum(a.size for _, a in m.named_buffers())
    assert state - buffers == param_count(m)


def test_param_count_monotone_in_width():
    counts = [param_count(EfficientNet(3, ScaledVariant(w, 1.0), 1, (4, 32, 32))) for w in (0.25, 0.5, 1.0, 2.0)]
    assert counts == sorted(counts) and len(set(counts)) == 4


def test_logits_finite_over_seeds():
    x = np.random.default_rng(0).random((2, 1, 4, 32, 32)).astype(np.float32)
    for seed in range(100):
        m = build_efficientnet(3, TINY, 1, (4, 32, 32), seed=seed)
        assert np.all(np.isfinite(m(x).data))


def test_seed_determinism():
    a = EfficientNet(3, TINY, 1, (4, 32, 32), seed=5).state_dict()
    b = EfficientNet(3, TINY, 1, (4, 32, 32), seed=5).state_dict()
    assert all(np.array_equal(a[k], b[k]) for k in a)


# -- weight files ---------------------------------------------------------------

def _trained_like(seed=0):
    m = EfficientNet(3, TINY, 1, (4, 32, 32), seed=seed)
    m.train()
    m(np.random.default_rng(seed).random((3, 1, 4, 32, 32)).astype(np.float32))  # moves BN statistics
    return m


def test_weight_round_trip_bitwise(tmp_path):
    m = _trained_like()
    path = tmp_path / "w.lnwt"
    save_weights(m, path)
    fresh = EfficientNet(3, TINY, 1, (4, 32, 32), seed=99)
    load_weights(fresh, path)
    x = np.random.default_rng(1).random((2, 1, 4, 32, 32)).astype(np.float32)
    m.eval()
    fresh.eval()
    assert m(x).data.tobytes() == fresh(x).data.tobytes()
    save_weights(fresh, tmp_path / "w2.lnwt")
    assert path.read_bytes() == (tmp_path / "w2.lnwt").read_bytes()


def test_load_into_other_shape_names_parameter(tmp_path):
    save_weights(EfficientNet(3, TINY, 1, (4, 32, 32)), tmp_path / "w.lnwt")
    other = EfficientNet(3, ScaledVariant(0.5, 0.5), 1, (4, 32, 32))
    with pytest.raises(WeightFileError, match="stem_conv.weight"):
        load_weights(other, tmp_path / "w.lnwt")


def test_weight_file_guards(tmp_path):
    path = tmp_path / "w.lnwt"
    save_weights(Dense(3, 2), path)
    raw = path.read_bytes()
    swapped = tmp_path / "swapped.lnwt"
    swapped.write_bytes(raw[:4][::-1] + raw[4:])
    with pytest.raises(WeightFileError, match="big-endian"):
        read_weights(swapped)
    be_version = tmp_path / "be.lnwt"
    be_version.write_bytes(raw[:4] + struct.pack(">H", 1) + raw[6:])
    with pytest.raises(WeightFileError, match="big-endian"):
        read_weights(be_version)
    (tmp_path / "t.lnwt").write_bytes(raw[:-3])
    with pytest.raises(WeightFileError, match="truncated"):
        read_weights(tmp_path / "t.lnwt")
    (tmp_path / "x.lnwt").write_bytes(raw + b"\0")
    with pytest.raises(WeightFileError, match="trailing"):
        read_weights(tmp_path / "x.lnwt")
    (tmp_path / "m.lnwt").write_bytes(b"NOPE" + raw[4:])
    with pytest.raises(WeightFileError, match="magic"):
        read_weights(tmp_path / "m.lnwt")


def test_missing_and_unexpected_entries(tmp_path):
    save_weights(Dense(3, 2, bias=False), tmp_path / "nob.lnwt")
    with pytest.raises(WeightFileError, match="missing"):
        load_weights(Dense(3, 2), tmp_path / "nob.lnwt")
    save_weights(Dense(3, 2), tmp_path / "b.lnwt")
    with pytest.raises(WeightFileError, match="unexpected"):
        load_weights(Dense(3, 2, bias=False), tmp_path / "b.lnwt")


# -- whole-model gradients (a few instances here; the acceptance run does 20) -------

@pytest.mark.parametrize("name", ["tiny_efficientnet3d", "tiny_multiscale"])
def test_tiny_model_gradients(name):
    assert gradsuite.run_case(name, 2) < 1e-4


def test_multiscale_spec_passthrough():
    m = MultiscaleEfficientNet(TINY, (32, 32), ms_spec=MultiscaleSpec(conv_channels=(4, 8)))
    assert m.feature_dim == 320 + 8
