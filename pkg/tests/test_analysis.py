import json
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from oracles import cross_entropy_scalar, miou_bruteforce
from splitseg.analysis import (
    ConfusionMatrix,
    CostReport,
    LayerCost,
    RDConfig,
    count_flops,
    count_params,
    cross_entropy,
    miou,
    rd_loss,
    decoder_comparison,
)
from splitseg.models import DecoderConfig
from splitseg.pipeline import SplitModel


def cloud_params_closed_form(d, s, f=None):
    """CD + JD parameter count written out term by term."""
    f = f or d
    conv = lambda cin, cout, k=1, g=1: cout * (cin // g) * k * k + cout
    bn = lambda c: 2 * c
    cd = f + conv(f, f) + bn(f) + conv(f, f, 3) + bn(f)
    sa = 4 * (conv(d, d) + bn(d))
    cross = 2 * (d * d + d) + s * d
    jd = 2 * sa + conv(d, d) + cross + conv(d, d, 5, d) + bn(d) + conv(d, s)
    return cd + jd


# -- parameters ----------------------------------------------------------------------------

def test_pointwise_head_param_count():
    rep = count_params(DecoderConfig.joint(d=48, num_classes=150))
    (head,) = rep.select("dec.head")
    assert head.params == 48 * 150 + 150 == 7350


@pytest.mark.parametrize("d,s", [(48, 150), (48, 19), (32, 150), (64, 150), (16, 3)])
def test_cloud_params_match_closed_form(d, s):
    assert count_params(DecoderConfig.joint(d=d, num_classes=s)).params == cloud_params_closed_form(d, s)


def test_frozen_cloud_param_totals():
    # closed-form values, frozen
    assert count_params(DecoderConfig.joint(d=48, num_classes=150)).params == 65_910
    assert count_params(DecoderConfig.joint(d=48, num_classes=19)).params == 53_203


@pytest.mark.parametrize("cfg", [DecoderConfig.joint(d=16, num_classes=7), DecoderConfig.baseline(num_classes=19)])
def test_params_agree_with_built_weights(cfg):
    p = SplitModel.build(cfg, seed=0).params
    assert count_params(cfg, "decoder").params == p.subset("dec.").trainable_count()
    cloud = ("dec.", "hd.", "em.") + (() if cfg.is_joint else ("fd.",))
    want = sum(v.size for k, v in p.items() if k.startswith(cloud) and not k.endswith((".mean", ".var")))
    assert count_params(cfg, "cloud").params == want


def test_param_report_has_no_macs():
    rep = count_params(DecoderConfig.joint())
    assert rep.macs == 0 and rep.resolution is None


# -- MACs -------------------------------------------------------------------------------------

def test_single_attention_matmul_macs():
    rep = count_flops(DecoderConfig.joint(), 512, 512)
    (qk,) = rep.select("dec.cm.sa1.qk")
    assert qk.macs == 4096 * 4096 * 48 == 805_306_368


def test_self_attention_total_is_four_t_squared_d():
    for cfg in (DecoderConfig.joint(), DecoderConfig.baseline(num_classes=19)):
        h, w = 1024, 2048
        t = (h // cfg.k) * (w // cfg.k)
        assert count_flops(cfg, h, w).total("self_attention") == 4 * t * t * cfg.d


@given(st.integers(1, 8), st.integers(1, 8))
def test_doubling_resolution_multiplies_self_attention_by_16(a, b):
    cfg = DecoderConfig.joint()
    small = count_flops(cfg, 32 * a, 32 * b).total("self_attention")
    big = count_flops(cfg, 64 * a, 64 * b).total("self_attention")
    assert big == 16 * small


def test_conv_mac_conventions():
    cfg = DecoderConfig.joint(d=48, num_classes=19)
    rep = count_flops(cfg, 512, 512, "decoder")
    by_name = {e.name: e for e in rep.entries}
    # transposed depthwise 5x5 on the 64x64 grid: every input pixel scatters a 5x5 patch
    assert by_name["dec.upconv"].macs == 64 * 64 * 48 * 25
    # head runs on the 128x128 grid after the up-conv
    assert by_name["dec.head"].macs == 128 * 128 * 48 * 19
    assert by_name["dec.upsample"].macs == 4 * 19 * 512 * 512
    assert by_name["dec.upsample"].kind == "interpolation"


def test_decoder_reduction_ratio():
    for h, w in ((512, 512), (1024, 2048)):
        d = count_flops(DecoderConfig.baseline(num_classes=19), h, w, "decoder").macs
        jd = count_flops(DecoderConfig.joint(num_classes=19), h, w, "decoder").macs
        assert d / jd >= 20


def test_report_rejects_bad_input():
    with pytest.raises(ValueError):
        count_flops(DecoderConfig.joint(), 500, 512)
    with pytest.raises(ValueError):
        count_flops(DecoderConfig.joint(), 512, 512, scope="car")
    with pytest.raises(TypeError):
        count_params(42)


def test_decoder_comparison_rows():
    base, jd = decoder_comparison(1024, 2048, num_classes=19)
    assert base.label.startswith("CD+FD+D") and jd.label.startswith("CD+JD")
    assert base.macs > 20 * jd.macs


# -- report serialization ------------------------------------------------------------------------

def test_totals_equal_sum_of_entries():
    rep = count_flops(DecoderConfig.joint(), 512, 512)
    assert rep.params == sum(e.params for e in rep.entries)
    assert rep.macs == sum(e.macs for e in rep.entries)


def test_report_json_and_csv_roundtrip():
    rep = count_flops(DecoderConfig.baseline(num_classes=19), 256, 512)
    assert CostReport.from_json(rep.to_json()) == rep
    assert CostReport.from_csv(rep.to_csv()) == rep
    d = json.loads(rep.to_json())
    d["total_macs"] += 1
    with pytest.raises(ValueError):
        CostReport.from_dict(d)
    blank = CostReport([LayerCost("x", "conv", 1, 2)])
    assert CostReport.from_csv(blank.to_csv()) == blank


# -- metrics --------------------------------------------------------------------------------------

def test_miou_perfect_prediction():
    gt = np.array([[1, 2], [2, 1]])
    assert miou(gt, gt, 2) == 100.0


def test_miou_hand_case():
    gt = np.ones((4, 4), int)
    gt[:, 2:] = 2
    assert miou(np.ones((4, 4), int), gt, 2) == 25.0


def test_miou_ignores_masked_pixels(rng):
    gt = rng.integers(1, 4, (8, 8))
    pred = rng.integers(1, 4, (8, 8))
    masked_gt, masked_pred = gt.copy(), pred.copy()
    mask = rng.random((8, 8)) < 0.3
    masked_gt[mask] = 255
    masked_pred[mask] = rng.integers(1, 4, mask.sum())
    cm = ConfusionMatrix(3, ignore=255).update(masked_pred, masked_gt)
    assert cm.total + cm.ignored == 64
    want = miou_bruteforce(pred[~mask], gt[~mask], 3)
    assert cm.miou() == pytest.approx(want, abs=1e-12)


@pytest.mark.parametrize("seed", range(10))
def test_miou_matches_bruteforce(seed):
    rng = np.random.default_rng(seed)
    s = int(rng.integers(2, 12))
    gt = rng.integers(1, s + 1, (16, 12))
    pred = np.where(rng.random(gt.shape) < 0.6, gt, rng.integers(1, s + 1, gt.shape))
    assert miou(pred, gt, s) == pytest.approx(miou_bruteforce(pred, gt, s), abs=1e-12)


@given(st.integers(2, 8), st.integers(0, 2**32 - 1))
def test_miou_invariant_under_relabeling(s, seed):
    rng = np.random.default_rng(seed)
    gt = rng.integers(1, s + 1, (6, 7))
    pred = rng.integers(1, s + 1, (6, 7))
    perm = rng.permutation(s) + 1
    relabel = lambda m: perm[m - 1]
    assert miou(relabel(pred), relabel(gt), s) == pytest.approx(miou(pred, gt, s), abs=1e-12)


def test_confusion_merge_is_shardable(rng):
    gt = rng.integers(1, 5, (10, 10))
    pred = rng.integers(1, 5, (10, 10))
    whole = ConfusionMatrix(4).update(pred, gt)
    parts = ConfusionMatrix(4).update(pred[:3], gt[:3]).merge(ConfusionMatrix(4).update(pred[3:], gt[3:]))
    np.testing.assert_array_equal(whole.counts, parts.counts)


def test_confusion_rejects_out_of_range():
    with pytest.raises(ValueError):
        ConfusionMatrix(3).update(np.array([4]), np.array([1]))
    with pytest.raises(ValueError):
        ConfusionMatrix(3).update(np.array([1]), np.array([0]))


def test_cross_entropy_trivial_cases():
    gt = np.array([[1, 3], [2, 2]])
    onehot = np.zeros((3, 2, 2), np.float32)
    for i in range(2):
        for j in range(2):
            onehot[gt[i, j] - 1, i, j] = 1.0
    assert cross_entropy(onehot, gt) == 0.0
    uniform = np.full((3, 2, 2), 1 / 3, np.float32)
    assert cross_entropy(uniform, gt) == pytest.approx(math.log(3), abs=1e-6)


@given(st.integers(2, 9), st.integers(0, 2**32 - 1))
def test_cross_entropy_matches_scalar_oracle(s, seed):
    rng = np.random.default_rng(seed)
    logits = rng.standard_normal((s, 5, 4))
    y = (np.exp(logits) / np.exp(logits).sum(0)).astype(np.float32)
    gt = rng.integers(1, s + 1, (5, 4))
    gt[0, 0] = 99
    got = cross_entropy(y, gt, ignore=99)
    assert got >= 0
    assert got == pytest.approx(cross_entropy_scalar(y, gt, ignore=99), abs=1e-6)


def test_rd_loss():
    assert rd_loss(2.0, 1.0, RDConfig(0.5)) == 1.5
    for bad in (0.0, 1.0, -0.1, 1.5):
        with pytest.raises(ValueError):
            RDConfig(bad)
    rng = np.random.default_rng(0)
    for _ in range(20):
        a, jd, jr = rng.uniform(0.01, 0.99), rng.uniform(0, 5), rng.uniform(0, 5)
        assert rd_loss(jd, jr, RDConfig(a)) == pytest.approx(a * jd + (1 - a) * jr, rel=1e-15)
