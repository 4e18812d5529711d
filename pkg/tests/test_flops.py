"""Analytic cost model: hand-counted small cases and pinned full-scale values.

Small cases are recomputed digit by digit in the test body; the
full-scale numbers were derived once from the formula sheet with
independent arithmetic and are pinned as exact integers (the model is
integer-only, so any drift is a real change, not noise).
"""

from fractions import Fraction

import numpy as np
import pytest

from mortonseg.flops import (
    PLACEMENTS,
    _stage_grids,
    bench_rows,
    bidirectional_block_flops,
    conv_backbone_flops,
    conv_layer_flops,
    flops_estimate,
    scan_direction_flops,
    tri_orientation_block_flops,
)
from mortonseg.network import desk_config, full_config
from mortonseg.ssm import DWCONV_WIDTH

RESOLUTIONS = [(64, 64, 64), (96, 96, 96), (128, 128, 128), (160, 160, 144)]

# pinned full-config placement costs (exact integers)
PINNED = {
    (64, 64, 64): (142_737_408, 4_421_222_400),
    (96, 96, 96): (481_738_752, 14_921_625_600),
    (128, 128, 128): (1_141_899_264, 35_369_779_200),
    (160, 160, 144): (2_007_244_800, 62_173_440_000),
}


def test_stage_grids():
    assert _stage_grids((64, 64, 64)) == [
        (64, 64, 64), (32, 32, 32), (16, 16, 16), (8, 8, 8),
        (4, 4, 4), (4, 4, 4)]
    assert _stage_grids((160, 160, 144))[5] == (10, 10, 9)
    with pytest.raises(ValueError):
        _stage_grids((60, 64, 64))


def test_conv_layer_flops_hand_case():
    # 2 * 3^3 * 2 * 4 * 10 = 4320
    assert conv_layer_flops(3, 2, 4, 10) == 4320
    assert conv_layer_flops(1, 16, 4, 100) == 2 * 16 * 4 * 100


def test_scan_direction_flops_hand_case():
    # L=5, E=3, N=2: core 9*5*3*2 = 270; proj 2*5*3*3 + 4*5*3*2 = 210
    assert scan_direction_flops(5, 3, 2) == 270 + 90 + 120


def test_block_flops_hand_cases():
    one_dir = scan_direction_flops(5, 3, 2)
    assert DWCONV_WIDTH == 4
    assert bidirectional_block_flops(5, 3, 2) == (
        2 * one_dir + 2 * 4 * 5 * 3 + 4 * 5 * 3)
    assert bidirectional_block_flops(5, 3, 2, use_dwconv=False) == (
        2 * one_dir + 4 * 5 * 3)
    assert tri_orientation_block_flops(5, 3, 2) == 3 * one_dir + 6 * 5 * 3


def test_dual_placement_decomposes():
    # one block on the 1/16 grid at ch[5], one on the 1/8 grid at ch[3]
    cfg = full_config()
    got = flops_estimate(cfg, (64, 64, 64), "dual_resolution")
    want = (bidirectional_block_flops(4 ** 3, 512, 16)
            + bidirectional_block_flops(8 ** 3, 128, 16))
    assert got == want


def test_reference_placement_decomposes():
    cfg = full_config()
    got = flops_estimate(cfg, (64, 64, 64), "tri_orientation_all_stages")
    grids = [64 ** 3, 32 ** 3, 16 ** 3, 8 ** 3, 4 ** 3, 4 ** 3]
    want = sum(tri_orientation_block_flops(v, c, 16)
               for v, c in zip(grids, cfg.channels))
    assert got == want


def test_full_scale_values_pinned():
    cfg = full_config()
    for res, (dual, ref) in PINNED.items():
        assert flops_estimate(cfg, res, "dual_resolution") == dual
        assert flops_estimate(cfg, res, "tri_orientation_all_stages") == ref


def test_ratio_exceeds_10_and_is_resolution_invariant():
    cfg = full_config()
    ratios = []
    for res in RESOLUTIONS:
        d = flops_estimate(cfg, res, "dual_resolution")
        r = flops_estimate(cfg, res, "tri_orientation_all_stages")
        ratios.append(Fraction(r, d))
    assert all(r >= 10 for r in ratios)
    # every term is linear in voxels, so the ratio is one exact rational
    assert len(set(ratios)) == 1
    assert ratios[0] == Fraction(44975, 1452)


def test_backbone_grows_with_resolution():
    cfg = full_config()
    costs = [conv_backbone_flops(cfg, r) for r in RESOLUTIONS]
    assert costs == sorted(costs)
    assert costs[0] > 0


def test_desk_config_also_dominated_by_reference():
    cfg = desk_config()
    d = flops_estimate(cfg, (32, 32, 32), "dual_resolution")
    r = flops_estimate(cfg, (32, 32, 32), "tri_orientation_all_stages")
    assert r > 10 * d


def test_flops_estimate_validates_placement():
    with pytest.raises(ValueError):
        flops_estimate(full_config(), (64, 64, 64), "everywhere")
    assert set(PLACEMENTS) == {"dual_resolution",
                               "tri_orientation_all_stages"}


def test_bench_rows_structure():
    rows = bench_rows(full_config(), RESOLUTIONS)
    assert [r.resolution for r in rows] == RESOLUTIONS
    for row in rows:
        assert row.reference == PINNED[row.resolution][1]
        assert row.dual == PINNED[row.resolution][0]
        assert row.backbone == conv_backbone_flops(full_config(),
                                                   row.resolution)
        assert row.ratio == pytest.approx(44975 / 1452)
    ratios = [r.ratio for r in rows]
    assert all(b >= a - 1e-12 for a, b in zip(ratios, ratios[1:]))
