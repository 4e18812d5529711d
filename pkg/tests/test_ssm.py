"""Selective scan: discretization, recurrence oracle, duality, fusion."""

import numpy as np
import pytest

from mortonseg import tensor as T
from mortonseg.gradcheck import check_gradients
from mortonseg.morton import build_permutation, gather_sequence, scatter_back
from mortonseg.rng import make_rng
from mortonseg.ssm import (ScanParams, bidir_scan_block, discretize,
                           gated_fusion, init_ssm_params, linear_recurrence,
                           selective_scan)
from mortonseg.tensor import Tensor


def f64_params(rng, e, n, **kw):
    with T.default_dtype(np.float64):
        return init_ssm_params(rng, e, n, **kw)


def rand_seq(rng, ln, e):
    return Tensor(rng.normal(0, 1, (ln, e)), dtype=np.float64)


def naive_scan_oracle(seq: np.ndarray, p: ScanParams) -> np.ndarray:
    """Straight-line scalar-loop reference for one forward scan."""
    ln, e = seq.shape
    n = p.a_log.shape[1]
    a = -np.exp(p.a_log.data)
    d = p.d_skip.data if p.d_skip is not None else np.zeros(e)
    y = np.zeros((ln, e))
    h = np.zeros((e, n))
    for k in range(ln):
        pre = seq[k] @ p.w_delta.data + p.b_delta.data
        delta = np.log1p(np.exp(pre))                    # softplus
        bk = seq[k] @ p.w_b.data
        ck = seq[k] @ p.w_c.data
        for ei in range(e):
            for ni in range(n):
                abar = np.exp(delta[ei] * a[ei, ni])
                bbar = delta[ei] * bk[ni]
                h[ei, ni] = abar * h[ei, ni] + bbar * seq[k, ei]
            y[k, ei] = float(ck @ h[ei]) + d[ei] * seq[k, ei]
    return y


# -- discretize ---------------------------------------------------------------


def test_discretize_small_delta_limit():
    a = Tensor([[-1.0, -2.0]], dtype=np.float64)
    b = Tensor([[0.3, 0.7]], dtype=np.float64)
    delta = Tensor([[1e-12, 1e-12]], dtype=np.float64)
    abar, bbar = discretize(a, b, delta)
    assert np.allclose(abar.data, 1.0, atol=1e-11)
    assert np.allclose(bbar.data, 0.0, atol=1e-11)


def test_discretize_closed_form():
    abar, bbar = discretize(Tensor([-1.0], dtype=np.float64),
                            Tensor([2.0], dtype=np.float64),
                            Tensor([np.log(2.0)], dtype=np.float64))
    assert np.allclose(abar.data, 0.5, rtol=0, atol=1e-15)
    assert np.allclose(bbar.data, 2.0 * np.log(2.0), rtol=1e-15)


def test_discretize_matches_exp_oracle():
    rng = make_rng(41)
    a = -np.exp(rng.normal(0, 1, (3, 4)))
    delta = np.exp(rng.uniform(-3, 0, (3, 4)))
    abar, _ = discretize(Tensor(a, dtype=np.float64),
                         Tensor(np.ones((3, 4)), dtype=np.float64),
                         Tensor(delta, dtype=np.float64))
    expect = np.array([[np.exp(float(delta[i, j]) * float(a[i, j]))
                        for j in range(4)] for i in range(3)])
    assert np.allclose(abar.data, expect, rtol=1e-12, atol=0)


def test_discretize_rejects_nonpositive_delta():
    with pytest.raises(ValueError):
        discretize(Tensor([-1.0]), Tensor([1.0]), Tensor([0.0]))


# -- recurrence and scan ------------------------------------------------------


def test_scan_matches_naive_loop_oracle():
    rng = make_rng(42)
    p = f64_params(rng, 2, 3).scan
    seq = rand_seq(rng, 6, 2)
    out = selective_scan(seq, p, "forward")
    assert np.allclose(out.data, naive_scan_oracle(seq.data, p),
                       rtol=1e-10, atol=1e-12)


def test_scan_oracle_without_d_skip():
    rng = make_rng(43)
    p = f64_params(rng, 3, 2, use_d_skip=False).scan
    seq = rand_seq(rng, 5, 3)
    out = selective_scan(seq, p, "forward")
    assert np.allclose(out.data, naive_scan_oracle(seq.data, p),
                       rtol=1e-10, atol=1e-12)


def test_scan_single_step_closed_form():
    rng = make_rng(44)
    p = f64_params(rng, 2, 3).scan
    seq = rand_seq(rng, 1, 2)
    out = selective_scan(seq, p, "forward")
    s = seq.data[0]
    pre = s @ p.w_delta.data + p.b_delta.data
    delta = np.log1p(np.exp(pre))
    bk = s @ p.w_b.data
    ck = s @ p.w_c.data
    a = -np.exp(p.a_log.data)
    expect = np.array([
        float(ck @ (delta[e] * bk * s[e])) + p.d_skip.data[e] * s[e]
        for e in range(2)])
    assert np.allclose(out.data[0], expect, rtol=1e-12)


def test_scan_memoryless_when_decay_saturates():
    # huge negative A forces abar ~ 0: each step sees only its own input
    rng = make_rng(45)
    p = f64_params(rng, 2, 2).scan
    p.a_log.data = np.full((2, 2), 8.0)   # A = -exp(8) ~ -2981
    seq = rand_seq(rng, 7, 2)
    full = selective_scan(seq, p, "forward").data
    for k in range(7):
        alone = selective_scan(Tensor(seq.data[k:k + 1].copy(),
                                      dtype=np.float64), p, "forward").data
        assert np.allclose(full[k], alone[0], rtol=1e-12, atol=1e-12)


def test_scan_rejects_bad_input():
    rng = make_rng(46)
    p = f64_params(rng, 2, 2).scan
    with pytest.raises(ValueError):
        selective_scan(Tensor(np.zeros((0, 2))), p)
    with pytest.raises(ValueError):
        selective_scan(Tensor(np.zeros(4)), p)
    with pytest.raises(ValueError):
        selective_scan(rand_seq(make_rng(0), 3, 2), p, "sideways")


def test_reverse_duality_bit_exact():
    # reverse := Flip(scan(Flip(s))) with shared parameters, 20 sequences
    rng = make_rng(47)
    p = f64_params(rng, 3, 2).scan
    for trial in range(20):
        seq = rand_seq(make_rng(47, trial), int(rng.integers(1, 9)), 3)
        rev = selective_scan(seq, p, "reverse").data
        manual = np.flip(selective_scan(T.flip(seq, 0), p, "forward").data, 0)
        assert np.array_equal(rev, manual)


def test_recurrence_stability_long_sequence():
    rng = make_rng(48)
    p = f64_params(rng, 2, 3).scan
    seq = Tensor(np.clip(rng.normal(0, 1, (10_000, 2)), -3, 3),
                 dtype=np.float64)
    out = selective_scan(seq, p, "forward")
    assert np.all(np.isfinite(out.data))
    assert np.abs(out.data).max() < 1e6


def test_scan_gradients_match_fd():
    rng = make_rng(49)
    p = f64_params(rng, 2, 3).scan
    seq = Tensor(make_rng(49, 1).normal(0, 1, (6, 2)), requires_grad=True,
                 dtype=np.float64)
    probe = Tensor(np.cos(np.arange(12.0)).reshape(6, 2), dtype=np.float64)

    def fn(*_):
        return T.tsum(T.mul(selective_scan(seq, p, "forward"), probe))

    res = check_gradients(fn, p.tensors() + [seq], name="selective_scan")
    assert res.passed, str(res)
    assert res.max_rel_error < 1e-4


def test_linear_recurrence_shape_errors():
    ok = Tensor(np.ones((4, 2, 3)))
    with pytest.raises(ValueError):
        linear_recurrence(ok, Tensor(np.ones((4, 2, 2))), Tensor(np.ones((4, 3))))
    with pytest.raises(ValueError):
        linear_recurrence(ok, ok, Tensor(np.ones((4, 2))))


# -- fusion -------------------------------------------------------------------


def test_fusion_zero_theta_is_exact_mean():
    rng = make_rng(50)
    a = rand_seq(rng, 5, 3)
    b = rand_seq(rng, 5, 3)
    out = gated_fusion(a, b, Tensor(np.zeros(3), dtype=np.float64))
    assert np.array_equal(out.data, 0.5 * a.data + 0.5 * b.data)


def test_fusion_saturated_theta_is_passthrough():
    rng = make_rng(51)
    a = rand_seq(rng, 4, 2)
    b = rand_seq(rng, 4, 2)
    out = gated_fusion(a, b, Tensor(np.full(2, 40.0), dtype=np.float64))
    assert np.array_equal(out.data, a.data)    # sigmoid(40) == 1.0 in f64


def test_fusion_is_convex_blend():
    rng = make_rng(52)
    a = Tensor(rng.uniform(0.5, 2.0, (6, 3)), dtype=np.float64)
    b = Tensor(rng.uniform(0.5, 2.0, (6, 3)), dtype=np.float64)
    out = gated_fusion(a, b, Tensor(rng.normal(0, 2, 3), dtype=np.float64))
    assert np.all(np.abs(out.data - a.data)
                  <= np.abs(b.data - a.data) + 1e-15)


def test_fusion_theta_gradient_matches_fd():
    rng = make_rng(53)
    a = rand_seq(rng, 5, 3)
    b = rand_seq(rng, 5, 3)
    theta = Tensor(rng.normal(0, 1, 3), requires_grad=True, dtype=np.float64)
    probe = Tensor(np.sin(np.arange(15.0)).reshape(5, 3), dtype=np.float64)

    def fn(th):
        return T.tsum(T.mul(gated_fusion(a, b, th), probe))

    res = check_gradients(fn, [theta], name="fusion_theta")
    assert res.passed, str(res)


def test_fusion_rejects_shape_mismatch():
    with pytest.raises(ValueError):
        gated_fusion(Tensor(np.zeros((3, 2))), Tensor(np.zeros((2, 2))),
                     Tensor(np.zeros(2)))


# -- full block ---------------------------------------------------------------


def test_block_zero_input_is_identity():
    rng = make_rng(54)
    p = f64_params(rng, 4, 3)
    perm = build_permutation((3, 2, 2))
    feat = Tensor(np.zeros((4, 3, 2, 2)), dtype=np.float64)
    out = bidir_scan_block(feat, p, perm)
    assert np.array_equal(out.data, feat.data)


def test_block_shape_contract_on_crop_grid():
    rng = make_rng(55)
    p = f64_params(rng, 32, 2)
    perm = build_permutation((10, 10, 9))
    feat = Tensor(rng.normal(0, 1, (32, 10, 10, 9)), dtype=np.float64)
    out = bidir_scan_block(feat, p, perm)
    assert out.shape == (32, 10, 10, 9)
    assert np.all(np.isfinite(out.data))


def test_block_invariant_under_gather_scatter_roundtrip():
    rng = make_rng(56)
    p = f64_params(rng, 3, 2)
    perm = build_permutation((2, 3, 2))
    feat = Tensor(rng.normal(0, 1, (3, 2, 3, 2)), dtype=np.float64)
    restored = scatter_back(gather_sequence(feat, perm), perm)
    out1 = bidir_scan_block(feat, p, perm)
    out2 = bidir_scan_block(restored, p, perm)
    assert np.array_equal(out1.data, out2.data)


def test_block_gradients_match_fd():
    rng = make_rng(57)
    p = f64_params(rng, 2, 2)
    perm = build_permutation((2, 2, 2))
    feat = Tensor(make_rng(57, 1).normal(0, 1, (2, 2, 2, 2)),
                  requires_grad=True, dtype=np.float64)
    probe = Tensor(np.cos(np.arange(16.0)).reshape(2, 2, 2, 2),
                   dtype=np.float64)

    def fn(*_):
        return T.tsum(T.mul(bidir_scan_block(feat, p, perm), probe))

    res = check_gradients(fn, p.tensors() + [feat], name="bidir_scan_block")
    assert res.passed, str(res)


# -- parameter initialization -------------------------------------------------


def test_init_invariants():
    rng = make_rng(58)
    p = f64_params(rng, 8, 4)
    a = -np.exp(p.scan.a_log.data)
    assert np.all(a < 0)
    dt0 = np.log1p(np.exp(p.scan.b_delta.data))
    assert np.all(dt0 > 0.009) and np.all(dt0 < 0.11)
    alpha = 1.0 / (1.0 + np.exp(-p.theta.data))
    assert np.all((alpha > 0) & (alpha < 1))
    assert p.conv_w.shape == (8, 4)


def test_init_flags_control_structure():
    rng = make_rng(59)
    p = f64_params(rng, 4, 2, use_dwconv=False, use_d_skip=False,
                   separate_reverse=True)
    assert p.conv_w is None and p.conv_b is None
    assert p.scan.d_skip is None
    assert p.scan_rev is not None
    assert len(p.tensors()) == 2 * 5 + 1
