"""Registry of finite-difference checks covering every differentiable op.

Each entry builds small float64 inputs from a fixed seed and compares
analytic gradients against central differences. The suite is what the
`gradcheck` command runs and what the acceptance test asserts on; shapes
are kept tiny so the full sweep finishes well inside its time budget.

The vector quantizer is the one deliberate exception: its forward is
piecewise constant, so a finite-difference probe of the straight-through
path would measure zero. Its gradient contract (backward == identity,
bit for bit) is verified directly and reported alongside the FD results;
the commitment loss, which is differentiable, gets a normal FD entry.
The composed whole-network check therefore runs with VQ disabled.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .conv import conv3d, dwconv1d_causal, upsample_nearest3d
from .gradcheck import GradCheckResult, check_gradients
from .morton import build_permutation, gather_sequence, scatter_back
from .network import Model, ce_dice_loss, desk_config, instance_norm
from .rng import make_rng
from .ssm import (ScanParams, gated_fusion, init_ssm_params,
                  linear_recurrence, selective_scan)
from .tensor import Tensor
from .vq import make_codebook, quantize, straight_through_check


def _t(rng, *shape, lo=-1.0, hi=1.0):
    return Tensor(rng.uniform(lo, hi, size=shape), requires_grad=True,
                  dtype=np.float64)


def _scalarize(fn):
    """Wrap a tensor-valued fn into sum(fn * probe), a scalar objective."""
    def wrapped(*inputs):
        out = fn(*inputs)
        probe = np.cos(np.arange(out.size, dtype=np.float64)).reshape(out.shape)
        return T.tsum(T.mul(out, Tensor(probe, dtype=np.float64)))
    return wrapped


def suite(seed: int = 0) -> list:
    """(name, zero-arg callable -> GradCheckResult) pairs, all ops."""
    rng = make_rng(seed, 0xC0)
    checks = []

    def add(name, fn, inputs, **kw):
        checks.append((name, lambda: check_gradients(
            fn, inputs, name=name, **kw)))

    a = _t(rng, 3, 4)
    b = _t(rng, 3, 4)
    c = _t(rng, 4, lo=0.5, hi=2.0)
    add("add", _scalarize(T.add), [a, b])
    add("add_broadcast", _scalarize(T.add), [_t(rng, 3, 4), _t(rng, 4)])
    add("sub", _scalarize(T.sub), [_t(rng, 3, 4), _t(rng, 3, 4)])
    add("mul", _scalarize(T.mul), [a, b])
    add("mul_broadcast", _scalarize(T.mul), [_t(rng, 2, 3, 4), _t(rng, 3, 1)])
    add("div", _scalarize(T.div), [_t(rng, 3, 4), c])
    add("neg", _scalarize(T.neg), [_t(rng, 5)])
    add("pow", _scalarize(lambda x: T.power(x, 3.0)),
        [_t(rng, 4, lo=0.4, hi=1.5)])
    add("exp", _scalarize(T.texp), [_t(rng, 3, 3)])
    add("log", _scalarize(T.tlog), [_t(rng, 3, 3, lo=0.3, hi=2.0)])
    add("sqrt", _scalarize(T.tsqrt), [_t(rng, 6, lo=0.2, hi=3.0)])
    add("relu", _scalarize(T.relu), [_t(rng, 4, 4)])
    add("sigmoid", _scalarize(T.sigmoid), [_t(rng, 4, 4, lo=-3, hi=3)])
    add("silu", _scalarize(T.silu), [_t(rng, 4, 4, lo=-3, hi=3)])
    add("softplus", _scalarize(T.softplus), [_t(rng, 4, 4, lo=-3, hi=3)])
    add("matmul", _scalarize(T.matmul), [_t(rng, 3, 4), _t(rng, 4, 2)])
    add("sum_axis", _scalarize(lambda x: T.tsum(x, axis=1)), [_t(rng, 3, 5)])
    add("mean_axis", _scalarize(lambda x: T.tmean(x, axis=(0, 2))),
        [_t(rng, 2, 3, 4)])
    add("reshape", _scalarize(lambda x: T.reshape(x, (6, 2))), [_t(rng, 3, 4)])
    add("transpose", _scalarize(lambda x: T.transpose(x, (2, 0, 1))),
        [_t(rng, 2, 3, 4)])
    add("flip", _scalarize(lambda x: T.flip(x, 1)), [_t(rng, 3, 4)])
    add("take_repeats", _scalarize(lambda x: T.take(x, [0, 2, 2, 1], axis=0)),
        [_t(rng, 3, 2)])
    add("concat", _scalarize(lambda x, y: T.concat([x, y], axis=1)),
        [_t(rng, 2, 3), _t(rng, 2, 2)])
    add("softmax", _scalarize(lambda x: T.softmax(x, axis=0)), [_t(rng, 4, 5)])
    add("log_softmax", _scalarize(lambda x: T.log_softmax(x, axis=0)),
        [_t(rng, 4, 5)])
    add("layer_norm", _scalarize(lambda x: T.layer_norm(x, axis=-1)),
        [_t(rng, 3, 6)])

    add("conv3d_s1", _scalarize(lambda x, w, bb: conv3d(x, w, bb, 1)),
        [_t(rng, 2, 4, 4, 4), _t(rng, 3, 2, 3, 3, 3), _t(rng, 3)])
    add("conv3d_s2", _scalarize(lambda x, w, bb: conv3d(x, w, bb, 2)),
        [_t(rng, 2, 5, 4, 6), _t(rng, 3, 2, 3, 3, 3), _t(rng, 3)])
    add("dwconv1d", _scalarize(dwconv1d_causal),
        [_t(rng, 6, 3), _t(rng, 3, 4), _t(rng, 3)])
    add("upsample", _scalarize(lambda x: upsample_nearest3d(x, 2)),
        [_t(rng, 2, 2, 3, 2)])
    add("instance_norm", _scalarize(instance_norm),
        [_t(rng, 2, 3, 3, 3), _t(rng, 2, lo=0.5, hi=1.5), _t(rng, 2)])

    perm = build_permutation((2, 3, 2))
    add("morton_gather", _scalarize(lambda x: gather_sequence(x, perm)),
        [_t(rng, 3, 2, 3, 2)])
    add("morton_scatter", _scalarize(lambda s: scatter_back(s, perm)),
        [_t(rng, 12, 3)])

    add("linear_recurrence", _scalarize(linear_recurrence),
        [_t(rng, 5, 2, 3, lo=0.1, hi=0.9), _t(rng, 5, 2, 3), _t(rng, 5, 3)])

    scan_p = init_ssm_params(make_rng(seed, 0xC1), e=2, n=3, dtype=np.float64)

    def run_scan(seq, a_log, w_b, w_c, w_delta, b_delta, d_skip):
        sp = ScanParams(a_log=a_log, w_b=w_b, w_c=w_c, w_delta=w_delta,
                        b_delta=b_delta, d_skip=d_skip)
        return selective_scan(seq, sp, "forward")

    add("selective_scan", _scalarize(run_scan),
        [_t(rng, 6, 2), scan_p.scan.a_log, scan_p.scan.w_b, scan_p.scan.w_c,
         scan_p.scan.w_delta, scan_p.scan.b_delta, scan_p.scan.d_skip])
    add("gated_fusion", _scalarize(gated_fusion),
        [_t(rng, 5, 3), _t(rng, 5, 3), _t(rng, 3)])

    cb = make_codebook(make_rng(seed, 0xC2), k=4, d=3, dtype=np.float64)
    add("vq_commit", lambda y: quantize(y, cb).commit_loss, [_t(rng, 5, 3)])
    checks.append(("vq_ste_identity", lambda: _ste_identity(seed)))
    checks.append(("composed_forward", lambda: _composed_check(seed)))
    return checks


def _ste_identity(seed: int) -> GradCheckResult:
    """Bit-exact identity-Jacobian check, reported in FD-result shape."""
    rng = make_rng(seed, 0xC2)
    cb = make_codebook(rng, k=4, d=3, dtype=np.float64)
    y = rng.normal(0.0, 1.0, size=(6, 3))

    def downstream(t):
        return T.tsum(T.mul(T.silu(t), t))

    rep = straight_through_check(y, downstream, cb)
    return GradCheckResult(name="vq_ste_identity",
                           max_rel_error=rep.max_abs_diff,
                           max_abs_error=rep.max_abs_diff,
                           n_checked=y.size, passed=rep.passed)


def _composed_check(seed: int) -> GradCheckResult:
    """Whole network (VQ off), parameters probed one coordinate each."""
    cfg = desk_config(channels=(2, 2, 2, 2, 2, 4), state_size=2,
                      vq_enabled=False)
    with T.default_dtype(np.float64):
        model = Model(cfg, seed=5)
    # a zero head hides upstream gradients; nudge it off the origin
    h_rng = make_rng(5, 99)
    model.head_w.data = h_rng.normal(0, 0.3, model.head_w.shape)
    model.head_b.data = h_rng.normal(0, 0.3, model.head_b.shape)

    labels = (np.arange(32 ** 3) % 4).reshape(32, 32, 32)
    x = Tensor(make_rng(seed, 0xC3).normal(0, 1, (4, 32, 32, 32)),
               dtype=np.float64)
    params = list(model.named_parameters().values())

    def fn(*ps):
        res = model.forward(x, train=False)
        return ce_dice_loss(res.logits, labels, res.commit_loss).total

    # tighter step than the per-op default: the chance of an FD interval
    # straddling a relu kink grows with voxel count x step size, and one
    # crossing among ~100k activations ruins the comparison
    return check_gradients(fn, params, name="composed_forward", sample=1,
                           eps=1e-6, seed=seed)


def run_suite(op_filter: str | None = None, seed: int = 0) -> list:
    """Execute (optionally filtered) checks; returns GradCheckResults."""
    results = []
    for name, fn in suite(seed):
        if op_filter and op_filter not in name:
            continue
        results.append(fn())
    if op_filter and not results:
        raise ValueError(f"no gradient check matches '{op_filter}'")
    return results
