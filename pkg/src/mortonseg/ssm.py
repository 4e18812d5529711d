"""Selective state-space scan (S6) with bidirectional fusion.

One scan direction keeps, per channel e, a hidden state h in R^N evolving
along the sequence:

    delta_k = softplus(s_k W_delta + b_delta)        (L, E)  step sizes
    B_k     = s_k W_B ;  C_k = s_k W_C               (L, N)  input/output maps
    A       = -exp(A_log)                            (E, N)  diagonal, < 0
    Abar_k  = exp(delta_k * A)                       per-step decay in (0,1)
    h_k     = Abar_k * h_{k-1} + delta_k * B_k * s_k
    y_k     = <C_k, h_k> + D * s_k

B, C and delta depend on the input, so the state decides token by token
what to keep; A < 0 guarantees |Abar| < 1 and bounded states. The reverse
direction is the same recurrence run on the flipped sequence and flipped
back, which makes forward/reverse duality exact by construction rather
than by a second code path.

The recurrence itself is one tape op with a hand-derived backward; all
surrounding algebra (projections, discretization, gating) is composed
from primitive ops so finite-difference checks cover the whole block.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .conv import dwconv1d_causal
from .morton import MortonPermutation, gather_sequence, scatter_back
from .tensor import Tensor

DWCONV_WIDTH = 4


@dataclass
class ScanParams:
    """Learnable parameters of one scan direction over E channels."""
    a_log: Tensor    # (E, N); A = -exp(a_log)
    w_b: Tensor      # (E, N)
    w_c: Tensor      # (E, N)
    w_delta: Tensor  # (E, E)
    b_delta: Tensor  # (E,)
    d_skip: Tensor | None  # (E,) direct feedthrough, None disables

    def tensors(self) -> list[Tensor]:
        out = [self.a_log, self.w_b, self.w_c, self.w_delta, self.b_delta]
        if self.d_skip is not None:
            out.append(self.d_skip)
        return out


@dataclass
class SsmParams:
    """Full bidirectional block: scan params, gate, optional front conv.

    scan_rev is None when both directions share one parameter set (the
    default); a separate set is kept only for ablation runs.
    """
    scan: ScanParams
    theta: Tensor                  # (E,) fusion gate, alpha = sigmoid(theta)
    conv_w: Tensor | None = None   # (E, DWCONV_WIDTH) depthwise causal conv
    conv_b: Tensor | None = None
    scan_rev: ScanParams | None = None

    def tensors(self) -> list[Tensor]:
        out = self.scan.tensors() + [self.theta]
        if self.conv_w is not None:
            out += [self.conv_w, self.conv_b]
        if self.scan_rev is not None:
            out += self.scan_rev.tensors()
        return out


def _init_scan(rng: np.random.Generator, e: int, n: int, use_d_skip: bool,
               dtype) -> ScanParams:
    # S4D-real initialization: per channel, state k decays at rate k+1
    a_log = np.tile(np.log(np.arange(1, n + 1, dtype=np.float64)), (e, 1))
    scale = e ** -0.5
    w_b = rng.normal(0.0, scale, size=(e, n))
    w_c = rng.normal(0.0, scale, size=(e, n))
    w_delta = rng.normal(0.0, scale, size=(e, e))
    # bias chosen so initial step sizes land log-uniformly in [0.01, 0.1]
    dt = np.exp(rng.uniform(np.log(0.01), np.log(0.1), size=e))
    b_delta = np.log(np.expm1(dt))
    mk = lambda a: Tensor(a, requires_grad=True, dtype=dtype)
    return ScanParams(
        a_log=mk(a_log), w_b=mk(w_b), w_c=mk(w_c), w_delta=mk(w_delta),
        b_delta=mk(b_delta),
        d_skip=mk(np.ones(e)) if use_d_skip else None)


def init_ssm_params(rng: np.random.Generator, e: int, n: int,
                    use_dwconv: bool = True, use_d_skip: bool = True,
                    separate_reverse: bool = False, dtype=None) -> SsmParams:
    dtype = dtype or T.get_default_dtype()
    mk = lambda a: Tensor(a, requires_grad=True, dtype=dtype)
    params = SsmParams(
        scan=_init_scan(rng, e, n, use_d_skip, dtype),
        theta=mk(np.zeros(e)),  # sigmoid(0)=0.5: start as an even blend
        conv_w=mk(rng.normal(0.0, DWCONV_WIDTH ** -0.5, size=(e, DWCONV_WIDTH)))
        if use_dwconv else None,
        conv_b=mk(np.zeros(e)) if use_dwconv else None,
        scan_rev=_init_scan(rng, e, n, use_d_skip, dtype)
        if separate_reverse else None)
    return params


def discretize(a: Tensor, b: Tensor, delta: Tensor) -> tuple[Tensor, Tensor]:
    """Zero-order-hold decay and Euler input weight.

    Abar = exp(delta * a) elementwise (a diagonal and negative),
    Bbar = delta * b. Shapes follow broadcasting; delta must be > 0.
    """
    if np.any(delta.data <= 0):
        raise ValueError("delta must be strictly positive")
    return T.texp(T.mul(delta, a)), T.mul(delta, b)


def linear_recurrence(abar: Tensor, bu: Tensor, c: Tensor) -> Tensor:
    """y[k] = <h_k, c_k> with h_k = abar_k * h_{k-1} + bu_k, h_{-1} = 0.

    abar, bu: (L, E, N); c: (L, N); returns (L, E). The backward pass
    replays the recurrence adjoint in reverse, reusing the stored states.
    """
    if abar.shape != bu.shape or abar.ndim != 3:
        raise ValueError("abar and bu must both be (L, E, N)")
    ln, e, n = abar.shape
    if c.shape != (ln, n):
        raise ValueError("c must be (L, N)")
    ad, bd, cd = abar.data, bu.data, c.data
    h = np.empty((ln, e, n), dtype=ad.dtype)
    y = np.empty((ln, e), dtype=ad.dtype)
    hk = np.zeros((e, n), dtype=ad.dtype)
    for k in range(ln):
        hk = ad[k] * hk + bd[k]
        h[k] = hk
        y[k] = hk @ cd[k]

    def bwd(g):
        ga = np.zeros_like(ad)
        gbu = np.empty_like(bd)
        gc = np.empty_like(cd)
        gh = np.zeros((e, n), dtype=g.dtype)
        for k in range(ln - 1, -1, -1):
            gh = gh + g[k][:, None] * cd[k][None, :]
            gc[k] = h[k].T @ g[k]
            gbu[k] = gh
            if k > 0:
                ga[k] = gh * h[k - 1]
            gh = gh * ad[k]
        return ga, gbu, gc

    return Tensor._make(y, (abar, bu, c), bwd, "linear_recurrence")


def selective_scan(seq: Tensor, p: ScanParams, direction: str = "forward") -> Tensor:
    """Run the S6 recurrence over a (L, E) sequence in one direction.

    direction="reverse" is Flip . scan . Flip of the same parameters.
    """
    if seq.ndim != 2 or seq.shape[0] < 1:
        raise ValueError("sequence must be (L, E) with L >= 1")
    if direction == "reverse":
        return T.flip(selective_scan(T.flip(seq, 0), p, "forward"), 0)
    if direction != "forward":
        raise ValueError("direction must be 'forward' or 'reverse'")
    ln, e = seq.shape
    n = p.a_log.shape[1]
    delta = T.softplus(T.add(T.matmul(seq, p.w_delta), p.b_delta))  # (L,E)
    b = T.matmul(seq, p.w_b)  # (L,N)
    c = T.matmul(seq, p.w_c)  # (L,N)
    a = T.neg(T.texp(p.a_log))  # (E,N)
    abar, bbar = discretize(
        T.reshape(a, (1, e, n)), T.reshape(b, (ln, 1, n)),
        T.reshape(delta, (ln, e, 1)))
    bu = T.mul(bbar, T.reshape(seq, (ln, e, 1)))
    y = linear_recurrence(abar, bu, c)
    if p.d_skip is not None:
        y = T.add(y, T.mul(seq, p.d_skip))
    return y


def gated_fusion(y_fwd: Tensor, y_rev: Tensor, theta: Tensor) -> Tensor:
    """Per-channel convex blend: sigmoid(theta)*fwd + (1-sigmoid)*rev."""
    if y_fwd.shape != y_rev.shape:
        raise ValueError("stream shapes differ")
    alpha = T.sigmoid(theta)
    return T.add(T.mul(alpha, y_fwd), T.mul(T.sub(1.0, alpha), y_rev))


def bidir_scan_block(feat3d: Tensor, p: SsmParams, perm: MortonPermutation) -> Tensor:
    """Bidirectional Morton-sequence scan over a (C, X, Y, Z) block.

    gather -> layer norm -> [causal depthwise conv + silu] -> forward and
    reverse scans -> gated fusion -> scatter -> residual add. Zero input
    maps to zero before the residual (norm, conv bias and projections all
    vanish at the origin), so the block starts near identity.
    """
    seq = gather_sequence(feat3d, perm)
    x = T.layer_norm(seq, axis=-1)
    if p.conv_w is not None:
        x = T.silu(dwconv1d_causal(x, p.conv_w, p.conv_b))
    y_fwd = selective_scan(x, p.scan, "forward")
    y_rev = selective_scan(x, p.scan_rev or p.scan, "reverse")
    fused = gated_fusion(y_fwd, y_rev, p.theta)
    return T.add(scatter_back(fused, perm), feat3d)
