"""Encoder-decoder segmentation network with scan blocks at two depths.

Six convolution stages extract local features: stage 1 keeps full
resolution, stages 2-5 each halve it, stage 6 widens channels at the
coarsest grid. Global context is added only where sequences are short:
one bidirectional Morton-scan block on the bottleneck (1/16 resolution)
and one on the deepest skip path (1/8), the latter turning that skip from
a passive copy into a context-aware branch. Bottleneck features are
vector-quantized before decoding. The decoder mirrors the encoder with
nearest-neighbor upsampling and concatenated skips; the head is a 1x1x1
conv initialized to zero so an untrained model predicts the uniform
distribution everywhere.

All learnable arrays live in named Tensors; `state_dict` collects them
(plus codebook EMA state) for checkpointing.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import tensor as T
from .conv import conv3d, upsample_nearest3d
from .morton import build_permutation
from .rng import make_rng
from .ssm import SsmParams, bidir_scan_block, init_ssm_params
from .tensor import Tensor
from .vq import (DEFAULT_COMMIT_WEIGHT, DEFAULT_DECAY, DEFAULT_LAPLACE_EPS,
                 Codebook, ema_update, init_from_batch, make_codebook,
                 quantize)

DICE_EPS = 1e-5
FOREGROUND_CLASSES = (1, 2, 3)


@dataclass
class NetConfig:
    in_channels: int = 4
    num_classes: int = 4
    channels: tuple = (16, 32, 64, 128, 256, 512)
    state_size: int = 16
    vq_enabled: bool = True
    vq_k: int = 512
    vq_decay: float = DEFAULT_DECAY
    vq_laplace_eps: float = DEFAULT_LAPLACE_EPS
    commit_weight: float = DEFAULT_COMMIT_WEIGHT
    vq_on_skip: bool = False
    use_dwconv: bool = True
    use_d_skip: bool = True
    separate_reverse: bool = False

    # stage strides: full, /2, /4, /8, /16, /16
    STRIDES = (1, 2, 2, 2, 2, 1)

    def __post_init__(self):
        if len(self.channels) != 6:
            raise ValueError("exactly six encoder stages are supported")

    @property
    def down_factor(self) -> int:
        return 16

    def to_dict(self) -> dict:
        d = self.__dict__.copy()
        d["channels"] = list(self.channels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NetConfig":
        d = dict(d)
        d["channels"] = tuple(d["channels"])
        return cls(**d)


def full_config(**overrides) -> NetConfig:
    return replace(NetConfig(), **overrides)


def desk_config(**overrides) -> NetConfig:
    """Shrunk ladder for laptop-speed runs; same topology as full scale."""
    cfg = NetConfig(channels=(4, 8, 16, 32, 64, 128), vq_k=64)
    return replace(cfg, **overrides)


def instance_norm(x: Tensor, gamma: Tensor, beta: Tensor,
                  eps: float = 1e-5) -> Tensor:
    """Per-channel normalization over the spatial axes, affine."""
    mu = T.tmean(x, axis=(1, 2, 3), keepdims=True)
    xc = T.sub(x, mu)
    var = T.tmean(T.mul(xc, xc), axis=(1, 2, 3), keepdims=True)
    xn = T.div(xc, T.tsqrt(T.add(var, eps)))
    c = x.shape[0]
    return T.add(T.mul(xn, T.reshape(gamma, (c, 1, 1, 1))),
                 T.reshape(beta, (c, 1, 1, 1)))


class ConvBlock:
    """conv3d (pad k//2) -> instance norm -> relu."""

    def __init__(self, rng: np.random.Generator, cin: int, cout: int,
                 k: int = 3, dtype=None):
        dtype = dtype or T.get_default_dtype()
        std = (2.0 / (cin * k ** 3)) ** 0.5
        self.w = Tensor(rng.normal(0.0, std, size=(cout, cin, k, k, k)),
                        requires_grad=True, dtype=dtype)
        self.b = Tensor(np.zeros(cout), requires_grad=True, dtype=dtype)
        self.gamma = Tensor(np.ones(cout), requires_grad=True, dtype=dtype)
        self.beta = Tensor(np.zeros(cout), requires_grad=True, dtype=dtype)

    def __call__(self, x: Tensor, stride: int = 1) -> Tensor:
        return T.relu(instance_norm(conv3d(x, self.w, self.b, stride),
                                    self.gamma, self.beta))

    def named(self, prefix: str) -> dict:
        return {f"{prefix}.w": self.w, f"{prefix}.b": self.b,
                f"{prefix}.gamma": self.gamma, f"{prefix}.beta": self.beta}


def _named_ssm(p: SsmParams, prefix: str) -> dict:
    out = {}

    def scan_entries(s, pre):
        e = {f"{pre}.a_log": s.a_log, f"{pre}.w_b": s.w_b,
             f"{pre}.w_c": s.w_c, f"{pre}.w_delta": s.w_delta,
             f"{pre}.b_delta": s.b_delta}
        if s.d_skip is not None:
            e[f"{pre}.d_skip"] = s.d_skip
        return e

    out.update(scan_entries(p.scan, f"{prefix}.scan"))
    if p.scan_rev is not None:
        out.update(scan_entries(p.scan_rev, f"{prefix}.scan_rev"))
    out[f"{prefix}.theta"] = p.theta
    if p.conv_w is not None:
        out[f"{prefix}.conv_w"] = p.conv_w
        out[f"{prefix}.conv_b"] = p.conv_b
    return out


@dataclass
class ForwardResult:
    logits: Tensor
    commit_loss: Tensor | None           # None when VQ is off
    vq_batches: list = field(default_factory=list)  # (codebook, tokens, indices)


class Model:
    """The assembled network; owns parameters, codebooks and perm cache."""

    def __init__(self, cfg: NetConfig, seed: int = 0):
        self.cfg = cfg
        self.seed = seed
        rng = make_rng(seed, 0)
        ch = cfg.channels
        dtype = T.get_default_dtype()

        self.enc = []
        cin = cfg.in_channels
        for c in ch:
            self.enc.append((ConvBlock(rng, cin, c, dtype=dtype),
                             ConvBlock(rng, c, c, dtype=dtype)))
            cin = c

        self.skip_ssm = init_ssm_params(
            rng, ch[3], cfg.state_size, cfg.use_dwconv, cfg.use_d_skip,
            cfg.separate_reverse, dtype)
        self.bot_ssm = init_ssm_params(
            rng, ch[5], cfg.state_size, cfg.use_dwconv, cfg.use_d_skip,
            cfg.separate_reverse, dtype)

        # decoder level i fuses with encoder stage i (1-based); level 5
        # works at the bottleneck resolution, so no upsample there
        self.dec = []
        skip_ch = [ch[0], ch[1], ch[2], ch[3], ch[4]]
        upper = [ch[1], ch[2], ch[3], ch[4], ch[5]]
        for lo, hi in zip(skip_ch, upper):
            self.dec.append({
                "proj": ConvBlock(rng, hi, lo, dtype=dtype),
                "fuse": ConvBlock(rng, 2 * lo, lo, dtype=dtype),
                "refine": ConvBlock(rng, lo, lo, dtype=dtype)})

        self.head_w = Tensor(
            np.zeros((cfg.num_classes, ch[0], 1, 1, 1)),
            requires_grad=True, dtype=dtype)
        self.head_b = Tensor(np.zeros(cfg.num_classes),
                             requires_grad=True, dtype=dtype)

        self.codebook = (make_codebook(rng, cfg.vq_k, ch[5], cfg.vq_decay,
                                       cfg.vq_laplace_eps, dtype)
                         if cfg.vq_enabled else None)
        self.skip_codebook = (make_codebook(rng, cfg.vq_k, ch[3],
                                            cfg.vq_decay, cfg.vq_laplace_eps,
                                            dtype)
                              if cfg.vq_enabled and cfg.vq_on_skip else None)
        self._vq_rng = make_rng(seed, 3)
        self._perms = {}

    # -- parameter bookkeeping --------------------------------------------

    def named_parameters(self) -> dict:
        out = {}
        for i, (a, b) in enumerate(self.enc, start=1):
            out.update(a.named(f"enc{i}a"))
            out.update(b.named(f"enc{i}b"))
        out.update(_named_ssm(self.skip_ssm, "skip_ssm"))
        out.update(_named_ssm(self.bot_ssm, "bot_ssm"))
        for i, level in enumerate(self.dec, start=1):
            for part in ("proj", "fuse", "refine"):
                out.update(level[part].named(f"dec{i}.{part}"))
        out["head.w"] = self.head_w
        out["head.b"] = self.head_b
        return out

    def parameters(self) -> list:
        return list(self.named_parameters().values())

    def state_dict(self) -> dict:
        out = {k: v.data for k, v in self.named_parameters().items()}
        for name, cb in (("vq", self.codebook), ("vq_skip", self.skip_codebook)):
            if cb is not None:
                out[f"{name}.embeddings"] = cb.embeddings
                out[f"{name}.ema_cluster_size"] = cb.ema_cluster_size
                out[f"{name}.ema_embed_sum"] = cb.ema_embed_sum
                out[f"{name}.initialized"] = np.array(
                    [1.0 if cb.initialized else 0.0], dtype=np.float32)
        return out

    def load_state_dict(self, entries: dict) -> None:
        params = self.named_parameters()
        for k, t in params.items():
            if k not in entries:
                raise KeyError(f"checkpoint is missing parameter '{k}'")
            arr = entries[k]
            if tuple(arr.shape) != t.shape:
                raise ValueError(f"shape mismatch for '{k}': "
                                 f"{arr.shape} vs {t.shape}")
            t.data = np.ascontiguousarray(arr, dtype=t.data.dtype)
        for name, cb in (("vq", self.codebook), ("vq_skip", self.skip_codebook)):
            if cb is None:
                continue
            cb.embeddings = np.ascontiguousarray(
                entries[f"{name}.embeddings"], dtype=cb.embeddings.dtype)
            cb.ema_cluster_size = np.ascontiguousarray(
                entries[f"{name}.ema_cluster_size"],
                dtype=cb.embeddings.dtype)
            cb.ema_embed_sum = np.ascontiguousarray(
                entries[f"{name}.ema_embed_sum"], dtype=cb.embeddings.dtype)
            cb.initialized = bool(entries[f"{name}.initialized"][0] > 0.5)

    def param_count(self, include_codebook: bool = True) -> int:
        n = sum(t.size for t in self.parameters())
        if include_codebook and self.codebook is not None:
            n += self.codebook.embeddings.size
        if include_codebook and self.skip_codebook is not None:
            n += self.skip_codebook.embeddings.size
        return n

    def _perm(self, dims: tuple):
        if dims not in self._perms:
            self._perms[dims] = build_permutation(dims)
        return self._perms[dims]

    # -- forward ------------------------------------------------------------

    def _quantize_map(self, feat: Tensor, cb: Codebook):
        """VQ a (C, X, Y, Z) map voxel-wise; returns (map, commit, batch)."""
        c = feat.shape[0]
        spatial = feat.shape[1:]
        tokens = T.transpose(T.reshape(feat, (c, int(np.prod(spatial)))), (1, 0))
        res = quantize(tokens, cb)
        qmap = T.reshape(T.transpose(res.quantized, (1, 0)), (c,) + spatial)
        batch = (cb, tokens.data.copy(), res.indices)
        return qmap, res.commit_loss, batch

    def forward(self, x, train: bool = False) -> ForwardResult:
        if not isinstance(x, Tensor):
            x = Tensor(x)
        if x.ndim != 4 or x.shape[0] != self.cfg.in_channels:
            raise ValueError(f"expected ({self.cfg.in_channels}, X, Y, Z) "
                             f"input, got {x.shape}")
        if any(s % self.cfg.down_factor for s in x.shape[1:]):
            raise ValueError(f"spatial extents {x.shape[1:]} must be "
                             f"divisible by {self.cfg.down_factor}")

        feats = []
        h = x
        for (blk_a, blk_b), stride in zip(self.enc, NetConfig.STRIDES):
            h = blk_b(blk_a(h, stride=stride))
            feats.append(h)
        e1, e2, e3, e4, e5, e6 = feats

        skip4 = bidir_scan_block(e4, self.skip_ssm, self._perm(e4.shape[1:]))
        bot = bidir_scan_block(e6, self.bot_ssm, self._perm(e6.shape[1:]))

        commit = None
        vq_batches = []
        if self.codebook is not None:
            bot, commit, batch = self._quantize_map(bot, self.codebook)
            if train:
                vq_batches.append(batch)
        if self.skip_codebook is not None:
            skip4, c2, batch = self._quantize_map(skip4, self.skip_codebook)
            commit = T.add(commit, c2)
            if train:
                vq_batches.append(batch)

        skips = [e1, e2, e3, skip4, e5]
        h = bot
        for level in range(4, -1, -1):
            blocks = self.dec[level]
            if level != 4:
                h = upsample_nearest3d(h, 2)
            h = blocks["proj"](h)
            h = blocks["fuse"](T.concat([h, skips[level]], axis=0))
            h = blocks["refine"](h)

        logits = conv3d(h, self.head_w, self.head_b, stride=1)
        return ForwardResult(logits=logits, commit_loss=commit,
                             vq_batches=vq_batches)

    def has_unseeded_codebooks(self) -> bool:
        return any(cb is not None and not cb.initialized
                   for cb in (self.codebook, self.skip_codebook))

    def ema_step(self, result: ForwardResult) -> None:
        """Apply codebook EMA updates recorded during a training forward.

        An unseeded codebook is initialized from the recorded tokens
        (data-dependent init); a seeded one takes a normal EMA update.
        """
        for cb, tokens, indices in result.vq_batches:
            if not cb.initialized:
                init_from_batch(cb, tokens, self._vq_rng)
            else:
                ema_update(cb, tokens, indices)


# -- loss --------------------------------------------------------------------


@dataclass
class LossReport:
    ce: Tensor
    dice_loss: Tensor
    commit: Tensor
    total: Tensor

    def floats(self) -> dict:
        return {"ce": float(self.ce.data), "dice": float(self.dice_loss.data),
                "commit": float(self.commit.data),
                "total": float(self.total.data)}


def one_hot(labels: np.ndarray, num_classes: int, dtype) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.min() < 0 or labels.max() >= num_classes:
        raise ValueError(f"labels must lie in [0, {num_classes})")
    oh = np.zeros((num_classes,) + labels.shape, dtype=dtype)
    np.put_along_axis(oh, labels[None].astype(np.int64), 1.0, axis=0)
    return oh


def ce_dice_loss(logits: Tensor, labels: np.ndarray,
                 commit: Tensor | None = None,
                 commit_weight: float = DEFAULT_COMMIT_WEIGHT) -> LossReport:
    """Voxel cross-entropy plus soft-Dice over the foreground classes.

    dice_loss = 1 - mean_c (2*sum(P_c G_c) + eps)
                         / (sum(P_c^2) + sum(G_c^2) + eps)
    over c in {1, 2, 3}; total = ce + dice_loss + commit_weight * commit.
    The squared-denominator form keeps the score a measure of voxel
    agreement rather than of softmax sharpness: a prediction with the
    right argmax everywhere scores ~1 even at moderate confidence.
    """
    k = logits.shape[0]
    oh = one_hot(labels, k, logits.data.dtype)
    logp = T.log_softmax(logits, axis=0)
    ce = T.neg(T.tmean(T.tsum(T.mul(logp, Tensor(oh, dtype=oh.dtype)), axis=0)))

    p = T.texp(logp)
    fg = list(FOREGROUND_CLASSES)
    p_fg = T.take(p, fg, axis=0)
    g_fg = Tensor(oh[fg], dtype=oh.dtype)
    inter = T.tsum(T.mul(p_fg, g_fg), axis=(1, 2, 3))
    sizes = T.add(T.tsum(T.mul(p_fg, p_fg), axis=(1, 2, 3)),
                  Tensor((oh[fg] ** 2).sum(axis=(1, 2, 3)), dtype=oh.dtype))
    dice = T.div(T.add(T.mul(inter, 2.0), DICE_EPS), T.add(sizes, DICE_EPS))
    dice_loss = T.sub(1.0, T.tmean(dice))

    if commit is None:
        commit = Tensor(np.zeros(()), dtype=logits.data.dtype)
    total = T.add(T.add(ce, dice_loss), T.mul(commit, commit_weight))
    return LossReport(ce=ce, dice_loss=dice_loss, commit=commit, total=total)


def soft_dice(logits_data: np.ndarray, labels: np.ndarray) -> float:
    """Mean foreground soft Dice of raw logits (no tape); eval helper.

    Same squared-denominator form as the training loss, so train and
    eval report the one definition.
    """
    x = logits_data - logits_data.max(axis=0, keepdims=True)
    e = np.exp(x)
    p = e / e.sum(axis=0, keepdims=True)
    oh = one_hot(labels, logits_data.shape[0], logits_data.dtype)
    scores = []
    for c in FOREGROUND_CLASSES:
        inter = float((p[c] * oh[c]).sum())
        size = float((p[c] ** 2).sum() + (oh[c] ** 2).sum())
        scores.append((2.0 * inter + DICE_EPS) / (size + DICE_EPS))
    return float(np.mean(scores))


def sliding_window_infer(model: Model, volume: np.ndarray, window: tuple,
                         overlap: float = 0.5) -> np.ndarray:
    """Tile the volume with 50%-overlap windows and average the logits.

    Windows are placed on a regular stride grid with an extra end-aligned
    window per axis when the stride does not land exactly; every voxel is
    covered at least once. window == volume shape degenerates to a single
    plain forward pass.
    """
    c, xe, ye, ze = volume.shape
    wx, wy, wz = window
    if wx > xe or wy > ye or wz > ze:
        raise ValueError(f"window {window} exceeds volume {volume.shape[1:]}")

    def starts(extent, w):
        stride = max(1, int(round(w * (1.0 - overlap))))
        ss = list(range(0, extent - w + 1, stride))
        if ss[-1] != extent - w:
            ss.append(extent - w)
        return ss

    if (wx, wy, wz) == (xe, ye, ze):
        with T.no_grad():
            return model.forward(volume).logits.data

    acc = np.zeros((model.cfg.num_classes, xe, ye, ze), dtype=volume.dtype)
    cnt = np.zeros((xe, ye, ze), dtype=volume.dtype)
    with T.no_grad():
        for sx in starts(xe, wx):
            for sy in starts(ye, wy):
                for sz in starts(ze, wz):
                    crop = volume[:, sx:sx + wx, sy:sy + wy, sz:sz + wz]
                    out = model.forward(np.ascontiguousarray(crop)).logits.data
                    acc[:, sx:sx + wx, sy:sy + wy, sz:sz + wz] += out
                    cnt[sx:sx + wx, sy:sy + wy, sz:sz + wz] += 1.0
    return acc / cnt[None]
