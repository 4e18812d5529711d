"""Training loop: Adam with decoupled weight decay, seeded augmentation.

Determinism contract: step i draws everything stochastic (case choice
and augmentation coins) from the stream (seed, 1, i). No generator state
survives between steps, so a run resumed from a step-k checkpoint
replays steps k, k+1, ... with exactly the arrays an uninterrupted run
would have seen: resume is bit-identical by construction, not by
serializing RNG internals.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .network import Model, ce_dice_loss
from .phantom import CaseRecord, normalize_modalities
from .rng import make_rng
from .tensor import NumericalError, Tensor, add as T_add, mul as T_mul

_STEP_STREAM = 1

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


class AdamW:
    """Adam moments plus decoupled weight decay (decay skips the moments)."""

    def __init__(self, params: list, lr: float = 1e-4,
                 weight_decay: float = 1e-4, beta1: float = ADAM_BETA1,
                 beta2: float = ADAM_BETA2, eps: float = ADAM_EPS):
        self.params = list(params)
        self.lr = lr
        self.weight_decay = weight_decay
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1 ** self.t
        bc2 = 1.0 - b2 ** self.t
        for i, p in enumerate(self.params):
            g = p.grad
            if g is None:
                continue
            if self.weight_decay:
                p.data -= (self.lr * self.weight_decay) * p.data
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * g
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * g * g
            p.data -= self.lr * (self.m[i] / bc1) / (
                np.sqrt(self.v[i] / bc2) + self.eps)

    # -- checkpoint plumbing ------------------------------------------------

    def state_entries(self, prefix: str = "opt") -> dict:
        out = {f"{prefix}.t": np.array([float(self.t)], dtype=np.float32)}
        for i in range(len(self.params)):
            out[f"{prefix}.m.{i:04d}"] = self.m[i]
            out[f"{prefix}.v.{i:04d}"] = self.v[i]
        return out

    def load_state_entries(self, entries: dict, prefix: str = "opt") -> None:
        self.t = int(round(float(entries[f"{prefix}.t"][0])))
        for i, p in enumerate(self.params):
            m = entries[f"{prefix}.m.{i:04d}"]
            v = entries[f"{prefix}.v.{i:04d}"]
            if m.shape != p.data.shape or v.shape != p.data.shape:
                raise ValueError(f"optimizer state {i} does not match its "
                                 "parameter shape")
            self.m[i] = np.ascontiguousarray(m, dtype=p.data.dtype)
            self.v[i] = np.ascontiguousarray(v, dtype=p.data.dtype)


_ROT_PLANES = ((0, 1), (0, 2), (1, 2))  # spatial axis pairs


def augment_case(modalities: np.ndarray, labels: np.ndarray,
                 rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Seeded geometric + intensity augmentation, draw order fixed.

    Flips per axis (p=.5 each); one axis-aligned 90-degree rotation
    (p=.5) where an odd quarter-turn falls back to a half-turn when the
    two extents differ (shape must be preserved); per-modality intensity
    shift (p=.1, +-0.1) and scale (p=.1, x0.9-1.1). Labels follow the
    geometric part only.
    """
    mods = modalities
    labs = labels
    for ax in range(3):
        if rng.random() < 0.5:
            mods = np.flip(mods, axis=ax + 1)
            labs = np.flip(labs, axis=ax)
    if rng.random() < 0.5:
        plane = _ROT_PLANES[int(rng.integers(0, 3))]
        k = int(rng.integers(1, 4))
        if k % 2 == 1 and labs.shape[plane[0]] != labs.shape[plane[1]]:
            k = 2
        mods = np.rot90(mods, k=k, axes=(plane[0] + 1, plane[1] + 1))
        labs = np.rot90(labs, k=k, axes=plane)
    mods = mods.copy()  # detach from the dataset before in-place intensity ops
    labs = np.ascontiguousarray(labs)
    for m in range(mods.shape[0]):
        if rng.random() < 0.1:
            mods[m] += rng.uniform(-0.1, 0.1)
        if rng.random() < 0.1:
            mods[m] *= rng.uniform(0.9, 1.1)
    return mods, labs


@dataclass
class TrainResult:
    losses: list           # per-step dicts: step, ce, dice, commit, total
    final_step: int


def train(model: Model, cases: list, steps: int, lr: float = 1e-4,
          weight_decay: float = 1e-4, seed: int = 0, augment: bool = True,
          optimizer: AdamW | None = None, start_step: int = 0,
          batch_size: int = 1, log=None) -> tuple[TrainResult, AdamW]:
    """Run optimizer steps start_step .. start_step+steps-1.

    cases are CaseRecords; each optimizer step averages the loss over
    batch_size cases chosen by the step stream (without replacement, so
    batch_size == len(cases) is full-batch gradient descent). Raises
    NumericalError (with the offending step) if the loss goes
    non-finite. Returns the per-step loss log and the optimizer, whose
    state a caller can serialize next to the model for exact resume.
    """
    if not cases:
        raise ValueError("empty dataset")
    if not 1 <= batch_size <= len(cases):
        raise ValueError(f"batch_size {batch_size} outside 1..{len(cases)}")
    opt = optimizer or AdamW(model.parameters(), lr=lr,
                             weight_decay=weight_decay)
    losses = []
    for step in range(start_step, start_step + steps):
        rng = make_rng(seed, _STEP_STREAM, step)
        if batch_size == 1:
            idxs = [int(rng.integers(0, len(cases)))]
        else:
            idxs = [int(i) for i in
                    rng.choice(len(cases), size=batch_size, replace=False)]
        totals, results, comps = [], [], []
        for ci in idxs:
            case: CaseRecord = cases[ci]
            # normalize first so intensity augmentation is not undone by it
            x, labs = normalize_modalities(case.modalities), case.labels
            if augment:
                x, labs = augment_case(x, labs, rng)
            result = model.forward(Tensor(x), train=True)
            report = ce_dice_loss(result.logits, labs, result.commit_loss,
                                  model.cfg.commit_weight)
            totals.append(report.total)
            results.append(result)
            comps.append(report.floats())

        total = totals[0]
        for t in totals[1:]:
            total = T_add(total, t)
        if len(totals) > 1:
            total = T_mul(total, 1.0 / len(totals))
        row = {"step": step}
        for key in comps[0]:
            row[key] = float(np.mean([c[key] for c in comps]))
        if not np.isfinite(row["total"]):
            raise NumericalError(f"non-finite loss at step {step}: {row}")
        losses.append(row)
        if log is not None:
            log(row)

        opt.zero_grad()
        total.backward()
        for result in results:
            model.ema_step(result)
        opt.step()
    return TrainResult(losses=losses, final_step=start_step + steps), opt


def training_state(model: Model, opt: AdamW, step: int) -> dict:
    entries = model.state_dict()
    entries.update(opt.state_entries())
    entries["train.step"] = np.array([float(step)], dtype=np.float32)
    return entries


def load_training_state(model: Model, entries: dict,
                        lr: float, weight_decay: float) -> tuple[AdamW, int]:
    model.load_state_dict(entries)
    opt = AdamW(model.parameters(), lr=lr, weight_decay=weight_decay)
    opt.load_state_entries(entries)
    return opt, int(round(float(entries["train.step"][0])))
