"""Training objectives: two self-supervised pretext losses and the
supervised energy/force loss.

All three return a `LossValue` whose scalar is differentiable and whose
breakdown holds the weighted components for logging; the components always
sum back to the scalar.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .dataset import Batch
from .models import ModelOutput

# Floor added inside the cosine denominators so a zero-norm prediction
# (e.g. a freshly zero-initialized head) yields a finite loss and gradient.
_COS_EPS = 1e-12


@dataclass
class LossValue:
    scalar: Tensor
    breakdown: dict[str, float]

    def __post_init__(self):
        if self.scalar.size != 1:
            raise ValueError("loss must be a scalar")
        if not np.isfinite(self.scalar.data).all():
            raise FloatingPointError("non-finite loss value")

    def item(self) -> float:
        return self.scalar.item()


def _soft_len(t: Tensor, axis=None, keepdims=False) -> Tensor:
    s = ad.sum_(ad.square(t), axis=axis, keepdims=keepdims)
    return ad.sqrt(s + _COS_EPS * _COS_EPS)


def masking_loss(pred, target, per_vector: bool = False) -> LossValue:
    """One minus the cosine similarity between predicted and true
    displacement vectors; range [0, 2], invariant to positive rescaling
    of the predictions.

    By default the cosine is taken over the flattened concatenation of
    all target vectors in the batch; ``per_vector=True`` instead averages
    one cosine per (masked atom, partner) row.
    """
    pred = ad.as_tensor(pred)
    target = ad.as_tensor(target)
    if pred.shape != target.shape:
        raise ValueError(
            f"prediction shape {pred.shape} != target shape {target.shape}"
        )
    if per_vector:
        num = ad.sum_(pred * target, axis=1)
        cos = num / (_soft_len(pred, axis=1) * _soft_len(target, axis=1))
        loss = ad.mean(1.0 - cos)
    else:
        num = ad.sum_(pred * target)
        loss = 1.0 - num / (_soft_len(pred) * _soft_len(target))
    return LossValue(loss, {"masking": loss.item()})


def denoising_loss(pred, target) -> LossValue:
    """Mean squared error over all 3N noise components."""
    pred = ad.as_tensor(pred)
    target = ad.as_tensor(target)
    if pred.shape != target.shape:
        raise ValueError(
            f"prediction shape {pred.shape} != target shape {target.shape}"
        )
    loss = ad.mean(ad.square(pred - target))
    return LossValue(loss, {"denoising": loss.item()})


def supervised_loss(out: ModelOutput, batch: Batch, w_force: float = 40.0,
                    w_energy: float = 15.0) -> LossValue:
    """Weighted sum of a force MSE and a per-atom-normalized energy MSE.

    The energy residual of each frame is divided by its atom count before
    squaring, so frames of different sizes contribute on the same scale.
    """
    if batch.energy is None or batch.forces is None:
        raise ValueError("supervised loss needs energy and force labels")
    if out.energy is None or out.forces is None:
        raise ValueError("model output lacks energy or forces")

    force_term = ad.mean(ad.square(out.forces - Tensor(batch.forces)))
    counts = np.bincount(batch.frame_of_atom, minlength=batch.num_frames)
    e_scaled = (out.energy - Tensor(batch.energy)) * Tensor(1.0 / counts)
    energy_term = ad.mean(ad.square(e_scaled))

    loss = w_force * force_term + w_energy * energy_term
    return LossValue(loss, {
        "force": w_force * force_term.item(),
        "energy": w_energy * energy_term.item(),
    })
