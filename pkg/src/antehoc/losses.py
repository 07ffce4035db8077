"""Terms of the joint objective.

All terms are batch means and nonnegative. The fidelity term treats the task
logits as fixed targets, so it never sends gradient into the task path.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import torch
import torch.nn.functional as F

from .errors import ConfigError, InputError
from .model import ForwardBundle, ModelConfig


def task_loss(task_logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    if task_logits.dim() != 2:
        raise InputError(f"logits must be (B, K), got {tuple(task_logits.shape)}")
    labels = torch.as_tensor(labels, dtype=torch.long)
    K = task_logits.shape[1]
    if labels.numel() and (labels.min() < 0 or labels.max() >= K):
        raise InputError(f"labels must lie in [0, {K})")
    return F.cross_entropy(task_logits, labels)


def fidelity_loss(surrogate_logits: torch.Tensor, task_logits: torch.Tensor) -> torch.Tensor:
    """Mean KL(softmax(task) || softmax(surrogate)) with detached task targets."""
    if surrogate_logits.shape != task_logits.shape or surrogate_logits.dim() != 2:
        raise InputError(
            f"fidelity_loss needs matching (B, K) logits, got {tuple(surrogate_logits.shape)} "
            f"and {tuple(task_logits.shape)}"
        )
    target = F.log_softmax(task_logits.detach(), dim=1)
    pred = F.log_softmax(surrogate_logits, dim=1)
    kl = F.kl_div(pred, target, reduction="batchmean", log_target=True)
    # Rounding can leave a tiny negative value for (numerically) identical inputs.
    return kl.clamp_min(0.0)


def reconstruction_loss(reconstruction: torch.Tensor, x: torch.Tensor) -> torch.Tensor:
    if reconstruction.shape != x.shape:
        raise InputError(
            f"reconstruction shape {tuple(reconstruction.shape)} != input shape {tuple(x.shape)}"
        )
    return F.mse_loss(reconstruction, x)


def concept_supervision_loss(
    concepts: torch.Tensor, attributes: torch.Tensor, kind: str = "bce"
) -> torch.Tensor:
    """Sigmoid-BCE against binary attributes, or MSE on [0, 1] continuous ones.

    ``concepts`` are pre-sigmoid values (the concept encoder's pre-activation).
    """
    attributes = torch.as_tensor(attributes, dtype=concepts.dtype)
    if attributes.shape != concepts.shape:
        raise InputError(
            f"attribute matrix {tuple(attributes.shape)} does not match concepts {tuple(concepts.shape)}"
        )
    if kind == "bce":
        return F.binary_cross_entropy_with_logits(concepts, attributes)
    if kind == "mse":
        return F.mse_loss(torch.sigmoid(concepts), attributes)
    raise ConfigError(f"unknown concept loss {kind!r}")


@dataclass
class LossBreakdown:
    task: torch.Tensor
    fidelity: torch.Tensor
    reconstruction: torch.Tensor
    concept: torch.Tensor
    total: torch.Tensor

    def to_dict(self) -> dict[str, float]:
        return {
            "task": float(self.task.detach()),
            "fidelity": float(self.fidelity.detach()),
            "reconstruction": float(self.reconstruction.detach()),
            "concept": float(self.concept.detach()),
            "total": float(self.total.detach()),
        }


def total_loss(
    bundle: ForwardBundle,
    labels: torch.Tensor,
    config: ModelConfig,
    images: Optional[torch.Tensor] = None,
    attributes: Optional[torch.Tensor] = None,
) -> LossBreakdown:
    """Weighted objective ``task + a*fidelity + b*reconstruction + g*concept``.

    Disabled terms are exact zeros. In bottleneck mode the task term is taken on
    the surrogate logits and the fidelity term is dropped.
    """
    w = config.loss_weights
    zero = bundle.task_logits.new_zeros(())
    if config.bottleneck_mode:
        task = task_loss(bundle.surrogate_logits, labels)
        fid = zero
    else:
        task = task_loss(bundle.task_logits, labels)
        fid = fidelity_loss(bundle.surrogate_logits, bundle.task_logits) if w.fidelity > 0 else zero
    rec = zero
    if bundle.reconstruction is not None and w.reconstruction > 0:
        if images is None:
            raise ConfigError("reconstruction term needs the input images")
        rec = reconstruction_loss(bundle.reconstruction, images)
    con = zero
    if w.concept > 0:
        if attributes is None:
            raise ConfigError("concept loss weight > 0 but no attributes were provided")
        logits = bundle.concepts if bundle.concept_logits is None else bundle.concept_logits
        con = concept_supervision_loss(logits, attributes, config.concept_loss)
    total = task + w.fidelity * fid + w.reconstruction * rec + w.concept * con
    return LossBreakdown(task=task, fidelity=fid, reconstruction=rec, concept=con, total=total)
