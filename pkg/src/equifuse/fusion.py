"""Fusion head, task loss, and the weighted total objective.

The fused representation is built from a masked concatenation of each
modality's (enhanced representation, shared component) block, in the
fixed modality order, followed by a two-layer perceptron. The
penultimate activation is the fused feature; the output layer produces
class logits (or one score in regression mode).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple

import numpy as np

from . import autodiff as ad
from .disentangle import one_hot
from .errors import ContractError
from .nn import TwoLayerMlp
from .seeds import rng_for


@dataclass(frozen=True)
class ObjectiveWeights:
    """Weights of the auxiliary losses in the total objective."""

    zeta: float = 0.5  # disentanglement
    beta_w: float = 0.1  # enhancement
    gamma_w: float = 0.1  # energy coordination
    eta_w: float = 0.1  # trust distillation

    def __post_init__(self):
        for name in ("zeta", "beta_w", "gamma_w", "eta_w"):
            if getattr(self, name) < 0:
                raise ContractError(f"objective weight {name} must be nonnegative")


@dataclass
class TotalLossParts:
    task: float
    disentangle: float
    enhance: float
    coordinate: float
    distill: float
    total: float


class FusionNetwork:
    """Concat of per-modality blocks -> tanh hidden -> K logits."""

    def __init__(
        self,
        modality_names: Tuple[str, ...],
        block_dim: int,
        hidden: int,
        num_outputs: int,
        seed: int,
    ):
        self.modality_names = modality_names
        self.block_dim = block_dim
        self.net = TwoLayerMlp(
            block_dim * len(modality_names), hidden, num_outputs, rng_for(seed, "fusion")
        )

    def named_params(self) -> List[Tuple[str, ad.Tensor]]:
        return self.net.named_params("fusion")

    def fuse_predict(
        self, blocks: Dict[str, ad.Tensor]
    ) -> Tuple[ad.Tensor, ad.Tensor]:
        """(fused feature, logits) from per-modality blocks.

        Blocks must arrive zeroed for missing modalities; the concat
        order is the fixed modality order of the network.
        """
        parts = []
        for name in self.modality_names:
            blk = blocks[name]
            if blk.cols != self.block_dim:
                raise ContractError(
                    f"fusion block for {name} has width {blk.cols}, "
                    f"expected {self.block_dim}"
                )
            parts.append(blk)
        fused = self.net.hidden_activation(ad.concat_cols(parts))
        logits = self.net.out(fused)
        return fused, logits


def loss_task(logits: ad.Tensor, labels: np.ndarray, mode: str = "classification") -> ad.Tensor:
    """Mean cross-entropy (classification) or mean absolute error (regression)."""
    if mode == "classification":
        lsm = ad.log_softmax_rows(logits)
        oh = ad.Tensor(one_hot(labels.astype(int), logits.cols))
        return ad.scale(ad.mean_all(ad.row_sum(ad.mul(lsm, oh))), -1.0)
    if mode == "regression":
        if logits.cols != 1:
            raise ContractError(f"regression head must have one output, got {logits.cols}")
        target = ad.Tensor(np.asarray(labels, dtype=float).reshape(-1, 1))
        return ad.mean_all(ad.abs_val(ad.sub(logits, target)))
    raise ContractError(f"unknown task mode {mode!r}")


def combine_total(
    weights: ObjectiveWeights,
    task: ad.Tensor,
    disentangle: Optional[ad.Tensor] = None,
    enhance: Optional[ad.Tensor] = None,
    coordinate: Optional[ad.Tensor] = None,
    distill: Optional[ad.Tensor] = None,
) -> Tuple[ad.Tensor, TotalLossParts]:
    """Weighted total objective; stage-disabled terms enter as zero."""
    zero = ad.Tensor([[0.0]])
    dis = disentangle if disentangle is not None else zero
    enh = enhance if enhance is not None else zero
    coo = coordinate if coordinate is not None else zero
    dst = distill if distill is not None else zero
    # Left-associated so the float parts sum back to the total exactly.
    total = ad.add(
        ad.add(
            ad.add(
                ad.add(task, ad.scale(dis, weights.zeta)),
                ad.scale(enh, weights.beta_w),
            ),
            ad.scale(coo, weights.gamma_w),
        ),
        ad.scale(dst, weights.eta_w),
    )
    parts = TotalLossParts(
        task=task.item(),
        disentangle=dis.item(),
        enhance=enh.item(),
        coordinate=coo.item(),
        distill=dst.item(),
        total=total.item(),
    )
    return total, parts
