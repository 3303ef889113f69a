"""Cross-modal complementary enhancement.

A per-modality enhancement network rebuilds each modality's
representation from its own shared component, the mean shared and
specific components of the remaining modalities, and an optional noise
vector that adds feature diversity. Training balances a reconstruction
term (stay close to the original representation) against the task loss
of the prediction head fed the enhanced representation.

Samples present in only one modality pass through unchanged and
contribute nothing to either loss term, which keeps missing-modality
evaluation well defined.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple

import numpy as np

from . import autodiff as ad
from .disentangle import DisentangledRep, mask_column, masked_cross_entropy
from .errors import ContractError
from .nn import TwoLayerMlp
from .seeds import rng_for


@dataclass(frozen=True)
class EnhanceConfig:
    noise_scale: float = 0.1  # 0 disables the stochastic input
    noise_dim: int = 4
    gamma_task: float = 0.1
    hidden: int = 24


@dataclass
class EnhanceLossParts:
    reconstruction: float
    task: float
    gamma_task: float
    total: float


class EnhanceNetworks:
    """One enhancement perceptron per modality, output dim = encoder dim."""

    def __init__(
        self,
        modality_names: Tuple[str, ...],
        shared_dim: int,
        specific_dim: int,
        encoder_dim: int,
        cfg: EnhanceConfig,
        seed: int,
    ):
        self.cfg = cfg
        self.modality_names = modality_names
        d_in = 2 * shared_dim + specific_dim + cfg.noise_dim
        self.nets = {
            name: TwoLayerMlp(d_in, cfg.hidden, encoder_dim, rng_for(seed, f"enhance/{name}"))
            for name in modality_names
        }

    def named_params(self) -> List[Tuple[str, ad.Tensor]]:
        out = []
        for name, net in self.nets.items():
            out += net.named_params(f"{name}.enhance")
        return out


def _mean_of_others(
    tensors: Dict[str, ad.Tensor], skip: str, present_mask: np.ndarray, names
) -> ad.Tensor:
    """Masked mean over the other modalities; rows with none present go to zero."""
    total = None
    count = np.zeros(present_mask.shape[0])
    for idx, name in enumerate(names):
        if name == skip:
            continue
        masked = ad.scale_rows(tensors[name], mask_column(present_mask[:, idx]))
        total = masked if total is None else ad.add(total, masked)
        count += present_mask[:, idx]
    inv = np.where(count > 0, 1.0 / np.maximum(count, 1), 0.0)
    return ad.scale_rows(total, ad.Tensor(inv.reshape(-1, 1)))


def enhance(
    nets: EnhanceNetworks,
    reps: Dict[str, DisentangledRep],
    present_mask: np.ndarray,
    rng_seed: Optional[int] = None,
) -> Dict[str, ad.Tensor]:
    """Enhanced representation per modality.

    The noise input is Gaussian with the configured scale, drawn from
    rng_seed; with scale 0 (or no seed) it is exactly zero, making the
    output deterministic. Single-modality rows pass their raw
    representation through; missing rows stay zero.
    """
    names = list(reps)
    counts = present_mask.sum(axis=1)
    out = {}
    n = present_mask.shape[0]
    for idx, name in enumerate(names):
        shared = {m: reps[m].z_shared for m in names}
        specific = {m: reps[m].z_specific for m in names}
        others_shared = _mean_of_others(shared, name, present_mask, names)
        others_specific = _mean_of_others(specific, name, present_mask, names)
        if rng_seed is not None and nets.cfg.noise_scale > 0:
            eps = rng_for(rng_seed, f"enhance-noise/{name}").normal(
                0.0, nets.cfg.noise_scale, size=(n, nets.cfg.noise_dim)
            )
        else:
            eps = np.zeros((n, nets.cfg.noise_dim))
        inp = ad.concat_cols(
            [reps[name].z_shared, others_shared, others_specific, ad.Tensor(eps)]
        )
        enhanced = nets.nets[name](inp)
        multi = present_mask[:, idx] & (counts >= 2)
        solo = present_mask[:, idx] & (counts == 1)
        out[name] = ad.add(
            ad.scale_rows(enhanced, mask_column(multi)),
            ad.scale_rows(reps[name].z, mask_column(solo)),
        )
    return out


def loss_enhance(
    enhanced: Dict[str, ad.Tensor],
    reps: Dict[str, DisentangledRep],
    fusion_logits_fn,
    labels: np.ndarray,
    present_mask: np.ndarray,
    gamma_task: float,
) -> Tuple[ad.Tensor, EnhanceLossParts]:
    """Reconstruction plus task loss of the head fed one enhanced modality.

    ``fusion_logits_fn(replace_name, enhanced_tensor)`` must return the
    prediction-head logits with that one modality's representation
    swapped for its enhanced version, the others kept raw. The
    reconstruction term pools squared distances over every
    multi-modality sample of every modality.
    """
    if gamma_task < 0:
        raise ContractError(f"gamma_task must be nonnegative, got {gamma_task}")
    names = list(enhanced)
    counts = present_mask.sum(axis=1)

    rec_sum = None
    rec_count = 0
    for idx, name in enumerate(names):
        multi = present_mask[:, idx] & (counts >= 2)
        cnt = int(multi.sum())
        if cnt == 0:
            continue
        diff = ad.sub(enhanced[name], reps[name].z)
        sq = ad.row_sum(ad.mul(diff, diff))
        contrib = ad.sum_all(ad.scale_rows(sq, mask_column(multi)))
        rec_sum = contrib if rec_sum is None else ad.add(rec_sum, contrib)
        rec_count += cnt
    rec = ad.Tensor([[0.0]]) if rec_count == 0 else ad.scale(rec_sum, 1.0 / rec_count)

    task_terms = []
    for idx, name in enumerate(names):
        include = present_mask[:, idx]
        if not include.any():
            continue
        logits = fusion_logits_fn(name, enhanced[name])
        term, cnt = masked_cross_entropy(logits, labels, include)
        if cnt > 0:
            task_terms.append(term)
    if task_terms:
        task = task_terms[0]
        for t in task_terms[1:]:
            task = ad.add(task, t)
        task = ad.scale(task, 1.0 / len(task_terms))
    else:
        task = ad.Tensor([[0.0]])

    total = ad.add(rec, ad.scale(task, gamma_task))
    parts = EnhanceLossParts(
        reconstruction=rec.item(),
        task=task.item(),
        gamma_task=gamma_task,
        total=total.item(),
    )
    return total, parts
