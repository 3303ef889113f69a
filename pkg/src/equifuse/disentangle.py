"""Shared/specific semantic decomposition of per-modality representations.

Each modality gets an encoder, two decomposition heads (one extracting
the cross-modality shared component, one the modality-specific
component), and a unimodal teacher classifier on the specific component.
Three losses shape the split: a contrastive alignment loss pulling
shared components toward their per-sample aggregate, a decorrelation
loss pushing specific components of different modalities apart, and the
mean teacher cross-entropy that keeps each specific component predictive
on its own.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List, Tuple

import numpy as np

from . import autodiff as ad
from .errors import ContractError
from .nn import TwoLayerMlp
from .seeds import rng_for


@dataclass(frozen=True)
class DisentangleConfig:
    encoder_dim: int = 16
    shared_dim: int = 8
    specific_dim: int = 8
    hidden: int = 24
    tau: float = 0.1  # contrastive temperature
    lambda_dis: float = 0.1
    lambda_uni: float = 0.1


@dataclass
class DisentangledRep:
    """One modality's raw, shared, and specific representations."""

    z: ad.Tensor
    z_shared: ad.Tensor
    z_specific: ad.Tensor


@dataclass
class DisentangleLossParts:
    align: float
    decorrelate: float
    unimodal: float
    lambda_dis: float
    lambda_uni: float
    total: float


class ModalityNets:
    def __init__(self, d_in: int, num_classes: int, cfg: DisentangleConfig, rng):
        self.encoder = TwoLayerMlp(d_in, cfg.hidden, cfg.encoder_dim, rng)
        self.to_shared = TwoLayerMlp(cfg.encoder_dim, cfg.hidden, cfg.shared_dim, rng)
        self.to_specific = TwoLayerMlp(cfg.encoder_dim, cfg.hidden, cfg.specific_dim, rng)
        self.teacher = TwoLayerMlp(cfg.specific_dim, cfg.hidden, num_classes, rng)


class DisentangleNetworks:
    """Per-modality encoder + decomposition heads + unimodal teacher."""

    def __init__(
        self,
        feature_dims: Dict[str, int],
        num_classes: int,
        cfg: DisentangleConfig,
        seed: int,
    ):
        self.cfg = cfg
        self.num_classes = num_classes
        self.modality_names = tuple(feature_dims)
        self.nets = {
            name: ModalityNets(dim, num_classes, cfg, rng_for(seed, f"nets/{name}"))
            for name, dim in feature_dims.items()
        }

    def named_params(self, include_teachers: bool = True) -> List[Tuple[str, ad.Tensor]]:
        out = []
        for name, mn in self.nets.items():
            out += mn.encoder.named_params(f"{name}.encoder")
            out += mn.to_shared.named_params(f"{name}.to_shared")
            out += mn.to_specific.named_params(f"{name}.to_specific")
            if include_teachers:
                out += mn.teacher.named_params(f"{name}.teacher")
        return out

    def teacher_params(self) -> List[Tuple[str, ad.Tensor]]:
        out = []
        for name, mn in self.nets.items():
            out += mn.teacher.named_params(f"{name}.teacher")
        return out


def mask_column(mask: np.ndarray) -> ad.Tensor:
    """Boolean vector as a constant (n, 1) 0/1 column."""
    return ad.Tensor(mask.astype(np.float64).reshape(-1, 1))


def encode(nets: DisentangleNetworks, name: str, x: ad.Tensor, present: np.ndarray) -> ad.Tensor:
    """Encoder output with missing-modality rows forced to zero."""
    return ad.scale_rows(nets.nets[name].encoder(x), mask_column(present))


def decompose(
    nets: DisentangleNetworks, name: str, z: ad.Tensor, present: np.ndarray
) -> DisentangledRep:
    col = mask_column(present)
    mn = nets.nets[name]
    return DisentangledRep(
        z=z,
        z_shared=ad.scale_rows(mn.to_shared(z), col),
        z_specific=ad.scale_rows(mn.to_specific(z), col),
    )


def disentangle(nets: DisentangleNetworks, batch) -> Dict[str, DisentangledRep]:
    """Encode and decompose every modality of a batch."""
    reps = {}
    for name in batch.modality_names:
        x = ad.Tensor(batch.features[name])
        present = batch.present_col(name)
        z = encode(nets, name, x, present)
        reps[name] = decompose(nets, name, z, present)
    return reps


def loss_align(
    shared: Dict[str, ad.Tensor], present_mask: np.ndarray, tau: float
) -> ad.Tensor:
    """Contrastive alignment of shared components toward the sample aggregate.

    For every anchor (sample i, modality m) where sample i is present in
    at least two modalities, the positive is the cosine between the
    anchor and the mean of sample i's present shared components. The
    denominator is exp(positive / tau) plus exp(cos / tau) over every
    present shared component of every *other* sample, in any modality
    (in-batch negatives; the anchor sample's own components are never
    negatives). The result is averaged over anchors. Batches with no
    valid anchors yield 0.
    """
    if tau <= 0:
        raise ContractError(f"alignment temperature must be positive, got {tau}")
    names = list(shared)
    if len(names) < 2:
        raise ContractError("alignment loss needs at least two modalities")
    n = present_mask.shape[0]
    counts = present_mask.sum(axis=1)
    anchor_ok = counts >= 2

    # Mean of present shared components per sample.
    total = None
    for idx, name in enumerate(names):
        masked = ad.scale_rows(shared[name], mask_column(present_mask[:, idx]))
        total = masked if total is None else ad.add(total, masked)
    inv_counts = np.where(counts > 0, 1.0 / np.maximum(counts, 1), 0.0)
    agg = ad.scale_rows(total, ad.Tensor(inv_counts.reshape(-1, 1)))

    normalized = {name: ad.normalize_rows(shared[name]) for name in names}
    agg_n = ad.normalize_rows(agg)

    loss_sum = None
    anchor_count = 0
    inv_tau = 1.0 / tau
    for idx, name in enumerate(names):
        valid = anchor_ok & present_mask[:, idx]
        if not valid.any():
            continue
        anchor_count += int(valid.sum())
        pos = ad.row_sum(ad.mul(normalized[name], agg_n))
        s_pos = ad.scale(pos, inv_tau)
        den = ad.exp(s_pos)
        for jdx, other in enumerate(names):
            sims = ad.matmul(normalized[name], ad.transpose(normalized[other]))
            cand = np.broadcast_to(present_mask[:, jdx], (n, n)).copy()
            np.fill_diagonal(cand, False)  # own sample never a negative
            masked = ad.mul(ad.exp(ad.scale(sims, inv_tau)), ad.Tensor(cand.astype(float)))
            den = ad.add(den, ad.row_sum(masked))
        per_anchor = ad.sub(ad.log(den), s_pos)
        contrib = ad.sum_all(ad.scale_rows(per_anchor, mask_column(valid)))
        loss_sum = contrib if loss_sum is None else ad.add(loss_sum, contrib)
    if loss_sum is None or anchor_count == 0:
        return ad.Tensor([[0.0]])
    return ad.scale(loss_sum, 1.0 / anchor_count)


def loss_decorrelate(
    specific: Dict[str, ad.Tensor], present_mask: np.ndarray
) -> ad.Tensor:
    """Sum over unordered modality pairs of the mean per-sample cosine.

    Pairs are counted once (i < j); doubling would only rescale the
    trade-off weight. Samples missing either modality are excluded from
    that pair's mean.
    """
    names = list(specific)
    if len(names) < 2:
        raise ContractError("decorrelation loss needs at least two modalities")
    normalized = {name: ad.normalize_rows(specific[name]) for name in names}
    total = None
    for (ia, a), (ib, b) in combinations_with_index(names):
        both = present_mask[:, ia] & present_mask[:, ib]
        cnt = int(both.sum())
        if cnt == 0:
            continue
        cos = ad.row_sum(ad.mul(normalized[a], normalized[b]))
        term = ad.scale(ad.sum_all(ad.scale_rows(cos, mask_column(both))), 1.0 / cnt)
        total = term if total is None else ad.add(total, term)
    return ad.Tensor([[0.0]]) if total is None else total


def combinations_with_index(names):
    for i in range(len(names)):
        for j in range(i + 1, len(names)):
            yield (i, names[i]), (j, names[j])


def one_hot(labels: np.ndarray, num_classes: int) -> np.ndarray:
    out = np.zeros((labels.shape[0], num_classes))
    out[np.arange(labels.shape[0]), labels] = 1.0
    return out


def masked_cross_entropy(
    logits: ad.Tensor, labels: np.ndarray, include: np.ndarray
) -> Tuple[ad.Tensor, int]:
    """Mean CE over the included rows; returns (loss, included count)."""
    cnt = int(include.sum())
    if cnt == 0:
        return ad.Tensor([[0.0]]), 0
    lsm = ad.log_softmax_rows(logits)
    oh = ad.Tensor(one_hot(labels, logits.cols))
    per_row = ad.scale(ad.row_sum(ad.mul(lsm, oh)), -1.0)
    return ad.scale(ad.sum_all(ad.scale_rows(per_row, mask_column(include))), 1.0 / cnt), cnt


def loss_unimodal(
    nets: DisentangleNetworks,
    reps: Dict[str, DisentangledRep],
    labels: np.ndarray,
    present_mask: np.ndarray,
) -> ad.Tensor:
    """Mean over (populated) modalities of the teacher cross-entropy."""
    terms = []
    for idx, name in enumerate(reps):
        logits = nets.nets[name].teacher(reps[name].z_specific)
        term, cnt = masked_cross_entropy(logits, labels, present_mask[:, idx])
        if cnt > 0:
            terms.append(term)
    if not terms:
        return ad.Tensor([[0.0]])
    total = terms[0]
    for t in terms[1:]:
        total = ad.add(total, t)
    return ad.scale(total, 1.0 / len(terms))


def combine_losses(
    align: ad.Tensor,
    decorrelate: ad.Tensor,
    unimodal: ad.Tensor,
    lambda_dis: float,
    lambda_uni: float,
) -> Tuple[ad.Tensor, DisentangleLossParts]:
    """Weighted sum ``align + lambda_dis * decorrelate + lambda_uni * unimodal``."""
    if lambda_dis < 0 or lambda_uni < 0:
        raise ContractError(
            f"loss weights must be nonnegative, got {lambda_dis}, {lambda_uni}"
        )
    # Left-associated so the float components sum back to the total exactly.
    total = ad.add(
        ad.add(align, ad.scale(decorrelate, lambda_dis)),
        ad.scale(unimodal, lambda_uni),
    )
    parts = DisentangleLossParts(
        align=align.item(),
        decorrelate=decorrelate.item(),
        unimodal=unimodal.item(),
        lambda_dis=lambda_dis,
        lambda_uni=lambda_uni,
        total=total.item(),
    )
    return total, parts
