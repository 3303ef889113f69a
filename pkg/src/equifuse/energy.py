"""Energy-based modality coordination.

Each modality gets a scalar energy potential combining representation
magnitude, its task loss, and the predictive entropy of its teacher.
Coordination then works two ways: an equilibrium loss penalizes pairwise
energy gaps (which is algebraically an energy-aware gradient modulator
proportional to E(m) minus the mean energy), and a deterministic descent
step refines each representation along the negative per-sample energy
gradient inside the forward pass.

Conventions fixed here:
  * Reported energies are means over present samples, so they are
    batch-size invariant.
  * The descent step and the gradient-smoothness penalty use per-sample
    gradients (the batch-mean gradient times the included count), which
    makes the pure-quadratic step exactly z <- (1 - 2*lambda*alpha) z.
  * The gap loss sums unordered pairs once, so its gradient w.r.t. one
    energy is 2*|M|*(E(m) - mean E); the pair-counting constant 2 is part
    of the documented convention.
  * Only the quadratic 2*alpha*z part of the energy gradient is
    differentiable-through in the penalty; the loss and uncertainty
    gradients enter detached (stop-gradient), avoiding general
    second-order autodiff.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple

import numpy as np

from . import autodiff as ad
from .disentangle import mask_column
from .errors import ContractError


@dataclass(frozen=True)
class EnergyCoefficients:
    alpha_e: float = 0.25  # representation-magnitude weight
    beta_e: float = 1.0  # task-loss weight
    gamma_e: float = 1.0  # uncertainty weight
    lambda_flow: float = 0.05  # descent-step size
    delta_e: float = 0.01  # gradient-smoothness penalty weight

    def __post_init__(self):
        for name in ("alpha_e", "beta_e", "gamma_e", "lambda_flow", "delta_e"):
            if getattr(self, name) < 0:
                raise ContractError(f"energy coefficient {name} must be nonnegative")


@dataclass
class ModalityEnergy:
    """One modality's energy, kept both on-tape and as plain floats."""

    total: ad.Tensor
    magnitude: float
    task_loss: float
    uncertainty: float

    @property
    def total_value(self) -> float:
        return self.total.item()


@dataclass
class EnergyReport:
    modality_names: Tuple[str, ...]
    e_magnitude: Dict[str, float]
    e_loss: Dict[str, float]
    e_uncertainty: Dict[str, float]
    e_total: Dict[str, float]
    grad_norm_sq: Dict[str, float]
    e_mean: float
    pairwise_gaps: Dict[Tuple[str, str], float]
    implicit_weights: Dict[str, float]


def entropy_uncertainty(
    teacher_probs: ad.Tensor, include: Optional[np.ndarray] = None
) -> ad.Tensor:
    """Mean Shannon entropy (natural log) over included probability rows."""
    rows = teacher_probs.data if include is None else teacher_probs.data[include]
    if rows.shape[0]:
        sums = rows.sum(axis=1)
        if np.any(np.abs(sums - 1.0) > 1e-6):
            bad = int(np.argmax(np.abs(sums - 1.0)))
            raise ContractError(
                f"probability row {bad} sums to {sums[bad]!r}, expected 1"
            )
    h = ad.entropy_rows(teacher_probs)
    if include is None:
        return ad.mean_all(h)
    cnt = int(include.sum())
    if cnt == 0:
        return ad.Tensor([[0.0]])
    return ad.scale(ad.sum_all(ad.scale_rows(h, mask_column(include))), 1.0 / cnt)


def modality_energy(
    coeffs: EnergyCoefficients,
    z: ad.Tensor,
    task_loss: ad.Tensor,
    uncertainty: ad.Tensor,
    include: Optional[np.ndarray] = None,
) -> ModalityEnergy:
    """E(m) = alpha * mean_i ||z_i||^2 + beta * task_loss + gamma * uncertainty."""
    if include is None:
        include = np.ones(z.rows, dtype=bool)
    cnt = max(int(include.sum()), 1)
    sq = ad.row_sum(ad.mul(z, z))
    mean_sq = ad.scale(ad.sum_all(ad.scale_rows(sq, mask_column(include))), 1.0 / cnt)
    magnitude = ad.scale(mean_sq, coeffs.alpha_e)
    # Left-associated so the float components sum back to the total exactly.
    total = ad.add(
        ad.add(magnitude, ad.scale(task_loss, coeffs.beta_e)),
        ad.scale(uncertainty, coeffs.gamma_e),
    )
    return ModalityEnergy(
        total=total,
        magnitude=magnitude.item(),
        task_loss=coeffs.beta_e * task_loss.item(),
        uncertainty=coeffs.gamma_e * uncertainty.item(),
    )


def loss_gap(energies: List[ad.Tensor]) -> ad.Tensor:
    """Sum over unordered modality pairs of squared energy differences."""
    if len(energies) < 2:
        raise ContractError("the gap loss needs at least two modalities")
    total = None
    for i in range(len(energies)):
        for j in range(i + 1, len(energies)):
            d = ad.sub(energies[i], energies[j])
            term = ad.mul(d, d)
            total = term if total is None else ad.add(total, term)
    return total


@dataclass
class EnergyGradientParts:
    """Per-sample energy-gradient pieces.

    ``quad`` (2*alpha*z) stays on-tape and is differentiable-through;
    the task and uncertainty gradients are detached sweeps scaled by the
    included count (batch-mean gradients converted to per-sample ones).
    """

    quad: ad.Tensor
    task: np.ndarray
    uncertainty: np.ndarray

    def full(self) -> ad.Tensor:
        """Complete gradient: feeds E(m)'s smoothness penalty."""
        return ad.add(self.quad, ad.Tensor(self.task + self.uncertainty))

    def label_free(self) -> ad.Tensor:
        """Magnitude + uncertainty components only.

        This is the direction the descent refinement applies. The task
        component needs labels, which inference does not have, so
        applying it during training would bake label information into
        the representations the fusion head learns from; it therefore
        contributes to the energy value and the penalty but never to
        the applied update.
        """
        return ad.add(self.quad, ad.Tensor(self.uncertainty))


def energy_gradient_parts(
    coeffs: EnergyCoefficients,
    z: ad.Tensor,
    task_loss: ad.Tensor,
    uncertainty: ad.Tensor,
    include: Optional[np.ndarray] = None,
) -> EnergyGradientParts:
    if include is None:
        include = np.ones(z.rows, dtype=bool)
    cnt = max(int(include.sum()), 1)
    quad = ad.scale(z, 2.0 * coeffs.alpha_e)
    task = np.zeros_like(z.data)
    unc = np.zeros_like(z.data)
    # Off-tape losses (e.g. a fully masked modality yields constants)
    # contribute a zero gradient.
    if coeffs.beta_e > 0 and task_loss.tape is not None:
        task = coeffs.beta_e * cnt * ad.grad_of_scalar_wrt(z, task_loss).data
    if coeffs.gamma_e > 0 and uncertainty.tape is not None:
        unc = coeffs.gamma_e * cnt * ad.grad_of_scalar_wrt(z, uncertainty).data
    return EnergyGradientParts(quad=quad, task=task, uncertainty=unc)


def energy_descent_step(
    z: ad.Tensor, gradient: ad.Tensor, lambda_flow: float
) -> ad.Tensor:
    """One deterministic refinement z <- z - lambda * grad E."""
    if lambda_flow < 0:
        raise ContractError(f"lambda_flow must be nonnegative, got {lambda_flow}")
    if lambda_flow == 0:
        return z
    return ad.sub(z, ad.scale(gradient, lambda_flow))


def gradient_norm_sq(
    gradient: ad.Tensor, include: Optional[np.ndarray] = None
) -> ad.Tensor:
    """Mean per-sample squared norm of the energy gradient."""
    if include is None:
        include = np.ones(gradient.rows, dtype=bool)
    cnt = max(int(include.sum()), 1)
    sq = ad.row_sum(ad.mul(gradient, gradient))
    return ad.scale(ad.sum_all(ad.scale_rows(sq, mask_column(include))), 1.0 / cnt)


def coordination_loss(
    gap: ad.Tensor, grad_norms: List[ad.Tensor], delta_e: float
) -> ad.Tensor:
    """Gap loss plus the weighted gradient-smoothness penalty."""
    total = gap
    if delta_e > 0 and grad_norms:
        penalty = grad_norms[0]
        for g in grad_norms[1:]:
            penalty = ad.add(penalty, g)
        total = ad.add(total, ad.scale(penalty, delta_e))
    return total


def implicit_weights(energies: Dict[str, float]) -> Dict[str, float]:
    """Per-modality E(m) - mean(E); the signs drive the negative feedback."""
    if len(energies) < 2:
        raise ContractError("implicit weights need at least two modalities")
    mean = sum(energies.values()) / len(energies)
    return {name: e - mean for name, e in energies.items()}


def build_report(
    names: Tuple[str, ...],
    energies: Dict[str, ModalityEnergy],
    grad_norms: Dict[str, float],
) -> EnergyReport:
    totals = {m: energies[m].total_value for m in names}
    mean = sum(totals.values()) / len(totals)
    # Absolute gaps: symmetric with a zero diagonal.
    gaps = {
        (a, b): abs(totals[a] - totals[b]) for a in names for b in names
    }
    return EnergyReport(
        modality_names=names,
        e_magnitude={m: energies[m].magnitude for m in names},
        e_loss={m: energies[m].task_loss for m in names},
        e_uncertainty={m: energies[m].uncertainty for m in names},
        e_total=totals,
        grad_norm_sq=dict(grad_norms),
        e_mean=mean,
        pairwise_gaps=gaps,
        implicit_weights=implicit_weights(totals),
    )
