"""Instance-level modality trust weighting and distillation.

Teacher uncertainty is estimated per sample by Monte-Carlo input
perturbation: several forward passes with small Gaussian noise on the
teacher's input, variance taken across passes. The variance chain
sigma -> confidence exp(-sigma) -> reliability 1/log(1 + ||var||_1)
produces per-sample, per-modality trust weights alpha that form a
simplex over the present modalities. Distillation then aligns the fused
student's temperature-softened distribution with each teacher's, each
sample/modality term weighted by alpha.

The teacher side of the KL and the weights themselves are detached;
gradients reach only the student logits.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, Tuple

import numpy as np

from . import autodiff as ad
from .errors import ContractError

# Floor for ||var||_1 inside the reliability log; keeps exactly-zero
# variance (fully saturated teachers) finite while preserving its rank.
VAR_FLOOR = 1e-12


@dataclass(frozen=True)
class DistillConfig:
    tau_kd: float = 2.0
    mc_passes: int = 5
    mc_noise: float = 0.05

    def __post_init__(self):
        if self.tau_kd <= 0:
            raise ContractError(f"tau_kd must be positive, got {self.tau_kd}")
        if self.mc_passes < 2:
            raise ContractError(f"mc_passes must be >= 2, got {self.mc_passes}")


@dataclass
class TeacherStatistics:
    mean_probs: np.ndarray  # (n, K) mean over passes
    sigma: np.ndarray  # (n,) mean per-class variance
    var_vector: np.ndarray  # (n, K) per-class variance across passes


@dataclass
class TrustWeights:
    modality_names: Tuple[str, ...]
    sigma: np.ndarray  # (n, |M|)
    confidence: np.ndarray  # (n, |M|)
    reliability: np.ndarray  # (n, |M|)
    alpha: np.ndarray  # (n, |M|), rows sum to 1 over present modalities


def softmax_np(logits: np.ndarray, temperature: float = 1.0) -> np.ndarray:
    z = logits / temperature
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def log_softmax_np(logits: np.ndarray, temperature: float = 1.0) -> np.ndarray:
    z = logits / temperature
    z = z - z.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def teacher_statistics(
    teacher_forward,
    z_input: np.ndarray,
    mc_passes: int,
    noise_scale: float,
    rng: np.random.Generator,
) -> TeacherStatistics:
    """Mean probabilities and across-pass variance from noisy forward passes.

    ``teacher_forward`` maps an (n, d) array to (n, K) logits. Variances
    are population variances across passes, matching the two-pass
    hand fixture var([1, 0]) = 0.25.
    """
    if mc_passes < 2:
        raise ContractError(f"mc_passes must be >= 2, got {mc_passes}")
    probs = []
    for _ in range(mc_passes):
        noisy = z_input + rng.normal(0.0, noise_scale, size=z_input.shape) \
            if noise_scale > 0 else z_input
        probs.append(softmax_np(teacher_forward(noisy)))
    stack = np.stack(probs)  # (passes, n, K)
    mean = stack.mean(axis=0)
    var = stack.var(axis=0)  # ddof=0
    return TeacherStatistics(mean_probs=mean, sigma=var.mean(axis=1), var_vector=var)


def trust_weights(
    stats: Dict[str, TeacherStatistics],
    present_mask: np.ndarray,
    modality_names: Tuple[str, ...],
) -> TrustWeights:
    """Confidence exp(-sigma), reliability 1/log(1+||var||_1), normalized alpha.

    Alpha is renormalized over present modalities only; a sample with no
    present modality is a contract violation.
    """
    n = present_mask.shape[0]
    m = len(modality_names)
    sigma = np.zeros((n, m))
    conf = np.zeros((n, m))
    rel = np.zeros((n, m))
    for idx, name in enumerate(modality_names):
        st = stats[name]
        if np.any(st.sigma < 0):
            raise ContractError(f"negative sigma for modality {name}")
        sigma[:, idx] = st.sigma
        conf[:, idx] = np.exp(-st.sigma)
        l1 = np.maximum(st.var_vector.sum(axis=1), VAR_FLOOR)
        rel[:, idx] = 1.0 / np.log1p(l1)
    if np.any(~present_mask.any(axis=1)):
        bad = int(np.argmin(present_mask.any(axis=1)))
        raise ContractError(f"sample {bad} has no present modality")
    raw = conf * rel * present_mask
    alpha = raw / raw.sum(axis=1, keepdims=True)
    return TrustWeights(
        modality_names=modality_names,
        sigma=sigma,
        confidence=conf,
        reliability=rel,
        alpha=alpha,
    )


def loss_trust_distillation(
    weights: TrustWeights,
    student_logits: ad.Tensor,
    teacher_logits: Dict[str, np.ndarray],
    tau_kd: float,
) -> ad.Tensor:
    """Alpha-weighted KL(student || teacher) at temperature tau, sample mean.

    Missing modalities contribute nothing because their alpha is zero.
    """
    if tau_kd <= 0:
        raise ContractError(f"tau_kd must be positive, got {tau_kd}")
    n = student_logits.rows
    p = ad.softmax_rows(student_logits, tau_kd)
    log_p = ad.log_softmax_rows(student_logits, tau_kd)
    total = None
    for idx, name in enumerate(weights.modality_names):
        log_q = log_softmax_np(teacher_logits[name], tau_kd)
        kl = ad.row_sum(ad.mul(p, ad.sub(log_p, ad.Tensor(log_q))))
        w = ad.Tensor(weights.alpha[:, idx].reshape(-1, 1))
        term = ad.sum_all(ad.scale_rows(kl, w))
        total = term if total is None else ad.add(total, term)
    return ad.scale(total, 1.0 / n)


def summarize(weights: TrustWeights, present_mask: np.ndarray) -> Dict[str, dict]:
    """Per-modality means of the trust chain over present samples."""
    out = {}
    for idx, name in enumerate(weights.modality_names):
        inc = present_mask[:, idx]
        if inc.any():
            out[name] = {
                "mean_sigma": float(weights.sigma[inc, idx].mean()),
                "mean_c": float(weights.confidence[inc, idx].mean()),
                "mean_rho": float(weights.reliability[inc, idx].mean()),
                "mean_alpha": float(weights.alpha[inc, idx].mean()),
            }
        else:
            out[name] = {
                "mean_sigma": 0.0,
                "mean_c": 0.0,
                "mean_rho": 0.0,
                "mean_alpha": 0.0,
            }
    return out
