"""Two-stage training orchestration.

Stage one trains encoders, the shared/specific decomposition, teachers,
and the enhancement networks under the disentanglement + enhancement
objective. Stage two freezes the teachers (always; the trust weights
need stable teachers), optionally freezes the rest, and trains the
fusion head under the full weighted objective with energy coordination
active: per-batch energies feed the equilibrium loss and a single
deterministic descent refinement of each representation before fusion.

The energy-descent refinement is a training-time mechanism; evaluation
runs the plain encode -> decompose -> enhance -> fuse pipeline (the
modality task loss inside the energy needs labels, which evaluation
does not have).

All randomness derives from the config seed via named child streams, so
two runs with the same seed produce identical logs and metrics.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field, replace
from itertools import combinations
from pathlib import Path
from typing import Dict, FrozenSet, List, Optional, Sequence, Tuple

import numpy as np

from . import autodiff as ad
from . import disentangle as dz
from . import energy as en
from . import enhance as eh
from . import fusion as fu
from . import metrics as mt
from . import synthetic as syn
from . import trust as tr
from .config import ExperimentConfig
from .errors import ContractError, TrainingAbort
from .nn import Sgd, load_named_arrays, save_named_arrays
from .seeds import derive_seed, rng_for

DISABLE_TOKENS = ("disentangle", "enhance", "energy", "trust")


# ---------------------------------------------------------------------------
# model bundle
# ---------------------------------------------------------------------------

class ModelBundle:
    """All networks of one experiment plus their static shape metadata.

    ``energy`` carries the coefficients the model applies at inference
    for the label-free representation refinement; an energy-disabled
    ablation stores lambda_flow = 0 here so its checkpoints never
    refine. ``trust_gate`` records whether fusion inputs are scaled by
    the per-sample trust weights (off for trust-disabled ablations), and
    ``distill`` holds the Monte-Carlo settings that the gate needs at
    inference.
    """

    def __init__(
        self,
        dis: dz.DisentangleNetworks,
        enh: eh.EnhanceNetworks,
        fus: fu.FusionNetwork,
        feature_dims: Dict[str, int],
        num_classes: int,
        mode: str,
        energy: en.EnergyCoefficients,
        distill: tr.DistillConfig,
        trust_gate: bool = True,
    ):
        self.dis = dis
        self.enh = enh
        self.fus = fus
        self.feature_dims = dict(feature_dims)
        self.num_classes = num_classes
        self.mode = mode
        self.energy = energy
        self.distill = distill
        self.trust_gate = trust_gate
        self.modality_names = tuple(feature_dims)

    def named_params(self) -> Dict[str, ad.Tensor]:
        out = dict(self.dis.named_params(include_teachers=True))
        out.update(dict(self.enh.named_params()))
        out.update(dict(self.fus.named_params()))
        return out

    def trainable_params(self, stage: int, freeze_stage1: bool) -> List[ad.Tensor]:
        if stage == 1:
            return [t for _, t in sorted(self.named_params().items())]
        params = dict(self.fus.named_params())
        if not freeze_stage1:
            params.update(dict(self.dis.named_params(include_teachers=False)))
            params.update(dict(self.enh.named_params()))
        return [t for _, t in sorted(params.items())]


def build_model(
    cfg: ExperimentConfig, feature_dims: Dict[str, int], num_classes: int
) -> ModelBundle:
    seed = derive_seed(cfg.seed, "model-init")
    dis = dz.DisentangleNetworks(feature_dims, num_classes, cfg.disentangle, seed)
    enh = eh.EnhanceNetworks(
        tuple(feature_dims),
        cfg.disentangle.shared_dim,
        cfg.disentangle.specific_dim,
        cfg.disentangle.encoder_dim,
        cfg.enhance,
        seed,
    )
    num_outputs = 1 if cfg.train.mode == "regression" else num_classes
    # Fusion consumes the enhanced representations; the shared components
    # reach it only through the enhancer. Routing them in directly would
    # expose the fusion head to the alignment loss's instance-level
    # (class-agnostic) compression, which measurably hurts separability.
    block_dim = cfg.disentangle.encoder_dim
    fus = fu.FusionNetwork(
        tuple(feature_dims),
        block_dim,
        hidden=cfg.fusion_hidden,
        num_outputs=num_outputs,
        seed=seed,
    )
    return ModelBundle(
        dis,
        enh,
        fus,
        feature_dims,
        num_classes,
        cfg.train.mode,
        cfg.energy,
        cfg.distill,
    )


def checkpoint_meta(model: ModelBundle, extra: dict) -> dict:
    meta = dict(extra)
    meta.update(
        {
            "feature_dims": model.feature_dims,
            "num_classes": model.num_classes,
            "mode": model.mode,
            "modalities": list(model.modality_names),
            "inference_energy": {
                "alpha_e": model.energy.alpha_e,
                "beta_e": model.energy.beta_e,
                "gamma_e": model.energy.gamma_e,
                "lambda_flow": model.energy.lambda_flow,
                "delta_e": model.energy.delta_e,
            },
            "trust_gate": model.trust_gate,
            "distill": {
                "tau_kd": model.distill.tau_kd,
                "mc_passes": model.distill.mc_passes,
                "mc_noise": model.distill.mc_noise,
            },
        }
    )
    return meta


def save_checkpoint(model: ModelBundle, path, meta: dict) -> None:
    arrays = {name: t.data for name, t in model.named_params().items()}
    save_named_arrays(path, arrays, checkpoint_meta(model, meta))


def load_checkpoint(path, cfg: Optional[ExperimentConfig] = None) -> Tuple[ModelBundle, dict]:
    """Rebuild a model from a checkpoint.

    With ``cfg=None`` the configuration is reconstructed from the
    resolved config embedded in the checkpoint metadata.
    """
    arrays, meta = load_named_arrays(path)
    if cfg is None:
        from .config import build_config

        if "resolved_config" not in meta:
            raise ContractError(
                f"checkpoint {path} carries no embedded config; pass one explicitly"
            )
        cfg = build_config(meta["resolved_config"], meta.get("seed", 0))
    model = build_model(cfg, meta["feature_dims"], meta["num_classes"])
    if "inference_energy" in meta:
        model.energy = en.EnergyCoefficients(**meta["inference_energy"])
    if "trust_gate" in meta:
        model.trust_gate = bool(meta["trust_gate"])
    if "distill" in meta:
        model.distill = tr.DistillConfig(**meta["distill"])
    params = model.named_params()
    if set(params) != set(arrays):
        missing = sorted(set(params) ^ set(arrays))
        raise ContractError(f"checkpoint/model parameter mismatch: {missing[:4]}")
    for name, tensor in params.items():
        if tensor.data.shape != arrays[name].shape:
            raise ContractError(
                f"checkpoint array {name} has shape {arrays[name].shape}, "
                f"model expects {tensor.data.shape}"
            )
        tensor.data = arrays[name].copy()
    return model, meta


# ---------------------------------------------------------------------------
# effective per-stage loss weights
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class EffectiveWeights:
    zeta: float
    beta_w: float
    gamma_w: float
    eta_w: float
    lambda_flow: float
    trust_gate: bool

    def as_objective(self) -> fu.ObjectiveWeights:
        return fu.ObjectiveWeights(self.zeta, self.beta_w, self.gamma_w, self.eta_w)


def effective_weights(
    cfg: ExperimentConfig, stage: int, disable: FrozenSet[str]
) -> EffectiveWeights:
    unknown = set(disable) - set(DISABLE_TOKENS)
    if unknown:
        raise ContractError(f"unknown disable tokens {sorted(unknown)}")
    zeta = 0.0 if "disentangle" in disable else cfg.objective.zeta
    beta = 0.0 if "enhance" in disable else cfg.objective.beta_w
    gamma = 0.0 if "energy" in disable else cfg.objective.gamma_w
    eta = 0.0 if "trust" in disable else cfg.objective.eta_w
    lam = 0.0 if "energy" in disable else cfg.energy.lambda_flow
    gate = "trust" not in disable
    if stage == 1:
        # Teachers are still forming in stage one: neither the
        # distillation loss nor the trust gate has a stable signal yet.
        gamma, eta, lam, gate = 0.0, 0.0, 0.0, False
    elif not cfg.train.keep_stage1_losses:
        zeta, beta = 0.0, 0.0
    return EffectiveWeights(zeta, beta, gamma, eta, lam, gate)


# ---------------------------------------------------------------------------
# forward passes
# ---------------------------------------------------------------------------

def trust_gates(
    weights_t: tr.TrustWeights, present_mask: np.ndarray
) -> Dict[str, np.ndarray]:
    """Per-sample fusion gates: alpha scaled by the present-modality count.

    Uniform trust over fully present modalities gives a gate of exactly
    one, so the gate only re-weights relative reliability; a corrupted
    modality's falling alpha shrinks its block, a missing one is zeroed.
    """
    counts = present_mask.sum(axis=1, keepdims=True).astype(float)
    gated = weights_t.alpha * counts
    return {
        m: gated[:, i].reshape(-1, 1)
        for i, m in enumerate(weights_t.modality_names)
    }


def _fusion_blocks(
    model: ModelBundle,
    primary: Dict[str, ad.Tensor],
    gates: Optional[Dict[str, np.ndarray]] = None,
) -> Dict[str, ad.Tensor]:
    blocks = {}
    for m in model.modality_names:
        block = primary[m]
        if gates is not None:
            block = ad.scale_rows(block, ad.Tensor(gates[m]))
        blocks[m] = block
    return blocks


def _enhanced_head_fn(
    model: ModelBundle,
    reps: Dict[str, dz.DisentangledRep],
    gates: Optional[Dict[str, np.ndarray]] = None,
):
    """Head that predicts with one modality's representation swapped
    for its enhanced version, the remaining modalities kept raw."""

    def head(replaced: str, enhanced_tensor: ad.Tensor) -> ad.Tensor:
        blocks = {}
        for m in model.modality_names:
            block = enhanced_tensor if m == replaced else reps[m].z
            if gates is not None:
                block = ad.scale_rows(block, ad.Tensor(gates[m]))
            blocks[m] = block
        _, logits = model.fus.fuse_predict(blocks)
        return logits

    return head


def _task_targets(batch: syn.MultimodalBatch, mode: str) -> np.ndarray:
    if mode == "regression":
        if batch.scores is None:
            raise ContractError("regression mode needs score targets in the batch")
        return batch.scores
    return batch.labels


def _stage1_losses(model, cfg, batch, eff: EffectiveWeights, noise_seed):
    reps = dz.disentangle(model.dis, batch)
    mask = batch.present_mask
    shared = {m: reps[m].z_shared for m in model.modality_names}
    specific = {m: reps[m].z_specific for m in model.modality_names}

    l_align = dz.loss_align(shared, mask, cfg.disentangle.tau)
    l_dis = dz.loss_decorrelate(specific, mask)
    l_uni = dz.loss_unimodal(model.dis, reps, batch.labels, mask)
    msd_total, msd_parts = dz.combine_losses(
        l_align, l_dis, l_uni, cfg.disentangle.lambda_dis, cfg.disentangle.lambda_uni
    )

    enhanced = eh.enhance(model.enh, reps, mask, rng_seed=noise_seed)
    cce_total, cce_parts = eh.loss_enhance(
        enhanced,
        reps,
        _enhanced_head_fn(model, reps),
        batch.labels,
        mask,
        cfg.enhance.gamma_task,
    )
    # Stage one minimizes the disentanglement loss at unit weight plus
    # the weighted enhancement loss. The logged parts still use the full
    # objective's weights so the accounting identity holds on every row.
    zero = ad.Tensor([[0.0]])
    msd_eff = msd_total if eff.zeta > 0 else zero
    cce_eff = ad.scale(cce_total, eff.beta_w) if eff.beta_w > 0 else zero
    objective = ad.add(msd_eff, cce_eff)
    _, parts = fu.combine_total(
        eff.as_objective(),
        zero,
        disentangle=msd_total,
        enhance=cce_total,
    )
    detail = {
        "align": msd_parts.align,
        "decorrelate": msd_parts.decorrelate,
        "unimodal": msd_parts.unimodal,
        "reconstruction": cce_parts.reconstruction,
        "enhance_task": cce_parts.task,
        "stage_objective": objective.item(),
    }
    return objective, parts, detail


def _stage2_losses(model, cfg, batch, eff: EffectiveWeights, noise_seed, mc_rng):
    names = model.modality_names
    mask = batch.present_mask
    labels = batch.labels

    # Encode, then build each modality's energy from the pre-refinement
    # representation: magnitude + teacher task loss + teacher entropy.
    z0: Dict[str, ad.Tensor] = {}
    energies: Dict[str, en.ModalityEnergy] = {}
    grad_parts: Dict[str, en.EnergyGradientParts] = {}
    grad_norm_t: Dict[str, ad.Tensor] = {}
    for idx, m in enumerate(names):
        include = mask[:, idx]
        z0[m] = dz.encode(model.dis, m, ad.Tensor(batch.features[m]), include)
        col = dz.mask_column(include)
        zs0 = ad.scale_rows(model.dis.nets[m].to_specific(z0[m]), col)
        t_logits = model.dis.nets[m].teacher(zs0)
        ce, _ = dz.masked_cross_entropy(t_logits, labels, include)
        probs = ad.softmax_rows(t_logits)
        u = en.entropy_uncertainty(probs, include)
        energies[m] = en.modality_energy(cfg.energy, z0[m], ce, u, include)
        grad_parts[m] = en.energy_gradient_parts(cfg.energy, z0[m], ce, u, include)
        grad_norm_t[m] = en.gradient_norm_sq(grad_parts[m].full(), include)

    report = en.build_report(
        names, energies, {m: grad_norm_t[m].item() for m in names}
    )
    l_gap = en.loss_gap([energies[m].total for m in names])
    l_coord = en.coordination_loss(
        l_gap, [grad_norm_t[m] for m in names], cfg.energy.delta_e
    )

    # Single deterministic descent refinement before fusion; applies the
    # label-free direction so training and inference share one forward.
    z1 = {
        m: en.energy_descent_step(z0[m], grad_parts[m].label_free(), eff.lambda_flow)
        for m in names
    }
    reps = {
        m: dz.decompose(model.dis, m, z1[m], mask[:, idx])
        for idx, m in enumerate(names)
    }

    msd_total = None
    detail = {}
    if eff.zeta > 0:
        shared = {m: reps[m].z_shared for m in names}
        specific = {m: reps[m].z_specific for m in names}
        l_align = dz.loss_align(shared, mask, cfg.disentangle.tau)
        l_dis = dz.loss_decorrelate(specific, mask)
        l_uni = dz.loss_unimodal(model.dis, reps, labels, mask)
        msd_total, msd_parts = dz.combine_losses(
            l_align, l_dis, l_uni, cfg.disentangle.lambda_dis, cfg.disentangle.lambda_uni
        )
        detail.update(
            {
                "align": msd_parts.align,
                "decorrelate": msd_parts.decorrelate,
                "unimodal": msd_parts.unimodal,
            }
        )

    enhanced = eh.enhance(model.enh, reps, mask, rng_seed=noise_seed)

    # Trust chain runs on frozen teachers over detached inputs; the
    # resulting weights both gate the fusion inputs and weight the
    # distillation terms.
    stats = {}
    kd_logits = {}
    for m in names:
        zs_data = reps[m].z_specific.data
        forward = _teacher_forward_np(model, m)
        stats[m] = tr.teacher_statistics(
            forward, zs_data, cfg.distill.mc_passes, cfg.distill.mc_noise, mc_rng
        )
        kd_logits[m] = forward(zs_data)
    weights_t = tr.trust_weights(stats, mask, names)
    gates = trust_gates(weights_t, mask) if eff.trust_gate else None

    cce_total = None
    if eff.beta_w > 0:
        cce_total, cce_parts = eh.loss_enhance(
            enhanced,
            reps,
            _enhanced_head_fn(model, reps, gates),
            labels,
            mask,
            cfg.enhance.gamma_task,
        )
        detail.update(
            {
                "reconstruction": cce_parts.reconstruction,
                "enhance_task": cce_parts.task,
            }
        )

    blocks = _fusion_blocks(model, enhanced, gates)
    _, logits = model.fus.fuse_predict(blocks)
    l_task = fu.loss_task(logits, _task_targets(batch, model.mode), model.mode)
    l_kd = tr.loss_trust_distillation(weights_t, logits, kd_logits, cfg.distill.tau_kd)

    total, parts = fu.combine_total(
        eff.as_objective(),
        l_task,
        disentangle=msd_total,
        enhance=cce_total,
        coordinate=l_coord if eff.gamma_w > 0 else None,
        distill=l_kd if eff.eta_w > 0 else None,
    )
    alpha_dev = float(np.max(np.abs(weights_t.alpha.sum(axis=1) - 1.0)))
    alpha_masked = (
        float(np.max(np.abs(weights_t.alpha[~mask]))) if (~mask).any() else 0.0
    )
    return total, parts, detail, report, weights_t, alpha_dev, alpha_masked


def _teacher_forward_np(model: ModelBundle, name: str):
    teacher = model.dis.nets[name].teacher

    def forward(arr: np.ndarray) -> np.ndarray:
        return teacher(ad.Tensor(arr)).data

    return forward


def _label_free_refinement(
    model: ModelBundle, name: str, z_data: np.ndarray, include: np.ndarray
) -> np.ndarray:
    """Inference-time energy descent using only the label-free components.

    The magnitude term 2*alpha*z and the uncertainty gradient need no
    labels; the task-loss term does, so it acts during training only.
    """
    coeffs = model.energy
    grad = 2.0 * coeffs.alpha_e * z_data
    cnt = int(include.sum())
    if coeffs.gamma_e > 0 and cnt > 0:
        tape = ad.Tape()
        z0 = tape.watch(ad.Tensor(z_data.copy()))
        col = dz.mask_column(include)
        zs = ad.scale_rows(model.dis.nets[name].to_specific(z0), col)
        probs = ad.softmax_rows(model.dis.nets[name].teacher(zs))
        u = en.entropy_uncertainty(probs, include)
        grad = grad + coeffs.gamma_e * cnt * ad.grad_of_scalar_wrt(z0, u).data
        tape.release()
    return z_data - coeffs.lambda_flow * grad


def eval_representations(
    model: ModelBundle, batch: syn.MultimodalBatch
) -> Dict[str, dz.DisentangledRep]:
    """Inference representations: encode, label-free refine, decompose."""
    reps = {}
    for name in batch.modality_names:
        include = batch.present_col(name)
        z = dz.encode(model.dis, name, ad.Tensor(batch.features[name]), include)
        z_data = z.data
        if model.energy.lambda_flow > 0:
            z_data = _label_free_refinement(model, name, z_data, include)
        reps[name] = dz.decompose(model.dis, name, ad.Tensor(z_data), include)
    return reps


# Fixed salt for the inference-time trust gate's Monte-Carlo draws, so
# every evaluation of the same checkpoint on the same data is identical.
GATE_EVAL_STREAM = "trust-gate-eval"


def _eval_trust_weights(
    model: ModelBundle,
    reps: Dict[str, dz.DisentangledRep],
    present_mask: np.ndarray,
) -> tr.TrustWeights:
    rng = rng_for(0, GATE_EVAL_STREAM)
    stats = {
        m: tr.teacher_statistics(
            _teacher_forward_np(model, m),
            reps[m].z_specific.data,
            model.distill.mc_passes,
            model.distill.mc_noise,
            rng,
        )
        for m in model.modality_names
    }
    return tr.trust_weights(stats, present_mask, model.modality_names)


def eval_logits(model: ModelBundle, batch: syn.MultimodalBatch) -> np.ndarray:
    """Detached forward pass: encode, refine, decompose, enhance (no noise),
    trust-gate, fuse."""
    reps = eval_representations(model, batch)
    enhanced = eh.enhance(model.enh, reps, batch.present_mask, rng_seed=None)
    gates = None
    if model.trust_gate:
        weights_t = _eval_trust_weights(model, reps, batch.present_mask)
        gates = trust_gates(weights_t, batch.present_mask)
    blocks = _fusion_blocks(model, enhanced, gates)
    _, logits = model.fus.fuse_predict(blocks)
    return logits.data


def evaluate_model(model: ModelBundle, batch: syn.MultimodalBatch) -> Dict[str, float]:
    logits = eval_logits(model, batch)
    if model.mode == "regression":
        return mt.evaluate_regression(logits[:, 0], batch.scores)
    return mt.evaluate_classification(logits, batch.labels)


def trust_weights_for_batch(
    model: ModelBundle, cfg: ExperimentConfig, batch: syn.MultimodalBatch, seed: int
) -> tr.TrustWeights:
    """Trust chain over a batch with frozen teachers (evaluation helper)."""
    reps = eval_representations(model, batch)
    rng = rng_for(seed, "trust-eval")
    stats = {}
    for m in model.modality_names:
        stats[m] = tr.teacher_statistics(
            _teacher_forward_np(model, m),
            reps[m].z_specific.data,
            cfg.distill.mc_passes,
            cfg.distill.mc_noise,
            rng,
        )
    return tr.trust_weights(stats, batch.present_mask, model.modality_names)


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

@dataclass
class TrainResult:
    model: ModelBundle
    runlog: List[dict] = field(default_factory=list)
    energy_rows: List[dict] = field(default_factory=list)
    trust_rows: List[dict] = field(default_factory=list)
    final_metrics: Dict[str, float] = field(default_factory=dict)
    stage1_arrays: Dict[str, np.ndarray] = field(default_factory=dict)
    alpha_max_dev: float = 0.0
    alpha_masked_max: float = 0.0


def _batch_indices(n: int, batch_size: int, rng) -> List[np.ndarray]:
    perm = rng.permutation(n)
    out = []
    for start in range(0, n, batch_size):
        idx = perm[start:start + batch_size]
        if idx.size >= 2:  # contrastive negatives need company
            out.append(idx)
    return out


def _run_stage(
    model: ModelBundle,
    cfg: ExperimentConfig,
    stage: int,
    train_batch: syn.MultimodalBatch,
    eval_batch: Optional[syn.MultimodalBatch],
    disable: FrozenSet[str],
    result: TrainResult,
    epoch_offset: int,
) -> None:
    eff = effective_weights(cfg, stage, disable)
    epochs = cfg.train.stage1_epochs if stage == 1 else cfg.train.stage2_epochs
    params = model.trainable_params(stage, cfg.train.stage2_freeze_stage1)
    opt = Sgd(params, cfg.train.learning_rate, cfg.train.momentum)
    log_eval = None
    if eval_batch is not None and eval_batch.n:
        take = min(eval_batch.n, cfg.train.log_eval_samples)
        log_eval = eval_batch.take(np.arange(take))

    for epoch in range(1, epochs + 1):
        t0 = time.perf_counter()
        order_rng = rng_for(cfg.seed, f"batch-order/stage{stage}/epoch{epoch}")
        part_sums: Dict[str, float] = {}
        detail_sums: Dict[str, float] = {}
        epoch_energy: Dict[str, Dict[str, float]] = {}
        trust_sums: Dict[str, Dict[str, float]] = {}
        n_batches = 0
        for b, idx in enumerate(
            _batch_indices(train_batch.n, cfg.train.batch_size, order_rng)
        ):
            xb = train_batch.take(idx)
            tape = ad.Tape()
            for p in params:
                tape.watch(p)
            noise_seed = derive_seed(cfg.seed, f"noise/stage{stage}/{epoch}/{b}")
            mc_rng = rng_for(cfg.seed, f"mc/stage{stage}/{epoch}/{b}")
            if stage == 1:
                total, parts, detail = _stage1_losses(model, cfg, xb, eff, noise_seed)
            else:
                (
                    total,
                    parts,
                    detail,
                    report,
                    weights_t,
                    alpha_dev,
                    alpha_masked,
                ) = _stage2_losses(model, cfg, xb, eff, noise_seed, mc_rng)
                result.alpha_max_dev = max(result.alpha_max_dev, alpha_dev)
                result.alpha_masked_max = max(result.alpha_masked_max, alpha_masked)
                for m in model.modality_names:
                    acc = epoch_energy.setdefault(m, {})
                    for key, value in (
                        ("e_magnitude", report.e_magnitude[m]),
                        ("e_loss", report.e_loss[m]),
                        ("e_uncertainty", report.e_uncertainty[m]),
                        ("e_total", report.e_total[m]),
                        ("grad_norm_sq", report.grad_norm_sq[m]),
                        ("implicit_weight", report.implicit_weights[m]),
                    ):
                        acc[key] = acc.get(key, 0.0) + value
                for m, row in tr.summarize(weights_t, xb.present_mask).items():
                    acc = trust_sums.setdefault(m, {})
                    for key, value in row.items():
                        acc[key] = acc.get(key, 0.0) + value
            if not np.isfinite(total.item()):
                tape.release()
                raise TrainingAbort(
                    f"non-finite loss at stage {stage} epoch {epoch} batch {b}",
                    batch_id=f"stage{stage}/epoch{epoch}/batch{b}",
                    energies=(
                        {m: e for m, e in report.e_total.items()} if stage == 2 else {}
                    ),
                )
            if total.tape is not None:  # all-disabled stages yield a constant
                ad.backward(total)
                tape.release()
                opt.step()
                opt.zero_grad()
            else:
                tape.release()
            n_batches += 1
            for key, value in _parts_dict(parts).items():
                part_sums[key] = part_sums.get(key, 0.0) + value
            for key, value in detail.items():
                detail_sums[key] = detail_sums.get(key, 0.0) + value

        scale = 1.0 / max(n_batches, 1)
        row = {
            "epoch": epoch_offset + epoch,
            "stage": stage,
            "losses": {k: v * scale for k, v in part_sums.items()},
            "loss_detail": {k: v * scale for k, v in detail_sums.items()},
        }
        if stage == 2:
            for m in model.modality_names:
                erow = {k: v * scale for k, v in epoch_energy[m].items()}
                erow.update({"epoch": epoch_offset + epoch, "modality": m})
                result.energy_rows.append(erow)
                trow = {k: v * scale for k, v in trust_sums[m].items()}
                trow.update({"epoch": epoch_offset + epoch, "modality": m})
                result.trust_rows.append(trow)
        if log_eval is not None:
            row["eval"] = evaluate_model(model, log_eval)
        row["wall_clock_s"] = time.perf_counter() - t0
        result.runlog.append(row)


def _parts_dict(parts: fu.TotalLossParts) -> Dict[str, float]:
    return {
        "task": parts.task,
        "disentangle": parts.disentangle,
        "enhance": parts.enhance,
        "coordinate": parts.coordinate,
        "distill": parts.distill,
        "total": parts.total,
    }


def train_full(
    cfg: ExperimentConfig,
    train_batch: syn.MultimodalBatch,
    eval_batch: Optional[syn.MultimodalBatch] = None,
    disable: Sequence[str] = (),
) -> TrainResult:
    """Run both stages; returns the model plus every log row."""
    if cfg.train.batch_size < 2:
        raise ContractError("batch_size must be >= 2 (contrastive negatives)")
    disable_set = frozenset(disable)
    feature_dims = {m: train_batch.features[m].shape[1] for m in train_batch.modality_names}
    num_classes = int(train_batch.labels.max()) + 1
    model = build_model(cfg, feature_dims, num_classes)
    if "energy" in disable_set:
        model.energy = replace(model.energy, lambda_flow=0.0)
    if "trust" in disable_set:
        model.trust_gate = False
    result = TrainResult(model=model)
    _run_stage(model, cfg, 1, train_batch, eval_batch, disable_set, result, 0)
    result.stage1_arrays = {
        name: t.data.copy() for name, t in model.named_params().items()
    }
    _run_stage(
        model, cfg, 2, train_batch, eval_batch, disable_set, result,
        cfg.train.stage1_epochs,
    )
    if eval_batch is not None and eval_batch.n:
        result.final_metrics = evaluate_model(model, eval_batch)
    return result


# ---------------------------------------------------------------------------
# evaluation protocols
# ---------------------------------------------------------------------------

def run_missing_modality(
    model: ModelBundle, eval_batch: syn.MultimodalBatch
) -> List[Tuple[str, Dict[str, float]]]:
    """Evaluate every non-empty modality subset, full set first."""
    names = model.modality_names
    rows = []
    subsets = [names]
    for r in range(len(names) - 1, 0, -1):
        subsets.extend(combinations(names, r))
    for subset in subsets:
        cond = syn.apply_modality_missing(eval_batch, subset)
        rows.append((syn.subset_key(subset), evaluate_model(model, cond)))
    return rows


def run_feature_dropout(
    model: ModelBundle, eval_batch: syn.MultimodalBatch, seed: int
) -> List[Tuple[str, Dict[str, float]]]:
    """Evaluate dropout rates 0.0 .. 0.9 plus the average row."""
    rows = []
    acc: Dict[str, float] = {}
    rates = [round(0.1 * i, 1) for i in range(10)]
    for p in rates:
        cond = syn.apply_feature_dropout(
            eval_batch, p, derive_seed(seed, f"robust-dropout/{p}")
        )
        m = evaluate_model(model, cond)
        rows.append((f"dropout:{p}", m))
        for key, value in m.items():
            acc[key] = acc.get(key, 0.0) + value
    rows.append((f"dropout:avg", {k: v / len(rates) for k, v in acc.items()}))
    return rows


def run_robustness(
    model: ModelBundle,
    eval_batch: syn.MultimodalBatch,
    protocol: str,
    seed: int = 0,
) -> List[Tuple[str, Dict[str, float]]]:
    if protocol == "modality-missing":
        return run_missing_modality(model, eval_batch)
    if protocol == "feature-dropout":
        return run_feature_dropout(model, eval_batch, seed)
    raise ContractError(
        f"unknown robustness protocol {protocol!r}; "
        "expected 'modality-missing' or 'feature-dropout'"
    )


def run_ablation(
    cfg: ExperimentConfig,
    train_batch: syn.MultimodalBatch,
    eval_batch: syn.MultimodalBatch,
    disable_sets: Sequence[Sequence[str]],
) -> Dict[str, TrainResult]:
    """Retrain once per disable subset (empty tuple = full model)."""
    out = {}
    for subset in disable_sets:
        key = "+".join(sorted(subset)) if subset else "full"
        out[key] = train_full(cfg, train_batch, eval_batch, disable=subset)
    return out


# ---------------------------------------------------------------------------
# output files
# ---------------------------------------------------------------------------

def _fmt(value) -> str:
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return str(value)


def write_csv_with_header(path, header_line: str, columns, rows) -> None:
    with Path(path).open("w", newline="") as fh:
        fh.write(f"# {header_line}\n")
        fh.write(",".join(columns) + "\n")
        for row in rows:
            fh.write(",".join(_fmt(v) for v in row) + "\n")


def metrics_rows(
    run_id: str, seed: int, tagged: List[Tuple[str, Dict[str, float]]]
) -> List[tuple]:
    rows = []
    for condition, record in tagged:
        for metric in sorted(record):
            rows.append((run_id, condition, seed, metric, record[metric]))
    return rows


def write_run_outputs(
    out_dir,
    run_id: str,
    cfg_hash: str,
    cfg: ExperimentConfig,
    result: TrainResult,
    canonical_cfg_text: str,
    resolved_cfg: Optional[dict] = None,
) -> List[str]:
    """Write the documented file set; returns the file names."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    header = f"run_id={run_id} config_hash={cfg_hash}"

    write_csv_with_header(
        out / "metrics.csv",
        header,
        ("run_id", "condition", "seed", "metric", "value"),
        metrics_rows(run_id, cfg.seed, [("clean", result.final_metrics)]),
    )
    write_csv_with_header(
        out / "energy.csv",
        header,
        (
            "epoch",
            "modality",
            "e_magnitude",
            "e_loss",
            "e_uncertainty",
            "e_total",
            "grad_norm_sq",
            "implicit_weight",
        ),
        (
            (
                r["epoch"],
                r["modality"],
                r["e_magnitude"],
                r["e_loss"],
                r["e_uncertainty"],
                r["e_total"],
                r["grad_norm_sq"],
                r["implicit_weight"],
            )
            for r in result.energy_rows
        ),
    )
    write_csv_with_header(
        out / "trust.csv",
        header,
        ("epoch", "modality", "mean_sigma", "mean_c", "mean_rho", "mean_alpha"),
        (
            (
                r["epoch"],
                r["modality"],
                r["mean_sigma"],
                r["mean_c"],
                r["mean_rho"],
                r["mean_alpha"],
            )
            for r in result.trust_rows
        ),
    )
    with (out / "runlog.jsonl").open("w") as fh:
        fh.write(json.dumps({"header": {"run_id": run_id, "config_hash": cfg_hash}}))
        fh.write("\n")
        for row in result.runlog:
            fh.write(json.dumps(row))
            fh.write("\n")
    (out / "config.resolved.txt").write_text(f"# {header}\n{canonical_cfg_text}")
    base_meta = {
        "seed": cfg.seed,
        "run_id": run_id,
        "config_hash": cfg_hash,
    }
    if resolved_cfg is not None:
        base_meta["resolved_config"] = resolved_cfg
    if result.stage1_arrays:
        save_named_arrays(
            out / "checkpoint_stage1.json",
            result.stage1_arrays,
            checkpoint_meta(result.model, dict(base_meta, stage=1)),
        )
    save_checkpoint(
        result.model, out / "checkpoint_final.json", dict(base_meta, stage=2)
    )
    return [
        "metrics.csv",
        "energy.csv",
        "trust.csv",
        "runlog.jsonl",
        "config.resolved.txt",
        "checkpoint_stage1.json",
        "checkpoint_final.json",
    ]
