"""Masking plans and loss terms for pretraining and fine-tuning.

Masking samples distinct identifiers per code type with independent rate
``alpha``; every occurrence of a selected code is masked. Pretraining
combines masked-code prediction (mean BCE over the four type heads),
chapter-ancestor prediction from the sequence summary and the last visit
node, and the chapter-token decorrelation penalty. Fine-tuning combines the
task BCE with the same decorrelation penalty.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .cohort import PatientTrajectory
from .errors import ShapeMismatch, ValidationError
from .network import ForwardTrace
from .ontology import CODE_TYPES, N_CHAPTERS, CodeType, Vocabulary


@dataclass
class MaskPlan:
    """Selected distinct identifiers per type, plus the derived targets."""

    selected: dict[CodeType, frozenset[str]]
    targets: dict[CodeType, np.ndarray]   # multi-hot over each type vocabulary
    ancestor_target: np.ndarray           # multi-hot over the 19 chapters
    alpha: float
    seed: object  # int or seed sequence accepted by default_rng

    @property
    def all_selected(self) -> frozenset[str]:
        out: set[str] = set()
        for s in self.selected.values():
            out |= s
        return frozenset(out)

    def masked_positions(self, slots) -> set[int]:
        chosen = self.all_selected
        return {s.position for s in slots if s.code is not None and s.code.identifier in chosen}


def sample_mask_plan(traj: PatientTrajectory, vocab: Vocabulary, alpha: float, seed) -> MaskPlan:
    """Independent Bernoulli(alpha) selection over each type's distinct identifiers."""
    if not 0.0 <= alpha <= 1.0:
        raise ValidationError(f"masking rate alpha must lie in [0, 1], got {alpha}")
    rng = np.random.default_rng(seed)
    present: dict[CodeType, list[str]] = {ct: [] for ct in CODE_TYPES}
    seen: set[str] = set()
    for visit in traj.visits:
        for code in visit.codes:
            if code.identifier not in seen:
                seen.add(code.identifier)
                present[code.code_type].append(code.identifier)

    selected: dict[CodeType, frozenset[str]] = {}
    targets: dict[CodeType, np.ndarray] = {}
    ancestor = np.zeros(N_CHAPTERS)
    for ct in CODE_TYPES:
        uniques = sorted(present[ct])
        draws = rng.random(len(uniques))
        chosen = frozenset(u for u, r in zip(uniques, draws) if r < alpha)
        selected[ct] = chosen
        target = np.zeros(vocab.size(ct))
        for ident in chosen:
            target[vocab.type_id(ident)] = 1.0
            if ct is CodeType.DIAGNOSIS:
                ancestor[vocab.chapter_map[ident] - 1] = 1.0
        targets[ct] = target
    return MaskPlan(selected=selected, targets=targets, ancestor_target=ancestor,
                    alpha=alpha, seed=seed)


# ---------------------------------------------------------------------------
# loss terms


def _require_mode(trace: ForwardTrace, mode: str) -> None:
    if trace.mode != mode:
        raise ValidationError(f"loss needs a {mode}-mode trace, got {trace.mode}")


def masked_code_loss(trace: ForwardTrace, plan: MaskPlan) -> Tensor:
    """Mean over the four type heads of multi-hot BCE; divisor is always 4."""
    _require_mode(trace, "pretrain")
    parts = []
    for ct in CODE_TYPES:
        logits = trace.logits[f"mask.{ct.value}"]
        target = plan.targets[ct].reshape(1, -1)
        if logits.data.shape != target.shape:
            raise ShapeMismatch(f"mask head {ct.value}: logits {logits.data.shape} vs target {target.shape}")
        parts.append(ad.bce_with_logits_mean(logits, target))
    total = parts[0]
    for p in parts[1:]:
        total = ad.add(total, p)
    return ad.scale(total, 1.0 / len(CODE_TYPES))


def ancestor_loss(trace: ForwardTrace, plan: MaskPlan) -> tuple[Tensor, Tensor]:
    """Chapter prediction of masked diagnoses from the sequence summary and last visit node."""
    _require_mode(trace, "pretrain")
    target = plan.ancestor_target.reshape(1, -1)
    return (
        ad.bce_with_logits_mean(trace.logits["anc.seq"], target),
        ad.bce_with_logits_mean(trace.logits["anc.visit"], target),
    )


def chapter_covariance_penalty(z: Tensor | None) -> Tensor:
    """Mean squared off-diagonal of the chapter-token covariance.

    Centering follows the printed formula: each chapter-token row is centered
    by its own mean over the feature columns, and Cov = Zc Zc^T / (d - 1).
    Fewer than two chapter tokens give exactly 0.
    """
    if z is None or z.data.shape[0] < 2:
        return ad.constant(0.0)
    n_a, d = z.data.shape
    row_mean = ad.scale(ad.sum_axis(z, 1, keepdims=True), 1.0 / d)
    centered = ad.sub(z, row_mean)
    cov = ad.scale(ad.matmul(centered, ad.transpose(centered)), 1.0 / (d - 1))
    off = ad.mul_const(cov, 1.0 - np.eye(n_a))
    return ad.scale(ad.sum_all(ad.mul(off, off)), 1.0 / (n_a - 1) ** 2)


def covariance_penalty(trace: ForwardTrace) -> Tensor:
    return chapter_covariance_penalty(trace.chapter_block)


def task_loss(trace: ForwardTrace, label) -> Tensor:
    """BCE for binary tasks; mean multi-label BCE for multi-hot tasks."""
    _require_mode(trace, "finetune")
    if "task" not in trace.logits:
        raise ShapeMismatch("trace has no task logits (model built without a task head)")
    logits = trace.logits["task"]
    target = np.asarray(label, dtype=np.float64).reshape(1, -1)
    if logits.data.shape != target.shape:
        raise ShapeMismatch(f"task logits {logits.data.shape} vs label {target.shape}")
    return ad.bce_with_logits_mean(logits, target)


# ---------------------------------------------------------------------------
# composition


@dataclass
class LossBreakdown:
    mask: float
    anc_sr: float
    anc_dp: float
    cov: float
    task: float | None
    lambda_anc: float
    lambda_cov: float
    total: Tensor

    def log_entry(self, step: int) -> dict:
        return {
            "step": step,
            "mask": self.mask,
            "anc_sr": self.anc_sr,
            "anc_dp": self.anc_dp,
            "cov": self.cov,
            "task": self.task,
            "total": float(self.total.data),
        }


def pretrain_loss(trace: ForwardTrace, plan: MaskPlan, lambda_anc: float, lambda_cov: float) -> LossBreakdown:
    mask = masked_code_loss(trace, plan)
    anc_sr, anc_dp = ancestor_loss(trace, plan)
    cov = covariance_penalty(trace)
    total = ad.add(mask, ad.add(ad.scale(ad.add(anc_sr, anc_dp), lambda_anc), ad.scale(cov, lambda_cov)))
    return LossBreakdown(
        mask=float(mask.data), anc_sr=float(anc_sr.data), anc_dp=float(anc_dp.data),
        cov=float(cov.data), task=None, lambda_anc=lambda_anc, lambda_cov=lambda_cov, total=total,
    )


def finetune_loss(trace: ForwardTrace, label, lambda_cov: float) -> LossBreakdown:
    task = task_loss(trace, label)
    cov = covariance_penalty(trace)
    total = ad.add(task, ad.scale(cov, lambda_cov))
    return LossBreakdown(
        mask=0.0, anc_sr=0.0, anc_dp=0.0, cov=float(cov.data), task=float(task.data),
        lambda_anc=0.0, lambda_cov=lambda_cov, total=total,
    )
