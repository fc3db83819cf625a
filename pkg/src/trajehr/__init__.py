"""trajehr: chapter-aware transformer over longitudinal EHR code sequences.

Library surface: vocabulary/ontology handling, synthetic cohorts, sequence
assembly with chapter-restricted attention, a per-patient progression graph,
the differentiable network with gradient checking, masking/ancestor/
decorrelation objectives, AdamW two-stage training, ranking metrics, and
attention-report extraction. The ``trajehr`` console command exposes the full
pipeline.
"""

__version__ = "0.1.0"

from .assembly import AssembledSequence, AttentionMask, assemble
from .cohort import GeneratorSpec, PatientTrajectory, Visit, age_bin, generate_cohort, read_cohort, write_cohort
from .config import TrainConfig, load_config
from .graph import ProgressionGraph, build_progression_graph
from .interpret import AttentionReport, extract_attention, render_report
from .metrics import MetricsReport, compute_metrics, metric_auprc, metric_auroc, metric_f1, metric_macro_auprc
from .network import ForwardTrace, GradCheckReport, Model, ModelHyper, grad_check
from .objectives import MaskPlan, finetune_loss, pretrain_loss, sample_mask_plan
from .ontology import Code, CodeType, Vocabulary, chapter_of, load_vocabulary, save_vocabulary
from .optim import AdamW
from .trainer import FinetuneResult, PretrainResult, finetune, pretrain, split_cohort

__all__ = [
    "AdamW", "AssembledSequence", "AttentionMask", "AttentionReport", "Code", "CodeType",
    "FinetuneResult", "ForwardTrace", "GeneratorSpec", "GradCheckReport", "MaskPlan",
    "MetricsReport", "Model", "ModelHyper", "PatientTrajectory", "PretrainResult",
    "ProgressionGraph", "TrainConfig", "Visit", "Vocabulary", "age_bin", "assemble",
    "build_progression_graph", "chapter_of", "compute_metrics", "extract_attention",
    "finetune", "finetune_loss", "generate_cohort", "grad_check", "load_config",
    "load_vocabulary", "metric_auprc", "metric_auroc", "metric_f1", "metric_macro_auprc",
    "pretrain", "pretrain_loss", "read_cohort", "render_report", "sample_mask_plan",
    "save_vocabulary", "split_cohort", "write_cohort",
]
