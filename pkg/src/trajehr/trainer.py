"""Two-stage training: masked-code pretraining, then task fine-tuning.

Both stages run per-patient micro-batches with gradient accumulation to the
configured batch size, AdamW updates, and early stopping with a patience
counter (stage 1 minimizes validation pretraining loss; stage 2 maximizes the
validation task AUPRC). Everything is deterministic given (config, seed,
data): epoch shuffles and mask plans derive from the config seed, and
validation mask plans are sampled once per patient and reused across epochs.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .cohort import PatientTrajectory
from .config import TrainConfig
from .errors import ConfigError, DegenerateLabels, ValidationError
from .metrics import MetricsReport, compute_metrics, metric_auprc, metric_macro_auprc
from .network import Model, ModelHyper
from .objectives import finetune_loss, pretrain_loss, sample_mask_plan
from .ontology import N_CHAPTERS, Vocabulary
from .optim import AdamW

TASK_WIDTHS = {"mortality": 1, "plos": 1, "readmission": 1, "phenotyping": N_CHAPTERS}


def split_cohort(cohort: list[PatientTrajectory], config: TrainConfig):
    """Seeded patient-level split into train/val/test by the config fractions."""
    n = len(cohort)
    order = np.random.default_rng(config.seed).permutation(n)
    n_train = int(n * config.train_frac)
    n_val = int(n * config.val_frac)
    train = [cohort[i] for i in order[:n_train]]
    val = [cohort[i] for i in order[n_train:n_train + n_val]]
    test = [cohort[i] for i in order[n_train + n_val:]]
    return train, val, test


def model_hyper(config: TrainConfig, task_width: int = 0) -> ModelHyper:
    return ModelHyper(
        hidden_dim=config.hidden_dim, n_layers=config.n_layers, n_gat_blocks=config.n_gat_blocks,
        n_heads=config.n_heads, max_visits=config.max_visits, max_seq_len=config.max_seq_len,
        k=config.k, task_width=task_width,
    )


def task_label(traj: PatientTrajectory, task: str) -> np.ndarray | None:
    if task not in traj.labels:
        return None
    return np.atleast_1d(np.asarray(traj.labels[task], dtype=np.float64))


def _labeled(patients: list[PatientTrajectory], task: str):
    pairs = [(t, task_label(t, task)) for t in patients]
    return [(t, y) for t, y in pairs if y is not None]


def _snapshot(params: dict[str, Tensor]) -> dict[str, np.ndarray]:
    return {name: t.data.copy() for name, t in params.items()}


def _restore(params: dict[str, Tensor], snapshot: dict[str, np.ndarray]) -> None:
    for name, data in snapshot.items():
        params[name].data = data.copy()


class EarlyStopper:
    """Patience-based stopping on a validation criterion.

    ``update`` returns True when the epoch improved on the best seen so far
    (ties do not count); ``should_stop`` fires once ``patience`` epochs have
    passed without improvement.
    """

    def __init__(self, patience: int, mode: str = "min"):
        if patience < 1:
            raise ConfigError(f"patience must be >= 1, got {patience}")
        if mode not in ("min", "max"):
            raise ConfigError(f"mode must be min or max, got {mode!r}")
        self.patience = patience
        self.sign = 1.0 if mode == "min" else -1.0
        self.best_value = np.inf
        self.best_epoch = 0

    def update(self, value: float, epoch: int) -> bool:
        if self.sign * value < self.best_value:
            self.best_value = self.sign * value
            self.best_epoch = epoch
            return True
        return False

    def should_stop(self, epoch: int) -> bool:
        return epoch - self.best_epoch >= self.patience


class _StepLog:
    def __init__(self, path):
        self._fh = open(path, "w", encoding="utf-8") if path else None

    def write(self, entry: dict) -> None:
        if self._fh:
            self._fh.write(json.dumps(entry) + "\n")

    def close(self) -> None:
        if self._fh:
            self._fh.close()


def _mean_entries(entries: list[dict], step: int) -> dict:
    keys = ("mask", "anc_sr", "anc_dp", "cov", "task", "total")
    out = {"step": step}
    for key in keys:
        values = [e[key] for e in entries if e[key] is not None]
        out[key] = float(np.mean(values)) if values else None
    return out


@dataclass
class PretrainResult:
    model: Model
    history: list[dict]     # per-epoch {"epoch", "train_loss", "val_loss"}
    best_epoch: int
    stopped_epoch: int


def pretrain(cohort: list[PatientTrajectory], vocab: Vocabulary, config: TrainConfig,
             log_path=None) -> PretrainResult:
    """Stage 1: mask, predict, decorrelate; early-stop on validation loss."""
    train, val, _ = split_cohort(cohort, config)
    if not train or not val:
        raise ValidationError("pretrain needs nonempty train and validation splits")
    model = Model(vocab, model_hyper(config, task_width=0), seed=config.seed)
    opt = AdamW(model.params, lr=config.learning_rate, weight_decay=config.weight_decay)
    log = _StepLog(log_path)

    # validation plans are fixed across epochs so early stopping compares like with like
    val_plans = [sample_mask_plan(t, vocab, config.alpha, seed=[config.seed, 1, i])
                 for i, t in enumerate(val)]

    def validation_loss() -> float:
        totals = []
        for traj, plan in zip(val, val_plans):
            trace = model.forward(traj, mode="pretrain", masked=plan.all_selected)
            totals.append(float(pretrain_loss(trace, plan, config.lambda_anc, config.lambda_cov).total.data))
        return float(np.mean(totals))

    history: list[dict] = []
    stopper = EarlyStopper(config.patience, mode="min")
    best_state: dict[str, np.ndarray] | None = None
    step = 0
    epoch = 0
    try:
        for epoch in range(1, config.max_epochs + 1):
            order = np.random.default_rng([config.seed, 2, epoch]).permutation(len(train))
            epoch_totals = []
            for start in range(0, len(order), config.batch_size):
                batch = order[start:start + config.batch_size]
                entries = []
                for idx in batch:
                    traj = train[idx]
                    plan = sample_mask_plan(traj, vocab, config.alpha,
                                            seed=[config.seed, 3, epoch, int(idx)])
                    trace = model.forward(traj, mode="pretrain", masked=plan.all_selected)
                    breakdown = pretrain_loss(trace, plan, config.lambda_anc, config.lambda_cov)
                    ad.backward(breakdown.total)
                    entries.append(breakdown.log_entry(step))
                opt.step(grad_scale=1.0 / len(batch))
                step += 1
                entry = _mean_entries(entries, step)
                epoch_totals.append(entry["total"])
                log.write(entry)
            val_loss = validation_loss()
            history.append({"epoch": epoch, "train_loss": float(np.mean(epoch_totals)), "val_loss": val_loss})
            if stopper.update(val_loss, epoch):
                best_state = _snapshot(model.params)
            if stopper.should_stop(epoch):
                break
    finally:
        log.close()
    if best_state is not None:
        _restore(model.params, best_state)
    return PretrainResult(model=model, history=history, best_epoch=stopper.best_epoch, stopped_epoch=epoch)


@dataclass
class FinetuneResult:
    model: Model
    report: MetricsReport
    history: list[dict]     # per-epoch {"epoch", "train_loss", "val_metric"}
    best_epoch: int
    stopped_epoch: int


def _scores_for(model: Model, traj: PatientTrajectory, prepared: dict | None = None) -> np.ndarray:
    from scipy.special import expit

    trace = model.forward(traj, mode="finetune", prepared=prepared)
    return expit(trace.logits["task"].data[0])


def _validation_metric(model: Model, patients, task: str, prepared: dict | None = None) -> float:
    """Task AUPRC (macro for multi-label); falls back to -loss when degenerate."""
    scores = np.stack([
        _scores_for(model, t, prepared.get(t.patient_id) if prepared else None) for t, _ in patients
    ])
    labels = np.stack([y for _, y in patients])
    try:
        if labels.shape[1] > 1:
            return metric_macro_auprc(scores, labels)[0]
        return metric_auprc(scores.ravel(), labels.ravel())
    except DegenerateLabels:
        eps = 1e-12
        clipped = np.clip(scores, eps, 1 - eps)
        bce = -(labels * np.log(clipped) + (1 - labels) * np.log(1 - clipped)).mean()
        return -float(bce)


def evaluate_model(model: Model, patients: list[PatientTrajectory], task: str) -> MetricsReport:
    pairs = _labeled(patients, task)
    if not pairs:
        raise ValidationError(f"no patient carries a {task!r} label")
    scores = np.stack([model.task_scores(t) for t, _ in pairs])
    labels = np.stack([y for _, y in pairs])
    return compute_metrics(scores, labels, task)


def finetune(cohort: list[PatientTrajectory], vocab: Vocabulary, config: TrainConfig,
             init_manifest: dict | None = None, log_path=None) -> FinetuneResult:
    """Stage 2: task head on the pooled patient vector; early-stop on task AUPRC."""
    from .checkpoint import load_into_model

    width = TASK_WIDTHS.get(config.task)
    if width is None:
        raise ConfigError(f"unknown task {config.task!r}")
    train, val, test = (_labeled(part, config.task) for part in split_cohort(cohort, config))
    if not train or not val:
        raise ValidationError("finetune needs labeled train and validation patients")

    model = Model(vocab, model_hyper(config, task_width=width), seed=config.seed)
    if init_manifest is not None:
        load_into_model(model, init_manifest)
    opt = AdamW(model.params, lr=config.learning_rate, weight_decay=config.weight_decay)
    log = _StepLog(log_path)
    # assembly/graph/mask never change in finetune mode: prepare each patient once
    prepared = {traj.patient_id: model.prepare(traj) for traj, _ in train}
    prepared.update({traj.patient_id: model.prepare(traj) for traj, _ in val})

    history: list[dict] = []
    stopper = EarlyStopper(config.patience, mode="max")
    best_state: dict[str, np.ndarray] | None = None
    step = 0
    epoch = 0
    try:
        for epoch in range(1, config.max_epochs + 1):
            order = np.random.default_rng([config.seed, 4, epoch]).permutation(len(train))
            epoch_totals = []
            for start in range(0, len(order), config.batch_size):
                batch = order[start:start + config.batch_size]
                entries = []
                for idx in batch:
                    traj, label = train[idx]
                    trace = model.forward(traj, mode="finetune", prepared=prepared[traj.patient_id])
                    breakdown = finetune_loss(trace, label, config.lambda_cov)
                    ad.backward(breakdown.total)
                    entries.append(breakdown.log_entry(step))
                opt.step(grad_scale=1.0 / len(batch))
                step += 1
                entry = _mean_entries(entries, step)
                epoch_totals.append(entry["total"])
                log.write(entry)
            val_metric = _validation_metric(model, val, config.task, prepared=prepared)
            history.append({"epoch": epoch, "train_loss": float(np.mean(epoch_totals)),
                            "val_metric": val_metric})
            if stopper.update(val_metric, epoch):
                best_state = _snapshot(model.params)
            if stopper.should_stop(epoch):
                break
    finally:
        log.close()
    if best_state is not None:
        _restore(model.params, best_state)

    if test:
        report = evaluate_model(model, [t for t, _ in test], config.task)
    else:
        report = evaluate_model(model, [t for t, _ in val], config.task)
    return FinetuneResult(model=model, report=report, history=history,
                          best_epoch=stopper.best_epoch, stopped_epoch=epoch)


# ---------------------------------------------------------------------------
# visit-agnostic bag-of-codes logistic baseline


def bag_features(traj: PatientTrajectory, vocab: Vocabulary) -> np.ndarray:
    x = np.zeros(len(vocab))
    for visit in traj.visits:
        for code in visit.codes:
            x[vocab.global_id(code.identifier)] = 1.0
    return x


def train_bag_baseline(cohort: list[PatientTrajectory], vocab: Vocabulary, config: TrainConfig,
                       lr: float = 0.05, max_epochs: int = 300, patience: int = 20) -> MetricsReport:
    """Multi-hot logistic regression over the whole trajectory, no visit structure."""
    train, val, test = (_labeled(part, config.task) for part in split_cohort(cohort, config))
    if not train or not val:
        raise ValidationError("baseline needs labeled train and validation patients")
    width = TASK_WIDTHS[config.task]

    def design(pairs):
        x = np.stack([bag_features(t, vocab) for t, _ in pairs])
        y = np.stack([label for _, label in pairs])
        return x, y

    x_train, y_train = design(train)
    x_val, y_val = design(val)
    params = {
        "w": ad.parameter(np.zeros((len(vocab), width))),
        "b": ad.parameter(np.zeros(width)),
    }
    opt = AdamW(params, lr=lr, weight_decay=0.0)

    def batch_loss(x, y):
        logits = ad.add(ad.matmul(ad.constant(x), params["w"]), params["b"])
        return ad.bce_with_logits_mean(logits, y)

    best_val = np.inf
    best_epoch = 0
    best_state = None
    for epoch in range(1, max_epochs + 1):
        loss = batch_loss(x_train, y_train)
        ad.backward(loss)
        opt.step()
        val_loss = float(batch_loss(x_val, y_val).data)
        if val_loss < best_val:
            best_val, best_epoch, best_state = val_loss, epoch, _snapshot(params)
        if epoch - best_epoch >= patience:
            break
    if best_state is not None:
        _restore(params, best_state)

    from scipy.special import expit

    eval_pairs = test if test else val
    x_eval, y_eval = design(eval_pairs)
    scores = expit(x_eval @ params["w"].data + params["b"].data)
    return compute_metrics(scores, y_eval, config.task)
