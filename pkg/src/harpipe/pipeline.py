"""Teacher-student orchestration and the five training configurations.

The five configurations differ only in which stages run:

  fully_supervised                        supervised training on D
  transformation_discrimination           transform pre-training on W, fresh
                                          activity head, fine-tune
  self_training                           teacher -> self-label -> student on
                                          soft activity labels -> fine-tune
  transformation_knowledge_distillation   transform-pre-trained teacher, then
                                          self-label -> student -> fine-tune
  selfhar                                 teacher -> self-label -> nine-task
                                          student -> fine-tune

All stages share one minibatch Adam loop with per-epoch validation and
minimum-validation-loss snapshotting. A run is fully determined by its
PipelineConfig.seed; per-stage rngs are derived from it.
"""

from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass, field, asdict
from enum import Enum

import numpy as np

from . import datakit, evalkit, signals
from . import model as md
from . import ndtensor as nd
from .errors import ConfigurationError, DataError, DimensionError
from .signals import TransformParams


class PipelineKind(str, Enum):
    FULLY_SUPERVISED = "fully_supervised"
    TRANSFORMATION_DISCRIMINATION = "transformation_discrimination"
    SELF_TRAINING = "self_training"
    TRANSFORMATION_KNOWLEDGE_DISTILLATION = "transformation_knowledge_distillation"
    SELFHAR = "selfhar"


# Component sets: 0 = transform pre-training of the teacher, 1 = supervised
# training, 2 = self-labeling, 3 = transform augmentation of the selected set,
# 4 = student training + fine-tuning.
COMPONENT_SETS = {
    PipelineKind.FULLY_SUPERVISED: frozenset({1}),
    PipelineKind.TRANSFORMATION_DISCRIMINATION: frozenset({0, 1}),
    PipelineKind.SELF_TRAINING: frozenset({1, 2, 4}),
    PipelineKind.TRANSFORMATION_KNOWLEDGE_DISTILLATION: frozenset({0, 1, 2, 4}),
    PipelineKind.SELFHAR: frozenset({1, 2, 3, 4}),
}


@dataclass(frozen=True)
class SelectionPolicy:
    confidence_threshold: float = 0.5
    per_class_cap: int = 10000
    allow_multiclass_selection: bool = False

    def __post_init__(self):
        if not 0.0 < self.confidence_threshold <= 1.0:
            raise ConfigurationError("confidence_threshold must be in (0, 1]")
        if self.per_class_cap < 1:
            raise ConfigurationError("per_class_cap must be >= 1")


@dataclass(frozen=True)
class TrainingSchedule:
    teacher_epochs: int = 30
    pretrain_epochs: int = 30
    finetune_epochs: int = 30
    batch_size: int = 64
    patience: int = 5
    learning_rate: float = 0.0003
    pretrain_learning_rate: float | None = None  # defaults to learning_rate

    def __post_init__(self):
        for name in ("teacher_epochs", "pretrain_epochs", "finetune_epochs"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be >= 1")
        if self.batch_size < 1:
            raise ConfigurationError("batch_size must be >= 1")
        if self.patience < 1:
            raise ConfigurationError("patience must be >= 1")
        if self.learning_rate <= 0:
            raise ConfigurationError("learning_rate must be > 0")
        if self.pretrain_learning_rate is not None and self.pretrain_learning_rate <= 0:
            raise ConfigurationError("pretrain_learning_rate must be > 0")


@dataclass(frozen=True)
class PipelineConfig:
    kind: PipelineKind = PipelineKind.SELFHAR
    selection: SelectionPolicy = SelectionPolicy()
    schedule: TrainingSchedule = TrainingSchedule()
    transforms: TransformParams = TransformParams()
    arch: md.Architecture = md.Architecture()
    seed: int = 0
    reinit_har_head: bool = False
    pretrain_l2: float = 0.0001
    n_resamples: int = evalkit.DEFAULT_RESAMPLES

    def __post_init__(self):
        # accept the plain string form as well
        object.__setattr__(self, "kind", PipelineKind(self.kind))

    def components(self):
        return COMPONENT_SETS[self.kind]

    def to_dict(self):
        return {
            "kind": self.kind.value,
            "selection": asdict(self.selection),
            "schedule": asdict(self.schedule),
            "transforms": self.transforms.to_dict(),
            "architecture": self.arch.to_dict(),
            "seed": self.seed,
            "reinit_har_head": self.reinit_har_head,
            "pretrain_l2": self.pretrain_l2,
            "n_resamples": self.n_resamples,
        }

    @classmethod
    def from_dict(cls, data):
        return cls(
            kind=PipelineKind(data.get("kind", "selfhar")),
            selection=SelectionPolicy(**data.get("selection", {})),
            schedule=TrainingSchedule(**data.get("schedule", {})),
            transforms=TransformParams(**data.get("transforms", {})),
            arch=md.Architecture.from_dict(data["architecture"])
            if "architecture" in data else md.Architecture(),
            seed=data.get("seed", 0),
            reinit_har_head=data.get("reinit_har_head", False),
            pretrain_l2=data.get("pretrain_l2", 0.0001),
            n_resamples=data.get("n_resamples", evalkit.DEFAULT_RESAMPLES),
        )


@dataclass
class EpochRecord:
    stage: str
    epoch: int
    train_loss: float
    val_loss: float

    def row(self):
        return [self.stage, self.epoch, f"{self.train_loss:.9g}", f"{self.val_loss:.9g}"]


@dataclass
class RunResult:
    final: md.ModelParameters
    report: evalkit.MetricsReport
    history: list
    teacher: md.ModelParameters | None = None
    student: md.ModelParameters | None = None
    selection_stats: list | None = None
    config: PipelineConfig | None = None


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

def _minibatch_train(params, x, har, td, val_x, val_har, val_td, epochs, schedule,
                     seed, reg, stage, learning_rate=None):
    """Shared Adam loop: shuffle each epoch, snapshot at minimum validation loss."""
    state = nd.AdamState.for_params(
        params, learning_rate=learning_rate or schedule.learning_rate)
    rng = np.random.default_rng([seed, 0])
    dropout_rng = np.random.default_rng([seed, 1])
    history = []
    best_loss = np.inf
    best_params = params.copy()
    best_epoch = -1
    n = x.shape[0]
    for epoch in range(epochs):
        order = rng.permutation(n)
        losses = []
        for start in range(0, n, schedule.batch_size):
            idx = order[start:start + schedule.batch_size]
            loss, grads, _ = md.forward_backward(
                params, x[idx],
                har_targets=None if har is None else har[idx],
                td_targets=None if td is None else td[idx],
                reg=reg, training=True, rng=dropout_rng)
            nd.adam_step(params, grads, state)
            losses.append(loss)
        val_loss, _ = md.evaluate_loss(params, val_x, har_targets=val_har,
                                       td_targets=val_td, reg=reg)
        history.append(EpochRecord(stage=stage, epoch=epoch,
                                   train_loss=float(np.mean(losses)),
                                   val_loss=float(val_loss)))
        if val_loss < best_loss:
            best_loss = val_loss
            best_params = params.copy()
            best_epoch = epoch
        elif epoch - best_epoch >= schedule.patience:
            break
    return best_params, history


def _har_targets(dataset):
    """Soft labels when present, otherwise one-hot from hard labels."""
    if dataset.soft_labels is not None:
        return dataset.soft_labels
    return dataset.one_hot_labels()


def train_supervised(params, train, validation, schedule, epochs=None, seed=0,
                     reg=nd.RegularizationConfig(l2_factor=0.0), stage="supervised"):
    """Minibatch cross-entropy training with per-epoch validation snapshots."""
    if len(train) == 0 or len(validation) == 0:
        raise ConfigurationError("train and validation sets must be non-empty")
    if epochs is None:
        epochs = schedule.finetune_epochs
    if epochs < 1:
        raise ConfigurationError("epochs must be >= 1")
    return _minibatch_train(
        params, train.values, _har_targets(train), None,
        validation.values, _har_targets(validation), None,
        epochs, schedule, seed, reg, stage)


# ---------------------------------------------------------------------------
# self-labeling and selection
# ---------------------------------------------------------------------------

def self_label_and_select(teacher, mixed, policy):
    """Teacher labels the mixed pool; confidence filter + per-class top-K.

    Windows are ranked per class by the teacher's softmax score; by default a
    window may only be selected for its argmax class. The full softmax vector
    is kept as the soft activity label. Returns (selected Dataset, stats),
    where stats has one row per class with selected count and confidence
    quantiles.
    """
    k = len(mixed.label_vocabulary)
    if teacher.num_classes != k:
        raise DimensionError(
            f"teacher outputs {teacher.num_classes} classes, vocabulary has {k}")
    probs = md.predict_har(teacher, mixed.values)
    assigned = probs.argmax(axis=1)
    picked = []
    stats = []
    for c in range(k):
        scores = probs[:, c]
        if policy.allow_multiclass_selection:
            eligible = np.where(scores >= policy.confidence_threshold)[0]
        else:
            eligible = np.where((assigned == c)
                                & (scores >= policy.confidence_threshold))[0]
        # stable sort on negated scores: descending, index tie-break
        order = eligible[np.argsort(-scores[eligible], kind="stable")]
        chosen = order[:policy.per_class_cap]
        picked.append(chosen)
        chosen_scores = scores[chosen]
        stats.append({
            "class": mixed.label_vocabulary[c],
            "selected": int(len(chosen)),
            "confidence_min": float(chosen_scores.min()) if len(chosen) else 0.0,
            "confidence_median": float(np.median(chosen_scores)) if len(chosen) else 0.0,
            "confidence_max": float(chosen_scores.max()) if len(chosen) else 0.0,
        })
    indices = np.sort(np.concatenate(picked)) if picked else np.zeros(0, np.int64)
    selected = mixed.subset(indices, role="S")
    selected.soft_labels = probs[indices]
    return selected, stats


# ---------------------------------------------------------------------------
# pre-training and fine-tuning
# ---------------------------------------------------------------------------

def _split_blocks(n_records, block=9, fraction=0.1, seed=0):
    """Hold out whole 9-record augmentation blocks for validation."""
    n_blocks = n_records // block
    rng = np.random.default_rng([seed, 2])
    n_val = max(1, int(round(fraction * n_blocks))) if n_blocks > 1 else 0
    val_blocks = set(rng.choice(n_blocks, size=n_val, replace=False).tolist()) \
        if n_val else set()
    val_idx, train_idx = [], []
    for b in range(n_blocks):
        rows = range(block * b, block * (b + 1))
        (val_idx if b in val_blocks else train_idx).extend(rows)
    return np.array(train_idx, np.int64), np.array(val_idx, np.int64)


def pretrain_student(student, d_prime, schedule, seed=0, l2=0.0001, stage="pretrain"):
    """Multi-task pre-training on the nine-way dataset.

    The combined objective sums the soft-label activity loss (when the model
    has an activity head), the eight transformation losses, and the L2 term.
    """
    if d_prime.transform_labels is None:
        raise DataError("pre-training dataset lacks transformation labels")
    if np.any(d_prime.transform_labels.sum(axis=1) > 1):
        raise DataError("a record carries more than one transformation flag")
    use_har = student.head_kind == "har"
    if use_har and d_prime.soft_labels is None:
        raise DataError("activity-head pre-training requires soft labels")

    train_idx, val_idx = _split_blocks(len(d_prime), seed=seed)
    if len(val_idx) == 0:  # too few blocks to hold any out: validate on train
        train_idx = np.arange(len(d_prime))
        val_idx = train_idx
    reg = nd.RegularizationConfig(l2_factor=l2)
    har = d_prime.soft_labels if use_har else None
    td = d_prime.transform_labels.astype(np.float64)
    return _minibatch_train(
        student,
        d_prime.values[train_idx],
        None if har is None else har[train_idx],
        td[train_idx],
        d_prime.values[val_idx],
        None if har is None else har[val_idx],
        td[val_idx],
        schedule.pretrain_epochs, schedule, seed, reg, stage,
        learning_rate=schedule.pretrain_learning_rate)


def finetune_student(student, train, validation, schedule, seed=0,
                     reinit_har_head=False):
    """Detach transformation heads, keep or refresh the activity head, freeze
    the first two conv layers, and train on the labeled data.

    The result has exactly the parameter count of a plain activity model.
    """
    num_classes = len(train.label_vocabulary)
    final = md.build_har_model(num_classes, seed=seed, arch=student.arch)
    md.transfer_core(student, final)
    if student.head_kind == "har" and not reinit_har_head:
        for name in ("har_hidden/W", "har_hidden/b", "har_out/W", "har_out/b"):
            final.tensors[name] = student.tensors[name].copy()
    md.freeze_for_finetune(final)
    return train_supervised(final, train, validation, schedule,
                            epochs=schedule.finetune_epochs, seed=seed,
                            stage="finetune")


# ---------------------------------------------------------------------------
# full configurations
# ---------------------------------------------------------------------------

def _stage_seeds(seed):
    ss = np.random.SeedSequence(seed)
    names = ("teacher", "selection", "augmentation", "pretrain", "finetune", "init")
    return dict(zip(names, (int(c.generate_state(1)[0]) for c in ss.spawn(len(names)))))


def build_mixed_pool(train, unlabeled):
    """W: labeled training windows with labels stripped, merged with U."""
    parts = [train.strip_labels()]
    if unlabeled is not None and len(unlabeled) > 0:
        parts.append(unlabeled.strip_labels())
    return datakit.Dataset.concatenate(parts, role="W")


def run_configuration(config, train, validation, test, unlabeled=None,
                      out_dir=None):
    """Execute one full configuration and evaluate on the held-out test users.

    ``train``/``validation``/``test`` come from a user-held-out split;
    ``unlabeled`` is required for every configuration except fully supervised.
    """
    kind = config.kind
    if kind != PipelineKind.FULLY_SUPERVISED and (unlabeled is None
                                                  or len(unlabeled) == 0):
        raise ConfigurationError(f"configuration '{kind.value}' requires unlabeled data")
    num_classes = len(train.label_vocabulary)
    seeds = _stage_seeds(config.seed)
    schedule = config.schedule
    transforms = TransformParams(**{**config.transforms.to_dict(),
                                    "seed": seeds["augmentation"]})
    history = []
    teacher = None
    student = None
    stats = None

    def supervised_teacher():
        params = md.build_har_model(num_classes, seed=seeds["init"], arch=config.arch)
        best, h = train_supervised(params, train, validation, schedule,
                                   epochs=schedule.teacher_epochs,
                                   seed=seeds["teacher"], stage="teacher")
        history.extend(h)
        return best

    def td_pretrained_core(pool):
        d_prime = signals.build_multitask_dataset(pool, transforms,
                                                  require_soft_labels=False)
        params = md.build_td_model(seed=seeds["init"], arch=config.arch)
        best, h = pretrain_student(params, d_prime, schedule,
                                   seed=seeds["pretrain"], l2=config.pretrain_l2,
                                   stage="td_pretrain")
        history.extend(h)
        return best

    if kind == PipelineKind.FULLY_SUPERVISED:
        final = supervised_teacher()

    elif kind == PipelineKind.TRANSFORMATION_DISCRIMINATION:
        pool = build_mixed_pool(train, unlabeled)
        student = td_pretrained_core(pool)
        final, h = finetune_student(student, train, validation, schedule,
                                    seed=seeds["finetune"], reinit_har_head=True)
        history.extend(h)

    else:
        if kind == PipelineKind.TRANSFORMATION_KNOWLEDGE_DISTILLATION:
            pool = build_mixed_pool(train, unlabeled)
            td_core = td_pretrained_core(pool)
            teacher, h = finetune_student(td_core, train, validation, schedule,
                                          seed=seeds["teacher"],
                                          reinit_har_head=True)
            history.extend(h)
        else:
            teacher = supervised_teacher()

        mixed = build_mixed_pool(train, unlabeled)
        selected, stats = self_label_and_select(teacher, mixed, config.selection)

        if len(selected) < 2:
            # teacher too uncertain to select anything usable: fall back to
            # fine-tuning a fresh model on the labeled data alone
            student = md.build_har_model(num_classes, seed=seeds["init"],
                                         arch=config.arch)
        elif kind == PipelineKind.SELFHAR:
            d_prime = signals.build_multitask_dataset(selected, transforms)
            student = md.build_multitask_model(num_classes, seed=seeds["init"],
                                               arch=config.arch)
            student, h = pretrain_student(student, d_prime, schedule,
                                          seed=seeds["pretrain"],
                                          l2=config.pretrain_l2)
            history.extend(h)
        else:  # self_training / t-kd students learn from soft labels only
            student = md.build_har_model(num_classes, seed=seeds["init"],
                                         arch=config.arch)
            s_train, s_val = _student_har_split(selected, seeds["pretrain"])
            student, h = train_supervised(student, s_train, s_val, schedule,
                                          epochs=schedule.pretrain_epochs,
                                          seed=seeds["pretrain"],
                                          stage="student_har")
            history.extend(h)

        final, h = finetune_student(student, train, validation, schedule,
                                    seed=seeds["finetune"],
                                    reinit_har_head=config.reinit_har_head)
        history.extend(h)

    report = evalkit.evaluate_model(final, test, n_resamples=config.n_resamples,
                                    seed=config.seed)
    result = RunResult(final=final, report=report, history=history,
                       teacher=teacher, student=student, selection_stats=stats,
                       config=config)
    if out_dir is not None:
        write_run_artifacts(result, out_dir)
    return result


def _student_har_split(selected, seed, fraction=0.1):
    """Hold out a slice of the selected set to early-stop HAR-only students."""
    n = len(selected)
    rng = np.random.default_rng([seed, 3])
    n_val = max(1, int(round(fraction * n)))
    val = np.sort(rng.choice(n, size=n_val, replace=False))
    mask = np.zeros(n, dtype=bool)
    mask[val] = True
    s_val = selected.subset(np.where(mask)[0])
    s_train = selected.subset(np.where(~mask)[0])
    if len(s_train) == 0:
        return s_val, s_val
    return s_train, s_val


def write_run_artifacts(result, out_dir):
    """Emit the run directory: config, weights, selection stats, history, report."""
    os.makedirs(out_dir, exist_ok=True)
    if result.config is not None:
        with open(os.path.join(out_dir, "config.json"), "w", encoding="utf-8") as fh:
            json.dump(result.config.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")
    if result.teacher is not None:
        md.save_weights(result.teacher, os.path.join(out_dir, "teacher.weights"))
    if result.student is not None:
        md.save_weights(result.student, os.path.join(out_dir, "student.weights"))
    md.save_weights(result.final, os.path.join(out_dir, "final.weights"))
    if result.selection_stats is not None:
        with open(os.path.join(out_dir, "selection_stats.csv"), "w", newline="",
                  encoding="utf-8") as fh:
            writer = csv.DictWriter(fh, fieldnames=list(result.selection_stats[0]))
            writer.writeheader()
            writer.writerows(result.selection_stats)
    with open(os.path.join(out_dir, "history.csv"), "w", newline="",
              encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["stage", "epoch", "train_loss", "val_loss"])
        writer.writerows(rec.row() for rec in result.history)
    with open(os.path.join(out_dir, "report.json"), "w", encoding="utf-8") as fh:
        json.dump(result.report.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    return out_dir


# ---------------------------------------------------------------------------
# limited-label sweep
# ---------------------------------------------------------------------------

SWEEP_KINDS = (PipelineKind.FULLY_SUPERVISED,
               PipelineKind.TRANSFORMATION_DISCRIMINATION,
               PipelineKind.SELFHAR)


def _limited_split(train, n_per_class, seed):
    """Subsample n per class, then carve a per-class validation slice out of
    the subsample so no labels beyond the budget leak into early stopping."""
    sub = datakit.subsample_labeled(train, n_per_class, seed=seed)
    rng = np.random.default_rng([seed, 4])
    val_mask = np.zeros(len(sub), dtype=bool)
    for c in range(len(sub.label_vocabulary)):
        members = np.where(sub.labels == c)[0]
        n_val = max(1, int(round(0.2 * len(members)))) if len(members) > 1 else 0
        if n_val:
            val_mask[rng.choice(members, size=n_val, replace=False)] = True
    return sub.subset(np.where(~val_mask)[0]), sub.subset(np.where(val_mask)[0])


def limited_data_sweep(config, train, test, unlabeled, n_per_class_list, seeds,
                       kinds=SWEEP_KINDS):
    """Label-availability sweep: for each budget and seed run each configuration
    on a fresh subsample and score against the one fixed test set.

    Returns one row per (budget, configuration) with per-seed weighted F1
    scores plus their mean and standard deviation.
    """
    rows = []
    for n in n_per_class_list:
        for kind in kinds:
            scores = []
            for seed in seeds:
                sub_train, sub_val = _limited_split(train, n, seed)
                cell_config = PipelineConfig(
                    kind=kind, selection=config.selection,
                    schedule=config.schedule, transforms=config.transforms,
                    arch=config.arch, seed=seed,
                    reinit_har_head=config.reinit_har_head,
                    pretrain_l2=config.pretrain_l2,
                    n_resamples=config.n_resamples)
                result = run_configuration(cell_config, sub_train, sub_val, test,
                                           unlabeled=unlabeled)
                scores.append(result.report.weighted_f1)
            rows.append({
                "n_per_class": n,
                "kind": kind.value,
                "scores": scores,
                "mean": float(np.mean(scores)),
                "std": float(np.std(scores)),
            })
    return rows
