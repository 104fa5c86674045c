"""Staged training: backbone pretraining, linear probe, fine-tune, blend.

The probe trains only the head on top of frozen pretrained features; the
fine-tune stage unlocks everything from that warm start; the deployed model
is a linear blend of the two checkpoints.  A sweep over the blend
coefficient picks the best trade-off on validation data.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .dataset import LabeledDataset
from .errors import CheckpointError, ConfigError, DataFormatError
from .metrics import compute_metrics, fit_grade_thresholds
from .model import (
    CalibrationPrior,
    LossValues,
    ModelArch,
    ModelParams,
    adam_step,
    init_model,
    init_opt,
    interpolate,
    loss_and_grad,
    predict_scores,
)
from .util import sub_rng

DEFAULT_ALPHA_GRID = tuple(round(0.1 * i, 1) for i in range(11))


@dataclass(frozen=True)
class StagePlan:
    """Epoch/learning-rate budgets for the three stages plus the sweep grid.

    Fine-tuning may be skipped outright with ft_epochs=0, in which case the
    fine-tuned checkpoint equals the probe checkpoint.
    """

    pretrain_epochs: int = 30
    pretrain_lr: float = 1e-3
    lp_epochs: int = 30
    lp_lr: float = 5e-4
    ft_epochs: int = 15
    ft_lr: float = 1e-4
    batch_size: int = 64
    alpha_grid: tuple[float, ...] = DEFAULT_ALPHA_GRID
    head_boost: float = 4.0
    seed: int = 7

    def __post_init__(self) -> None:
        object.__setattr__(self, "alpha_grid", tuple(float(a) for a in self.alpha_grid))
        if self.pretrain_epochs < 1:
            raise ConfigError("pretrain_epochs", "must be >= 1")
        if self.lp_epochs < 1:
            raise ConfigError("lp_epochs", "must be >= 1")
        if self.ft_epochs < 0:
            raise ConfigError("ft_epochs", "must be >= 0")
        for name in ("pretrain_lr", "lp_lr", "ft_lr"):
            if getattr(self, name) <= 0:
                raise ConfigError(name, "must be positive")
        if self.batch_size < 1:
            raise ConfigError("batch_size", "must be >= 1")
        if self.head_boost <= 0:
            raise ConfigError("head_boost", "must be positive")
        grid = self.alpha_grid
        if not grid:
            raise ConfigError("alpha_grid", "must be nonempty")
        if any(not (0.0 <= a <= 1.0) for a in grid):
            raise ConfigError("alpha_grid", "values must lie in [0, 1]")
        if list(grid) != sorted(set(grid)):
            raise ConfigError("alpha_grid", "values must be sorted and unique")


def _dataset_arrays(dataset: LabeledDataset) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(dataset.embeddings.data, dtype=np.float64)
    return x, dataset.grades


def run_training(
    params: ModelParams,
    x: np.ndarray,
    grades: np.ndarray,
    prior: CalibrationPrior | None,
    epochs: int,
    lr: float,
    trainable: str,
    batch_size: int,
    seed: int,
    stage: str,
) -> tuple[ModelParams, list[LossValues]]:
    """Seeded minibatch Adam loop; returns final params and per-epoch loss.

    Batch order is a fresh seeded permutation per epoch; the trace entry for
    an epoch is the size-weighted mean of its batch losses.
    """
    if x.shape[0] == 0:
        raise DataFormatError(f"stage {stage!r} received an empty dataset")
    opt = init_opt(params.arch, lr=lr, trainable=trainable)
    rng = sub_rng(seed, "batch-order", stage)
    n = x.shape[0]
    trace: list[LossValues] = []
    for _ in range(epochs):
        perm = rng.permutation(n)
        total = np.zeros(3)
        for start in range(0, n, batch_size):
            take = perm[start : start + batch_size]
            values, grad = loss_and_grad(
                params, x[take], grades[take], prior, trainable=trainable
            )
            opt, params = adam_step(opt, params, grad)
            total += np.array(values) * take.size
        trace.append(LossValues(*(total / n)))
    return params, trace


def pretrain_backbone(
    superset: LabeledDataset,
    plan: StagePlan,
    arch: ModelArch | None = None,
) -> tuple[ModelParams, list[LossValues]]:
    """Supervised pretraining on the broad superset; head is discarded.

    Trains a fresh model end-to-end with plain cross-entropy, then zeroes
    the head slice: the returned checkpoint carries only backbone signal
    and later stages grow their own head.

    The throwaway head is scaled up by ``plan.head_boost`` at init.  With a
    small head the loss can only reach its operating logit scale by growing
    backbone features, which warps the representation geometry the
    distance-based selector depends on; a boosted head absorbs that scale
    instead, keeping representations close to the input geometry.
    """
    if arch is None:
        arch = ModelArch(input_dims=superset.embeddings.dims)
    if arch.input_dims != superset.embeddings.dims:
        raise ConfigError(
            "arch", f"input_dims {arch.input_dims} does not match superset "
            f"dims {superset.embeddings.dims}"
        )
    params = init_model(arch, plan.seed)
    boosted = params.values.copy()
    boosted[arch.backbone_count :] *= plan.head_boost
    params = params.replace_values(boosted)
    x, grades = _dataset_arrays(superset)
    params, trace = run_training(
        params, x, grades, prior=None,
        epochs=plan.pretrain_epochs, lr=plan.pretrain_lr, trainable="all",
        batch_size=plan.batch_size, seed=plan.seed, stage="pretrain",
    )
    values = params.values.copy()
    values[arch.backbone_count :] = 0.0
    return params.replace_values(values), trace


def linear_probe(
    theta: ModelParams,
    d_aug: LabeledDataset,
    prior: CalibrationPrior | None,
    plan: StagePlan,
) -> tuple[ModelParams, list[LossValues]]:
    """Head-only training on frozen backbone features.

    The backbone slice of the result is bitwise identical to ``theta``; the
    head starts from zero (the pretraining head was discarded) and is the
    only thing the optimizer touches.
    """
    if theta.arch.input_dims != d_aug.embeddings.dims:
        raise CheckpointError(
            f"backbone expects {theta.arch.input_dims}-dim inputs, dataset "
            f"has {d_aug.embeddings.dims}"
        )
    x, grades = _dataset_arrays(d_aug)
    phi_lp, trace = run_training(
        theta, x, grades, prior,
        epochs=plan.lp_epochs, lr=plan.lp_lr, trainable="head",
        batch_size=plan.batch_size, seed=plan.seed, stage="lp",
    )
    if not np.array_equal(phi_lp.backbone, theta.backbone):
        raise CheckpointError("probe stage modified frozen backbone weights")
    return phi_lp, trace


def full_finetune(
    phi_lp: ModelParams,
    d_aug: LabeledDataset,
    prior: CalibrationPrior | None,
    plan: StagePlan,
) -> tuple[ModelParams, list[LossValues]]:
    """All-parameter training warm-started at the probe checkpoint."""
    if phi_lp.arch.input_dims != d_aug.embeddings.dims:
        raise CheckpointError(
            f"checkpoint expects {phi_lp.arch.input_dims}-dim inputs, "
            f"dataset has {d_aug.embeddings.dims}"
        )
    if plan.ft_epochs == 0:
        return phi_lp.replace_values(phi_lp.values.copy()), []
    x, grades = _dataset_arrays(d_aug)
    return run_training(
        phi_lp, x, grades, prior,
        epochs=plan.ft_epochs, lr=plan.ft_lr, trainable="all",
        batch_size=plan.batch_size, seed=plan.seed, stage="ft",
    )


@dataclass(frozen=True)
class AlphaRow:
    alpha: float
    f1_id: float
    f1_ood: float
    acc_id: float
    acc_ood: float

    @property
    def combined(self) -> float:
        return 0.5 * (self.f1_id + self.f1_ood)


@dataclass(frozen=True)
class AlphaSweepResult:
    rows: tuple[AlphaRow, ...]
    best_alpha: float

    @property
    def best_row(self) -> AlphaRow:
        for row in self.rows:
            if row.alpha == self.best_alpha:
                return row
        raise KeyError(self.best_alpha)


def alpha_sweep(
    phi_lp: ModelParams,
    phi_ft: ModelParams,
    grid,
    val_id: LabeledDataset,
    val_ood: LabeledDataset,
) -> AlphaSweepResult:
    """Evaluate every blend coefficient on both validation sets.

    Grade thresholds are refit on the in-distribution validation scores at
    each grid point and applied unchanged to the shifted set.  The best
    coefficient maximizes the mean of the two macro F1 scores; ties go to
    the smaller coefficient.
    """
    grid = tuple(float(a) for a in grid)
    if not grid:
        raise ConfigError("alpha_grid", "must be nonempty")
    if val_id.embeddings.rows == 0 or val_ood.embeddings.rows == 0:
        raise DataFormatError("alpha sweep needs nonempty validation sets")
    x_id, g_id = _dataset_arrays(val_id)
    x_ood, g_ood = _dataset_arrays(val_ood)
    rows = []
    for alpha in grid:
        params = interpolate(phi_lp, phi_ft, alpha)
        scores_id = predict_scores(params, x_id)
        thresholds = fit_grade_thresholds(scores_id, g_id)
        m_id = compute_metrics(scores_id, g_id, thresholds)
        m_ood = compute_metrics(predict_scores(params, x_ood), g_ood, thresholds)
        rows.append(
            AlphaRow(
                alpha=alpha,
                f1_id=m_id.macro_f1,
                f1_ood=m_ood.macro_f1,
                acc_id=m_id.accuracy,
                acc_ood=m_ood.accuracy,
            )
        )
    best = max(rows, key=lambda r: (r.combined, -r.alpha))
    return AlphaSweepResult(rows=tuple(rows), best_alpha=best.alpha)


def write_alpha_table(result: AlphaSweepResult, path, meta: str = "") -> None:
    """Sweep table as TSV with 4-decimal metrics."""
    lines = []
    if meta:
        lines.append(f"# {meta}")
    lines.append("alpha\tf1_id\tf1_ood\tacc_id\tacc_ood")
    for row in result.rows:
        lines.append(
            f"{row.alpha:g}\t{row.f1_id:.4f}\t{row.f1_ood:.4f}\t"
            f"{row.acc_id:.4f}\t{row.acc_ood:.4f}"
        )
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
