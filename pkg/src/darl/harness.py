"""Experiment harness: ladder, budget sweep, and calibration-effect runs.

One ``ExperimentConfig`` fixes everything a seed run needs; ``prepare`` does
the shared work (corpus, pretrained backbone, selector calibration, pool
selection) once per seed and caches it, so the ablation ladder, the budget
sweep, and the calibration-effect report all reuse the same artifacts.

Pool rows are split once per seed into a selection split and a held-out
evaluation split; shifted-distribution validation and test sets are carved
from the evaluation split's true out-of-distribution rows, so no row ever
serves both selection and evaluation.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np

from . import __version__
from .dataset import (
    LabeledDataset,
    Origin,
    SyntheticConfig,
    SyntheticCorpus,
    generate_pretrain_superset,
    generate_synthetic,
    merge_datasets,
)
from .errors import ConfigError, DataFormatError
from .lpft import (
    AlphaSweepResult,
    StagePlan,
    _dataset_arrays,
    alpha_sweep,
    full_finetune,
    linear_probe,
    pretrain_backbone,
    run_training,
)
from .metrics import Metrics, compute_metrics, fit_grade_thresholds, score_histogram, wr_mid_fraction
from .model import CalibrationPrior, ModelParams, interpolate, predict_scores, representations
from .ood_select import (
    GaussianStats,
    NeighborIndex,
    OodThresholds,
    SelectionReport,
    ThresholdPolicy,
    build_index,
    calibrate_thresholds,
    dasa_order,
    fit_gaussian,
    knn_distance_batch,
    mahalanobis_batch,
    select_ood,
)
from .util import config_hash, sub_rng

TREND_SEEDS = (11, 12, 13, 14, 15)
DEFAULT_BUDGETS = (0.25, 0.5, 0.75, 1.0)
LADDER_LABELS = ("base-ft", "+occ", "+occ+dasa", "+occ+dasa+lpft")


@dataclass(frozen=True)
class ExperimentConfig:
    """Seed-agnostic description of one experiment family.

    ``alpha_fpr`` here governs the selector used by the harness runs; it is
    deliberately looser than the conservative flagging default, trading a
    little selection precision for recall of the shifted rows that the
    augmentation stages feed on.
    """

    corpus: SyntheticConfig = SyntheticConfig()
    plan: StagePlan = StagePlan()
    rho: float = 0.1
    policy: ThresholdPolicy = ThresholdPolicy(mode="fpr", alpha_fpr=0.12)
    eval_fraction: float = 0.2

    def __post_init__(self) -> None:
        CalibrationPrior(self.rho)
        if not 0.0 < self.eval_fraction < 1.0:
            raise ConfigError("eval_fraction", "must lie strictly between 0 and 1")

    def for_seed(self, seed: int) -> "ExperimentConfig":
        return dataclasses.replace(
            self,
            corpus=dataclasses.replace(self.corpus, seed=int(seed)),
            plan=dataclasses.replace(self.plan, seed=int(seed)),
        )

    def prior(self) -> CalibrationPrior:
        return CalibrationPrior(self.rho)

    def descriptor(self) -> dict:
        return {
            "corpus": dataclasses.asdict(self.corpus),
            "plan": dataclasses.asdict(self.plan),
            "rho": self.rho,
            "policy": dataclasses.asdict(self.policy),
            "eval_fraction": self.eval_fraction,
        }


def table_header(config: ExperimentConfig, seeds) -> str:
    """The leading comment line every emitted table carries."""
    seed_list = ",".join(str(s) for s in seeds)
    return (
        f"darl {__version__} config {config_hash(config.descriptor())} "
        f"seeds {seed_list} (f1 = macro over SR/WR/IR)"
    )


@dataclass(frozen=True)
class PreparedCorpus:
    """Everything downstream stages share for one (config, seed) pair."""

    config: ExperimentConfig
    seed: int
    corpus: SyntheticCorpus
    backbone: ModelParams
    stats: GaussianStats
    index: NeighborIndex
    thresholds: OodThresholds
    select_truth: LabeledDataset
    val_ood: LabeledDataset
    test_ood: LabeledDataset
    report: SelectionReport
    d_aug: LabeledDataset


@lru_cache(maxsize=8)
def prepare(config: ExperimentConfig, seed: int) -> PreparedCorpus:
    """Generate, pretrain, calibrate, and select for one seed (cached)."""
    cfg = config.for_seed(seed)
    corpus = generate_synthetic(cfg.corpus)
    superset = generate_pretrain_superset(cfg.corpus)
    backbone, _ = pretrain_backbone(superset, cfg.plan)

    rep_train = representations(backbone, corpus.train_id.embeddings.data)
    rep_val = representations(backbone, corpus.val_id.embeddings.data)
    stats = fit_gaussian(rep_train)
    index = build_index(rep_train, corpus.train_id.ids)

    n_pool = corpus.pool_unlabeled.rows
    perm = sub_rng(seed, "pool-eval-split").permutation(n_pool)
    n_eval = int(round(config.eval_fraction * n_pool))
    eval_truth = corpus.pool_truth.take(perm[:n_eval])
    select_truth = corpus.pool_truth.take(perm[n_eval:])

    ood_rows = np.flatnonzero(eval_truth.origin == int(Origin.OOD))
    if ood_rows.size < 2:
        raise DataFormatError(
            "evaluation split holds fewer than 2 true out-of-distribution rows"
        )
    half = ood_rows.size // 2
    val_ood = eval_truth.take(ood_rows[:half])
    test_ood = eval_truth.take(ood_rows[half:])

    vm = mahalanobis_batch(stats, rep_val)
    vk = knn_distance_batch(index, rep_val)
    if config.policy.mode == "f1":
        rep_ood = representations(backbone, val_ood.embeddings.data)
        thresholds = calibrate_thresholds(
            vm, vk, config.policy,
            mahalanobis_batch(stats, rep_ood), knn_distance_batch(index, rep_ood),
        )
    else:
        thresholds = calibrate_thresholds(vm, vk, config.policy)

    rep_pool = representations(backbone, select_truth.embeddings.data)
    report = select_ood(rep_pool, stats, index, thresholds, ids=select_truth.ids)
    d_aug = select_truth.take(report.selected_indices)

    return PreparedCorpus(
        config=config,
        seed=seed,
        corpus=corpus,
        backbone=backbone,
        stats=stats,
        index=index,
        thresholds=thresholds,
        select_truth=select_truth,
        val_ood=val_ood,
        test_ood=test_ood,
        report=report,
        d_aug=d_aug,
    )


def train_single_stage(
    backbone: ModelParams,
    data: LabeledDataset,
    prior: CalibrationPrior | None,
    plan: StagePlan,
    stage: str = "single-stage",
    epochs: int | None = None,
    lr: float | None = None,
) -> ModelParams:
    """One all-parameter training pass from the pretrained backbone.

    This is the non-staged counterpart of probe-then-finetune: a fresh zero
    head plus the backbone, trained jointly.  Defaults to the plan's
    fine-tune budget, so ladder rungs 1-3 differ from rung 4 only by the
    probe stage and the blend.
    """
    x, grades = _dataset_arrays(data)
    params, _ = run_training(
        backbone, x, grades, prior,
        epochs=plan.ft_epochs if epochs is None else epochs,
        lr=plan.ft_lr if lr is None else lr,
        trainable="all",
        batch_size=plan.batch_size, seed=plan.seed, stage=stage,
    )
    return params


@dataclass(frozen=True)
class EvalPair:
    """ID and shifted-set metrics for one model under one threshold fit."""

    id_metrics: Metrics
    ood_metrics: Metrics

    @property
    def f1_id(self) -> float:
        return self.id_metrics.macro_f1

    @property
    def f1_ood(self) -> float:
        return self.ood_metrics.macro_f1


def evaluate_model(
    model: ModelParams,
    val_id: LabeledDataset,
    test_id: LabeledDataset,
    test_ood: LabeledDataset,
) -> EvalPair:
    """Fit grade thresholds on ID validation, report on both test sets."""
    val_scores = predict_scores(model, val_id.embeddings.data)
    thresholds = fit_grade_thresholds(val_scores, val_id.grades)
    id_metrics = compute_metrics(
        predict_scores(model, test_id.embeddings.data), test_id.grades, thresholds
    )
    ood_metrics = compute_metrics(
        predict_scores(model, test_ood.embeddings.data), test_ood.grades, thresholds
    )
    return EvalPair(id_metrics=id_metrics, ood_metrics=ood_metrics)


@lru_cache(maxsize=8)
def ladder_models(
    config: ExperimentConfig, seed: int
) -> tuple[tuple[ModelParams, ...], AlphaSweepResult]:
    """The four ladder configurations, trained once per seed (cached).

    Rung 1 trains on ID data alone without the calibration term, using the
    plan's fine-tune budget; rung 2 adds the term; rung 3 adds the selected
    augmentation rows; rung 4 keeps rung 3's data and loss but replaces the
    single stage with probe, fine-tune, and the validation-chosen blend.
    """
    prep = prepare(config, seed)
    plan = config.for_seed(seed).plan
    prior = config.prior()
    train_id = prep.corpus.train_id
    merged = merge_datasets(train_id, prep.d_aug)

    row1 = train_single_stage(prep.backbone, train_id, None, plan)
    row2 = train_single_stage(prep.backbone, train_id, prior, plan)
    row3 = train_single_stage(prep.backbone, merged, prior, plan)
    phi_lp, _ = linear_probe(prep.backbone, merged, prior, plan)
    phi_ft, _ = full_finetune(phi_lp, merged, prior, plan)
    sweep = alpha_sweep(phi_lp, phi_ft, plan.alpha_grid, prep.corpus.val_id, prep.val_ood)
    row4 = interpolate(phi_lp, phi_ft, sweep.best_alpha)
    return (row1, row2, row3, row4), sweep


@dataclass(frozen=True)
class AblationRow:
    rung: int
    label: str
    f1_id: float
    f1_ood: float
    acc_id: float
    acc_ood: float


@dataclass(frozen=True)
class AblationTable:
    seed: int
    rows: tuple[AblationRow, ...]
    best_alpha: float


def run_ablation(config: ExperimentConfig, seed: int) -> AblationTable:
    """Train and evaluate the four-rung ladder for one seed."""
    prep = prepare(config, seed)
    models, sweep = ladder_models(config, seed)
    rows = []
    for rung, (label, model) in enumerate(zip(LADDER_LABELS, models), start=1):
        pair = evaluate_model(
            model, prep.corpus.val_id, prep.corpus.test_id, prep.test_ood
        )
        rows.append(
            AblationRow(
                rung=rung,
                label=label,
                f1_id=pair.f1_id,
                f1_ood=pair.f1_ood,
                acc_id=pair.id_metrics.accuracy,
                acc_ood=pair.ood_metrics.accuracy,
            )
        )
    return AblationTable(seed=seed, rows=tuple(rows), best_alpha=sweep.best_alpha)


def write_ablation_tables(
    tables, path, config: ExperimentConfig
) -> None:
    """Long-format ladder TSV: per-seed rows followed by mean rows."""
    tables = list(tables)
    seeds = [t.seed for t in tables]
    lines = [f"# {table_header(config, seeds)}"]
    lines.append("seed\trung\tlabel\tf1_id\tf1_ood\tacc_id\tacc_ood")
    for t in tables:
        for r in t.rows:
            lines.append(
                f"{t.seed}\t{r.rung}\t{r.label}\t{r.f1_id:.4f}\t{r.f1_ood:.4f}"
                f"\t{r.acc_id:.4f}\t{r.acc_ood:.4f}"
            )
    for rung in range(len(LADDER_LABELS)):
        rows = [t.rows[rung] for t in tables]
        lines.append(
            f"mean\t{rung + 1}\t{rows[0].label}"
            f"\t{np.mean([r.f1_id for r in rows]):.4f}"
            f"\t{np.mean([r.f1_ood for r in rows]):.4f}"
            f"\t{np.mean([r.acc_id for r in rows]):.4f}"
            f"\t{np.mean([r.acc_ood for r in rows]):.4f}"
        )
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


@dataclass(frozen=True)
class BudgetRow:
    budget: float
    strategy: str
    n_aug: int
    f1_id: float
    f1_ood: float


def budget_sweep(
    config: ExperimentConfig,
    seed: int,
    budgets=DEFAULT_BUDGETS,
    strategies=("dasa", "random"),
) -> tuple[BudgetRow, ...]:
    """Equal-budget comparison of ranked selection against random draws.

    Budgets are fractions of the selected-set size.  The ranked strategy
    fills its budget by the weaker-rank ordering within the selected set;
    the random strategy draws the same number of rows uniformly from the
    whole selection split (nested across budgets), so both strategies add
    equally many rows and differ only in which rows.
    """
    prep = prepare(config, seed)
    plan = config.for_seed(seed).plan
    prior = config.prior()
    sel = prep.report.selected_indices
    if sel.size == 0:
        raise DataFormatError("selection is empty; nothing to sweep")
    n_pool = prep.select_truth.rows
    ranked = sel[dasa_order(prep.report.mahal[sel], prep.report.knn[sel])]
    random_order = sub_rng(seed, "budget-random").permutation(n_pool)

    rows = []
    for budget in budgets:
        b = float(budget)
        if b < 0.0:
            raise ConfigError("budgets", "must be nonnegative")
        take = int(round(b * sel.size))
        if take > n_pool:
            raise DataFormatError(
                f"budget {b:g} asks for {take} rows but the pool has {n_pool}"
            )
        for strategy in strategies:
            if strategy == "dasa":
                picked = ranked[: min(take, ranked.size)]
            elif strategy == "random":
                picked = random_order[:take]
            else:
                raise ConfigError("strategies", f"unknown strategy {strategy!r}")
            d_aug = prep.select_truth.take(picked)
            merged = merge_datasets(prep.corpus.train_id, d_aug)
            model = train_single_stage(
                prep.backbone, merged, prior, plan, stage="budget"
            )
            pair = evaluate_model(
                model, prep.corpus.val_id, prep.corpus.test_id, prep.test_ood
            )
            rows.append(
                BudgetRow(
                    budget=b,
                    strategy=strategy,
                    n_aug=int(picked.size),
                    f1_id=pair.f1_id,
                    f1_ood=pair.f1_ood,
                )
            )
    return tuple(rows)


def write_budget_table(rows_by_seed: dict, path, config: ExperimentConfig) -> None:
    """Long-format sweep TSV: per-seed rows followed by mean rows."""
    seeds = sorted(rows_by_seed)
    lines = [f"# {table_header(config, seeds)}"]
    lines.append("seed\tbudget\tstrategy\tn_aug\tf1_id\tf1_ood")
    for seed in seeds:
        for r in rows_by_seed[seed]:
            lines.append(
                f"{seed}\t{r.budget:g}\t{r.strategy}\t{r.n_aug}"
                f"\t{r.f1_id:.4f}\t{r.f1_ood:.4f}"
            )
    first = rows_by_seed[seeds[0]]
    for i, template in enumerate(first):
        group = [rows_by_seed[s][i] for s in seeds]
        lines.append(
            f"mean\t{template.budget:g}\t{template.strategy}"
            f"\t{int(np.mean([r.n_aug for r in group]))}"
            f"\t{np.mean([r.f1_id for r in group]):.4f}"
            f"\t{np.mean([r.f1_ood for r in group]):.4f}"
        )
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


@dataclass(frozen=True)
class OccEffect:
    """Score-shape statistics with and without the calibration term."""

    seed: int
    overlap_with: float
    overlap_without: float
    wr_mid_with: float
    wr_mid_without: float

    @property
    def overlap_drop(self) -> float:
        return self.overlap_without - self.overlap_with

    @property
    def wr_mid_gain(self) -> float:
        return self.wr_mid_with - self.wr_mid_without


@lru_cache(maxsize=8)
def _occ_models(config: ExperimentConfig, seed: int) -> tuple[ModelParams, ModelParams]:
    """A matched pair differing only in the calibration term.

    Trained on the probe stage's larger budget rather than the ladder's
    fine-tune budget: the score-shape comparison needs converged scorers,
    otherwise both shapes are dominated by undertraining.
    """
    prep = prepare(config, seed)
    plan = config.for_seed(seed).plan
    train_id = prep.corpus.train_id
    without = train_single_stage(
        prep.backbone, train_id, None, plan,
        stage="occ", epochs=plan.lp_epochs, lr=plan.lp_lr,
    )
    with_term = train_single_stage(
        prep.backbone, train_id, config.prior(), plan,
        stage="occ", epochs=plan.lp_epochs, lr=plan.lp_lr,
    )
    return without, with_term


def occ_effect(config: ExperimentConfig, seed: int, bins: int = 40) -> OccEffect:
    """Compare matched KL-off and KL-on score shapes on the ID test split."""
    prep = prepare(config, seed)
    model_without, model_with = _occ_models(config, seed)
    x = prep.corpus.test_id.embeddings.data
    grades = prep.corpus.test_id.grades
    without = predict_scores(model_without, x)
    with_term = predict_scores(model_with, x)
    return OccEffect(
        seed=seed,
        overlap_with=score_histogram(with_term, grades, bins).overlap_wr_sr,
        overlap_without=score_histogram(without, grades, bins).overlap_wr_sr,
        wr_mid_with=wr_mid_fraction(with_term, grades),
        wr_mid_without=wr_mid_fraction(without, grades),
    )
