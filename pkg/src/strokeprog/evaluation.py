"""Grouped-stratified cross-validation, metrics, and paired comparisons.

The splitter is a deterministic greedy assigner: groups are placed large-
and positive-first into the fold that keeps positive counts most even,
so each fold sees both classes whenever the data allows it. AUC is the
rank-based (Mann-Whitney) statistic with midranks for ties, and the paired
signed-rank test is exact (full sign enumeration) up to n = 20 differences.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import PipelineError
from .model import (
    OneClass,
    decision_scores,
    pca_fit,
    pca_transform,
    platt_fit,
    platt_probability,
    svm_fit,
)
from .tabular import FeatureVector, standardize_fit
from .util import fnv1a64, mean_sd

DEFAULT_FOLDS = 8
EXACT_WILCOXON_MAX_N = 20


class EvalError(PipelineError):
    pass


class TooFewGroups(EvalError):
    pass


class AllZeroDifferences(EvalError):
    pass


class FoldPlanMismatch(EvalError):
    pass


@dataclass(frozen=True)
class FoldPlan:
    folds: tuple[tuple[str, ...], ...]  # held-out group ids per fold
    seed: int

    @property
    def k(self) -> int:
        return len(self.folds)

    @property
    def plan_hash(self) -> int:
        canon = ";".join(",".join(sorted(f)) for f in self.folds)
        return fnv1a64(canon.encode("utf-8"))


def stratified_group_kfold(labels, groups, k: int = DEFAULT_FOLDS, seed: int = 0) -> FoldPlan:
    """Assign whole groups to k folds, balancing positive counts.

    Groups are sorted by (positive count desc, size desc, seeded tiebreak)
    and each goes to the fold minimizing the resulting spread of positive
    counts, then current fold size, then fold index.
    """
    labels = [int(v) for v in labels]
    groups = [str(g) for g in groups]
    if len(labels) != len(groups):
        raise EvalError("labels and groups must have equal length")
    if not any(v > 0 for v in labels) or not any(v <= 0 for v in labels):
        raise OneClass("stratified_group_kfold needs both classes present")

    stats: dict[str, list[int]] = {}
    order_seen: list[str] = []
    for lab, grp in zip(labels, groups):
        if grp not in stats:
            stats[grp] = [0, 0]  # positives, size
            order_seen.append(grp)
        stats[grp][0] += 1 if lab > 0 else 0
        stats[grp][1] += 1
    if len(stats) < k:
        raise TooFewGroups(f"{len(stats)} groups cannot fill {k} folds")

    rng = np.random.default_rng(np.random.PCG64(seed))
    tiebreak = {g: float(t) for g, t in zip(order_seen, rng.random(len(order_seen)))}
    ordered = sorted(order_seen, key=lambda g: (-stats[g][0], -stats[g][1], tiebreak[g]))

    fold_pos = [0] * k
    fold_size = [0] * k
    assignment: dict[str, int] = {}
    for g in ordered:
        g_pos, g_size = stats[g]
        best = None
        for f in range(k):
            pos_after = list(fold_pos)
            pos_after[f] += g_pos
            spread = max(pos_after) - min(pos_after)
            key = (spread, fold_size[f], f)
            if best is None or key < best[0]:
                best = (key, f)
        f = best[1]
        assignment[g] = f
        fold_pos[f] += g_pos
        fold_size[f] += g_size

    folds = [[] for _ in range(k)]
    for g in order_seen:
        folds[assignment[g]].append(g)
    return FoldPlan(folds=tuple(tuple(f) for f in folds), seed=seed)


def _midranks(values: np.ndarray) -> np.ndarray:
    order = np.argsort(values, kind="stable")
    ranks = np.empty(values.size, dtype=np.float64)
    sorted_vals = values[order]
    i = 0
    while i < values.size:
        j = i
        while j + 1 < values.size and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        ranks[order[i : j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def auc(scores, labels) -> float:
    """Mann-Whitney AUC with midranks; ties count one half."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    pos = labels > 0
    n_pos = int(np.sum(pos))
    n_neg = int(labels.size - n_pos)
    if n_pos == 0 or n_neg == 0:
        raise OneClass("auc needs both classes present")
    ranks = _midranks(scores)
    rank_sum = float(ranks[pos].sum())
    return (rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def accuracy_f1(predicted, labels) -> tuple[float, float]:
    """Accuracy and F1 of the positive class (0 when precision+recall is 0)."""
    predicted = np.asarray(predicted)
    labels = np.asarray(labels)
    if predicted.shape != labels.shape:
        raise EvalError("predicted and true labels must have equal length")
    acc = float(np.mean(predicted == labels))
    tp = int(np.sum((predicted > 0) & (labels > 0)))
    fp = int(np.sum((predicted > 0) & (labels <= 0)))
    fn = int(np.sum((predicted <= 0) & (labels > 0)))
    if 2 * tp + fp + fn == 0:
        return acc, 0.0
    return acc, 2.0 * tp / (2.0 * tp + fp + fn)


@dataclass(frozen=True)
class WilcoxonResult:
    statistic: float  # W: rank sum of positive differences
    p_value: float
    n: int  # differences kept after dropping zeros
    method: str  # "exact" or "normal"
    alternative: str


def _normal_sf(z: float) -> float:
    return 0.5 * math.erfc(z / math.sqrt(2.0))


def wilcoxon_signed_rank(a, b, alternative: str = "greater") -> WilcoxonResult:
    """Paired signed-rank test on a - b; exact p for n <= 20.

    Zero differences are dropped; |differences| receive midranks; W is the
    rank sum over positive differences. The exact path enumerates all 2^n
    sign assignments, so ties are handled exactly; larger n uses the normal
    approximation with tie correction and continuity correction.
    """
    if alternative not in ("greater", "less", "two-sided"):
        raise EvalError(f"unknown alternative {alternative!r}")
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise EvalError("paired samples must have equal length")
    d = a - b
    d = d[d != 0.0]
    n = int(d.size)
    if n == 0:
        raise AllZeroDifferences("every paired difference is zero")
    ranks = _midranks(np.abs(d))
    w = float(ranks[d > 0].sum())

    if n <= EXACT_WILCOXON_MAX_N:
        sums = np.zeros(1)
        for r in ranks:
            sums = np.concatenate([sums, sums + r])
        total = sums.size
        eps = 1e-9
        p_greater = float(np.count_nonzero(sums >= w - eps)) / total
        p_less = float(np.count_nonzero(sums <= w + eps)) / total
        if alternative == "greater":
            p = p_greater
        elif alternative == "less":
            p = p_less
        else:
            p = min(1.0, 2.0 * min(p_greater, p_less))
        return WilcoxonResult(w, p, n, "exact", alternative)

    mu = n * (n + 1) / 4.0
    tie_sizes = np.unique(ranks, return_counts=True)[1]
    sigma2 = n * (n + 1) * (2 * n + 1) / 24.0 - float(np.sum(tie_sizes**3 - tie_sizes)) / 48.0
    sigma = math.sqrt(sigma2)
    if alternative == "greater":
        p = _normal_sf((w - mu - 0.5) / sigma)
    elif alternative == "less":
        p = 1.0 - _normal_sf((w - mu + 0.5) / sigma)
    else:
        shift = 0.5 if w != mu else 0.0
        z = (abs(w - mu) - shift) / sigma
        p = min(1.0, 2.0 * _normal_sf(z))
    return WilcoxonResult(w, p, n, "normal", alternative)


# --- experiment runner -------------------------------------------------------

VALID_BLOCKS = ("clinical", "mri_j0", "mri_j1", "lesion_j0", "lesion_j1")


@dataclass(frozen=True)
class ExperimentConfig:
    config_id: str
    blocks: tuple[str, ...]
    nihss_days: tuple[str, ...] = ("j0", "j1")
    folds: int = DEFAULT_FOLDS
    fold_seed: int = 0
    svm_seed: int = 0

    def __post_init__(self):
        seen = set()
        for b in self.blocks:
            if b not in VALID_BLOCKS:
                raise EvalError(f"unknown feature block {b!r}")
            if b in seen:
                raise EvalError(f"duplicate feature block {b!r}")
            seen.add(b)
        if not self.blocks:
            raise EvalError("config needs at least one feature block")


@dataclass
class FoldMetrics:
    fold: int
    n_train: int
    n_val: int
    train_auc: float
    train_accuracy: float
    train_f1: float
    val_auc: float
    val_accuracy: float
    val_f1: float


@dataclass
class CVReport:
    config_id: str
    blocks: tuple[str, ...]
    folds: list[FoldMetrics]
    fold_plan_hash: int
    seeds: dict[str, int]
    weight_hash: int | None = None
    notes: dict[str, str] = field(default_factory=dict)

    def per_fold(self, split: str, metric: str) -> list[float]:
        return [getattr(f, f"{split}_{metric}") for f in self.folds]

    def aggregates(self) -> dict[str, dict[str, dict[str, float]]]:
        out: dict[str, dict[str, dict[str, float]]] = {}
        for split in ("train", "val"):
            out[split] = {}
            for metric in ("auc", "accuracy", "f1"):
                mean, sd = mean_sd(self.per_fold(split, metric))
                out[split][metric] = {"mean": mean, "sd": sd}
        return out

    def to_dict(self) -> dict:
        return {
            "config_id": self.config_id,
            "blocks": list(self.blocks),
            "fold_plan_hash": f"{self.fold_plan_hash:016x}",
            "seeds": self.seeds,
            "weight_hash": None if self.weight_hash is None else f"{self.weight_hash:016x}",
            "folds": [
                {
                    "fold": f.fold,
                    "n_train": f.n_train,
                    "n_val": f.n_val,
                    "train": {"auc": f.train_auc, "accuracy": f.train_accuracy, "f1": f.train_f1},
                    "val": {"auc": f.val_auc, "accuracy": f.val_accuracy, "f1": f.val_f1},
                }
                for f in self.folds
            ],
            "aggregates": self.aggregates(),
            "notes": self.notes,
        }

    @staticmethod
    def from_dict(doc: dict) -> "CVReport":
        folds = [
            FoldMetrics(
                fold=f["fold"],
                n_train=f["n_train"],
                n_val=f["n_val"],
                train_auc=f["train"]["auc"],
                train_accuracy=f["train"]["accuracy"],
                train_f1=f["train"]["f1"],
                val_auc=f["val"]["auc"],
                val_accuracy=f["val"]["accuracy"],
                val_f1=f["val"]["f1"],
            )
            for f in doc["folds"]
        ]
        return CVReport(
            config_id=doc["config_id"],
            blocks=tuple(doc["blocks"]),
            folds=folds,
            fold_plan_hash=int(doc["fold_plan_hash"], 16),
            seeds=dict(doc["seeds"]),
            weight_hash=int(doc["weight_hash"], 16) if doc.get("weight_hash") else None,
            notes=dict(doc.get("notes", {})),
        )


class FoldFailure(EvalError):
    def __init__(self, fold: int, cause: Exception):
        super().__init__(f"fold {fold} failed: {cause}")
        self.fold = fold
        self.cause = cause


def _fit_fold(train_fvs: list[FeatureVector], svm_seed: int):
    x = np.stack([fv.values for fv in train_fvs])
    y = np.asarray([fv.label for fv in train_fvs], dtype=np.float64)
    scaler = standardize_fit(x)
    pca = pca_fit(scaler.apply(x))
    z = pca_transform(pca, scaler.apply(x))
    svm = svm_fit(z, y, seed=svm_seed)
    platt = platt_fit(decision_scores(svm, z), y)
    return scaler, pca, svm, platt


def _score_split(scaler, pca, svm, platt, fvs: list[FeatureVector]):
    x = np.stack([fv.values for fv in fvs])
    y = np.asarray([fv.label for fv in fvs], dtype=np.float64)
    scores = decision_scores(svm, pca_transform(pca, scaler.apply(x)))
    probs = platt_probability(platt, scores)
    predicted = np.where(probs >= 0.5, 1.0, -1.0)
    acc, f1 = accuracy_f1(predicted, y)
    return auc(scores, y), acc, f1


def build_features(
    config: ExperimentConfig,
    records,
    mri: dict[tuple[str, str], np.ndarray] | None = None,
    lesion: dict[tuple[str, str], "LesionStats"] | None = None,
) -> list[FeatureVector]:
    """Fuse the configured blocks for every record (records must be imputed
    already when the clinical block is requested)."""
    from .inference3d import mri_feature_names
    from .tabular import clinical_feature_block, fuse

    blocks = set(config.blocks)
    out = []
    for rec in records:
        kwargs = {}
        if "clinical" in blocks:
            kwargs["clinical"] = clinical_feature_block(rec, nihss_days=config.nihss_days)
        for tp in ("j0", "j1"):
            if f"mri_{tp}" in blocks:
                key = (rec.patient_id, tp.upper())
                if mri is None or key not in mri:
                    raise EvalError(f"missing MRI features for {key}")
                vec = np.asarray(mri[key], dtype=np.float64)
                kwargs[f"mri_{tp}"] = (mri_feature_names(vec.size), vec)
            if f"lesion_{tp}" in blocks:
                key = (rec.patient_id, tp.upper())
                if lesion is None or key not in lesion:
                    raise EvalError(f"missing lesion stats for {key}")
                kwargs[f"lesion_{tp}"] = lesion[key]
        out.append(fuse(rec.patient_id, rec.label, **kwargs))
    return out


def run_experiment(
    config: ExperimentConfig,
    records,
    mri: dict[tuple[str, str], np.ndarray] | None = None,
    lesion: dict[tuple[str, str], "LesionStats"] | None = None,
    weight_hash: int | None = None,
) -> CVReport:
    """Cross-validate one configuration end to end.

    Imputation, scaling, and PCA are refit inside every fold from training
    rows only. Per-patient MRI/lesion features are sample-local transforms,
    so they are computed once outside the folds.
    """
    from .tabular import impute_median

    labeled = [r for r in records if r.mrs_90 is not None]
    if not labeled:
        raise EvalError("no labeled records")
    labels = [r.label for r in labeled]
    groups = [r.group_id for r in labeled]
    plan = stratified_group_kfold(labels, groups, k=config.folds, seed=config.fold_seed)

    fold_metrics: list[FoldMetrics] = []
    for fold_idx, held_out in enumerate(plan.folds):
        try:
            held = set(held_out)
            train_recs = [r for r in labeled if r.group_id not in held]
            val_recs = [r for r in labeled if r.group_id in held]
            train_ids = {r.patient_id for r in train_recs}
            imputed = impute_median(labeled, train_ids) if "clinical" in config.blocks else labeled
            fvs = {f.patient_id: f for f in build_features(config, imputed, mri, lesion)}
            train_fvs = [fvs[r.patient_id] for r in train_recs]
            val_fvs = [fvs[r.patient_id] for r in val_recs]
            scaler, pca, svm, platt = _fit_fold(train_fvs, config.svm_seed + fold_idx)
            tr_auc, tr_acc, tr_f1 = _score_split(scaler, pca, svm, platt, train_fvs)
            va_auc, va_acc, va_f1 = _score_split(scaler, pca, svm, platt, val_fvs)
        except PipelineError as exc:
            raise FoldFailure(fold_idx, exc) from exc
        fold_metrics.append(
            FoldMetrics(
                fold=fold_idx,
                n_train=len(train_fvs),
                n_val=len(val_fvs),
                train_auc=tr_auc,
                train_accuracy=tr_acc,
                train_f1=tr_f1,
                val_auc=va_auc,
                val_accuracy=va_acc,
                val_f1=va_f1,
            )
        )
    return CVReport(
        config_id=config.config_id,
        blocks=config.blocks,
        folds=fold_metrics,
        fold_plan_hash=plan.plan_hash,
        seeds={"fold_seed": config.fold_seed, "svm_seed": config.svm_seed},
        weight_hash=weight_hash,
    )


def permute_labels(records, seed: int):
    """Outcome labels shuffled across patients (seeded); features untouched.

    The standard no-signal calibration: any configuration evaluated on the
    permuted cohort should score near chance.
    """
    import dataclasses

    rng = np.random.default_rng(np.random.PCG64(seed))
    outcomes = [r.mrs_90 for r in records]
    perm = rng.permutation(len(records))
    return [
        dataclasses.replace(rec, mrs_90=outcomes[perm[i]]) for i, rec in enumerate(records)
    ]


def compare_runs(report_a: CVReport, report_b: CVReport, alternative: str = "greater") -> dict:
    """Paired signed-rank comparison of per-fold validation AUCs."""
    if report_a.fold_plan_hash != report_b.fold_plan_hash:
        raise FoldPlanMismatch(
            "reports use different fold plans; per-fold pairing is undefined"
        )
    a = report_a.per_fold("val", "auc")
    b = report_b.per_fold("val", "auc")
    base = {
        "config_a": report_a.config_id,
        "config_b": report_b.config_id,
        "metric": "val_auc",
        "alternative": alternative,
        "n_folds": len(a),
    }
    try:
        res = wilcoxon_signed_rank(a, b, alternative=alternative)
    except AllZeroDifferences:
        return base | {
            "statistic": None,
            "p_value": 1.0,
            "verdict": "no evidence (all paired differences are zero)",
        }
    verdict = "significant at 0.05" if res.p_value < 0.05 else "not significant at 0.05"
    return base | {
        "statistic": res.statistic,
        "p_value": res.p_value,
        "method": res.method,
        "verdict": verdict,
    }
