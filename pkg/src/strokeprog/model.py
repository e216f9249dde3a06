"""PCA reduction, class-balanced linear SVM, Platt calibration, persistence.

The classifier chain is scaler -> PCA -> linear SVM -> Platt sigmoid. PCA
keeps at most 12 components and stops earlier once cumulative explained
variance exceeds 95% (the cap wins when the two disagree). The SVM solves
the L1-hinge soft-margin primal through its dual with coordinate descent;
the bias rides along as an augmented, regularized constant feature. Platt
scaling maps decision scores to probabilities with the usual smoothed
targets; the positive class is the unfavorable outcome.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import PipelineError
from .tabular import (
    FeatureVector,
    NameMismatch,
    Scaler,
    TooFewSamples,
    standardize_apply,
    standardize_fit,
)
from .volume_io import TensorRecord, read_container, write_container

SVM_C = 0.1
PCA_MAX_COMPONENTS = 12
PCA_VARIANCE_TARGET = 0.95
SVM_TOL = 1e-6
SVM_MAX_EPOCHS = 10000
PLATT_MAX_ITER = 100
PLATT_TOL = 1e-10


class ModelError(PipelineError):
    pass


class DimMismatch(ModelError):
    pass


class OneClass(ModelError):
    pass


@dataclass(frozen=True)
class PCAModel:
    mean: np.ndarray  # (D,)
    components: np.ndarray  # (k, D), orthonormal rows
    explained_variance: np.ndarray  # (k,), nonincreasing
    explained_ratio: np.ndarray  # (k,), fractions of total variance

    @property
    def k(self) -> int:
        return self.components.shape[0]


def pca_fit(
    x_train: np.ndarray,
    max_k: int = PCA_MAX_COMPONENTS,
    var_target: float = PCA_VARIANCE_TARGET,
) -> PCAModel:
    """Principal directions via SVD of the centered training matrix.

    k = min(max_k, smallest k whose cumulative explained ratio exceeds
    var_target, numerical rank). Each component is sign-fixed so its
    largest-magnitude coordinate is positive.
    """
    x = np.asarray(x_train, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2:
        raise TooFewSamples("pca_fit needs at least 2 training rows")
    n = x.shape[0]
    mean = x.mean(axis=0)
    centered = x - mean
    _, s, vt = np.linalg.svd(centered, full_matrices=False)
    if s.size == 0 or s[0] <= 0:
        raise TooFewSamples("training matrix has zero variance")
    variance = s**2 / (n - 1)
    total = variance.sum()
    ratio = variance / total
    rank = int(np.sum(s > s[0] * max(x.shape) * np.finfo(np.float64).eps))
    cumulative = np.cumsum(ratio)
    k_target = int(np.searchsorted(cumulative, var_target, side="right")) + 1
    k = max(1, min(max_k, k_target, rank))

    components = vt[:k].copy()
    for row in components:
        pivot = int(np.argmax(np.abs(row)))
        if row[pivot] < 0:
            row *= -1.0
    return PCAModel(
        mean=mean,
        components=components,
        explained_variance=variance[:k],
        explained_ratio=ratio[:k],
    )


def pca_transform(model: PCAModel, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != model.mean.shape[0]:
        raise DimMismatch(
            f"input has {x.shape[-1]} features, PCA was fit on {model.mean.shape[0]}"
        )
    return (x - model.mean) @ model.components.T


@dataclass
class SvmModel:
    w: np.ndarray  # (k,)
    b: float
    C: float
    class_weights: dict[int, float]  # label -> per-sample cost
    alpha: np.ndarray  # (n_train,) dual variables
    converged: bool
    epochs: int
    kkt_violation: float


def _per_sample_costs(y: np.ndarray, C: float, balanced: bool):
    n = y.size
    if balanced:
        n_pos = int(np.sum(y > 0))
        n_neg = n - n_pos
        cost = {+1: C * n / (2.0 * n_pos), -1: C * n / (2.0 * n_neg)}
    else:
        cost = {+1: C, -1: C}
    return np.where(y > 0, cost[+1], cost[-1]), cost


def svm_fit(
    x: np.ndarray,
    y: np.ndarray,
    C: float = SVM_C,
    balanced: bool = True,
    seed: int = 0,
    tol: float = SVM_TOL,
    max_epochs: int = SVM_MAX_EPOCHS,
) -> SvmModel:
    """L1-hinge linear SVM by dual coordinate descent.

    The bias is an augmented constant feature (value 1, regularized).
    Coordinates are visited in a fresh seeded permutation each epoch;
    training stops when the largest projected-gradient violation in an
    epoch drops below ``tol``.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] != y.shape[0]:
        raise DimMismatch("x and y disagree on the sample count")
    if not (np.any(y > 0) and np.any(y < 0)):
        raise OneClass("svm_fit needs both classes present")
    n, k = x.shape

    costs, cost_by_class = _per_sample_costs(y, C, balanced)
    xa = np.hstack([x, np.ones((n, 1))])
    q_diag = np.einsum("ij,ij->i", xa, xa)
    rows = [xa[i] * y[i] for i in range(n)]  # yi * xi, python floats below

    alpha = np.zeros(n)
    w = np.zeros(k + 1)
    rng = np.random.default_rng(np.random.PCG64(seed))
    converged = False
    epoch = 0
    for epoch in range(1, max_epochs + 1):
        worst = 0.0
        for i in rng.permutation(n):
            yx = rows[i]
            g = float(yx @ w) - 1.0
            a = alpha[i]
            ci = costs[i]
            if a <= 0.0:
                pg = min(g, 0.0)
            elif a >= ci:
                pg = max(g, 0.0)
            else:
                pg = g
            if pg != 0.0:
                worst = max(worst, abs(pg))
                new_a = min(max(a - g / q_diag[i], 0.0), ci)
                if new_a != a:
                    w += (new_a - a) * yx
                    alpha[i] = new_a
        if worst < tol:
            converged = True
            break

    # static KKT certificate on the returned iterate
    margins = (xa @ w) * y - 1.0
    viol = np.where(
        alpha <= 0.0,
        np.minimum(margins, 0.0),
        np.where(alpha >= costs, np.maximum(margins, 0.0), margins),
    )
    kkt = float(np.max(np.abs(viol))) if n else 0.0

    return SvmModel(
        w=w[:k].copy(),
        b=float(w[k]),
        C=C,
        class_weights={+1: cost_by_class[+1], -1: cost_by_class[-1]},
        alpha=alpha,
        converged=converged,
        epochs=epoch,
        kkt_violation=kkt,
    )


def svm_objective(x: np.ndarray, y: np.ndarray, w: np.ndarray, b: float, costs: np.ndarray) -> float:
    """Primal objective with the augmented-bias regularization convention."""
    scores = x @ w + b
    hinge = np.maximum(0.0, 1.0 - y * scores)
    return 0.5 * (w @ w + b * b) + float(costs @ hinge)


def decision_scores(svm: SvmModel, z: np.ndarray) -> np.ndarray:
    return np.asarray(z, dtype=np.float64) @ svm.w + svm.b


@dataclass(frozen=True)
class PlattModel:
    A: float
    B: float


def platt_fit(scores: np.ndarray, y: np.ndarray, max_iter: int = PLATT_MAX_ITER,
              tol: float = PLATT_TOL) -> PlattModel:
    """Fit the sigmoid P(y=+1 | f) = 1 / (1 + exp(A f + B)).

    Maximizes the likelihood against the smoothed targets
    t+ = (N+ + 1)/(N+ + 2), t- = 1/(N- + 2), by damped Newton steps.
    """
    f = np.asarray(scores, dtype=np.float64).reshape(-1)
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    n_pos = int(np.sum(y > 0))
    n_neg = int(y.size - n_pos)
    if n_pos == 0 or n_neg == 0:
        raise OneClass("platt_fit needs both classes present")
    t = np.where(y > 0, (n_pos + 1.0) / (n_pos + 2.0), 1.0 / (n_neg + 2.0))

    def loss_grad_hess(a, b):
        z = a * f + b
        # p = sigma(-z); stable pieces
        log1pe = np.logaddexp(0.0, z)
        loss = float(np.sum(log1pe - (1.0 - t) * z))
        p = np.exp(-log1pe)  # = 1/(1+e^z)
        r = t - p  # dLoss/dz
        ga = float(r @ f)
        gb = float(np.sum(r))
        pq = p * (1.0 - p)
        haa = float(pq @ (f * f))
        hab = float(pq @ f)
        hbb = float(np.sum(pq))
        return loss, (ga, gb), (haa, hab, hbb)

    a, b = 0.0, math.log((n_neg + 1.0) / (n_pos + 1.0))
    loss, grad, hess = loss_grad_hess(a, b)
    damping = 1e-12
    for _ in range(max_iter):
        if max(abs(grad[0]), abs(grad[1])) < tol:
            break
        for _attempt in range(60):
            haa, hab, hbb = hess
            det = (haa + damping) * (hbb + damping) - hab * hab
            if det <= 0:
                damping = max(damping * 10.0, 1e-12)
                continue
            da = -((hbb + damping) * grad[0] - hab * grad[1]) / det
            db = -((haa + damping) * grad[1] - hab * grad[0]) / det
            new_loss, new_grad, new_hess = loss_grad_hess(a + da, b + db)
            if new_loss <= loss + 1e-12:
                a, b = a + da, b + db
                loss, grad, hess = new_loss, new_grad, new_hess
                damping = max(damping * 0.1, 1e-12)
                break
            damping *= 10.0
        else:
            break
    return PlattModel(A=a, B=b)


def platt_probability(model: PlattModel, score) -> np.ndarray:
    """Calibrated P(unfavorable | decision score), numerically stable."""
    z = model.A * np.asarray(score, dtype=np.float64) + model.B
    return np.exp(-np.logaddexp(0.0, z))


@dataclass
class ModelBundle:
    scaler: Scaler
    pca: PCAModel
    svm: SvmModel
    platt: PlattModel
    feature_names: tuple[str, ...]
    config_id: str
    weight_hash: int | None


def train_bundle(
    features: list[FeatureVector],
    config_id: str,
    weight_hash: int | None = None,
    svm_seed: int = 0,
    C: float = SVM_C,
    max_k: int = PCA_MAX_COMPONENTS,
    var_target: float = PCA_VARIANCE_TARGET,
) -> ModelBundle:
    """Fit the full chain on training feature vectors (labels required)."""
    if len(features) < 2:
        raise TooFewSamples("train_bundle needs at least 2 training vectors")
    names = features[0].names
    for fv in features:
        if fv.names != names:
            raise NameMismatch(f"feature names differ for patient {fv.patient_id}")
        if fv.label is None:
            raise ModelError(f"patient {fv.patient_id} has no outcome label")
    x = np.stack([fv.values for fv in features])
    y = np.asarray([fv.label for fv in features], dtype=np.float64)

    scaler = standardize_fit(x)
    xs = scaler.apply(x)
    pca = pca_fit(xs, max_k=max_k, var_target=var_target)
    z = pca_transform(pca, xs)
    svm = svm_fit(z, y, C=C, seed=svm_seed)
    scores = decision_scores(svm, z)
    platt = platt_fit(scores, y)
    return ModelBundle(
        scaler=scaler,
        pca=pca,
        svm=svm,
        platt=platt,
        feature_names=names,
        config_id=config_id,
        weight_hash=weight_hash,
    )


@dataclass(frozen=True)
class Prediction:
    score: float
    probability: float
    label: int  # +1 unfavorable iff probability >= 0.5


def predict(bundle: ModelBundle, fv: FeatureVector) -> Prediction:
    if fv.names != bundle.feature_names:
        raise NameMismatch(
            f"feature names do not match the bundle registry for patient {fv.patient_id}"
        )
    z = pca_transform(bundle.pca, standardize_apply(bundle.scaler, fv.values))
    score = float(z @ bundle.svm.w + bundle.svm.b)
    prob = float(platt_probability(bundle.platt, score))
    label = +1 if prob >= 0.5 else -1
    return Prediction(score=score, probability=prob, label=label)


# --- persistence ------------------------------------------------------------
#
# Model parameters are float64 but the container carries float32 payloads, so
# each f64 array is stored bit-exactly as an extra trailing axis of two f32
# halves (pure byte reinterpretation; predictions round-trip identically).

def _pack_f64(name: str, arr: np.ndarray) -> TensorRecord:
    arr = np.ascontiguousarray(arr, dtype="<f8")
    halves = np.frombuffer(arr.tobytes(), dtype="<f4").copy()
    return TensorRecord(name, arr.shape + (2,), halves)


def _unpack_f64(rec: TensorRecord) -> np.ndarray:
    if not rec.shape or rec.shape[-1] != 2:
        raise ModelError(f"tensor {rec.name!r} is not an f64-pair record")
    raw = np.ascontiguousarray(rec.values, dtype="<f4").tobytes()
    return np.frombuffer(raw, dtype="<f8").reshape(rec.shape[:-1]).copy()


def save_bundle(bundle: ModelBundle, path: str) -> None:
    """Write ``path`` (ADCT tensors) and ``path + ".meta"`` (key=value text)."""
    records = [
        _pack_f64("scaler.mean", bundle.scaler.mean),
        _pack_f64("scaler.std", bundle.scaler.std),
        _pack_f64("pca.mean", bundle.pca.mean),
        _pack_f64("pca.components", bundle.pca.components),
        _pack_f64("pca.explained_variance", bundle.pca.explained_variance),
        _pack_f64("pca.explained_ratio", bundle.pca.explained_ratio),
        _pack_f64("svm.w", bundle.svm.w),
        _pack_f64("svm.b", np.array([bundle.svm.b])),
        _pack_f64("svm.alpha", bundle.svm.alpha),
        _pack_f64(
            "svm.class_weights",
            np.array([bundle.svm.class_weights[+1], bundle.svm.class_weights[-1]]),
        ),
        _pack_f64("platt.ab", np.array([bundle.platt.A, bundle.platt.B])),
    ]
    meta_lines = [
        f"config_id={bundle.config_id}",
        f"weight_hash={'' if bundle.weight_hash is None else f'{bundle.weight_hash:016x}'}",
        f"svm_c={bundle.svm.C!r}",
        f"svm_converged={int(bundle.svm.converged)}",
        f"svm_epochs={bundle.svm.epochs}",
        f"svm_kkt_violation={bundle.svm.kkt_violation!r}",
        f"feature_names={','.join(bundle.feature_names)}",
    ]
    with open(path, "wb") as fh:
        fh.write(write_container(records))
    with open(path + ".meta", "w", encoding="utf-8") as fh:
        fh.write("\n".join(meta_lines) + "\n")


def load_bundle(path: str) -> ModelBundle:
    with open(path, "rb") as fh:
        tensors = {r.name: _unpack_f64(r) for r in read_container(fh.read())}
    meta = {}
    with open(path + ".meta", encoding="utf-8") as fh:
        for line in fh:
            line = line.rstrip("\n")
            if not line:
                continue
            key, _, value = line.partition("=")
            meta[key] = value
    names = tuple(meta["feature_names"].split(",")) if meta["feature_names"] else ()
    cw = tensors["svm.class_weights"]
    svm = SvmModel(
        w=tensors["svm.w"],
        b=float(tensors["svm.b"][0]),
        C=float(meta["svm_c"]),
        class_weights={+1: float(cw[0]), -1: float(cw[1])},
        alpha=tensors["svm.alpha"],
        converged=bool(int(meta["svm_converged"])),
        epochs=int(meta["svm_epochs"]),
        kkt_violation=float(meta["svm_kkt_violation"]),
    )
    return ModelBundle(
        scaler=Scaler(mean=tensors["scaler.mean"], std=tensors["scaler.std"]),
        pca=PCAModel(
            mean=tensors["pca.mean"],
            components=tensors["pca.components"],
            explained_variance=tensors["pca.explained_variance"],
            explained_ratio=tensors["pca.explained_ratio"],
        ),
        svm=svm,
        platt=PlattModel(A=float(tensors["platt.ab"][0]), B=float(tensors["platt.ab"][1])),
        feature_names=names,
        config_id=meta["config_id"],
        weight_hash=int(meta["weight_hash"], 16) if meta["weight_hash"] else None,
    )
