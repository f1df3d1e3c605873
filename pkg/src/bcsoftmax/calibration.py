"""Post-hoc calibration of classifier logits.

Three calibrator families, all fit by minimizing cross-entropy on held-out
logits with an adaptive-moment optimizer and a shared ``tau = exp(tau_raw)``
temperature:

* :class:`TemperatureScaling` rescales logits by a single temperature.
* :class:`ProbabilityBounding` additionally learns uniform lower/upper bounds
  on the output probabilities, enforced exactly through the box-constrained
  softmax.  Bounds are parameterized so that ``a in (0, 1/K)`` and
  ``b in (1/K, 1)`` always hold.
* :class:`LogitBounding` learns clip thresholds ``c <= C`` applied to the
  logits before the softmax, the scalar-bound problem in its clipped form.

Estimators follow the scikit-learn protocol (``fit`` / ``predict_proba`` /
``get_params``); ``mode="linear"`` variants drive the bound heads from a
per-sample feature (embedding) vector instead of constants.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit
from sklearn.base import BaseEstimator

from ._scalar_batch import solve_uniform_rows
from ._validation import check_prob_vector

__all__ = [
    "LabeledLogitSet",
    "gen_synthetic",
    "softmax_rows",
    "ce_loss",
    "BinStats",
    "EceReport",
    "ece",
    "TemperatureScaling",
    "ProbabilityBounding",
    "LogitBounding",
    "FitDivergedError",
    "fit_calibrator",
    "model_to_payload",
    "model_from_payload",
    "save_model",
    "load_model",
    "PROB_FLOOR",
]

#: Probabilities are clamped to at least this before taking logs.
PROB_FLOOR = 1e-12

KINDS = ("ts", "pb-c", "pb-l", "lb-c", "lb-l")


# ---------------------------------------------------------------------------
# Data
# ---------------------------------------------------------------------------


@dataclass
class LabeledLogitSet:
    """Logit rows with integer labels and optional per-sample feature vectors.

    Attributes
    ----------
    logits : ndarray, shape (N, K)
    labels : ndarray of int, shape (N,)
        Zero-based class indices.
    features : ndarray of shape (N, d), optional
        Embedding vectors consumed by the linear calibrator heads.
    """

    logits: np.ndarray
    labels: np.ndarray
    features: np.ndarray | None = None

    def __post_init__(self):
        self.logits = np.asarray(self.logits, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.logits.ndim != 2:
            raise ValueError(f"logits must be 2-D, got shape {self.logits.shape}")
        if not np.all(np.isfinite(self.logits)):
            raise ValueError("logits contain non-finite entries")
        n, k = self.logits.shape
        if n < 1:
            raise ValueError("need at least one sample")
        if self.labels.shape != (n,):
            raise ValueError("labels must have one entry per logit row")
        if np.any(self.labels < 0) or np.any(self.labels >= k):
            raise ValueError(f"labels must lie in [0, {k})")
        if self.features is not None:
            self.features = np.asarray(self.features, dtype=np.float64)
            if self.features.ndim != 2 or self.features.shape[0] != n:
                raise ValueError("features must have shape (N, d)")
            if not np.all(np.isfinite(self.features)):
                raise ValueError("features contain non-finite entries")

    @property
    def n_samples(self) -> int:
        return self.logits.shape[0]

    @property
    def n_classes(self) -> int:
        return self.logits.shape[1]

    def split(self, n_first: int) -> tuple["LabeledLogitSet", "LabeledLogitSet"]:
        """Deterministic head/tail split (no shuffling)."""
        feats = self.features
        head = LabeledLogitSet(
            self.logits[:n_first],
            self.labels[:n_first],
            None if feats is None else feats[:n_first],
        )
        tail = LabeledLogitSet(
            self.logits[n_first:],
            self.labels[n_first:],
            None if feats is None else feats[n_first:],
        )
        return head, tail


def gen_synthetic(
    n_samples: int, n_classes: int, scale: float = 1.0, seed: int = 0
) -> LabeledLogitSet:
    """Synthetic miscalibrated logits with known ground truth.

    True logits ``z`` are drawn from a unit spherical normal and labels from
    ``softmax(z)``; the emitted logits are ``scale * z``, so ``scale > 1``
    yields an overconfident model and ``scale < 1`` an underconfident one.
    The feature column is ``z`` itself, for the linear calibrator heads.
    """
    if n_samples < 1 or n_classes < 1:
        raise ValueError("n_samples and n_classes must be positive")
    if not scale > 0:
        raise ValueError("scale must be positive")
    rng = np.random.default_rng(seed)
    z = rng.standard_normal((n_samples, n_classes))
    p = softmax_rows(z)
    draws = rng.random((n_samples, 1))
    labels = np.minimum((draws > np.cumsum(p, axis=1)).sum(axis=1), n_classes - 1)
    return LabeledLogitSet(scale * z, labels, features=z)


# ---------------------------------------------------------------------------
# Elementary pieces
# ---------------------------------------------------------------------------


def softmax_rows(z: np.ndarray) -> np.ndarray:
    """Row-wise softmax at temperature one, overflow-safe."""
    z = np.asarray(z, dtype=np.float64)
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def ce_loss(p, label: int) -> float:
    """Cross-entropy ``-log p[label]`` with the probability floored at 1e-12."""
    p = check_prob_vector(p)
    label = int(label)
    if not 0 <= label < p.size:
        raise ValueError(f"label {label} out of range for {p.size} classes")
    return float(-np.log(max(p[label], PROB_FLOOR)))


def _mean_ce(probs: np.ndarray, labels: np.ndarray) -> float:
    picked = probs[np.arange(labels.size), labels]
    return float(-np.log(np.maximum(picked, PROB_FLOOR)).mean())


# ---------------------------------------------------------------------------
# Expected calibration error
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class BinStats:
    count: int
    accuracy: float
    confidence: float


@dataclass(frozen=True)
class EceReport:
    """Top-label ECE with its per-bin breakdown.

    ``ece`` equals ``sum(count/N * |accuracy - confidence|)`` over ``per_bin``
    by construction; empty bins contribute zero.
    """

    ece: float
    accuracy: float
    n_bins: int
    per_bin: list[BinStats] = field(default_factory=list)


def ece(model, data: LabeledLogitSet, n_bins: int = 15) -> EceReport:
    """Empirical top-label expected calibration error.

    Confidence is the maximum predicted probability; the predicted class is
    the argmax with ties resolved to the lowest index.  Bin ``m`` collects
    confidences in ``((m-1)/M, m/M]``.

    Parameters
    ----------
    model : estimator or None
        Any fitted calibrator with ``predict_proba``; ``None`` evaluates the
        uncalibrated softmax at temperature one.
    data : LabeledLogitSet
    n_bins : int
        Number of equal-width confidence bins (M).
    """
    if n_bins < 1:
        raise ValueError("n_bins must be >= 1")
    if model is None:
        probs = softmax_rows(data.logits)
    else:
        probs = model.predict_proba(data.logits, data.features)
    confidence = probs.max(axis=1)
    predicted = probs.argmax(axis=1)
    correct = predicted == data.labels
    n = data.n_samples

    idx = np.clip(np.ceil(confidence * n_bins).astype(int) - 1, 0, n_bins - 1)
    per_bin: list[BinStats] = []
    total = 0.0
    for m in range(n_bins):
        mask = idx == m
        count = int(mask.sum())
        if count == 0:
            per_bin.append(BinStats(0, 0.0, 0.0))
            continue
        acc = float(correct[mask].mean())
        conf = float(confidence[mask].mean())
        per_bin.append(BinStats(count, acc, conf))
        total += count / n * abs(acc - conf)
    return EceReport(
        ece=total,
        accuracy=float(correct.mean()),
        n_bins=n_bins,
        per_bin=per_bin,
    )


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------


class FitDivergedError(RuntimeError):
    """Raised when the fit loss turns non-finite; carries the last finite state."""

    def __init__(self, message, params: dict, epoch: int):
        super().__init__(message)
        self.params = params
        self.epoch = epoch


class _Adam:
    """Adaptive-moment optimizer over a dict of parameter arrays."""

    def __init__(self, params: dict, lr: float, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, grads: dict) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for key, g in grads.items():
            self.m[key] = b1 * self.m[key] + (1 - b1) * g
            self.v[key] = b2 * self.v[key] + (1 - b2) * g * g
            m_hat = self.m[key] / (1 - b1**self.t)
            v_hat = self.v[key] / (1 - b2**self.t)
            self.params[key] -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


# ---------------------------------------------------------------------------
# Estimators
# ---------------------------------------------------------------------------


def _sigmoid_grad(raw):
    s = expit(raw)
    return s * (1.0 - s)


def _softplus(x):
    return np.logaddexp(0.0, x)


class _BaseCalibrator(BaseEstimator):
    """Shared fit loop: seeded minibatch Adam on the mean cross-entropy."""

    def __init__(
        self,
        epochs: int = 500,
        batch_size: int = 128,
        learning_rate: float = 1e-3,
        seed: int = 0,
        init_tau: float = 1.5,
    ):
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.seed = seed
        self.init_tau = init_tau

    # subclass hooks -------------------------------------------------------
    @property
    def kind(self) -> str:
        raise NotImplementedError

    def _needs_features(self) -> bool:
        return False

    def _init_params(self, n_classes: int, feature_dim: int | None) -> dict:
        raise NotImplementedError

    def _predict(self, params, logits, features) -> np.ndarray:
        raise NotImplementedError

    def _loss_and_grads(self, params, logits, labels, features):
        raise NotImplementedError

    # shared machinery -----------------------------------------------------
    def _validate_features(self, features, n: int, where: str):
        if not self._needs_features():
            return None
        if features is None:
            raise ValueError(f"{self.kind} requires a feature matrix for {where}")
        features = np.asarray(features, dtype=np.float64)
        if features.ndim == 1:
            features = features[None, :]
        if features.shape[0] != n:
            raise ValueError("features and logits disagree on the sample count")
        return features

    def fit(self, logits, labels, features=None):
        """Fit on labeled logits by minimizing the mean cross-entropy.

        Parameters
        ----------
        logits : array-like, shape (N, K)
        labels : array-like of int, shape (N,)
        features : array-like of shape (N, d), optional
            Required by the ``mode="linear"`` calibrators.
        """
        data = LabeledLogitSet(np.atleast_2d(logits), labels)
        n, k = data.n_samples, data.n_classes
        feats = self._validate_features(features, n, "fit")
        if self._needs_features() and feats is not None and feats.shape[0] != n:
            raise ValueError("feature rows must match logit rows")
        self.n_classes_ = k
        self.n_features_ = None if feats is None else feats.shape[1]
        self.params_ = self._init_params(k, self.n_features_)
        self.init_loss_ = _mean_ce(
            self._predict(self.params_, data.logits, feats), data.labels
        )

        rng = np.random.default_rng(self.seed)
        opt = _Adam(self.params_, lr=self.learning_rate)
        snapshot = {key: val.copy() for key, val in self.params_.items()}
        for epoch in range(self.epochs):
            perm = rng.permutation(n)
            for start in range(0, n, self.batch_size):
                idx = perm[start : start + self.batch_size]
                batch_feats = None if feats is None else feats[idx]
                loss, grads = self._loss_and_grads(
                    self.params_, data.logits[idx], data.labels[idx], batch_feats
                )
                if not np.isfinite(loss):
                    raise FitDivergedError(
                        f"non-finite loss at epoch {epoch}", snapshot, epoch
                    )
                snapshot = {key: val.copy() for key, val in self.params_.items()}
                opt.step(grads)
        if any(not np.all(np.isfinite(v)) for v in self.params_.values()):
            raise FitDivergedError(
                f"non-finite parameters after epoch {self.epochs - 1}",
                snapshot,
                self.epochs - 1,
            )
        self.final_loss_ = _mean_ce(
            self._predict(self.params_, data.logits, feats), data.labels
        )
        return self

    def predict_proba(self, logits, features=None) -> np.ndarray:
        """Calibrated probabilities for one logit vector or a batch of rows."""
        if not hasattr(self, "params_"):
            raise ValueError("calibrator is not fitted; call fit() first")
        logits = np.asarray(logits, dtype=np.float64)
        single = logits.ndim == 1
        logits = np.atleast_2d(logits)
        if logits.shape[1] != self.n_classes_:
            raise ValueError(
                f"expected {self.n_classes_} classes, got {logits.shape[1]}"
            )
        if not np.all(np.isfinite(logits)):
            raise ValueError("logits contain non-finite entries")
        feats = self._validate_features(features, logits.shape[0], "prediction")
        probs = self._predict(self.params_, logits, feats)
        return probs[0] if single else probs

    @property
    def tau_(self) -> float:
        """Fitted temperature ``exp(tau_raw)``."""
        return float(np.exp(self.params_["tau_raw"]))

    def _ce_cotangent(self, probs, labels):
        """d(mean CE)/d(pre-softmax input) pieces shared by the subclasses."""
        n = labels.size
        picked = probs[np.arange(n), labels]
        live = picked > PROB_FLOOR
        loss = float(-np.log(np.maximum(picked, PROB_FLOOR)).mean())
        return loss, picked, live


class TemperatureScaling(_BaseCalibrator):
    """Single-temperature rescaling of the logits.

    Parameters
    ----------
    epochs, batch_size, learning_rate, seed : optimizer configuration.
    init_tau : float
        Initial temperature (optimized as ``log tau``).

    Attributes
    ----------
    params_ : dict with ``tau_raw``.
    tau_ : fitted temperature.
    """

    @property
    def kind(self) -> str:
        return "ts"

    def _init_params(self, n_classes, feature_dim):
        return {"tau_raw": np.array(np.log(self.init_tau))}

    def _predict(self, params, logits, features):
        return softmax_rows(logits * np.exp(-params["tau_raw"]))

    def _loss_and_grads(self, params, logits, labels, features):
        scaled = logits * np.exp(-params["tau_raw"])
        probs = softmax_rows(scaled)
        loss, _, live = self._ce_cotangent(probs, labels)
        n = labels.size
        d_scaled = probs.copy()
        d_scaled[np.arange(n), labels] -= 1.0
        d_scaled *= (live / n)[:, None]
        return loss, {"tau_raw": np.array(-(d_scaled * scaled).sum())}


class ProbabilityBounding(_BaseCalibrator):
    """Box-constrained softmax calibration with learned uniform bounds.

    The prediction is ``bcsoftmax(logits / tau, (a, b))`` with
    ``a = sigmoid(a') / K`` and ``b = 1/K + (1 - 1/K) * sigmoid(b')``, so the
    bounds are always feasible.  With ``mode="linear"`` the raw heads ``a'``
    and ``b'`` are affine functions of the feature vector.

    Parameters
    ----------
    mode : {"constant", "linear"}
    use_lower, use_upper : bool
        Ablation switches; a disabled side is fixed at 0 (lower) or 1 (upper).

    Attributes
    ----------
    params_ : dict with ``tau_raw`` plus ``lower_raw`` / ``upper_raw``
        (constant mode) or ``{lower,upper}_{weight,bias}`` (linear mode) for
        each enabled side.
    """

    def __init__(
        self,
        mode: str = "constant",
        use_lower: bool = True,
        use_upper: bool = True,
        epochs: int = 500,
        batch_size: int = 128,
        learning_rate: float = 1e-3,
        seed: int = 0,
        init_tau: float = 1.5,
    ):
        super().__init__(epochs, batch_size, learning_rate, seed, init_tau)
        self.mode = mode
        self.use_lower = use_lower
        self.use_upper = use_upper

    @property
    def kind(self) -> str:
        return "pb-l" if self.mode == "linear" else "pb-c"

    def _needs_features(self) -> bool:
        return self.mode == "linear"

    def _check_mode(self):
        if self.mode not in ("constant", "linear"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if not (self.use_lower or self.use_upper):
            raise ValueError("at least one of use_lower/use_upper must be set")

    def _init_params(self, n_classes, feature_dim):
        self._check_mode()
        params = {"tau_raw": np.array(np.log(self.init_tau))}
        # raw heads start far in the sigmoid tails, so the bounds begin inactive
        # and the model starts out as plain temperature scaling
        if self.mode == "constant":
            if self.use_lower:
                params["lower_raw"] = np.array(-4.0)
            if self.use_upper:
                params["upper_raw"] = np.array(4.0)
        else:
            if self.use_lower:
                params["lower_weight"] = np.zeros(feature_dim)
                params["lower_bias"] = np.array(-4.0)
            if self.use_upper:
                params["upper_weight"] = np.zeros(feature_dim)
                params["upper_bias"] = np.array(4.0)
        return params

    def _raw_heads(self, params, features, n):
        if self.mode == "constant":
            raw_a = np.full(n, float(params["lower_raw"])) if self.use_lower else None
            raw_b = np.full(n, float(params["upper_raw"])) if self.use_upper else None
        else:
            raw_a = (
                features @ params["lower_weight"] + params["lower_bias"]
                if self.use_lower
                else None
            )
            raw_b = (
                features @ params["upper_weight"] + params["upper_bias"]
                if self.use_upper
                else None
            )
        return raw_a, raw_b

    def _bounds(self, params, features, n, k):
        raw_a, raw_b = self._raw_heads(params, features, n)
        a = expit(raw_a) / k if raw_a is not None else np.zeros(n)
        b = 1.0 / k + (1.0 - 1.0 / k) * expit(raw_b) if raw_b is not None else np.ones(n)
        return a, b, raw_a, raw_b

    def _predict(self, params, logits, features):
        n, k = logits.shape
        a, b, _, _ = self._bounds(params, features, n, k)
        scaled = logits * np.exp(-params["tau_raw"])
        return solve_uniform_rows(scaled, a, b).probs

    def _loss_and_grads(self, params, logits, labels, features):
        n, k = logits.shape
        a, b, raw_a, raw_b = self._bounds(params, features, n, k)
        scaled = logits * np.exp(-params["tau_raw"])
        sol = solve_uniform_rows(scaled, a, b)
        probs = sol.probs
        loss, picked, live = self._ce_cotangent(probs, labels)

        # cotangent of the solution: only the label coordinate receives weight
        cot = np.zeros_like(probs)
        cot[np.arange(n), labels] = np.where(
            live, -1.0 / (n * np.maximum(picked, PROB_FLOOR)), 0.0
        )
        free = ~(sol.lower_pinned | sol.upper_pinned)
        q = np.where(free, probs, 0.0)
        qv = (q * cot).sum(axis=1)
        with np.errstate(divide="ignore", invalid="ignore"):
            carried = np.where(sol.free_mass > 0.0, qv / sol.free_mass, 0.0)
        d_scaled = q * cot - q * carried[:, None]
        d_tau = -(d_scaled * scaled).sum()

        grads = {"tau_raw": np.array(d_tau)}
        shifted = cot - carried[:, None]
        if self.use_lower:
            d_a = (shifted * sol.lower_pinned).sum(axis=1)
            d_raw = d_a * _sigmoid_grad(raw_a) / k
            if self.mode == "constant":
                grads["lower_raw"] = np.array(d_raw.sum())
            else:
                grads["lower_weight"] = features.T @ d_raw
                grads["lower_bias"] = np.array(d_raw.sum())
        if self.use_upper:
            d_b = (shifted * sol.upper_pinned).sum(axis=1)
            d_raw = d_b * _sigmoid_grad(raw_b) * (1.0 - 1.0 / k)
            if self.mode == "constant":
                grads["upper_raw"] = np.array(d_raw.sum())
            else:
                grads["upper_weight"] = features.T @ d_raw
                grads["upper_bias"] = np.array(d_raw.sum())
        return loss, grads


class LogitBounding(_BaseCalibrator):
    """Calibration by clipping logits to learned thresholds ``c <= C``.

    The prediction is ``softmax(clip(logits, c, C) / tau)``.  The upper
    threshold is ``C = h1(c' + softplus(C'))``, which keeps ``c <= C`` by
    construction.  In constant mode ``h1`` squashes into the per-sample logit
    norm, ``h1(e) = ||logits|| * tanh(e)``, which prevents the thresholds from
    drifting off the logit scale; in linear mode ``h1`` is the identity and
    the raw heads are affine in the feature vector.

    Parameters
    ----------
    mode : {"constant", "linear"}
    use_lower, use_upper : bool
        Ablation switches; a disabled side leaves that end unclipped.

    Attributes
    ----------
    params_ : dict with ``tau_raw`` plus ``clip_base_raw`` / ``clip_gap_raw``
        (constant mode) or ``clip_{base,gap}_{weight,bias}`` (linear mode).
    """

    def __init__(
        self,
        mode: str = "constant",
        use_lower: bool = True,
        use_upper: bool = True,
        epochs: int = 500,
        batch_size: int = 128,
        learning_rate: float = 1e-3,
        seed: int = 0,
        init_tau: float = 1.5,
    ):
        super().__init__(epochs, batch_size, learning_rate, seed, init_tau)
        self.mode = mode
        self.use_lower = use_lower
        self.use_upper = use_upper

    @property
    def kind(self) -> str:
        return "lb-l" if self.mode == "linear" else "lb-c"

    def _needs_features(self) -> bool:
        return self.mode == "linear"

    def _check_mode(self):
        if self.mode not in ("constant", "linear"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if not (self.use_lower or self.use_upper):
            raise ValueError("at least one of use_lower/use_upper must be set")

    def _init_params(self, n_classes, feature_dim):
        self._check_mode()
        params = {"tau_raw": np.array(np.log(self.init_tau))}
        if self.mode == "constant":
            params["clip_base_raw"] = np.array(-4.0)
            if self.use_upper:
                params["clip_gap_raw"] = np.array(4.0)
        else:
            params["clip_base_weight"] = np.zeros(feature_dim)
            params["clip_base_bias"] = np.array(-4.0)
            if self.use_upper:
                params["clip_gap_weight"] = np.zeros(feature_dim)
                params["clip_gap_bias"] = np.array(4.0)
        return params

    def _raw_heads(self, params, features, n):
        if self.mode == "constant":
            base = np.full(n, float(params["clip_base_raw"]))
            gap = (
                np.full(n, float(params["clip_gap_raw"])) if self.use_upper else None
            )
        else:
            base = features @ params["clip_base_weight"] + params["clip_base_bias"]
            gap = (
                features @ params["clip_gap_weight"] + params["clip_gap_bias"]
                if self.use_upper
                else None
            )
        return base, gap

    def _thresholds(self, params, logits, features):
        n = logits.shape[0]
        base, gap = self._raw_heads(params, features, n)
        pre_low = base
        pre_high = base + _softplus(gap) if self.use_upper else None
        if self.mode == "constant":
            norm = np.linalg.norm(logits, axis=1)
            low = norm * np.tanh(pre_low) if self.use_lower else np.full(n, -np.inf)
            high = norm * np.tanh(pre_high) if self.use_upper else np.full(n, np.inf)
        else:
            norm = None
            low = pre_low if self.use_lower else np.full(n, -np.inf)
            high = pre_high if self.use_upper else np.full(n, np.inf)
        return low, high, base, gap, pre_high, norm

    def _predict(self, params, logits, features):
        low, high, *_ = self._thresholds(params, logits, features)
        clipped = np.clip(logits, low[:, None], high[:, None])
        return softmax_rows(clipped * np.exp(-params["tau_raw"]))

    def _loss_and_grads(self, params, logits, labels, features):
        n = logits.shape[0]
        low, high, base, gap, pre_high, norm = self._thresholds(
            params, logits, features
        )
        clipped = np.clip(logits, low[:, None], high[:, None])
        temp = np.exp(-params["tau_raw"])
        scaled = clipped * temp
        probs = softmax_rows(scaled)
        loss, _, live = self._ce_cotangent(probs, labels)

        d_scaled = probs.copy()
        d_scaled[np.arange(n), labels] -= 1.0
        d_scaled *= (live / n)[:, None]
        d_tau = -(d_scaled * scaled).sum()
        d_clip = d_scaled * temp
        # subgradient convention: a coordinate on the threshold belongs to the
        # threshold, not to the logit
        at_low = logits <= low[:, None]
        at_high = (logits >= high[:, None]) & ~at_low
        d_low = (d_clip * at_low).sum(axis=1)
        d_high = (d_clip * at_high).sum(axis=1)

        grads = {"tau_raw": np.array(d_tau)}
        if self.mode == "constant":
            d_base = np.zeros(n)
            if self.use_lower:
                d_base += d_low * norm * (1.0 - np.tanh(base) ** 2)
            if self.use_upper:
                dh_pre = d_high * norm * (1.0 - np.tanh(pre_high) ** 2)
                d_base += dh_pre
                grads["clip_gap_raw"] = np.array((dh_pre * expit(gap)).sum())
            grads["clip_base_raw"] = np.array(d_base.sum())
        else:
            d_base = d_low if self.use_lower else np.zeros(n)
            if self.use_upper:
                d_base = d_base + d_high
                d_gap = d_high * expit(gap)
                grads["clip_gap_weight"] = features.T @ d_gap
                grads["clip_gap_bias"] = np.array(d_gap.sum())
            grads["clip_base_weight"] = features.T @ d_base
            grads["clip_base_bias"] = np.array(d_base.sum())
        return loss, grads


# ---------------------------------------------------------------------------
# Registry and persistence
# ---------------------------------------------------------------------------


def _make(kind: str, **config):
    if kind == "ts":
        return TemperatureScaling(**config)
    if kind in ("pb-c", "pb-l"):
        mode = "linear" if kind == "pb-l" else "constant"
        return ProbabilityBounding(mode=mode, **config)
    if kind in ("lb-c", "lb-l"):
        mode = "linear" if kind == "lb-l" else "constant"
        return LogitBounding(mode=mode, **config)
    raise ValueError(f"unknown calibrator kind {kind!r}; expected one of {KINDS}")


def fit_calibrator(kind: str, data: LabeledLogitSet, **config):
    """Construct and fit the calibrator named by ``kind`` on ``data``."""
    model = _make(kind, **config)
    return model.fit(data.logits, data.labels, data.features)


def model_to_payload(model) -> dict:
    """JSON-serializable document describing a fitted calibrator."""
    if not hasattr(model, "params_"):
        raise ValueError("calibrator is not fitted")
    params = {
        key: (val.tolist() if val.ndim else float(val))
        for key, val in model.params_.items()
        if key != "tau_raw"
    }
    return {
        "kind": model.kind,
        "tau_raw": float(model.params_["tau_raw"]),
        "params": params,
        "flags": {
            "use_lower": bool(getattr(model, "use_lower", True)),
            "use_upper": bool(getattr(model, "use_upper", True)),
        },
        "meta": {
            "seed": int(model.seed),
            "epochs": int(model.epochs),
            "final_loss": float(getattr(model, "final_loss_", np.nan)),
            "n_classes": int(model.n_classes_),
            "n_features": (
                None if model.n_features_ is None else int(model.n_features_)
            ),
        },
    }


def model_from_payload(payload: dict):
    """Rebuild a fitted calibrator from :func:`model_to_payload` output."""
    kind = payload["kind"]
    config = {}
    if kind != "ts":
        config["use_lower"] = bool(payload["flags"]["use_lower"])
        config["use_upper"] = bool(payload["flags"]["use_upper"])
    model = _make(kind, seed=int(payload["meta"]["seed"]), **config)
    model.epochs = int(payload["meta"]["epochs"])
    params = {"tau_raw": np.array(float(payload["tau_raw"]))}
    for key, val in payload["params"].items():
        params[key] = np.array(val, dtype=np.float64)
    model.params_ = params
    model.n_classes_ = int(payload["meta"]["n_classes"])
    model.n_features_ = payload["meta"]["n_features"]
    loss = payload["meta"].get("final_loss")
    if loss is not None:
        model.final_loss_ = float(loss)
    return model


def save_model(model, path) -> None:
    with open(path, "w", encoding="utf-8") as handle:
        json.dump(model_to_payload(model), handle, indent=2, sort_keys=True)
        handle.write("\n")


def load_model(path):
    with open(path, encoding="utf-8") as handle:
        return model_from_payload(json.load(handle))
