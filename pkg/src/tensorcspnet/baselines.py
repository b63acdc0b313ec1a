"""Reference classifiers: CSP with log-variance features, MDM and TSM,
plus a one-versus-rest wrapper for multiclass problems.
"""
from dataclasses import dataclass

import numpy as np
from scipy.optimize import minimize

from .errors import NumericalError
from .euclid import log_softmax, softmax
from .geometry import distance, frechet_mean
from .symmat import reconstruct, sym_eig

CSP_MAX_COND = 1e12


# --------------------------------------------------------------------------
# CSP


@dataclass
class CspModel:
    """Spatial filters as columns of ``W`` ordered by decreasing class-1 ratio."""

    W: np.ndarray
    lam_plus: np.ndarray  # diag of W^T S+ W; W^T S- W has diag 1 - lam_plus

    @property
    def generalized_eigenvalues(self):
        return self.lam_plus / (1.0 - self.lam_plus)


def csp_fit(sigma_plus, sigma_minus):
    """Solve ``S+ w = lam S- w`` by whitening the composite covariance."""
    comp = sym_eig(sigma_plus + sigma_minus)
    if comp.lam[-1] <= 0 or comp.lam[0] / comp.lam[-1] > CSP_MAX_COND:
        raise NumericalError(
            "composite covariance is ill-conditioned "
            f"(eigenvalues {comp.lam[0]:.3g} .. {comp.lam[-1]:.3g})",
            residual=float(comp.lam[0] / max(comp.lam[-1], 1e-300)),
        )
    P = (comp.U / np.sqrt(comp.lam)).T  # whitening: P (S+ + S-) P^T = I
    rot = sym_eig(P @ sigma_plus @ P.T)
    W = P.T @ rot.U
    return CspModel(W, rot.lam)


def _selected(C, k):
    if not 1 <= k <= C // 2:
        raise ValueError(f"k must lie in [1, {C // 2}] for {C} channels, got {k}")
    return np.r_[np.arange(k), np.arange(C - k, C)]


def csp_features(x, model: CspModel, k):
    """Log-power of the ``k`` first and ``k`` last filters; ``x`` is ``(..., C, T)``."""
    C = model.W.shape[0]
    idx = _selected(C, k)
    proj = np.swapaxes(model.W[:, idx], 0, 1) @ x
    power = np.mean(proj ** 2, axis=-1)
    if np.any(power <= 0):
        raise ValueError("degenerate signal: a projected variance is zero")
    return np.log(power)


class CspClassifier:
    """Binary CSP (optionally per band) with a logistic-regression head.

    Inputs are band-filtered trials ``(N, F, C, T)``.
    """

    def __init__(self, k=3, ridge=1e-4):
        self.k = k
        self.ridge = ridge

    def _covs(self, x):
        S = x @ np.swapaxes(x, -1, -2) / x.shape[-1]
        tr = np.trace(S, axis1=-2, axis2=-1) / S.shape[-1]
        return S + self.ridge * tr[..., None, None] * np.eye(S.shape[-1])

    def _features(self, x):
        return np.concatenate(
            [csp_features(x[:, j], m, self.k) for j, m in enumerate(self.models)], axis=1)

    def fit(self, x, y):
        _selected(x.shape[-2], self.k)
        S = self._covs(x)
        self.models = [csp_fit(S[y == 1, j].mean(axis=0), S[y == 0, j].mean(axis=0))
                       for j in range(x.shape[1])]
        self.head = LogisticRegression().fit(self._features(x), y)
        return self

    def decision_function(self, x):
        return self.head.decision_function(self._features(x))

    def predict(self, x):
        return (self.decision_function(x) > 0).astype(int)


# --------------------------------------------------------------------------
# logistic regression (shared by TSM and CSP)


class LogisticRegression:
    """Multinomial logistic regression fitted by L-BFGS to gradient norm ``tol``."""

    def __init__(self, l2=1e-4, tol=1e-6, max_iter=2000):
        self.l2 = l2
        self.tol = tol
        self.max_iter = max_iter

    def fit(self, X, y):
        X = np.asarray(X, dtype=np.float64)
        self.classes = int(y.max()) + 1
        self.mu = X.mean(axis=0)
        self.sd = X.std(axis=0)
        self.sd[self.sd == 0] = 1.0
        Z = np.hstack([(X - self.mu) / self.sd, np.ones((len(X), 1))])
        K, d = self.classes, Z.shape[1]
        onehot = np.eye(K)[y]
        reg = np.ones(d)
        reg[-1] = 0.0

        def objective(theta):
            B = theta.reshape(d, K)
            logits = Z @ B
            lp = log_softmax(logits)
            loss = -np.mean(np.sum(onehot * lp, axis=1))
            loss += 0.5 * self.l2 * np.sum(reg[:, None] * B ** 2)
            grad = Z.T @ (np.exp(lp) - onehot) / len(Z) + self.l2 * reg[:, None] * B
            return loss, grad.ravel()

        res = minimize(objective, np.zeros(d * K), jac=True, method="L-BFGS-B",
                       options={"gtol": self.tol, "maxiter": self.max_iter})
        self.coef = res.x.reshape(d, K)
        return self

    def logits(self, X):
        Z = np.hstack([(np.asarray(X) - self.mu) / self.sd, np.ones((len(X), 1))])
        return Z @ self.coef

    def predict_proba(self, X):
        return softmax(self.logits(X))

    def predict(self, X):
        return np.argmax(self.logits(X), axis=1)

    def decision_function(self, X):
        """Signed margin of class 1 over class 0 (binary case)."""
        lg = self.logits(X)
        return lg[:, 1] - lg[:, 0]


# --------------------------------------------------------------------------
# MDM


def _check_labels(labels, classes=None):
    labels = np.asarray(labels)
    k = int(labels.max()) + 1 if classes is None else classes
    missing = [c for c in range(k) if not np.any(labels == c)]
    if missing:
        raise ValueError(f"no training samples for classes {missing}")
    return k


@dataclass
class MdmModel:
    class_means: np.ndarray  # (K, n, n)

    def distances(self, samples):
        samples = np.asarray(samples, dtype=np.float64)
        return np.stack([distance(M, samples) for M in self.class_means], axis=-1)

    def predict(self, samples):
        return np.argmin(self.distances(samples), axis=-1)

    def decision_function(self, samples):
        """Distance gap ``d(rest) - d(target)`` for a binary model."""
        d = self.distances(samples)
        return d[..., 0] - d[..., 1]


def mdm_fit(samples, labels, classes=None):
    k = _check_labels(labels, classes)
    samples = np.asarray(samples, dtype=np.float64)
    return MdmModel(np.stack([frechet_mean(samples[labels == c]) for c in range(k)]))


def mdm_predict(model: MdmModel, sample):
    return model.predict(sample)


class MdmClassifier:
    def fit(self, x, y):
        self.model = mdm_fit(x, y)
        return self

    def predict(self, x):
        return self.model.predict(x)

    def decision_function(self, x):
        return self.model.decision_function(x)


# --------------------------------------------------------------------------
# TSM


def tangent_vectorize(reference, samples):
    """Upper-triangle coordinates of ``log(P^-1/2 S P^-1/2)`` (off-diagonals * sqrt 2)."""
    ref = sym_eig(reference)
    isq = reconstruct(ref, 1.0 / np.sqrt(ref.lam))
    inner = sym_eig(isq @ samples @ isq)
    L = reconstruct(inner, np.log(inner.lam))
    n = L.shape[-1]
    iu, ju = np.triu_indices(n)
    scale = np.where(iu == ju, 1.0, np.sqrt(2.0))
    return L[..., iu, ju] * scale


@dataclass
class TsmModel:
    reference: np.ndarray
    classifier: LogisticRegression

    def features(self, samples):
        return tangent_vectorize(self.reference, np.asarray(samples, dtype=np.float64))

    def predict(self, samples):
        return self.classifier.predict(self.features(samples))

    def decision_function(self, samples):
        return self.classifier.decision_function(self.features(samples))


def tsm_fit(samples, labels, l2=1e-4, tol=1e-6):
    labels = np.asarray(labels)
    if np.unique(labels).size < 2:
        raise ValueError("TSM needs at least two classes")
    _check_labels(labels)
    samples = np.asarray(samples, dtype=np.float64)
    ref = frechet_mean(samples)
    clf = LogisticRegression(l2=l2, tol=tol).fit(tangent_vectorize(ref, samples), labels)
    return TsmModel(ref, clf)


def tsm_predict(model: TsmModel, sample):
    return model.predict(sample)


class TsmClassifier:
    def fit(self, x, y):
        self.model = tsm_fit(x, y)
        return self

    def predict(self, x):
        return self.model.predict(x)

    def decision_function(self, x):
        return self.model.decision_function(x)


# --------------------------------------------------------------------------
# one-versus-rest


class OvrModel:
    """One binary model per class; predicts the class with the largest score."""

    def __init__(self, models):
        self.models = models

    def scores(self, x):
        return np.stack([m.decision_function(x) for m in self.models], axis=-1)

    def predict(self, x):
        return np.argmax(self.scores(x), axis=-1)


def ovr_wrap(factory, samples, labels):
    """Fit ``factory()`` once per class on ``class c`` (label 1) versus the rest."""
    labels = np.asarray(labels)
    k = _check_labels(labels)
    if k < 2:
        raise ValueError("one-versus-rest needs at least two classes")
    return OvrModel([factory().fit(samples, (labels == c).astype(int)) for c in range(k)])

