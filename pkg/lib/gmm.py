#!/usr/bin/env python3
"""
Two-Component Gaussian Mixture
Diagonal-covariance EM with a variance floor, run from many random
initializations; the highest-likelihood restart wins.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import List, Optional

import numpy as np
from scipy.special import logsumexp

from lib.errors import NumericError, ParameterError

logger = logging.getLogger(__name__)

VARIANCE_FLOOR = 1e-6
COMPONENTS = 2
MIN_POINTS = 4
_LOG_2PI = np.log(2.0 * np.pi)


@dataclass
class GmmModel:
    weights: np.ndarray    # (2,)
    means: np.ndarray      # (2, D)
    variances: np.ndarray  # (2, D)
    log_likelihood: float = float("-inf")
    iterations: int = 0
    converged: bool = False
    history: List[float] = field(default_factory=list)
    restart: int = 0
    restart_log_likelihoods: List[float] = field(default_factory=list)

    def log_joint(self, features: np.ndarray) -> np.ndarray:
        """N×2 matrix of log w_k + log N(x | μ_k, diag σ²_k)"""
        x = _as_matrix(features)
        out = np.empty((x.shape[0], COMPONENTS))
        for k in range(COMPONENTS):
            var = self.variances[k]
            quad = ((x - self.means[k]) ** 2 / var).sum(axis=1)
            out[:, k] = np.log(self.weights[k]) - 0.5 * (quad + np.log(var).sum() + x.shape[1] * _LOG_2PI)
        return out

    def score(self, features: np.ndarray) -> float:
        return float(logsumexp(self.log_joint(features), axis=1).sum())

    def responsibilities(self, features: np.ndarray) -> np.ndarray:
        joint = self.log_joint(features)
        return np.exp(joint - logsumexp(joint, axis=1, keepdims=True))


def _as_matrix(features: np.ndarray) -> np.ndarray:
    x = np.asarray(features, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    if x.ndim != 2:
        raise ParameterError(f"features must be N×D, got shape {x.shape}")
    return x


def random_init(features: np.ndarray, rng: np.random.Generator) -> GmmModel:
    """Two distinct random feature vectors as means, data variance, equal weights"""
    x = _as_matrix(features)
    picks = rng.choice(x.shape[0], size=COMPONENTS, replace=False)
    variance = np.maximum(x.var(axis=0), VARIANCE_FLOOR)
    return GmmModel(np.full(COMPONENTS, 1.0 / COMPONENTS), x[picks].copy(), np.stack([variance, variance]))


def _m_step(x: np.ndarray, resp: np.ndarray, previous: GmmModel) -> GmmModel:
    mass = resp.sum(axis=0)
    means = previous.means.copy()
    variances = previous.variances.copy()
    for k in range(COMPONENTS):
        # an empty component keeps its previous Gaussian
        if mass[k] <= 1e-12 * x.shape[0]:
            continue
        means[k] = resp[:, k] @ x / mass[k]
        variances[k] = np.maximum(resp[:, k] @ (x - means[k]) ** 2 / mass[k], VARIANCE_FLOOR)
    weights = np.maximum(mass / x.shape[0], 1e-12)
    return GmmModel(weights / weights.sum(), means, variances)


def em_single_run(features: np.ndarray, init: GmmModel, tol: float = 1e-6, max_iter: int = 300) -> GmmModel:
    """EM from a given initialization; stops when the relative log-likelihood change drops below tol"""
    x = _as_matrix(features)
    model = replace(init, weights=np.asarray(init.weights, dtype=np.float64),
                    means=np.asarray(init.means, dtype=np.float64).reshape(COMPONENTS, -1),
                    variances=np.maximum(np.asarray(init.variances, dtype=np.float64).reshape(COMPONENTS, -1),
                                         VARIANCE_FLOOR))
    ll = model.score(x)
    history = [ll]
    converged = False
    iterations = 0
    for iterations in range(1, max_iter + 1):
        model = _m_step(x, model.responsibilities(x), model)
        new_ll = model.score(x)
        history.append(new_ll)
        converged = abs(new_ll - ll) < tol * max(abs(ll), 1e-300)
        ll = new_ll
        if converged or not np.isfinite(ll):
            break
    return replace(model, log_likelihood=float(ll), iterations=iterations, converged=converged, history=history)


def gmm_em_fit(features: np.ndarray, restarts: int = 100, seed: int = 0, tol: float = 1e-6,
               max_iter: int = 300, workers: int = 1) -> GmmModel:
    """Best-of-restarts fit; ties keep the lowest restart index"""
    x = _as_matrix(features)
    if x.shape[0] < MIN_POINTS:
        raise ParameterError(f"image too small for segmentation ({x.shape[0]} patches, need {MIN_POINTS})")
    if restarts < 1:
        raise ParameterError(f"restarts must be positive, got {restarts}")
    streams = np.random.SeedSequence(seed).spawn(restarts)

    def _run(index: int) -> GmmModel:
        init = random_init(x, np.random.default_rng(streams[index]))
        return replace(em_single_run(x, init, tol, max_iter), restart=index)

    if workers <= 1:
        runs = [_run(i) for i in range(restarts)]
    else:
        with ThreadPoolExecutor(max_workers=workers) as executor:
            runs = list(executor.map(_run, range(restarts)))

    best: Optional[GmmModel] = None
    for run in runs:
        if np.isfinite(run.log_likelihood) and (best is None or run.log_likelihood > best.log_likelihood):
            best = run
    if best is None:
        raise NumericError("every EM restart produced a non-finite log-likelihood")
    logger.debug(f"EM best restart {best.restart}/{restarts}: ll={best.log_likelihood:.4f} "
                 f"after {best.iterations} iterations")
    return replace(best, restart_log_likelihoods=[r.log_likelihood for r in runs])


def tamper_component(model: GmmModel, responsibilities: np.ndarray) -> int:
    """Smaller-weight component; equal weights fall back to smaller responsibility mass, then lower index"""
    w0, w1 = model.weights
    if w0 != w1:
        return 0 if w0 < w1 else 1
    mass = responsibilities.sum(axis=0)
    if mass[0] != mass[1]:
        return 0 if mass[0] < mass[1] else 1
    return 0
