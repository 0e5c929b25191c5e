"""Gaussian-process surrogate (ARD squared-exponential) and expected improvement."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import linalg, optimize
from scipy.stats import norm

from .errors import NumericalError, UsageError

JITTERS = (0.0, 1e-8, 1e-7, 1e-6, 1e-5, 1e-4)

# log-space hyperparameter bounds for inputs encoded to the unit cube
LOG_LENGTHSCALE = (np.log(1e-2), np.log(10.0))
LOG_SIGNAL = (np.log(5e-2), np.log(20.0))
LOG_NOISE_MAX = np.log(1.0)


def se_kernel(a: np.ndarray, b: np.ndarray, lengthscales: np.ndarray, signal_var: float) -> np.ndarray:
    """``signal_var * exp(-0.5 * sum(((a - b) / lengthscales)^2))`` for all row pairs."""
    sa = a / lengthscales
    sb = b / lengthscales
    d2 = (sa * sa).sum(1)[:, None] + (sb * sb).sum(1)[None, :] - 2.0 * sa @ sb.T
    return signal_var * np.exp(-0.5 * np.maximum(d2, 0.0))


def _cholesky(k: np.ndarray) -> tuple[np.ndarray, float]:
    eye = np.eye(len(k))
    for jitter in JITTERS:
        try:
            return linalg.cholesky(k + jitter * eye, lower=True), jitter
        except linalg.LinAlgError:
            continue
    raise NumericalError(f"kernel matrix not positive definite even with jitter {JITTERS[-1]}")


@dataclass
class GPSurrogate:
    x: np.ndarray  # (n, d), unit cube
    y: np.ndarray  # raw targets
    y_mean: float
    y_std: float
    lengthscales: np.ndarray
    signal_var: float
    noise_var: float
    chol: np.ndarray
    alpha: np.ndarray
    jitter: float = 0.0

    @property
    def prior_sd(self) -> float:
        return float(np.sqrt(self.signal_var) * self.y_std)

    def posterior(self, xq) -> tuple[np.ndarray, np.ndarray]:
        """Latent mean and standard deviation at query rows, in the units of ``y``."""
        xq = np.atleast_2d(np.asarray(xq, dtype=np.float64))
        ks = se_kernel(xq, self.x, self.lengthscales, self.signal_var)
        mu = ks @ self.alpha
        v = linalg.solve_triangular(self.chol, ks.T, lower=True)
        var = np.maximum(self.signal_var - (v * v).sum(0), 0.0)
        return self.y_mean + self.y_std * mu, self.y_std * np.sqrt(var)


def _assemble(x, y, ls, sv, nv) -> GPSurrogate:
    y_mean = float(y.mean())
    y_std = float(y.std()) if len(y) > 1 and y.std() > 0 else 1.0
    z = (y - y_mean) / y_std
    k = se_kernel(x, x, ls, sv) + nv * np.eye(len(x))
    chol, jitter = _cholesky(k)
    alpha = linalg.cho_solve((chol, True), z)
    return GPSurrogate(x, y, y_mean, y_std, ls, sv, nv, chol, alpha, jitter)


def _neg_lml(theta, x, z, d, noise_fixed):
    ls = np.exp(theta[:d])
    sv = np.exp(theta[d])
    nv = noise_fixed if noise_fixed is not None else np.exp(theta[d + 1])
    k = se_kernel(x, x, ls, sv) + nv * np.eye(len(x))
    try:
        chol, _ = _cholesky(k)
    except NumericalError:
        return 1e10
    a = linalg.cho_solve((chol, True), z)
    return 0.5 * z @ a + np.log(np.diag(chol)).sum() + 0.5 * len(z) * np.log(2 * np.pi)


def gp_fit(x, y, noise: float = 1e-6, *, optimize_hypers: bool = True, n_restarts: int = 5,
           seed: int | tuple = 0, lengthscales=None, signal_var: float = 1.0, fit_noise: bool = True) -> GPSurrogate:
    """Fit a GP to ``(x, y)`` with ``x`` in the unit cube.

    Targets are standardized. Length-scales, signal variance and (when
    ``fit_noise``) the noise variance are chosen by maximizing the log marginal
    likelihood from ``n_restarts`` random starts; ``noise`` is the noise
    variance floor in standardized units. With ``optimize_hypers=False`` the
    given ``lengthscales``/``signal_var``/``noise`` are used as-is.
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    if len(x) == 0 or len(x) != len(y):
        raise UsageError(f"gp_fit needs matching, non-empty x/y; got {len(x)} and {len(y)}")
    if noise < 0:
        raise UsageError("noise variance must be non-negative")
    d = x.shape[1]
    if not optimize_hypers or len(x) < 2:
        ls = np.full(d, 0.3) if lengthscales is None else np.broadcast_to(np.asarray(lengthscales, float), (d,)).copy()
        return _assemble(x, y, ls, float(signal_var), float(noise))

    y_std = y.std() if y.std() > 0 else 1.0
    z = (y - y.mean()) / y_std
    floor = max(noise, 1e-10)
    bounds = [LOG_LENGTHSCALE] * d + [LOG_SIGNAL]
    noise_fixed = None
    if fit_noise and floor < 1.0:
        bounds.append((np.log(floor), LOG_NOISE_MAX))
    else:
        noise_fixed = floor
    rng = np.random.default_rng(seed)
    starts = [np.array([np.log(0.3)] * d + [0.0] + ([np.log(max(floor, 1e-3))] if noise_fixed is None else []))]
    for _ in range(max(0, n_restarts - 1)):
        starts.append(np.array([rng.uniform(lo, hi) for lo, hi in bounds]))
    best = None
    for s in starts:
        s = np.clip(s, [b[0] for b in bounds], [b[1] for b in bounds])
        res = optimize.minimize(_neg_lml, s, args=(x, z, d, noise_fixed), method="L-BFGS-B", bounds=bounds)
        if best is None or res.fun < best.fun:
            best = res
    th = best.x
    nv = noise_fixed if noise_fixed is not None else float(np.exp(th[d + 1]))
    return _assemble(x, y, np.exp(th[:d]), float(np.exp(th[d])), nv)


def gp_posterior(gp: GPSurrogate, x) -> tuple[float, float]:
    """Posterior ``(mu, sigma)`` at a single encoded point."""
    mu, sd = gp.posterior(np.asarray(x, dtype=np.float64).reshape(1, -1))
    return float(mu[0]), float(sd[0])


def expected_improvement(mu, sigma, best: float):
    """Expected improvement over ``best`` for maximization; ``max(mu - best, 0)`` where sigma is 0."""
    mu = np.asarray(mu, dtype=np.float64)
    sigma = np.asarray(sigma, dtype=np.float64)
    if np.any(sigma < 0):
        raise UsageError("sigma must be non-negative")
    diff = mu - best
    safe = np.where(sigma > 0, sigma, 1.0)
    z = diff / safe
    ei = diff * norm.cdf(z) + sigma * norm.pdf(z)
    ei = np.where(sigma > 0, ei, np.maximum(diff, 0.0))
    ei = np.maximum(ei, 0.0)
    return float(ei) if ei.ndim == 0 else ei
