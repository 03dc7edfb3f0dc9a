"""Spurious nonlinear-ICA solutions used as negative controls.

* The Darmois construction: the recursive conditional-CDF transform, either
  in closed form for jointly Gaussian observations or as a deterministic
  kernel estimator built from samples (no training involved).
* Rotated-Gaussian measure-preserving automorphisms that remix sources
  without changing their distribution.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.special import ndtr, ndtri

from .errors import (
    CapacityError,
    ConvergenceError,
    DomainError,
    SampleSizeError,
    SingularityError,
)
from .mixing import Inverted, MixingMap

_SQRT_2PI = float(np.sqrt(2.0 * np.pi))


def _phi(z):
    return np.exp(-0.5 * z * z) / _SQRT_2PI


# ---------------------------------------------------------------------------
# marginal CDF descriptors (shared by the MPA and empirical Darmois stages)
# ---------------------------------------------------------------------------


class Marginal:
    """A scalar distribution with smooth cdf / pdf / ppf."""

    def cdf(self, x):
        raise NotImplementedError

    def pdf(self, x):
        raise NotImplementedError

    def ppf(self, u):
        raise NotImplementedError

    def to_dict(self):
        raise NotImplementedError


@dataclass(frozen=True)
class UniformMarginal(Marginal):
    low: float = 0.0
    high: float = 1.0

    def cdf(self, x):
        return np.clip((np.asarray(x, dtype=float) - self.low) / (self.high - self.low),
                       0.0, 1.0)

    def pdf(self, x):
        x = np.asarray(x, dtype=float)
        inside = (x >= self.low) & (x <= self.high)
        return np.where(inside, 1.0 / (self.high - self.low), 0.0)

    def ppf(self, u):
        return self.low + (self.high - self.low) * np.asarray(u, dtype=float)

    def to_dict(self):
        return {"kind": "uniform", "low": self.low, "high": self.high}


@dataclass(frozen=True)
class GaussianMarginal(Marginal):
    mean: float = 0.0
    sigma: float = 1.0

    def cdf(self, x):
        return ndtr((np.asarray(x, dtype=float) - self.mean) / self.sigma)

    def pdf(self, x):
        return _phi((np.asarray(x, dtype=float) - self.mean) / self.sigma) / self.sigma

    def ppf(self, u):
        return self.mean + self.sigma * ndtri(np.asarray(u, dtype=float))

    def to_dict(self):
        return {"kind": "gaussian", "mean": self.mean, "sigma": self.sigma}


class EmpiricalMarginal(Marginal):
    """Kernel-smoothed CDF built from samples (strictly increasing)."""

    def __init__(self, samples, max_reference: int = 2000):
        samples = np.sort(np.asarray(samples, dtype=float))
        if samples.size < 100:
            raise SampleSizeError("empirical marginal needs at least 100 samples")
        if samples.size > max_reference:
            idx = np.unique(np.linspace(0, samples.size - 1, max_reference).astype(int))
            samples = samples[idx]
        self.ref = samples
        self.bandwidth = float(np.std(samples) * samples.size ** (-1.0 / 3.0))
        if self.bandwidth <= 0:
            raise SingularityError("degenerate sample column")

    def cdf(self, x):
        z = (np.asarray(x, dtype=float)[..., None] - self.ref) / self.bandwidth
        return np.mean(ndtr(z), axis=-1)

    def pdf(self, x):
        z = (np.asarray(x, dtype=float)[..., None] - self.ref) / self.bandwidth
        return np.mean(_phi(z), axis=-1) / self.bandwidth

    def ppf(self, u, tol=1e-11, max_iter=200):
        u = np.asarray(u, dtype=float)
        lo = np.full(u.shape, self.ref[0] - 12 * self.bandwidth)
        hi = np.full(u.shape, self.ref[-1] + 12 * self.bandwidth)
        x = np.interp(u, np.linspace(0, 1, self.ref.size), self.ref)
        for _ in range(max_iter):
            f = self.cdf(x) - u
            if np.all(np.abs(f) < tol):
                return x
            lo = np.where(f < 0, np.maximum(lo, x), lo)
            hi = np.where(f > 0, np.minimum(hi, x), hi)
            step = f / np.maximum(self.pdf(x), 1e-300)
            x_new = x - step
            bad = (x_new <= lo) | (x_new >= hi)
            x = np.where(bad, 0.5 * (lo + hi), x_new)
        raise ConvergenceError("empirical ppf did not converge",
                               float(np.max(np.abs(self.cdf(x) - u))))

    def to_dict(self):
        return {"kind": "empirical", "reference": self.ref.tolist()}


def marginal_from_dict(d: dict) -> Marginal:
    kind = d["kind"]
    if kind == "uniform":
        return UniformMarginal(d["low"], d["high"])
    if kind == "gaussian":
        return GaussianMarginal(d["mean"], d["sigma"])
    if kind == "empirical":
        return EmpiricalMarginal(np.asarray(d["reference"]))
    raise ValueError(f"unknown marginal kind {kind!r}")


# ---------------------------------------------------------------------------
# Darmois construction
# ---------------------------------------------------------------------------


_OPEN_LO = 1e-300
_OPEN_HI = float(np.nextafter(1.0, 0.0))


def _to_open_cube(u):
    # CDF values saturate to exactly 0/1 in floating point beyond ~8 sigma;
    # keep the declared open-cube range
    return np.clip(u, _OPEN_LO, _OPEN_HI)


class DarmoisMap:
    """The recursive conditional-CDF transform g: R^n -> (0,1)^n.

    Stage i maps x_i to the conditional CDF given x_{1:i-1}, so the output is
    jointly uniform on the unit hypercube and the Jacobian is lower
    triangular with determinant equal to the joint density.
    """

    def __init__(self, mode: str, n: int):
        self.mode = mode
        self.n = n

    # subclass API
    def apply(self, x) -> np.ndarray:
        raise NotImplementedError

    def jacobian(self, x) -> np.ndarray:
        raise NotImplementedError

    def invert(self, u) -> np.ndarray:
        raise NotImplementedError


class AnalyticGaussianDarmois(DarmoisMap):
    def __init__(self, mean, cov):
        mean = np.asarray(mean, dtype=float)
        cov = np.asarray(cov, dtype=float)
        n = mean.size
        super().__init__("analytic-gaussian", n)
        if cov.shape != (n, n):
            raise ValueError("covariance shape mismatch")
        try:
            np.linalg.cholesky(cov)
        except np.linalg.LinAlgError as exc:
            raise SingularityError("covariance must be positive definite") from exc
        self.mean = mean
        self.cov = cov
        # per-stage regression coefficients and conditional stddevs
        self._beta = []
        self._sigma = []
        for i in range(n):
            if i == 0:
                beta = np.zeros(0)
                var = cov[0, 0]
            else:
                beta = np.linalg.solve(cov[:i, :i], cov[:i, i])
                var = cov[i, i] - cov[i, :i] @ beta
            if var <= 0:
                raise SingularityError("conditional variance collapsed")
            self._beta.append(beta)
            self._sigma.append(float(np.sqrt(var)))

    def _cond_mean(self, i, x):
        if i == 0:
            return np.full(x.shape[0], self.mean[0])
        return self.mean[i] + (x[:, :i] - self.mean[:i]) @ self._beta[i]

    def apply(self, x):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        out = np.empty_like(x)
        for i in range(self.n):
            out[:, i] = ndtr((x[:, i] - self._cond_mean(i, x)) / self._sigma[i])
        return _to_open_cube(out)

    def jacobian(self, x):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        m = x.shape[0]
        J = np.zeros((m, self.n, self.n))
        for i in range(self.n):
            z = (x[:, i] - self._cond_mean(i, x)) / self._sigma[i]
            dens = _phi(z) / self._sigma[i]
            J[:, i, i] = dens
            if i > 0:
                J[:, i, :i] = -dens[:, None] * self._beta[i][None, :]
        return J

    def invert(self, u):
        u = np.atleast_2d(np.asarray(u, dtype=float))
        if np.any((u <= 0) | (u >= 1)):
            raise DomainError("Darmois inverse needs coordinates in (0,1)")
        x = np.empty_like(u)
        for i in range(self.n):
            x[:, i] = self._cond_mean(i, x) + self._sigma[i] * ndtri(u[:, i])
        return x


class EmpiricalDarmois(DarmoisMap):
    """Kernel conditional-CDF stages built from a sample matrix.

    Stage 1 is a kernel-smoothed empirical CDF; stage i >= 2 weights the
    reference points by a Gaussian kernel in the conditioning coordinates
    (bandwidth: median pairwise distance times N^(-1/(4+dim_cond))) and
    accumulates a smoothed indicator in the own coordinate.  Reference points
    are subsampled deterministically for tractability of the kernel sums.
    """

    def __init__(self, samples, max_reference: int = 2000):
        samples = np.asarray(samples, dtype=float)
        if samples.ndim != 2:
            raise ValueError("samples must be a matrix")
        n = samples.shape[1]
        if n > 3:
            raise CapacityError("empirical Darmois is limited to n <= 3")
        if samples.shape[0] < 1000:
            raise SampleSizeError("empirical Darmois needs at least 1000 samples")
        super().__init__("empirical", n)
        n_build = samples.shape[0]
        if n_build > max_reference:
            idx = np.unique(
                np.linspace(0, n_build - 1, max_reference).astype(int)
            )
            ref = samples[np.argsort(samples[:, 0])][idx]
        else:
            ref = samples
        self.ref = ref
        m = ref.shape[0]
        # own-coordinate smoothing is only there to make the stages strictly
        # increasing and differentiable; keep it narrow so the pushforward
        # stays uniform well within KS resolution
        self._h_own = np.std(ref, axis=0) * m ** (-0.5)
        if np.any(self._h_own <= 0):
            raise SingularityError("degenerate sample column")
        # conditioning bandwidth: median pairwise distance times N^(-1/(4+dim_cond)),
        # with N the reference-sample count entering the kernel sums
        self._h_cond = []
        for i in range(n):
            if i == 0:
                self._h_cond.append(None)
                continue
            sub = ref[:: max(1, m // 500), :i]
            d2 = np.sum((sub[:, None, :] - sub[None, :, :]) ** 2, axis=-1)
            med = float(np.sqrt(np.median(d2[np.triu_indices(sub.shape[0], k=1)])))
            h = max(med, 1e-3) * m ** (-1.0 / (4 + i))
            self._h_cond.append(h)

    def _stage(self, i, x, want_jac=False):
        """Stage-i conditional CDF values (and optionally gradients)."""
        if i == 0:
            w = np.ones((x.shape[0], self.ref.shape[0]))
            dw = None
        else:
            diff = x[:, None, :i] - self.ref[None, :, :i]
            w = np.exp(-0.5 * np.sum(diff * diff, axis=-1) / self._h_cond[i] ** 2)
            # d w / d x_k = -w * diff_k / h^2 for conditioning coordinate k
            dw = (-w[:, :, None] * diff / self._h_cond[i] ** 2) if want_jac else None
        zi = (x[:, i, None] - self.ref[None, :, i]) / self._h_own[i]
        Phi = ndtr(zi)
        B = np.sum(w, axis=1)
        A = np.sum(w * Phi, axis=1)
        val = A / B
        if not want_jac:
            return val, None
        grad = np.zeros((x.shape[0], self.n))
        grad[:, i] = np.sum(w * _phi(zi), axis=1) / (self._h_own[i] * B)
        if i > 0:
            dA = np.sum(dw * Phi[:, :, None], axis=1)
            dB = np.sum(dw, axis=1)
            grad[:, :i] = (dA * B[:, None] - A[:, None] * dB) / (B * B)[:, None]
        return val, grad

    _EVAL_CHUNK = 2048  # keeps (chunk, m_ref) kernel matrices small

    def apply(self, x):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        out = np.empty_like(x)
        for a in range(0, x.shape[0], self._EVAL_CHUNK):
            blk = x[a:a + self._EVAL_CHUNK]
            for i in range(self.n):
                out[a:a + self._EVAL_CHUNK, i], _ = self._stage(i, blk)
        return _to_open_cube(out)

    def jacobian(self, x):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        J = np.zeros((x.shape[0], self.n, self.n))
        for a in range(0, x.shape[0], self._EVAL_CHUNK):
            blk = x[a:a + self._EVAL_CHUNK]
            for i in range(self.n):
                _, grad = self._stage(i, blk, want_jac=True)
                J[a:a + self._EVAL_CHUNK, i, :] = grad
        return J

    def invert(self, u, tol=1e-10, max_iter=200):
        u = np.atleast_2d(np.asarray(u, dtype=float))
        if np.any((u <= 0) | (u >= 1)):
            raise DomainError("Darmois inverse needs coordinates in (0,1)")
        x = np.zeros((u.shape[0], self.n))
        for i in range(self.n):
            lo = np.full(u.shape[0], self.ref[:, i].min() - 12 * self._h_own[i])
            hi = np.full(u.shape[0], self.ref[:, i].max() + 12 * self._h_own[i])
            for bound in (lo, hi):
                x[:, i] = bound
                val, _ = self._stage(i, x)
                if np.any((u[:, i] < val) if bound is lo else (u[:, i] > val)):
                    raise DomainError(
                        f"stage {i} quantile outside the estimator's support"
                    )
            xi = np.full(u.shape[0], np.median(self.ref[:, i]))
            for _ in range(max_iter):
                x[:, i] = xi
                val, grad = self._stage(i, x, want_jac=True)
                f = val - u[:, i]
                if np.all(np.abs(f) < tol):
                    break
                lo = np.where(f < 0, np.maximum(lo, xi), lo)
                hi = np.where(f > 0, np.minimum(hi, xi), hi)
                step = f / np.maximum(grad[:, i], 1e-300)
                xi_new = xi - step
                bad = (xi_new <= lo) | (xi_new >= hi)
                xi = np.where(bad, 0.5 * (lo + hi), xi_new)
            else:
                raise ConvergenceError("Darmois stage inversion did not converge",
                                       float(np.max(np.abs(f))))
            x[:, i] = xi
        return x


def darmois_build(data, mode: str = "empirical", max_reference: int = 2000) -> DarmoisMap:
    """Build the Darmois transform from samples or Gaussian moments.

    ``data`` is either a sample matrix (``mode="empirical"``) or a
    ``(mean, covariance)`` pair (``mode="analytic-gaussian"``).
    """
    if mode == "analytic-gaussian":
        mean, cov = data
        return AnalyticGaussianDarmois(mean, cov)
    if mode == "empirical":
        return EmpiricalDarmois(np.asarray(data, dtype=float),
                                max_reference=max_reference)
    raise ValueError(f"unknown Darmois mode {mode!r}")


class _DarmoisForward(MixingMap):
    """The uniformizer g as a MixingMap (forward: observations -> (0,1)^n)."""

    def __init__(self, d: DarmoisMap):
        self.d = d
        self.n = d.n

    def _forward(self, s):
        return self.d.apply(s)

    def _inverse(self, x):
        return self.d.invert(x)

    def _jacobian(self, s):
        return self.d.jacobian(s)

    def to_dict(self):
        return {"variant": "darmois-uniformizer", "mode": self.d.mode}


def darmois_uniformizer(d: DarmoisMap) -> MixingMap:
    return _DarmoisForward(d)


def darmois_as_mixing(d: DarmoisMap) -> MixingMap:
    """The spurious mixing f = g^(-1) mapping uniform sources to observations."""
    return Inverted(_DarmoisForward(d))


# ---------------------------------------------------------------------------
# rotated-Gaussian measure-preserving automorphism
# ---------------------------------------------------------------------------


class MpaMap(MixingMap):
    """F_Z^(-1) o Phi o R o Phi^(-1) o F_Z for an orthogonal R.

    Maps the source space to itself without changing the (factorized)
    source distribution.  CDF values are clamped to [eps, 1-eps] before the
    Gaussian quantile; clamping triggers a warning.
    """

    def __init__(self, rotation, marginals, clamp_eps: float = 1e-12):
        R = np.asarray(rotation, dtype=float)
        n = R.shape[0]
        if R.shape != (n, n) or not np.allclose(R @ R.T, np.eye(n), atol=1e-10):
            raise ValueError("rotation must be orthogonal")
        if len(marginals) != n:
            raise ValueError("need one marginal per coordinate")
        self.R = R
        self.marginals = list(marginals)
        self.clamp_eps = float(clamp_eps)
        self.n = n

    def _clamp(self, u):
        clipped = np.clip(u, self.clamp_eps, 1.0 - self.clamp_eps)
        if np.any(clipped != u):
            warnings.warn("MPA clamped CDF values at the tails", RuntimeWarning,
                          stacklevel=3)
        return clipped

    def _gauss_coords(self, s):
        u = np.stack([m.cdf(s[:, i]) for i, m in enumerate(self.marginals)], axis=1)
        return ndtri(self._clamp(u))

    def _forward(self, s):
        g = self._gauss_coords(s)
        y = g @ self.R.T
        u2 = self._clamp(ndtr(y))
        return np.stack([m.ppf(u2[:, i]) for i, m in enumerate(self.marginals)], axis=1)

    def _inverse(self, x):
        g = self._gauss_coords(x)
        y = g @ self.R
        u2 = self._clamp(ndtr(y))
        return np.stack([m.ppf(u2[:, i]) for i, m in enumerate(self.marginals)], axis=1)

    def _jacobian(self, s):
        g = self._gauss_coords(s)
        y = g @ self.R.T
        z = np.stack([m.ppf(self._clamp(ndtr(y[:, i])))
                      for i, m in enumerate(self.marginals)], axis=1)
        pdf_in = np.stack([m.pdf(s[:, i]) for i, m in enumerate(self.marginals)], axis=1)
        pdf_out = np.stack([m.pdf(z[:, i]) for i, m in enumerate(self.marginals)], axis=1)
        d_in = pdf_in / _phi(g)       # d/ds of Phi^(-1)(F(s))
        d_out = _phi(y) / pdf_out     # d/dy of F^(-1)(Phi(y))
        return d_out[:, :, None] * self.R[None] * d_in[:, None, :]

    def to_dict(self):
        return {"variant": "mpa", "rotation": self.R.tolist(),
                "marginals": [m.to_dict() for m in self.marginals],
                "clamp_eps": self.clamp_eps}


def mpa_apply(mpa: MpaMap, s):
    """Push source point(s) through the measure-preserving automorphism."""
    return mpa.forward(s)
