"""Diagonal Gaussian machinery: reparametrized sampling, analytic KL to the
standard normal, the per-dimension symmetric-KL triplet distance, and a
Monte-Carlo Jensen-Shannon estimator kept as an independent test oracle.

The per-dimension distance is D^h = (KL(a||b) + KL(b||a)) / 2 with the
univariate-Gaussian closed form; it is defined POSITIVE (distance-like), so
smaller D means more similar. Arrays broadcast over leading axes; the last
axis is the latent dimension H.
"""

from dataclasses import dataclass

import numpy as np

from .errors import NonFiniteError, ShapeError

LOG_STD_MIN = -5.0
LOG_STD_MAX = 2.0


@dataclass
class DiagGaussian:
    """Diagonal Gaussian with mean and log-std arrays of shape (..., H).

    log_std is clamped to [LOG_STD_MIN, LOG_STD_MAX] at construction; this
    keeps the divergence math away from degenerate variances.
    """

    mean: np.ndarray
    log_std: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.log_std = np.clip(np.asarray(self.log_std, dtype=np.float64), LOG_STD_MIN, LOG_STD_MAX)
        if self.mean.shape != self.log_std.shape:
            raise ShapeError(f"mean {self.mean.shape} vs log_std {self.log_std.shape}")
        if not (np.isfinite(self.mean).all() and np.isfinite(self.log_std).all()):
            raise NonFiniteError("DiagGaussian parameters must be finite")

    @property
    def dim(self) -> int:
        return self.mean.shape[-1]

    @property
    def std(self) -> np.ndarray:
        return np.exp(self.log_std)

    def __getitem__(self, idx) -> "DiagGaussian":
        return DiagGaussian(self.mean[idx], self.log_std[idx])

    @classmethod
    def standard(cls, dim: int) -> "DiagGaussian":
        return cls(np.zeros(dim), np.zeros(dim))


def sample_reparam(q: DiagGaussian, eps: np.ndarray) -> np.ndarray:
    """z = mean + exp(log_std) * eps for unit-normal draws eps."""
    eps = np.asarray(eps, dtype=np.float64)
    if eps.shape[-1] != q.dim:
        raise ShapeError(f"eps last axis {eps.shape} vs dim {q.dim}")
    return q.mean + q.std * eps


def kl_to_std_normal(q: DiagGaussian):
    """KL(q || N(0, I)) = sum_h (mu^2 + sigma^2 - 1 - 2 log_std) / 2, exact."""
    var = np.exp(2.0 * q.log_std)
    return 0.5 * np.sum(q.mean**2 + var - 1.0 - 2.0 * q.log_std, axis=-1)


def kl_to_std_normal_grad(q: DiagGaussian) -> tuple[np.ndarray, np.ndarray]:
    """d KL / d(mean, log_std), elementwise: (mu, sigma^2 - 1)."""
    return q.mean.copy(), np.exp(2.0 * q.log_std) - 1.0


def sym_kl_per_dim(a: DiagGaussian, b: DiagGaussian) -> np.ndarray:
    """Per-dimension symmetric KL between two diagonal Gaussians, shape (..., H).

    The log-variance terms of the two KL directions cancel:
    D^h = (va + d^2) / (4 vb) + (vb + d^2) / (4 va) - 1/2, with d = mu_a - mu_b.
    Exactly zero when a == b, nonnegative always, symmetric term by term.
    """
    if a.dim != b.dim:
        raise ShapeError(f"dims differ: {a.dim} vs {b.dim}")
    va = np.exp(2.0 * a.log_std)
    vb = np.exp(2.0 * b.log_std)
    d2 = (a.mean - b.mean) ** 2
    return (va + d2) / (4.0 * vb) + (vb + d2) / (4.0 * va) - 0.5


def sym_kl_per_dim_grad(a: DiagGaussian, b: DiagGaussian) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Gradients of each D^h w.r.t. (mean_a, log_std_a, mean_b, log_std_b).

    D^h depends only on dimension h's parameters, so each returned array is
    the diagonal Jacobian with shape (..., H).
    """
    va = np.exp(2.0 * a.log_std)
    vb = np.exp(2.0 * b.log_std)
    d = a.mean - b.mean
    d2 = d**2
    d_mean_a = d * (1.0 / (2.0 * vb) + 1.0 / (2.0 * va))
    # d D / d va = 1/(4 vb) - (vb + d^2)/(4 va^2); chain through va = e^{2 ls}
    d_ls_a = 2.0 * va * (1.0 / (4.0 * vb) - (vb + d2) / (4.0 * va**2))
    d_ls_b = 2.0 * vb * (1.0 / (4.0 * va) - (va + d2) / (4.0 * vb**2))
    return d_mean_a, d_ls_a, -d_mean_a, d_ls_b


def _normal_logpdf(x: np.ndarray, mean: np.ndarray, log_std: np.ndarray) -> np.ndarray:
    return -0.5 * np.log(2.0 * np.pi) - log_std - (x - mean) ** 2 / (2.0 * np.exp(2.0 * log_std))


def js_mc_estimate(a: DiagGaussian, b: DiagGaussian, samples: int,
                   rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Monte-Carlo estimate of the per-dimension Jensen-Shannon divergence.

    JS = KL(a || m)/2 + KL(b || m)/2 with m the equal mixture of a and b,
    estimated by sampling from a and b. Returns (estimate, standard error),
    each shape (H,). Kept out of training paths; this is the reference the
    analytic surrogate is tested against.
    """
    if samples < 1000:
        raise ValueError("need at least 1e3 samples for a usable estimate")
    if a.dim != b.dim:
        raise ShapeError(f"dims differ: {a.dim} vs {b.dim}")
    za = sample_reparam(a, rng.standard_normal((samples, a.dim)))
    zb = sample_reparam(b, rng.standard_normal((samples, b.dim)))
    log_half = np.log(0.5)

    def log_mix(z):
        return np.logaddexp(log_half + _normal_logpdf(z, a.mean, a.log_std),
                            log_half + _normal_logpdf(z, b.mean, b.log_std))

    stat = 0.5 * (_normal_logpdf(za, a.mean, a.log_std) - log_mix(za)) \
        + 0.5 * (_normal_logpdf(zb, b.mean, b.log_std) - log_mix(zb))
    est = stat.mean(axis=0)
    se = stat.std(axis=0, ddof=1) / np.sqrt(samples)
    return est, se
