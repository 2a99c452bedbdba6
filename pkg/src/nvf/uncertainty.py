"""Per-ray colour distributions with visibility, their entropies, and image totals.

A ray's observed colour is modelled as a Gaussian mixture: every sample
interval that may occlude the ray contributes its predicted colour
distribution, weighted by the probability that the ray terminates there and
that the point was seen during training. Mass that terminates at unseen
points, or escapes the far bound, goes to a single prior component.

Arrays follow the render module convention: the last axis (or the
second-to-last for RGB quantities) indexes samples, leading axes index rays.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from functools import lru_cache
from typing import Optional

import numpy as np
from scipy.special import logsumexp

from . import render
from .errors import ConfigError, ResourceError
from .geometry import CameraIntrinsics, Pose, Rays, camera_rays, clip_rays_to_box
from .render import RaySamples

WEIGHT_EPS = 1e-12
EIG_FLOOR = 1e-12
LOG_2PIE = np.log(2.0 * np.pi * np.e)
BN_MAX_SAMPLES = 12

METHODS = ("nvf", "nvf-loose", "no-vis", "no-var", "wd", "activermap", "air", "activenerf")
# Heads each method reads from the field.
METHOD_HEADS = {
    "nvf": ("density", "color", "variance", "visibility"),
    "nvf-loose": ("density", "color", "variance", "visibility"),
    "no-vis": ("density", "color", "variance"),
    "no-var": ("density", "color", "visibility"),
    "wd": ("density",),
    "activermap": ("density",),
    "air": ("density",),
    "activenerf": ("density", "variance"),
}
MIXTURE_METHODS = ("nvf", "nvf-loose", "no-vis", "no-var")


@dataclass(frozen=True)
class UncertaintyPriors:
    mu0: tuple = (0.5, 0.5, 0.5)
    q0: tuple = (1.0 / 12.0, 1.0 / 12.0, 1.0 / 12.0)
    sigma0: float = 10.0
    beta: float = 0.5

    def __post_init__(self):
        if len(self.mu0) != 3 or len(self.q0) != 3:
            raise ConfigError("prior mean and variance need three channels")
        if any(q <= 0 for q in self.q0):
            raise ConfigError("prior variances must be positive")
        if not 0.0 <= self.beta <= 1.0:
            raise ConfigError(f"beta must lie in [0, 1], got {self.beta}")
        if self.sigma0 < 0:
            raise ConfigError("prior density must be non-negative")

    @staticmethod
    def sigma0_for_spacing(mean_spacing: float) -> float:
        """Prior density whose alpha over one mean spacing is one half."""
        return float(np.log(2.0) / mean_spacing)

    @classmethod
    def from_config(cls, section, mean_spacing: float) -> UncertaintyPriors:
        sigma0 = section.sigma0 if section.sigma0 >= 0 else cls.sigma0_for_spacing(mean_spacing)
        return cls(tuple(section.mu0), tuple(section.q0), sigma0, section.beta)


@dataclass
class CompositeWeights:
    alpha: np.ndarray
    weights: np.ndarray
    w_bg: np.ndarray


@dataclass
class RayMixture:
    """Mixture components along the last axis; the prior component is last."""

    weights: np.ndarray  # (..., K)
    means: np.ndarray  # (..., K, 3)
    variances: np.ndarray  # (..., K, 3)

    @property
    def n_components(self) -> int:
        return self.weights.shape[-1]

    def mean(self) -> np.ndarray:
        return np.einsum("...k,...kc->...c", self.weights, self.means)

    def ray(self, i) -> RayMixture:
        return RayMixture(self.weights[i], self.means[i], self.variances[i])


@dataclass
class EntropyEstimate:
    value: np.ndarray
    method: str
    discrete: Optional[np.ndarray] = None
    differential: Optional[np.ndarray] = None

    def __float__(self):
        return float(self.value)


# ---------------------------------------------------------------------------
# Composition


def composite_alpha_star(samples: RaySamples, priors: UncertaintyPriors) -> CompositeWeights:
    """Occlusion probabilities that fall back to the prior density where unseen."""
    alpha = 1.0 - np.exp(-samples.sigma * samples.s)
    v = samples.v
    if v is None:
        rw = render.weights_from_alpha(alpha)
        return CompositeWeights(rw.alpha, rw.weights, rw.w_bg)
    alpha0 = 1.0 - np.exp(-priors.sigma0 * samples.s)
    beta = priors.beta
    a_star = (v + (1.0 - v) * beta) * alpha + (1.0 - beta) * (1.0 - v) * alpha0
    rw = render.weights_from_alpha(a_star)
    return CompositeWeights(rw.alpha, rw.weights, rw.w_bg)


def _prior_arrays(priors: UncertaintyPriors, lead):
    mu0 = np.broadcast_to(np.asarray(priors.mu0, dtype=np.float64), lead + (1, 3))
    q0 = np.broadcast_to(np.asarray(priors.q0, dtype=np.float64), lead + (1, 3))
    return mu0, q0


def ray_mixture(samples: RaySamples, priors: UncertaintyPriors) -> RayMixture:
    """N sample components weighted w*_i v_i followed by the prior component."""
    cw = composite_alpha_star(samples, priors)
    v = np.ones_like(samples.sigma) if samples.v is None else samples.v
    vis = cw.weights * v
    prior_w = np.sum(cw.weights * (1.0 - v), axis=-1) + cw.w_bg
    lead = samples.sigma.shape[:-1]
    mu0, q0 = _prior_arrays(priors, lead)
    weights = np.concatenate([vis, prior_w[..., None]], axis=-1)
    means = np.concatenate([samples.mu, mu0], axis=-2)
    variances = np.concatenate([samples.q, q0], axis=-2)
    return RayMixture(weights, means, variances)


@lru_cache(maxsize=None)
def _assignments(n: int):
    """All (D, V) assignments for n intervals and the first occluded index of each."""
    bits = np.array(list(itertools.product((0, 1), repeat=2 * n)), dtype=np.int8).reshape(-1, n, 2)
    d, v = bits[..., 0], bits[..., 1]
    first = np.where(d.any(axis=1), d.argmax(axis=1), n)
    return d, v, first


def bn_enumerate(samples: RaySamples, priors: UncertaintyPriors) -> RayMixture:
    """Exact mixture for one ray by summing over every joint (D, V) assignment.

    V_i ~ Bernoulli(v_i) and D_i | V_i follows the occlusion table. The colour
    seen is drawn at the first occluded interval k: the predicted Gaussian
    with probability v_k, the prior otherwise. No occlusion gives the prior.
    """
    n = samples.t.shape[-1]
    if samples.t.ndim != 1:
        raise ValueError("bn_enumerate handles a single ray")
    if n > BN_MAX_SAMPLES:
        raise ResourceError(f"enumeration over {n} samples needs 4^{n} terms; limit is {BN_MAX_SAMPLES}")
    v = np.ones(n) if samples.v is None else np.asarray(samples.v, dtype=np.float64)
    occ_pred = 1.0 - np.exp(-samples.sigma * samples.s)
    occ_prior = 1.0 - np.exp(-priors.sigma0 * samples.s)
    beta = priors.beta
    # table[i, d, vis]
    table = np.empty((n, 2, 2))
    table[:, 1, 1] = v * occ_pred
    table[:, 0, 1] = v * (1.0 - occ_pred)
    p_occ_unseen = beta * occ_pred + (1.0 - beta) * occ_prior
    table[:, 1, 0] = (1.0 - v) * p_occ_unseen
    table[:, 0, 0] = (1.0 - v) * (1.0 - p_occ_unseen)
    d, vv, first = _assignments(n)
    prob = np.prod(table[np.arange(n), d, vv], axis=1)
    reach = np.bincount(first, weights=prob, minlength=n + 1)
    weights = np.empty(n + 1)
    weights[:n] = reach[:n] * v
    weights[n] = reach[n] + np.sum(reach[:n] * (1.0 - v))
    mu0, q0 = _prior_arrays(priors, ())
    return RayMixture(weights, np.concatenate([samples.mu, mu0]), np.concatenate([samples.q, q0]))


# ---------------------------------------------------------------------------
# Entropy of Gaussian mixtures


def gaussian_entropy(variances) -> np.ndarray:
    """Differential entropy (nats) of a diagonal 3-D Gaussian."""
    return 0.5 * (3.0 * LOG_2PIE + np.sum(np.log(variances), axis=-1))


def gmm_entropy_huber(m: RayMixture) -> EntropyEstimate:
    """Upper bound sum_i w_i (-log w_i + H(N_i))."""
    w = m.weights
    keep = w >= WEIGHT_EPS
    safe = np.where(keep, w, 1.0)
    discrete = -np.sum(np.where(keep, w * np.log(safe), 0.0), axis=-1)
    differential = np.sum(np.where(keep, w * gaussian_entropy(m.variances), 0.0), axis=-1)
    return EntropyEstimate(discrete + differential, "huber", discrete, differential)


def moment_covariance(m: RayMixture) -> np.ndarray:
    """Covariance of the mixture: sum_i w_i (Q_i + (mu_i - mu)(mu_i - mu)^T)."""
    mean = m.mean()
    dev = m.means - mean[..., None, :]
    spread = np.einsum("...k,...ki,...kj->...ij", m.weights, dev, dev)
    diag = np.einsum("...k,...kc->...c", m.weights, m.variances)
    return spread + diag[..., None, :] * np.eye(3)


def gmm_entropy_moment(m: RayMixture) -> EntropyEstimate:
    """Entropy of the single Gaussian with the mixture's first two moments."""
    eig = np.linalg.eigvalsh(moment_covariance(m))
    value = 0.5 * (3.0 * LOG_2PIE + np.sum(np.log(np.maximum(eig, EIG_FLOOR)), axis=-1))
    return EntropyEstimate(value, "moment")


def gmm_log_density(m: RayMixture, x: np.ndarray) -> np.ndarray:
    """log p(x) for points x (M, 3) under a single mixture."""
    keep = m.weights > 0
    w, mu, q = m.weights[keep], m.means[keep], m.variances[keep]
    diff = x[:, None, :] - mu[None]
    log_n = -0.5 * np.sum(np.log(2.0 * np.pi * q)[None] + diff**2 / q[None], axis=-1)
    return logsumexp(log_n + np.log(w)[None], axis=1)


def gmm_entropy_mc(m: RayMixture, n_samples: int = 100_000, seed: int = 0, chunk: int = 50_000):
    """Monte Carlo estimate of the entropy and its standard error."""
    rng = np.random.default_rng(seed)
    w = m.weights / m.weights.sum()
    comp = rng.choice(len(w), size=n_samples, p=w)
    x = m.means[comp] + rng.standard_normal((n_samples, 3)) * np.sqrt(m.variances[comp])
    logp = np.concatenate([gmm_log_density(m, x[i : i + chunk]) for i in range(0, n_samples, chunk)])
    return float(-logp.mean()), float(logp.std(ddof=1) / np.sqrt(n_samples))


# ---------------------------------------------------------------------------
# Method registry


def binary_entropy(p) -> np.ndarray:
    p = np.clip(p, 0.0, 1.0)
    out = np.zeros_like(p)
    inner = (p > 0) & (p < 1)
    pi = p[inner]
    out[inner] = -(pi * np.log(pi) + (1.0 - pi) * np.log1p(-pi))
    return out


def _xlogx(p) -> np.ndarray:
    return np.where(p > 0, p * np.log(np.where(p > 0, p, 1.0)), 0.0)


def check_method(method: str) -> None:
    if method not in METHODS:
        raise ConfigError(f"unknown method {method!r}; valid tags: {', '.join(METHODS)}")


def samples_entropy(samples: RaySamples, method: str, priors: UncertaintyPriors,
                    no_var_variance: float = 1e-4) -> tuple[np.ndarray, np.ndarray]:
    """Per-ray entropy and expected depth for a method.

    The depth uses the composited weights for the mixture methods and the
    plain rendering weights for the baselines.
    """
    check_method(method)
    if method in MIXTURE_METHODS:
        if method == "no-vis":
            samples = RaySamples(samples.t, samples.s, samples.sigma, samples.mu, samples.q, None)
        elif method == "no-var":
            q = np.full(samples.sigma.shape + (3,), no_var_variance)
            samples = RaySamples(samples.t, samples.s, samples.sigma, samples.mu, q, samples.v)
        mix = ray_mixture(samples, priors)
        est = gmm_entropy_moment(mix) if method == "nvf-loose" else gmm_entropy_huber(mix)
        cw = composite_alpha_star(samples, priors)
        return est.value, render.expected_depth(cw.weights, samples.t)
    rw = render.alpha_weights(samples.sigma, samples.s)
    depth = render.expected_depth(rw.weights, samples.t)
    if method == "wd":
        h = -np.sum(_xlogx(rw.weights), axis=-1) - _xlogx(rw.w_bg)
    elif method == "activermap":
        h = np.sum(binary_entropy(rw.alpha), axis=-1)
    elif method == "air":
        h = np.sum(rw.weights * binary_entropy(rw.alpha), axis=-1)
    else:  # activenerf
        var = np.einsum("...n,...nc->...c", rw.weights, samples.q)
        h = 0.5 * (3.0 * LOG_2PIE + np.sum(np.log(np.maximum(var, EIG_FLOOR)), axis=-1))
    return h, depth


def ray_entropy(field, rays: Rays, method: str, priors: UncertaintyPriors, n_samples: int,
                no_var_variance: float = 1e-4, rng=None, stratified: bool = False) -> EntropyEstimate:
    """Entropy (nats) of the colour observed along each ray."""
    check_method(method)
    samples = field.sample_rays(rays, n_samples, rng, stratified, heads=METHOD_HEADS[method])
    h, _ = samples_entropy(samples, method, priors, no_var_variance)
    return EntropyEstimate(h, method)


# ---------------------------------------------------------------------------
# Correlated image entropy


@dataclass(frozen=True)
class CorrelationConfig:
    k: float
    diameter: float
    delta_phi: float

    def __post_init__(self):
        if not self.xi > 0:
            raise ConfigError("correlation length must be positive")

    @property
    def xi(self) -> float:
        return self.k * self.diameter * self.delta_phi


def rho(x, cfg: CorrelationConfig):
    """Truncated quadratic correlation between neighbouring rays."""
    x = np.asarray(x, dtype=np.float64)
    r = x / cfg.xi
    return np.where(x < cfg.xi, 1.0 - r * r, 0.0)


@dataclass
class ImageEntropy:
    total: float
    pixels: np.ndarray  # per-pixel entropy, nats
    depth: np.ndarray
    rho: np.ndarray


def pixel_entropy(field, rays: Rays, method: str, priors: UncertaintyPriors, n_samples: int,
                  no_var_variance: float = 1e-4, chunk: int = 4096):
    """Per-ray entropy and depth, evaluated in chunks with midpoint samples."""
    flat = rays.flatten()
    h = np.empty(len(flat))
    d = np.empty(len(flat))
    heads = METHOD_HEADS[method]
    for start in range(0, len(flat), chunk):
        sl = slice(start, start + chunk)
        samples = field.sample_rays(flat.subset(sl), n_samples, None, False, heads=heads)
        h[sl], d[sl] = samples_entropy(samples, method, priors, no_var_variance)
    return h.reshape(rays.shape), d.reshape(rays.shape)


def image_entropy(field, pose: Pose, intr: CameraIntrinsics, method: str, priors: UncertaintyPriors,
                  corr: CorrelationConfig, n_samples: int, correlated: bool = True,
                  no_var_variance: float = 1e-4, pixels=None) -> ImageEntropy:
    """Sum over pixels of (1 - rho(d * dphi)) H, or the plain sum when not correlated.

    ``pixels`` optionally restricts the sum to (rows, cols) index arrays.
    """
    check_method(method)
    rays = clip_rays_to_box(camera_rays(pose, intr), field.bounds)
    if pixels is not None:
        rows, cols = pixels
        rays = Rays(rays.origins[rows, cols], rays.directions[rows, cols], rays.near[rows, cols],
                    rays.far[rows, cols])
    h, depth = pixel_entropy(field, rays, method, priors, n_samples, no_var_variance)
    r = rho(depth * intr.delta_phi, corr) if correlated else np.zeros_like(h)
    total = float(np.sum((1.0 - r) * h))
    return ImageEntropy(total, h, depth, r)


def visibility_exact(source, x, poses, intr: CameraIntrinsics, n_samples: int = 64) -> np.ndarray:
    """Probability each point is seen unoccluded by at least one camera, through ``source``'s density."""
    return render.visibility_from_cameras(source.density, x, poses, intr, n_samples)
