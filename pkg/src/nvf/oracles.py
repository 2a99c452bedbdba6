"""Randomised cross-checks of the closed forms against independent computations.

Used by the test suite and by the ``oracle-check`` command.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .field import mse_loss_and_grad, nll_loss_and_grad
from .render import RaySamples
from .uncertainty import (
    RayMixture,
    UncertaintyPriors,
    bn_enumerate,
    gaussian_entropy,
    gmm_entropy_huber,
    gmm_entropy_mc,
    gmm_entropy_moment,
    ray_mixture,
)

MIXTURE_TOL = 1e-9
GRADIENT_TOL = 1e-4


@dataclass
class CheckResult:
    name: str
    trials: int
    worst: float
    tolerance: float
    passed: bool

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{self.name:<28} trials={self.trials:<6d} worst={self.worst:.3e} tol={self.tolerance:.1e} {status}"


def random_ray(rng: np.random.Generator, n: int, with_visibility: bool = True) -> RaySamples:
    t = np.sort(rng.uniform(0.0, 4.0, n))
    s = rng.uniform(0.01, 0.5, n)
    sigma = rng.exponential(3.0, n) * (rng.random(n) < 0.8)
    mu = rng.random((n, 3))
    q = rng.uniform(1e-4, 1.0, (n, 3))
    v = rng.random(n) if with_visibility else None
    return RaySamples(t, s, sigma, mu, q, v)


def random_priors(rng: np.random.Generator, beta=None) -> UncertaintyPriors:
    return UncertaintyPriors(
        mu0=tuple(rng.random(3)),
        q0=tuple(rng.uniform(1e-3, 0.2, 3)),
        sigma0=float(rng.exponential(5.0)),
        beta=float(rng.random()) if beta is None else float(beta),
    )


def mixture_deviation(samples: RaySamples, priors: UncertaintyPriors) -> float:
    """Largest absolute difference between the closed form and enumeration."""
    a = ray_mixture(samples, priors)
    b = bn_enumerate(samples, priors)
    if a.n_components != b.n_components:
        return np.inf
    return float(max(np.abs(a.weights - b.weights).max(), np.abs(a.means - b.means).max(),
                     np.abs(a.variances - b.variances).max()))


def check_mixtures(rng, trials: int, max_samples: int = 8, beta=None) -> CheckResult:
    worst = 0.0
    for _ in range(trials):
        n = int(rng.integers(1, max_samples + 1))
        worst = max(worst, mixture_deviation(random_ray(rng, n), random_priors(rng, beta)))
    return CheckResult("mixture vs enumeration", trials, worst, MIXTURE_TOL, worst <= MIXTURE_TOL)


def random_mixture(rng, max_components: int = 16, var_range=(1e-4, 1.0)) -> RayMixture:
    k = int(rng.integers(1, max_components + 1))
    w = rng.dirichlet(np.ones(k))
    return RayMixture(w, rng.random((k, 3)), rng.uniform(*var_range, (k, 3)))


def check_entropy_bounds(rng, trials: int, mc_samples: int = 100_000) -> CheckResult:
    """Worst shortfall of either bound below the MC estimate, in standard errors."""
    worst = -np.inf
    for i in range(trials):
        m = random_mixture(rng)
        h, se = gmm_entropy_mc(m, mc_samples, seed=int(rng.integers(2**31)))
        lower = min(float(gmm_entropy_huber(m).value), float(gmm_entropy_moment(m).value))
        worst = max(worst, (h - lower) / se)
    if trials == 0:
        worst = 0.0
    return CheckResult("entropy bounds (SE below MC)", trials, worst, 3.0, worst <= 3.0)


def check_single_gaussian(rng, trials: int) -> CheckResult:
    worst = 0.0
    for _ in range(trials):
        q = rng.uniform(1e-4, 1.0, 3)
        m = RayMixture(np.array([1.0]), rng.random((1, 3)), q[None])
        worst = max(worst, abs(float(gmm_entropy_huber(m).value) - float(gaussian_entropy(q))))
    return CheckResult("single-component entropy", trials, worst, 1e-12, worst <= 1e-12)


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    scale = max(np.linalg.norm(a), np.linalg.norm(b))
    return 0.0 if scale == 0 else float(np.linalg.norm(a - b) / scale)


def central_difference(f, x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        keep = flat[i]
        flat[i] = keep + h
        hi = f(x)
        flat[i] = keep - h
        lo = f(x)
        flat[i] = keep
        gf[i] = (hi - lo) / (2.0 * h)
    return g


def mse_gradient_error(rng, n_samples: int = 3) -> float:
    raw_sigma = rng.normal(0.0, 1.5, (1, n_samples))
    raw_color = rng.normal(0.0, 1.0, (1, n_samples, 3))
    s = rng.uniform(0.1, 1.0, (1, n_samples))
    target = rng.random((1, 3))
    bg = rng.random(3)
    _, g_sigma, g_color = mse_loss_and_grad(raw_sigma, raw_color, s, target, bg)
    fd_sigma = central_difference(lambda x: mse_loss_and_grad(x, raw_color, s, target, bg)[0], raw_sigma.copy())
    fd_color = central_difference(lambda x: mse_loss_and_grad(raw_sigma, x, s, target, bg)[0], raw_color.copy())
    return max(relative_error(g_sigma, fd_sigma), relative_error(g_color, fd_color))


def nll_gradient_error(rng, n_samples: int = 3) -> float:
    w = rng.dirichlet(np.ones(n_samples + 1))[None, :n_samples]
    mu = rng.random((1, n_samples, 3))
    raw_q = rng.normal(-2.0, 1.0, (1, n_samples, 3))
    target = np.clip(mu[:, 0] + rng.normal(0.0, 0.1, (1, 3)), 0, 1)
    floor = 1e-6
    _, g, _ = nll_loss_and_grad(w, mu, raw_q, target, floor)
    fd = central_difference(lambda x: nll_loss_and_grad(w, mu, x, target, floor)[0], raw_q.copy())
    return relative_error(g, fd)


def check_gradients(rng, trials: int) -> list[CheckResult]:
    mse = max([mse_gradient_error(rng) for _ in range(trials)], default=0.0)
    nll = max([nll_gradient_error(rng) for _ in range(trials)], default=0.0)
    return [
        CheckResult("MSE gradient", trials, mse, GRADIENT_TOL, mse <= GRADIENT_TOL),
        CheckResult("NLL gradient", trials, nll, GRADIENT_TOL, nll <= GRADIENT_TOL),
    ]


def run_all(seed: int, trials: int, beta=None, mc_samples: int = 20_000) -> list[CheckResult]:
    """The full oracle suite; the entropy-bound check uses at most 50 mixtures."""
    rng = np.random.default_rng(seed)
    if beta is not None:
        UncertaintyPriors(beta=beta)  # validates
    results = [check_mixtures(rng, trials, beta=beta)]
    results.append(check_entropy_bounds(rng, min(trials, 50), mc_samples))
    results.append(check_single_gaussian(rng, trials))
    results.extend(check_gradients(rng, min(trials, 50)))
    return results
