"""
The static hierarchical model.

    phi    ~ BYM(tau_s, tau_u)            Q_phi = tau_s L + tau_u I
    delta  ~ N(0, Sigma_delta)            low-rank or diagonal
    Lambda_ic = phi_i + delta_c
    A_ic | Lambda_ic ~ Bernoulli(logit^-1(Lambda_ic))   (or the drug evidence model)

    tau_s, tau_u ~ Half-Cauchy(2)
    sigma_c ~ Half-Normal(1),  rho_c ~ TN[-1,1](0, 0.1^2),  xi ~ U(-1, 1)
    sigma_delta ~ Half-Cauchy(2)          diagonal Sigma_delta only

`StaticModel.logdensity` is the sampler's target on the unconstrained space.
The phi block uses the eigenvalues of L for log-determinants so the target never
refactorizes; `log_prior` goes through the sparse factorization instead and the
two agree.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Dict, Literal, Optional, Tuple

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
from scipy.special import expit, ndtr

from depfa.services.datasets import Dataset
from depfa.services.exceptions import CovarianceError
from depfa.services.gmrf import LOG_2PI, BymHyper, LogdetBackend, bym_logdet, bym_precision, gmrf_logpdf
from depfa.services.graph import ItemGraph, laplacian
from depfa.services.likelihood import DrugEvidence, Likelihood
from depfa.services.transforms import ParamBlock, TransformSpec
from shared.config import settings

logger = logging.getLogger(__name__)

DeltaPrior = Literal["lowrank", "diagonal"]

HALF_CAUCHY_SCALE = 2.0
RHO_SD = 0.1
_LOG_HALF_NORMAL = float(np.log(2.0) - 0.5 * LOG_2PI)
_LOG_TN_MASS = float(np.log(ndtr(1.0 / RHO_SD) - ndtr(-1.0 / RHO_SD)))
_JITTER_ATTEMPTS = 4


# ---------------------------------------------------------------------------
# scalar priors: (log density, d/dx)
# ---------------------------------------------------------------------------

def half_cauchy_logpdf(x, scale: float = HALF_CAUCHY_SCALE):
    x = np.asarray(x, dtype=float)
    val = np.log(2.0 / (np.pi * scale)) - np.log1p((x / scale) ** 2)
    return np.sum(val), -2.0 * x / (scale * scale + x * x)


def half_normal_logpdf(x):
    x = np.asarray(x, dtype=float)
    return np.sum(_LOG_HALF_NORMAL - 0.5 * x * x), -x


def rho_logpdf(x):
    """TN on [-1, 1], mean 0, sd 0.1."""
    x = np.asarray(x, dtype=float)
    z = x / RHO_SD
    val = -0.5 * LOG_2PI - np.log(RHO_SD) - 0.5 * z * z - _LOG_TN_MASS
    return np.sum(val), -x / RHO_SD**2


def beta22_logpdf(x):
    x = np.asarray(x, dtype=float)
    return np.sum(np.log(6.0) + np.log(x) + np.log1p(-x)), 1.0 / x - 1.0 / (1.0 - x)


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------

@dataclass
class StaticParams:
    phi: np.ndarray
    delta: np.ndarray
    tau_s: float
    tau_u: float
    sigma: Optional[np.ndarray] = None
    rho: Optional[np.ndarray] = None
    xi: float = 0.0
    sigma_delta: Optional[float] = None
    epsilon: float = 0.01

    @property
    def delta_prior(self) -> DeltaPrior:
        return "diagonal" if self.sigma_delta is not None else "lowrank"

    def in_support(self) -> bool:
        vals = [self.phi, self.delta, self.tau_s, self.tau_u, self.xi]
        if not all(np.all(np.isfinite(v)) for v in vals):
            return False
        if self.tau_s <= 0 or self.tau_u <= 0:
            return False
        if self.delta_prior == "diagonal":
            return bool(np.isfinite(self.sigma_delta) and self.sigma_delta > 0)
        return bool(
            np.all(np.isfinite(self.sigma)) and np.all(self.sigma > 0)
            and np.all(np.abs(self.rho) < 1) and abs(self.xi) < 1
        )


def logit_surface(phi: np.ndarray, delta: np.ndarray) -> np.ndarray:
    """Lambda_ic = phi_i + delta_c."""
    return np.add.outer(np.asarray(phi, dtype=float), np.asarray(delta, dtype=float))


def hyper_blocks(n_conditions: int, delta_prior: DeltaPrior):
    blocks = [ParamBlock("tau_s", (), "positive"), ParamBlock("tau_u", (), "positive")]
    if delta_prior == "diagonal":
        blocks.append(ParamBlock("sigma_delta", (), "positive"))
    else:
        blocks += [
            ParamBlock("sigma", (n_conditions,), "positive"),
            ParamBlock("rho", (n_conditions,), "unit"),
            ParamBlock("xi", (), "unit"),
        ]
    return blocks


def static_transforms(n_items: int, n_conditions: int, delta_prior: DeltaPrior = "lowrank") -> TransformSpec:
    return TransformSpec(
        [ParamBlock("phi", (n_items,), "real"), ParamBlock("delta", (n_conditions,), "real")]
        + hyper_blocks(n_conditions, delta_prior)
    )


# ---------------------------------------------------------------------------
# feature covariance
# ---------------------------------------------------------------------------

class LowRankCov:
    """Sigma_cc = sigma_c^2, Sigma_cc' = xi rho_c rho_c' sigma_c sigma_c', Cholesky-factorized."""

    def __init__(self, matrix: np.ndarray, jitter: float = 0.0):
        self.matrix = matrix
        self.jitter = jitter
        try:
            self._chol = sla.cho_factor(matrix + jitter * np.eye(matrix.shape[0]), lower=True)
        except sla.LinAlgError as e:
            raise CovarianceError(f"covariance is not positive definite: {e}") from e
        self.logdet = float(2.0 * np.sum(np.log(np.diag(self._chol[0]))))

    @property
    def dim(self) -> int:
        return self.matrix.shape[0]

    def solve(self, v: np.ndarray) -> np.ndarray:
        return sla.cho_solve(self._chol, v)

    @property
    def inverse(self) -> np.ndarray:
        return self.solve(np.eye(self.dim))

    def logpdf(self, x: np.ndarray) -> float:
        return float(-0.5 * self.dim * LOG_2PI - 0.5 * self.logdet - 0.5 * x @ self.solve(x))


def lowrank_matrix(sigma: np.ndarray, rho: np.ndarray, xi: float) -> np.ndarray:
    sigma = np.asarray(sigma, dtype=float)
    u = np.asarray(rho, dtype=float) * sigma
    m = xi * np.outer(u, u)
    np.fill_diagonal(m, sigma * sigma)
    return m


def lowrank_sigma(sigma: np.ndarray, rho: np.ndarray, xi: float) -> LowRankCov:
    """Build and factorize Sigma_delta; escalate a diagonal jitter before giving up."""
    m = lowrank_matrix(sigma, rho, xi)
    try:
        return LowRankCov(m)
    except CovarianceError:
        pass
    base = 1e-8 * float(np.mean(np.asarray(sigma, dtype=float) ** 2))
    for attempt in range(_JITTER_ATTEMPTS):
        jitter = base * 10.0**attempt
        try:
            cov = LowRankCov(m, jitter=jitter)
            logger.warning(f"covariance jitter applied: jitter={jitter:.3e} attempt={attempt + 1}")
            return cov
        except CovarianceError:
            continue
    raise CovarianceError(
        "covariance is not positive definite after jitter",
        {"max_jitter": base * 10.0 ** (_JITTER_ATTEMPTS - 1), "xi": float(xi)},
    )


def delta_logpdf_lowrank(delta, sigma, rho, xi):
    """log N(delta | 0, Sigma) and its gradient in (delta, sigma, rho, xi)."""
    cov = lowrank_sigma(sigma, rho, xi)
    alpha = cov.solve(delta)
    val = -0.5 * cov.dim * LOG_2PI - 0.5 * cov.logdet - 0.5 * float(delta @ alpha)
    # dl/dSigma
    G = 0.5 * (np.outer(alpha, alpha) - cov.inverse)
    G0 = G - np.diag(np.diag(G))
    u = rho * sigma
    Gu = G0 @ u
    d_sigma = 2.0 * sigma * np.diag(G) + 2.0 * xi * rho * Gu
    d_rho = 2.0 * xi * sigma * Gu
    d_xi = float(u @ Gu)
    return val, -alpha, d_sigma, d_rho, d_xi


def delta_logpdf_diagonal(delta, sigma_delta):
    c = delta.shape[0]
    ss = float(delta @ delta)
    s2 = sigma_delta * sigma_delta
    val = -0.5 * c * LOG_2PI - c * np.log(sigma_delta) - 0.5 * ss / s2
    return val, -delta / s2, -c / sigma_delta + ss / (s2 * sigma_delta)


def hyper_logprior(values: Dict[str, np.ndarray], delta: np.ndarray, grads: Dict[str, np.ndarray]) -> float:
    """Priors on tau, on Sigma_delta's parameters and delta | Sigma_delta; accumulates gradients in place."""
    total = 0.0
    for name in ("tau_s", "tau_u"):
        v, g = half_cauchy_logpdf(values[name])
        total += v
        grads[name] = grads.get(name, 0.0) + g
    if "sigma_delta" in values:
        sd = float(values["sigma_delta"])
        v, g = half_cauchy_logpdf(sd)
        dv, d_delta, d_sd = delta_logpdf_diagonal(delta, sd)
        total += v + dv
        grads["sigma_delta"] = g + d_sd
    else:
        sigma, rho, xi = values["sigma"], values["rho"], float(values["xi"])
        vs, gs = half_normal_logpdf(sigma)
        vr, gr = rho_logpdf(rho)
        # Uniform(-1, 1) on xi
        total += vs + vr + np.log(0.5)
        dv, d_delta, d_sigma, d_rho, d_xi = delta_logpdf_lowrank(delta, sigma, rho, xi)
        total += dv
        grads["sigma"] = gs + d_sigma
        grads["rho"] = gr + d_rho
        grads["xi"] = d_xi
    grads["delta"] = grads.get("delta", 0.0) + d_delta
    return float(total)


# ---------------------------------------------------------------------------
# joint
# ---------------------------------------------------------------------------

class StaticModel:
    """
    Log-posterior of the static model with analytic gradient.

    Args:
        dataset: observations (direct or drug mode)
        graph: item k-NN graph
        epsilon: drug noise level (drug mode only)
        delta_prior: "lowrank" or "diagonal"
        extra_diagonal: added to tau_u in Q_phi (1.0 gives the dynamic model's Q_0)
        logdet_backend: "spectrum", "cholesky" or "auto" (by item count)
    """

    def __init__(
        self,
        dataset: Dataset,
        graph: ItemGraph,
        epsilon: float = 0.01,
        delta_prior: DeltaPrior = "lowrank",
        extra_diagonal: float = 0.0,
        logdet_backend: LogdetBackend = "auto",
    ):
        if graph.n_items != dataset.n_items:
            raise ValueError(f"graph has {graph.n_items} items, dataset has {dataset.n_items}")
        self.dataset = dataset
        self.graph = graph
        self.epsilon = epsilon
        self.delta_prior = delta_prior
        self.extra_diagonal = extra_diagonal
        self.L = laplacian(graph)
        self.logdet_eval = bym_logdet(self.L, logdet_backend)
        self.likelihood = Likelihood(dataset, epsilon)
        self.transforms = static_transforms(dataset.n_items, dataset.n_conditions, delta_prior)

    def to_params(self, x: np.ndarray) -> StaticParams:
        v = self.transforms.split(np.asarray(x, dtype=float))
        return StaticParams(
            phi=v["phi"], delta=v["delta"], tau_s=float(v["tau_s"]), tau_u=float(v["tau_u"]),
            sigma=v.get("sigma"), rho=v.get("rho"), xi=float(v.get("xi", 0.0)),
            sigma_delta=None if "sigma_delta" not in v else float(v["sigma_delta"]),
            epsilon=self.epsilon,
        )

    def from_params(self, params: StaticParams) -> np.ndarray:
        values = {"phi": params.phi, "delta": params.delta, "tau_s": params.tau_s, "tau_u": params.tau_u}
        if self.delta_prior == "diagonal":
            values["sigma_delta"] = params.sigma_delta
        else:
            values.update(sigma=params.sigma, rho=params.rho, xi=params.xi)
        return self.transforms.join(values)

    def phi_logprior(self, phi, tau_s, tau_u):
        """BYM log density; returns (value, d_phi, d_tau_s, d_tau_u)."""
        shift = tau_u + self.extra_diagonal
        Lphi = self.L @ phi
        quad_s = float(phi @ Lphi)
        quad_u = float(phi @ phi)
        logdet = self.logdet_eval.logdet(tau_s, shift)
        dl_s, dl_u = self.logdet_eval.logdet_grad(tau_s, shift)
        val = -0.5 * phi.shape[0] * LOG_2PI + 0.5 * logdet - 0.5 * (tau_s * quad_s + shift * quad_u)
        return val, -(tau_s * Lphi + shift * phi), 0.5 * dl_s - 0.5 * quad_s, 0.5 * dl_u - 0.5 * quad_u

    def log_posterior(self, x: np.ndarray) -> Tuple[float, np.ndarray]:
        """Log joint on the constrained space and its gradient; -inf outside the support."""
        x = np.asarray(x, dtype=float)
        if not self.to_params(x).in_support():
            return -np.inf, np.zeros_like(x)
        v = self.transforms.split(x)
        phi, delta = v["phi"], v["delta"]
        tau_s, tau_u = float(v["tau_s"]), float(v["tau_u"])
        grads: Dict[str, np.ndarray] = {}

        val, grads["phi"], grads["tau_s"], grads["tau_u"] = self.phi_logprior(phi, tau_s, tau_u)
        try:
            val += hyper_logprior(v, delta, grads)
        except CovarianceError:
            return -np.inf, np.zeros_like(x)

        lam = logit_surface(phi, delta)
        ll, dlam = self.likelihood.value_and_grad(lam)
        grads["phi"] = grads["phi"] + dlam.sum(axis=1)
        grads["delta"] = grads["delta"] + dlam.sum(axis=0)
        return float(val + ll), self.transforms.join(grads)

    def logdensity(self, z: np.ndarray) -> Tuple[float, np.ndarray]:
        """Target on the unconstrained space, Jacobian included."""
        z = np.asarray(z, dtype=float)
        x = self.transforms.constrain(z)
        val, grad_x = self.log_posterior(x)
        if not np.isfinite(val):
            return -np.inf, np.zeros_like(z)
        return val + self.transforms.log_jacobian(z), self.transforms.pullback(z, grad_x)

    def __call__(self, z: np.ndarray) -> Tuple[float, np.ndarray]:
        return self.logdensity(z)


def log_prior(params: StaticParams, L_p: sp.spmatrix, extra_diagonal: float = 0.0) -> float:
    """All prior terms, the phi block through the sparse factorization of Q_phi."""
    if not params.in_support():
        return -np.inf
    Q = bym_precision(L_p, BymHyper(params.tau_s, params.tau_u), extra_diagonal=extra_diagonal)
    total = gmrf_logpdf(params.phi, Q)
    values = {"tau_s": params.tau_s, "tau_u": params.tau_u}
    if params.delta_prior == "diagonal":
        values["sigma_delta"] = params.sigma_delta
    else:
        values.update(sigma=np.asarray(params.sigma), rho=np.asarray(params.rho), xi=params.xi)
    try:
        total += hyper_logprior(values, np.asarray(params.delta, dtype=float), {})
    except CovarianceError:
        return -np.inf
    return float(total)


def log_likelihood(params: StaticParams, dataset: Dataset) -> float:
    return Likelihood(dataset, params.epsilon).value(logit_surface(params.phi, params.delta))


def joint_logpost(params: StaticParams, dataset: Dataset, graph: ItemGraph, extra_diagonal: float = 0.0):
    """(log joint, gradient) on the constrained space, ordered as `static_transforms`."""
    model = StaticModel(dataset, graph, epsilon=params.epsilon, delta_prior=params.delta_prior, extra_diagonal=extra_diagonal)
    return model.log_posterior(model.from_params(params))


def posterior_condition_prob(samples, dataset: Dataset, epsilon: Optional[float] = None) -> np.ndarray:
    """Draw-averaged P(A_ic = 1 | Lambda_ic, drugs); `samples` is a PosteriorSamples over phi and delta."""
    if dataset.mode != "drug":
        raise ValueError("posterior condition probabilities need a drug-mode dataset")
    eps = settings.default_epsilon if epsilon is None else epsilon
    evidence = DrugEvidence.from_dataset(dataset, eps)
    phi = samples.block("phi")
    delta = samples.block("delta")
    out = np.zeros((dataset.n_items, dataset.n_conditions))
    for s in range(phi.shape[0]):
        out += evidence.posterior_prob(logit_surface(phi[s], delta[s]))
    return out / phi.shape[0]


def probability_draws(samples) -> np.ndarray:
    """p_ic per draw, shape (draws, I, C)."""
    phi = samples.block("phi")
    delta = samples.block("delta")
    return expit(phi[:, :, None] + delta[:, None, :])
