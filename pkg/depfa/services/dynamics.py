"""
Spatio-temporal extension: item effects drift as an Ornstein-Uhlenbeck process
with a BYM spatial potential at every visit.

For consecutive visits separated by dt, with a = rho_ou^dt and
h = 1 / (sigma_ou^2 (1 - rho_ou^(2 dt))), the per-step conditional is the
normalized product of the OU transition and the spatial potential:

    phi_t | phi_{t-1} ~ N(P^-1 (a h phi_{t-1}), P^-1),   P = tau_s L + (tau_u + h) I

The initial state has Q_0 = tau_s L + (1 + tau_u) I. Every precision in play is
tau_s L + c I, so for moderate item counts the target works in the eigenbasis
of L; larger graphs factorize each visit's precision instead.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Dict, Optional, Tuple

import numpy as np

from depfa.services.datasets import LongitudinalDataset
from depfa.services.exceptions import CovarianceError, DataError
from depfa.services.gmrf import (
    LOG_2PI,
    BymHyper,
    CholeskyLogdet,
    LaplacianSpectrum,
    LogdetBackend,
    PrecisionMatrix,
    bym_precision,
    gmrf_sample,
    resolve_logdet_backend,
)
from depfa.services.graph import ItemGraph, laplacian
from depfa.services.likelihood import Likelihood
from depfa.services.model import (
    DeltaPrior,
    beta22_logpdf,
    half_normal_logpdf,
    hyper_blocks,
    hyper_logprior,
)
from depfa.services.transforms import ParamBlock, TransformSpec

logger = logging.getLogger(__name__)

INITIAL_EXTRA_PRECISION = 1.0


@dataclass(frozen=True)
class OuParams:
    rho_ou: float
    sigma_ou: float

    def __post_init__(self):
        if not (0.0 < self.rho_ou < 1.0):
            raise ValueError(f"rho_ou must lie in (0, 1), got {self.rho_ou}")
        if not (np.isfinite(self.sigma_ou) and self.sigma_ou > 0):
            raise ValueError(f"sigma_ou must be positive, got {self.sigma_ou}")

    def decay(self, dt):
        return self.rho_ou ** np.asarray(dt, dtype=float)

    def step_variance(self, dt):
        """sigma_dt^2 = sigma_ou^2 (1 - rho_ou^(2 dt))."""
        return self.sigma_ou**2 * -np.expm1(2.0 * np.asarray(dt, dtype=float) * np.log(self.rho_ou))


@dataclass
class DynamicParams:
    phi: np.ndarray  # (T+1, I)
    delta: np.ndarray
    tau_s: float
    tau_u: float
    ou: OuParams
    sigma: Optional[np.ndarray] = None
    rho: Optional[np.ndarray] = None
    xi: float = 0.0
    sigma_delta: Optional[float] = None
    epsilon: float = 0.01


def ou_transition_logpdf(phi_t: np.ndarray, phi_prev: np.ndarray, dt: float, ou: OuParams) -> float:
    """Independent normals, mean rho^dt phi_prev, variance sigma_ou^2 (1 - rho^(2 dt))."""
    if not dt > 0:
        raise ValueError(f"dt must be positive, got {dt}")
    phi_t = np.asarray(phi_t, dtype=float)
    mean = ou.decay(dt) * np.asarray(phi_prev, dtype=float)
    var = float(ou.step_variance(dt))
    r = phi_t - mean
    return float(-0.5 * phi_t.size * (LOG_2PI + np.log(var)) - 0.5 * np.sum(r * r) / var)


def step_precision(L, hyper: BymHyper, dt: float, ou: OuParams) -> PrecisionMatrix:
    """Combined per-step precision tau_s L + (tau_u + h) I."""
    h = 1.0 / float(ou.step_variance(dt))
    return bym_precision(L, hyper, extra_diagonal=h)


def simulate_step(L, hyper: BymHyper, dt: float, ou: OuParams, phi_prev: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """One draw of phi_t given phi_{t-1} from the combined per-step conditional."""
    P = step_precision(L, hyper, dt, ou)
    g = ou.decay(dt) / float(ou.step_variance(dt))
    mean = P.solve(g * np.asarray(phi_prev, dtype=float))
    return mean + gmrf_sample(P, rng)


def dynamic_transforms(n_times: int, n_items: int, n_conditions: int, delta_prior: DeltaPrior = "lowrank") -> TransformSpec:
    return TransformSpec(
        [ParamBlock("phi", (n_times, n_items), "real"), ParamBlock("delta", (n_conditions,), "real")]
        + hyper_blocks(n_conditions, delta_prior)
        + [ParamBlock("rho_ou", (), "prob"), ParamBlock("sigma_ou", (), "positive")]
    )


class DynamicModel:
    """Log-posterior of the dynamic model with analytic gradient."""

    def __init__(
        self,
        dataset: LongitudinalDataset,
        graph: ItemGraph,
        epsilon: float = 0.01,
        delta_prior: DeltaPrior = "lowrank",
        logdet_backend: LogdetBackend = "auto",
    ):
        if graph.n_items != dataset.n_items:
            raise ValueError(f"graph has {graph.n_items} items, dataset has {dataset.n_items}")
        self.dataset = dataset
        self.epsilon = epsilon
        self.delta_prior = delta_prior
        self.L = laplacian(graph)
        self.backend = resolve_logdet_backend(dataset.n_items, logdet_backend)
        if self.backend == "spectrum":
            self.spectrum = LaplacianSpectrum.from_laplacian(self.L, vectors=True)
        else:
            self.logdet_eval = CholeskyLogdet.from_laplacian(self.L)
        self.dts = dataset.dts
        self.likelihoods = [Likelihood(snap, epsilon) for snap in dataset.snapshots]
        self.transforms = dynamic_transforms(dataset.n_times, dataset.n_items, dataset.n_conditions, delta_prior)

    def to_params(self, x: np.ndarray) -> DynamicParams:
        v = self.transforms.split(np.asarray(x, dtype=float))
        return DynamicParams(
            phi=v["phi"], delta=v["delta"], tau_s=float(v["tau_s"]), tau_u=float(v["tau_u"]),
            ou=OuParams(float(v["rho_ou"]), float(v["sigma_ou"])),
            sigma=v.get("sigma"), rho=v.get("rho"), xi=float(v.get("xi", 0.0)),
            sigma_delta=None if "sigma_delta" not in v else float(v["sigma_delta"]),
            epsilon=self.epsilon,
        )

    def from_params(self, params: DynamicParams) -> np.ndarray:
        values = {
            "phi": params.phi, "delta": params.delta, "tau_s": params.tau_s, "tau_u": params.tau_u,
            "rho_ou": params.ou.rho_ou, "sigma_ou": params.ou.sigma_ou,
        }
        if self.delta_prior == "diagonal":
            values["sigma_delta"] = params.sigma_delta
        else:
            values.update(sigma=params.sigma, rho=params.rho, xi=params.xi)
        return self.transforms.join(values)

    def _in_support(self, v: Dict[str, np.ndarray]) -> bool:
        if not all(np.all(np.isfinite(a)) for a in v.values()):
            return False
        if v["tau_s"] <= 0 or v["tau_u"] <= 0 or v["sigma_ou"] <= 0:
            return False
        if not 0 < v["rho_ou"] < 1:
            return False
        if "sigma_delta" in v:
            return bool(v["sigma_delta"] > 0)
        return bool(np.all(v["sigma"] > 0) and np.all(np.abs(v["rho"]) < 1) and abs(v["xi"]) < 1)

    def field_logprior(self, phi: np.ndarray, tau_s: float, tau_u: float, rho_ou: float, sigma_ou: float):
        """
        Initial state plus per-step conditionals.

        Returns:
            (value, d_phi, d_tau_s, d_tau_u, d_rho_ou, d_sigma_ou)
        """
        if self.backend == "cholesky":
            return self._field_logprior_sparse(phi, tau_s, tau_u, rho_ou, sigma_ou)
        lam = self.spectrum.eigenvalues
        V = self.spectrum.eigenvectors
        n = lam.shape[0]
        psi = phi @ V
        d_psi = np.zeros_like(psi)

        q0 = tau_s * lam + tau_u + INITIAL_EXTRA_PRECISION
        val = -0.5 * n * LOG_2PI + 0.5 * np.sum(np.log(q0)) - 0.5 * np.sum(q0 * psi[0] ** 2)
        d_psi[0] = -q0 * psi[0]
        s_u0 = 0.5 / q0 - 0.5 * psi[0] ** 2
        d_tau_s = float(np.sum(lam * s_u0))
        d_tau_u = float(np.sum(s_u0))
        d_rho = 0.0
        d_sig = 0.0

        if self.dts.size:
            dt = self.dts[:, None]
            log_r = np.log(rho_ou)
            one_minus = -np.expm1(2.0 * dt * log_r)
            h = 1.0 / (sigma_ou**2 * one_minus)
            a = np.exp(dt * log_r)
            g = a * h
            P = tau_s * lam[None, :] + tau_u + h
            cur, prev = psi[1:], psi[:-1]
            val += float(
                -0.5 * n * LOG_2PI * self.dts.size
                + 0.5 * np.sum(np.log(P))
                - 0.5 * np.sum(P * cur**2)
                + np.sum(g * cur * prev)
                - 0.5 * np.sum(g * g * prev**2 / P)
            )
            d_psi[1:] += -P * cur + g * prev
            d_psi[:-1] += g * cur - g * g * prev / P

            s_u = 0.5 / P - 0.5 * cur**2 + 0.5 * g * g * prev**2 / P**2
            d_tau_s += float(np.sum(lam[None, :] * s_u))
            d_tau_u += float(np.sum(s_u))
            s_g = np.sum(cur * prev, axis=1, keepdims=True) - g * np.sum(prev**2 / P, axis=1, keepdims=True)
            s_h = np.sum(s_u, axis=1, keepdims=True) + a * s_g
            s_a = h * s_g
            dh_drho = h * h * sigma_ou**2 * 2.0 * dt * np.exp((2.0 * dt - 1.0) * log_r)
            da_drho = dt * np.exp((dt - 1.0) * log_r)
            d_rho = float(np.sum(s_h * dh_drho + s_a * da_drho))
            d_sig = float(np.sum(s_h * (-2.0 * h / sigma_ou)))

        return val, d_psi @ V.T, d_tau_s, d_tau_u, d_rho, d_sig

    def _field_logprior_sparse(self, phi, tau_s, tau_u, rho_ou, sigma_ou):
        """Vertex-basis version of `field_logprior`; one banded factorization per visit."""
        n = phi.shape[1]
        L = self.L
        d_phi = np.zeros_like(phi)

        f0 = self.logdet_eval.factor(tau_s, tau_u + INITIAL_EXTRA_PRECISION)
        L0 = L @ phi[0]
        quad_s0, quad_u0 = float(phi[0] @ L0), float(phi[0] @ phi[0])
        shift0 = tau_u + INITIAL_EXTRA_PRECISION
        val = -0.5 * n * LOG_2PI + 0.5 * f0.logdet - 0.5 * (tau_s * quad_s0 + shift0 * quad_u0)
        d_phi[0] = -(tau_s * L0 + shift0 * phi[0])
        d_tau_s = 0.5 * f0.trace_inverse_product(L) - 0.5 * quad_s0
        d_tau_u = 0.5 * f0.trace_inverse() - 0.5 * quad_u0
        d_rho = 0.0
        d_sig = 0.0

        log_r = np.log(rho_ou)
        for t, dt in enumerate(self.dts, start=1):
            one_minus = -np.expm1(2.0 * dt * log_r)
            h = 1.0 / (sigma_ou**2 * one_minus)
            a = np.exp(dt * log_r)
            g = a * h
            cur, prev = phi[t], phi[t - 1]
            f = self.logdet_eval.factor(tau_s, tau_u + h)
            y = f.solve(prev)
            Lc, Ly = L @ cur, L @ y
            quad_s, quad_u = float(cur @ Lc), float(cur @ cur)
            val += float(
                -0.5 * n * LOG_2PI
                + 0.5 * f.logdet
                - 0.5 * (tau_s * quad_s + (tau_u + h) * quad_u)
                + g * float(cur @ prev)
                - 0.5 * g * g * float(prev @ y)
            )
            d_phi[t] += -(tau_s * Lc + (tau_u + h) * cur) + g * prev
            d_phi[t - 1] += g * cur - g * g * y

            s_u = 0.5 * f.trace_inverse() - 0.5 * quad_u + 0.5 * g * g * float(y @ y)
            d_tau_s += 0.5 * f.trace_inverse_product(L) - 0.5 * quad_s + 0.5 * g * g * float(y @ Ly)
            d_tau_u += s_u
            s_g = float(cur @ prev) - g * float(prev @ y)
            s_h = s_u + a * s_g
            s_a = h * s_g
            dh_drho = h * h * sigma_ou**2 * 2.0 * dt * np.exp((2.0 * dt - 1.0) * log_r)
            da_drho = dt * np.exp((dt - 1.0) * log_r)
            d_rho += float(s_h * dh_drho + s_a * da_drho)
            d_sig += float(s_h * (-2.0 * h / sigma_ou))

        return float(val), d_phi, float(d_tau_s), float(d_tau_u), d_rho, d_sig

    def log_posterior(self, x: np.ndarray) -> Tuple[float, np.ndarray]:
        x = np.asarray(x, dtype=float)
        v = self.transforms.split(x)
        if not self._in_support(v):
            return -np.inf, np.zeros_like(x)
        phi, delta = v["phi"], v["delta"]
        tau_s, tau_u = float(v["tau_s"]), float(v["tau_u"])
        rho_ou, sigma_ou = float(v["rho_ou"]), float(v["sigma_ou"])
        grads: Dict[str, np.ndarray] = {}

        val, grads["phi"], grads["tau_s"], grads["tau_u"], d_rho, d_sig = self.field_logprior(
            phi, tau_s, tau_u, rho_ou, sigma_ou
        )
        try:
            val += hyper_logprior(v, delta, grads)
        except CovarianceError:
            return -np.inf, np.zeros_like(x)
        vb, gb = beta22_logpdf(rho_ou)
        vh, gh = half_normal_logpdf(sigma_ou)
        val += vb + vh
        grads["rho_ou"] = d_rho + gb
        grads["sigma_ou"] = d_sig + gh

        d_phi = np.array(grads["phi"], copy=True)
        for t, lik in enumerate(self.likelihoods):
            ll, dlam = lik.value_and_grad(phi[t][:, None] + delta[None, :])
            val += ll
            d_phi[t] += dlam.sum(axis=1)
            grads["delta"] = grads["delta"] + dlam.sum(axis=0)
        grads["phi"] = d_phi
        return float(val), self.transforms.join(grads)

    def logdensity(self, z: np.ndarray) -> Tuple[float, np.ndarray]:
        z = np.asarray(z, dtype=float)
        x = self.transforms.constrain(z)
        val, grad_x = self.log_posterior(x)
        if not np.isfinite(val):
            return -np.inf, np.zeros_like(z)
        return val + self.transforms.log_jacobian(z), self.transforms.pullback(z, grad_x)

    def __call__(self, z: np.ndarray) -> Tuple[float, np.ndarray]:
        return self.logdensity(z)


def dynamic_logpost(params: DynamicParams, dataset: LongitudinalDataset, graph: ItemGraph):
    """(log joint, gradient) on the constrained space, ordered as `dynamic_transforms`."""
    if np.any(np.diff(dataset.times) <= 0):
        raise DataError("visit times must be strictly increasing")
    delta_prior: DeltaPrior = "diagonal" if params.sigma_delta is not None else "lowrank"
    model = DynamicModel(dataset, graph, epsilon=params.epsilon, delta_prior=delta_prior)
    return model.log_posterior(model.from_params(params))


def lag1_autocorrelation(paths: np.ndarray) -> float:
    """Correlation of (phi_{t-1, i}, phi_{t, i}) pooled over items and steps; paths shaped (T+1, I)."""
    paths = np.asarray(paths, dtype=float)
    return float(np.corrcoef(paths[:-1].ravel(), paths[1:].ravel())[0, 1])
