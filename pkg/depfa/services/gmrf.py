"""
Gaussian Markov random fields with BYM precision.

Precision matrices are kept sparse and factorized with a banded Cholesky after
a reverse Cuthill-McKee reordering, which keeps the band (and therefore the
fill) of k-NN precisions narrow. The factor supplies log-determinants, exact
draws and positive-definiteness checks.

For the BYM family Q = tau_s * L + c * I the eigenvalues of L give the
log-determinant for any (tau_s, c) in O(n); `LaplacianSpectrum` carries them so
the sampler's target can evaluate log-densities and tau-gradients without
refactorizing.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Dict, Literal, Optional, Tuple

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
from scipy.sparse.csgraph import reverse_cuthill_mckee

from depfa.services.exceptions import FactorizationError
from shared.config import settings

logger = logging.getLogger(__name__)

LOG_2PI = float(np.log(2.0 * np.pi))


@dataclass(frozen=True)
class BymHyper:
    """BYM(tau_s, tau_u): structured and unstructured precisions."""
    tau_s: float
    tau_u: float

    def __post_init__(self):
        for name in ("tau_s", "tau_u"):
            value = getattr(self, name)
            if not np.isfinite(value) or value < 0:
                raise ValueError(f"{name} must be finite and non-negative, got {value}")
            if value == 0 and not settings.allow_boundary_hyper:
                raise ValueError(f"{name} must be strictly positive, got 0")


class BandedCholesky:
    """P Q P^T = U^T U with P a bandwidth-reducing permutation and U upper-banded."""

    def __init__(self, perm: np.ndarray, bandwidth: int, ab: np.ndarray):
        self.perm = perm
        self.bandwidth = bandwidth
        self.ab = ab
        self._sinv: Optional[np.ndarray] = None

    @classmethod
    def factorize(cls, matrix: sp.spmatrix, pivot_tolerance: Optional[float] = None) -> "BandedCholesky":
        tol = settings.pivot_tolerance if pivot_tolerance is None else pivot_tolerance
        q = sp.csr_matrix(matrix)
        n = q.shape[0]
        perm = np.asarray(reverse_cuthill_mckee(q, symmetric_mode=True), dtype=np.int64)
        qp = sp.triu(q[perm][:, perm]).tocoo()
        bw = int(np.max(qp.col - qp.row)) if qp.nnz else 0
        ab = np.zeros((bw + 1, n))
        ab[bw + qp.row - qp.col, qp.col] = qp.data
        try:
            u = sla.cholesky_banded(ab, lower=False)
        except sla.LinAlgError as e:
            raise FactorizationError(f"matrix is not positive definite: {e}", {"min_pivot": 0.0}) from e
        pivots = u[bw] ** 2
        scale = float(np.max(np.abs(q.diagonal()))) if n else 1.0
        min_pivot = float(pivots.min()) if n else float("inf")
        if min_pivot <= tol * max(scale, np.finfo(float).tiny):
            raise FactorizationError(
                "matrix is numerically singular",
                {"min_pivot": min_pivot, "relative_pivot": min_pivot / scale if scale else 0.0},
            )
        return cls(perm, bw, u)

    @property
    def diagonal(self) -> np.ndarray:
        return self.ab[self.bandwidth]

    @property
    def min_pivot(self) -> float:
        return float(np.min(self.diagonal ** 2))

    @property
    def logdet(self) -> float:
        return float(2.0 * np.sum(np.log(self.diagonal)))

    def selected_inverse(self) -> np.ndarray:
        """
        Entries of the permuted inverse inside the band, by Takahashi's recursion.

        Returns S with S[i, d] = (P Q P^T)^{-1}[i, i + d] for 0 <= d <= bandwidth;
        entries past the last row are zero.
        """
        if self._sinv is not None:
            return self._sinv
        bw, ab = self.bandwidth, self.ab
        n = ab.shape[1]
        S = np.zeros((n, bw + 1))
        steps = np.arange(1, bw + 1)
        p, q = np.meshgrid(np.arange(bw), np.arange(bw), indexing="ij")
        lo, off = np.minimum(p, q), np.abs(p - q)
        for i in range(n - 1, -1, -1):
            w = min(bw, n - 1 - i)
            d = ab[bw, i]
            if w == 0:
                S[i, 0] = 1.0 / d**2
                continue
            u = ab[bw - steps[:w], i + steps[:w]]
            block = S[i + 1 + lo[:w, :w], off[:w, :w]]
            row = -(block @ u) / d
            S[i, 1:w + 1] = row
            S[i, 0] = 1.0 / d**2 - float(u @ row) / d
        self._sinv = S
        return S

    def trace_inverse(self) -> float:
        """tr(Q^{-1})."""
        return float(np.sum(self.selected_inverse()[:, 0]))

    def trace_inverse_product(self, matrix: sp.spmatrix) -> float:
        """tr(Q^{-1} M) for a symmetric M whose pattern lies inside Q's band."""
        S = self.selected_inverse()
        m = sp.csr_matrix(matrix)[self.perm][:, self.perm].tocoo()
        lo, off = np.minimum(m.row, m.col), np.abs(m.row - m.col)
        if off.size and off.max() > self.bandwidth:
            raise ValueError("matrix pattern reaches outside the factor's band")
        return float(np.sum(S[lo, off] * m.data))

    def solve(self, b: np.ndarray) -> np.ndarray:
        """Solve Q x = b."""
        b = np.asarray(b, dtype=float)
        y = sla.cho_solve_banded((self.ab, False), b[self.perm])
        x = np.empty_like(y)
        x[self.perm] = y
        return x

    def sample(self, rng: np.random.Generator, size: Optional[int] = None) -> np.ndarray:
        """Draw from N(0, Q^{-1}); shape (n,) or (size, n)."""
        n = self.ab.shape[1]
        z = rng.standard_normal(n if size is None else (n, size))
        y = sla.solve_banded((0, self.bandwidth), self.ab, z)
        x = np.empty_like(y)
        x[self.perm] = y
        return x if size is None else x.T


class PrecisionMatrix:
    """Sparse symmetric positive-definite precision with a lazily cached factor."""

    def __init__(self, matrix: sp.spmatrix):
        q = sp.csr_matrix(matrix, dtype=float)
        if q.shape[0] != q.shape[1]:
            raise FactorizationError("precision matrix must be square", {"shape": list(q.shape)})
        asym = abs(q - q.T)
        if asym.nnz and asym.max() > 1e-12 * max(1.0, abs(q).max()):
            raise FactorizationError("precision matrix is not symmetric")
        q.eliminate_zeros()
        self.matrix = q
        self._factor: Optional[BandedCholesky] = None

    @classmethod
    def from_dense(cls, array: np.ndarray) -> "PrecisionMatrix":
        return cls(sp.csr_matrix(np.asarray(array, dtype=float)))

    @property
    def dim(self) -> int:
        return self.matrix.shape[0]

    @property
    def factor(self) -> BandedCholesky:
        if self._factor is None:
            self._factor = BandedCholesky.factorize(self.matrix)
        return self._factor

    @property
    def logdet(self) -> float:
        return self.factor.logdet

    def matvec(self, x: np.ndarray) -> np.ndarray:
        return self.matrix @ x

    def quad(self, x: np.ndarray) -> float:
        return float(x @ (self.matrix @ x))

    def solve(self, b: np.ndarray) -> np.ndarray:
        return self.factor.solve(b)

    def toarray(self) -> np.ndarray:
        return self.matrix.toarray()


def bym_precision(L: sp.spmatrix, h: BymHyper, extra_diagonal: float = 0.0) -> PrecisionMatrix:
    """Q = tau_s * L + (tau_u + extra_diagonal) * I."""
    L = sp.csr_matrix(L)
    n = L.shape[0]
    row_sums = np.abs(np.asarray(L.sum(axis=1)).ravel())
    if n and row_sums.max() > 1e-8 * max(1.0, abs(L).max()):
        raise FactorizationError("input is not a graph Laplacian (rows do not sum to zero)")
    Q = PrecisionMatrix(h.tau_s * L + (h.tau_u + extra_diagonal) * sp.identity(n, format="csr"))
    if h.tau_u + extra_diagonal > 0:
        try:
            Q.factor
        except FactorizationError as e:
            raise FactorizationError(f"BYM precision failed to factorize; invalid Laplacian input: {e}", e.details) from e
    return Q


def _check_dim(x: np.ndarray, Q: PrecisionMatrix) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.ndim != 1 or x.shape[0] != Q.dim:
        raise ValueError(f"dimension mismatch: x has shape {x.shape}, Q has dimension {Q.dim}")
    return x


def gmrf_logpdf(x: np.ndarray, Q: PrecisionMatrix) -> float:
    x = _check_dim(x, Q)
    return -0.5 * Q.dim * LOG_2PI + 0.5 * Q.logdet - 0.5 * Q.quad(x)


def gmrf_grad(x: np.ndarray, Q: PrecisionMatrix) -> np.ndarray:
    x = _check_dim(x, Q)
    return -Q.matvec(x)


def gmrf_sample(Q: PrecisionMatrix, rng: np.random.Generator, size: Optional[int] = None) -> np.ndarray:
    return Q.factor.sample(rng, size)


@dataclass
class ValidityReport:
    ok: bool
    min_pivot: float
    blocks: Dict[str, float] = field(default_factory=dict)
    reason: str = ""


def check_valid_joint(Q_phi: PrecisionMatrix, Q_delta: PrecisionMatrix) -> ValidityReport:
    """Factorize each block of diag(Q_phi, Q_delta); a failed block is reported, never raised."""
    blocks: Dict[str, float] = {}
    reasons = []
    for name, Q in (("phi", Q_phi), ("delta", Q_delta)):
        try:
            # fresh factorization; a cached one may predate a tolerance change
            blocks[name] = BandedCholesky.factorize(Q.matrix).min_pivot
        except FactorizationError as e:
            blocks[name] = float(e.details.get("min_pivot", 0.0))
            reasons.append(f"{name}: {e}")
    report = ValidityReport(ok=not reasons, min_pivot=min(blocks.values()), blocks=blocks, reason="; ".join(reasons))
    logger.info(f"joint validity check: ok={report.ok} min_pivot={report.min_pivot:.3e}")
    return report


@dataclass(frozen=True)
class LaplacianSpectrum:
    """Eigen-decomposition of L_p; eigenvectors are kept only when requested."""
    eigenvalues: np.ndarray
    eigenvectors: Optional[np.ndarray] = None

    @classmethod
    def from_laplacian(cls, L: sp.spmatrix, vectors: bool = False) -> "LaplacianSpectrum":
        dense = sp.csr_matrix(L).toarray()
        if vectors:
            w, v = sla.eigh(dense)
        else:
            w, v = sla.eigh(dense, eigvals_only=True), None
        # the null mode comes back as +-1e-15
        return cls(eigenvalues=np.clip(w, 0.0, None), eigenvectors=v)

    @property
    def dim(self) -> int:
        return self.eigenvalues.shape[0]

    def diagonal(self, tau_s: float, shift: float) -> np.ndarray:
        """Eigenvalues of tau_s * L + shift * I."""
        return tau_s * self.eigenvalues + shift

    def logdet(self, tau_s: float, shift: float) -> float:
        return float(np.sum(np.log(self.diagonal(tau_s, shift))))

    def logdet_grad(self, tau_s: float, shift: float):
        """(d logdet / d tau_s, d logdet / d shift)."""
        inv = 1.0 / self.diagonal(tau_s, shift)
        return float(np.sum(self.eigenvalues * inv)), float(np.sum(inv))


class CholeskyLogdet:
    """
    log|tau_s L + shift I| and its tau-derivatives from a banded factorization.

    Memory stays O(n * bandwidth) where the spectrum needs the dense n x n
    Laplacian. The factor for the most recent (tau_s, shift) is cached, so a
    value and its gradient at the same point factorize once.
    """

    def __init__(self, L: sp.spmatrix):
        self.L = sp.csr_matrix(L, dtype=float)
        self._key: Optional[Tuple[float, float]] = None
        self._factor: Optional[BandedCholesky] = None

    @classmethod
    def from_laplacian(cls, L: sp.spmatrix) -> "CholeskyLogdet":
        return cls(L)

    @property
    def dim(self) -> int:
        return self.L.shape[0]

    def factor(self, tau_s: float, shift: float) -> BandedCholesky:
        key = (float(tau_s), float(shift))
        if key != self._key:
            self._factor = BandedCholesky.factorize(tau_s * self.L + shift * sp.identity(self.dim, format="csr"))
            self._key = key
        return self._factor

    def logdet(self, tau_s: float, shift: float) -> float:
        return self.factor(tau_s, shift).logdet

    def logdet_grad(self, tau_s: float, shift: float):
        """(tr(Q^{-1} L), tr(Q^{-1}))."""
        f = self.factor(tau_s, shift)
        return f.trace_inverse_product(self.L), f.trace_inverse()


LogdetBackend = Literal["auto", "spectrum", "cholesky"]


def resolve_logdet_backend(n_items: int, backend: LogdetBackend = "auto") -> str:
    """With "auto" the spectrum serves up to DEPFA_SPECTRUM_MAX_ITEMS items and the banded factor above."""
    if backend == "auto":
        return "spectrum" if n_items <= settings.spectrum_max_items else "cholesky"
    if backend not in ("spectrum", "cholesky"):
        raise ValueError(f"unknown log-determinant backend {backend!r}")
    return backend


def bym_logdet(L: sp.spmatrix, backend: LogdetBackend = "auto"):
    """The log-determinant evaluator for tau_s L + c I on the chosen backend."""
    chosen = resolve_logdet_backend(L.shape[0], backend)
    logger.info(f"bym logdet backend: items={L.shape[0]} backend={chosen}")
    if chosen == "spectrum":
        return LaplacianSpectrum.from_laplacian(L)
    return CholeskyLogdet.from_laplacian(L)
