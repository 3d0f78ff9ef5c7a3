"""Thin-plate spline design and its Demmler-Reinsch orthogonalization.

The raw design has columns ``[1, age, |age - k_1|^3, ..., |age - k_K|^3]``
with penalty ``D = diag(0_{2x2}, Omega)``, ``Omega[l, k] = |k_l - k_k|^3``.
The Demmler-Reinsch transform ``Atilde = Ztilde R^{-1} U`` gives an
orthonormal design in which the penalty is ``diag(0, 0, s)``, so the spline
coefficients ``w_k`` get independent priors with variances ``sigma_b^2 / s_k``.

Omega is only conditionally positive definite (it has zero trace, hence
negative eigenvalues).  With ``penalty="raw"`` the penalty block is used as
is and ``s`` holds the singular values of ``R22^{-T} Omega R22^{-1}``; with
``penalty="absolute"`` Omega is first replaced by ``V |Lambda| V^T``, which
is positive definite and keeps the covariance identity exact.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_triangular

ZERO_TOL = 1e-10


class BasisError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class KnotSet:
    knots: np.ndarray

    def __post_init__(self):
        k = np.array(self.knots, dtype=float).reshape(-1)
        if k.size == 0:
            raise BasisError("knot set is empty")
        if not np.all(np.isfinite(k)):
            raise BasisError("knots must be finite")
        if np.any(np.diff(k) <= 0):
            raise BasisError(f"knots must be strictly increasing: {k}")
        k.setflags(write=False)
        object.__setattr__(self, "knots", k)

    @property
    def K(self) -> int:
        return self.knots.size


def default_knot_count(ages, per_knot: int = 4, cap: int = 35) -> int:
    """One knot every ``per_knot`` unique values, at most ``cap``."""
    return int(min(cap, max(1, np.unique(ages).size // per_knot)))


def select_knots(ages, K: int) -> KnotSet:
    """K knots at the equally spaced interior quantiles ``k/(K+1)`` of the unique ages."""
    u = np.unique(np.asarray(ages, dtype=float))
    if K < 1:
        raise BasisError(f"need at least one knot, got K={K}")
    if u.size < K + 1:
        raise BasisError(f"{u.size} unique ages cannot support K={K} knots (need at least K+1)")
    probs = np.arange(1, K + 1) / (K + 1)
    knots = np.quantile(u, probs, method="linear")
    if np.unique(knots).size != K:
        raise BasisError(f"knot quantiles collide: {knots}")
    return KnotSet(knots)


def penalty_matrix(knots: KnotSet) -> np.ndarray:
    k = knots.knots
    return np.abs(k[:, None] - k[None, :]) ** 3


def absolute_penalty(omega: np.ndarray) -> np.ndarray:
    """Positive-definite replacement ``V |Lambda| V^T`` of a symmetric penalty."""
    lam, V = np.linalg.eigh(omega)
    return (V * np.abs(lam)) @ V.T


def thin_plate_columns(ages, knots: KnotSet) -> np.ndarray:
    a = np.asarray(ages, dtype=float).reshape(-1)
    return np.abs(a[:, None] - knots.knots[None, :]) ** 3


@dataclass(frozen=True, eq=False)
class RawDesign:
    ages: np.ndarray
    knots: KnotSet
    Ztilde: np.ndarray
    D: np.ndarray

    @property
    def K(self) -> int:
        return self.knots.K


def build_raw_design(ages, knots: KnotSet) -> RawDesign:
    a = np.asarray(ages, dtype=float).reshape(-1)
    if a.size == 0:
        raise BasisError("no ages")
    K = knots.K
    Z = np.column_stack([np.ones_like(a), a, thin_plate_columns(a, knots)])
    D = np.zeros((K + 2, K + 2))
    D[2:, 2:] = penalty_matrix(knots)
    return RawDesign(ages=a, knots=knots, Ztilde=Z, D=D)


def _standardized_design(ages, knots: KnotSet, center: float, scale: float) -> np.ndarray:
    a = np.asarray(ages, dtype=float).reshape(-1)
    return np.column_stack([np.ones_like(a), (a - center) / scale, thin_plate_columns(a, knots)])


@dataclass(frozen=True, eq=False)
class DRBasis:
    """Demmler-Reinsch basis fitted on a set of training ages.

    ``R`` is the Cholesky factor of the Gram matrix of the standardized
    design (age column centred by ``age_center`` and divided by
    ``age_scale``); this leaves ``Atilde`` and ``s`` unchanged.
    """

    knots: KnotSet
    ages: np.ndarray
    Atilde: np.ndarray
    s_tilde: np.ndarray
    s: np.ndarray
    eigen_sign: np.ndarray
    U: np.ndarray
    R: np.ndarray
    Rinv_U: np.ndarray
    omega: np.ndarray
    age_center: float
    age_scale: float
    penalty: str = "raw"

    @property
    def K(self) -> int:
        return self.knots.K

    @property
    def A(self) -> np.ndarray:
        return self.Atilde[:, 2:]

    @property
    def R22(self) -> np.ndarray:
        return self.R[2:, 2:]

    @property
    def age_range(self) -> tuple[float, float]:
        return float(self.ages.min()), float(self.ages.max())

    def design(self, ages) -> np.ndarray:
        """Rows of ``Atilde`` at arbitrary ages."""
        return _standardized_design(ages, self.knots, self.age_center, self.age_scale) @ self.Rinv_U

    def columns(self, ages) -> np.ndarray:
        """Rows of ``A`` (the K penalized columns) at arbitrary ages."""
        return self.design(ages)[:, 2:]

    def extrapolating(self, ages) -> np.ndarray:
        lo, hi = self.age_range
        a = np.asarray(ages, dtype=float)
        return (a < lo) | (a > hi)

    def orthonormality_error(self) -> float:
        G = self.Atilde.T @ self.Atilde
        return float(np.abs(G - np.eye(G.shape[0])).max())

    def thin_plate_precision(self) -> np.ndarray:
        """Prior precision (up to sigma_b^-2) of the raw thin-plate coefficients b.

        Equals ``R22^T U diag(s) U^T R22``, i.e. the precision implied by
        ``w ~ N(0, sigma_b^2 diag(s)^-1)`` through ``w = U^T R22 b``; it
        reduces to Omega whenever the penalty block is positive definite.
        """
        B = self.U.T @ self.R22
        P = (B.T * self.s) @ B
        return 0.5 * (P + P.T)

    def to_thin_plate(self, beta: float, w) -> tuple[float, float, np.ndarray]:
        """Map ``beta*age + A w`` to ``intercept + slope*age + sum_k b_k |age-k_k|^3``."""
        g = self.Rinv_U[:, 2:] @ np.asarray(w, dtype=float)
        b = g[2:]
        intercept = g[0] - g[1] * self.age_center / self.age_scale
        slope = beta + g[1] / self.age_scale
        return float(intercept), float(slope), b


def _householder_qr(Z: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Thin QR with positive diag(R) and R^T R = Z^T Z.

    Columns are equilibrated before factoring (the cubic columns are many
    orders larger than the intercept); scaling is undone on R only, so Q
    keeps its full orthonormality.
    """
    norms = np.linalg.norm(Z, axis=0)
    norms[norms == 0] = 1.0
    Q, R = np.linalg.qr(Z / norms, mode="reduced")
    signs = np.sign(np.diag(R))
    signs[signs == 0] = 1.0
    return Q * signs[None, :], (R * signs[:, None]) * norms[None, :]


def demmler_reinsch(raw: RawDesign, penalty: str = "raw", zero_tol: float = ZERO_TOL) -> DRBasis:
    if penalty not in ("raw", "absolute"):
        raise BasisError(f"unknown penalty mode {penalty!r}")
    ages = raw.ages
    K = raw.K
    p = K + 2
    if K < 2:
        raise BasisError("the thin-plate penalty needs at least 2 knots (one knot gives a zero penalty)")
    if np.unique(ages).size < p:
        raise BasisError(f"rank-deficient design: {np.unique(ages).size} distinct ages for {p} columns")
    center = float(ages.mean())
    scale = float(ages.std())
    if scale == 0:
        raise BasisError("all ages identical")
    Zs = _standardized_design(ages, raw.knots, center, scale)
    Qz, R = _householder_qr(Zs)
    d = np.abs(np.diag(R)) / np.linalg.norm(Zs, axis=0)
    if d.min() <= max(Zs.shape) * np.finfo(float).eps:
        raise BasisError("rank-deficient design: Ztilde^T Ztilde is not positive definite")

    omega = raw.D[2:, 2:].copy()
    if penalty == "absolute":
        omega = absolute_penalty(omega)
    Dfull = np.zeros((p, p))
    Dfull[2:, 2:] = omega

    # R^{-T} D R^{-1}; its zero block is exact, the lower block is R22^{-T} Omega R22^{-1}
    Rinv = solve_triangular(R, np.eye(p), lower=False)
    M = Rinv.T @ Dfull @ Rinv
    M = 0.5 * (M + M.T)
    sv = np.sort(np.linalg.svd(M, compute_uv=False))
    n_zero = int(np.sum(sv <= zero_tol * sv.max()))
    if n_zero != 2:
        raise BasisError(f"expected exactly 2 null penalty directions, found {n_zero} (singular values {sv[:4]})")

    if omega_is_pd(omega):
        # M22 = F^T F with F = L^T R22^-1; the SVD keeps the small eigenvalues accurate
        L = np.linalg.cholesky(omega)
        F = solve_triangular(R[2:, 2:], L, trans="T", lower=False).T
        _, sig, Vt = np.linalg.svd(F)
        lam, U = sig**2, Vt.T
    else:
        lam, U = np.linalg.eigh(M[2:, 2:])
    order = np.argsort(np.abs(lam), kind="stable")
    lam, U = lam[order], U[:, order]
    # fix eigenvector signs so the basis is reproducible across LAPACK builds
    flip = np.sign(U[np.argmax(np.abs(U), axis=0), np.arange(K)])
    U = U * flip
    s = np.abs(lam)
    Ut = np.eye(p)
    Ut[2:, 2:] = U
    Rinv_U = Rinv @ Ut
    # Zs R^-1 = Q exactly in exact arithmetic; using Q avoids the conditioning of Zs
    Atilde = Qz @ Ut
    return DRBasis(
        knots=raw.knots,
        ages=ages.copy(),
        Atilde=Atilde,
        s_tilde=np.concatenate([[0.0, 0.0], s]),
        s=s,
        eigen_sign=np.sign(lam),
        U=U,
        R=R,
        Rinv_U=Rinv_U,
        omega=omega,
        age_center=center,
        age_scale=scale,
        penalty=penalty,
    )


def build_basis(ages, K: int, penalty: str = "raw", knots: KnotSet | None = None) -> DRBasis:
    """Knots at age quantiles, raw design and DR transform in one call."""
    if knots is None:
        knots = select_knots(ages, K)
    return demmler_reinsch(build_raw_design(ages, knots), penalty=penalty)


def spline_eval(basis: DRBasis, beta: float, w, ages, return_mask: bool = False):
    """``f(age) = beta*age + sum_k w_k a_k(age)``.

    Ages outside the training range are evaluated by extrapolating the
    basis; ``return_mask=True`` also returns the boolean extrapolation mask.
    """
    a = np.asarray(ages, dtype=float).reshape(-1)
    f = beta * a + basis.columns(a) @ np.asarray(w, dtype=float)
    if return_mask:
        return f, basis.extrapolating(a)
    return f


def omega_is_pd(omega: np.ndarray) -> bool:
    try:
        np.linalg.cholesky(omega)
    except np.linalg.LinAlgError:
        return False
    return True


def covariance_identity_error(basis: DRBasis) -> dict[str, float | None]:
    """Max-abs errors of the identities behind ``Cov(w) = sigma^2 diag(s)^-1``.

    ``signed``: ``U^T R22 Omega^-1 R22^T U diag(lambda) - I`` (any invertible Omega).
    ``literal``: ``U^T R22 Omega^-1 R22^T U diag(s) - I``, only when Omega is PD.
    """
    omega = basis.omega
    K = basis.K
    try:
        C = basis.U.T @ basis.R22 @ np.linalg.solve(omega, basis.R22.T @ basis.U)
    except np.linalg.LinAlgError:
        return {"signed": None, "literal": None}
    lam = basis.eigen_sign * basis.s
    signed = float(np.abs(C * lam[None, :] - np.eye(K)).max())
    literal = float(np.abs(C * basis.s[None, :] - np.eye(K)).max()) if omega_is_pd(omega) else None
    return {"signed": signed, "literal": literal}


def sign_changes(v, rel_tol: float = 1e-9) -> int:
    v = np.asarray(v, dtype=float)
    keep = np.abs(v) > rel_tol * np.abs(v).max() if v.size else v
    sg = np.sign(v[keep])
    return int(np.sum(sg[1:] != sg[:-1]))


@dataclass(frozen=True, eq=False)
class ThinPlateDesign:
    """Raw thin-plate columns ``|age - k|^3`` sharing a DR basis' knots and prior.

    Used for the un-orthogonalized comparison fit; the coefficient prior
    precision is :meth:`DRBasis.thin_plate_precision`, so both designs
    encode the same smoothing prior.
    """

    basis: DRBasis

    @property
    def K(self) -> int:
        return self.basis.K

    def columns(self, ages) -> np.ndarray:
        return thin_plate_columns(ages, self.basis.knots)

    def precision(self) -> np.ndarray:
        return self.basis.thin_plate_precision()
