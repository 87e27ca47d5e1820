"""Risk algebra for ensemble-forecast collision avoidance.

Each (horizon step, obstacle) pair turns its ensemble of linearized
avoidance constraints into moment statistics, a conditional-variance
decomposition, and a 7-row linear constraint block whose satisfaction
enforces mean + nu * std <= 0 for the worst distribution matching those
moments (Cantelli form, nu = sqrt((1 - eps)/eps)).

Everything here is a pure function over immutable inputs; evaluation across
(step, obstacle) pairs can run in parallel.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateLinearizationError, InsufficientDataError, NumericError

# Covariance directions below the relative cutoff, or below an absolute
# floor of 1e-16 m^2 (rounding dust from zero-spread ensembles), count as null.
NULL_EIG_RTOL = 1e-10
NULL_EIG_ABS = 1e-16


@dataclass(frozen=True)
class LinearizedAvoidance:
    """Affine safety margin z = grad . p + offset for agent position p.

    z <= 0 certifies that p lies outside the sphere of radius ``r_bar``
    around the forecast center (supporting-halfspace over-approximation of
    the keep-out constraint, taken at the previous trajectory iterate).
    """

    grad: np.ndarray  # 3-vector
    offset: float
    obstacle_id: int = 0
    step: int = 0


@dataclass(frozen=True)
class EnsembleMoments:
    """Unbiased sample moments of the linearization coefficients."""

    mean_grad: np.ndarray          # 3
    mean_offset: float
    cov_grad: np.ndarray           # 3x3, PSD
    cov_grad_offset: np.ndarray    # 3
    var_offset: float
    null_dim: int                  # null-space dimension of cov_grad
    reg_cov: np.ndarray            # cov_grad + identity on its null space
    reg_cov_sqrt: np.ndarray       # symmetric PSD square root of reg_cov


@dataclass(frozen=True)
class ConditionalStats:
    """Schur complement of the joint (grad, offset) covariance.

    ``shift`` is the minimizer of the quadratic part of the constraint
    variance; ``resid_var`` the variance of the offset left unexplained by
    the gradient (non-negative).
    """

    shift: np.ndarray   # 3
    resid_var: float


@dataclass(frozen=True)
class RiskRows:
    """Constraint block L @ [x; s] <= g for one (step, obstacle) pair.

    Row 0 couples the mean margin with the slack budget scaled by ``nu``;
    rows 1..6 pin the slacks above the absolute value they stand in for.
    """

    matrix: np.ndarray   # 7 x (n_x + 3)
    rhs: np.ndarray      # 7
    epsilon_n: float
    nu: float


def linearize_avoidance(
    x_bar: np.ndarray,
    y_hat: np.ndarray,
    r_bar: float,
    C: np.ndarray,
    obstacle_id: int = 0,
    step: int = 0,
    literal_offset: bool = False,
) -> LinearizedAvoidance:
    """Supporting-halfspace coefficients at trajectory iterate ``x_bar``.

    With d = C x_bar - y_hat, z = -(d . p) + r_bar ||d|| + y_hat . d, so
    z <= 0 is exactly  d . (p - y_hat) >= r_bar ||d||.  ``literal_offset``
    switches to the alternative offset r_bar ||d|| - (C x_bar) . d, kept for
    comparison; it shifts the constraint and is not used by the planner.
    """
    p_bar = C @ np.asarray(x_bar, dtype=float)
    y_hat = np.asarray(y_hat, dtype=float)
    d = p_bar - y_hat
    dist = float(np.linalg.norm(d))
    if dist <= 1e-9:
        raise DegenerateLinearizationError(
            "trajectory iterate coincides with forecast center; perturb or reuse "
            "the previous iterate"
        )
    if literal_offset:
        offset = r_bar * dist - float(p_bar @ d)
    else:
        offset = r_bar * dist + float(y_hat @ d)
    return LinearizedAvoidance(
        grad=-d, offset=offset, obstacle_id=obstacle_id, step=step
    )


def linearize_ensemble(p_bar: np.ndarray, y_hats: np.ndarray, r_bar: float):
    """Vectorized linearization over ensemble members.

    Returns (grads, offsets) arrays of shape (n, 3) and (n,).  A member whose
    forecast coincides with the iterate position is nudged by 1e-6 m along z
    rather than rejected, since per-member degeneracies must not abort a
    whole planning step.
    """
    y_hats = np.asarray(y_hats, dtype=float)
    d = p_bar[None, :] - y_hats
    dist = np.linalg.norm(d, axis=1)
    bad = dist <= 1e-9
    if np.any(bad):
        y_hats = y_hats.copy()
        y_hats[bad, 2] -= 1e-6
        d = p_bar[None, :] - y_hats
        dist = np.linalg.norm(d, axis=1)
    offsets = r_bar * dist + np.einsum("ij,ij->i", y_hats, d)
    return -d, offsets


def ensemble_moments(coeffs: list[LinearizedAvoidance]) -> EnsembleMoments:
    """Mean/covariance of the coefficient ensemble (divisor N - 1).

    The covariance of the gradients is regularized to full rank by adding 1
    on each of its null directions (in its own eigenbasis, so the fix is
    independent of the coordinate frame); the symmetric square root of the
    result feeds the slack rows.
    """
    if len(coeffs) < 2:
        raise InsufficientDataError(f"need at least 2 ensemble members, got {len(coeffs)}")
    grads = np.stack([c.grad for c in coeffs])
    offsets = np.array([c.offset for c in coeffs])
    return moments_from_arrays(grads, offsets)


def moments_from_arrays(grads: np.ndarray, offsets: np.ndarray) -> EnsembleMoments:
    """Moment statistics straight from coefficient arrays (planner hot path)."""
    n = grads.shape[0]
    if n < 2:
        raise InsufficientDataError(f"need at least 2 ensemble members, got {n}")
    mean_grad = grads.mean(axis=0)
    mean_offset = float(offsets.mean())
    dg = grads - mean_grad
    do = offsets - mean_offset
    cov_grad = (dg.T @ dg) / (n - 1)
    cov_grad_offset = (dg.T @ do) / (n - 1)
    var_offset = float(do @ do) / (n - 1)
    lam, vecs = np.linalg.eigh(cov_grad)
    lam = np.maximum(lam, 0.0)
    null = lam < max(NULL_EIG_RTOL * lam[-1], NULL_EIG_ABS)
    lam_reg = np.where(null, lam + 1.0, lam)
    reg_cov = (vecs * lam_reg) @ vecs.T
    reg_cov_sqrt = (vecs * np.sqrt(lam_reg)) @ vecs.T
    return EnsembleMoments(
        mean_grad=mean_grad,
        mean_offset=mean_offset,
        cov_grad=cov_grad,
        cov_grad_offset=cov_grad_offset,
        var_offset=var_offset,
        null_dim=int(np.sum(null)),
        reg_cov=reg_cov,
        reg_cov_sqrt=reg_cov_sqrt,
    )


def constraint_std(p: np.ndarray, m: EnsembleMoments) -> float:
    """Sample standard deviation of the margin z = grad . p + offset at p."""
    p = np.asarray(p, dtype=float)
    radicand = float(p @ m.cov_grad @ p + 2.0 * (p @ m.cov_grad_offset) + m.var_offset)
    if radicand < -1e-6:
        raise NumericError(f"negative margin variance {radicand:.3e}")
    return float(np.sqrt(max(radicand, 0.0)))


def conditional_stats(m: EnsembleMoments) -> ConditionalStats:
    """Offset-given-gradient Schur complement of the regularized covariance."""
    shift = -np.linalg.solve(m.reg_cov, m.cov_grad_offset)
    resid = m.var_offset - float(m.cov_grad_offset @ np.linalg.solve(m.reg_cov, m.cov_grad_offset))
    if resid < -1e-10 * max(m.var_offset, 1.0):
        raise NumericError(f"negative conditional variance {resid:.3e}")
    return ConditionalStats(shift=shift, resid_var=max(resid, 0.0))


def std_upper_bound(p: np.ndarray, m: EnsembleMoments, c: ConditionalStats) -> float:
    """Affine-representable upper bound on :func:`constraint_std`.

    1^T |S (p - shift)| + sqrt(3 resid_var) with S the regularized covariance
    square root; the absolute values become slack variables in the rows.
    """
    q = m.reg_cov_sqrt @ (np.asarray(p, dtype=float) - c.shift)
    return float(np.sum(np.abs(q)) + np.sqrt(3.0 * c.resid_var))


def build_risk_rows(
    m: EnsembleMoments,
    c: ConditionalStats,
    epsilon: float,
    n_obs: int,
    C: np.ndarray,
) -> RiskRows:
    """Assemble the 7 x (n_x + 3) block acting on the stacked [x; s].

    The per-obstacle budget is epsilon / n_obs (union bound over obstacles);
    at budget 1 the multiplier nu vanishes and row 0 degenerates to the mean
    constraint.
    """
    if not 0.0 < epsilon <= 1.0:
        raise ValueError(f"epsilon must lie in (0, 1], got {epsilon}")
    if n_obs < 1:
        raise ValueError("n_obs must be at least 1")
    eps_n = epsilon / n_obs
    nu = float(np.sqrt((1.0 - eps_n) / eps_n))
    C = np.asarray(C, dtype=float)
    n_x = C.shape[1]
    S = m.reg_cov_sqrt
    SC = S @ C
    mat = np.zeros((7, n_x + 3))
    rhs = np.zeros(7)
    mat[0, :n_x] = m.mean_grad @ C
    mat[0, n_x:] = nu
    rhs[0] = -m.mean_offset - nu * np.sqrt(3.0 * c.resid_var)
    mat[1:4, :n_x] = SC
    mat[1:4, n_x:] = -np.eye(3)
    rhs[1:4] = S @ c.shift
    mat[4:7, :n_x] = -SC
    mat[4:7, n_x:] = -np.eye(3)
    rhs[4:7] = -S @ c.shift
    mat.flags.writeable = False
    rhs.flags.writeable = False
    return RiskRows(matrix=mat, rhs=rhs, epsilon_n=eps_n, nu=nu)
