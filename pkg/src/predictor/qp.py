"""Convex QP solver with KKT certificates.

Problems are stated as::

    minimize    1/2 x'Px + q'x
    subject to  l <= Ax <= u
                lb <= x <= ub

Rows with ``l == u`` (and variables with ``lb == ub``) are equalities. They are
eliminated up front through a basis of the equality matrix, leaving an
inequality-only problem in the remaining variables. That problem is solved by
a Mehrotra predictor-corrector interior point method and the result is then
polished by solving the equality-constrained QP on the detected active set,
which brings the KKT residuals down to round-off.

Dual variables follow the sign convention ``Px + q + A'y + z = 0`` with
``y_i > 0`` only when the upper bound of row ``i`` is active and ``y_i < 0``
only when its lower bound is active (same for ``z`` and the variable bounds).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
import scipy.linalg as la
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.optimize import nnls

logger = logging.getLogger(__name__)

PRIMAL_TOL = 1e-8
DUAL_TOL = 1e-6
MAX_ITER = 500
# instances at least this large with a sparse constraint matrix go through the
# sparse interior point path first
SPARSE_MIN_VARS = 100
SPARSE_MAX_DENSITY = 0.1

OPTIMAL = "optimal"
MAX_ITERATIONS = "max-iterations"
NUMERICAL_FAILURE = "numerical-failure"


class QpError(RuntimeError):
    pass


@dataclass
class QpInstance:
    P: np.ndarray
    q: np.ndarray
    A: np.ndarray | None = None
    l: np.ndarray | None = None
    u: np.ndarray | None = None
    lb: np.ndarray | None = None
    ub: np.ndarray | None = None

    def __post_init__(self):
        self.q = np.asarray(self.q, dtype=float).ravel()
        n = self.q.size
        self.P = np.asarray(self.P, dtype=float)
        if self.P.ndim == 1:
            self.P = np.diag(self.P)
        if self.P.shape != (n, n):
            raise ValueError(f"P must be {n}x{n}, got {self.P.shape}")
        if self.A is None:
            self.A = np.zeros((0, n))
        self.A = np.atleast_2d(np.asarray(self.A, dtype=float))
        if self.A.size == 0:
            self.A = np.zeros((0, n))
        m = self.A.shape[0]
        if self.A.shape[1] != n:
            raise ValueError(f"A must have {n} columns, got {self.A.shape[1]}")
        self.l = _vec(self.l, m, -np.inf)
        self.u = _vec(self.u, m, np.inf)
        self.lb = _vec(self.lb, n, -np.inf)
        self.ub = _vec(self.ub, n, np.inf)
        if np.any(self.l > self.u) or np.any(self.lb > self.ub):
            raise ValueError("lower bound exceeds upper bound")

    @property
    def n(self) -> int:
        return self.q.size

    @property
    def m(self) -> int:
        return self.A.shape[0]

    def objective(self, x: np.ndarray) -> float:
        return float(0.5 * x @ self.P @ x + self.q @ x)


def _vec(v, size, fill):
    if v is None:
        return np.full(size, fill, dtype=float)
    v = np.asarray(v, dtype=float).ravel()
    if v.size != size:
        raise ValueError(f"expected vector of length {size}, got {v.size}")
    return v


@dataclass
class QpSolution:
    x: np.ndarray
    y: np.ndarray
    z: np.ndarray
    status: str
    iterations: int
    objective: float = float("nan")
    # -1 lower active, +1 upper active, 0 inactive; used to warm start
    row_state: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int8))
    bound_state: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int8))
    warm_started: bool = False

    @property
    def optimal(self) -> bool:
        return self.status == OPTIMAL


class KktResiduals(NamedTuple):
    stationarity: float
    primal: float
    dual: float
    complementarity: float

    def within(self, primal_tol: float = PRIMAL_TOL, dual_tol: float = DUAL_TOL) -> bool:
        return (
            self.primal <= primal_tol
            and self.stationarity <= dual_tol
            and self.dual <= dual_tol
            and self.complementarity <= dual_tol
        )


def kkt_residuals(q: QpInstance, s: QpSolution) -> KktResiduals:
    """Infinity-norm KKT residuals of ``s`` for problem ``q``.

    Primal violations are measured relative to ``max(1, |bound|)``; the other
    three are absolute.
    """
    x, y, z = s.x, s.y, s.z
    if x.size != q.n or y.size != q.m or z.size != q.n:
        raise ValueError("solution dimensions do not match the instance")
    Ax = q.A @ x
    stat = q.P @ x + q.q + q.A.T @ y + z
    stationarity = float(np.max(np.abs(stat), initial=0.0))

    def primal(v, lo, hi):
        with np.errstate(invalid="ignore"):
            lo_v = np.where(np.isfinite(lo), (lo - v) / np.maximum(1.0, np.abs(lo)), 0.0)
            hi_v = np.where(np.isfinite(hi), (v - hi) / np.maximum(1.0, np.abs(hi)), 0.0)
        return float(np.max(np.maximum(np.maximum(lo_v, hi_v), 0.0), initial=0.0))

    def dual(mult, lo, hi):
        bad_up = np.where(~np.isfinite(hi), np.maximum(mult, 0.0), 0.0)
        bad_lo = np.where(~np.isfinite(lo), np.maximum(-mult, 0.0), 0.0)
        return float(np.max(np.maximum(bad_up, bad_lo), initial=0.0))

    def comp(mult, v, lo, hi):
        out = 0.0
        fin = np.isfinite(hi)
        if np.any(fin):
            out = max(out, float(np.max(np.maximum(mult[fin], 0.0) * np.abs(hi[fin] - v[fin]))))
        fin = np.isfinite(lo)
        if np.any(fin):
            out = max(out, float(np.max(np.maximum(-mult[fin], 0.0) * np.abs(v[fin] - lo[fin]))))
        return out

    return KktResiduals(
        stationarity=stationarity,
        primal=max(primal(Ax, q.l, q.u), primal(x, q.lb, q.ub)),
        dual=max(dual(y, q.l, q.u), dual(z, q.lb, q.ub)),
        complementarity=max(comp(y, Ax, q.l, q.u), comp(z, x, q.lb, q.ub)),
    )


# ---------------------------------------------------------------------------
# equality elimination


@dataclass
class _Reduction:
    basis: np.ndarray  # eliminated columns
    free: np.ndarray  # remaining columns (the reduced variables)
    rows: np.ndarray  # independent equality rows kept
    lu: tuple
    T: np.ndarray  # x = x0 + T w


_REDUCTION_CACHE: dict[bytes, _Reduction] = {}
_CACHE_SIZE = 128


def _pivot_columns(M: np.ndarray, k: int, tol: float = 1e-10) -> np.ndarray | None:
    if M.shape[1] < k:
        return None
    _, R, piv = la.qr(M, mode="economic", pivoting=True)
    d = np.abs(np.diag(R))
    if d.size < k or d[k - 1] <= tol * max(d[0], 1.0):
        return None
    return np.sort(piv[:k])


def _reduction(E: np.ndarray, P: np.ndarray) -> _Reduction:
    n = E.shape[1]
    zero_cost = np.flatnonzero(~np.any(P != 0.0, axis=0) & ~np.any(P != 0.0, axis=1))
    key = E.tobytes() + b"|" + zero_cost.tobytes() + b"|" + str(E.shape).encode()
    red = _REDUCTION_CACHE.get(key)
    if red is not None:
        return red

    # drop linearly dependent equality rows
    _, R, piv = la.qr(E.T, mode="economic", pivoting=True)
    d = np.abs(np.diag(R))
    rank = int(np.sum(d > 1e-10 * max(d[0] if d.size else 1.0, 1.0)))
    rows = np.sort(piv[:rank])
    Ek = E[rows]

    # prefer eliminating variables that carry no cost so the reduced Hessian stays diagonal
    basis = None
    if zero_cost.size >= rank:
        sub = _pivot_columns(Ek[:, zero_cost], rank)
        if sub is not None:
            basis = zero_cost[sub]
    if basis is None:
        basis = _pivot_columns(Ek, rank)
        if basis is None:
            raise QpError("equality constraints are rank deficient")
    free = np.setdiff1d(np.arange(n), basis)
    lu = la.lu_factor(Ek[:, basis])
    T = np.zeros((n, free.size))
    T[free, np.arange(free.size)] = 1.0
    if free.size:
        T[basis] = -la.lu_solve(lu, Ek[:, free])
    red = _Reduction(basis, free, rows, lu, T)
    if len(_REDUCTION_CACHE) >= _CACHE_SIZE:
        _REDUCTION_CACHE.clear()
    _REDUCTION_CACHE[key] = red
    return red


# ---------------------------------------------------------------------------
# reduced inequality QP:  min 1/2 w'Hw + g'w  s.t.  Gw <= h


def _ipm(H, g, G, h, max_iter):
    """Mehrotra predictor-corrector. Returns (w, z, s, iterations, converged)."""
    n, m = g.size, h.size
    if m == 0:
        w = _solve_psd(H, -g)
        return w, np.zeros(0), np.zeros(0), 0, True

    K0 = H + G.T @ G
    w = _solve_psd(K0, -g + G.T @ h)
    r = h - G @ w
    scale = max(1.0, float(np.max(np.abs(h))) * 1e-2)
    s = np.maximum(r, scale)
    z = np.full(m, max(1.0, float(np.max(np.abs(g), initial=0.0)) / max(np.sqrt(m), 1.0)))

    gnorm = 1.0 + float(np.max(np.abs(g), initial=0.0))
    hnorm = 1.0 + float(np.max(np.abs(h)))
    for it in range(1, max_iter + 1):
        rd = H @ w + g + G.T @ z
        rp = G @ w + s - h
        mu = float(s @ z) / m
        obj = 0.5 * w @ H @ w + g @ w
        if (
            np.max(np.abs(rd)) <= 1e-10 * gnorm
            and np.max(np.abs(rp)) <= 1e-10 * hnorm
            and mu <= 1e-11 * (1.0 + abs(obj))
        ):
            return w, z, s, it, True

        W = z / s
        K = H + G.T @ (W[:, None] * G)
        if not np.all(np.isfinite(K)):
            return w, z, s, it, False
        try:
            cf = la.cho_factor(K, lower=True, check_finite=False)
        except la.LinAlgError:
            K = K + np.eye(n) * 1e-12 * max(1.0, np.trace(K) / n)
            try:
                cf = la.cho_factor(K, lower=True, check_finite=False)
            except la.LinAlgError:
                return w, z, s, it, False

        def step(rc):
            dw = la.cho_solve(cf, -rd - G.T @ (W * rp - rc / s), check_finite=False)
            Gdw = G @ dw
            dz = W * (Gdw + rp) - rc / s
            ds = -rp - Gdw
            return dw, dz, ds

        dw, dz, ds = step(s * z)
        a_aff = min(_max_step(s, ds), _max_step(z, dz))
        mu_aff = float((s + a_aff * ds) @ (z + a_aff * dz)) / m
        sigma = (mu_aff / mu) ** 3 if mu > 0 else 0.0
        dw, dz, ds = step(s * z + ds * dz - sigma * mu)
        a = min(1.0, 0.99 * min(_max_step(s, ds), _max_step(z, dz)))
        if float((s + a * ds) @ (z + a * dz)) / m > 0.95 * mu:
            # second-order correction overshoots on degenerate faces; take a centred step instead
            dw, dz, ds = step(s * z - max(sigma, 0.1) * mu)
            a = min(1.0, 0.99 * min(_max_step(s, ds), _max_step(z, dz)))
        w = w + a * dw
        z = z + a * dz
        s = s + a * ds
        s = np.maximum(s, 1e-300)
        z = np.maximum(z, 1e-300)
    return w, z, s, max_iter, False


def _max_step(v, dv):
    neg = dv < 0
    if not np.any(neg):
        return np.inf
    return float(np.min(-v[neg] / dv[neg]))


def _solve_psd(K, rhs):
    try:
        return la.cho_solve(la.cho_factor(K, lower=True, check_finite=False), rhs, check_finite=False)
    except la.LinAlgError:
        return la.lstsq(K, rhs)[0]


def _polish(H, g, G, h, active, max_rounds=40):
    """Solve the equality QP on a guessed active set, repairing the guess.

    Returns ``(w, lam)`` with ``lam >= 0`` on success, ``None`` otherwise.
    """
    m = h.size
    try:
        L = la.cholesky(H, lower=True, check_finite=False)
    except la.LinAlgError:
        return None
    c = la.solve_triangular(L, g, lower=True, check_finite=False)
    hscale = np.maximum(1.0, np.abs(h))
    active = np.array(active, dtype=bool, copy=True)
    seen = set()
    for _ in range(max_rounds):
        key = active.tobytes()
        if key in seen:
            return None
        seen.add(key)
        idx = np.flatnonzero(active)
        lam = np.zeros(m)
        if idx.size == 0:
            w = -la.solve_triangular(L.T, c, lower=False, check_finite=False)
        else:
            B = la.solve_triangular(L, G[idx].T, lower=True, check_finite=False)
            Q, R, piv = la.qr(B, mode="economic", pivoting=True)
            d = np.abs(np.diag(R))
            rank = int(np.sum(d > 1e-11 * max(d[0], 1e-300)))
            if rank == 0:
                w = -la.solve_triangular(L.T, c, lower=False, check_finite=False)
                S = np.zeros(0, dtype=int)
                lam_S = np.zeros(0)
            else:
                S = piv[:rank]
                Rr = R[:rank, :rank]
                BS = B[:, S]
                GS = G[idx[S]]
                hS = h[idx[S]]

                def gram_solve(rhs):
                    t = la.solve_triangular(Rr, rhs, trans="T", lower=False, check_finite=False)
                    return la.solve_triangular(Rr, t, lower=False, check_finite=False)

                lam_S = gram_solve(-(hS + BS.T @ c))
                for _ in range(3):
                    w = -la.solve_triangular(L.T, c + BS @ lam_S, lower=False, check_finite=False)
                    e = hS - GS @ w
                    if np.max(np.abs(e)) <= 1e-14 * np.max(hscale[idx[S]]):
                        break
                    lam_S = lam_S - gram_solve(e)
                w = -la.solve_triangular(L.T, c + BS @ lam_S, lower=False, check_finite=False)
            lam[idx[S]] = lam_S
            if lam_S.size and np.min(lam_S) < 0 and rank < idx.size:
                # degenerate vertex: another multiplier combination may be nonnegative
                grad = H @ w + g
                sol, res = nnls(G[idx].T, -grad)
                if res <= 1e-9 * max(1.0, float(np.linalg.norm(grad))):
                    lam[:] = 0.0
                    lam[idx] = sol
        neg = lam < -1e-12 * max(1.0, float(np.max(np.abs(lam), initial=0.0)))
        viol = (G @ w - h) / hscale
        viol[active] = 0.0
        if not np.any(neg) and np.max(viol, initial=0.0) <= 1e-12:
            return w, np.maximum(lam, 0.0)
        if np.any(neg):
            active[int(np.argmin(lam))] = False
        if np.max(viol, initial=0.0) > 1e-12:
            active[int(np.argmax(viol))] = True
    return None


# ---------------------------------------------------------------------------
# public entry point


def solve(
    q: QpInstance,
    warm_start: QpSolution | None = None,
    max_iter: int = MAX_ITER,
    method: str = "auto",
) -> QpSolution:
    """Solve ``q``; ``warm_start`` supplies an initial active-set guess.

    ``method`` is ``"dense"`` (equality elimination, interior point, active-set
    polish), ``"sparse"`` (full-space interior point on the sparse KKT system,
    falling back to dense if it cannot certify) or ``"auto"``.
    """
    if method not in ("auto", "dense", "sparse"):
        raise ValueError(f"unknown method {method!r}")
    if warm_start is not None and method != "sparse":
        sol = _solve_dense(q, warm_start, max_iter, warm_only=True)
        if sol is not None and sol.optimal:
            return sol
        warm_start = None
    if method == "auto":
        density = np.count_nonzero(q.A) / max(q.A.size, 1)
        method = "sparse" if q.n >= SPARSE_MIN_VARS and density <= SPARSE_MAX_DENSITY else "dense"
    if method == "sparse":
        sol = _solve_sparse(q, max_iter)
        if sol.optimal:
            return sol
        logger.debug("sparse path ended with %s; retrying dense", sol.status)
        return _solve_dense(q, warm_start, max_iter)
    sol = _solve_dense(q, warm_start, max_iter)
    if not sol.optimal and q.n and np.all(np.isfinite(q.P)):
        logger.debug("dense path ended with %s; retrying sparse", sol.status)
        alt = _solve_sparse(q, max_iter)
        if alt.optimal:
            return alt
    return sol


def _solve_dense(
    q: QpInstance, warm_start: QpSolution | None, max_iter: int, warm_only: bool = False
) -> QpSolution | None:
    n, m = q.n, q.m
    eq_row = np.isfinite(q.l) & (q.l == q.u)
    eq_bnd = np.isfinite(q.lb) & (q.lb == q.ub)

    E = np.vstack([q.A[eq_row], np.eye(n)[eq_bnd]])
    b = np.concatenate([q.l[eq_row], q.lb[eq_bnd]])

    # one-sided rows  G x <= h, remembering where each came from
    parts_G, parts_h, owner_kind, owner_idx, owner_sign = [], [], [], [], []

    def add(kind, rows_mask, mat, lo, hi):
        for sign, bound in ((1.0, hi), (-1.0, lo)):
            sel = np.flatnonzero(rows_mask & np.isfinite(bound))
            if sel.size:
                parts_G.append(sign * mat[sel])
                parts_h.append(sign * bound[sel])
                owner_kind.append(np.full(sel.size, kind))
                owner_idx.append(sel)
                owner_sign.append(np.full(sel.size, sign))

    add(0, ~eq_row, q.A, q.l, q.u)
    bnd_rows = ~eq_bnd
    if np.any(bnd_rows & (np.isfinite(q.lb) | np.isfinite(q.ub))):
        add(1, bnd_rows, np.eye(n), q.lb, q.ub)
    if parts_G:
        G = np.vstack(parts_G)
        h = np.concatenate(parts_h)
        okind = np.concatenate(owner_kind)
        oidx = np.concatenate(owner_idx)
        osign = np.concatenate(owner_sign)
    else:
        G = np.zeros((0, n))
        h = np.zeros(0)
        okind = oidx = np.zeros(0, dtype=int)
        osign = np.zeros(0)

    try:
        if E.shape[0]:
            red = _reduction(E, q.P)
            x0 = np.zeros(n)
            x0[red.basis] = la.lu_solve(red.lu, b[red.rows])
            if np.max(np.abs(E @ x0 - b), initial=0.0) > 1e-9 * max(1.0, float(np.max(np.abs(b)))):
                raise QpError("inconsistent equality constraints")
            T = red.T
        else:
            x0 = np.zeros(n)
            T = np.eye(n)
    except (QpError, la.LinAlgError) as exc:
        logger.debug("equality reduction failed: %s", exc)
        return _failed(q, NUMERICAL_FAILURE, 0)

    H = T.T @ q.P @ T
    gvec = T.T @ (q.P @ x0 + q.q)
    Gr = G @ T
    hr = h - G @ x0

    # constant rows (no dependence on the reduced variables) are checked, then dropped
    norms = np.linalg.norm(Gr, axis=1)
    const = norms <= 1e-13
    if np.any(hr[const] < -1e-9 * np.maximum(1.0, np.abs(h[const]))):
        return _failed(q, NUMERICAL_FAILURE, 0)
    live = np.flatnonzero(~const)
    Gs = Gr[live] / norms[live, None]
    hs = hr[live] / norms[live]

    result = None
    iterations = 0
    warm = False
    if warm_start is not None and warm_start.row_state.size == m and warm_start.bound_state.size == n:
        guess = _guess_from_states(warm_start, okind[live], oidx[live], osign[live])
        result = _polish(H, gvec, Gs, hs, guess)
        warm = result is not None
    if warm_only and result is None:
        return None

    status = OPTIMAL
    if result is None:
        with np.errstate(over="ignore", divide="ignore", invalid="ignore"):
            w, zi, si, iterations, converged = _ipm(H, gvec, Gs, hs, max_iter)
        if not (np.all(np.isfinite(w)) and np.all(np.isfinite(zi))):
            return _failed(q, NUMERICAL_FAILURE, iterations)
        guess = si < zi
        polished = _polish(H, gvec, Gs, hs, guess)
        if polished is not None:
            result = polished
        else:
            result = (w, zi)
            if not converged:
                status = MAX_ITERATIONS if iterations >= max_iter else NUMERICAL_FAILURE

    w, lam_s = result
    x = x0 + T @ w
    lam = np.zeros(h.size)
    lam[live] = lam_s / norms[live]

    y = np.zeros(m)
    z = np.zeros(n)
    row_state = np.zeros(m, dtype=np.int8)
    bound_state = np.zeros(n, dtype=np.int8)
    for kind, target, state in ((0, y, row_state), (1, z, bound_state)):
        sel = okind == kind
        np.add.at(target, oidx[sel], osign[sel] * lam[sel])
        act = sel & (lam > 0)
        state[oidx[act]] = osign[act].astype(np.int8)

    if E.shape[0]:
        rho = q.P @ x + q.q + q.A.T @ y + z
        yE = la.lstsq(E.T, -rho)[0]
        k = int(eq_row.sum())
        y[eq_row] = yE[:k]
        z[eq_bnd] = yE[k:]

    sol = QpSolution(
        x=x,
        y=y,
        z=z,
        status=status,
        iterations=iterations,
        objective=q.objective(x),
        row_state=row_state,
        bound_state=bound_state,
        warm_started=warm,
    )
    if status == OPTIMAL and not kkt_residuals(q, sol).within():
        sol.status = NUMERICAL_FAILURE
    return sol


def _one_sided(q: QpInstance, eq_row, eq_bnd):
    """Stack the finite sides of non-equality rows and bounds as ``G x <= h``."""
    A = sp.csr_matrix(q.A)
    I = sp.identity(q.n, format="csr")
    blocks, h, kind, idx, sign = [], [], [], [], []
    for k, mat, lo, hi, skip in ((0, A, q.l, q.u, eq_row), (1, I, q.lb, q.ub, eq_bnd)):
        for sg, bound in ((1.0, hi), (-1.0, lo)):
            sel = np.flatnonzero(~skip & np.isfinite(bound))
            if sel.size:
                blocks.append(sg * mat[sel])
                h.append(sg * bound[sel])
                kind.append(np.full(sel.size, k))
                idx.append(sel)
                sign.append(np.full(sel.size, sg))
    if not blocks:
        return sp.csr_matrix((0, q.n)), np.zeros(0), np.zeros(0, int), np.zeros(0, int), np.zeros(0)
    return (
        sp.vstack(blocks, format="csr"),
        np.concatenate(h),
        np.concatenate(kind),
        np.concatenate(idx),
        np.concatenate(sign),
    )


def _solve_sparse(q: QpInstance, max_iter: int) -> QpSolution:
    n, m = q.n, q.m
    eq_row = np.isfinite(q.l) & (q.l == q.u)
    eq_bnd = np.isfinite(q.lb) & (q.lb == q.ub)
    E = sp.vstack(
        [sp.csr_matrix(q.A[eq_row]), sp.identity(n, format="csr")[np.flatnonzero(eq_bnd)]], format="csr"
    )
    b = np.concatenate([q.l[eq_row], q.lb[eq_bnd]])
    G, h, okind, oidx, osign = _one_sided(q, eq_row, eq_bnd)

    # row scaling
    gn = np.sqrt(np.asarray(G.multiply(G).sum(axis=1)).ravel()) if G.shape[0] else np.zeros(0)
    en = np.sqrt(np.asarray(E.multiply(E).sum(axis=1)).ravel()) if E.shape[0] else np.zeros(0)
    if np.any(gn == 0) or np.any(en == 0):
        return _failed(q, NUMERICAL_FAILURE, 0)
    Gs = sp.diags(1.0 / gn) @ G
    hs = h / gn
    Es = sp.diags(1.0 / en) @ E
    bs = b / en

    H = sp.csr_matrix(q.P)
    out = _ipm_sparse(H, q.q, Gs, hs, Es, bs, max_iter)
    if out is None:
        return _failed(q, NUMERICAL_FAILURE, 0)
    x, zi, si, yE, iterations, converged = out

    lam = zi / gn if zi.size else zi
    y = np.zeros(m)
    z = np.zeros(n)
    row_state = np.zeros(m, dtype=np.int8)
    bound_state = np.zeros(n, dtype=np.int8)
    active = si < zi
    for kind, target, state in ((0, y, row_state), (1, z, bound_state)):
        sel = okind == kind
        np.add.at(target, oidx[sel], osign[sel] * lam[sel])
        act = sel & active
        state[oidx[act]] = osign[act].astype(np.int8)
    yE = yE / en if yE.size else yE
    k = int(eq_row.sum())
    y[eq_row] = yE[:k]
    z[eq_bnd] += yE[k:]

    status = OPTIMAL if converged else (MAX_ITERATIONS if iterations >= max_iter else NUMERICAL_FAILURE)
    sol = QpSolution(
        x=x,
        y=y,
        z=z,
        status=status,
        iterations=iterations,
        objective=q.objective(x),
        row_state=row_state,
        bound_state=bound_state,
    )
    if status == OPTIMAL and not kkt_residuals(q, sol).within():
        sol.status = NUMERICAL_FAILURE
    return sol


def _ipm_sparse(H, g, G, h, E, b, max_iter):
    """Mehrotra predictor-corrector on the augmented sparse KKT system::

        [ H   E'    G'   ] [dx]
        [ E  -reg   0    ] [dy]
        [ G   0   -S/Z   ] [dz]

    Only the last diagonal block changes between iterations, so the sparsity
    pattern is assembled once. Returns ``(x, z, s, y, iterations, converged)``
    or None if the initial factorisation fails.
    """
    n, m, me = g.size, h.size, b.size
    N = n + me + m
    reg = 1e-13
    Hc, Ec, Gc = sp.coo_matrix(H), sp.coo_matrix(E), sp.coo_matrix(G)
    rows = np.concatenate([Hc.row, n + Ec.row, Ec.col, n + me + Gc.row, Gc.col, n + np.arange(me), n + me + np.arange(m)])
    cols = np.concatenate([Hc.col, Ec.col, n + Ec.row, Gc.col, n + me + Gc.row, n + np.arange(me), n + me + np.arange(m)])
    static = np.concatenate([Hc.data, Ec.data, Ec.data, Gc.data, Gc.data, np.full(me, -reg)])
    tag = sp.csc_matrix((np.arange(1, rows.size + 1, dtype=float), (rows, cols)), shape=(N, N))
    if tag.nnz != rows.size:
        raise QpError("duplicate entries in KKT pattern")
    perm = tag.data.astype(np.int64) - 1
    indices, indptr = tag.indices.copy(), tag.indptr.copy()

    def factor(theta):
        data = np.concatenate([static, -theta])[perm]
        M = sp.csc_matrix((data, indices, indptr), shape=(N, N))
        lu = spla.splu(M, permc_spec="COLAMD", diag_pivot_thresh=0.1, options={"SymmetricMode": True})

        def solve(r1, r2, r3):
            rhs = np.concatenate([r1, r2, r3])
            sol = lu.solve(rhs)
            for _ in range(2):
                res = rhs - M @ sol
                res[n : n + me] -= reg * sol[n : n + me]
                sol = sol + lu.solve(res)
            return sol[:n], sol[n : n + me], sol[n + me :]

        return solve

    try:
        kkt0 = factor(np.ones(m))
    except RuntimeError:
        return None
    # least-squares style start: min 1/2 x'Hx + g'x + 1/2 |Gx - h|^2  s.t.  Ex = b
    x, y, _ = kkt0(-g, b, h)
    if m == 0:
        return x, np.zeros(0), np.zeros(0), y, 0, True
    r = h - G @ x
    scale = max(1.0, float(np.max(np.abs(h))) * 1e-2)
    s = np.maximum(r, scale)
    z = np.full(m, max(1.0, float(np.max(np.abs(g), initial=0.0)) / max(np.sqrt(m), 1.0)))

    gnorm = 1.0 + float(np.max(np.abs(g), initial=0.0))
    hnorm = 1.0 + float(np.max(np.abs(h)))
    bnorm = 1.0 + float(np.max(np.abs(b), initial=0.0))
    for it in range(1, max_iter + 1):
        rd = H @ x + g + G.T @ z + (E.T @ y if me else 0.0)
        rp = G @ x + s - h
        re = E @ x - b if me else np.zeros(0)
        mu = float(s @ z) / m
        if (
            np.max(np.abs(rd)) <= min(1e-10 * gnorm, 1e-8)
            and np.max(np.abs(rp)) <= 1e-11 * hnorm
            and np.max(np.abs(re), initial=0.0) <= 1e-11 * bnorm
            and float(np.max(s * z)) <= 1e-9
        ):
            return x, z, s, y, it, True

        try:
            kkt = factor(s / z)
        except RuntimeError:
            return x, z, s, y, it, False

        def step(rc):
            dx, dy, dz = kkt(-rd, -re, -rp + rc / z)
            ds = -rp - G @ dx
            return dx, dy, dz, ds

        dx, dy, dz, ds = step(s * z)
        a_aff = min(_max_step(s, ds), _max_step(z, dz))
        mu_aff = float((s + a_aff * ds) @ (z + a_aff * dz)) / m
        sigma = (mu_aff / mu) ** 3 if mu > 0 else 0.0
        dx, dy, dz, ds = step(s * z + ds * dz - sigma * mu)
        a = min(1.0, 0.99 * min(_max_step(s, ds), _max_step(z, dz)))
        if float((s + a * ds) @ (z + a * dz)) / m > 0.95 * mu:
            dx, dy, dz, ds = step(s * z - max(sigma, 0.1) * mu)
            a = min(1.0, 0.99 * min(_max_step(s, ds), _max_step(z, dz)))
        x = x + a * dx
        y = y + a * dy
        z = np.maximum(z + a * dz, 1e-300)
        s = np.maximum(s + a * ds, 1e-300)
    return x, z, s, y, max_iter, False


def _guess_from_states(ws: QpSolution, kind, idx, sign):
    guess = np.zeros(kind.size, dtype=bool)
    rs = ws.row_state[idx[kind == 0]]
    guess[kind == 0] = rs == sign[kind == 0]
    bs = ws.bound_state[idx[kind == 1]]
    guess[kind == 1] = bs == sign[kind == 1]
    return guess


def _failed(q: QpInstance, status: str, iterations: int) -> QpSolution:
    return QpSolution(
        x=np.full(q.n, np.nan),
        y=np.zeros(q.m),
        z=np.zeros(q.n),
        status=status,
        iterations=iterations,
        row_state=np.zeros(q.m, dtype=np.int8),
        bound_state=np.zeros(q.n, dtype=np.int8),
    )


# ---------------------------------------------------------------------------
# plain-text dump


def dump_instance(q: QpInstance, path) -> None:
    """Write ``q`` as labelled whitespace-separated matrices.

    Each block starts with a header line ``# NAME rows cols`` followed by the
    rows of the matrix; vectors are written as a single row. Infinite bounds
    are written as ``inf``/``-inf``.
    """
    blocks = [
        ("P", q.P),
        ("q", q.q[None, :]),
        ("A", q.A),
        ("l", q.l[None, :]),
        ("u", q.u[None, :]),
        ("lb", q.lb[None, :]),
        ("ub", q.ub[None, :]),
    ]
    with open(path, "w") as fh:
        for name, mat in blocks:
            fh.write(f"# {name} {mat.shape[0]} {mat.shape[1]}\n")
            for row in mat:
                fh.write(" ".join(repr(float(v)) for v in row) + "\n")


def load_instance(path) -> QpInstance:
    mats = {}
    with open(path) as fh:
        lines = [ln.strip() for ln in fh if ln.strip()]
    i = 0
    while i < len(lines):
        _, name, r, c = lines[i].split()
        r, c = int(r), int(c)
        rows = [np.array(lines[i + 1 + k].split(), dtype=float) for k in range(r)]
        mats[name] = np.array(rows).reshape(r, c)
        i += 1 + r
    return QpInstance(
        P=mats["P"],
        q=mats["q"].ravel(),
        A=mats["A"],
        l=mats["l"].ravel(),
        u=mats["u"].ravel(),
        lb=mats["lb"].ravel(),
        ub=mats["ub"].ravel(),
    )
