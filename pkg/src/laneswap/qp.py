"""Dense strictly convex quadratic programming.

Solves
    min  1/2 z'Hz + f'z
    s.t. A_ineq z + b_ineq >= 0,   lb <= z <= ub

with a dual active-set method: start at the unconstrained minimizer and
add violated constraints one at a time until dual feasibility, dropping
blocking constraints along the way. Two interchangeable step engines are
used:

* a range-space engine for diagonal H (the safety-filter QPs): keeps a
  Cholesky factor of the active-set Schur complement N'H^-1 N with O(q^2)
  add/drop updates, plus iterative refinement of the final KKT system;
* a QR engine for general dense H: maintains J = L^-T Q and the
  triangular R of the active-normal QR (numerically the most robust).

The range-space engine falls back to the QR engine whenever its final
KKT residuals are not clean. Constraints are indexed globally:
inequality row i is constraint i, the lower bound on variable k is
m + k, the upper bound is m + n + k; warm starts use these ids.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import sparse

_INF = math.inf
_FEAS_TOL = 1e-10
_ZERO_TOL = 1e-12
_KKT_CLEAN = 1e-9


@dataclass
class QpProblem:
    """H may be a full (n, n) matrix or a 1-D array of diagonal entries.

    A_ineq may be a dense ndarray or a scipy CSR matrix.
    """

    H: np.ndarray
    f: np.ndarray
    A_ineq: object = None              # (m, n), rows of A z + b >= 0
    b_ineq: np.ndarray | None = None
    lb: np.ndarray | None = None
    ub: np.ndarray | None = None

    def __post_init__(self):
        self.f = np.asarray(self.f, float)
        n = self.f.shape[0]
        if not sparse.issparse(self.H):
            self.H = np.asarray(self.H, float)
        if self.H.shape not in ((n,), (n, n)):
            raise ValueError("H/f dimension mismatch")
        if self.A_ineq is not None:
            if sparse.issparse(self.A_ineq):
                self.A_ineq = self.A_ineq.tocsr()
            else:
                self.A_ineq = np.asarray(self.A_ineq, float).reshape(-1, n)
            self.b_ineq = np.asarray(self.b_ineq, float).reshape(-1)
            if self.b_ineq.shape[0] != self.A_ineq.shape[0]:
                raise ValueError("A_ineq/b_ineq row mismatch")
        self.lb = np.full(n, -_INF) if self.lb is None else np.asarray(self.lb, float)
        self.ub = np.full(n, _INF) if self.ub is None else np.asarray(self.ub, float)
        if np.any(self.lb > self.ub):
            raise ValueError("lb exceeds ub")

    @property
    def n(self) -> int:
        return self.f.shape[0]

    @property
    def m(self) -> int:
        return 0 if self.A_ineq is None else self.A_ineq.shape[0]

    def h_diagonal(self) -> np.ndarray | None:
        """Diagonal of H if H is diagonal, else None."""
        if self.H.ndim == 1:
            return self.H
        if np.count_nonzero(self.H - np.diag(np.diagonal(self.H))) == 0:
            return np.diagonal(self.H)
        return None

    def h_matvec(self, z):
        return self.H * z if self.H.ndim == 1 else self.H @ z

    def row(self, i):
        """(indices, values) of inequality row i."""
        if sparse.issparse(self.A_ineq):
            sl = slice(self.A_ineq.indptr[i], self.A_ineq.indptr[i + 1])
            return self.A_ineq.indices[sl], self.A_ineq.data[sl]
        r = self.A_ineq[i]
        idx = np.flatnonzero(r)
        return idx, r[idx]

    def rows_matvec(self, z):
        return self.A_ineq @ z


@dataclass
class QpSolution:
    z: np.ndarray
    status: str                      # optimal | max_iter | infeasible
    active_set: tuple = ()
    iterations: int = 0
    objective: float = math.nan
    multipliers: dict = field(default_factory=dict)


def _objective(p: QpProblem, z: np.ndarray) -> float:
    return float(0.5 * z @ p.h_matvec(z) + p.f @ z)


def _chol_update(L: np.ndarray, x: np.ndarray):
    """Rank-one update L L' + x x' in place (x is destroyed)."""
    nn = x.shape[0]
    for k in range(nn):
        lkk = L[k, k]
        r = math.hypot(lkk, x[k])
        c, s = r / lkk, x[k] / lkk
        L[k, k] = r
        if k + 1 < nn:
            L[k + 1:nn, k] = (L[k + 1:nn, k] + s * x[k + 1:nn]) / c
            x[k + 1:nn] = c * x[k + 1:nn] - s * L[k + 1:nn, k]


class _Trouble(Exception):
    """Numerical trouble in the range-space engine; retry with QR."""


class _BaseEngine:
    """Shared dual active-set iteration; subclasses provide step algebra."""

    def __init__(self, p: QpProblem, warm_start):
        self.p = p
        self.n, self.m = p.n, p.m
        self.n_total = self.m + 2 * self.n
        self.lo_idx = np.flatnonzero(np.isfinite(p.lb))
        self.hi_idx = np.flatnonzero(np.isfinite(p.ub))
        scale = 1.0
        if self.m:
            scale = max(scale, float(np.max(np.abs(p.b_ineq))))
        self.feas_tol = _FEAS_TOL * scale
        self.active_ids: list[int] = []
        self.active_mask = np.zeros(self.n_total, dtype=bool)
        self.u = np.zeros(0)
        self.preferred = [int(g) for g in warm_start] if warm_start else []
        self.iters = 0
        self.max_iter = 10 * (self.n + self.n_total)
        self.s_rows = None   # maintained incrementally

    # -- constraint access ------------------------------------------------

    def normal(self, gid):
        """(indices, values) of constraint gid's normal."""
        if gid < self.m:
            return self.p.row(gid)
        if gid < self.m + self.n:
            return np.array([gid - self.m]), np.array([1.0])
        return np.array([gid - self.m - self.n]), np.array([-1.0])

    def slack_of(self, gid, z):
        if gid < self.m:
            return float(self.s_rows[gid])
        if gid < self.m + self.n:
            k = gid - self.m
            return float(z[k] - self.p.lb[k])
        k = gid - self.m - self.n
        return float(self.p.ub[k] - z[k])

    def most_violated(self, z):
        best_id, best_s = -1, -self.feas_tol
        m, n = self.m, self.n
        if m:
            s = self.s_rows.copy()
            s[self.active_mask[:m]] = _INF
            i = int(np.argmin(s))
            if s[i] < best_s:
                best_id, best_s = i, s[i]
        if self.lo_idx.size:
            s = z[self.lo_idx] - self.p.lb[self.lo_idx]
            s[self.active_mask[m + self.lo_idx]] = _INF
            i = int(np.argmin(s))
            if s[i] < best_s:
                best_id, best_s = int(m + self.lo_idx[i]), s[i]
        if self.hi_idx.size:
            s = self.p.ub[self.hi_idx] - z[self.hi_idx]
            s[self.active_mask[m + n + self.hi_idx]] = _INF
            i = int(np.argmin(s))
            if s[i] < best_s:
                best_id, best_s = int(m + n + self.hi_idx[i]), s[i]
        if best_id >= 0 and self.preferred:
            pref_id, pref_s = -1, -self.feas_tol
            for gid in self.preferred:
                if 0 <= gid < self.n_total and not self.active_mask[gid]:
                    sv = self.slack_of(gid, z)
                    if sv < pref_s:
                        pref_id, pref_s = gid, sv
            if pref_id >= 0:
                return pref_id, pref_s
        return best_id, best_s

    # -- subclass interface ------------------------------------------------

    def start_z(self):
        raise NotImplementedError

    def step_quantities(self, gid):
        """Return (zdir, rdir, s_dot) for candidate constraint gid."""
        raise NotImplementedError

    def add(self, gid):
        raise NotImplementedError

    def drop_update(self, pos):
        raise NotImplementedError

    def finish(self, z):
        return z, self.u

    # -- main loop ----------------------------------------------------------

    def run(self):
        z = self.start_z()
        if self.m:
            self.s_rows = self.p.rows_matvec(z) + self.p.b_ineq
        status = "optimal"
        while status == "optimal":
            gid, s_p = self.most_violated(z)
            if gid < 0:
                break
            u_plus = np.append(self.u, 0.0)
            while True:
                self.iters += 1
                if self.iters > self.max_iter:
                    status = "max_iter"
                    self.u = u_plus[:-1]
                    break
                q = len(self.active_ids)
                zdir, rdir, s_dot = self.step_quantities(gid)
                full_ok = zdir is not None

                t1, k_drop = _INF, -1
                for k in range(q):
                    if rdir[k] > _ZERO_TOL:
                        tk = u_plus[k] / rdir[k]
                        if tk < t1:
                            t1, k_drop = tk, k
                t2 = -s_p / s_dot if full_ok else _INF
                t = min(t1, t2)

                if t == _INF:
                    status = "infeasible"
                    self.u = u_plus[:-1]
                    break
                if not full_ok:
                    u_plus[:q] -= t1 * rdir
                    u_plus[q] += t1
                    u_plus = self._drop(k_drop, u_plus)
                    continue

                z += t * zdir
                if self.m:
                    self.s_rows += t * self.p.rows_matvec(zdir)
                s_p += t * s_dot
                u_plus[:q] -= t * rdir
                u_plus[q] += t
                if t == t2:
                    self.add(gid)
                    self.active_ids.append(gid)
                    self.active_mask[gid] = True
                    self.u = u_plus
                    break
                u_plus = self._drop(k_drop, u_plus)
        if status == "optimal":
            z, u = self.finish(z)
        else:
            u = self.u
        mults = {int(g): float(u[i]) for i, g in enumerate(self.active_ids)}
        return QpSolution(
            z=z, status=status,
            active_set=tuple(int(g) for g in self.active_ids),
            iterations=self.iters, objective=_objective(self.p, z),
            multipliers=mults)

    def _drop(self, pos, u_vec):
        g = self.active_ids.pop(pos)
        self.active_mask[g] = False
        self.drop_update(pos)
        return np.delete(u_vec, pos)


class _QrEngine(_BaseEngine):
    """Goldfarb-Idnani with J = L^-T Q and QR of the active normals."""

    def start_z(self):
        p = self.p
        n = self.n
        self.J = np.zeros((n, n))
        self.R = np.zeros((n + 1, n + 1))
        hd = p.h_diagonal()
        if hd is not None:
            if np.any(hd <= 0.0):
                raise ValueError("H is not positive definite")
            np.fill_diagonal(self.J, 1.0 / np.sqrt(hd))
            return -p.f / hd
        try:
            L = np.linalg.cholesky(p.H)
        except np.linalg.LinAlgError as exc:
            raise ValueError("H is not positive definite") from exc
        self.J[:] = np.linalg.solve(L.T, np.eye(n))
        return np.linalg.solve(L.T, np.linalg.solve(L, -p.f))

    def step_quantities(self, gid):
        q = len(self.active_ids)
        idx, vals = self.normal(gid)
        d = self.J[idx, :].T @ vals
        d1, d2 = d[:q], d[q:]
        d2n2 = float(d2 @ d2)
        full_ok = d2n2 > _ZERO_TOL * (1.0 + float(d @ d))
        rdir = np.linalg.solve(self.R[:q, :q], d1) if q else d1
        self._d = d
        if not full_ok:
            return None, rdir, 0.0
        zdir = self.J[:, q:] @ d2
        return zdir, rdir, d2n2

    def add(self, gid):
        d = self._d
        q = len(self.active_ids)
        d2 = d[q:].copy()
        nrm = float(np.linalg.norm(d2))
        lead = d2[0] if d2[0] != 0.0 else 1.0
        d2[0] += math.copysign(nrm, lead)
        ww = float(d2 @ d2)
        if ww > 0.0:
            beta = 2.0 / ww
            Jt = self.J[:, q:]
            Jt -= beta * np.outer(Jt @ d2, d2)
        rqq = -math.copysign(nrm, lead)
        if rqq < 0.0:
            self.J[:, q] = -self.J[:, q]
            rqq = -rqq
        self.R[:q, q] = d[:q]
        self.R[q, q] = rqq

    def drop_update(self, pos):
        q = len(self.active_ids) + 1  # count before removal
        R, J = self.R, self.J
        R[:, pos:q - 1] = R[:, pos + 1:q]
        R[:, q - 1] = 0.0
        for k in range(pos, q - 1):
            a, b = R[k, k], R[k + 1, k]
            r = math.hypot(a, b)
            if r == 0.0:
                continue
            c, s = a / r, b / r
            rk = c * R[k, k:q - 1] + s * R[k + 1, k:q - 1]
            R[k + 1, k:q - 1] = -s * R[k, k:q - 1] + c * R[k + 1, k:q - 1]
            R[k, k:q - 1] = rk
            jk = c * J[:, k] + s * J[:, k + 1]
            J[:, k + 1] = -s * J[:, k] + c * J[:, k + 1]
            J[:, k] = jk


class _RangeEngine(_BaseEngine):
    """Schur-complement engine for diagonal H with sparse normals."""

    def start_z(self):
        hd = self.p.h_diagonal()
        if hd is None or np.any(hd <= 0.0):
            raise _Trouble
        self.hinv = 1.0 / hd
        n = self.n
        cap = min(n, 48)
        self.N = np.zeros((n, cap))        # active normals
        self.M = np.zeros((n, cap))        # H^-1 N
        self.Lg = np.zeros((cap, cap))     # chol of N'H^-1 N
        return -self.p.f * self.hinv

    def _grow(self, need):
        cap = self.N.shape[1]
        if need <= cap:
            return
        new = min(self.n, max(need, 2 * cap))
        for name in ("N", "M"):
            buf = np.zeros((self.n, new))
            buf[:, :cap] = getattr(self, name)
            setattr(self, name, buf)
        lg = np.zeros((new, new))
        lg[:cap, :cap] = self.Lg
        self.Lg = lg

    def _tri_solve(self, q, rhs, trans):
        # forward/back substitution on the q x q leading block of Lg
        from scipy.linalg import solve_triangular
        return solve_triangular(self.Lg[:q, :q], rhs, lower=True,
                                trans=trans, check_finite=False)

    def step_quantities(self, gid):
        q = len(self.active_ids)
        idx, vals = self.normal(gid)
        v_vals = self.hinv[idx] * vals
        aha = float(vals @ v_vals)
        if q:
            g = self.M[idx, :q].T @ vals
            w = self._tri_solve(q, g, 0)
            rdir = self._tri_solve(q, w, 1)
            s_dot = aha - float(w @ w)
        else:
            g = np.zeros(0)
            rdir = g
            s_dot = aha
        self._cand = (idx, vals, v_vals, g, aha)
        if q >= self.n or s_dot <= 1e-13 * aha:
            return None, rdir, 0.0
        zdir = -self.M[:, :q] @ rdir if q else np.zeros(self.n)
        zdir[idx] += v_vals
        return zdir, rdir, s_dot

    def add(self, gid):
        q = len(self.active_ids)
        if q >= self.n:
            raise _Trouble
        self._grow(q + 1)
        idx, vals, v_vals, g, aha = self._cand
        if q:
            w = self._tri_solve(q, g, 0)
            d2 = aha - float(w @ w)
        else:
            w = np.zeros(0)
            d2 = aha
        if d2 <= 1e-14 * aha:
            raise _Trouble
        self.N[:, q] = 0.0
        self.N[idx, q] = vals
        self.M[:, q] = 0.0
        self.M[idx, q] = v_vals
        self.Lg[q, :q] = w
        self.Lg[q, q] = math.sqrt(d2)

    def drop_update(self, pos):
        q = len(self.active_ids) + 1  # count before removal
        self.N[:, pos:q - 1] = self.N[:, pos + 1:q]
        self.M[:, pos:q - 1] = self.M[:, pos + 1:q]
        # remove row/col pos of G: shift factor rows up, rank-1 fix trailing block
        Lg = self.Lg
        tail = q - 1 - pos
        if tail > 0:
            c = Lg[pos + 1:q, pos].copy()
            block = Lg[pos + 1:q, pos + 1:q].copy()
            _chol_update(block, c)
            Lg[pos:q - 1, :pos] = Lg[pos + 1:q, :pos]
            Lg[pos:q - 1, pos:q - 1] = block
        Lg[:, q - 1] = 0.0
        Lg[q - 1, :] = 0.0

    def finish(self, z):
        """Two rounds of iterative refinement on the final KKT system."""
        q = len(self.active_ids)
        u = self.u
        if q == 0:
            return z, u
        p = self.p
        rhs = np.empty(q)
        for i, gid in enumerate(self.active_ids):
            if gid < self.m:
                rhs[i] = -p.b_ineq[gid]
            elif gid < self.m + self.n:
                rhs[i] = p.lb[gid - self.m]
            else:
                rhs[i] = -p.ub[gid - self.m - self.n]
        N, M = self.N[:, :q], self.M[:, :q]
        for _ in range(2):
            r1 = -(p.H * z if p.H.ndim == 1 else p.H @ z) - p.f + N @ u
            r2 = rhs - N.T @ z
            t = M.T @ r1
            du = self._tri_solve(q, r2 - t, 0)
            du = self._tri_solve(q, du, 1)
            dz = self.hinv * (r1 + N @ du)
            z = z + dz
            u = u + du
        u = np.maximum(u, 0.0)
        if self.m:
            self.s_rows = p.rows_matvec(z) + p.b_ineq
        return z, u


def _kkt_clean(p: QpProblem, sol: QpSolution) -> bool:
    stat, primal, comp = kkt_residuals(p, sol)
    scale = 1.0 + float(np.max(np.abs(p.f), initial=0.0))
    return stat <= _KKT_CLEAN * scale and primal <= _KKT_CLEAN and comp <= _KKT_CLEAN * scale


def solve(p: QpProblem, warm_start=None) -> QpSolution:
    """Solve a strictly convex QP; see module docstring for conventions."""
    hd = p.h_diagonal()
    if hd is not None and np.any(hd <= 0.0):
        raise ValueError("H is not positive definite")
    if hd is not None and p.n > 8:
        try:
            sol = _RangeEngine(p, warm_start).run()
            if sol.status != "optimal" or _kkt_clean(p, sol):
                return sol
        except _Trouble:
            pass
    return _QrEngine(p, warm_start).run()


def kkt_residuals(p: QpProblem, sol: QpSolution):
    """(stationarity, primal feasibility, complementarity) in the inf-norm."""
    n, m = p.n, p.m
    grad = p.h_matvec(sol.z) + p.f
    comp = 0.0
    for gid, mu in sol.multipliers.items():
        if gid < m:
            idx, vals = p.row(gid)
            s = float(vals @ sol.z[idx] + p.b_ineq[gid])
            grad[idx] -= mu * vals
        elif gid < m + n:
            k = gid - m
            s = sol.z[k] - p.lb[k]
            grad[k] -= mu
        else:
            k = gid - m - n
            s = p.ub[k] - sol.z[k]
            grad[k] += mu
        comp = max(comp, abs(mu * s))
    stat = float(np.max(np.abs(grad))) if n else 0.0
    primal = 0.0
    if m:
        primal = max(primal, float(np.max(np.maximum(0.0, -(p.rows_matvec(sol.z) + p.b_ineq)))))
    finite_lo = np.isfinite(p.lb)
    finite_hi = np.isfinite(p.ub)
    if np.any(finite_lo):
        primal = max(primal, float(np.max(np.maximum(0.0, (p.lb - sol.z)[finite_lo]))))
    if np.any(finite_hi):
        primal = max(primal, float(np.max(np.maximum(0.0, (sol.z - p.ub)[finite_hi]))))
    return stat, primal, comp
