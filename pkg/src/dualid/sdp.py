"""Dense primal-dual interior-point solver for linear matrix inequality problems.

The solver targets problems with many small PSD blocks::

    minimize    c^T x - sum_b w_b logdet F_b(x)
    subject to  F_b(x) = F0_b + sum_j x_j F_jb  >= 0     for every block b
                A x = b                                     (optional)

Blocks with ``logdet_weight == 0`` are plain LMIs.  A positive weight turns a
block into a max-det term of the objective; its complementarity is held at the
weight instead of being driven to zero, which keeps the extension exact.

The method is an infeasible-start path-following scheme with Nesterov-Todd
scaling and Mehrotra predictor-corrector steps.  Blocks with equal size and
equal number of touched variables are stacked so every per-block operation is
a batched numpy call.
"""

from __future__ import annotations

import dataclasses
import enum
import logging
from collections import OrderedDict
from typing import Sequence

import numpy as np
import scipy.linalg

log = logging.getLogger(__name__)

SYMMETRY_TOL = 1e-9
JAM_ALPHA = 1e-2


class Status(str, enum.Enum):
    OPTIMAL = "Optimal"
    INFEASIBLE = "Infeasible"
    MAX_ITERS = "MaxIters"
    NUMERICAL_FAILURE = "NumericalFailure"


class SdpError(ValueError):
    """Malformed problem data."""


def _symmetrize(a: np.ndarray, what: str) -> np.ndarray:
    a = np.asarray(a, dtype=float)
    at = np.swapaxes(a, -1, -2)
    scale = max(1.0, float(np.max(np.abs(a)))) if a.size else 1.0
    if a.size and np.max(np.abs(a - at)) > SYMMETRY_TOL * scale:
        raise SdpError(f"{what} is not symmetric")
    return 0.5 * (a + at)


@dataclasses.dataclass(frozen=True)
class AffineBlock:
    """One affine matrix expression ``F0 + sum_j x[index[j]] * F[j]``.

    ``F`` only lists the variables that touch the block; ``index`` maps them
    to positions in the decision vector.  Use :meth:`dense` to pass one
    coefficient matrix per decision variable instead.
    """

    F0: np.ndarray
    F: np.ndarray
    index: np.ndarray
    logdet_weight: float = 0.0
    label: str = ""

    def __post_init__(self):
        F0 = _symmetrize(np.atleast_2d(self.F0), f"block {self.label!r} F0")
        k = F0.shape[0]
        if F0.shape != (k, k):
            raise SdpError(f"block {self.label!r}: F0 must be square")
        F = np.asarray(self.F, dtype=float).reshape(-1, k, k)
        F = _symmetrize(F, f"block {self.label!r} coefficients")
        index = np.asarray(self.index, dtype=np.int64).reshape(-1)
        if len(index) != len(F):
            raise SdpError(f"block {self.label!r}: {len(F)} matrices but {len(index)} indices")
        if len(np.unique(index)) != len(index):
            raise SdpError(f"block {self.label!r}: repeated variable index")
        if self.logdet_weight < 0:
            raise SdpError("logdet_weight must be nonnegative")
        object.__setattr__(self, "F0", F0)
        object.__setattr__(self, "F", F)
        object.__setattr__(self, "index", index)
        object.__setattr__(self, "logdet_weight", float(self.logdet_weight))

    @classmethod
    def dense(cls, F0, Fj: Sequence[np.ndarray], label: str = "", logdet_weight: float = 0.0):
        Fj = np.asarray(Fj, dtype=float)
        return cls(F0, Fj, np.arange(len(Fj)), logdet_weight=logdet_weight, label=label)

    @property
    def size(self) -> int:
        return self.F0.shape[0]

    def evaluate(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        return self.F0 + np.einsum("v,vkl->kl", x[self.index], self.F)


@dataclasses.dataclass(frozen=True)
class SdpProblem:
    c: np.ndarray
    blocks: tuple
    A: np.ndarray | None = None
    b: np.ndarray | None = None

    def __post_init__(self):
        c = np.asarray(self.c, dtype=float).reshape(-1)
        blocks = tuple(self.blocks)
        if not blocks:
            raise SdpError("at least one block is required")
        for blk in blocks:
            if not isinstance(blk, AffineBlock):
                raise SdpError("blocks must be AffineBlock instances")
            if len(blk.index) and (blk.index.min() < 0 or blk.index.max() >= len(c)):
                raise SdpError(f"block {blk.label!r} references a variable out of range")
        object.__setattr__(self, "c", c)
        object.__setattr__(self, "blocks", blocks)
        if (self.A is None) != (self.b is None):
            raise SdpError("A and b must be given together")
        if self.A is not None:
            A = np.atleast_2d(np.asarray(self.A, dtype=float))
            b = np.asarray(self.b, dtype=float).reshape(-1)
            if A.shape != (len(b), len(c)):
                raise SdpError("equality constraint dimensions do not match")
            object.__setattr__(self, "A", A)
            object.__setattr__(self, "b", b)

    @property
    def dim(self) -> int:
        return len(self.c)

    def objective(self, x: np.ndarray) -> float:
        val = float(self.c @ x)
        for blk in self.blocks:
            if blk.logdet_weight > 0:
                sign, ld = np.linalg.slogdet(blk.evaluate(x))
                val -= blk.logdet_weight * (ld if sign > 0 else -np.inf)
        return val


@dataclasses.dataclass(frozen=True)
class SdpOptions:
    tol_gap: float = 1e-8
    gap_floor: float = 1.0  # objective magnitude below which the gap test is absolute
    tol_feas: float = 1e-8
    tol_infeas: float = 1e-8
    max_iters: int = 200
    x0: np.ndarray | None = None
    step: float = 0.98
    equilibrate: bool = True


@dataclasses.dataclass
class SdpSolution:
    x: np.ndarray
    objective_value: float
    dual_value: float
    status: Status
    certificates: dict
    iterations: int
    infeasibility: str | None = None
    Z: list | None = None
    history: list = dataclasses.field(default_factory=list)

    @property
    def optimal(self) -> bool:
        return self.status == Status.OPTIMAL

    def summary(self) -> dict:
        return {
            "status": self.status.value,
            "objective_value": self.objective_value,
            "dual_value": self.dual_value,
            "iterations": self.iterations,
            "infeasibility": self.infeasibility,
            "certificates": {
                k: (list(map(float, v)) if isinstance(v, (list, np.ndarray)) else float(v))
                for k, v in self.certificates.items()
            },
        }


def feasible(problem: SdpProblem, x, tol_feas: float = 1e-8) -> dict:
    """Exact per-block eigenvalue report at ``x``."""
    x = np.asarray(x, dtype=float).reshape(-1)
    if len(x) != problem.dim:
        raise SdpError(f"x has length {len(x)}, problem has {problem.dim} variables")
    min_eigs = [float(np.linalg.eigvalsh(blk.evaluate(x))[0]) for blk in problem.blocks]
    return {"feasible": bool(min(min_eigs) >= -tol_feas), "min_eig_per_block": min_eigs}


# ---------------------------------------------------------------------------
# internal stacked representation


class _Group:
    """Blocks sharing (size, number of touched variables)."""

    def __init__(self, blocks: list[AffineBlock], positions: list[int]):
        self.positions = positions
        self.F0 = np.stack([b.F0 for b in blocks])
        self.F = np.stack([b.F for b in blocks])
        self.idx = np.stack([b.index for b in blocks])
        self.w = np.array([b.logdet_weight for b in blocks])
        self.k = self.F0.shape[1]
        self.B = len(blocks)

    def affine(self, x):
        return self.F0 + np.einsum("bv,bvkl->bkl", x[self.idx], self.F)

    def linear(self, x):
        return np.einsum("bv,bvkl->bkl", x[self.idx], self.F)

    def adjoint(self, Z, m):
        vals = np.einsum("bvkl,bkl->bv", self.F, Z)
        return np.bincount(self.idx.ravel(), weights=vals.ravel(), minlength=m)


def _group_blocks(blocks) -> list[_Group]:
    buckets: OrderedDict = OrderedDict()
    for pos, blk in enumerate(blocks):
        buckets.setdefault((blk.size, len(blk.index)), []).append(pos)
    return [_Group([blocks[p] for p in ps], ps) for ps in buckets.values()]


def _gram(groups, m):
    """Dense matrix of inner products <F_i, F_j> summed over blocks."""
    K = np.zeros((m, m))
    for g in groups:
        loc = np.einsum("bikl,bjkl->bij", g.F, g.F)
        I = np.broadcast_to(g.idx[:, :, None], loc.shape)
        J = np.broadcast_to(g.idx[:, None, :], loc.shape)
        np.add.at(K, (I.ravel(), J.ravel()), loc.ravel())
    return K


def _eliminate_equalities(problem: SdpProblem):
    """Rewrite x = x0 + N z; returns transformed blocks, c, and the map."""
    A, b = problem.A, problem.b
    x0, *_ = np.linalg.lstsq(A, b, rcond=None)
    if np.linalg.norm(A @ x0 - b) > 1e-9 * max(1.0, np.linalg.norm(b)):
        raise SdpError("equality constraints are inconsistent")
    N = scipy.linalg.null_space(A)
    blocks = []
    for blk in problem.blocks:
        F0 = blk.evaluate(x0)
        Fz = np.einsum("vz,vkl->zkl", N[blk.index], blk.F)
        blocks.append(
            AffineBlock(F0, Fz, np.arange(N.shape[1]), blk.logdet_weight, blk.label)
        )
    return blocks, N.T @ problem.c, x0, N


def _step_length(lam, d):
    """Largest a in (0, inf] with diag(lam) + a*d PSD (batched)."""
    s = 1.0 / np.sqrt(lam)
    m = d * s[:, :, None] * s[:, None, :]
    ev = np.linalg.eigvalsh(m)[:, 0]
    worst = -ev.min() if len(ev) else 0.0
    return np.inf if worst <= 0 else 1.0 / worst


class _Solver:
    def __init__(self, problem: SdpProblem, opts: SdpOptions):
        self.problem = problem
        self.opts = opts
        if problem.A is not None:
            blocks, c, self.x_shift, self.x_map = _eliminate_equalities(problem)
        else:
            blocks, c = list(problem.blocks), problem.c
            self.x_shift, self.x_map = None, None
        self.m = len(c)
        self.const = float(problem.c @ self.x_shift) if self.x_shift is not None else 0.0
        self.blocks = blocks
        self._scale(blocks, c)

    # -- equilibration ------------------------------------------------------

    def _scale(self, blocks, c):
        m = self.m
        scaled = []
        self.row_scale = []
        for blk in blocks:
            mats = np.concatenate([blk.F0[None], blk.F]) if len(blk.F) else blk.F0[None]
            e = np.max(np.abs(np.diagonal(mats, axis1=1, axis2=2)), axis=0)
            if self.opts.equilibrate:
                rowmax = np.max(np.abs(mats), axis=(0, 2))
                e = np.where(e > 0, e, rowmax)
                e = np.where(e > 0, e, 1.0)
            else:
                e = np.ones_like(e)
            t = 1.0 / np.sqrt(e)
            self.row_scale.append(t)
            T = t[:, None] * t[None, :]
            scaled.append((blk.F0 * T, blk.F * T, blk.index, blk.logdet_weight, blk.label))
        groups = _group_blocks(
            [AffineBlock(F0, F, idx, w, lab) for F0, F, idx, w, lab in scaled]
        )
        K = _gram(groups, m)
        col = np.sqrt(np.diag(K)) if self.opts.equilibrate else np.ones(m)
        col = np.where(col > 0, col, 1.0)
        self.col_scale = col
        for g in groups:
            g.F = g.F / col[g.idx][:, :, None, None]
        K = K / np.outer(col, col)
        cs = c / col
        obj_scale = max(float(np.max(np.abs(cs))) if m else 0.0, 1e-300)
        if not np.any(cs) and not any(np.any(g.w) for g in groups):
            obj_scale = 1.0
        self.obj_scale = obj_scale if np.any(cs) else 1.0
        self.c = cs / self.obj_scale
        for g in groups:
            g.w = g.w / self.obj_scale
        self.groups = groups
        self.K = K
        # lineality space: directions that leave every block unchanged
        ev, V = np.linalg.eigh(K) if m else (np.zeros(0), np.zeros((0, 0)))
        thresh = 1e-12 * max(float(ev[-1]) if m else 0.0, 1e-300)
        null = ev <= thresh
        self.V_null = V[:, null]
        self.V_null_weight = float(ev[-1]) if m else 1.0
        self.F0_norm = np.sqrt(sum(float(np.sum(g.F0**2)) for g in groups))

    def _to_original(self, xs):
        x = xs / self.col_scale
        if self.x_map is not None:
            x = self.x_shift + self.x_map @ x
        return x

    def _from_original(self, x):
        if self.x_map is not None:
            x = self.x_map.T @ (x - self.x_shift)
        return x * self.col_scale

    # -- helpers ------------------------------------------------------------

    def affine(self, x):
        return [g.affine(x) for g in self.groups]

    def adjoint(self, Zs):
        out = np.zeros(self.m)
        for g, Z in zip(self.groups, Zs):
            out += g.adjoint(Z, self.m)
        return out

    def _pobj(self, x, Ss):
        val = float(self.c @ x)
        for g, S in zip(self.groups, Ss):
            if np.any(g.w):
                _, ld = np.linalg.slogdet(S)
                val -= float(np.sum(g.w * ld))
        return val

    def _dobj(self, Zs):
        val = 0.0
        for g, Z in zip(self.groups, Zs):
            val -= float(np.einsum("bkl,bkl->", g.F0, Z))
            if np.any(g.w):
                pos = g.w > 0
                _, ld = np.linalg.slogdet(Z[pos])
                w = g.w[pos]
                val += float(np.sum(w * (ld + g.k - g.k * np.log(w))))
        return val

    def _gap(self, lams):
        gap = 0.0
        for g, lam in zip(self.groups, lams):
            l2 = lam**2
            tr = l2.sum(axis=1)
            if np.any(g.w):
                ld = np.sum(np.log(l2), axis=1)
                w = g.w
                extra = np.where(w > 0, -w * ld - w * g.k + w * g.k * np.log(np.where(w > 0, w, 1.0)), 0.0)
                gap += float(np.sum(tr + extra))
            else:
                gap += float(np.sum(tr))
        return gap

    def initial_point(self):
        m = self.m
        if self.opts.x0 is not None:
            x = self._from_original(np.asarray(self.opts.x0, dtype=float))
        else:
            rhs = -self.adjoint([g.F0 for g in self.groups])
            x = self._lsq(rhs)
        Fx = self.affine(x)
        lo = min(float(np.linalg.eigvalsh(F)[:, 0].min()) for F in Fx)
        shift = 0.0 if lo > 1e-8 else 1.0 - lo
        Ss = [F + shift * np.eye(g.k) for F, g in zip(Fx, self.groups)]
        y = self._lsq(self.c)
        Zl = [g.linear(y) for g in self.groups]
        lo = min(float(np.linalg.eigvalsh(Z)[:, 0].min()) for Z in Zl)
        shift = 0.0 if lo > 1e-8 else 1.0 - lo
        Zs = [Z + shift * np.eye(g.k) for Z, g in zip(Zl, self.groups)]
        return x, Ss, Zs

    def _lsq(self, rhs):
        K = self.K
        if self.V_null.shape[1]:
            K = K + self.V_null_weight * self.V_null @ self.V_null.T
            rhs = rhs - self.V_null @ (self.V_null.T @ rhs)
        try:
            return scipy.linalg.cho_solve(scipy.linalg.cho_factor(K), rhs)
        except (np.linalg.LinAlgError, ValueError):
            return np.linalg.lstsq(K, rhs, rcond=None)[0]

    # -- main loop ----------------------------------------------------------

    def run(self) -> SdpSolution:
        opts = self.opts
        m = self.m
        x, Ss, Zs = self.initial_point()
        history = []
        best = None
        status = Status.MAX_ITERS
        infeas = None
        jammed = False
        self._last_alpha = 1.0
        c_null = np.linalg.norm(self.V_null.T @ self.c) if self.V_null.shape[1] else 0.0
        if c_null > 1e-10:
            status, infeas = Status.INFEASIBLE, "dual"
        it = 0
        c_norm = 1.0 + np.linalg.norm(self.c)
        F0_norm = 1.0 + self.F0_norm
        while status == Status.MAX_ITERS and it < opts.max_iters:
            Fx = self.affine(x)
            rp = [F - S for F, S in zip(Fx, Ss)]
            rd = self.c - self.adjoint(Zs)
            pres = np.sqrt(sum(float(np.sum(r**2)) for r in rp)) / F0_norm
            dres = float(np.linalg.norm(rd)) / c_norm
            try:
                scal = [self._nt_scaling(S, Z) for S, Z in zip(Ss, Zs)]
            except np.linalg.LinAlgError:
                status = Status.NUMERICAL_FAILURE
                break
            lams = [s[2] for s in scal]
            pobj = self._pobj(x, Ss)
            dobj = self._dobj(Zs)
            gap = self._gap(lams)
            relgap = gap / max(self.opts.gap_floor, abs(pobj))
            history.append(
                {"iter": it, "pobj": pobj * self.obj_scale, "dobj": dobj * self.obj_scale,
                 "pres": pres, "dres": dres, "gap": gap * self.obj_scale, "relgap": relgap}
            )
            merit = max(pres, dres, relgap)
            if best is None or merit < best[0]:
                best = (merit, x.copy(), [S.copy() for S in Ss], [Z.copy() for Z in Zs], pobj, dobj, pres, dres, relgap)
            if pres <= opts.tol_feas and dres <= opts.tol_feas and relgap <= opts.tol_gap:
                status = Status.OPTIMAL
                x, Ss, Zs = self._polish(x, Ss, Zs)
                history.append(self._record(it, x, Ss, Zs, c_norm, F0_norm))
                break
            cert = self._infeasibility(x, Zs, pres)
            if cert is not None:
                status, infeas = Status.INFEASIBLE, cert
                break
            try:
                # a jammed iterate (a step length collapsing) recovers after re-centering
                recenter = jammed
                x, Ss, Zs = self._step(x, Ss, Zs, rp, rd, scal, center=recenter)
                jammed = not recenter and self._last_alpha < JAM_ALPHA
            except np.linalg.LinAlgError:
                status = Status.NUMERICAL_FAILURE
                break
            it += 1
        if status in (Status.MAX_ITERS, Status.NUMERICAL_FAILURE) and best is not None:
            _, x, Ss, Zs, *_ = best
        return self._finish(x, Ss, Zs, status, infeas, it, history)

    def _record(self, it, x, Ss, Zs, c_norm, F0_norm):
        rp = [F - S for F, S in zip(self.affine(x), Ss)]
        rd = self.c - self.adjoint(Zs)
        lams = [self._nt_scaling(S, Z)[2] for S, Z in zip(Ss, Zs)]
        pobj, dobj, gap = self._pobj(x, Ss), self._dobj(Zs), self._gap(lams)
        return {
            "iter": it, "pobj": pobj * self.obj_scale, "dobj": dobj * self.obj_scale,
            "pres": np.sqrt(sum(float(np.sum(r**2)) for r in rp)) / F0_norm,
            "dres": float(np.linalg.norm(rd)) / c_norm,
            "gap": gap * self.obj_scale, "relgap": gap / max(self.opts.gap_floor, abs(pobj)),
        }

    def _centrality(self, lams):
        ktot = sum(g.k * g.B for g in self.groups)
        wk = sum(float(np.sum(g.w)) * g.k for g in self.groups)
        mu = max(sum(float(np.sum(l**2)) for l in lams) - wk, 0.0) / ktot
        if mu <= 0:
            return 0.0
        dev = max(float(np.max(np.abs(l**2 - g.w[:, None] - mu))) for g, l in zip(self.groups, lams))
        return dev / mu

    def _polish(self, x, Ss, Zs, steps: int = 20, target: float = 1e-3):
        """Re-center the final iterate; primal accuracy scales with centrality."""
        for _ in range(steps):
            try:
                scal = [self._nt_scaling(S, Z) for S, Z in zip(Ss, Zs)]
            except np.linalg.LinAlgError:
                break
            if self._centrality([s[2] for s in scal]) <= target:
                break
            rp = [F - S for F, S in zip(self.affine(x), Ss)]
            rd = self.c - self.adjoint(Zs)
            try:
                x, Ss, Zs = self._step(x, Ss, Zs, rp, rd, scal, center=True)
            except np.linalg.LinAlgError:
                break
        return x, Ss, Zs

    def _nt_scaling(self, S, Z):
        Ls = np.linalg.cholesky(S)
        Lz = np.linalg.cholesky(Z)
        U, lam, Vt = np.linalg.svd(np.swapaxes(Lz, 1, 2) @ Ls)
        isq = 1.0 / np.sqrt(lam)
        R = Ls @ np.swapaxes(Vt, 1, 2) * isq[:, None, :]
        Rinv = isq[:, :, None] * np.swapaxes(U, 1, 2) @ np.swapaxes(Lz, 1, 2)
        return R, Rinv, lam

    def _infeasibility(self, x, Zs, pres):
        # primal infeasibility: Z >= 0, adj(Z) ~ 0, tr(F0 Z) < 0.  Z only excludes
        # feasible points with |x| < 1/ratio, so the radius must dwarf the iterate;
        # otherwise a dual-feasible Z with a huge objective passes.  A primal-feasible
        # iterate rules it out altogether.
        tr0 = sum(float(np.einsum("bkl,bkl->", g.F0, Z)) for g, Z in zip(self.groups, Zs))
        if pres > self.opts.tol_feas and not any(np.any(g.w) for g in self.groups) and tr0 < 0:
            ratio = np.linalg.norm(self.adjoint(Zs)) / -tr0
            if ratio * max(1.0, float(np.linalg.norm(x))) <= self.opts.tol_infeas:
                return "primal"
        # dual infeasibility: sum x_j F_j >= 0 with c^T x < 0
        cx = float(self.c @ x)
        if cx < 0 and np.linalg.norm(x) > 1e6:
            xh = x / -cx
            lo = min(float(np.linalg.eigvalsh(g.linear(xh))[:, 0].min()) for g in self.groups)
            if lo >= -self.opts.tol_infeas:
                return "dual"
        return None

    def _solve_newton(self, scal, G, chol, T_list, rp, rd):
        """Solve the scaled Newton system for the given complementarity targets."""
        m = self.m
        rhs = -rd.copy()
        Us, Rps = [], []
        for g, (R, Rinv, lam), Gg, T, r in zip(self.groups, scal, G, T_list, rp):
            U = 2.0 * T / (lam[:, :, None] + lam[:, None, :])
            Rp = Rinv @ r @ np.swapaxes(Rinv, 1, 2)
            Us.append(U)
            Rps.append(Rp)
            vals = np.einsum("bvkl,bkl->bv", Gg, U - Rp)
            rhs += np.bincount(g.idx.ravel(), weights=vals.ravel(), minlength=m)
        if self.V_null.shape[1]:
            rhs -= self.V_null @ (self.V_null.T @ rhs)
        dx = scipy.linalg.cho_solve(chol, rhs)
        if self.V_null.shape[1]:
            dx -= self.V_null @ (self.V_null.T @ dx)
        dS_hat, dZ_hat = [], []
        for g, Gg, U, Rp in zip(self.groups, G, Us, Rps):
            dS = np.einsum("bv,bvkl->bkl", dx[g.idx], Gg) + Rp
            dS_hat.append(dS)
            dZ_hat.append(U - dS)
        return dx, dS_hat, dZ_hat

    def _step(self, x, Ss, Zs, rp, rd, scal, center=False):
        m = self.m
        G = []
        H = np.zeros((m, m))
        for g, (R, Rinv, lam) in zip(self.groups, scal):
            Gg = Rinv[:, None] @ g.F @ np.swapaxes(Rinv, 1, 2)[:, None]
            G.append(Gg)
            loc = np.einsum("bikl,bjkl->bij", Gg, Gg)
            flat = (g.idx[:, :, None] * m + g.idx[:, None, :]).ravel()
            H += np.bincount(flat, weights=loc.ravel(), minlength=m * m).reshape(m, m)
        if self.V_null.shape[1]:
            scale = max(float(np.max(np.diag(H))), 1e-300)
            H += scale * self.V_null @ self.V_null.T
        chol = self._factor(H)

        ktot = sum(g.k * g.B for g in self.groups)
        wk = sum(float(np.sum(g.w)) * g.k for g in self.groups)
        mu = max(sum(float(np.sum(l**2)) for l in (s[2] for s in scal)) - wk, 0.0) / ktot

        def targets(sigma_mu, corr=None):
            out = []
            for i, (g, (_, _, lam)) in enumerate(zip(self.groups, scal)):
                diag = sigma_mu + g.w[:, None] - lam**2
                T = np.zeros((g.B, g.k, g.k))
                ii = np.arange(g.k)
                T[:, ii, ii] = diag
                if corr is not None:
                    dS, dZ = corr[0][i], corr[1][i]
                    P = dS @ dZ
                    T -= 0.5 * (P + np.swapaxes(P, 1, 2))
                out.append(T)
            return out

        if center:
            dx, dS, dZ = self._solve_newton(scal, G, chol, targets(mu), rp, rd)
            return self._update(x, Ss, Zs, scal, dx, dS, dZ)
        dx, dS, dZ = self._solve_newton(scal, G, chol, targets(0.0), rp, rd)
        ap, ad = self._alphas(scal, dS, dZ)
        ap, ad = min(1.0, ap), min(1.0, ad)
        mu_aff = 0.0
        for (_, _, lam), s, z in zip(scal, dS, dZ):
            Ls = np.zeros_like(s)
            ii = np.arange(s.shape[1])
            Ls[:, ii, ii] = lam
            mu_aff += float(np.einsum("bkl,blk->", Ls + ap * s, Ls + ad * z))
        mu_aff = max(mu_aff - wk, 0.0) / ktot
        sigma = min(1.0, (mu_aff / mu) ** 3) if mu > 0 else 0.0

        dx, dS, dZ = self._solve_newton(scal, G, chol, targets(sigma * mu, (dS, dZ)), rp, rd)
        return self._update(x, Ss, Zs, scal, dx, dS, dZ)

    def _update(self, x, Ss, Zs, scal, dx, dS, dZ):
        ap, ad = self._alphas(scal, dS, dZ)
        self._last_alpha = min(ap, ad)
        # stay further from the boundary after short steps
        frac = min(self.opts.step, 0.9 + 0.09 * min(1.0, ap, ad))
        ap = min(1.0, frac * ap)
        ad = min(1.0, frac * ad)

        x = x + ap * dx
        newS, newZ = [], []
        for (R, Rinv, lam), S, Z, s, z in zip(scal, Ss, Zs, dS, dZ):
            RT = np.swapaxes(R, 1, 2)
            RinvT = np.swapaxes(Rinv, 1, 2)
            Sn = S + ap * (R @ s @ RT)
            Zn = Z + ad * (RinvT @ z @ Rinv)
            newS.append(0.5 * (Sn + np.swapaxes(Sn, 1, 2)))
            newZ.append(0.5 * (Zn + np.swapaxes(Zn, 1, 2)))
        return x, newS, newZ

    def _alphas(self, scal, dS, dZ):
        ap = ad = np.inf
        for (_, _, lam), s, z in zip(scal, dS, dZ):
            ap = min(ap, _step_length(lam, s))
            ad = min(ad, _step_length(lam, z))
        return ap, ad

    def _factor(self, H):
        try:
            return scipy.linalg.cho_factor(H)
        except np.linalg.LinAlgError:
            pass
        d = np.diag(H)
        reg = 1e-14 * max(float(d.max()), 1e-300)
        for _ in range(6):
            try:
                return scipy.linalg.cho_factor(H + reg * np.eye(len(H)))
            except np.linalg.LinAlgError:
                reg *= 100.0
        raise np.linalg.LinAlgError("Newton system is not positive definite")

    def _finish(self, xs, Ss, Zs, status, infeas, it, history):
        x = self._to_original(xs)
        # map dual matrices back to the unscaled blocks
        Z_orig = [None] * len(self.blocks)
        for g, Z in zip(self.groups, Zs):
            for b, pos in enumerate(g.positions):
                t = self.row_scale[pos]
                Z_orig[pos] = Z[b] * np.outer(t, t) * self.obj_scale
        min_eigs = []
        rel_eigs = []
        for blk in self.problem.blocks:
            F = blk.evaluate(x)
            lo = float(np.linalg.eigvalsh(F)[0])
            scale = max(1.0, float(np.linalg.norm(blk.F0)) + float(
                np.sum(np.abs(x[blk.index]) * np.linalg.norm(blk.F, axis=(1, 2)))))
            min_eigs.append(lo)
            rel_eigs.append(lo / scale)
        last = history[-1] if history else {}
        certs = {
            "primal_residual": last.get("pres", np.nan),
            "dual_residual": last.get("dres", np.nan),
            "duality_gap": last.get("relgap", np.nan),
            "min_eig": min_eigs,
            "min_eig_relative": rel_eigs,
        }
        if status == Status.OPTIMAL and min(rel_eigs) < -self.opts.tol_feas:
            log.warning("solution violates a block by %.3g after unscaling", min(rel_eigs))
            status = Status.NUMERICAL_FAILURE
        dobj = self.const
        for blk, Z in zip(self.blocks, Z_orig):
            dobj -= float(np.sum(blk.F0 * Z))
            w = blk.logdet_weight
            if w > 0:
                dobj += w * (np.linalg.slogdet(Z)[1] + blk.size - blk.size * np.log(w))
        if status == Status.INFEASIBLE:
            dobj = np.nan
        try:
            pobj = self.problem.objective(x)
        except np.linalg.LinAlgError:
            pobj = np.nan
        return SdpSolution(
            x=x, objective_value=pobj, dual_value=dobj, status=status,
            certificates=certs, iterations=it, infeasibility=infeas, Z=Z_orig,
            history=history,
        )


def solve(problem: SdpProblem, options: SdpOptions | None = None, **kwargs) -> SdpSolution:
    """Solve an LMI problem with the primal-dual interior-point method.

    Keyword arguments override fields of ``options``.
    """
    opts = options or SdpOptions()
    if kwargs:
        opts = dataclasses.replace(opts, **kwargs)
    sol = _Solver(problem, opts).run()
    log.debug("sdp: %s after %d iterations, objective %.10g", sol.status.value, sol.iterations, sol.objective_value)
    return sol


def qp_as_sdp(Q, c, blocks=(), L=None, psd_tol: float = 1e-10) -> SdpProblem:
    """Embed ``min 0.5 x^T Q x + c^T x`` subject to LMIs into an SDP.

    The quadratic term is carried by one epigraph block
    ``[[I, L x], [(L x)^T, t]] >= 0`` with ``Q = L^T L``; the returned problem
    appends ``t`` as the last decision variable and minimizes ``0.5 t + c^T x``.
    When ``Q`` is zero no epigraph variable is added.
    """
    c = np.asarray(c, dtype=float).reshape(-1)
    m = len(c)
    if L is None:
        Q = np.asarray(Q, dtype=float)
        if Q.shape != (m, m):
            raise SdpError("Q has the wrong shape")
        Q = _symmetrize(Q, "Q")
        ev, V = np.linalg.eigh(Q)
        top = max(float(ev[-1]), 0.0) if m else 0.0
        if m and ev[0] < -psd_tol * max(1.0, top):
            raise SdpError(f"Q is not positive semidefinite (min eigenvalue {ev[0]:.3g})")
        keep = ev > psd_tol * max(top, 1e-300)
        L = (np.sqrt(ev[keep])[:, None] * V[:, keep].T)
    else:
        L = np.atleast_2d(np.asarray(L, dtype=float))
        if L.shape[1] != m:
            raise SdpError("L has the wrong number of columns")
    blocks = list(blocks)
    r = L.shape[0]
    if r == 0:
        return SdpProblem(c, blocks)
    k = r + 1
    F0 = np.zeros((k, k))
    F0[:r, :r] = np.eye(r)
    F = np.zeros((m + 1, k, k))
    F[:m, :r, r] = L.T
    F[:m, r, :r] = L.T
    F[m, r, r] = 1.0
    epi = AffineBlock(F0, F, np.arange(m + 1), label="quadratic epigraph")
    c_ext = np.concatenate([c, [0.5]])
    return SdpProblem(c_ext, [epi] + blocks)


# ---------------------------------------------------------------------------
# plain-text triplet format

_HEADER = "# dualid sdp triplet v1"


def dump(problem: SdpProblem, path) -> None:
    """Write ``problem`` as whitespace-separated sparse triplets.

    Layout: ``m``, block sizes, objective and logdet weights, then one line
    ``block row col varindex value`` per nonzero upper-triangle entry, with
    1-based block/row/col and varindex 0 for the constant term.
    """
    lines = [_HEADER, f"m {problem.dim}"]
    lines.append("blocks " + " ".join(str(b.size) for b in problem.blocks))
    lines.append("c " + " ".join(repr(float(v)) for v in problem.c))
    lines.append("logdet " + " ".join(repr(float(b.logdet_weight)) for b in problem.blocks))
    if problem.A is not None:
        lines.append(f"eq {problem.A.shape[0]}")
        for i, row in enumerate(problem.A):
            lines.append("A " + " ".join(repr(float(v)) for v in row))
        lines.append("b " + " ".join(repr(float(v)) for v in problem.b))
    for bi, blk in enumerate(problem.blocks, start=1):
        mats = [(0, blk.F0)] + [(int(j) + 1, F) for j, F in zip(blk.index, blk.F)]
        for var, M in mats:
            rows, cols = np.nonzero(np.triu(M))
            for r, cc in zip(rows, cols):
                lines.append(f"{bi} {r + 1} {cc + 1} {var} {float(M[r, cc])!r}")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def load(path) -> SdpProblem:
    with open(path, encoding="utf-8") as fh:
        lines = [ln.strip() for ln in fh if ln.strip() and not ln.startswith("#")]
    it = iter(lines)
    m = int(next(it).split()[1])
    sizes = [int(s) for s in next(it).split()[1:]]
    c = np.array([float(s) for s in next(it).split()[1:]])
    weights = [float(s) for s in next(it).split()[1:]]
    A = b = None
    entries = []
    for ln in it:
        head, *rest = ln.split()
        if head == "eq":
            A = []
        elif head == "A":
            A.append([float(s) for s in rest])
        elif head == "b":
            b = [float(s) for s in rest]
        else:
            bi, r, cc, var = int(head), int(rest[0]), int(rest[1]), int(rest[2])
            entries.append((bi - 1, r - 1, cc - 1, var, float(rest[3])))
    mats = [dict() for _ in sizes]
    for bi, r, cc, var, val in entries:
        M = mats[bi].setdefault(var, np.zeros((sizes[bi], sizes[bi])))
        M[r, cc] = val
        M[cc, r] = val
    blocks = []
    for k, d, w in zip(sizes, mats, weights):
        F0 = d.pop(0, np.zeros((k, k)))
        idx = sorted(d)
        F = np.array([d[v] for v in idx]) if idx else np.zeros((0, k, k))
        blocks.append(AffineBlock(F0, F, np.array(idx, dtype=int) - 1, logdet_weight=w))
    if len(c) != m:
        raise SdpError("objective length does not match m")
    return SdpProblem(c, blocks, None if A is None else np.array(A), None if b is None else np.array(b))
