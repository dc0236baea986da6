"""Finite-horizon feedback Stackelberg solver for two-agent LQ games.

Solves time-varying linear-quadratic games where one agent (the leader)
commits to a feedback law anticipating the other's best response at every
stage. The backward recursion carries affine cost terms so it can serve as
the inner solver for iterative LQ approximation of nonlinear games, where
gradients about the current iterate appear as linear cost terms.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from numba import njit

from .costs import QuadraticApproximation, QuadraticBatch
from .dynamics import DynamicsModel, LinearizedStep

Array = np.ndarray

__all__ = [
    "SolverError",
    "LQGame",
    "AffineStrategy",
    "StackelbergDetails",
    "solve",
    "solve_stacked",
    "apply",
    "convexify_batches",
    "verify_stackelberg",
]

COND_WARN_THRESHOLD = 1e10


class SolverError(RuntimeError):
    """The backward recursion hit a singular or non-finite stage system."""


@dataclass
class LQGame:
    """Time-varying LQ game: dynamics Jacobian stacks and per-agent stacked
    quadratic cost models, all with leading time axis of length T."""

    A: Array
    B1: Array
    B2: Array
    cost1: QuadraticBatch
    cost2: QuadraticBatch
    leader: int

    @classmethod
    def from_lists(
        cls,
        dynamics: list[LinearizedStep],
        cost1: list[QuadraticApproximation],
        cost2: list[QuadraticApproximation],
        leader: int,
    ) -> "LQGame":
        T = len(dynamics)
        if not (T == len(cost1) == len(cost2)) or T == 0:
            raise ValueError("dynamics and cost lists must have equal nonzero length")

        def stack(approxes: list[QuadraticApproximation], agent: int) -> QuadraticBatch:
            return QuadraticBatch(
                agent=agent,
                c=np.array([a.c for a in approxes]),
                q=np.stack([a.q for a in approxes]),
                Q=np.stack([a.Q for a in approxes]),
                r1=np.stack([a.r1 for a in approxes]),
                R1=np.stack([a.R1 for a in approxes]),
                r2=np.stack([a.r2 for a in approxes]),
                R2=np.stack([a.R2 for a in approxes]),
            )

        return cls(
            A=np.stack([d.A for d in dynamics]),
            B1=np.stack([d.B1 for d in dynamics]),
            B2=np.stack([d.B2 for d in dynamics]),
            cost1=stack(cost1, 1),
            cost2=stack(cost2, 2),
            leader=leader,
        )

    @property
    def T(self) -> int:
        return self.A.shape[0]

    @property
    def n(self) -> int:
        return self.A.shape[1]

    @property
    def m1(self) -> int:
        return self.B1.shape[2]

    @property
    def m2(self) -> int:
        return self.B2.shape[2]

    def validate(self) -> None:
        T, n = self.T, self.n
        if self.leader not in (1, 2):
            raise ValueError("leader must be 1 or 2")
        if self.A.shape != (T, n, n):
            raise ValueError("A must be square per timestep")
        if self.B1.shape[:2] != (T, n) or self.B2.shape[:2] != (T, n):
            raise ValueError("B shapes inconsistent with A")
        for batch in (self.cost1, self.cost2):
            if batch.Q.shape != (T, n, n) or batch.q.shape != (T, n):
                raise ValueError("cost state terms inconsistent with dynamics")
            if batch.R1.shape != (T, self.m1, self.m1) or batch.R2.shape != (T, self.m2, self.m2):
                raise ValueError("cost control terms inconsistent with dynamics")
            if not np.allclose(batch.Q, np.swapaxes(batch.Q, 1, 2), atol=1e-8):
                raise ValueError("Q blocks must be symmetric")
            if np.linalg.eigvalsh(batch.Q).min(initial=0.0) < -1e-9:
                raise ValueError("Q blocks must be positive semidefinite")
        for batch, R_own in ((self.cost1, self.cost1.R1), (self.cost2, self.cost2.R2)):
            if R_own.shape[2] > 0 and np.linalg.eigvalsh(R_own).min() <= 0:
                raise ValueError("own-control Hessians must be positive definite")


@dataclass
class AffineStrategy:
    """Per-agent feedback laws u_t = -P_t x_t - p_t (x in the game's coordinates)."""

    P1: Array
    p1: Array
    P2: Array
    p2: Array

    @property
    def T(self) -> int:
        return self.P1.shape[0]


@dataclass
class StackelbergDetails:
    """Follower reaction map u_F = -(Kx x + Ku u_L + kc) and per-stage value
    expansions V_i,t(x) = x.Z_i[t].x/2 + z_i[t].x + const (index T is zero)."""

    Kx: Array
    Ku: Array
    kc: Array
    Z1: Array
    z1: Array
    Z2: Array
    z2: Array
    max_condition: float


@njit(cache=True)
def _cond_inf(S):
    Sinv = np.linalg.inv(S)
    a = 0.0
    b = 0.0
    for i in range(S.shape[0]):
        ra = np.abs(S[i]).sum()
        rb = np.abs(Sinv[i]).sum()
        if ra > a:
            a = ra
        if rb > b:
            b = rb
    return a * b


@njit(cache=True)
def _recursion(A, BL, BF, QL, qL, QF, qF, RLL, rLL, RLF, rLF, RFL, rFL, RFF, rFF):
    T = A.shape[0]
    n = A.shape[1]
    mL = BL.shape[2]
    mF = BF.shape[2]
    PL = np.zeros((T, mL, n))
    pL = np.zeros((T, mL))
    PF = np.zeros((T, mF, n))
    pF = np.zeros((T, mF))
    Kx = np.zeros((T, mF, n))
    Ku = np.zeros((T, mF, mL))
    kc = np.zeros((T, mF))
    ZL = np.zeros((T + 1, n, n))
    zL = np.zeros((T + 1, n))
    ZF = np.zeros((T + 1, n, n))
    zF = np.zeros((T + 1, n))
    maxcond = 1.0
    for t in range(T - 1, -1, -1):
        At = A[t]
        BLt = BL[t]
        BFt = BF[t]
        ZLn = ZL[t + 1]
        zLn = zL[t + 1]
        ZFn = ZF[t + 1]
        zFn = zF[t + 1]

        MF = BFt.T @ ZFn
        SF = RFF[t] + MF @ BFt
        rhsF = np.empty((mF, n + mL + 1))
        rhsF[:, :n] = MF @ At
        rhsF[:, n:n + mL] = MF @ BLt
        rhsF[:, n + mL] = rFF[t] + BFt.T @ zFn
        solF = np.linalg.solve(SF, rhsF)
        cF = _cond_inf(SF)
        if cF > maxcond:
            maxcond = cF
        Kxt = solF[:, :n].copy()
        Kut = solF[:, n:n + mL].copy()
        kct = solF[:, n + mL].copy()

        Abar = At - BFt @ Kxt
        Bbar = BLt - BFt @ Kut
        cbar = -(BFt @ kct)

        TLm = Bbar.T @ ZLn
        KuRLF = Kut.T @ RLF[t]
        SL = RLL[t] + KuRLF @ Kut + TLm @ Bbar
        rhsL = np.empty((mL, n + 1))
        rhsL[:, :n] = KuRLF @ Kxt + TLm @ Abar
        rhsL[:, n] = rLL[t] - Kut.T @ rLF[t] + KuRLF @ kct + TLm @ cbar + Bbar.T @ zLn
        solL = np.linalg.solve(SL, rhsL)
        cL = _cond_inf(SL)
        if cL > maxcond:
            maxcond = cL
        PLt = solL[:, :n].copy()
        pLt = solL[:, n].copy()

        PFt = Kxt - Kut @ PLt
        pFt = kct - Kut @ pLt
        F = At - BLt @ PLt - BFt @ PFt
        beta = -(BLt @ pLt) - BFt @ pFt

        ZLt = QL[t] + PLt.T @ RLL[t] @ PLt + PFt.T @ RLF[t] @ PFt + F.T @ ZLn @ F
        ZL[t] = 0.5 * (ZLt + ZLt.T)
        zL[t] = (qL[t] + PLt.T @ (RLL[t] @ pLt - rLL[t])
                 + PFt.T @ (RLF[t] @ pFt - rLF[t]) + F.T @ (ZLn @ beta + zLn))
        ZFt = QF[t] + PLt.T @ RFL[t] @ PLt + PFt.T @ RFF[t] @ PFt + F.T @ ZFn @ F
        ZF[t] = 0.5 * (ZFt + ZFt.T)
        zF[t] = (qF[t] + PLt.T @ (RFL[t] @ pLt - rFL[t])
                 + PFt.T @ (RFF[t] @ pFt - rFF[t]) + F.T @ (ZFn @ beta + zFn))

        PL[t] = PLt
        pL[t] = pLt
        PF[t] = PFt
        pF[t] = pFt
        Kx[t] = Kxt
        Ku[t] = Kut
        kc[t] = kct
    return PL, pL, PF, pF, Kx, Ku, kc, ZL, zL, ZF, zF, maxcond


def _locate_singular_stage(A, BL, BF, QL, qL, QF, qF, RLL, rLL, RLF, rLF, RFL, rFL, RFF, rFF):
    """Pure-python replay of the recursion to name the failing timestep."""
    T, n = A.shape[0], A.shape[1]
    mL = BL.shape[2]
    ZL = np.zeros((n, n))
    zL = np.zeros(n)
    ZF = np.zeros((n, n))
    zF = np.zeros(n)
    for t in range(T - 1, -1, -1):
        MF = BF[t].T @ ZF
        SF = RFF[t] + MF @ BF[t]
        try:
            solF = np.linalg.solve(SF, np.column_stack([MF @ A[t], MF @ BL[t], rFF[t] + BF[t].T @ zF]))
        except np.linalg.LinAlgError:
            return t, "follower"
        if not np.all(np.isfinite(solF)):
            return t, "follower"
        Kx, Ku, kc = solF[:, :n], solF[:, n:n + mL], solF[:, n + mL]
        Abar = A[t] - BF[t] @ Kx
        Bbar = BL[t] - BF[t] @ Ku
        cbar = -(BF[t] @ kc)
        TLm = Bbar.T @ ZL
        KuRLF = Ku.T @ RLF[t]
        SL = RLL[t] + KuRLF @ Ku + TLm @ Bbar
        rhs = np.column_stack([
            KuRLF @ Kx + TLm @ Abar,
            rLL[t] - Ku.T @ rLF[t] + KuRLF @ kc + TLm @ cbar + Bbar.T @ zL,
        ])
        try:
            solL = np.linalg.solve(SL, rhs)
        except np.linalg.LinAlgError:
            return t, "leader"
        if not np.all(np.isfinite(solL)):
            return t, "leader"
        PL, pL = solL[:, :n], solL[:, n]
        PF = Kx - Ku @ PL
        pF = kc - Ku @ pL
        F = A[t] - BL[t] @ PL - BF[t] @ PF
        beta = -(BL[t] @ pL) - BF[t] @ pF
        ZL_new = QL[t] + PL.T @ RLL[t] @ PL + PF.T @ RLF[t] @ PF + F.T @ ZL @ F
        zL = qL[t] + PL.T @ (RLL[t] @ pL - rLL[t]) + PF.T @ (RLF[t] @ pF - rLF[t]) + F.T @ (ZL @ beta + zL)
        ZL = ZL_new
        ZF_new = QF[t] + PL.T @ RFL[t] @ PL + PF.T @ RFF[t] @ PF + F.T @ ZF @ F
        zF = qF[t] + PL.T @ (RFL[t] @ pL - rFL[t]) + PF.T @ (RFF[t] @ pF - rFF[t]) + F.T @ (ZF @ beta + zF)
        ZF = ZF_new
    return -1, ""


def _lqr_strategy(A, B, Q, q, R, r):
    """Single-agent affine LQR backward pass, used when one agent has no inputs."""
    T, n = A.shape[0], A.shape[1]
    m = B.shape[2]
    P = np.zeros((T, m, n))
    p = np.zeros((T, m))
    Z = np.zeros((n, n))
    z = np.zeros(n)
    for t in range(T - 1, -1, -1):
        S = R[t] + B[t].T @ Z @ B[t]
        P[t] = np.linalg.solve(S, B[t].T @ Z @ A[t])
        p[t] = np.linalg.solve(S, r[t] + B[t].T @ z)
        F = A[t] - B[t] @ P[t]
        beta = -(B[t] @ p[t])
        Z_new = Q[t] + P[t].T @ R[t] @ P[t] + F.T @ Z @ F
        z = q[t] + P[t].T @ (R[t] @ p[t] - r[t]) + F.T @ (Z @ beta + z)
        Z = 0.5 * (Z_new + Z_new.T)
    return P, p


def solve(game: LQGame, return_details: bool = False, validate: bool = True):
    """Backward-recursion solve. Returns AffineStrategy, or a pair
    (AffineStrategy, StackelbergDetails) when return_details is set."""
    if validate:
        game.validate()
    T, n, m1, m2 = game.T, game.n, game.m1, game.m2

    if m1 == 0 or m2 == 0:
        # Degenerate single-agent case: plain affine LQR for whichever agent
        # still has inputs, driven by that agent's own cost.
        if m1 > 0:
            own = game.cost1
            P1, p1 = _lqr_strategy(game.A, game.B1, own.Q, own.q, own.R1, own.r1)
            P2, p2 = np.zeros((T, 0, n)), np.zeros((T, 0))
        else:
            own = game.cost2
            P2, p2 = _lqr_strategy(game.A, game.B2, own.Q, own.q, own.R2, own.r2)
            P1, p1 = np.zeros((T, 0, n)), np.zeros((T, 0))
        strategy = AffineStrategy(P1=P1, p1=p1, P2=P2, p2=p2)
        if return_details:
            mF = m2 if game.leader == 1 else m1
            mL = m1 if game.leader == 1 else m2
            details = StackelbergDetails(
                Kx=np.zeros((T, mF, n)), Ku=np.zeros((T, mF, mL)), kc=np.zeros((T, mF)),
                Z1=np.zeros((T + 1, n, n)), z1=np.zeros((T + 1, n)),
                Z2=np.zeros((T + 1, n, n)), z2=np.zeros((T + 1, n)),
                max_condition=1.0,
            )
            return strategy, details
        return strategy

    if game.leader == 1:
        cL, cF = game.cost1, game.cost2
        BL, BF = game.B1, game.B2
        RLL, rLL, RLF, rLF = cL.R1, cL.r1, cL.R2, cL.r2
        RFL, rFL, RFF, rFF = cF.R1, cF.r1, cF.R2, cF.r2
    else:
        cL, cF = game.cost2, game.cost1
        BL, BF = game.B2, game.B1
        RLL, rLL, RLF, rLF = cL.R2, cL.r2, cL.R1, cL.r1
        RFL, rFL, RFF, rFF = cF.R2, cF.r2, cF.R1, cF.r1

    args = (
        np.ascontiguousarray(game.A), np.ascontiguousarray(BL), np.ascontiguousarray(BF),
        np.ascontiguousarray(cL.Q), np.ascontiguousarray(cL.q),
        np.ascontiguousarray(cF.Q), np.ascontiguousarray(cF.q),
        np.ascontiguousarray(RLL), np.ascontiguousarray(rLL),
        np.ascontiguousarray(RLF), np.ascontiguousarray(rLF),
        np.ascontiguousarray(RFL), np.ascontiguousarray(rFL),
        np.ascontiguousarray(RFF), np.ascontiguousarray(rFF),
    )
    try:
        PL, pL, PF, pF, Kx, Ku, kc, ZL, zL, ZF, zF, maxcond = _recursion(*args)
        bad = not (np.all(np.isfinite(PL)) and np.all(np.isfinite(PF))
                   and np.all(np.isfinite(pL)) and np.all(np.isfinite(pF)))
    except np.linalg.LinAlgError:
        bad = True
    if bad:
        t, side = _locate_singular_stage(*args)
        raise SolverError(f"singular {side or 'stage'} system in backward recursion at timestep {max(t, 0)}")
    if maxcond > COND_WARN_THRESHOLD:
        warnings.warn(
            f"ill-conditioned stage system (cond ~ {maxcond:.2e}); "
            "check convexification margins", RuntimeWarning, stacklevel=2,
        )

    if game.leader == 1:
        strategy = AffineStrategy(P1=PL, p1=pL, P2=PF, p2=pF)
        Z1, z1, Z2, z2 = ZL, zL, ZF, zF
    else:
        strategy = AffineStrategy(P1=PF, p1=pF, P2=PL, p2=pL)
        Z1, z1, Z2, z2 = ZF, zF, ZL, zL
    if return_details:
        return strategy, StackelbergDetails(
            Kx=Kx, Ku=Ku, kc=kc, Z1=Z1, z1=z1, Z2=Z2, z2=z2, max_condition=float(maxcond)
        )
    return strategy


def _mv(M: Array, v: Array) -> Array:
    """Stacked matrix-vector product: (K,a,b) @ (K,b) -> (K,a)."""
    return (M @ v[..., None])[..., 0]


def _stage_solve_stacked(S: Array, rhs: Array) -> tuple[Array, Array | None]:
    """Batched linear solve that degrades to per-slice solves when some slice
    is singular. Returns the solutions and a mask of failed slices (or None
    on the all-good fast path); failed slices come back zeroed."""
    try:
        return np.linalg.solve(S, rhs), None
    except np.linalg.LinAlgError:
        sol = np.zeros(rhs.shape)
        bad = np.zeros(S.shape[0], dtype=bool)
        for k in range(S.shape[0]):
            try:
                sol[k] = np.linalg.solve(S[k], rhs[k])
            except np.linalg.LinAlgError:
                bad[k] = True
        return sol, bad


def solve_stacked(
    A: Array, B1: Array, B2: Array,
    cost1: QuadraticBatch, cost2: QuadraticBatch, leader: int,
) -> tuple[Array, Array, Array, Array, Array, Array]:
    """Backward recursion over a stack of K independent LQ games at once.

    Inputs carry a leading game axis: A is (K, T, n, n), B1/B2 are
    (K, T, n, m), and the cost batches hold (K, T, ...) stacks. All games
    share shapes and the leader side but are otherwise independent; each
    game's gains match `solve` on that game alone up to floating-point
    reordering. Returns (P1, p1, P2, p2, failed, max_condition) where
    `failed` marks games whose stage systems went singular or non-finite
    (their gains are zeroed/garbage and must be discarded by the caller)
    and `max_condition` is each game's worst stage-system condition number.
    """
    A = np.asarray(A, dtype=float)
    K, T, n = A.shape[0], A.shape[1], A.shape[2]
    if leader == 1:
        cL, cF = cost1, cost2
        BL, BF = np.asarray(B1, float), np.asarray(B2, float)
        RLL, rLL, RLF, rLF = cL.R1, cL.r1, cL.R2, cL.r2
        RFL, rFL, RFF, rFF = cF.R1, cF.r1, cF.R2, cF.r2
    elif leader == 2:
        cL, cF = cost2, cost1
        BL, BF = np.asarray(B2, float), np.asarray(B1, float)
        RLL, rLL, RLF, rLF = cL.R2, cL.r2, cL.R1, cL.r1
        RFL, rFL, RFF, rFF = cF.R2, cF.r2, cF.R1, cF.r1
    else:
        raise ValueError("leader must be 1 or 2")
    QL, qL, QF, qF = cL.Q, cL.q, cF.Q, cF.q
    mL, mF = BL.shape[3], BF.shape[3]
    if mL == 0 or mF == 0:
        raise ValueError("stacked solve requires both agents to have inputs")

    PLs = np.zeros((K, T, mL, n))
    pLs = np.zeros((K, T, mL))
    PFs = np.zeros((K, T, mF, n))
    pFs = np.zeros((K, T, mF))
    ZL = np.zeros((K, n, n))
    zL = np.zeros((K, n))
    ZF = np.zeros((K, n, n))
    zF = np.zeros((K, n))
    failed = np.zeros(K, dtype=bool)
    maxcond = np.ones(K)
    eyeF = np.broadcast_to(np.eye(mF), (K, mF, mF))
    eyeL = np.broadcast_to(np.eye(mL), (K, mL, mL))

    def track_cond(S, Sinv):
        cond = np.abs(S).sum(axis=2).max(axis=1) * np.abs(Sinv).sum(axis=2).max(axis=1)
        np.maximum(maxcond, np.where(np.isfinite(cond), cond, np.inf), out=maxcond)

    for t in range(T - 1, -1, -1):
        if failed.any():
            # Keep dead games' stage systems benign so the batched solves stay
            # on the fast path; their outputs are discarded anyway.
            ZL[failed] = 0.0
            zL[failed] = 0.0
            ZF[failed] = 0.0
            zF[failed] = 0.0
        At, BLt, BFt = A[:, t], BL[:, t], BF[:, t]
        BFtT = np.swapaxes(BFt, 1, 2)

        MF = BFtT @ ZF
        SF = RFF[:, t] + MF @ BFt
        rhsF = np.concatenate([
            MF @ At,
            MF @ BLt,
            (rFF[:, t] + _mv(BFtT, zF))[:, :, None],
            eyeF,
        ], axis=2)
        solF, badF = _stage_solve_stacked(SF, rhsF)
        if badF is not None:
            failed |= badF
        track_cond(SF, solF[:, :, n + mL + 1:])
        Kx = solF[:, :, :n]
        Ku = solF[:, :, n:n + mL]
        kc = solF[:, :, n + mL]
        if failed.any():
            Kx[failed] = 0.0
            Ku[failed] = 0.0
            kc[failed] = 0.0

        Abar = At - BFt @ Kx
        Bbar = BLt - BFt @ Ku
        cbar = -_mv(BFt, kc)
        BbarT = np.swapaxes(Bbar, 1, 2)
        TLm = BbarT @ ZL
        KuT = np.swapaxes(Ku, 1, 2)
        KuRLF = KuT @ RLF[:, t]
        SL = RLL[:, t] + KuRLF @ Ku + TLm @ Bbar
        rhsL = np.concatenate([
            KuRLF @ Kx + TLm @ Abar,
            (rLL[:, t] - _mv(KuT, rLF[:, t]) + _mv(KuRLF, kc)
             + _mv(TLm, cbar) + _mv(BbarT, zL))[:, :, None],
            eyeL,
        ], axis=2)
        solL, badL = _stage_solve_stacked(SL, rhsL)
        if badL is not None:
            failed |= badL
        track_cond(SL, solL[:, :, n + 1:])
        PL = solL[:, :, :n]
        pL = solL[:, :, n]
        if failed.any():
            PL[failed] = 0.0
            pL[failed] = 0.0

        PF = Kx - Ku @ PL
        pF = kc - _mv(Ku, pL)
        F = At - BLt @ PL - BFt @ PF
        beta = -_mv(BLt, pL) - _mv(BFt, pF)
        PLT = np.swapaxes(PL, 1, 2)
        PFT = np.swapaxes(PF, 1, 2)
        FT = np.swapaxes(F, 1, 2)

        ZL_new = QL[:, t] + PLT @ RLL[:, t] @ PL + PFT @ RLF[:, t] @ PF + FT @ ZL @ F
        zL_new = (qL[:, t] + _mv(PLT, _mv(RLL[:, t], pL) - rLL[:, t])
                  + _mv(PFT, _mv(RLF[:, t], pF) - rLF[:, t]) + _mv(FT, _mv(ZL, beta) + zL))
        ZF_new = QF[:, t] + PLT @ RFL[:, t] @ PL + PFT @ RFF[:, t] @ PF + FT @ ZF @ F
        zF_new = (qF[:, t] + _mv(PLT, _mv(RFL[:, t], pL) - rFL[:, t])
                  + _mv(PFT, _mv(RFF[:, t], pF) - rFF[:, t]) + _mv(FT, _mv(ZF, beta) + zF))
        ZL = 0.5 * (ZL_new + np.swapaxes(ZL_new, 1, 2))
        zL = zL_new
        ZF = 0.5 * (ZF_new + np.swapaxes(ZF_new, 1, 2))
        zF = zF_new

        PLs[:, t] = PL
        pLs[:, t] = pL
        PFs[:, t] = PF
        pFs[:, t] = pF

    for arr in (PLs, pLs, PFs, pFs):
        failed |= ~np.isfinite(arr).all(axis=tuple(range(1, arr.ndim)))
    if np.any(maxcond[~failed] > COND_WARN_THRESHOLD):
        warnings.warn(
            f"ill-conditioned stage system (cond ~ {maxcond[~failed].max():.2e}); "
            "check convexification margins", RuntimeWarning, stacklevel=2,
        )
    if leader == 1:
        return PLs, pLs, PFs, pFs, failed, maxcond
    return PFs, pFs, PLs, pLs, failed, maxcond


def apply(strategy: AffineStrategy, model, x1: Array) -> tuple[Array, Array, Array]:
    """Roll out u_t = -P_t x_t - p_t from x1 under a DynamicsModel or an
    LQGame's linear dynamics. Returns (states, controls1, controls2)."""
    T = strategy.T
    x1 = np.asarray(x1, dtype=float)
    n = x1.shape[0]
    xs = np.empty((T, n))
    u1s = np.empty((T, strategy.P1.shape[1]))
    u2s = np.empty((T, strategy.P2.shape[1]))
    xs[0] = x1
    linear = isinstance(model, LQGame)
    for t in range(T):
        u1s[t] = -strategy.P1[t] @ xs[t] - strategy.p1[t]
        u2s[t] = -strategy.P2[t] @ xs[t] - strategy.p2[t]
        if t + 1 < T:
            if linear:
                xs[t + 1] = model.A[t] @ xs[t] + model.B1[t] @ u1s[t] + model.B2[t] @ u2s[t]
            else:
                xs[t + 1] = model.step(xs[t], u1s[t], u2s[t])
    return xs, u1s, u2s


def _min_eig_batch(M: Array, exact_below: float = 0.0) -> Array:
    """Minimum eigenvalue per timestep of a stack of symmetric matrices.

    Rows whose Gershgorin bound already clears ``exact_below`` keep the bound;
    callers that only act on eigenvalues below that threshold still see exact
    values wherever it matters. 2x2 rows use the closed form instead of LAPACK.
    """
    if M.shape[1] == 0:
        return np.full(M.shape[0], np.inf)
    diag = np.diagonal(M, axis1=1, axis2=2)
    if M.shape[1] == 1:
        return diag[:, 0].copy()
    offsum = np.abs(M).sum(axis=2) - np.abs(diag)
    gersh = (diag - offsum).min(axis=1)
    out = gersh.copy()
    need = gersh < exact_below
    if np.any(need):
        if M.shape[1] == 2:
            a = M[need, 0, 0]
            c = M[need, 1, 1]
            b = M[need, 1, 0]
            out[need] = 0.5 * (a + c) - np.hypot(0.5 * (a - c), b)
        else:
            out[need] = np.linalg.eigvalsh(M[need])[:, 0]
    return out


def convexify_batches(
    cost1: QuadraticBatch, cost2: QuadraticBatch, r_margin: float = 1e-3
) -> tuple[QuadraticBatch, QuadraticBatch, Array]:
    """Per-timestep diagonal shifts making each agent's state Hessian PSD and
    own-control Hessian PD with the given margin; all blocks of an agent's
    stage model share one shift. Returns shifted copies and the [T,2] shifts."""
    T = cost1.Q.shape[0]
    nus = np.zeros((T, 2))
    out = []
    for k, batch in enumerate((cost1, cost2)):
        R_own = batch.R1 if batch.agent == 1 else batch.R2
        nu = np.maximum(0.0, np.maximum(
            -_min_eig_batch(batch.Q),
            r_margin - _min_eig_batch(R_own, exact_below=r_margin)))
        nus[:, k] = nu
        if np.any(nu > 0):
            n = batch.Q.shape[1]
            m1 = batch.R1.shape[1]
            m2 = batch.R2.shape[1]
            shifted = QuadraticBatch(
                agent=batch.agent,
                c=batch.c,
                q=batch.q,
                Q=batch.Q + nu[:, None, None] * np.eye(n),
                r1=batch.r1,
                R1=batch.R1 + nu[:, None, None] * np.eye(m1),
                r2=batch.r2,
                R2=batch.R2 + nu[:, None, None] * np.eye(m2),
            )
            out.append(shifted)
        else:
            out.append(batch)
    return out[0], out[1], nus


def _build_lq_about(game, xs: Array, u1s: Array, u2s: Array, r_margin: float = 1e-3) -> LQGame:
    """Linearize dynamics and quadraticize costs about a trajectory, then
    convexify. Works for any object with model/cost1/cost2/leader fields."""
    A, B1, B2 = game.model.linearize_trajectory(xs, u1s, u2s)
    b1 = game.cost1.quadraticize_batch(xs, u1s, u2s)
    b2 = game.cost2.quadraticize_batch(xs, u1s, u2s)
    b1, b2, _ = convexify_batches(b1, b2, r_margin)
    return LQGame(A=A, B1=B1, B2=B2, cost1=b1, cost2=b2, leader=game.leader)


def verify_stackelberg(
    game,
    xs: Array,
    u1s: Array,
    u2s: Array,
    budget: float = 0.1,
    n_samples: int = 100,
    n_timesteps: int = 10,
    seed: int = 0,
) -> dict:
    """Check a trajectory for feedback Stackelberg consistency by sampled
    single-stage control perturbations.

    The game's LQ model about the trajectory is re-solved for feedback gains.
    A follower perturbation applies a random control offset of the given norm
    at one stage, after which both agents track the supplied trajectory with
    those gains. A leader perturbation additionally triggers the follower's
    same-stage LQ reaction. Reports the minimum objective change observed;
    values below zero mean the perturbation improved that agent's objective.

    Accepts an LQGame (its linear dynamics are rolled out directly) or a
    nonlinear game definition with model/cost1/cost2/leader fields.
    """
    xs = np.asarray(xs, dtype=float)
    u1s = np.asarray(u1s, dtype=float)
    u2s = np.asarray(u2s, dtype=float)
    T = xs.shape[0]
    rng = np.random.default_rng(seed)

    if isinstance(game, LQGame):
        lq = game
        dynamics = lq

        def traj_costs(xs_, u1s_, u2s_):
            out = []
            for batch in (lq.cost1, lq.cost2):
                val = (
                    batch.c.sum()
                    + np.einsum("ti,ti->", batch.q, xs_)
                    + 0.5 * np.einsum("ti,tij,tj->", xs_, batch.Q, xs_)
                    + np.einsum("ti,ti->", batch.r1, u1s_)
                    + 0.5 * np.einsum("ti,tij,tj->", u1s_, batch.R1, u1s_)
                    + np.einsum("ti,ti->", batch.r2, u2s_)
                    + 0.5 * np.einsum("ti,tij,tj->", u2s_, batch.R2, u2s_)
                )
                out.append(float(val))
            return out
    else:
        lq = _build_lq_about(game, xs, u1s, u2s)
        dynamics = game.model

        def traj_costs(xs_, u1s_, u2s_):
            return [
                float(game.cost1.evaluate_batch(xs_, u1s_, u2s_).sum()),
                float(game.cost2.evaluate_batch(xs_, u1s_, u2s_).sum()),
            ]

    strategy, details = solve(lq, return_details=True, validate=False)
    leader = lq.leader
    m1, m2 = u1s.shape[1], u2s.shape[1]
    mF = m2 if leader == 1 else m1
    mL = m1 if leader == 1 else m2

    def rollout_with_offset(t0: int, du1_0: Array, du2_0: Array):
        """Track the reference with the LQ gains; inject control offsets at t0."""
        xs_ = xs.copy()
        u1_ = u1s.copy()
        u2_ = u2s.copy()
        x = xs[0].copy()
        for t in range(T):
            dx = x - xs[t]
            u1_[t] = u1s[t] - strategy.P1[t] @ dx
            u2_[t] = u2s[t] - strategy.P2[t] @ dx
            if t == t0:
                u1_[t] = u1_[t] + du1_0
                u2_[t] = u2_[t] + du2_0
            xs_[t] = x
            if t + 1 < T:
                if isinstance(dynamics, LQGame):
                    x = dynamics.A[t] @ x + dynamics.B1[t] @ u1_[t] + dynamics.B2[t] @ u2_[t]
                else:
                    x = dynamics.step(x, u1_[t], u2_[t])
        return xs_, u1_, u2_

    base = traj_costs(*rollout_with_offset(-1, np.zeros(m1), np.zeros(m2)))
    if n_timesteps >= T:
        stages = np.arange(T)
    else:
        stages = np.sort(rng.choice(T, size=n_timesteps, replace=False))

    def sample_direction(m: int) -> Array:
        v = rng.normal(size=m)
        nrm = np.linalg.norm(v)
        return v / nrm if nrm > 0 else v

    min_follower = np.inf
    min_leader = np.inf
    worst = {"follower": None, "leader": None}
    for t0 in stages:
        for _ in range(max(1, n_samples // max(1, len(stages)))):
            duF = budget * sample_direction(mF)
            if leader == 1:
                xs_, u1_, u2_ = rollout_with_offset(t0, np.zeros(m1), duF)
                changeF = traj_costs(xs_, u1_, u2_)[1] - base[1]
            else:
                xs_, u1_, u2_ = rollout_with_offset(t0, duF, np.zeros(m2))
                changeF = traj_costs(xs_, u1_, u2_)[0] - base[0]
            if changeF < min_follower:
                min_follower = changeF
                worst["follower"] = (int(t0), duF.copy())

            duL = budget * sample_direction(mL)
            duF_react = -details.Ku[t0] @ duL
            if leader == 1:
                xs_, u1_, u2_ = rollout_with_offset(t0, duL, duF_react)
                changeL = traj_costs(xs_, u1_, u2_)[0] - base[0]
            else:
                xs_, u1_, u2_ = rollout_with_offset(t0, duF_react, duL)
                changeL = traj_costs(xs_, u1_, u2_)[1] - base[1]
            if changeL < min_leader:
                min_leader = changeL
                worst["leader"] = (int(t0), duL.copy())

    return {
        "min_follower_change": float(min_follower),
        "min_leader_change": float(min_leader),
        "stages_checked": [int(s) for s in stages],
        "budget": float(budget),
        "worst_follower_stage": None if worst["follower"] is None else worst["follower"][0],
        "worst_leader_stage": None if worst["leader"] is None else worst["leader"][0],
        "baseline_costs": base,
    }
