"""Stochastic propagation of trajectories for the three unravelings.

The deterministic (drift) part of each unraveling is integrated over a
coarse step dt with either fixed classical RK4 or an adaptive embedded
Cash-Karp RK4(5); the stochastic part is added to first order: quantum
state diffusion adds complex Wiener increments, the jump flavors decide at
most one jump per coarse step from probabilities evaluated at the step
start.  Every step ends renormalized.

All stepping code operates on (B, N) amplitude buffers so a whole ensemble
advances in lockstep through exactly the arithmetic a single trajectory
(B = 1) would perform.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .hilbert import StateVector, row_dot, row_norm, row_norm2
from .operators import OperatorExpr, _apply_node

__all__ = [
    "Unraveling",
    "ModelOperators",
    "NoiseSource",
    "StepStats",
    "IntegratorConfig",
    "drift",
    "rk4_step",
    "rkck_adaptive",
    "QsdStepper",
    "JumpStepper",
    "make_stepper",
    "qsd_step",
    "jump_step",
]

NORM_COLLAPSE = 1e-12
P_WARN = 0.1
P_ERROR = 0.5
P_NEGATIVE = -1e-12


class Unraveling(Enum):
    QSD = "qsd"
    JUMP = "jump"
    ORTHO_JUMP = "orthojump"

    @property
    def lam(self):
        """Jump-rate parameter: 0 for plain jumps, 1 for orthogonal jumps."""
        if self is Unraveling.JUMP:
            return 0
        if self is Unraveling.ORTHO_JUMP:
            return 1
        return None


class ModelOperators:
    """Hamiltonian (may be None) and Lindblad operators, with cached adjoints."""

    def __init__(self, hamiltonian, lindblads=()):
        if hamiltonian is not None and not isinstance(hamiltonian, OperatorExpr):
            raise TypeError("hamiltonian must be an operator expression or None")
        self.hamiltonian = hamiltonian
        self.lindblads = tuple(lindblads)
        for l in self.lindblads:
            if not isinstance(l, OperatorExpr):
                raise TypeError("lindblads must be operator expressions")
        self.lindblads_hc = tuple(l.hc() for l in self.lindblads)
        self.lindblad_sq = tuple(lhc * l for lhc, l in zip(self.lindblads_hc, self.lindblads))

    @property
    def n_lindblads(self) -> int:
        return len(self.lindblads)


class NoiseSource:
    """Reproducible per-trajectory random stream.

    Streams are derived from (seed, stream index) so trajectories can be
    generated in any order, or in lockstep, with identical results.
    """

    def __init__(self, seed: int, stream: int = 0):
        ss = np.random.SeedSequence(entropy=seed, spawn_key=(stream,))
        self._rng = np.random.Generator(np.random.PCG64(ss))

    def wiener(self, nsteps: int, m: int, dt: float) -> np.ndarray:
        """(nsteps, m) complex increments with M dxi = 0, M dxi_i* dxi_j = delta_ij dt."""
        g = self._rng.standard_normal(size=(nsteps, m, 2))
        return (g[..., 0] + 1j * g[..., 1]) * np.sqrt(0.5 * dt)

    def uniforms(self, nsteps: int) -> np.ndarray:
        return self._rng.random(nsteps)


@dataclass
class StepStats:
    substeps: int = 0
    jumps: int = 0

    def __iadd__(self, other):
        self.substeps += other.substeps
        self.jumps += other.jumps
        return self


# ---------------------------------------------------------------------------
# Drift


def _drift2d(y, freedoms, model, unraveling, t):
    """Deterministic derivative of the unraveling on a (B, N) buffer.

    Expectations are evaluated once per call on the input and divided by the
    squared norm, so slightly unnormalized intermediate states (as produced
    inside RK stages) still see the correct nonlinear coefficients.
    """
    out = np.zeros_like(y)
    n2 = row_norm2(y)
    n2 = np.where(n2 > 0.0, n2, 1.0)
    if model.hamiltonian is not None:
        work = y.copy()
        _apply_node(model.hamiltonian, work, freedoms, t)
        out += -1j * work
    for l_expr, lhc_expr in zip(model.lindblads, model.lindblads_hc):
        ly = y.copy()
        _apply_node(l_expr, ly, freedoms, t)
        ll = row_norm2(ly) / n2  # <L+L>
        if unraveling is not Unraveling.JUMP:
            lexp = row_dot(y, ly) / n2  # <L>
        ldly = ly.copy()
        _apply_node(lhc_expr, ldly, freedoms, t)
        if unraveling is Unraveling.QSD:
            out += np.conj(lexp)[:, None] * ly
            out -= 0.5 * ldly
            out -= (0.5 * np.abs(lexp) ** 2)[:, None] * y
        elif unraveling is Unraveling.JUMP:
            out -= 0.5 * ldly
            out += (0.5 * ll)[:, None] * y
        else:  # orthogonal jumps
            out += np.conj(lexp)[:, None] * ly
            out -= 0.5 * ldly
            out += (0.5 * ll - np.abs(lexp) ** 2)[:, None] * y
    return out


def drift(psi: StateVector, model: ModelOperators, unraveling: Unraveling,
          t: float = 0.0) -> StateVector:
    """Deterministic part of d|psi>/dt for the given unraveling."""
    out = psi.copy()
    out.amps = _drift2d(psi.as2d(), psi.freedoms, model, unraveling, t).reshape(-1)
    return out


# ---------------------------------------------------------------------------
# Deterministic integrators.  `f(y, t)` maps a (B, N) buffer to its
# derivative; both integrators return fresh buffers.


def rk4_step(f, y, t, dt):
    """One classical fixed RK4 step."""
    half = 0.5 * dt
    k1 = f(y, t)
    k2 = f(y + half * k1, t + half)
    k3 = f(y + half * k2, t + half)
    k4 = f(y + dt * k3, t + dt)
    return y + (dt / 6.0) * (k1 + 2.0 * (k2 + k3) + k4)


# Cash-Karp embedded RK4(5) tableau
_CK_A = (0.0, 0.2, 0.3, 0.6, 1.0, 0.875)
_CK_B = (
    (),
    (0.2,),
    (3.0 / 40.0, 9.0 / 40.0),
    (0.3, -0.9, 1.2),
    (-11.0 / 54.0, 2.5, -70.0 / 27.0, 35.0 / 27.0),
    (1631.0 / 55296.0, 175.0 / 512.0, 575.0 / 13824.0, 44275.0 / 110592.0, 253.0 / 4096.0),
)
_CK_C5 = (37.0 / 378.0, 0.0, 250.0 / 621.0, 125.0 / 594.0, 0.0, 512.0 / 1771.0)
_CK_C4 = (2825.0 / 27648.0, 0.0, 18575.0 / 48384.0, 13525.0 / 55296.0,
          277.0 / 14336.0, 0.25)
_CK_DC = tuple(c5 - c4 for c5, c4 in zip(_CK_C5, _CK_C4))

_SAFETY = 0.9
_GROW_MAX = 5.0
_SHRINK_MIN = 0.1
_UNDERFLOW = 1e-12


def _rkck_substep(f, y, t, h):
    ks = [f(y, t)]
    for i in range(1, 6):
        acc = _CK_B[i][0] * ks[0]
        for b, k in zip(_CK_B[i][1:], ks[1:]):
            acc = acc + b * k
        ks.append(f(y + h * acc, t + _CK_A[i] * h))
    y5 = y + h * (_CK_C5[0] * ks[0] + _CK_C5[2] * ks[2] + _CK_C5[3] * ks[3]
                  + _CK_C5[5] * ks[5])
    err = h * (_CK_DC[0] * ks[0] + _CK_DC[2] * ks[2] + _CK_DC[3] * ks[3]
               + _CK_DC[4] * ks[4] + _CK_DC[5] * ks[5])
    return y5, err


def rkck_adaptive(f, y, t, dt, eps, h_start=None):
    """Advance y from t to exactly t+dt by accepted Cash-Karp 4(5) substeps.

    The per-amplitude error estimate must satisfy |err| <= eps * (|y| + 1e-10).
    Returns (y_new, accepted substep count, suggested next substep size).
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    if eps <= 0:
        raise ValueError("eps must be positive")
    h = min(abs(h_start), dt) if h_start else dt
    done = 0.0
    nacc = 0
    while True:
        remaining = dt - done
        if remaining <= dt * 1e-15:
            break
        h = min(h, remaining)
        if h < dt * _UNDERFLOW:
            raise RuntimeError("adaptive step underflow; the problem looks stiff")
        y5, err = _rkck_substep(f, y, t + done, h)
        scale = np.abs(y) + 1e-10
        ratio = float((np.abs(err) / scale).max()) / eps
        if not math.isfinite(ratio):
            # overflow inside the trial substep: treat as a hard rejection
            h = h * _SHRINK_MIN
            continue
        if ratio <= 1.0:
            y = y5
            done += h
            nacc += 1
            grow = _GROW_MAX if ratio == 0.0 else min(_SAFETY * ratio ** -0.2, _GROW_MAX)
            h = h * grow
        else:
            h = h * max(_SAFETY * ratio ** -0.25, _SHRINK_MIN)
    return y, nacc, h


@dataclass(frozen=True)
class IntegratorConfig:
    """Deterministic-part integrator: fixed 'rk4' or 'adaptive' Cash-Karp."""

    kind: str = "rk4"
    eps: float = 1e-6

    def __post_init__(self):
        if self.kind not in ("rk4", "adaptive"):
            raise ValueError("integrator kind must be 'rk4' or 'adaptive'")
        if self.eps <= 0:
            raise ValueError("integrator eps must be positive")


# ---------------------------------------------------------------------------
# Steppers


def _normalize_rows(y):
    n = row_norm(y)
    if np.any(n < NORM_COLLAPSE):
        raise RuntimeError("state norm collapsed during a step")
    y /= n[:, None]
    return y


class _StepperBase:
    """Owns the integrator workspace; noise is handed in per step."""

    def __init__(self, model: ModelOperators, unraveling: Unraveling, dt: float,
                 integrator: IntegratorConfig = IntegratorConfig()):
        if dt <= 0:
            raise ValueError("dt must be positive")
        self.model = model
        self.unraveling = unraveling
        self.dt = dt
        self.integrator = integrator
        self._h = None  # adaptive substep carried between coarse steps
        self.last_jump_rows = np.zeros(0, dtype=np.intp)  # rows that jumped

    def _advance_det(self, y, freedoms, t):
        f = lambda v, s: _drift2d(v, freedoms, self.model, self.unraveling, s)
        if self.integrator.kind == "rk4":
            return rk4_step(f, y, t, self.dt), 1
        y, nacc, self._h = rkck_adaptive(f, y, t, self.dt, self.integrator.eps, self._h)
        return y, nacc


class QsdStepper(_StepperBase):
    """Quantum state diffusion: drift advance plus Wiener noise, renormalized."""

    def __init__(self, model, dt, integrator=IntegratorConfig()):
        super().__init__(model, Unraveling.QSD, dt, integrator)

    def step(self, y, freedoms, t, dxi):
        """dxi: (B, m) complex Wiener increments for this coarse step."""
        y, nsub = self._advance_det(y, freedoms, t)
        n2 = row_norm2(y)
        n2 = np.where(n2 > 0.0, n2, 1.0)
        for j, l_expr in enumerate(self.model.lindblads):
            ly = y.copy()
            _apply_node(l_expr, ly, freedoms, t + self.dt)
            lexp = row_dot(y, ly) / n2
            y = y + (ly - lexp[:, None] * y) * dxi[:, j][:, None]
        _normalize_rows(y)
        return y, StepStats(substeps=nsub)


class JumpStepper(_StepperBase):
    """Jump unravelings: lam=0 plain quantum jumps, lam=1 orthogonal jumps."""

    def __init__(self, model, dt, lam=0, integrator=IntegratorConfig()):
        if lam not in (0, 1):
            raise ValueError("lam must be 0 or 1")
        unr = Unraveling.JUMP if lam == 0 else Unraveling.ORTHO_JUMP
        super().__init__(model, unr, dt, integrator)
        self.lam = lam
        self._warned = False

    def _jump_probabilities(self, y, freedoms, t):
        m = self.model.n_lindblads
        b = y.shape[0]
        probs = np.zeros((b, m))
        lys = []
        lexps = []
        n2 = row_norm2(y)
        n2 = np.where(n2 > 0.0, n2, 1.0)
        for j, l_expr in enumerate(self.model.lindblads):
            ly = y.copy()
            _apply_node(l_expr, ly, freedoms, t)
            lys.append(ly)
            ll = row_norm2(ly) / n2
            if self.lam:
                lexp = row_dot(y, ly) / n2
                p = (ll - np.abs(lexp) ** 2) * self.dt
            else:
                lexp = None
                p = ll * self.dt
            lexps.append(lexp)
            if np.any(p < P_NEGATIVE):
                raise RuntimeError("negative jump probability; expectation evaluation is broken")
            probs[:, j] = np.maximum(p, 0.0)
        return probs, lys, lexps

    def step(self, y, freedoms, t, u):
        """u: (B,) uniforms deciding whether and which jump fires."""
        probs, lys, lexps = self._jump_probabilities(y, freedoms, t)
        ptot = probs.sum(axis=1)
        pmax = float(ptot.max()) if ptot.size else 0.0
        if pmax > P_ERROR:
            raise RuntimeError(
                f"total jump probability {pmax:.3g} exceeds {P_ERROR}; reduce dt")
        if pmax > P_WARN and not self._warned:
            warnings.warn(f"total jump probability {pmax:.3g} exceeds {P_WARN}; "
                          "consider a smaller dt", RuntimeWarning, stacklevel=2)
            self._warned = True
        jump_rows = np.nonzero(u < ptot)[0]
        self.last_jump_rows = jump_rows

        out, nsub = self._advance_det(y, freedoms, t)
        _normalize_rows(out)

        if jump_rows.size:
            cum = np.cumsum(probs, axis=1)
            for b in jump_rows:
                j = int(np.searchsorted(cum[b], u[b], side="right"))
                j = min(j, self.model.n_lindblads - 1)
                row = lys[j][b:b + 1].copy()
                if self.lam:
                    row -= lexps[j][b] * y[b:b + 1]
                nrm = row_norm(row)
                if nrm[0] < NORM_COLLAPSE:
                    raise RuntimeError("jump produced a zero-norm state")
                out[b:b + 1] = row / nrm[:, None]
        return out, StepStats(substeps=nsub, jumps=int(jump_rows.size))


def make_stepper(model: ModelOperators, unraveling: Unraveling, dt: float,
                 integrator: IntegratorConfig = IntegratorConfig()):
    if unraveling is Unraveling.QSD:
        return QsdStepper(model, dt, integrator)
    return JumpStepper(model, dt, lam=unraveling.lam, integrator=integrator)


# -- single-state conveniences ------------------------------------------------


def qsd_step(psi: StateVector, model: ModelOperators, dt: float, noise: NoiseSource,
             t: float = 0.0, integrator: IntegratorConfig = IntegratorConfig()):
    """Advance one state by one QSD coarse step; returns (psi', stats)."""
    stepper = QsdStepper(model, dt, integrator)
    dxi = noise.wiener(1, model.n_lindblads, dt)
    y, stats = stepper.step(psi.as2d(), psi.freedoms, t, dxi)
    out = psi.copy()
    out.amps = np.ascontiguousarray(y.reshape(-1))
    return out, stats


def jump_step(psi: StateVector, model: ModelOperators, dt: float, noise: NoiseSource,
              lam: int = 0, t: float = 0.0,
              integrator: IntegratorConfig = IntegratorConfig()):
    """Advance one state by one jump coarse step; returns (psi', stats)."""
    stepper = JumpStepper(model, dt, lam=lam, integrator=integrator)
    u = noise.uniforms(1)
    y, stats = stepper.step(psi.as2d(), psi.freedoms, t, u)
    out = psi.copy()
    out.amps = np.ascontiguousarray(y.reshape(-1))
    return out, stats
