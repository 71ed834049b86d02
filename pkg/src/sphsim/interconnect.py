"""Passive loads, the phase PI controller, and closed-loop assembly.

Three port terminations are supported for the oscillator plant:

  * StaticLoad: memoryless negative feedback u = -K(y) y with a symmetric
    gain matrix whose spectrum is assumed to lie strictly between two
    positive bounds.
  * LtiLoad: a single-input single-output linear time-invariant block
    realized from a transfer function, interconnected as u = -(load
    response to y).
  * OpenLoopSignal: an exogenous input u(t), including the zero signal.

A PhasePIController reshapes the plant's skew coupling matrix so that the
rotation rate is driven by the wrapped phase error; its integrator state is
appended to the closed-loop state vector.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .core import (
    Constancy,
    SingularPHSystem,
    Variant,
    input_gain_value,
    output_map,
    vector_field,
)


class LoadBoundsWarning(UserWarning):
    """A static load gain left its declared eigenvalue interval."""


def wrap_angle(a: float) -> float:
    """Wrap an angle to the interval (-pi, pi]."""
    return math.pi - (math.pi - a) % (2.0 * math.pi)


@dataclass(frozen=True)
class StaticLoad:
    """Memoryless passive feedback u = -K(y) y.

    `gain_fn` maps an output vector to a symmetric m x m gain matrix whose
    eigenvalues are assumed to stay strictly inside (gain_lower, gain_upper).
    `gain_const` is set when the gain does not depend on y, letting inner
    loops skip the callback.
    """

    m: int
    gain_fn: Callable[[np.ndarray], np.ndarray]
    gain_lower: float
    gain_upper: float
    gain_const: np.ndarray | None = None

    def __post_init__(self) -> None:
        if self.m < 1:
            raise ValueError(f"output dimension must be positive, got {self.m}")
        if not (0.0 < self.gain_lower < self.gain_upper):
            raise ValueError(
                f"need 0 < gain_lower < gain_upper, got "
                f"({self.gain_lower}, {self.gain_upper})"
            )

    @classmethod
    def from_gain(
        cls,
        k: float,
        m: int = 1,
        gain_lower: float | None = None,
        gain_upper: float | None = None,
    ) -> "StaticLoad":
        """Constant scalar gain k acting on every channel."""
        if k <= 0.0:
            raise ValueError(f"gain must be positive, got {k}")
        mat = k * np.eye(m)
        mat.setflags(write=False)
        return cls(
            m=m,
            gain_fn=lambda y, _k=mat: _k,
            gain_lower=0.5 * k if gain_lower is None else gain_lower,
            gain_upper=2.0 * k if gain_upper is None else gain_upper,
            gain_const=mat,
        )

    @classmethod
    def from_matrix(
        cls,
        k: np.ndarray,
        gain_lower: float | None = None,
        gain_upper: float | None = None,
    ) -> "StaticLoad":
        """Constant symmetric gain matrix."""
        k = np.asarray(k, dtype=float)
        if k.ndim != 2 or k.shape[0] != k.shape[1]:
            raise ValueError(f"gain matrix must be square, got shape {k.shape}")
        if np.linalg.norm(k - k.T) > 1e-12 * max(np.linalg.norm(k), 1.0):
            raise ValueError("gain matrix must be symmetric")
        eigs = np.linalg.eigvalsh(k)
        if eigs[0] <= 0.0:
            raise ValueError(f"gain matrix must be positive definite, got eig {eigs[0]:.3e}")
        k = 0.5 * (k + k.T)
        k.setflags(write=False)
        return cls(
            m=k.shape[0],
            gain_fn=lambda y, _k=k: _k,
            gain_lower=0.5 * float(eigs[0]) if gain_lower is None else gain_lower,
            gain_upper=2.0 * float(eigs[-1]) if gain_upper is None else gain_upper,
            gain_const=k,
        )


def static_load_eval(y: np.ndarray, load: StaticLoad) -> np.ndarray:
    """Evaluate u = -K(y) y, warning if K(y) leaves its declared bounds.

    The bounds check is advisory: a violation raises LoadBoundsWarning and
    the evaluation proceeds.
    """
    y = np.asarray(y, dtype=float)
    if y.shape != (load.m,):
        raise ValueError(f"output must have shape ({load.m},), got {y.shape}")
    k = np.asarray(load.gain_fn(y), dtype=float)
    if k.shape != (load.m, load.m):
        raise ValueError(f"gain matrix must be {load.m}x{load.m}, got {k.shape}")
    if np.linalg.norm(k - k.T) > 1e-12 * max(np.linalg.norm(k), 1.0):
        warnings.warn("static load gain is not symmetric", LoadBoundsWarning)
    else:
        eigs = np.linalg.eigvalsh(0.5 * (k + k.T))
        if eigs[0] <= load.gain_lower or eigs[-1] >= load.gain_upper:
            warnings.warn(
                f"static load gain spectrum [{eigs[0]:.6g}, {eigs[-1]:.6g}] left "
                f"the declared open interval "
                f"({load.gain_lower:.6g}, {load.gain_upper:.6g})",
                LoadBoundsWarning,
            )
    return -(k @ y)


@dataclass(frozen=True)
class LtiLoad:
    """SISO LTI load in controllable canonical form.

    `num` and `den` hold transfer-function coefficients in descending powers
    of s with `den` monic.  The realization satisfies

        zdot = a z + b y,    load output = c z + d y

    and the interconnection with the plant is negative feedback,
    u = -(c z + d y).
    """

    num: tuple[float, ...]
    den: tuple[float, ...]
    a: np.ndarray
    b: np.ndarray
    c: np.ndarray
    d: float

    @property
    def state_dim(self) -> int:
        return self.a.shape[0]

    def tf_value(self, s: complex) -> complex:
        """Transfer function num(s)/den(s) evaluated by direct rational evaluation."""
        return complex(np.polyval(self.num, s) / np.polyval(self.den, s))

    def realization_value(self, s: complex) -> complex:
        """c (sI - a)^-1 b + d at a complex frequency."""
        q = self.state_dim
        if q == 0:
            return complex(self.d)
        resolvent = np.linalg.solve(s * np.eye(q) - self.a, self.b.astype(complex))
        return complex(self.c @ resolvent + self.d)

    def positive_real_margin(self, omegas: np.ndarray | None = None) -> float:
        """Minimum of Re(tf(j w)) over a frequency grid (default log grid 1e-3..1e3)."""
        if omegas is None:
            omegas = np.logspace(-3.0, 3.0, 301)
        return min(self.tf_value(1j * float(w)).real for w in omegas)


def realize_tf(num, den) -> LtiLoad:
    """Realize num(s)/den(s) in controllable canonical form.

    The denominator is normalized to monic and the direct feedthrough is
    split off when the fraction is not strictly proper.  Improper fractions
    (effective numerator degree above denominator degree) are rejected.
    """
    num = np.atleast_1d(np.asarray(num, dtype=float))
    den = np.atleast_1d(np.asarray(den, dtype=float))
    if den.size == 0 or den[0] == 0.0:
        raise ValueError("denominator must have a nonzero leading coefficient")
    # strip leading zeros so the degree test sees the effective numerator
    nz = np.nonzero(num)[0]
    num = num[nz[0]:] if nz.size else np.zeros(1)
    if num.size > den.size:
        raise ValueError(
            f"improper transfer function: numerator degree {num.size - 1} "
            f"exceeds denominator degree {den.size - 1}"
        )
    num = num / den[0]
    den = den / den[0]
    q = den.size - 1
    if q == 0:
        load = LtiLoad(
            num=tuple(num.tolist()),
            den=(1.0,),
            a=np.zeros((0, 0)),
            b=np.zeros(0),
            c=np.zeros(0),
            d=float(num[0]),
        )
    else:
        padded = np.concatenate([np.zeros(den.size - num.size), num])
        d = float(padded[0])
        strictly_proper = padded[1:] - d * den[1:]
        a = np.zeros((q, q))
        if q > 1:
            a[:-1, 1:] = np.eye(q - 1)
        a[-1, :] = -den[1:][::-1]
        b = np.zeros(q)
        b[-1] = 1.0
        c = strictly_proper[::-1].copy()
        for arr in (a, b, c):
            arr.setflags(write=False)
        load = LtiLoad(
            num=tuple(num.tolist()),
            den=tuple(den.tolist()),
            a=a,
            b=b,
            c=c,
            d=d,
        )
    _verify_realization(load)
    return load


def _verify_realization(load: LtiLoad, n_points: int = 20, rtol: float = 1e-8) -> None:
    """Check the realization against direct rational evaluation."""
    rng = np.random.default_rng(1234)
    checked = 0
    while checked < n_points:
        s = complex(rng.uniform(-3.0, 3.0), rng.uniform(-3.0, 3.0))
        if abs(np.polyval(load.den, s)) < 1e-3:
            continue
        want = load.tf_value(s)
        got = load.realization_value(s)
        if abs(got - want) > rtol * max(abs(want), 1.0):
            raise AssertionError(
                f"realization mismatch at s={s}: {got} vs {want}"
            )
        checked += 1


def lti_load_step_derivative(
    z: np.ndarray, y: np.ndarray | float, load: LtiLoad
) -> tuple[np.ndarray, np.ndarray]:
    """Load state derivative and plant input for one evaluation.

    Returns (zdot, u) with zdot = a z + b y and u = -(c z + d y); the minus
    sign is the negative-feedback interconnection convention.
    """
    z = np.asarray(z, dtype=float)
    if z.shape != (load.state_dim,):
        raise ValueError(f"load state must have shape ({load.state_dim},), got {z.shape}")
    y_s = float(np.asarray(y, dtype=float).reshape(-1)[0]) if np.ndim(y) else float(y)
    zdot = load.a @ z + load.b * y_s
    u = -(float(load.c @ z) + load.d * y_s)
    return zdot, np.array([u])


@dataclass
class PhasePIController:
    """PI control of the oscillator phase through the skew coupling matrix.

    The rotation rate is omega0 + kp * e + ki * xi where e is the phase error
    wrapped to (-pi, pi] and xi integrates e.  `xi` stores the integrator
    value used when no explicit integrator state is passed.
    """

    omega0: float
    kp: float
    ki: float
    phi_ref: float
    xi: float = 0.0


def phase_pi_jbar(
    x: np.ndarray, ctrl: PhasePIController, xi: float | None = None
) -> tuple[np.ndarray, float]:
    """Skew coupling matrix and wrapped phase error for the phase PI law.

    The off-diagonal magnitude is omega0 + kp * e + ki * xi.  States too
    close to the origin are rejected because the phase is undefined there.
    """
    x = np.asarray(x, dtype=float)
    if x.shape != (2,):
        raise ValueError(f"phase control needs a planar state, got shape {x.shape}")
    if math.hypot(x[0], x[1]) < 1e-12:
        raise ValueError("phase undefined at origin")
    if xi is None:
        xi = ctrl.xi
    e = wrap_angle(ctrl.phi_ref - math.atan2(x[1], x[0]))
    rate = ctrl.omega0 + ctrl.kp * e + ctrl.ki * xi
    j = np.array([[0.0, -rate], [rate, 0.0]])
    return j, e


def make_phase_pi_coupling(
    ctrl: PhasePIController,
) -> Callable[[np.ndarray, float, float | None], np.ndarray]:
    """Coupling callback for SingularPHSystem driven by a phase PI controller.

    The auxiliary argument carries the integrator state; None falls back to
    the controller's stored value.
    """

    def coupling(x: np.ndarray, t: float, aux: float | None) -> np.ndarray:
        return phase_pi_jbar(x, ctrl, aux)[0]

    return coupling


@dataclass(frozen=True)
class OpenLoopSignal:
    """Exogenous input signal; `fn` of None means identically zero."""

    m: int
    fn: Callable[[float], np.ndarray] | None = None

    def __post_init__(self) -> None:
        if self.m < 1:
            raise ValueError(f"input dimension must be positive, got {self.m}")

    @property
    def is_zero(self) -> bool:
        return self.fn is None

    def eval(self, t: float) -> np.ndarray:
        if self.fn is None:
            return np.zeros(self.m)
        u = np.asarray(self.fn(t), dtype=float).reshape(self.m)
        return u

    @classmethod
    def zero(cls, m: int = 1) -> "OpenLoopSignal":
        return cls(m=m)


@dataclass(frozen=True)
class ClosedLoopSystem:
    """Plant plus termination, with a flat total state x (+) z (+) xi.

    `load` may be a StaticLoad, an LtiLoad, an OpenLoopSignal, or None (zero
    input).  When a PhasePIController is attached the plant's coupling
    callback must consume the integrator state through its auxiliary
    argument (see make_phase_pi_coupling) and the plant must be planar.
    """

    plant: SingularPHSystem
    load: StaticLoad | LtiLoad | OpenLoopSignal | None = None
    controller: PhasePIController | None = None

    def __post_init__(self) -> None:
        if isinstance(self.load, StaticLoad) and self.load.m != self.plant.m:
            raise ValueError(
                f"static load dimension {self.load.m} does not match plant m={self.plant.m}"
            )
        if isinstance(self.load, LtiLoad) and self.plant.m != 1:
            raise ValueError("LTI loads are single-input single-output; plant m must be 1")
        if isinstance(self.load, OpenLoopSignal) and self.load.m != self.plant.m:
            raise ValueError(
                f"open-loop signal dimension {self.load.m} does not match plant m={self.plant.m}"
            )
        if self.controller is not None and self.plant.n != 2:
            raise ValueError("phase control needs a planar plant (n = 2)")

    @property
    def load_dim(self) -> int:
        return self.load.state_dim if isinstance(self.load, LtiLoad) else 0

    @property
    def aux_dim(self) -> int:
        return 1 if self.controller is not None else 0

    @property
    def total_dim(self) -> int:
        return self.plant.n + self.load_dim + self.aux_dim

    def split(self, w: np.ndarray) -> tuple[np.ndarray, np.ndarray | None, float | None]:
        """Partition a total state into plant state, load state, integrator."""
        w = np.asarray(w, dtype=float)
        if w.shape != (self.total_dim,):
            raise ValueError(
                f"total state must have shape ({self.total_dim},), got {w.shape}"
            )
        n = self.plant.n
        z = w[n:n + self.load_dim] if self.load_dim else None
        xi = float(w[-1]) if self.aux_dim else None
        return w[:n], z, xi

    def assemble_state(
        self,
        x0: np.ndarray,
        z0: np.ndarray | None = None,
        xi0: float = 0.0,
    ) -> np.ndarray:
        """Stack plant, load, and integrator initial values into a total state."""
        x0 = np.asarray(x0, dtype=float)
        if x0.shape != (self.plant.n,):
            raise ValueError(
                f"plant state must have shape ({self.plant.n},), got {x0.shape}"
            )
        parts = [x0]
        if self.load_dim:
            z0 = np.zeros(self.load_dim) if z0 is None else np.asarray(z0, dtype=float)
            if z0.shape != (self.load_dim,):
                raise ValueError(
                    f"load state must have shape ({self.load_dim},), got {z0.shape}"
                )
            parts.append(z0)
        elif z0 is not None and np.asarray(z0).size:
            raise ValueError("load state given but the load is stateless")
        if self.aux_dim:
            parts.append(np.array([xi0]))
        return np.concatenate(parts)

    def plant_input(self, t: float, w: np.ndarray) -> np.ndarray:
        """Port input applied at a total state (load output or exogenous signal)."""
        x, z, _ = self.split(w)
        if isinstance(self.load, StaticLoad):
            y = output_map(x, self.plant)
            return -(np.asarray(self.load.gain_fn(y), dtype=float) @ y)
        if isinstance(self.load, LtiLoad):
            y = output_map(x, self.plant)
            return lti_load_step_derivative(z, y, self.load)[1]
        if isinstance(self.load, OpenLoopSignal):
            return self.load.eval(t)
        return np.zeros(self.plant.m)


def closed_loop_derivative(
    w: np.ndarray, t: float, cl: ClosedLoopSystem
) -> np.ndarray:
    """Total state derivative of the interconnected system.

    Computes the port output, derives the input from the termination, applies
    the plant vector field, and appends the load state derivative and the
    phase-error integrator derivative where present.
    """
    x, z, xi = cl.split(w)
    plant = cl.plant
    parts: list[np.ndarray] = []
    if isinstance(cl.load, StaticLoad):
        y = output_map(x, plant)
        u = -(np.asarray(cl.load.gain_fn(y), dtype=float) @ y)
        zdot = None
    elif isinstance(cl.load, LtiLoad):
        y = output_map(x, plant)
        zdot, u = lti_load_step_derivative(z, y, cl.load)
    elif isinstance(cl.load, OpenLoopSignal):
        u = cl.load.eval(t)
        zdot = None
    else:
        u = np.zeros(plant.m)
        zdot = None
    parts.append(vector_field(x, t, u, plant, aux=xi))
    if zdot is not None:
        parts.append(zdot)
    if cl.controller is not None:
        e = wrap_angle(cl.controller.phi_ref - math.atan2(x[1], x[0]))
        parts.append(np.array([e]))
    return np.concatenate(parts) if len(parts) > 1 else parts[0]


def make_rhs(
    cl: ClosedLoopSystem,
    gain_override: Callable[[float], float] | None = None,
) -> Callable[[float, np.ndarray], np.ndarray]:
    """Build a derivative closure f(t, w) with constant matrices hoisted.

    Matches closed_loop_derivative but evaluates callbacks declared constant
    exactly once, for use in integrator inner loops.  `gain_override`, when
    given, replaces the variant input-gain law with a custom map from sigma
    to gain (used by the integrator's chatter guard).
    """
    plant = cl.plant
    n = plant.n
    m = plant.m
    q_mat = plant.form.mat
    variant = plant.variant
    cap = plant.cap
    tol = plant.sigma_tol
    probe = np.zeros(n)

    j_const = (
        np.asarray(plant.coupling(probe, 0.0, None), dtype=float)
        if plant.coupling_constancy is Constancy.CONSTANT and cl.controller is None
        else None
    )
    r_const = (
        np.asarray(plant.damping(probe, 0.0), dtype=float)
        if plant.damping_constancy is Constancy.CONSTANT
        else None
    )
    b_const = (
        np.asarray(plant.input_matrix(probe), dtype=float)
        if plant.input_constancy is Constancy.CONSTANT
        else None
    )
    qb_const = q_mat @ b_const if b_const is not None else None

    load = cl.load
    ctrl = cl.controller
    lti = load if isinstance(load, LtiLoad) else None
    q_dim = cl.load_dim
    total = cl.total_dim

    # constant static load folded into one n x n feedback matrix
    p_const = None
    if (
        isinstance(load, StaticLoad)
        and load.gain_const is not None
        and b_const is not None
    ):
        p_const = b_const @ load.gain_const @ b_const.T

    coupling = plant.coupling
    damping = plant.damping
    input_matrix = plant.input_matrix

    def rhs(t: float, w: np.ndarray) -> np.ndarray:
        x = w[:n]
        qx = q_mat @ x
        s = 0.5 * (float(x @ qx) - 1.0)

        e = None
        if ctrl is not None:
            e = wrap_angle(ctrl.phi_ref - math.atan2(x[1], x[0]))
            rate = ctrl.omega0 + ctrl.kp * e + ctrl.ki * w[-1]
            dx = np.array([-rate * qx[1], rate * qx[0]])
        else:
            j = j_const if j_const is not None else coupling(x, t, None)
            dx = j @ qx
        r = r_const if r_const is not None else damping(x, t)
        dx -= s * (r @ qx)

        if gain_override is not None:
            gain = gain_override(s)
        else:
            gain = input_gain_value(s, variant, cap, tol)
        u = None
        if gain != 0.0:
            if p_const is not None:
                dx -= gain * (p_const @ qx)
            else:
                b = b_const if b_const is not None else input_matrix(x)
                if isinstance(load, StaticLoad):
                    y = b.T @ qx
                    u = -(np.asarray(load.gain_fn(y), dtype=float) @ y)
                elif lti is not None:
                    y0 = float(b[:, 0] @ qx) if b.ndim == 2 else float(b @ qx)
                    u = np.array([-(float(lti.c @ w[n:n + q_dim]) + lti.d * y0)])
                elif isinstance(load, OpenLoopSignal):
                    u = load.eval(t)
                else:
                    u = None
                if u is not None:
                    dx += gain * (b @ u)

        if total == n:
            return dx
        out = np.empty(total)
        out[:n] = dx
        if lti is not None:
            y0 = float(qb_const[:, 0] @ x) if qb_const is not None else float(
                (input_matrix(x).T @ qx)[0]
            )
            out[n:n + q_dim] = lti.a @ w[n:n + q_dim] + lti.b * y0
        if e is not None:
            out[-1] = e
        return out

    return rhs
