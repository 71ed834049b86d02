"""Closed-form mathematics of the singular oscillator class.

The model lives on R^n and is parameterized by a symmetric positive definite
matrix Q, a skew-symmetric coupling matrix J(x, t), a symmetric damping
matrix R(x, t), and an input matrix B(x):

    sigma(x) = (x' Q x - 1) / 2          level function, zero on the target
                                         ellipsoid x' Q x = 1
    H(x)     = sigma(x)^2 / 2            storage, minimal on the ellipsoid
    xdot     = [J - sigma R] Q x + g B u
    y        = B' Q x

The scalar input gain g is singular on the ellipsoid.  Three gain laws are
supported:

    exact:     g = 1 / sigma, with g = 0 inside the numerical band
               |sigma| <= sigma_tol standing in for the zero-measure set
    saturated: g = 1 / sigma outside the layer |sigma| <= 1 / cap,
               g = cap * sign(sigma) inside it (jump at sigma = 0)
    linear:    g = 1 / sigma outside the layer, g = cap^2 * sigma inside
               (continuous, g = 0 at sigma = 0)

`cap` bounds |g| by construction for the saturated and linear laws.  Each law
comes with a storage function and a dissipation rate such that along
trajectories   d(storage)/dt = -dissipation_rate + y'u   away from the
singular band; those closed forms are what the audit layer checks.

All functions here are pure; system definitions are immutable and safe to
share across concurrent runs.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

DEFAULT_SIGMA_TOL = 1e-9

# Relative Frobenius tolerance for symmetry / skewness validation.
SYMMETRY_RTOL = 1e-12


class Variant(enum.Enum):
    """Input-gain law applied to the singular channel."""

    EXACT = "exact"
    SATURATED = "saturated"
    LINEAR = "linear"


class Constancy(enum.Enum):
    """Declared dependence of a matrix callback, used to skip re-evaluation."""

    CONSTANT = "constant"
    TIME_VARYING = "time_varying"
    STATE_DEPENDENT = "state_dependent"


class Region(enum.Enum):
    """Where a state sits relative to the singular set and the layer."""

    ON_SINGULAR = "on_singular"
    IN_LAYER = "in_layer"
    OUTSIDE = "outside"


@dataclass(frozen=True)
class QuadraticForm:
    """Symmetric positive definite matrix defining the level function."""

    mat: np.ndarray

    def __post_init__(self) -> None:
        q = np.asarray(self.mat, dtype=float)
        if q.ndim != 2 or q.shape[0] != q.shape[1]:
            raise ValueError(f"quadratic form must be square, got shape {q.shape}")
        scale = np.linalg.norm(q)
        skew = np.linalg.norm(q - q.T)
        if skew > SYMMETRY_RTOL * max(scale, 1.0):
            raise ValueError(
                f"quadratic form is not symmetric: relative asymmetry "
                f"{skew / max(scale, 1.0):.3e} exceeds {SYMMETRY_RTOL:.1e}"
            )
        q = 0.5 * (q + q.T)
        eigs = np.linalg.eigvalsh(q)
        if eigs[0] <= 0.0:
            raise ValueError(
                f"quadratic form is not positive definite: "
                f"smallest eigenvalue {eigs[0]:.3e}"
            )
        q.setflags(write=False)
        object.__setattr__(self, "mat", q)
        object.__setattr__(self, "_eigs", eigs)

    @property
    def dim(self) -> int:
        return self.mat.shape[0]

    @property
    def eig_min(self) -> float:
        return float(self._eigs[0])

    @property
    def eig_max(self) -> float:
        return float(self._eigs[-1])

    def quad(self, x: np.ndarray) -> float:
        """Evaluate x' Q x."""
        x = np.asarray(x, dtype=float)
        return float(x @ self.mat @ x)

    @classmethod
    def identity(cls, n: int) -> "QuadraticForm":
        return cls(np.eye(n))


@dataclass(frozen=True)
class SigmaLevel:
    """Value of the level function at a state."""

    value: float

    def __float__(self) -> float:
        return self.value

    @property
    def inside(self) -> bool:
        """Strictly inside the ellipsoid."""
        return self.value < 0.0

    @property
    def outside(self) -> bool:
        """Strictly outside the ellipsoid."""
        return self.value > 0.0


@dataclass(frozen=True)
class RegionTag:
    """Region classification together with the tolerance that produced it."""

    label: Region
    sigma_tol: float


def classify_region(
    sigma_value: float, cap: float | None, sigma_tol: float = DEFAULT_SIGMA_TOL
) -> RegionTag:
    """Classify a sigma value against the singular band and the layer.

    Without a gain cap (exact law) there is no layer and every state outside
    the band |sigma| <= sigma_tol is tagged OUTSIDE.
    """
    a = abs(sigma_value)
    if a <= sigma_tol:
        return RegionTag(Region.ON_SINGULAR, sigma_tol)
    if cap is not None and a <= 1.0 / cap:
        return RegionTag(Region.IN_LAYER, sigma_tol)
    return RegionTag(Region.OUTSIDE, sigma_tol)


@dataclass(frozen=True)
class SingularPHSystem:
    """Immutable definition of one singular oscillator.

    The coupling, damping, and input-matrix callbacks take

        coupling(x, t, aux)   -> skew n x n      (aux: controller state or None)
        damping(x, t)         -> symmetric n x n
        input_matrix(x)       -> n x m

    with declared constancy so that consumers may evaluate a constant
    callback once and hoist it out of inner loops.  `damping_lower` and
    `damping_upper` record the assumed eigenvalue bounds of the damping
    matrix; they are used only by structural audits.
    """

    n: int
    m: int
    form: QuadraticForm
    coupling: Callable[[np.ndarray, float, float | None], np.ndarray]
    damping: Callable[[np.ndarray, float], np.ndarray]
    input_matrix: Callable[[np.ndarray], np.ndarray]
    variant: Variant
    cap: float | None = None
    sigma_tol: float = DEFAULT_SIGMA_TOL
    coupling_constancy: Constancy = Constancy.STATE_DEPENDENT
    damping_constancy: Constancy = Constancy.STATE_DEPENDENT
    input_constancy: Constancy = Constancy.STATE_DEPENDENT
    damping_lower: float | None = None
    damping_upper: float | None = None

    def __post_init__(self) -> None:
        if self.n < 1 or self.m < 1:
            raise ValueError(f"dimensions must be positive, got n={self.n} m={self.m}")
        if self.form.dim != self.n:
            raise ValueError(
                f"quadratic form dimension {self.form.dim} does not match n={self.n}"
            )
        if self.variant is Variant.EXACT:
            if self.cap is not None:
                raise ValueError("exact gain law takes no cap")
        else:
            if self.cap is None or self.cap <= 0.0:
                raise ValueError(
                    f"{self.variant.value} gain law needs a positive cap, got {self.cap}"
                )
        if self.sigma_tol <= 0.0:
            raise ValueError(f"sigma_tol must be positive, got {self.sigma_tol}")

    @classmethod
    def from_constant(
        cls,
        form: QuadraticForm | np.ndarray,
        coupling: np.ndarray,
        damping: np.ndarray,
        input_matrix: np.ndarray,
        variant: Variant,
        cap: float | None = None,
        sigma_tol: float = DEFAULT_SIGMA_TOL,
    ) -> "SingularPHSystem":
        """Build a system with constant coupling, damping, and input matrices."""
        if not isinstance(form, QuadraticForm):
            form = QuadraticForm(form)
        n = form.dim
        j = np.asarray(coupling, dtype=float)
        r = np.asarray(damping, dtype=float)
        b = np.asarray(input_matrix, dtype=float)
        if b.ndim == 1:
            b = b.reshape(n, 1)
        if j.shape != (n, n):
            raise ValueError(f"coupling must be {n}x{n}, got {j.shape}")
        if r.shape != (n, n):
            raise ValueError(f"damping must be {n}x{n}, got {r.shape}")
        if b.shape[0] != n:
            raise ValueError(f"input matrix must have {n} rows, got {b.shape}")
        if np.linalg.norm(j + j.T) > SYMMETRY_RTOL * max(np.linalg.norm(j), 1.0):
            raise ValueError("coupling matrix is not skew-symmetric")
        if np.linalg.norm(r - r.T) > SYMMETRY_RTOL * max(np.linalg.norm(r), 1.0):
            raise ValueError("damping matrix is not symmetric")
        r = 0.5 * (r + r.T)
        r_eigs = np.linalg.eigvalsh(r)
        for arr in (j, r, b):
            arr.setflags(write=False)
        return cls(
            n=n,
            m=b.shape[1],
            form=form,
            coupling=lambda x, t, aux, _j=j: _j,
            damping=lambda x, t, _r=r: _r,
            input_matrix=lambda x, _b=b: _b,
            variant=variant,
            cap=cap,
            sigma_tol=sigma_tol,
            coupling_constancy=Constancy.CONSTANT,
            damping_constancy=Constancy.CONSTANT,
            input_constancy=Constancy.CONSTANT,
            damping_lower=float(r_eigs[0]),
            damping_upper=float(r_eigs[-1]),
        )

    # Thin scalar conveniences used by instrumentation and audits.

    def sigma_value(self, x: np.ndarray) -> float:
        return 0.5 * (self.form.quad(x) - 1.0)

    def input_gain(self, sigma_value: float) -> float:
        return input_gain_value(sigma_value, self.variant, self.cap, self.sigma_tol)

    def supply_gate(self, sigma_value: float) -> float:
        return supply_gate_value(sigma_value, self.variant, self.cap, self.sigma_tol)

    def storage_from_sigma(self, sigma_value: float) -> float:
        return storage_value_from_sigma(
            sigma_value, self.variant, self.cap, self.sigma_tol
        )

    def region(self, sigma_value: float) -> RegionTag:
        return classify_region(sigma_value, self.cap, self.sigma_tol)


def _check_state(x: np.ndarray, n: int) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.shape != (n,):
        raise ValueError(f"state must have shape ({n},), got {x.shape}")
    return x


def sigma(x: np.ndarray, form: QuadraticForm) -> SigmaLevel:
    """Level function sigma(x) = (x' Q x - 1) / 2."""
    x = _check_state(x, form.dim)
    return SigmaLevel(0.5 * (float(x @ form.mat @ x) - 1.0))


def sigma_inv(
    x: np.ndarray, form: QuadraticForm, sigma_tol: float = DEFAULT_SIGMA_TOL
) -> float:
    """Exact reciprocal gain: 1/sigma, or 0 inside the singular band."""
    s = sigma(x, form).value
    return input_gain_value(s, Variant.EXACT, None, sigma_tol)


def sigma_inv_sat(
    x: np.ndarray,
    form: QuadraticForm,
    cap: float,
    sigma_tol: float = DEFAULT_SIGMA_TOL,
) -> float:
    """Saturated reciprocal gain: 1/sigma outside the layer, +-cap inside."""
    s = sigma(x, form).value
    return input_gain_value(s, Variant.SATURATED, cap, sigma_tol)


def sigma_inv_lin(x: np.ndarray, form: QuadraticForm, cap: float) -> float:
    """Linearized reciprocal gain: 1/sigma outside the layer, cap^2 * sigma inside."""
    s = sigma(x, form).value
    return input_gain_value(s, Variant.LINEAR, cap, 0.0)


def input_gain_value(
    s: float, variant: Variant, cap: float | None, sigma_tol: float
) -> float:
    """Gain law evaluated on a raw sigma value."""
    a = abs(s)
    if variant is Variant.EXACT:
        if a <= sigma_tol:
            return 0.0
        return 1.0 / s
    if variant is Variant.SATURATED:
        if a <= sigma_tol:
            return 0.0
        if a <= 1.0 / cap:
            return cap if s > 0.0 else -cap
        return 1.0 / s
    # linear: continuous through zero, no band needed
    if a <= 1.0 / cap:
        return cap * cap * s
    return 1.0 / s


def supply_gate_value(
    s: float, variant: Variant, cap: float | None, sigma_tol: float
) -> float:
    """Factor sigma * gain multiplying y'u in the rate of the plain storage H.

    Equals 1 outside the layer for every law, cap * |sigma| inside for the
    saturated law, (cap * sigma)^2 inside for the linear law, and the
    indicator of the band's complement for the exact law.  Computed directly
    from the branch formulas to avoid roundoff in sigma * (1 / sigma).
    """
    a = abs(s)
    if variant is Variant.EXACT:
        return 0.0 if a <= sigma_tol else 1.0
    if variant is Variant.SATURATED:
        if a <= sigma_tol:
            return 0.0
        return cap * a if a <= 1.0 / cap else 1.0
    if a <= 1.0 / cap:
        g = cap * s
        return g * g
    return 1.0


def hamiltonian(x: np.ndarray, form: QuadraticForm) -> float:
    """Storage H(x) = sigma(x)^2 / 2."""
    s = sigma(x, form).value
    return 0.5 * s * s


def grad_hamiltonian(x: np.ndarray, form: QuadraticForm) -> np.ndarray:
    """Gradient of H: sigma(x) * Q x."""
    x = _check_state(x, form.dim)
    qx = form.mat @ x
    s = 0.5 * (float(x @ qx) - 1.0)
    return s * qx


def storage_sat_outer(s: float, cap: float) -> float:
    """Saturated-law storage branch outside the layer: H + 1/(2 cap^2)."""
    return 0.5 * s * s + 0.5 / (cap * cap)


def storage_sat_inner(s: float, cap: float) -> float:
    """Saturated-law storage branch inside the layer: |sigma| / cap."""
    return abs(s) / cap


def storage_lin_outer(s: float, cap: float) -> float:
    """Linear-law storage branch outside the layer."""
    c2 = 2.0 * cap * cap
    return 0.5 * s * s - (1.0 + math.log(c2)) / c2


def storage_lin_inner(s: float, cap: float) -> float:
    """Linear-law storage branch inside the layer: log(H) / (2 cap^2)."""
    c2 = 2.0 * cap * cap
    return math.log(0.5 * s * s) / c2


def storage_sat(x: np.ndarray, form: QuadraticForm, cap: float) -> float:
    """Continuous nonnegative storage for the saturated law.

    Zero exactly on the singular set, |sigma|/cap inside the layer, and the
    plain storage shifted by 1/(2 cap^2) outside so the branches agree on the
    layer boundary.
    """
    if cap <= 0.0:
        raise ValueError(f"cap must be positive, got {cap}")
    s = sigma(x, form).value
    if abs(s) > 1.0 / cap:
        return storage_sat_outer(s, cap)
    return storage_sat_inner(s, cap)


def storage_lin(
    x: np.ndarray,
    form: QuadraticForm,
    cap: float,
    sigma_tol: float = DEFAULT_SIGMA_TOL,
) -> float:
    """Continuous storage for the linear law, unbounded below at the singular set.

    Returns -inf for states inside the band |sigma| <= sigma_tol instead of
    raising; consumers treat such samples as excluded.
    """
    if cap <= 0.0:
        raise ValueError(f"cap must be positive, got {cap}")
    s = sigma(x, form).value
    if abs(s) > 1.0 / cap:
        return storage_lin_outer(s, cap)
    if abs(s) <= sigma_tol:
        return float("-inf")
    return storage_lin_inner(s, cap)


def storage_value_from_sigma(
    s: float, variant: Variant, cap: float | None, sigma_tol: float
) -> float:
    """Variant storage evaluated on a raw sigma value (plain H for exact)."""
    if variant is Variant.EXACT:
        return 0.5 * s * s
    a = abs(s)
    if variant is Variant.SATURATED:
        return storage_sat_outer(s, cap) if a > 1.0 / cap else storage_sat_inner(s, cap)
    if a > 1.0 / cap:
        return storage_lin_outer(s, cap)
    if a <= sigma_tol:
        return float("-inf")
    return storage_lin_inner(s, cap)


def dissipation_factor_value(s: float, variant: Variant, cap: float | None) -> float:
    """Scalar multiplying x'QRQx in the variant dissipation rate."""
    if variant is Variant.EXACT:
        return s * s
    a = abs(s)
    if a > 1.0 / cap:
        return s * s
    if variant is Variant.SATURATED:
        return a / cap
    return 1.0 / (cap * cap)


def dissipation_rate(x: np.ndarray, t: float, sys: SingularPHSystem) -> float:
    """Variant dissipation rate: factor(sigma) * x' Q R(x,t) Q x.

    The factor is sigma^2 for the exact law everywhere and for the other laws
    outside the layer; |sigma|/cap for the saturated law inside the layer; and
    1/cap^2 for the linear law inside the layer.  Both laws are continuous
    across the layer boundary.
    """
    x = _check_state(x, sys.n)
    qx = sys.form.mat @ x
    s = 0.5 * (float(x @ qx) - 1.0)
    r = sys.damping(x, t)
    return dissipation_factor_value(s, sys.variant, sys.cap) * float(qx @ r @ qx)


def vector_field(
    x: np.ndarray,
    t: float,
    u: np.ndarray,
    sys: SingularPHSystem,
    aux: float | None = None,
) -> np.ndarray:
    """State derivative [J - sigma R] Q x + gain * B u.

    The drift term is identical for all gain laws.  When the gain is exactly
    zero (state inside the singular band for the exact and saturated laws)
    the input term is skipped entirely, so the derivative is bitwise
    independent of u there.
    """
    x = _check_state(x, sys.n)
    qx = sys.form.mat @ x
    s = 0.5 * (float(x @ qx) - 1.0)
    j = sys.coupling(x, t, aux)
    r = sys.damping(x, t)
    dx = j @ qx - s * (r @ qx)
    gain = input_gain_value(s, sys.variant, sys.cap, sys.sigma_tol)
    if gain != 0.0:
        u = np.asarray(u, dtype=float)
        if u.shape != (sys.m,):
            raise ValueError(f"input must have shape ({sys.m},), got {u.shape}")
        dx = dx + gain * (sys.input_matrix(x) @ u)
    return dx


def output_map(x: np.ndarray, sys: SingularPHSystem) -> np.ndarray:
    """Port output y = B(x)' Q x, identical for all gain laws."""
    x = _check_state(x, sys.n)
    return sys.input_matrix(x).T @ (sys.form.mat @ x)


# Vectorized forms over arrays of sigma values / states, used by trajectory
# instrumentation and audits.


def sigma_batch(states: np.ndarray, form: QuadraticForm) -> np.ndarray:
    """Sigma at each row of `states` (shape (N, n))."""
    states = np.asarray(states, dtype=float)
    return 0.5 * (np.einsum("ij,jk,ik->i", states, form.mat, states) - 1.0)


def region_code_batch(
    sig: np.ndarray, cap: float | None, sigma_tol: float
) -> np.ndarray:
    """Integer region codes: 0 on the singular band, 1 in the layer, 2 outside."""
    a = np.abs(sig)
    codes = np.full(a.shape, 2, dtype=np.int8)
    if cap is not None:
        codes[a <= 1.0 / cap] = 1
    codes[a <= sigma_tol] = 0
    return codes


REGION_NAMES = {
    0: Region.ON_SINGULAR.value,
    1: Region.IN_LAYER.value,
    2: Region.OUTSIDE.value,
}


def input_gain_batch(
    sig: np.ndarray, variant: Variant, cap: float | None, sigma_tol: float
) -> np.ndarray:
    """Vectorized gain law."""
    sig = np.asarray(sig, dtype=float)
    a = np.abs(sig)
    with np.errstate(divide="ignore"):
        recip = np.where(a > 0.0, 1.0 / np.where(a > 0.0, sig, 1.0), 0.0)
    if variant is Variant.EXACT:
        return np.where(a <= sigma_tol, 0.0, recip)
    if variant is Variant.SATURATED:
        out = np.where(a > 1.0 / cap, recip, cap * np.sign(sig))
        return np.where(a <= sigma_tol, 0.0, out)
    return np.where(a > 1.0 / cap, recip, cap * cap * sig)


def supply_gate_batch(
    sig: np.ndarray, variant: Variant, cap: float | None, sigma_tol: float
) -> np.ndarray:
    """Vectorized sigma * gain factor."""
    sig = np.asarray(sig, dtype=float)
    a = np.abs(sig)
    if variant is Variant.EXACT:
        return np.where(a <= sigma_tol, 0.0, 1.0)
    if variant is Variant.SATURATED:
        out = np.where(a > 1.0 / cap, 1.0, cap * a)
        return np.where(a <= sigma_tol, 0.0, out)
    return np.where(a > 1.0 / cap, 1.0, np.square(cap * sig))


def storage_batch(
    sig: np.ndarray, variant: Variant, cap: float | None, sigma_tol: float
) -> np.ndarray:
    """Vectorized variant storage (plain H for the exact law)."""
    sig = np.asarray(sig, dtype=float)
    h = 0.5 * np.square(sig)
    if variant is Variant.EXACT:
        return h
    a = np.abs(sig)
    if variant is Variant.SATURATED:
        c2 = cap * cap
        return np.where(a > 1.0 / cap, h + 0.5 / c2, a / cap)
    c2 = 2.0 * cap * cap
    with np.errstate(divide="ignore"):
        inner = np.where(a <= sigma_tol, -np.inf, np.log(np.maximum(h, 1e-320)) / c2)
    return np.where(a > 1.0 / cap, h - (1.0 + math.log(c2)) / c2, inner)


def dissipation_factor_batch(
    sig: np.ndarray, variant: Variant, cap: float | None
) -> np.ndarray:
    """Vectorized dissipation factor."""
    sig = np.asarray(sig, dtype=float)
    s2 = np.square(sig)
    if variant is Variant.EXACT:
        return s2
    a = np.abs(sig)
    if variant is Variant.SATURATED:
        return np.where(a > 1.0 / cap, s2, a / cap)
    return np.where(a > 1.0 / cap, s2, 1.0 / (cap * cap))
