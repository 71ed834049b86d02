"""Numerical integration with level-set event detection and instrumentation.

`integrate` advances a closed-loop system with either a fixed-step RK4 or an
adaptive embedded RK45 scheme, recording every accepted step.  Afterwards it
scans consecutive steps for sign changes of sigma and of |sigma| - 1/cap,
refines each crossing time by bisection on a cubic Hermite interpolant, and
logs the first arrival at the singular band as an impact event.  Samples are
emitted at every accepted step and at every refined event point, and each
sample carries the full instrumentation set (sigma, region, storages, port
signals, supply, and dissipation rate).

Runs never raise on numerical failure: a non-finite state or an adaptive
step-size underflow aborts the run and returns the partial trajectory with a
diagnostic in its metadata.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .core import (
    Constancy,
    QuadraticForm,
    REGION_NAMES,
    Variant,
    dissipation_factor_batch,
    input_gain_value,
    output_map,
    region_code_batch,
    sigma_batch,
    storage_batch,
)
from .interconnect import (
    ClosedLoopSystem,
    LtiLoad,
    OpenLoopSignal,
    StaticLoad,
    make_rhs,
)

STATUS_OK = "ok"

EVENT_SIGMA_CROSSING = "sigma-crossing"
EVENT_LAYER_CROSSING = "layer-crossing"
EVENT_IMPACT = "impact"

DIRECTION_RISING = "rising"
DIRECTION_FALLING = "falling"
DIRECTION_ENTER = "enter"
DIRECTION_EXIT = "exit"


@dataclass(frozen=True)
class IntegratorConfig:
    """Integration settings.

    `dt` is the fixed step for rk4 and the initial step for rk45; `rtol`,
    `atol`, and `dt_max` apply to rk45 only.  `chatter_guard`, when set,
    freezes the sign of sigma seen by the input-gain law inside the band
    |sigma| <= chatter_guard and evaluates the gain at the band edge; it is
    an exploratory smoothing device, off by default and meant for the exact
    and saturated laws.  `stop_on_impact` ends the run right after the step
    on which the singular band is first reached.
    """

    method: str = "rk4"
    dt: float = 1e-4
    t_final: float = 10.0
    rtol: float = 1e-8
    atol: float = 1e-10
    dt_max: float = 0.05
    event_refine_tol: float = 1e-10
    chatter_guard: float | None = None
    store_every: int = 1
    stop_on_impact: bool = False

    def __post_init__(self) -> None:
        if self.method not in ("rk4", "rk45"):
            raise ValueError(f"method must be 'rk4' or 'rk45', got {self.method!r}")
        if self.dt <= 0.0:
            raise ValueError(f"dt must be positive, got {self.dt}")
        if self.t_final <= 0.0:
            raise ValueError(f"t_final must be positive, got {self.t_final}")
        if not (0.0 < self.event_refine_tol < self.dt):
            raise ValueError(
                f"event_refine_tol must lie in (0, dt), got "
                f"{self.event_refine_tol} with dt={self.dt}"
            )
        if self.rtol <= 0.0 or self.atol <= 0.0 or self.dt_max <= 0.0:
            raise ValueError("rtol, atol, and dt_max must be positive")
        if self.store_every < 1:
            raise ValueError(f"store_every must be >= 1, got {self.store_every}")
        if self.chatter_guard is not None and self.chatter_guard <= 0.0:
            raise ValueError(f"chatter_guard must be positive, got {self.chatter_guard}")


@dataclass
class Trajectory:
    """Columnar record of one run.

    `states` holds the total state (plant, then load, then integrator);
    the instrumentation columns refer to the plant part only.  Times are
    strictly increasing.
    """

    t: np.ndarray
    states: np.ndarray
    n: int
    m: int
    n_load: int
    n_aux: int
    sigma: np.ndarray
    region: np.ndarray
    h: np.ndarray
    h_storage: np.ndarray
    outputs: np.ndarray
    inputs: np.ndarray
    supply: np.ndarray
    diss_rate: np.ndarray
    variant: Variant
    cap: float | None
    sigma_tol: float
    q_mat: np.ndarray
    metadata: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.t.ndim != 1 or self.states.shape[0] != self.t.size:
            raise ValueError("trajectory arrays are inconsistent")
        if self.t.size > 1 and not np.all(np.diff(self.t) > 0.0):
            raise ValueError("trajectory times must be strictly increasing")

    @property
    def n_samples(self) -> int:
        return self.t.size

    @property
    def plant_states(self) -> np.ndarray:
        return self.states[:, : self.n]

    @property
    def load_states(self) -> np.ndarray:
        return self.states[:, self.n : self.n + self.n_load]

    @property
    def aux_states(self) -> np.ndarray:
        return self.states[:, self.n + self.n_load :]

    def region_names(self) -> list[str]:
        return [REGION_NAMES[int(c)] for c in self.region]

    def to_csv(self, path) -> None:
        """Write the instrumented samples with shortest round-trip decimals."""
        n, m = self.n, self.m
        header = (
            ["t"]
            + [f"x{i + 1}" for i in range(n)]
            + ["sigma", "region", "H", "Hstorage"]
            + [f"y{i + 1}" for i in range(m)]
            + [f"u{i + 1}" for i in range(m)]
            + ["supply", "diss_rate"]
        )
        x = self.plant_states
        names = self.region_names()
        with open(path, "w", newline="") as fh:
            fh.write(",".join(header) + "\n")
            for k in range(self.n_samples):
                row = [repr(float(self.t[k]))]
                row += [repr(float(v)) for v in x[k]]
                row += [
                    repr(float(self.sigma[k])),
                    names[k],
                    repr(float(self.h[k])),
                    repr(float(self.h_storage[k])),
                ]
                row += [repr(float(v)) for v in self.outputs[k]]
                row += [repr(float(v)) for v in self.inputs[k]]
                row += [repr(float(self.supply[k])), repr(float(self.diss_rate[k]))]
                fh.write(",".join(row) + "\n")


@dataclass(frozen=True)
class Event:
    """One detected level-set crossing or impact."""

    t: float
    kind: str
    direction: str
    x: np.ndarray
    sigma: float


@dataclass
class EventLog:
    """Ordered list of detected events for one run."""

    events: list[Event] = field(default_factory=list)

    def __iter__(self):
        return iter(self.events)

    def __len__(self) -> int:
        return len(self.events)

    def of_kind(self, kind: str) -> list[Event]:
        return [e for e in self.events if e.kind == kind]

    def to_csv(self, path, n: int | None = None) -> None:
        if n is None:
            n = self.events[0].x.size if self.events else 0
        header = ["t", "kind", "direction"] + [f"x{i + 1}" for i in range(n)]
        with open(path, "w", newline="") as fh:
            fh.write(",".join(header) + "\n")
            for e in self.events:
                row = [repr(float(e.t)), e.kind, e.direction]
                row += [repr(float(v)) for v in e.x]
                fh.write(",".join(row) + "\n")


def first_impact_time(traj: Trajectory, log: EventLog) -> float | None:
    """Time of the first arrival at the singular band, or None."""
    for e in log.events:
        if e.kind == EVENT_IMPACT:
            return e.t
    return None


def _hysteresis_gain(
    variant: Variant, cap: float | None, sigma_tol: float, guard: float
) -> Callable[[float], float]:
    """Sign-frozen gain law inside |sigma| <= guard (exploratory smoothing)."""
    last_sign = [1.0]

    def gain(s: float) -> float:
        if abs(s) > guard:
            last_sign[0] = 1.0 if s > 0.0 else -1.0
            return input_gain_value(s, variant, cap, sigma_tol)
        return input_gain_value(last_sign[0] * guard, variant, cap, sigma_tol)

    return gain


def _fast_applicable(cl: ClosedLoopSystem, cfg: IntegratorConfig) -> bool:
    """Planar constant-coefficient systems get a scalar inner loop."""
    if cfg.method != "rk4" or cfg.chatter_guard is not None:
        return False
    p = cl.plant
    if cl.controller is not None or p.n != 2:
        return False
    if not (
        p.coupling_constancy is Constancy.CONSTANT
        and p.damping_constancy is Constancy.CONSTANT
        and p.input_constancy is Constancy.CONSTANT
    ):
        return False
    load = cl.load
    if load is None:
        return True
    if isinstance(load, StaticLoad):
        return load.gain_const is not None
    if isinstance(load, OpenLoopSignal):
        return load.m <= 2
    return False


def _step_plan(cfg: IntegratorConfig) -> tuple[int, float]:
    """Number of full dt steps and the remainder step reaching t_final."""
    n_full = int(math.floor(cfg.t_final / cfg.dt + 1e-9))
    rem = cfg.t_final - n_full * cfg.dt
    if rem <= 1e-12 * max(1.0, cfg.t_final):
        rem = 0.0
    return n_full, rem


def _fast_rk4(
    cl: ClosedLoopSystem, x0: np.ndarray, cfg: IntegratorConfig
) -> tuple[np.ndarray, np.ndarray, np.ndarray, str, float | None]:
    """Scalar RK4 loop for planar constant-coefficient plants."""
    p = cl.plant
    q = p.form.mat
    q11, q12, q22 = float(q[0, 0]), float(q[0, 1]), float(q[1, 1])
    probe = np.zeros(2)
    jm = np.asarray(p.coupling(probe, 0.0, None), dtype=float)
    rm = np.asarray(p.damping(probe, 0.0), dtype=float)
    bm = np.asarray(p.input_matrix(probe), dtype=float)
    j12 = float(jm[0, 1])
    r11, r12, r22 = float(rm[0, 0]), float(rm[0, 1]), float(rm[1, 1])

    exact = p.variant is Variant.EXACT
    saturated = p.variant is Variant.SATURATED
    cap = p.cap if p.cap is not None else 0.0
    inv_cap = 1.0 / cap if cap else 0.0
    cap2 = cap * cap
    tol = p.sigma_tol

    load = cl.load
    # mode 0: drift only, 1: folded static feedback, 2/3: open-loop m=1/2
    mode = 0
    p11 = p12 = p22 = 0.0
    b11 = b12 = b21 = b22 = 0.0
    fn = None
    if isinstance(load, StaticLoad):
        pm = bm @ load.gain_const @ bm.T
        p11, p12, p22 = float(pm[0, 0]), float(pm[0, 1]), float(pm[1, 1])
        mode = 1
    elif isinstance(load, OpenLoopSignal) and load.fn is not None:
        fn = load.fn
        b11, b21 = float(bm[0, 0]), float(bm[1, 0])
        if load.m == 2:
            b12, b22 = float(bm[0, 1]), float(bm[1, 1])
            mode = 3
        else:
            mode = 2

    def deriv(t: float, w1: float, w2: float) -> tuple[float, float]:
        qx1 = q11 * w1 + q12 * w2
        qx2 = q12 * w1 + q22 * w2
        s = 0.5 * (w1 * qx1 + w2 * qx2 - 1.0)
        d1 = j12 * qx2 - s * (r11 * qx1 + r12 * qx2)
        d2 = -j12 * qx1 - s * (r12 * qx1 + r22 * qx2)
        a = s if s >= 0.0 else -s
        if exact:
            g = 0.0 if a <= tol else 1.0 / s
        elif saturated:
            if a <= tol:
                g = 0.0
            elif a <= inv_cap:
                g = cap if s > 0.0 else -cap
            else:
                g = 1.0 / s
        else:
            g = cap2 * s if a <= inv_cap else 1.0 / s
        if g != 0.0:
            if mode == 1:
                d1 -= g * (p11 * qx1 + p12 * qx2)
                d2 -= g * (p12 * qx1 + p22 * qx2)
            elif mode == 2:
                u0 = float(fn(t)[0])
                d1 += g * b11 * u0
                d2 += g * b21 * u0
            elif mode == 3:
                u = fn(t)
                u0, u1 = float(u[0]), float(u[1])
                d1 += g * (b11 * u0 + b12 * u1)
                d2 += g * (b21 * u0 + b22 * u1)
        return d1, d2

    w1, w2 = float(x0[0]), float(x0[1])
    qx1 = q11 * w1 + q12 * w2
    qx2 = q12 * w1 + q22 * w2
    s_prev = 0.5 * (w1 * qx1 + w2 * qx2 - 1.0)
    ts = [0.0]
    w1s = [w1]
    w2s = [w2]
    ss = [s_prev]
    status = STATUS_OK
    stopped_at: float | None = None
    watch = cfg.stop_on_impact

    if watch and abs(s_prev) <= tol:
        stopped_at = 0.0
    else:
        n_full, rem = _step_plan(cfg)
        plan = [(k * cfg.dt, cfg.dt) for k in range(n_full)]
        if rem:
            plan.append((n_full * cfg.dt, rem))
        for t0, h in plan:
            h2 = 0.5 * h
            h6 = h / 6.0
            a1, c1 = deriv(t0, w1, w2)
            a2, c2 = deriv(t0 + h2, w1 + h2 * a1, w2 + h2 * c1)
            a3, c3 = deriv(t0 + h2, w1 + h2 * a2, w2 + h2 * c2)
            a4, c4 = deriv(t0 + h, w1 + h * a3, w2 + h * c3)
            w1n = w1 + h6 * (a1 + 2.0 * (a2 + a3) + a4)
            w2n = w2 + h6 * (c1 + 2.0 * (c2 + c3) + c4)
            qx1 = q11 * w1n + q12 * w2n
            qx2 = q12 * w1n + q22 * w2n
            s_new = 0.5 * (w1n * qx1 + w2n * qx2 - 1.0)
            if not (abs(s_new) < 1e300):
                status = f"aborted: non-finite state at t={t0 + h:.6g}"
                break
            t_next = t0 + h
            ts.append(t_next)
            w1s.append(w1n)
            w2s.append(w2n)
            ss.append(s_new)
            w1, w2 = w1n, w2n
            if watch and (s_prev * s_new < 0.0 or abs(s_new) <= tol):
                stopped_at = t_next
                break
            s_prev = s_new

    T = np.asarray(ts)
    W = np.column_stack([w1s, w2s])
    S = np.asarray(ss)
    return T, W, S, status, stopped_at


def _generic_rk4(
    cl: ClosedLoopSystem,
    x0: np.ndarray,
    cfg: IntegratorConfig,
    rhs: Callable[[float, np.ndarray], np.ndarray],
) -> tuple[np.ndarray, np.ndarray, np.ndarray, str, float | None]:
    """Fixed-step RK4 over the full closed-loop state."""
    n = cl.plant.n
    q = cl.plant.form.mat
    tol = cl.plant.sigma_tol

    def sig_of(w: np.ndarray) -> float:
        x = w[:n]
        return 0.5 * (float(x @ q @ x) - 1.0)

    w = x0
    s_prev = sig_of(w)
    ts = [0.0]
    ws = [w]
    ss = [s_prev]
    status = STATUS_OK
    stopped_at: float | None = None
    watch = cfg.stop_on_impact

    if watch and abs(s_prev) <= tol:
        stopped_at = 0.0
    else:
        n_full, rem = _step_plan(cfg)
        plan = [(k * cfg.dt, cfg.dt) for k in range(n_full)]
        if rem:
            plan.append((n_full * cfg.dt, rem))
        k1 = rhs(0.0, w)
        for t0, h in plan:
            h2 = 0.5 * h
            k2 = rhs(t0 + h2, w + h2 * k1)
            k3 = rhs(t0 + h2, w + h2 * k2)
            k4 = rhs(t0 + h, w + h * k3)
            w_new = w + (h / 6.0) * (k1 + 2.0 * (k2 + k3) + k4)
            if not np.all(np.isfinite(w_new)):
                status = f"aborted: non-finite state at t={t0 + h:.6g}"
                break
            t_next = t0 + h
            s_new = sig_of(w_new)
            ts.append(t_next)
            ws.append(w_new)
            ss.append(s_new)
            w = w_new
            if watch and (s_prev * s_new < 0.0 or abs(s_new) <= tol):
                stopped_at = t_next
                break
            s_prev = s_new
            k1 = rhs(t_next, w)

    return np.asarray(ts), np.vstack(ws), np.asarray(ss), status, stopped_at


# Dormand-Prince 5(4) tableau.
_DP_C = (0.2, 0.3, 0.8, 8.0 / 9.0, 1.0, 1.0)
_DP_A = (
    (0.2,),
    (3.0 / 40.0, 9.0 / 40.0),
    (44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0),
    (19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0),
    (9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0, -5103.0 / 18656.0),
    (35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0),
)
_DP_ERR = (
    71.0 / 57600.0,
    0.0,
    -71.0 / 16695.0,
    71.0 / 1920.0,
    -17253.0 / 339200.0,
    22.0 / 525.0,
    -1.0 / 40.0,
)


def _generic_rk45(
    cl: ClosedLoopSystem,
    x0: np.ndarray,
    cfg: IntegratorConfig,
    rhs: Callable[[float, np.ndarray], np.ndarray],
) -> tuple[np.ndarray, np.ndarray, np.ndarray, str, float | None]:
    """Adaptive embedded 4(5) pair; rejected steps emit nothing."""
    n = cl.plant.n
    q = cl.plant.form.mat
    tol = cl.plant.sigma_tol

    def sig_of(w: np.ndarray) -> float:
        x = w[:n]
        return 0.5 * (float(x @ q @ x) - 1.0)

    w = x0
    t = 0.0
    s_prev = sig_of(w)
    ts = [0.0]
    ws = [w]
    ss = [s_prev]
    status = STATUS_OK
    stopped_at: float | None = None
    watch = cfg.stop_on_impact

    if watch and abs(s_prev) <= tol:
        stopped_at = 0.0
        return np.asarray(ts), np.vstack(ws), np.asarray(ss), status, stopped_at

    h = min(cfg.dt, cfg.dt_max, cfg.t_final)
    k1 = rhs(t, w)
    while t < cfg.t_final - 1e-12 * max(1.0, cfg.t_final):
        h = min(h, cfg.dt_max, cfg.t_final - t)
        h_min = 1e-14 * max(abs(t), 1.0)
        if h < h_min:
            status = f"aborted: step size underflow at t={t:.6g}"
            break

        k = [k1]
        bad_stage = False
        for row in _DP_A:
            acc = row[0] * k[0]
            for a_ij, k_j in zip(row[1:], k[1:]):
                if a_ij != 0.0:
                    acc = acc + a_ij * k_j
            stage_w = w + h * acc
            if not np.all(np.isfinite(stage_w)):
                bad_stage = True
                break
            k.append(rhs(t + _DP_C[len(k) - 1] * h, stage_w))
        if not bad_stage:
            w_new = stage_w  # last stage uses the 5th-order weights
            k7 = k[6]
            err_vec = np.zeros_like(w)
            for e_i, k_i in zip(_DP_ERR, k):
                if e_i != 0.0:
                    err_vec = err_vec + e_i * k_i
            err_vec = h * err_vec
            scale = cfg.atol + cfg.rtol * np.maximum(np.abs(w), np.abs(w_new))
            err = float(np.sqrt(np.mean((err_vec / scale) ** 2)))
        if bad_stage or not (np.isfinite(err) and np.all(np.isfinite(w_new))):
            h *= 0.2
            continue

        if err <= 1.0:
            t = t + h
            w = w_new
            s_new = sig_of(w)
            ts.append(t)
            ws.append(w)
            ss.append(s_new)
            k1 = k7
            if watch and (s_prev * s_new < 0.0 or abs(s_new) <= tol):
                stopped_at = t
                break
            s_prev = s_new
            h *= min(5.0, max(0.2, 0.9 * err ** -0.2)) if err > 0.0 else 5.0
        else:
            h *= max(0.2, 0.9 * err ** -0.2)

    return np.asarray(ts), np.vstack(ws), np.asarray(ss), status, stopped_at


def _hermite(
    w0: np.ndarray, f0: np.ndarray, w1: np.ndarray, f1: np.ndarray, h: float, tau: float
) -> np.ndarray:
    """Cubic Hermite interpolant on [0, 1]."""
    t2 = tau * tau
    t3 = t2 * tau
    return (
        (2.0 * t3 - 3.0 * t2 + 1.0) * w0
        + (t3 - 2.0 * t2 + tau) * h * f0
        + (-2.0 * t3 + 3.0 * t2) * w1
        + (t3 - t2) * h * f1
    )


def _refine_crossing(
    level: Callable[[np.ndarray], float],
    t0: float,
    w0: np.ndarray,
    f0: np.ndarray,
    t1: float,
    w1: np.ndarray,
    f1: np.ndarray,
    refine_tol: float,
) -> tuple[float, np.ndarray]:
    """Bisect the Hermite interpolant for a sign change of `level`."""
    h = t1 - t0
    g_lo = level(w0)
    lo, hi = 0.0, 1.0
    if g_lo == 0.0:
        return t0, w0.copy()
    for _ in range(200):
        if h * (hi - lo) <= refine_tol:
            break
        mid = 0.5 * (lo + hi)
        w_mid = _hermite(w0, f0, w1, f1, h, mid)
        g_mid = level(w_mid)
        if g_mid == 0.0:
            lo = hi = mid
            break
        if (g_mid > 0.0) == (g_lo > 0.0):
            lo = mid
        else:
            hi = mid
    tau = 0.5 * (lo + hi)
    return t0 + tau * h, _hermite(w0, f0, w1, f1, h, tau)


def _scan_events(
    cl: ClosedLoopSystem,
    cfg: IntegratorConfig,
    T: np.ndarray,
    W: np.ndarray,
    S: np.ndarray,
) -> list[Event]:
    """Detect and refine level crossings between accepted steps."""
    n = cl.plant.n
    q = cl.plant.form.mat
    tol = cl.plant.sigma_tol
    cap = cl.plant.cap
    events: list[Event] = []
    if T.size == 0:
        return events

    rhs: Callable[[float, np.ndarray], np.ndarray] | None = None

    def get_rhs() -> Callable[[float, np.ndarray], np.ndarray]:
        nonlocal rhs
        if rhs is None:
            rhs = make_rhs(cl)
        return rhs

    def sig_of(w: np.ndarray) -> float:
        x = w[:n]
        return 0.5 * (float(x @ q @ x) - 1.0)

    def refine(i: int, level: Callable[[np.ndarray], float]) -> tuple[float, np.ndarray]:
        f = get_rhs()
        t0, t1 = float(T[i]), float(T[i + 1])
        w0, w1 = W[i], W[i + 1]
        return _refine_crossing(
            level, t0, w0, f(t0, w0), t1, w1, f(t1, w1), cfg.event_refine_tol
        )

    impact_done = False
    if abs(S[0]) <= tol:
        events.append(
            Event(
                t=float(T[0]),
                kind=EVENT_IMPACT,
                direction=DIRECTION_FALLING if S[0] >= 0.0 else DIRECTION_RISING,
                x=W[0, :n].copy(),
                sigma=float(S[0]),
            )
        )
        impact_done = True

    sig_change = (S[:-1] * S[1:] < 0.0) | ((S[1:] == 0.0) & (S[:-1] != 0.0))
    layer_change = np.zeros(S.size - 1, dtype=bool)
    if cap is not None:
        A = np.abs(S) - 1.0 / cap
        layer_change = (A[:-1] * A[1:] < 0.0) | ((A[1:] == 0.0) & (A[:-1] != 0.0))
    band_touch = np.abs(S[1:]) <= tol

    for i in np.nonzero(sig_change | layer_change | band_touch)[0]:
        if sig_change[i]:
            if S[i + 1] == 0.0:
                t_e, w_e = float(T[i + 1]), W[i + 1].copy()
            else:
                t_e, w_e = refine(int(i), sig_of)
            direction = DIRECTION_RISING if S[i + 1] > S[i] else DIRECTION_FALLING
            events.append(
                Event(
                    t=t_e,
                    kind=EVENT_SIGMA_CROSSING,
                    direction=direction,
                    x=w_e[:n].copy(),
                    sigma=sig_of(w_e),
                )
            )
            if not impact_done:
                events.append(
                    Event(
                        t=t_e,
                        kind=EVENT_IMPACT,
                        direction=direction,
                        x=w_e[:n].copy(),
                        sigma=sig_of(w_e),
                    )
                )
                impact_done = True
        elif band_touch[i] and not impact_done:
            events.append(
                Event(
                    t=float(T[i + 1]),
                    kind=EVENT_IMPACT,
                    direction=DIRECTION_FALLING if S[i] > 0.0 else DIRECTION_RISING,
                    x=W[i + 1, :n].copy(),
                    sigma=float(S[i + 1]),
                )
            )
            impact_done = True
        if layer_change[i]:
            a_next = abs(S[i + 1]) - 1.0 / cap
            if a_next == 0.0:
                t_e, w_e = float(T[i + 1]), W[i + 1].copy()
            else:
                t_e, w_e = refine(int(i), lambda w: abs(sig_of(w)) - 1.0 / cap)
            events.append(
                Event(
                    t=t_e,
                    kind=EVENT_LAYER_CROSSING,
                    direction=DIRECTION_ENTER if a_next < 0.0 else DIRECTION_EXIT,
                    x=w_e[:n].copy(),
                    sigma=sig_of(w_e),
                )
            )

    events.sort(key=lambda e: e.t)
    return events


def _instrument(
    cl: ClosedLoopSystem, T: np.ndarray, W: np.ndarray, metadata: dict
) -> Trajectory:
    """Compute the per-sample signal columns for merged samples."""
    plant = cl.plant
    n, m = plant.n, plant.m
    q = plant.form.mat
    X = W[:, :n]
    N = T.size

    sig = sigma_batch(X, plant.form)
    region = region_code_batch(sig, plant.cap, plant.sigma_tol)
    h = 0.5 * np.square(sig)
    h_storage = storage_batch(sig, plant.variant, plant.cap, plant.sigma_tol)

    if plant.input_constancy is Constancy.CONSTANT:
        b = np.asarray(plant.input_matrix(np.zeros(n)), dtype=float)
        Y = X @ (q @ b)
    else:
        Y = np.vstack([output_map(X[k], plant) for k in range(N)])

    load = cl.load
    if isinstance(load, StaticLoad):
        if load.gain_const is not None:
            U = -(Y @ load.gain_const.T)
        else:
            U = -np.vstack(
                [np.asarray(load.gain_fn(Y[k]), dtype=float) @ Y[k] for k in range(N)]
            )
    elif isinstance(load, LtiLoad):
        Z = W[:, n : n + load.state_dim]
        U = -(Z @ load.c + load.d * Y[:, 0]).reshape(N, 1)
    elif isinstance(load, OpenLoopSignal) and load.fn is not None:
        U = np.vstack([load.eval(float(t)) for t in T])
    else:
        U = np.zeros((N, m))

    supply = np.einsum("ij,ij->i", Y, U)

    if plant.damping_constancy is Constancy.CONSTANT:
        r = np.asarray(plant.damping(np.zeros(n), 0.0), dtype=float)
        qrq = q @ r @ q
        base = np.einsum("ij,jk,ik->i", X, qrq, X)
    else:
        base = np.empty(N)
        for k in range(N):
            qx = q @ X[k]
            base[k] = float(qx @ plant.damping(X[k], float(T[k])) @ qx)
    diss = dissipation_factor_batch(sig, plant.variant, plant.cap) * base

    return Trajectory(
        t=T,
        states=W,
        n=n,
        m=m,
        n_load=cl.load_dim,
        n_aux=cl.aux_dim,
        sigma=sig,
        region=region,
        h=h,
        h_storage=h_storage,
        outputs=Y,
        inputs=U,
        supply=supply,
        diss_rate=diss,
        variant=plant.variant,
        cap=plant.cap,
        sigma_tol=plant.sigma_tol,
        q_mat=q,
        metadata=metadata,
    )


def integrate(
    cl: ClosedLoopSystem, x0: np.ndarray, cfg: IntegratorConfig
) -> tuple[Trajectory, EventLog]:
    """Integrate a closed-loop system and return instrumented samples and events.

    Samples are taken at every `store_every`-th accepted step (plus the final
    step) and at every refined event point.  Numerical failures abort the run
    and are reported through trajectory metadata rather than raised.
    """
    x0 = np.asarray(x0, dtype=float).copy()
    if x0.shape != (cl.total_dim,):
        raise ValueError(
            f"initial state must have shape ({cl.total_dim},), got {x0.shape}"
        )
    plant = cl.plant
    run_warnings: list[str] = []
    if plant.variant is Variant.EXACT:
        run_warnings.append(
            "exact gain law: expect chattering near the singular level set"
        )

    gain_override = None
    if cfg.chatter_guard is not None:
        gain_override = _hysteresis_gain(
            plant.variant, plant.cap, plant.sigma_tol, cfg.chatter_guard
        )

    if gain_override is None and _fast_applicable(cl, cfg):
        T, W, S, status, stopped_at = _fast_rk4(cl, x0, cfg)
    else:
        rhs = make_rhs(cl, gain_override)
        if cfg.method == "rk4":
            T, W, S, status, stopped_at = _generic_rk4(cl, x0, cfg, rhs)
        else:
            T, W, S, status, stopped_at = _generic_rk45(cl, x0, cfg, rhs)

    # defensive truncation: keep the leading finite block
    finite = np.all(np.isfinite(W), axis=1) & np.isfinite(S)
    if not finite.all():
        first_bad = int(np.argmin(finite))
        T, W, S = T[:first_bad], W[:first_bad], S[:first_bad]
        if status == STATUS_OK:
            status = "aborted: non-finite state"

    events = _scan_events(cl, cfg, T, W, S)

    keep_idx = np.arange(0, T.size, cfg.store_every)
    if T.size and keep_idx[-1] != T.size - 1:
        keep_idx = np.append(keep_idx, T.size - 1)
    T_s, W_s = T[keep_idx], W[keep_idx]

    if events:
        t_ev = np.array([e.t for e in events])
        w_ev = np.empty((len(events), W.shape[1]))
        # reconstruct full interpolated states for event samples
        f = make_rhs(cl)
        for idx, e in enumerate(events):
            i = int(np.searchsorted(T, e.t, side="right")) - 1
            i = min(max(i, 0), T.size - 1)
            if abs(T[i] - e.t) <= 4e-15 * max(1.0, abs(e.t)) or i == T.size - 1:
                w_ev[idx] = W[i]
            else:
                t0, t1 = float(T[i]), float(T[i + 1])
                tau = (e.t - t0) / (t1 - t0)
                w_ev[idx] = _hermite(
                    W[i], f(t0, W[i]), W[i + 1], f(t1, W[i + 1]), t1 - t0, tau
                )
        T_m = np.concatenate([T_s, t_ev])
        W_m = np.vstack([W_s, w_ev])
        order = np.argsort(T_m, kind="stable")
        T_m, W_m = T_m[order], W_m[order]
        keep = np.concatenate(
            [[True], np.diff(T_m) > 4e-15 * np.maximum(1.0, np.abs(T_m[1:]))]
        )
        T_m, W_m = T_m[keep], W_m[keep]
    else:
        T_m, W_m = T_s, W_s

    metadata = {
        "status": status,
        "warnings": run_warnings,
        "stopped_on_impact": stopped_at,
        "method": cfg.method,
        "dt": cfg.dt,
        "t_final": cfg.t_final,
        "store_every": cfg.store_every,
    }
    traj = _instrument(cl, T_m, W_m, metadata)
    return traj, EventLog(events=events)
