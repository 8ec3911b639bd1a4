"""Closed-loop geomagnetic navigation: kinematics, gradients, headings, objective, mission loop."""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field, replace
from typing import TYPE_CHECKING, Optional, Sequence

import numpy as np

from geomagnav import calib
from geomagnav.angles import angle_diff, wrap_deg
from geomagnav.field import OBJECTIVE_ELEMENTS, FieldDomainError, GeoPosition, MagneticVector, World
from geomagnav.metrics import TRAJECTORY_COLUMNS, MissionResult, compute_metrics
from geomagnav.projection import LocalProjection

if TYPE_CHECKING:
    from geomagnav.talstm import TaLstmModel

EPS_DEN = 1e-6
EPS_OBJ = 1e-12
HEADING_EPS = 1e-15
BOOTSTRAP_HEADINGS = (0.0, 90.0)
POLICIES = ("analytic", "talstm", "calibrated")


class NotReadyError(RuntimeError):
    """Too little history to estimate gradients."""


class DegenerateHeadingError(ArithmeticError):
    """The heading is undefined (current and destination signatures coincide)."""


class PolicyError(RuntimeError):
    pass


@dataclass(frozen=True)
class GradientEstimate:
    """D and I gradients in degrees per meter along north (x) and east (y)."""

    g_dx: float
    g_dy: float
    g_ix: float
    g_iy: float
    valid: bool = True

    @classmethod
    def invalid(cls) -> GradientEstimate:
        return cls(math.nan, math.nan, math.nan, math.nan, valid=False)


@dataclass(frozen=True)
class ObjectiveVector:
    elements: tuple[float, ...]
    total: float
    excluded: tuple[str, ...] = ()


@dataclass(frozen=True)
class SpeedSchedule:
    v0_kmh: float = 50.0
    decay: float = 0.9
    decay_interval: int = 5
    box_deg: float = 0.5
    dt_h: float = 0.1

    def __post_init__(self):
        if not self.v0_kmh > 0.0:
            raise ValueError("v0 must be positive")
        if not 0.0 < self.decay <= 1.0:
            raise ValueError("decay rate must lie in (0, 1]")
        if int(self.decay_interval) != self.decay_interval or self.decay_interval < 1:
            raise ValueError("decay interval must be an integer >= 1")
        if not self.dt_h > 0.0:
            raise ValueError("step duration must be positive")


@dataclass(frozen=True)
class NavParams:
    window: int = 20
    eps_den: float = EPS_DEN
    # two successive displacements must span an angle with |sin| above this
    min_baseline_sin: float = 0.1
    eps_obj: float = EPS_OBJ
    bootstrap: tuple[float, float] = BOOTSTRAP_HEADINGS


@dataclass
class NavState:
    position: GeoPosition
    heading_deg: float
    speed: float
    step: int
    sample: MagneticVector
    history: deque = field(default_factory=lambda: deque(maxlen=3))


@dataclass(frozen=True)
class Policy:
    kind: str = "analytic"
    model: Optional[TaLstmModel] = None
    sigma2_floor: float = calib.SIGMA2_FLOOR
    eta_min: float = calib.ETA_MIN
    # analytic policy only: std of a random per-window offset added to the
    # commanded heading (used to generate varied training flights)
    exploration_deg: float = 0.0
    exploration_seed: int = 0

    def __post_init__(self):
        if self.kind not in POLICIES:
            raise PolicyError(f"unknown policy {self.kind!r}; expected one of {POLICIES}")
        if not self.exploration_deg >= 0.0:
            raise PolicyError("exploration must be >= 0")

    def check(self, window: int) -> None:
        if self.kind == "analytic":
            return
        if self.model is None:
            raise PolicyError(f"policy {self.kind!r} needs a trained TA-LSTM model")
        if not self.model.trained:
            raise PolicyError(f"policy {self.kind!r}: model has not been trained")
        if self.model.T != window:
            raise PolicyError(f"model window T={self.model.T} differs from navigation window {window}")


def step_kinematics(s: NavState, theta_deg: float, dt: float, proj: LocalProjection) -> GeoPosition:
    """Advance V*dt along the heading; x is north, y is east."""
    if not dt > 0.0:
        raise ValueError("dt must be positive")
    dist = s.speed * 1000.0 * dt
    th = math.radians(theta_deg)
    return GeoPosition.from_xy(s.position.x_m + math.cos(th) * dist,
                               s.position.y_m + math.sin(th) * dist, proj)


def estimate_gradients(history: Sequence, eps_den: float = EPS_DEN,
                       min_baseline_sin: float = 0.1) -> GradientEstimate:
    """Planar D/I gradients from the last three (position, sample) records.

    The two successive displacements give two directional differences; the
    2x2 system is solved for the north/east partials.  For an axis-aligned
    north-then-east pair this is the plain backward-difference quotient on
    each axis.  Nearly collinear or tiny displacements give an invalid
    estimate.
    """
    if len(history) < 3:
        raise NotReadyError(f"need 3 history records, have {len(history)}")
    (p0, s0), (p1, s1), (p2, s2) = list(history)[-3:]
    d1 = (p1.x_m - p0.x_m, p1.y_m - p0.y_m)
    d2 = (p2.x_m - p1.x_m, p2.y_m - p1.y_m)
    n1, n2 = math.hypot(*d1), math.hypot(*d2)
    if n1 < eps_den or n2 < eps_den:
        return GradientEstimate.invalid()
    det = d1[0] * d2[1] - d1[1] * d2[0]
    if abs(det) < min_baseline_sin * n1 * n2:
        return GradientEstimate.invalid()
    dd1 = float(angle_diff(s1.decl_deg, s0.decl_deg))
    dd2 = float(angle_diff(s2.decl_deg, s1.decl_deg))
    di1 = s1.incl_deg - s0.incl_deg
    di2 = s2.incl_deg - s1.incl_deg
    # Cramer's rule on [d1; d2] g = delta
    g_dx = (dd1 * d2[1] - dd2 * d1[1]) / det
    g_dy = (d1[0] * dd2 - d2[0] * dd1) / det
    g_ix = (di1 * d2[1] - di2 * d1[1]) / det
    g_iy = (d1[0] * di2 - d2[0] * di1) / det
    est = (g_dx, g_dy, g_ix, g_iy)
    if not all(math.isfinite(v) for v in est):
        return GradientEstimate.invalid()
    return GradientEstimate(*est)


def analytic_heading(sample: tuple[float, float], dest: tuple[float, float], g: GradientEstimate) -> float:
    """Heading that drives (D, I) toward the destination signature.

    ``sample`` and ``dest`` are (D, I) pairs.  The two-argument arctangent is
    taken with the sign of the gradient Jacobian folded in, so the result is
    the direction of the linearised step that cancels both errors (for a
    negative Jacobian determinant this is the literal atan2 form).
    """
    if not g.valid:
        raise ValueError("gradient estimate is invalid")
    e_d = float(angle_diff(sample[0], dest[0]))
    e_i = sample[1] - dest[1]
    num = e_i * g.g_dx - e_d * g.g_ix
    den = e_d * g.g_iy - e_i * g.g_dy
    if abs(num) < HEADING_EPS and abs(den) < HEADING_EPS:
        raise DegenerateHeadingError("at-destination degeneracy")
    det = g.g_dx * g.g_iy - g.g_dy * g.g_ix
    if det > 0.0:
        num, den = -num, -den
    return wrap_deg(math.degrees(math.atan2(num, den)))


def objective(mk: MagneticVector, md: MagneticVector, m0: MagneticVector,
              eps_obj: float = EPS_OBJ) -> ObjectiveVector:
    k, d, o = mk.objective_vector(), md.objective_vector(), m0.objective_vector()
    num = k - d
    den = o - d
    # D is an angle
    num[3] = angle_diff(k[3], d[3])
    den[3] = angle_diff(o[3], d[3])
    elems, excluded = [], []
    for name, a, b in zip(OBJECTIVE_ELEMENTS, num, den):
        if not abs(b) >= eps_obj:
            elems.append(math.nan)
            excluded.append(name)
        else:
            elems.append(float(a * a / (b * b)))
    used = [v for v in elems if not math.isnan(v)]
    if used:
        total = float(sum(used) / len(used))
    else:
        # no usable normalisation: origin and destination signatures coincide
        total = 0.0 if np.allclose(num, 0.0, atol=eps_obj, equal_nan=True) else math.inf
    return ObjectiveVector(tuple(elems), total, tuple(excluded))


def should_terminate(obj: ObjectiveVector, eps: float, step: int, max_steps: int) -> Optional[str]:
    """'success', 'budget-exhausted', or None to keep going."""
    if obj.total <= eps:
        return "success"
    if step >= max_steps:
        return "budget-exhausted"
    return None


def speed_update(sched: SpeedSchedule, pos: GeoPosition, dest: GeoPosition, k: int, T: int) -> float:
    """Speed for within-window step k (1..T); decays only inside the arrival box."""
    if not 1 <= k <= T:
        raise ValueError(f"window index k={k} outside [1, {T}]")
    dlat = abs(pos.lat_deg - dest.lat_deg)
    dlon = abs(wrap_deg(pos.lon_deg - dest.lon_deg))
    if dlat <= sched.box_deg and dlon <= sched.box_deg:
        return min(sched.v0_kmh, sched.v0_kmh * sched.decay * math.exp((T - k) // sched.decay_interval))
    return sched.v0_kmh


def bearing_deg(a: GeoPosition, b: GeoPosition) -> float:
    return wrap_deg(math.degrees(math.atan2(b.y_m - a.y_m, b.x_m - a.x_m)))


def encode_step(pos: GeoPosition, sample: MagneticVector, dest: GeoPosition,
                dest_sample: MagneticVector) -> np.ndarray:
    """Network input for one step: position and (D, I) relative to the destination."""
    return np.array([
        pos.x_m - dest.x_m,
        pos.y_m - dest.y_m,
        float(angle_diff(sample.decl_deg, dest_sample.decl_deg)),
        sample.incl_deg - dest_sample.incl_deg,
    ])


def run_mission(world: World, origin: GeoPosition, destinations: Sequence[GeoPosition],
                policy: Policy, sched: SpeedSchedule, eps: float, max_steps: int,
                nav: NavParams = NavParams(), proj: Optional[LocalProjection] = None) -> MissionResult:
    """Fly from ``origin`` through each destination in turn.

    Positions given without projected coordinates are projected about the
    origin.  Every leg renormalises the objective at the position where it
    starts.  A leg that exhausts ``max_steps`` ends the mission.
    """
    from geomagnav.talstm import DeploymentContext, predict_window

    T = nav.window
    policy.check(T)
    if proj is None:
        proj = LocalProjection(origin.lat_deg, origin.lon_deg)
    origin = GeoPosition.from_latlon(origin.lat_deg, origin.lon_deg, proj)
    dests = [GeoPosition.from_latlon(d.lat_deg, d.lon_deg, proj) for d in destinations]
    if not dests:
        raise ValueError("mission needs at least one destination")
    waypoints = (origin, *dests)
    reference = None
    if policy.kind == "calibrated" and policy.model.reference_samples is not None:
        try:
            reference = calib.fit_reference(policy.model.reference_samples, policy.sigma2_floor)
        except calib.NotReadyError:
            reference = None

    cols: dict = {c: [] for c in TRAJECTORY_COLUMNS}
    nan = math.nan

    def record(leg, st: NavState, obj, theta_cmd=nan, theta_a=nan, theta_p=nan, theta_t=nan,
               eta=nan, e_n=nan, mu=nan, sigma2=nan, speed=nan):
        p, m = st.position, st.sample
        vals = (st.step, leg, p.lat_deg, p.lon_deg, p.x_m, p.y_m,
                theta_cmd, theta_a, theta_p, theta_t, eta, e_n, mu, sigma2, speed,
                obj.total, *obj.elements, m.bx_nt, m.by_nt, m.bz_nt, m.decl_deg, m.incl_deg)
        for c, v in zip(TRAJECTORY_COLUMNS, vals):
            cols[c].append(v)

    def finish(outcome, leg_outcomes, message=""):
        table = {c: np.asarray(v, dtype=int if c in ("step", "leg") else float) for c, v in cols.items()}
        metrics = compute_metrics(table, waypoints) if len(table["step"]) else None
        return MissionResult(table, outcome, metrics, waypoints, policy.kind, message, tuple(leg_outcomes))

    try:
        sample = world.field_at(origin)
    except FieldDomainError as exc:
        return finish("aborted", [], f"origin outside field domain: {exc}")
    state = NavState(origin, nan, sched.v0_kmh, 0, sample)
    state.history.append((origin, sample))
    try:
        first_dest_sample = world.field_at(dests[0])
    except FieldDomainError as exc:
        record(0, state, ObjectiveVector((nan,) * 5, nan, ()))
        return finish("aborted", [], f"destination 1 outside field domain: {exc}")
    record(0, state, objective(sample, first_dest_sample, sample, nav.eps_obj))

    explore = np.random.default_rng(policy.exploration_seed) if policy.exploration_deg > 0.0 else None
    offset = 0.0
    grad: Optional[GradientEstimate] = None
    theta_analytic_prev = nan
    leg_outcomes: list[str] = []
    for leg, dest in enumerate(dests):
        try:
            dest_sample = world.field_at(dest)
        except FieldDomainError as exc:
            return finish("aborted", leg_outcomes, f"destination {leg + 1} outside field domain: {exc}")
        m0 = state.sample
        obj = objective(state.sample, dest_sample, m0, nav.eps_obj)
        if should_terminate(obj, eps, 0, max_steps) == "success":
            leg_outcomes.append("success")
            continue
        ctx = DeploymentContext() if policy.model is not None else None
        window_x: list = []
        window_teacher: list = []
        window_abs_err: list = []
        prediction: Optional[np.ndarray] = None
        leg_step = 0
        outcome = None
        while outcome is None:
            leg_step += 1
            k = (leg_step - 1) % T + 1
            prev_pos, prev_sample = state.position, state.sample

            if state.step < len(nav.bootstrap):
                theta_a = nav.bootstrap[state.step]
            else:
                try:
                    g = estimate_gradients(state.history, nav.eps_den, nav.min_baseline_sin)
                except NotReadyError:
                    g = GradientEstimate.invalid()
                if g.valid:
                    grad = g
                theta_a = theta_analytic_prev
                if grad is not None:
                    try:
                        theta_a = analytic_heading((prev_sample.decl_deg, prev_sample.incl_deg),
                                                   (dest_sample.decl_deg, dest_sample.incl_deg), grad)
                    except DegenerateHeadingError:
                        pass
            if math.isnan(theta_a):
                theta_a = state.heading_deg if not math.isnan(state.heading_deg) else nav.bootstrap[-1]
            theta_analytic_prev = theta_a

            theta_p = float(prediction[k - 1]) if prediction is not None else nan
            # eta is only defined for policies that weigh the analytic heading
            eta = nan if policy.kind == "talstm" else 1.0
            e_n, mu, sigma2 = nan, nan, nan
            if explore is not None and k == 1:
                offset = float(explore.normal(0.0, policy.exploration_deg))
            if policy.kind == "analytic" or math.isnan(theta_p):
                theta_cmd = wrap_deg(theta_a + offset) if state.step >= len(nav.bootstrap) else theta_a
            elif policy.kind == "talstm":
                theta_cmd = theta_p
            else:
                window_abs_err.append(abs(float(angle_diff(theta_a, theta_p))))
                e_n = float(np.mean(window_abs_err))
                if reference is not None:
                    mu, sigma2 = reference.mu, reference.sigma2
                    eta = calib.anomaly_weight(e_n, reference, policy.eta_min)
                theta_cmd = calib.blend_heading(eta, theta_a, theta_p)
            if not math.isfinite(theta_cmd):
                return finish("aborted", leg_outcomes, f"non-finite heading at step {state.step + 1}")

            state.speed = speed_update(sched, prev_pos, dest, k, T)
            new_pos = step_kinematics(state, theta_cmd, sched.dt_h, proj)
            try:
                new_sample = world.field_at(new_pos)
            except FieldDomainError as exc:
                return finish("aborted", leg_outcomes, f"left the field domain at step {state.step + 1}: {exc}")
            state.position, state.sample = new_pos, new_sample
            state.heading_deg = theta_cmd
            state.step += 1
            state.history.append((new_pos, new_sample))
            obj = objective(new_sample, dest_sample, m0, nav.eps_obj)
            record(leg, state, obj, theta_cmd, theta_a, theta_p, bearing_deg(prev_pos, dest),
                   eta, e_n, mu, sigma2, state.speed)

            if ctx is not None:
                window_x.append(encode_step(prev_pos, prev_sample, dest, dest_sample))
                window_teacher.append(theta_cmd)
                if len(window_x) == T:
                    prediction, _, ctx = predict_window(policy.model, np.array(window_x),
                                                        np.array(window_teacher), ctx)
                    if not np.all(np.isfinite(prediction)):
                        return finish("aborted", leg_outcomes, f"model produced non-finite headings at step {state.step}")
                    window_x, window_teacher, window_abs_err = [], [], []
            outcome = should_terminate(obj, eps, leg_step, max_steps)
        leg_outcomes.append(outcome)
        if outcome != "success":
            return finish(outcome, leg_outcomes)
    return finish("success", leg_outcomes)
