"""Feedback-linearization force controller with an adaptable PI inner loop.

The control law cancels the nominal hydraulic force dynamics and imposes
linear PI error dynamics on the inner force loop:

    u = (f_r_dot + Kp*e + Ki*int_e - h) / g,   e = f_r - f_h.

The nominal model takes C1 = C2 = 1 and d = 0. A policy may add bounded
gain corrections (dKp, dKi) on top of the base gains. Two error channels
are tracked every step: the inner-loop error e_h = f_r - f_h that drives
the PI terms, and the task error e_l = f_r - f_l used by the reward and
the contraction certificate.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import plant as plant_mod
from .plant import HydraulicParams, PlantState

# Policy correction bounds (gain units).
DKP_MIN, DKP_MAX = 0.0, 75.0
DKI_MIN, DKI_MAX = 0.0, 10.0


@dataclass
class FlGains:
    """Base PI gains plus clamped policy corrections."""

    kp: float = 15.0
    ki: float = 5.0
    dkp: float = 0.0
    dki: float = 0.0

    def __post_init__(self):
        self.dkp = float(np.clip(self.dkp, DKP_MIN, DKP_MAX))
        self.dki = float(np.clip(self.dki, DKI_MIN, DKI_MAX))

    @property
    def kp_eff(self) -> float:
        return self.kp + self.dkp

    @property
    def ki_eff(self) -> float:
        return self.ki + self.dki


def apply_gain_action(gains: FlGains, action) -> FlGains:
    """Map a policy action in [-1, 1]^2 affinely onto the correction bounds."""
    a = np.asarray(action, dtype=float)
    if a.shape != (2,) or not np.all(np.isfinite(a)):
        raise ValueError("action must be two finite values")
    a = np.clip(a, -1.0, 1.0)
    dkp = DKP_MIN + (a[0] + 1.0) / 2.0 * (DKP_MAX - DKP_MIN)
    dki = DKI_MIN + (a[1] + 1.0) / 2.0 * (DKI_MAX - DKI_MIN)
    return FlGains(gains.kp, gains.ki, dkp, dki)


def default_g_min(params: HydraulicParams) -> float:
    """Singularity floor: 1% of |g| at mid-stroke, both chambers at p_s/2."""
    mid = plant_mod.PlantState(0.0, 0.0, 0.0, 0.0, params.p_s / 2.0,
                               params.p_s / 2.0, params.L_c / 2.0, 0.0)
    _, g_mid, _ = plant_mod.force_dynamics(mid, 0.0, params)
    return 0.01 * abs(g_mid)


def default_integral_bound(params: HydraulicParams, ki_default: float = 5.0) -> float:
    """Anti-windup clamp sized so the integral term alone can reach 2*u_max."""
    mid = plant_mod.PlantState(0.0, 0.0, 0.0, 0.0, params.p_s / 2.0,
                               params.p_s / 2.0, params.L_c / 2.0, 0.0)
    _, g_typ, _ = plant_mod.force_dynamics(mid, 0.0, params)
    return 2.0 * params.u_max * abs(g_typ) / ki_default


@dataclass
class ControllerState:
    """Mutable inner-loop state owned by a single control loop."""

    integral: float = 0.0          # int of e_h dt [N*s]
    integral_bound: float = np.inf
    prev_u_nom: float = 0.0
    e_h: float = 0.0
    e_l: float = 0.0
    prev_f_r: float = 0.0
    singular_events: int = 0

    def reset(self):
        self.integral = 0.0
        self.prev_u_nom = 0.0
        self.e_h = 0.0
        self.e_l = 0.0
        self.prev_f_r = 0.0
        self.singular_events = 0


def fl_control_value(
    x: np.ndarray,
    f_r: float,
    f_r_dot: float,
    kp_eff: float,
    ki_eff: float,
    integral: float,
    params: HydraulicParams,
    g_min: float,
    prev_u_nom: float = 0.0,
) -> tuple[float, bool]:
    """Pure FL law evaluation at a state vector; no side effects.

    Returns (u_nom, singular). This is the map the certificate
    differentiates for the feedback Jacobian, so it must stay free of
    stored state besides the explicit integral argument.
    """
    state = PlantState.from_array(x)
    e_h = f_r - state.f_h
    # g depends on sign(u); with the closure form g > 0 on both branches, so
    # sign(u) = sign of the numerator. Evaluate h with the nominal model.
    h, g_pos, _ = plant_mod.force_dynamics(state, 1.0, params)
    numerator = f_r_dot + kp_eff * e_h + ki_eff * integral - h
    g = g_pos
    if numerator < 0.0:
        _, g_neg, _ = plant_mod.force_dynamics(state, -1.0, params)
        g = g_neg
    if abs(g) < g_min:
        return prev_u_nom, True
    return numerator / g, False


def fl_control(
    state: PlantState,
    f_r: float,
    f_r_dot: float,
    gains: FlGains,
    cs: ControllerState,
    params: HydraulicParams,
    dt: float,
    g_min: float | None = None,
) -> float:
    """One inner-loop step: update errors and integral, return u_nom.

    The integral accumulates e_h * dt under an anti-windup clamp. On a
    singular linearization (|g| below the floor, possible near pressure
    saturation) the previous u_nom is held and the event counted.
    """
    if g_min is None:
        g_min = default_g_min(params)
    cs.e_h = f_r - state.f_h
    cs.e_l = f_r - state.f_l
    u_nom, singular = fl_control_value(
        state.as_array(), f_r, f_r_dot, gains.kp_eff, gains.ki_eff,
        cs.integral, params, g_min, cs.prev_u_nom)
    if singular:
        cs.singular_events += 1
    cs.integral = float(np.clip(cs.integral + cs.e_h * dt,
                                -cs.integral_bound, cs.integral_bound))
    cs.prev_u_nom = u_nom
    cs.prev_f_r = f_r
    return u_nom
