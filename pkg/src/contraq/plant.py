"""Analytic hydraulic actuator + spring environment, the ground-truth system.

A double-acting asymmetric cylinder drives a load spring through a servo
valve. The chamber pressures (p_a, p_b), piston position x_p and velocity
x_p_dot are the internal state; forces and their rates are derived outputs:

    f_h = A_p * p_a - alpha * A_p * p_b        hydraulic force
    f_l = k_spring * (x_p - L_c / 2)           load-cell force (spring rest
                                               at mid-stroke, so f_l is
                                               sign-symmetric about zero)

Pressure dynamics follow chamber continuity with linearized valve flows
q = K_v * u * sqrt(clamped dp); the piston obeys Newton dynamics against
the spring and viscous friction. Uncertainty enters as scale factors on
the compression (C1) and valve (C2) terms plus a lumped valve-current
disturbance d, so the hydraulic force rate is exactly

    f_h_dot = C1 * h + C2 * g * u + g * d.

All units SI: Pa, m, N, s, A.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

STATE_NAMES = ("f_h", "f_h_dot", "f_l", "f_l_dot", "p_a", "p_b", "x_p", "x_p_dot")
N_STATES = 8


class SimulationDiverged(RuntimeError):
    """Integration produced a non-finite state; carries the last valid one."""

    def __init__(self, message, last_valid=None):
        super().__init__(message)
        self.last_valid = last_valid


@dataclass(frozen=True)
class HydraulicParams:
    """Bench constants; the defaults are the nominal rig values."""

    beta_e: float = 1.34e9        # fluid bulk modulus [Pa]
    A_p: float = 2e-4             # chamber-A piston area [m^2]
    alpha: float = 0.609          # chamber area ratio
    L_c: float = 0.08             # max piston displacement [m]
    p_s: float = 16e6             # source pressure [Pa]
    p_t: float = 0.0              # tank pressure [Pa]
    q_n: float = 1.67e-4          # valve nominal flow [m^3/s]
    u_n: float = 0.05             # valve nominal current [A]
    dp_n: float = 7e6             # valve nominal pressure drop [Pa]
    k_spring: float = 20000.0     # environment spring stiffness [N/m]
    # Simulator-only constants (not bench measurements):
    m_piston: float = 2.0         # lumped moving mass [kg]
    b_viscous: float = 300.0      # viscous friction [N*s/m]
    v_dead: float = 8e-7          # chamber dead volume [m^3] (0.05*A_p*L_c)
    u_max: float = 0.1            # valve current saturation [A] (2*u_n)

    def __post_init__(self):
        if not (0.0 < self.alpha <= 1.0):
            raise ValueError("alpha must be in (0, 1]")
        if self.p_s <= self.p_t:
            raise ValueError("source pressure must exceed tank pressure")
        if self.p_t < 0.0:
            raise ValueError("tank pressure must be >= 0")
        for name in ("beta_e", "A_p", "L_c", "p_s", "q_n", "u_n", "dp_n",
                     "k_spring", "m_piston", "b_viscous", "v_dead", "u_max"):
            if getattr(self, name) <= 0.0:
                raise ValueError(f"{name} must be strictly positive")


@dataclass(frozen=True)
class PlantState:
    """The 8 measured channels [f_h, f_h_dot, f_l, f_l_dot, p_a, p_b, x_p, x_p_dot]."""

    f_h: float
    f_h_dot: float
    f_l: float
    f_l_dot: float
    p_a: float
    p_b: float
    x_p: float
    x_p_dot: float

    def as_array(self) -> np.ndarray:
        return np.array([self.f_h, self.f_h_dot, self.f_l, self.f_l_dot,
                         self.p_a, self.p_b, self.x_p, self.x_p_dot])

    @classmethod
    def from_array(cls, x) -> "PlantState":
        x = np.asarray(x, dtype=float)
        if x.shape != (N_STATES,):
            raise ValueError(f"state vector must have shape ({N_STATES},)")
        return cls(*[float(v) for v in x])

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.as_array())))


@dataclass(frozen=True)
class UncertaintyConfig:
    """Plant-truth uncertainty: scale factors, disturbance, sensor noise.

    ``d_kind`` selects a constant offset or band-limited noise (first-order
    filtered white noise with cutoff ``d_cutoff_hz`` and stationary std
    ``d_value``) on the effective valve current. ``noise_std`` holds one
    measurement-noise std per state channel.
    """

    C1: float = 1.0
    C2: float = 1.0
    d_kind: str = "constant"      # "constant" | "band-limited"
    d_value: float = 0.0          # offset [A] or noise std [A]
    d_cutoff_hz: float = 5.0
    noise_std: tuple = (0.0,) * N_STATES

    def __post_init__(self):
        if self.C1 <= 0.0 or self.C2 <= 0.0:
            raise ValueError("C1 and C2 must be > 0")
        if self.d_kind not in ("constant", "band-limited"):
            raise ValueError(f"unknown disturbance kind {self.d_kind!r}")
        if len(self.noise_std) != N_STATES or any(s < 0.0 for s in self.noise_std):
            raise ValueError("noise_std needs 8 nonnegative entries")


NOMINAL = UncertaintyConfig()


def valve_gain(params: HydraulicParams) -> float:
    """Linearized valve gain K_v = q_n / (u_n * sqrt(dp_n / 2))."""
    return params.q_n / (params.u_n * np.sqrt(params.dp_n / 2.0))


def chamber_volumes(x_p: float, params: HydraulicParams) -> tuple[float, float]:
    v_a = params.v_dead + params.A_p * x_p
    v_b = params.v_dead + params.alpha * params.A_p * (params.L_c - x_p)
    if v_a <= 0.0 or v_b <= 0.0:
        raise ValueError(f"non-positive chamber volume at x_p={x_p}")
    return v_a, v_b


def _sqrt_clamped(dp: float) -> float:
    # Transient pressure overshoot must not take a root of a negative number.
    return np.sqrt(dp) if dp > 0.0 else 0.0


def force_dynamics(
    state: PlantState,
    u: float,
    params: HydraulicParams,
    unc: UncertaintyConfig = NOMINAL,
    d: float | None = None,
) -> tuple[float, float, float]:
    """Hydraulic force rate terms: returns (h, g, f_h_dot).

    h is the compression term from piston motion; g is the valve-path gain,
    with the pressure-difference pair selected by sign(u) (u >= 0 branch at
    exactly zero). f_h_dot = C1*h + C2*g*u + g*d.
    """
    if not state.is_finite():
        raise ValueError("non-finite plant state")
    if d is None:
        d = unc.d_value if unc.d_kind == "constant" else 0.0
    v_a, v_b = chamber_volumes(state.x_p, params)
    k_v = valve_gain(params)
    A_p, alpha, beta = params.A_p, params.alpha, params.beta_e

    h = -beta * A_p**2 * (1.0 / v_a + alpha**2 / v_b) * state.x_p_dot
    if u >= 0.0:
        g = beta * k_v * A_p * (_sqrt_clamped(params.p_s - state.p_a) / v_a
                                + alpha * _sqrt_clamped(state.p_b - params.p_t) / v_b)
    else:
        g = beta * k_v * A_p * (_sqrt_clamped(state.p_a - params.p_t) / v_a
                                + alpha * _sqrt_clamped(params.p_s - state.p_b) / v_b)
    f_h_dot = unc.C1 * h + unc.C2 * g * u + g * d
    return float(h), float(g), float(f_h_dot)


def _internal_rates(
    p_a: float, p_b: float, x_p: float, x_p_dot: float,
    u: float, params: HydraulicParams, unc: UncertaintyConfig, d: float,
) -> tuple[float, float, float]:
    """Pressure and piston-acceleration rates from the continuity closure."""
    v_a, v_b = chamber_volumes(x_p, params)
    k_v = valve_gain(params)
    A_p, alpha, beta = params.A_p, params.alpha, params.beta_e
    u_eff = unc.C2 * u + d
    if u_eff >= 0.0:
        q_a = k_v * u_eff * _sqrt_clamped(params.p_s - p_a)   # supply -> A
        q_b = k_v * u_eff * _sqrt_clamped(p_b - params.p_t)   # B -> tank
    else:
        q_a = k_v * u_eff * _sqrt_clamped(p_a - params.p_t)   # A -> tank
        q_b = k_v * u_eff * _sqrt_clamped(params.p_s - p_b)   # supply -> B
    p_a_dot = (beta / v_a) * (q_a - unc.C1 * A_p * x_p_dot)
    p_b_dot = (beta / v_b) * (unc.C1 * alpha * A_p * x_p_dot - q_b)
    f_h = A_p * p_a - alpha * A_p * p_b
    f_l = params.k_spring * (x_p - params.L_c / 2.0)
    x_p_ddot = (f_h - f_l - params.b_viscous * x_p_dot) / params.m_piston
    return p_a_dot, p_b_dot, x_p_ddot


def derived_outputs(p_a: float, p_b: float, x_p: float, params: HydraulicParams) -> tuple[float, float]:
    f_h = params.A_p * p_a - params.alpha * params.A_p * p_b
    f_l = params.k_spring * (x_p - params.L_c / 2.0)
    return f_h, f_l


def step(
    state: PlantState,
    u: float,
    dt: float,
    params: HydraulicParams,
    unc: UncertaintyConfig = NOMINAL,
    d: float | None = None,
) -> PlantState:
    """One explicit-Euler step of the internal state at time step dt.

    u is clamped to +-u_max; pressures to [p_t, p_s]; x_p to [0, L_c] with
    velocity zeroed at the stops. Force-rate channels are backward
    differences of the derived forces.
    """
    if dt <= 0.0:
        raise ValueError("dt must be positive")
    if not state.is_finite():
        raise ValueError("non-finite plant state")
    if d is None:
        d = unc.d_value if unc.d_kind == "constant" else 0.0

    u = float(np.clip(u, -params.u_max, params.u_max))
    p_a_dot, p_b_dot, x_p_ddot = _internal_rates(
        state.p_a, state.p_b, state.x_p, state.x_p_dot, u, params, unc, d)

    p_a = float(np.clip(state.p_a + dt * p_a_dot, params.p_t, params.p_s))
    p_b = float(np.clip(state.p_b + dt * p_b_dot, params.p_t, params.p_s))
    x_p_dot = state.x_p_dot + dt * x_p_ddot
    x_p = state.x_p + dt * state.x_p_dot
    if x_p <= 0.0:
        x_p, x_p_dot = 0.0, max(x_p_dot, 0.0)
    elif x_p >= params.L_c:
        x_p, x_p_dot = params.L_c, min(x_p_dot, 0.0)

    f_h, f_l = derived_outputs(p_a, p_b, x_p, params)
    new = PlantState(
        f_h=f_h,
        f_h_dot=(f_h - state.f_h) / dt,
        f_l=f_l,
        f_l_dot=(f_l - state.f_l) / dt,
        p_a=p_a,
        p_b=p_b,
        x_p=x_p,
        x_p_dot=x_p_dot,
    )
    if not new.is_finite():
        raise SimulationDiverged("plant state became non-finite", last_valid=state)
    return new


def measure(
    state: PlantState,
    unc: UncertaintyConfig = NOMINAL,
    rng: np.random.Generator | None = None,
) -> PlantState:
    """Sensor model: per-channel Gaussian noise; exact when noise_std is zero."""
    stds = np.asarray(unc.noise_std, dtype=float)
    if not np.any(stds > 0.0):
        return state
    if rng is None:
        raise ValueError("measurement noise requires a random generator")
    noisy = state.as_array() + stds * rng.standard_normal(N_STATES)
    return PlantState.from_array(noisy)


def equilibrium_state(params: HydraulicParams, p_a: float | None = None,
                      p_b: float | None = None) -> PlantState:
    """Rest state with the spring balancing the hydraulic force at u = 0."""
    if p_a is None:
        p_a = params.p_s / 2.0
    if p_b is None:
        p_b = params.p_s / 2.0
    f_h = params.A_p * p_a - params.alpha * params.A_p * p_b
    x_p = params.L_c / 2.0 + f_h / params.k_spring
    if not (0.0 <= x_p <= params.L_c):
        raise ValueError("equilibrium piston position outside the stroke")
    f_l = params.k_spring * (x_p - params.L_c / 2.0)
    return PlantState(f_h, 0.0, f_l, 0.0, p_a, p_b, x_p, 0.0)


def reset_state(params: HydraulicParams) -> PlantState:
    """Episode start: piston at mid-stroke, both chambers at p_s / 2."""
    p = params.p_s / 2.0
    f_h, f_l = derived_outputs(p, p, params.L_c / 2.0, params)
    return PlantState(f_h, 0.0, f_l, 0.0, p, p, params.L_c / 2.0, 0.0)


def derivative_8(
    state: PlantState,
    u: float,
    params: HydraulicParams,
    unc: UncertaintyConfig = NOMINAL,
    d: float | None = None,
) -> np.ndarray:
    """Time derivative of the full 8-vector under the (possibly nominal) model.

    Used as the analytic dynamics model for validation and as an ablation
    alternative to the learned surrogate. Rate-channel second derivatives
    come from differentiating the derived outputs:
        d(f_h_dot)/dt -> A_p * (p_a_ddot - alpha p_b_ddot) is unavailable in
    closed form cheaply, so the rate channels evolve as the derivatives of
    the underlying closure: f_h_dot and f_l_dot entries of the output are
    the closure's current force rates, and their own slots advance the
    integration consistently when used in an Euler rollout (see
    ``analytic_rollout`` in the surrogate module).
    """
    if d is None:
        d = unc.d_value if unc.d_kind == "constant" else 0.0
    u = float(np.clip(u, -params.u_max, params.u_max))
    p_a_dot, p_b_dot, x_p_ddot = _internal_rates(
        state.p_a, state.p_b, state.x_p, state.x_p_dot, u, params, unc, d)
    A_p, alpha = params.A_p, params.alpha
    f_h_dot = A_p * p_a_dot - alpha * A_p * p_b_dot
    f_l_dot = params.k_spring * state.x_p_dot
    # Second force derivatives via the chain rule on the closure outputs.
    eps = 1e-7
    s2 = PlantState(
        state.f_h + eps * f_h_dot,
        state.f_h_dot,
        state.f_l + eps * f_l_dot,
        state.f_l_dot,
        state.p_a + eps * p_a_dot,
        state.p_b + eps * p_b_dot,
        state.x_p + eps * state.x_p_dot,
        state.x_p_dot + eps * x_p_ddot,
    )
    pa2, pb2, _ = _internal_rates(s2.p_a, s2.p_b, s2.x_p, s2.x_p_dot, u, params, unc, d)
    f_h_ddot = (A_p * pa2 - alpha * A_p * pb2 - f_h_dot) / eps
    f_l_ddot = params.k_spring * x_p_ddot
    return np.array([f_h_dot, f_h_ddot, f_l_dot, f_l_ddot,
                     p_a_dot, p_b_dot, state.x_p_dot, x_p_ddot])


@dataclass
class DisturbanceState:
    """Evolves the lumped valve-current disturbance at the plant rate."""

    unc: UncertaintyConfig
    rng: np.random.Generator | None = None
    value: float = field(init=False)

    def __post_init__(self):
        if self.unc.d_kind == "constant":
            self.value = self.unc.d_value
        else:
            if self.rng is None:
                raise ValueError("band-limited disturbance requires an rng")
            self.value = 0.0

    def advance(self, dt: float) -> float:
        if self.unc.d_kind == "band-limited":
            # First-order low-pass of white noise; stationary std = d_value.
            a = np.exp(-2.0 * np.pi * self.unc.d_cutoff_hz * dt)
            scale = self.unc.d_value * np.sqrt(1.0 - a * a)
            self.value = a * self.value + scale * self.rng.standard_normal()
        return self.value
