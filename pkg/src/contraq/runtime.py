"""Dual-rate control loop shared by data collection, filter validation and RL.

The inner force loop runs at 1 kHz on the simulated plant (or on the
learned dynamics model used as a simulator); gain updates, the contraction
filter, rewards, and logging happen once every 10 substeps, i.e. at the
100 Hz policy rate.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import plant as plant_mod
from .controller import (ControllerState, FlGains, apply_gain_action,
                         default_g_min, default_integral_bound, fl_control,
                         fl_control_value)
from .plant import (DisturbanceState, HydraulicParams, PlantState,
                    SimulationDiverged, UncertaintyConfig)

DT_PLANT = 1e-3
SUBSTEPS = 10            # policy period = 10 plant substeps (1 kHz / 100 Hz)
DT_POLICY = DT_PLANT * SUBSTEPS
DIVERGENCE_ERROR_FACTOR = 3.0


@dataclass(frozen=True)
class RefSignal:
    """Sinusoidal force reference with an analytic derivative."""

    amplitude: float = 300.0
    freq_hz: float = 1.0
    phase: float = 0.0
    bias: float = 0.0

    def value(self, t: float) -> float:
        return self.bias + self.amplitude * np.sin(2.0 * np.pi * self.freq_hz * t + self.phase)

    def derivative(self, t: float) -> float:
        w = 2.0 * np.pi * self.freq_hz
        return self.amplitude * w * np.cos(w * t + self.phase)

    @classmethod
    def random(cls, rng: np.random.Generator,
               amplitude_range=(200.0, 300.0),
               freq_range=(0.5, 2.0)) -> "RefSignal":
        return cls(
            amplitude=float(rng.uniform(*amplitude_range)),
            freq_hz=float(rng.uniform(*freq_range)),
            phase=float(rng.uniform(0.0, 2.0 * np.pi)),
        )


class PlantEnv:
    """Analytic plant with uncertainty injection and sensor noise."""

    def __init__(self, params: HydraulicParams, unc: UncertaintyConfig,
                 rng: np.random.Generator | None = None, dt: float = DT_PLANT):
        self.params = params
        self.unc = unc
        self.dt = dt
        self.rng = rng
        self._disturbance = None
        self.state: PlantState | None = None

    def reset(self) -> PlantState:
        self.state = plant_mod.reset_state(self.params)
        self._disturbance = DisturbanceState(self.unc, self.rng)
        return self.state

    def substep(self, u: float) -> PlantState:
        d = self._disturbance.advance(self.dt)
        self.state = plant_mod.step(self.state, u, self.dt, self.params, self.unc, d=d)
        return self.state

    def measure(self) -> PlantState:
        return plant_mod.measure(self.state, self.unc, self.rng)


class ModelEnv:
    """Learned dynamics model operated as the training simulator.

    ``dynamics`` maps (state_8, u) to the physical state derivative. The
    model is integrated at the plant rate so the loop structure matches the
    real system; there is no sensor noise in simulation.
    """

    BLOWUP_NORM = 1e9

    def __init__(self, dynamics, params: HydraulicParams, dt: float = DT_PLANT):
        self.dynamics = dynamics
        self.params = params
        self.dt = dt
        self.state: PlantState | None = None

    def reset(self) -> PlantState:
        self.state = plant_mod.reset_state(self.params)
        return self.state

    def substep(self, u: float) -> PlantState:
        u = float(np.clip(u, -self.params.u_max, self.params.u_max))
        x = self.state.as_array()
        x_new = x + self.dt * self.dynamics(x, u)
        if not np.all(np.isfinite(x_new)) or np.max(np.abs(x_new)) > self.BLOWUP_NORM:
            raise SimulationDiverged("model rollout diverged", last_valid=self.state)
        self.state = PlantState.from_array(x_new)
        return self.state

    def measure(self) -> PlantState:
        return self.state


LOG_COLUMNS = ("t", "f_r", "f_h", "f_l", "p_a", "p_b", "x_p", "x_p_dot",
               "u_nom", "delta_u", "u", "Kp_eff", "Ki_eff", "reward",
               "cert_value", "cert_value_post", "infeasible")


@dataclass
class EpisodeLog:
    """Policy-rate record of one episode, one row per policy step."""

    rows: list = field(default_factory=list)
    diverged: bool = False
    n_steps: int = 0
    states: list = field(default_factory=list)       # measured 8-vectors
    actions: list = field(default_factory=list)      # raw policy actions
    ref: RefSignal | None = None

    def add(self, **kw):
        self.rows.append([kw[c] for c in LOG_COLUMNS])
        self.n_steps += 1

    def column(self, name: str) -> np.ndarray:
        idx = LOG_COLUMNS.index(name)
        return np.array([r[idx] for r in self.rows])

    @property
    def episode_return(self) -> float:
        return float(np.sum(self.column("reward")))

    def tracking_rmse(self, discard_s: float = 2.0) -> float:
        t = self.column("t")
        keep = t >= discard_s
        err = self.column("f_r")[keep] - self.column("f_l")[keep]
        return float(np.sqrt(np.mean(err**2)))


def write_episode_csv(log: EpisodeLog, path) -> None:
    with open(path, "w") as fh:
        fh.write(",".join(LOG_COLUMNS) + "\n")
        for row in log.rows:
            fh.write(",".join(_csv_num(v) for v in row) + "\n")


def _csv_num(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "1" if v else "0"
    return repr(float(v))


def run_episode(
    env,
    gains: FlGains,
    ref: RefSignal,
    n_policy_steps: int,
    policy=None,
    cert_filter=None,
    reward_fn=None,
    e_scale: float = 1.0,
    obs_fn=None,
    train_hook=None,
    rng: np.random.Generator | None = None,
    stochastic: bool = False,
    record_states: bool = False,
) -> EpisodeLog:
    """Run one dual-rate episode and return its log.

    policy:      optional ``select(obs, stochastic, rng) -> action in [-1,1]^2``;
                 gain corrections are refreshed from it at the policy rate.
    cert_filter: optional object with
                 ``filter_step(x_meas, u_nom, gains, integral, f_r, f_r_dot)``
                 returning ``(delta_u, eval)``; delta_u is held across the
                 10 substeps of the policy period.
    reward_fn:   optional ``(e_norm, de_norm) -> float`` on errors normalized
                 by ``e_scale``; the rate term is the per-step backward
                 difference at the policy rate.
    train_hook:  optional callable receiving a transition dict after every
                 policy step (used by the RL trainer).

    Divergence (non-finite state or task error beyond 3x the reference
    amplitude) terminates the episode early and flags the log.
    """
    params = env.params
    g_min = default_g_min(params)
    cs = ControllerState(integral_bound=default_integral_bound(params))
    env.reset()
    measured = env.measure()
    log = EpisodeLog(ref=ref)
    gains = FlGains(gains.kp, gains.ki, gains.dkp, gains.dki)

    prev_action = np.zeros(2)
    prev_e_norm = (ref.value(0.0) - measured.f_l) / e_scale
    error_limit = DIVERGENCE_ERROR_FACTOR * max(abs(ref.amplitude), 1.0) + abs(ref.bias)

    for k in range(n_policy_steps):
        t = k * DT_POLICY
        f_r = ref.value(t)
        f_r_dot = ref.derivative(t)

        obs = None
        action = None
        if policy is not None:
            obs = obs_fn(measured.as_array(), f_r, f_r_dot, f_r - measured.f_l, prev_action)
            action = policy.select(obs, stochastic, rng)
            gains = apply_gain_action(gains, action)

        # Nominal input at the policy boundary (pure evaluation, no state
        # mutation); the certificate linearizes around this value and its
        # correction is held for the whole policy period.
        u_nom_boundary, _ = fl_control_value(
            measured.as_array(), f_r, f_r_dot, gains.kp_eff, gains.ki_eff,
            cs.integral, params, g_min, cs.prev_u_nom)
        delta_u = 0.0
        cert_eval = None
        if cert_filter is not None:
            delta_u, cert_eval = cert_filter.filter_step(
                measured.as_array(), u_nom_boundary, gains, cs.integral, f_r, f_r_dot)

        diverged = False
        u_first = u_nom_boundary
        current = measured
        for j in range(SUBSTEPS):
            t_sub = t + j * env.dt
            u_nom = fl_control(current, ref.value(t_sub), ref.derivative(t_sub),
                               gains, cs, params, env.dt, g_min)
            u = float(np.clip(u_nom + delta_u, -params.u_max, params.u_max))
            if j == 0:
                u_first = u
            try:
                env.substep(u)
            except SimulationDiverged:
                diverged = True
                break
            current = env.measure()

        measured_next = current
        f_r_next = ref.value(t + DT_POLICY)
        f_r_dot_next = ref.derivative(t + DT_POLICY)
        e_norm = (f_r_next - measured_next.f_l) / e_scale
        reward = 0.0
        if reward_fn is not None:
            reward = reward_fn(e_norm, e_norm - prev_e_norm)
        if not diverged:
            true_err = abs(f_r_next - env.state.f_l)
            diverged = true_err > error_limit
        if diverged:
            log.diverged = True
            if reward_fn is not None:
                reward = reward_fn(DIVERGENCE_ERROR_FACTOR * ref.amplitude / e_scale, 0.0)

        log.add(
            t=t, f_r=f_r, f_h=measured_next.f_h, f_l=measured_next.f_l,
            p_a=measured_next.p_a, p_b=measured_next.p_b,
            x_p=measured_next.x_p, x_p_dot=measured_next.x_p_dot,
            u_nom=u_nom_boundary, delta_u=delta_u, u=u_first,
            Kp_eff=gains.kp_eff, Ki_eff=gains.ki_eff, reward=reward,
            cert_value=cert_eval.cert_value if cert_eval else 0.0,
            cert_value_post=cert_eval.cert_value_post if cert_eval else 0.0,
            infeasible=cert_eval.infeasible if cert_eval else False,
        )
        if record_states:
            log.states.append(measured.as_array())
            log.actions.append(np.asarray(action) if action is not None else np.zeros(2))

        if train_hook is not None and policy is not None:
            next_obs = obs_fn(measured_next.as_array(), f_r_next, f_r_dot_next,
                              f_r_next - measured_next.f_l, action)
            train_hook({
                "obs": obs, "action": action, "reward": reward,
                "next_obs": next_obs, "done": diverged,
                "applied_u": u_first,
            })

        if diverged:
            break
        measured = measured_next
        prev_e_norm = e_norm
        if action is not None:
            prev_action = np.asarray(action)

    if record_states and not log.diverged:
        log.states.append(measured.as_array())
    return log
