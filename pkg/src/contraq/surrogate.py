"""Learned hydraulic dynamics: data collection, multi-step training, validation.

The network maps the normalized (state, input) 9-vector to the normalized
state derivative. Training minimizes the multi-step loss

    L = (1/N) * sum_windows || sum_{h=0..H} delta_{t+h+1} ||^2

where delta is the normalized state error of a recursive rollout with
teacher-forced inputs and free-running states. A per-step-squared variant
(sum_h ||delta||^2) is available behind ``loss_mode``.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from . import nn_core, plant as plant_mod, runtime
from .controller import FlGains
from .nn_core import AdamState, Mlp, NonFiniteError
from .plant import HydraulicParams, PlantState, UncertaintyConfig


@dataclass
class Normalizer:
    """Per-channel statistics for the 9-dim inputs and 8-dim rate targets."""

    in_mean: np.ndarray
    in_std: np.ndarray
    out_mean: np.ndarray
    out_std: np.ndarray

    def __post_init__(self):
        for name in ("in_std", "out_std"):
            arr = getattr(self, name)
            if np.any(arr <= 0.0):
                raise ValueError(f"{name} must be strictly positive")

    @classmethod
    def from_transitions(cls, inputs: np.ndarray, targets: np.ndarray) -> "Normalizer":
        return cls(
            in_mean=inputs.mean(axis=0),
            in_std=np.maximum(inputs.std(axis=0), 1e-12),
            out_mean=targets.mean(axis=0),
            out_std=np.maximum(targets.std(axis=0), 1e-12),
        )

    # State channels are the first 8 input channels; the input is channel 9.
    def norm_state(self, x):
        return (np.asarray(x) - self.in_mean[:8]) / self.in_std[:8]

    def denorm_state(self, xn):
        return np.asarray(xn) * self.in_std[:8] + self.in_mean[:8]

    def norm_u(self, u):
        return (u - self.in_mean[8]) / self.in_std[8]

    def denorm_u(self, un):
        return un * self.in_std[8] + self.in_mean[8]

    @property
    def u_std(self) -> float:
        return float(self.in_std[8])

    @property
    def f_l_std(self) -> float:
        return float(self.in_std[2])

    @property
    def f_l_dot_std(self) -> float:
        return float(self.in_std[3])

    def norm_inputs(self, x, u):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        u = np.atleast_1d(np.asarray(u, dtype=float))
        xu = np.concatenate([x, u[:, None]], axis=1)
        return (xu - self.in_mean) / self.in_std

    def norm_target(self, xdot):
        return (np.asarray(xdot) - self.out_mean) / self.out_std

    def denorm_target(self, zn):
        return np.asarray(zn) * self.out_std + self.out_mean


@dataclass
class ModelTrainingConfig:
    """Multi-step training hyperparameters.

    The bench run used epochs=1000 and batch_size=8192; the defaults here
    are desk-scale so the full pipeline stays CPU-friendly. Horizon,
    architecture, activation, and learning rate follow the bench setup.
    """

    epochs: int = 50
    batch_size: int = 512
    hidden_layers: int = 2
    hidden_size: int = 32
    learning_rate: float = 0.001
    horizon: int = 70
    activation: str = "relu"
    loss_mode: str = "sum-then-square"   # or "per-step-squared"
    grad_clip: float = 10.0

    def __post_init__(self):
        if self.horizon < 0:
            raise ValueError("horizon must be >= 0")
        for name in ("epochs", "batch_size", "hidden_layers", "hidden_size"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be a positive integer")
        if self.loss_mode not in ("sum-then-square", "per-step-squared"):
            raise ValueError(f"unknown loss_mode {self.loss_mode!r}")


@dataclass
class EpisodeData:
    """One contiguous closed-loop episode sampled at a fixed policy rate."""

    states: np.ndarray      # (T+1, 8)
    inputs: np.ndarray      # (T,)
    dt: float

    @property
    def n_transitions(self) -> int:
        return len(self.inputs)


@dataclass
class TrajectoryDataset:
    episodes: list[EpisodeData] = field(default_factory=list)
    dt: float = runtime.DT_POLICY
    seed: int | None = None

    @property
    def n_transitions(self) -> int:
        return sum(ep.n_transitions for ep in self.episodes)

    def split(self, train_fraction: float = 0.8) -> tuple["TrajectoryDataset", "TrajectoryDataset"]:
        """Train/held-out split by whole episodes so no window straddles it."""
        n_train = max(1, int(round(train_fraction * len(self.episodes))))
        if len(self.episodes) > 1:
            n_train = min(n_train, len(self.episodes) - 1)
        return (TrajectoryDataset(self.episodes[:n_train], self.dt, self.seed),
                TrajectoryDataset(self.episodes[n_train:], self.dt, self.seed))

    def transition_arrays(self) -> tuple[np.ndarray, np.ndarray]:
        """All (x_t, u_t) inputs and (x_{t+1}-x_t)/dt targets, concatenated."""
        ins, outs = [], []
        for ep in self.episodes:
            x = ep.states
            ins.append(np.concatenate([x[:-1], ep.inputs[:, None]], axis=1))
            outs.append((x[1:] - x[:-1]) / ep.dt)
        return np.concatenate(ins), np.concatenate(outs)


class CollectionUnstable(RuntimeError):
    """The probe episode showed the collection controller is not stable."""


def collect_dataset(
    n_episodes: int,
    gains: FlGains,
    params: HydraulicParams,
    unc: UncertaintyConfig,
    seed: int,
    steps_per_episode: int = 1800,
    probe: bool = True,
) -> TrajectoryDataset:
    """Closed-loop plant trajectories under randomized sinusoid references.

    A probe episode first verifies the collection gains track with bounded
    error. Episodes where the plant diverges are dropped (recorded in the
    returned dataset's episode count being short) and collection continues.
    """
    ss = np.random.SeedSequence(seed)
    dataset = TrajectoryDataset(dt=runtime.DT_POLICY, seed=seed)
    if n_episodes == 0:
        return dataset

    child_seeds = ss.spawn(n_episodes + 1)
    if probe:
        rng = np.random.Generator(np.random.PCG64(child_seeds[0]))
        env = runtime.PlantEnv(params, unc, rng)
        ref = runtime.RefSignal.random(rng)
        log = runtime.run_episode(env, gains, ref, steps_per_episode, record_states=True)
        if log.diverged or log.tracking_rmse() > 0.5 * ref.amplitude:
            raise CollectionUnstable(
                f"probe episode RMSE {log.tracking_rmse():.1f} N with gains "
                f"({gains.kp_eff}, {gains.ki_eff})")

    for i in range(n_episodes):
        rng = np.random.Generator(np.random.PCG64(child_seeds[i + 1]))
        env = runtime.PlantEnv(params, unc, rng)
        ref = runtime.RefSignal.random(rng)
        log = runtime.run_episode(env, gains, ref, steps_per_episode, record_states=True)
        if log.diverged:
            continue
        dataset.episodes.append(EpisodeData(
            states=np.asarray(log.states),
            inputs=log.column("u"),
            dt=runtime.DT_POLICY,
        ))
    return dataset


@dataclass
class SurrogateModel:
    """Trained dynamics net plus its normalization statistics."""

    net: Mlp
    normalizer: Normalizer
    dt: float = runtime.DT_POLICY

    def predict_norm(self, xn: np.ndarray, un) -> np.ndarray:
        """Normalized-target prediction from normalized state and input."""
        xn = np.atleast_2d(np.asarray(xn, dtype=float))
        un = np.atleast_1d(np.asarray(un, dtype=float))
        z = np.concatenate([xn, un[:, None]], axis=1)
        out = nn_core.forward(self.net, z)
        return out

    def f_phys(self, x: np.ndarray, u: float) -> np.ndarray:
        """Physical state derivative at a physical state and input."""
        zin = self.normalizer.norm_inputs(x[None, :], [u])
        zn = nn_core.forward(self.net, zin)[0]
        return self.normalizer.denorm_target(zn)

    def f_norm_state(self, xn: np.ndarray, un: float) -> np.ndarray:
        """Derivative of the *normalized* state: (sigma_d*f + mu_d)/sigma_x."""
        zn = self.predict_norm(xn[None, :], [un])[0]
        xdot = self.normalizer.denorm_target(zn)
        return xdot / self.normalizer.in_std[:8]

    def f_norm_state_batch(self, xn: np.ndarray, un: np.ndarray) -> np.ndarray:
        zn = self.predict_norm(xn, un)
        xdot = zn * self.normalizer.out_std + self.normalizer.out_mean
        return xdot / self.normalizer.in_std[:8]


def _window_tensors(dataset: TrajectoryDataset, normalizer: Normalizer, horizon: int):
    """Stack every in-episode window as normalized (states, inputs) tensors.

    Returns xn (W, H+2, 8) and un (W, H+1); windows never cross episodes.
    """
    length = horizon + 1
    xs, us = [], []
    for ep in dataset.episodes:
        n = ep.n_transitions
        if n < length:
            continue
        x_norm = (ep.states - normalizer.in_mean[:8]) / normalizer.in_std[:8]
        u_norm = (ep.inputs - normalizer.in_mean[8]) / normalizer.in_std[8]
        for s in range(0, n - length + 1):
            xs.append(x_norm[s:s + length + 1])
            us.append(u_norm[s:s + length])
    if not xs:
        raise ValueError(f"no windows of length {length} available")
    return np.asarray(xs), np.asarray(us)


def _rollout_chunk(net, xn, un, scale, offset):
    """Free-running rollout of one window chunk; returns states and errors.

    xn: (B, H+2, 8) normalized truth; un: (B, H+1) normalized inputs.
    x_{h+1} = x_h + scale * net(x_h, u_h) + offset.
    """
    B, H2, _ = xn.shape
    steps = H2 - 1
    x_hat = np.empty_like(xn)
    x_hat[:, 0] = xn[:, 0]
    for h in range(steps):
        zin = np.concatenate([x_hat[:, h], un[:, h:h + 1]], axis=1)
        pred = nn_core.forward(net, zin)
        x_hat[:, h + 1] = x_hat[:, h] + scale * pred + offset
    deltas = x_hat[:, 1:] - xn[:, 1:]
    return x_hat, deltas


def _chunk_loss_and_grads(net, xn, un, scale, offset, loss_mode):
    """Loss contribution and parameter gradients of one window chunk (summed,
    not averaged; the caller divides by the total window count)."""
    B, H2, _ = xn.shape
    steps = H2 - 1
    x_hat, deltas = _rollout_chunk(net, xn, un, scale, offset)
    if not np.all(np.isfinite(deltas)):
        bad = int(np.argwhere(~np.isfinite(deltas))[0][0])
        raise NonFiniteError(f"non-finite rollout error in window {bad}")

    if loss_mode == "sum-then-square":
        S = deltas.sum(axis=1)                       # (B, 8)
        loss = float(np.sum(S * S))
        direct = np.repeat(2.0 * S[:, None, :], steps, axis=1)
    else:
        loss = float(np.sum(deltas * deltas))
        direct = 2.0 * deltas

    grads = nn_core.zero_grads(net)
    g = np.zeros((B, 8))
    for h in range(steps - 1, -1, -1):
        g = g + direct[:, h]
        zin = np.concatenate([x_hat[:, h], un[:, h:h + 1]], axis=1)
        pg, ig = nn_core.backward(net, zin, g * scale)
        grads.add_(pg)
        g = g + ig[:, :8]
    return loss, grads


def train_model(
    dataset: TrajectoryDataset,
    cfg: ModelTrainingConfig,
    seed: int = 0,
    normalizer: Normalizer | None = None,
    chunk: int = 512,
) -> tuple[SurrogateModel, dict]:
    """Fit the dynamics net with the recursive multi-step loss.

    Returns the model and a history dict with per-epoch mean window loss.
    Normalization statistics are computed from this dataset (the caller
    passes the training split only).
    """
    if normalizer is None:
        ins, outs = dataset.transition_arrays()
        normalizer = Normalizer.from_transitions(ins, outs)
    xn_all, un_all = _window_tensors(dataset, normalizer, cfg.horizon)
    n_windows = len(xn_all)

    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))
    net = nn_core.init_mlp([9] + [cfg.hidden_size] * cfg.hidden_layers + [8],
                           rng, final_layer_gain=0.1)
    adam = AdamState.for_net(net, cfg.learning_rate)
    scale = dataset.dt * normalizer.out_std / normalizer.in_std[:8]
    offset = dataset.dt * normalizer.out_mean / normalizer.in_std[:8]

    history = {"epoch_loss": []}
    order = np.arange(n_windows)
    for epoch in range(cfg.epochs):
        rng.shuffle(order)
        epoch_loss = 0.0
        for start in range(0, n_windows, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            batch_loss = 0.0
            grads = nn_core.zero_grads(net)
            for c0 in range(0, len(idx), chunk):
                sel = idx[c0:c0 + chunk]
                loss, g = _chunk_loss_and_grads(
                    net, xn_all[sel], un_all[sel], scale, offset, cfg.loss_mode)
                batch_loss += loss
                grads.add_(g)
            grads = grads.scale(1.0 / len(idx))
            gnorm = grads.global_norm()
            if gnorm > cfg.grad_clip:
                grads = grads.scale(cfg.grad_clip / gnorm)
            nn_core.adam_step(net, grads, adam)
            epoch_loss += batch_loss
        history["epoch_loss"].append(epoch_loss / n_windows)
    return SurrogateModel(net, normalizer, dataset.dt), history


def analytic_rollout(
    window_states: np.ndarray,
    window_inputs: np.ndarray,
    dt: float,
    params: HydraulicParams,
) -> np.ndarray:
    """Open-loop rollout of the nominal analytic model on a recorded window.

    Initializes the internal pressures/position from the first recorded
    sample and integrates chamber continuity and piston dynamics with
    C1 = C2 = 1, d = 0, emitting the same derived 8-vector as the plant.
    """
    state = PlantState.from_array(window_states[0])
    out = [window_states[0]]
    for u in window_inputs:
        state = plant_mod.step(state, float(u), dt, params)
        out.append(state.as_array())
    return np.asarray(out)


def validate_model(
    model: SurrogateModel,
    heldout: TrajectoryDataset,
    params: HydraulicParams,
    horizon: int = 70,
    stride: int = 10,
) -> tuple[np.ndarray, np.ndarray]:
    """Normalized per-channel RMSE of H-step open-loop rollouts.

    Returns (rmse_model, rmse_analytic), each of shape (8,), computed on
    identical windows of the held-out episodes.
    """
    if not heldout.episodes:
        raise ValueError("held-out dataset is empty")
    nrm = model.normalizer
    sq_model = np.zeros(8)
    sq_analytic = np.zeros(8)
    count = 0

    for ep in heldout.episodes:
        n = ep.n_transitions
        starts = list(range(0, n - horizon, stride))
        if not starts:
            continue
        x_norm = (ep.states - nrm.in_mean[:8]) / nrm.in_std[:8]
        u_norm = (ep.inputs - nrm.in_mean[8]) / nrm.in_std[8]
        xs = np.asarray([x_norm[s:s + horizon + 1] for s in starts])
        us = np.asarray([u_norm[s:s + horizon] for s in starts])
        scale = ep.dt * nrm.out_std / nrm.in_std[:8]
        offset = ep.dt * nrm.out_mean / nrm.in_std[:8]
        _, deltas = _rollout_chunk(model.net, xs, us, scale, offset)
        sq_model += np.sum(deltas**2, axis=(0, 1))
        for s in starts:
            pred = analytic_rollout(ep.states[s:s + horizon + 1],
                                    ep.inputs[s:s + horizon], ep.dt, params)
            err = (pred[1:] - ep.states[s + 1:s + horizon + 1]) / nrm.in_std[:8]
            sq_analytic += np.sum(err**2, axis=0)
        count += len(starts) * horizon
    if count == 0:
        raise ValueError("held-out episodes shorter than the rollout horizon")
    return np.sqrt(sq_model / count), np.sqrt(sq_analytic / count)


# ---------------------------------------------------------------------------
# Persistence: the nn_core weight block followed by a normalizer sidecar.
# ---------------------------------------------------------------------------

def save_model(path, model: SurrogateModel) -> None:
    with open(path, "w") as fh:
        nn_core.write_mlp(fh, model.net)
        fh.write("normalizer 9 8\n")
        for arr in (model.normalizer.in_mean, model.normalizer.in_std,
                    model.normalizer.out_mean, model.normalizer.out_std):
            fh.write(" ".join("%.17g" % v for v in arr) + "\n")
        fh.write("dt %.17g\n" % model.dt)


def load_model(path) -> SurrogateModel:
    with open(path) as fh:
        net = nn_core.read_mlp(fh)
        header = fh.readline().split()
        if not header or header[0] != "normalizer":
            raise ValueError("missing normalizer sidecar")
        arrays = [np.array([float(v) for v in fh.readline().split()]) for _ in range(4)]
        dt_line = fh.readline().split()
        dt = float(dt_line[1]) if dt_line and dt_line[0] == "dt" else runtime.DT_POLICY
    return SurrogateModel(net, Normalizer(*arrays), dt)


def save_dataset(dirpath, dataset: TrajectoryDataset) -> None:
    os.makedirs(dirpath, exist_ok=True)
    manifest = {"dt": dataset.dt, "seed": dataset.seed,
                "episodes": len(dataset.episodes)}
    for i, ep in enumerate(dataset.episodes):
        path = os.path.join(dirpath, f"episode_{i:03d}.csv")
        with open(path, "w") as fh:
            fh.write("t," + ",".join(plant_mod.STATE_NAMES) + ",u\n")
            for k in range(ep.n_transitions + 1):
                u = ep.inputs[k] if k < ep.n_transitions else 0.0
                cells = [repr(k * ep.dt)] + [repr(v) for v in ep.states[k]] + [repr(float(u))]
                fh.write(",".join(cells) + "\n")
    with open(os.path.join(dirpath, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_dataset(dirpath) -> TrajectoryDataset:
    with open(os.path.join(dirpath, "manifest.json")) as fh:
        manifest = json.load(fh)
    episodes = []
    for i in range(manifest["episodes"]):
        path = os.path.join(dirpath, f"episode_{i:03d}.csv")
        rows = np.loadtxt(path, delimiter=",", skiprows=1)
        states = rows[:, 1:9]
        inputs = rows[:-1, 9]
        episodes.append(EpisodeData(states, inputs, manifest["dt"]))
    return TrajectoryDataset(episodes, manifest["dt"], manifest.get("seed"))
