"""Probabilistic squid-axon conductance model with a splitting integrator.

State is ``(v, m, h, n)``: membrane voltage plus sodium activation,
sodium inactivation and potassium activation gates. The deterministic
dynamics are the classic squid giant axon equations; they are stiff, but
conditionally linear: gates follow linear ODEs at fixed voltage and the
voltage follows a linear ODE at fixed gates. The integrator exploits this
with a symmetric splitting - exact half-step gate relaxation, exact
full-step voltage decay, exact half-step gate relaxation - which is
second-order accurate and keeps gates strictly inside (0, 1) by
construction (each update is a convex combination with an equilibrium
value in (0, 1)).

The probabilistic version adds, at every integration step, Gaussian noise
to the voltage and logit-normal noise to the gates; observations are
noisy voltage readings once per ``steps_per_obs`` integration steps.

Units: mV, ms, uF/cm^2, mS/cm^2, uA/cm^2. External current is treated as
a current density (membrane area folded in).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, NamedTuple

import numpy as np
from scipy.optimize import brentq
from scipy.special import expit, exprel

from .rng import RngStream
from .ssm import ModelSpec

_LOG2PI = np.log(2.0 * np.pi)


class HHState(NamedTuple):
    """Voltage and gate states; gates live strictly inside (0, 1)."""

    v: float
    m: float
    h: float
    n: float

    def as_array(self) -> np.ndarray:
        return np.array([self.v, self.m, self.h, self.n], dtype=float)

    @classmethod
    def from_array(cls, arr: np.ndarray) -> "HHState":
        return cls(*(float(x) for x in np.asarray(arr, dtype=float)))


@dataclass(frozen=True)
class HHParams:
    """Membrane constants, noise scales and integration grid.

    Conductances and reversal potentials default to the standard squid
    giant axon values.
    """

    membrane_capacitance: float = 1.0
    g_na: float = 120.0
    g_k: float = 36.0
    g_leak: float = 0.3
    e_na: float = 50.0
    e_k: float = -77.0
    e_leak: float = -54.4
    sigma_v_sq: float = 0.1
    sigma_m_sq: float = 1e-4
    sigma_h_sq: float = 1e-4
    sigma_n_sq: float = 1e-4
    sigma_y_sq: float = 1.0
    dt: float = 0.1
    steps_per_obs: int = 10

    def __post_init__(self):
        for name in (
            "sigma_v_sq",
            "sigma_m_sq",
            "sigma_h_sq",
            "sigma_n_sq",
            "sigma_y_sq",
            "dt",
        ):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")

    @property
    def gate_vars(self) -> np.ndarray:
        return np.array([self.sigma_m_sq, self.sigma_h_sq, self.sigma_n_sq])


def hh_rates(v):
    """All six gate rate functions at voltage ``v`` (scalar or array).

    Removable singularities in the alpha functions are handled through
    ``exprel`` (``exprel(0) = 1``), so e.g. ``alpha_m(-40) = 1`` exactly.
    """
    v = np.asarray(v, dtype=float)
    alpha_m = 1.0 / exprel(-(v + 40.0) / 10.0)
    beta_m = 4.0 * np.exp((-65.0 - v) / 18.0)
    alpha_h = 0.07 * np.exp((-65.0 - v) / 20.0)
    beta_h = 1.0 / (np.exp(-3.5 - v / 10.0) + 1.0)
    alpha_n = 0.1 / exprel(-(v + 55.0) / 10.0)
    beta_n = 0.125 * np.exp((-65.0 - v) / 80.0)
    return alpha_m, beta_m, alpha_h, beta_h, alpha_n, beta_n


def _gate_half_step(gates, v, dt_half):
    """Exact relaxation of all gates toward equilibrium at fixed voltage."""
    am, bm, ah, bh, an, bn = hh_rates(v)
    alphas = np.stack([am, ah, an], axis=-1)
    betas = np.stack([bm, bh, bn], axis=-1)
    total = alphas + betas
    inf = alphas / total
    return inf + (gates - inf) * np.exp(-total * dt_half)


def strang_step(state: np.ndarray, dt: float, i_ext: float, params: HHParams):
    """One deterministic splitting step.

    Args:
        state: array ``(..., 4)`` of ``(v, m, h, n)``.
        dt: step length in ms.
        i_ext: external current density over the step.
        params: membrane constants.

    Returns:
        The advanced state, same shape. Gates remain strictly in (0, 1).
    """
    state = np.asarray(state, dtype=float)
    v = state[..., 0]
    gates = state[..., 1:]
    gates = _gate_half_step(gates, v, dt / 2.0)
    g_na = params.g_na * gates[..., 0] ** 3 * gates[..., 1]
    g_k = params.g_k * gates[..., 2] ** 4
    total_g = g_na + g_k + params.g_leak
    drive = (
        i_ext + g_na * params.e_na + g_k * params.e_k + params.g_leak * params.e_leak
    ) / params.membrane_capacitance
    decay = total_g / params.membrane_capacitance
    v_inf = drive / decay
    v = v_inf + (v - v_inf) * np.exp(-decay * dt)
    gates = _gate_half_step(gates, v, dt / 2.0)
    return np.concatenate([v[..., None], gates], axis=-1)


def vector_field(state: np.ndarray, i_ext: float, params: HHParams) -> np.ndarray:
    """Instantaneous time derivative of ``(v, m, h, n)``."""
    state = np.asarray(state, dtype=float)
    v = state[..., 0]
    m, h, n = state[..., 1], state[..., 2], state[..., 3]
    am, bm, ah, bh, an, bn = hh_rates(v)
    g_na = params.g_na * m**3 * h
    g_k = params.g_k * n**4
    dv = (
        i_ext
        - g_na * (v - params.e_na)
        - g_k * (v - params.e_k)
        - params.g_leak * (v - params.e_leak)
    ) / params.membrane_capacitance
    return np.stack(
        [dv, am * (1 - m) - bm * m, ah * (1 - h) - bh * h, an * (1 - n) - bn * n],
        axis=-1,
    )


def resting_state(params: HHParams, i_ext: float = 0.0) -> np.ndarray:
    """Deterministic fixed point with gates at voltage equilibrium.

    Found by root-finding the steady-state current balance in ``v``.
    """

    def balance(v):
        am, bm, ah, bh, an, bn = hh_rates(v)
        m_inf = am / (am + bm)
        h_inf = ah / (ah + bh)
        n_inf = an / (an + bn)
        g_na = params.g_na * m_inf**3 * h_inf
        g_k = params.g_k * n_inf**4
        return (
            i_ext
            - g_na * (v - params.e_na)
            - g_k * (v - params.e_k)
            - params.g_leak * (v - params.e_leak)
        )

    v_star = brentq(balance, -90.0, 20.0, xtol=1e-12)
    am, bm, ah, bh, an, bn = hh_rates(v_star)
    return np.array(
        [v_star, am / (am + bm), ah / (ah + bh), an / (an + bn)]
    )


def _logit(p):
    return np.log(p) - np.log1p(-p)


def logitnormal_logpdf(x, mu_logit, var):
    """Density of sigmoid(Normal(mu_logit, var)) evaluated at x in (0, 1)."""
    x = np.asarray(x, dtype=float)
    logit_x = _logit(x)
    gauss = -0.5 * (_LOG2PI + np.log(var)) - 0.5 * (logit_x - mu_logit) ** 2 / var
    return gauss - np.log(x) - np.log1p(-x)


def hh_prob_step(
    state: np.ndarray, params: HHParams, i_ext: float, gen: np.random.Generator
) -> np.ndarray:
    """One noisy transition: deterministic step, then voltage and gate noise."""
    det = strang_step(state, params.dt, i_ext, params)
    v = det[..., 0] + np.sqrt(params.sigma_v_sq) * gen.standard_normal(
        det[..., 0].shape
    )
    logits = _logit(det[..., 1:]) + np.sqrt(params.gate_vars) * gen.standard_normal(
        det[..., 1:].shape
    )
    return np.concatenate([v[..., None], expit(logits)], axis=-1)


def hh_transition_logpdf(
    new: np.ndarray, prev: np.ndarray, params: HHParams, i_ext: float
) -> np.ndarray:
    """Exact transition density of :func:`hh_prob_step`.

    Gaussian in the voltage; logit-normal (including the Jacobian of the
    sigmoid) in each gate.
    """
    det = strang_step(prev, params.dt, i_ext, params)
    dv = new[..., 0] - det[..., 0]
    log_p = -0.5 * (_LOG2PI + np.log(params.sigma_v_sq)) - 0.5 * dv**2 / params.sigma_v_sq
    gate_logits = _logit(det[..., 1:])
    log_p = log_p + logitnormal_logpdf(
        new[..., 1:], gate_logits, params.gate_vars
    ).sum(axis=-1)
    return log_p


class StepStimulus:
    """Piecewise-constant current: ``amplitude`` on [start_ms, end_ms)."""

    def __init__(self, amplitude: float, start_ms: float, end_ms: float):
        self.amplitude = amplitude
        self.start_ms = start_ms
        self.end_ms = end_ms

    def __call__(self, t_ms):
        t_ms = np.asarray(t_ms, dtype=float)
        inside = (t_ms >= self.start_ms) & (t_ms < self.end_ms)
        return np.where(inside, self.amplitude, 0.0)


class HHTrace(NamedTuple):
    """Simulated latents at integration resolution plus sparse observations."""

    times: np.ndarray  # (T,) ms, end of each integration step
    latents: np.ndarray  # (T, 4)
    obs_indices: np.ndarray  # indices into times where observations occur
    observations: np.ndarray  # (num_obs,) noisy voltages


class NonFiniteStateError(RuntimeError):
    """Integration produced a non-finite state; carries the step index."""

    def __init__(self, step: int):
        super().__init__(f"non-finite state at integration step {step}")
        self.step = step


def stimulus_values(
    stimulus: Callable[[np.ndarray], np.ndarray], num_steps: int, dt: float
) -> np.ndarray:
    """Current density applied over each step (evaluated at step start)."""
    return np.asarray(stimulus(np.arange(num_steps) * dt), dtype=float)


def simulate_trace(
    params: HHParams,
    stimulus: Callable[[np.ndarray], np.ndarray],
    t_ms: float,
    rng: RngStream,
    init: np.ndarray | None = None,
) -> HHTrace:
    """Sample one latent trajectory and its sparse voltage observations.

    Args:
        params: model constants; ``steps_per_obs`` integration steps occur
            between successive observations.
        stimulus: current density as a function of time in ms.
        t_ms: trace duration; must be a whole number of observation
            intervals.
        rng: random stream.
        init: optional initial state (defaults to the deterministic rest).

    Returns:
        The dense latents and the noisy observations (one per
        ``steps_per_obs * dt`` ms, at the end of each interval).

    Raises:
        NonFiniteStateError: if integration produces NaN or inf.
    """
    obs_interval = params.dt * params.steps_per_obs
    n_obs = int(round(t_ms / obs_interval))
    if not np.isclose(n_obs * obs_interval, t_ms):
        raise ValueError("t_ms must be a multiple of the observation interval")
    n_steps = n_obs * params.steps_per_obs
    gen = rng.generator()
    state = resting_state(params) if init is None else np.asarray(init, dtype=float)
    currents = stimulus_values(stimulus, n_steps, params.dt)
    latents = np.empty((n_steps, 4))
    obs = np.empty(n_obs)
    for step in range(n_steps):
        state = hh_prob_step(state, params, float(currents[step]), gen)
        if not np.all(np.isfinite(state)):
            raise NonFiniteStateError(step)
        latents[step] = state
        if (step + 1) % params.steps_per_obs == 0:
            k = (step + 1) // params.steps_per_obs - 1
            obs[k] = state[0] + np.sqrt(params.sigma_y_sq) * gen.standard_normal()
    times = (np.arange(n_steps) + 1) * params.dt
    obs_idx = np.arange(1, n_obs + 1) * params.steps_per_obs - 1
    return HHTrace(
        times=times, latents=latents, obs_indices=obs_idx, observations=obs
    )


def hh_model(
    params: HHParams,
    stimulus: Callable[[np.ndarray], np.ndarray],
    num_obs: int,
) -> ModelSpec:
    """State-space view of the model at integration resolution.

    The latent chain advances every ``dt``; the observation sequence has
    one finite entry per ``steps_per_obs`` steps and NaN elsewhere, and
    the observation density contributes zero at the NaN steps. The
    initial latent is one noisy step from the deterministic resting state.
    """
    n_steps = num_obs * params.steps_per_obs
    currents = stimulus_values(stimulus, n_steps, params.dt)
    rest = resting_state(params)

    def log_init(x):
        return hh_transition_logpdf(x, rest[None, :], params, float(currents[0]))

    def log_trans(t, x, x_prev):
        return hh_transition_logpdf(x, x_prev, params, float(currents[t]))

    def log_obs(t, y_t, x):
        y_val = np.asarray(y_t, dtype=float)
        if y_val.ndim > 0:
            y_val = y_val[..., 0]
        if np.all(np.isnan(y_val)):
            return np.zeros(x.shape[0])
        return (
            -0.5 * (_LOG2PI + np.log(params.sigma_y_sq))
            - 0.5 * (y_val - x[..., 0]) ** 2 / params.sigma_y_sq
        )

    def sample_init(n, gen):
        return hh_prob_step(
            np.broadcast_to(rest, (n, 4)).copy(), params, float(currents[0]), gen
        )

    def sample_trans(t, x_prev, gen):
        return hh_prob_step(x_prev, params, float(currents[t]), gen)

    def sample_obs(t, x, gen):
        if (t + 1) % params.steps_per_obs != 0:
            return np.full((x.shape[0], 1), np.nan)
        noise = np.sqrt(params.sigma_y_sq) * gen.standard_normal((x.shape[0], 1))
        return x[..., :1] + noise

    return ModelSpec(
        dim_x=4,
        dim_y=1,
        horizon=n_steps,
        log_init=log_init,
        log_trans=log_trans,
        log_obs=log_obs,
        sample_init=sample_init,
        sample_trans=sample_trans,
        sample_obs=sample_obs,
        theta_grads=None,
    )


def observations_to_dense(trace: HHTrace, num_steps: int) -> np.ndarray:
    """Spread sparse observations onto the integration grid (NaN padding)."""
    y = np.full((num_steps, 1), np.nan)
    y[trace.obs_indices, 0] = trace.observations
    return y


def count_spikes(
    v: np.ndarray, dt: float, threshold: float = 0.0, refractory_ms: float = 2.0
) -> int:
    """Upward threshold crossings, de-duplicated within a refractory window."""
    v = np.asarray(v, dtype=float)
    above = v > threshold
    crossings = np.flatnonzero(above[1:] & ~above[:-1]) + 1
    if crossings.size == 0:
        return 0
    min_gap = int(np.ceil(refractory_ms / dt))
    count = 1
    last = crossings[0]
    for idx in crossings[1:]:
        if idx - last >= min_gap:
            count += 1
            last = idx
    return count


def save_stimulus_csv(path: str | Path, times_ms: np.ndarray, currents: np.ndarray):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["time_ms", "current"])
        for t, c in zip(times_ms, currents):
            writer.writerow([repr(float(t)), repr(float(c))])


def load_stimulus_csv(path: str | Path):
    """Read a stimulus table; returns a step-interpolating callable."""
    times = []
    currents = []
    with open(path) as fh:
        for row in csv.DictReader(fh):
            times.append(float(row["time_ms"]))
            currents.append(float(row["current"]))
    times_arr = np.asarray(times)
    currents_arr = np.asarray(currents)

    def stim(t_ms):
        t_ms = np.asarray(t_ms, dtype=float)
        idx = np.clip(np.searchsorted(times_arr, t_ms, side="right") - 1, 0, None)
        return currents_arr[idx]

    return stim


def save_trace_csv(path: str | Path, trace: HHTrace) -> None:
    """Trace file: time_ms, v_true, y_obs (blank off the observation grid),
    m, h, n."""
    obs_lookup = {int(i): float(y) for i, y in zip(trace.obs_indices, trace.observations)}
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["time_ms", "v_true", "y_obs", "m", "h", "n"])
        for step, (t, lat) in enumerate(zip(trace.times, trace.latents)):
            y_val = obs_lookup.get(step, "")
            writer.writerow(
                [
                    repr(float(t)),
                    repr(float(lat[0])),
                    repr(y_val) if y_val != "" else "",
                    repr(float(lat[1])),
                    repr(float(lat[2])),
                    repr(float(lat[3])),
                ]
            )
