"""Conductance model: rates, splitting integrator, noise model, traces."""

import numpy as np
import pytest

from twistsmc import BootstrapProposal, RngStream, SMCConfig, smc_sweep
from twistsmc.hh import (
    HHParams,
    HHState,
    NonFiniteStateError,
    StepStimulus,
    count_spikes,
    hh_model,
    hh_prob_step,
    hh_rates,
    hh_transition_logpdf,
    load_stimulus_csv,
    logitnormal_logpdf,
    observations_to_dense,
    resting_state,
    save_stimulus_csv,
    save_trace_csv,
    simulate_trace,
    stimulus_values,
    strang_step,
    vector_field,
)

from oracles import gauss_legendre_01

SPIKE_KICK = StepStimulus(80.0, 5.0, 5.3)


def integrate(params, stimulus, dt, t_ms, init=None):
    n = int(round(t_ms / dt))
    currents = stimulus_values(stimulus, n, dt)
    state = resting_state(params) if init is None else init
    out = np.empty((n, 4))
    for i in range(n):
        state = strang_step(state, dt, float(currents[i]), params)
        out[i] = state
    return out


@pytest.fixture(scope="module")
def reference_trajectory():
    params = HHParams()
    return integrate(params, SPIKE_KICK, 0.001, 50.0)


class TestRates:
    def test_beta_m_at_minus_65(self):
        _, beta_m, _, _, _, _ = hh_rates(-65.0)
        assert beta_m == pytest.approx(4.0, abs=1e-12)

    def test_alpha_h_at_minus_65(self):
        _, _, alpha_h, _, _, _ = hh_rates(-65.0)
        assert alpha_h == pytest.approx(0.07, abs=1e-12)

    def test_alpha_m_removable_singularity(self):
        alpha_m, _, _, _, _, _ = hh_rates(-40.0)
        assert alpha_m == pytest.approx(1.0, abs=1e-12)
        lo = hh_rates(-40.0 - 1e-6)[0]
        hi = hh_rates(-40.0 + 1e-6)[0]
        assert lo == pytest.approx(1.0, abs=1e-6)
        assert hi == pytest.approx(1.0, abs=1e-6)

    def test_alpha_n_removable_singularity(self):
        alpha_n = hh_rates(-55.0)[4]
        assert alpha_n == pytest.approx(0.1, abs=1e-12)

    def test_all_rates_positive_over_physiological_range(self):
        v = np.linspace(-120.0, 80.0, 401)
        for rate in hh_rates(v):
            assert np.all(rate > 0)
            assert np.all(np.isfinite(rate))


class TestStrangStep:
    def test_fixed_point_is_stationary(self):
        params = HHParams()
        rest = resting_state(params)
        assert np.abs(vector_field(rest, 0.0, params)[0]) < 1e-9
        stepped = strang_step(rest, 0.1, 0.0, params)
        assert np.abs(stepped - rest).max() < 1e-9

    def test_pulse_trajectory_rms_error(self, reference_trajectory):
        params = HHParams()
        coarse = integrate(params, SPIKE_KICK, 0.1, 50.0)
        aligned_ref = reference_trajectory[99::100]
        rms = np.sqrt(np.mean((coarse[:, 0] - aligned_ref[:, 0]) ** 2))
        assert count_spikes(reference_trajectory[:, 0], 0.001) >= 1
        assert rms < 2.0
        assert np.all(np.isfinite(coarse))

    def test_halving_dt_reduces_error_second_order(self, reference_trajectory):
        params = HHParams()
        aligned_ref = reference_trajectory[99::100]
        errs = {}
        for dt in (0.1, 0.05):
            coarse = integrate(params, SPIKE_KICK, dt, 50.0)
            stride = int(round(0.1 / dt))
            aligned = coarse[stride - 1 :: stride]
            errs[dt] = np.sqrt(np.mean((aligned[:, 0] - aligned_ref[:, 0]) ** 2))
        ratio = errs[0.1] / errs[0.05]
        assert 3.0 <= ratio <= 5.0

    def test_single_step_keeps_gates_interior_from_any_state(self):
        params = HHParams()
        gen = RngStream(100).generator()
        states = np.column_stack(
            [
                gen.uniform(-100.0, 60.0, size=100_000),
                gen.uniform(1e-9, 1 - 1e-9, size=(100_000, 3)),
            ]
        )
        stepped = strang_step(states, 0.1, 10.0, params)
        gates = stepped[:, 1:]
        assert np.all(gates > 0.0)
        assert np.all(gates < 1.0)

    def test_long_run_keeps_gates_interior(self):
        params = HHParams()
        v_grid = np.linspace(-100.0, 60.0, 9)
        state = np.column_stack([v_grid, np.full((9, 3), 0.5)])
        for _ in range(100_000):
            state = strang_step(state, 0.1, 0.0, params)
        gates = state[:, 1:]
        assert np.all(gates > 0.0)
        assert np.all(gates < 1.0)
        assert np.all(np.isfinite(state))


class TestProbabilisticStep:
    def test_logit_normal_density_integrates_to_one(self):
        nodes, weights = gauss_legendre_01(400)
        for mu, var in [(0.0, 0.01), (1.5, 0.25), (-2.0, 1.0)]:
            total = np.sum(weights * np.exp(logitnormal_logpdf(nodes, mu, var)))
            assert total == pytest.approx(1.0, abs=1e-6)

    def test_transition_density_symmetric_in_voltage(self):
        params = HHParams()
        rest = resting_state(params)
        det = strang_step(rest, params.dt, 0.0, params)
        for delta in (0.1, 1.0, 3.0):
            up = det.copy()
            dn = det.copy()
            up[0] += delta
            dn[0] -= delta
            lp_up = hh_transition_logpdf(up[None], rest[None], params, 0.0)
            lp_dn = hh_transition_logpdf(dn[None], rest[None], params, 0.0)
            assert lp_up[0] == pytest.approx(lp_dn[0], abs=1e-12)

    def test_small_noise_prefers_deterministic_point(self):
        params = HHParams(
            sigma_v_sq=1e-6, sigma_m_sq=1e-6, sigma_h_sq=1e-6, sigma_n_sq=1e-6
        )
        rest = resting_state(params)
        det = strang_step(rest, params.dt, 0.0, params)
        lp_det = hh_transition_logpdf(det[None], rest[None], params, 0.0)[0]
        gen = RngStream(101).generator()
        for _ in range(20):
            other = det + np.concatenate(
                [gen.normal(0, 0.5, 1), gen.normal(0, 0.02, 3)]
            )
            other[1:] = np.clip(other[1:], 1e-6, 1 - 1e-6)
            lp_other = hh_transition_logpdf(other[None], rest[None], params, 0.0)[0]
            assert lp_det > lp_other

    def test_sampled_gates_stay_interior(self):
        params = HHParams()
        gen = RngStream(102).generator()
        state = np.broadcast_to(resting_state(params), (1000, 4)).copy()
        for _ in range(100):
            state = hh_prob_step(state, params, 10.0, gen)
        assert np.all(state[:, 1:] > 0)
        assert np.all(state[:, 1:] < 1)


class TestSimulateTrace:
    def test_quiet_membrane_does_not_spike(self):
        params = HHParams(sigma_v_sq=0.01)
        trace = simulate_trace(
            params, StepStimulus(0.0, 0.0, 0.0), 50.0, RngStream(103)
        )
        assert trace.latents[:, 0].max() < 0.0
        assert count_spikes(trace.latents[:, 0], params.dt) == 0

    def test_strong_step_current_spikes(self):
        params = HHParams()
        trace = simulate_trace(params, SPIKE_KICK, 50.0, RngStream(104))
        assert count_spikes(trace.latents[:, 0], params.dt) >= 1

    def test_observation_bookkeeping(self):
        params = HHParams()
        trace = simulate_trace(params, SPIKE_KICK, 50.0, RngStream(105))
        assert trace.observations.shape == (50,)
        assert trace.latents.shape == (500, 4)
        np.testing.assert_array_equal(
            trace.obs_indices, np.arange(1, 51) * 10 - 1
        )

    def test_non_finite_state_reports_step(self):
        params = HHParams()
        bad_init = np.array([np.inf, 0.5, 0.5, 0.5])
        with pytest.raises(NonFiniteStateError) as err:
            simulate_trace(
                params, SPIKE_KICK, 10.0, RngStream(106), init=bad_init
            )
        assert err.value.step == 0

    def test_spike_counter_deduplicates(self):
        v = np.full(1000, -65.0)
        v[100:105] = 20.0
        v[107:112] = 20.0  # same event: within the 2 ms refractory window
        v[500:505] = 20.0
        assert count_spikes(v, 0.1) == 2


class TestBootstrapSMC:
    def test_finite_bound_and_improvement_with_particles(self):
        params = HHParams()
        trace = simulate_trace(params, SPIKE_KICK, 10.0, RngStream(107))
        model = hh_model(params, SPIKE_KICK, 10)
        y = observations_to_dense(trace, model.horizon)
        prop = BootstrapProposal(model)
        means = []
        for n in (4, 64):
            vals = [
                smc_sweep(
                    model, y, prop, SMCConfig(num_particles=n),
                    RngStream(108).child(s),
                ).log_z_hat
                for s in range(10)
            ]
            assert np.all(np.isfinite(vals))
            means.append(np.mean(vals))
        assert means[1] > means[0]


class TestStateContainer:
    def test_round_trip(self):
        state = HHState(v=-65.0, m=0.05, h=0.6, n=0.32)
        arr = state.as_array()
        assert HHState.from_array(arr) == state


class TestFileFormats:
    def test_stimulus_csv_round_trip(self, tmp_path):
        times = np.array([0.0, 5.0, 5.3])
        currents = np.array([0.0, 80.0, 0.0])
        path = tmp_path / "stim.csv"
        save_stimulus_csv(path, times, currents)
        stim = load_stimulus_csv(path)
        probe = np.array([0.0, 4.9, 5.0, 5.2, 5.3, 40.0])
        np.testing.assert_allclose(
            stim(probe), [0.0, 0.0, 80.0, 80.0, 0.0, 0.0]
        )

    def test_trace_csv_headers_and_rows(self, tmp_path):
        params = HHParams()
        trace = simulate_trace(params, SPIKE_KICK, 5.0, RngStream(109))
        path = tmp_path / "trace.csv"
        save_trace_csv(path, trace)
        lines = path.read_text().strip().split("\n")
        assert lines[0] == "time_ms,v_true,y_obs,m,h,n"
        assert len(lines) == 1 + 50
        # Observation column is populated exactly once per ms.
        filled = [ln for ln in lines[1:] if ln.split(",")[2] != ""]
        assert len(filled) == 5
