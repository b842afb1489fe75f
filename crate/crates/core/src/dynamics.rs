//! Bound on the steady-state assumption error after an instantaneous load
//! step.
//!
//! A pipe's outlet temperature reacts to an inlet change only after the
//! transport delay tau defined by the cumulative mass throughput. After a
//! demand step the mass flows jump immediately (incompressible fluid) while
//! the temperature field lags; freezing the flows at their post-step values
//! and evaluating the steady thermal equations there brackets the transient
//! supply temperatures. The gap between that bracket and the true new steady
//! state is the bound reported per demand.

use crate::error::SolveError;
use crate::grid::{GridState, GridTopology, HeatExchangeVector};
use crate::solver::{solve, SolverConfig};
use serde::{Deserialize, Serialize};

/// Fluid and pipe cross-section parameters for the time-domain relations.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PipeDynamicsParams {
    /// Fluid density [kg/m^3].
    pub rho: f64,
    /// Pipe cross-section area [m^2].
    pub area_m2: f64,
    /// Pipe length [m].
    pub length_m: f64,
    /// Heat loss coefficient [W/(m K)].
    pub lambda: f64,
    /// Specific heat capacity [kJ/(kg K)].
    pub cp: f64,
    /// Ambient temperature [degC].
    pub ambient_c: f64,
}

impl PipeDynamicsParams {
    /// Fluid mass held by the pipe [kg].
    pub fn hold_up_kg(&self) -> f64 {
        self.rho * self.area_m2 * self.length_m
    }
}

/// Piecewise-constant mass-flow history: (duration [s], flow [kg/s]) segments
/// in chronological order; evaluation happens at the end of the last segment.
#[derive(Debug, Clone)]
pub struct MassflowHistory {
    pub segments: Vec<(f64, f64)>,
}

impl MassflowHistory {
    pub fn constant(mdot: f64, duration_s: f64) -> Self {
        Self { segments: vec![(duration_s, mdot)] }
    }
}

/// Transport delay tau: the lookback time over which the integrated mass flow
/// equals the pipe hold-up. For constant flow this is `A l rho / mdot`.
pub fn delay_tau(history: &MassflowHistory, params: &PipeDynamicsParams) -> Result<f64, SolveError> {
    let target = params.hold_up_kg();
    let mut remaining = target;
    let mut tau = 0.0;
    for &(duration, mdot) in history.segments.iter().rev() {
        if mdot <= 0.0 {
            return Err(SolveError::DegenerateInput(
                "mass-flow history must be positive".into(),
            ));
        }
        let segment_mass = mdot * duration;
        if segment_mass >= remaining {
            tau += remaining / mdot;
            return Ok(tau);
        }
        remaining -= segment_mass;
        tau += duration;
    }
    Err(SolveError::DegenerateInput(format!(
        "history covers only {:.1} of {:.1} kg throughput",
        target - remaining,
        target
    )))
}

/// Dynamic outlet temperature of a pipe: the inlet temperature tau seconds
/// ago, cooled by the loss factor accumulated over the residence time.
/// `t_inlet_at` maps a lookback time [s] to the inlet temperature then.
pub fn dynamic_outlet_temperature(
    t_inlet_at: impl Fn(f64) -> f64,
    tau: f64,
    params: &PipeDynamicsParams,
) -> f64 {
    let decay =
        (-(params.lambda * tau) / (1e3 * params.cp * params.rho * params.area_m2)).exp();
    (t_inlet_at(tau) - params.ambient_c) * decay + params.ambient_c
}

/// Per-demand result of the load-step analysis [degC].
#[derive(Debug, Clone, Serialize)]
pub struct StepBound {
    pub demand: String,
    /// Supply temperature at the demand before the step.
    pub t_before: f64,
    /// Bracketing temperature at frozen post-step flows.
    pub t_bound: f64,
    /// Supply temperature at the new steady state.
    pub t_after: f64,
    /// |t_bound - t_after|: the bound on the steady-state modelling error.
    pub gap: f64,
}

/// Scale all demands by `scale_factor`, freeze the mass flows at their
/// instantaneous post-step values (heat-exchange equation at the pre-step
/// temperatures plus the hydraulic network), evaluate the steady thermal
/// field there, and compare with the true post-step steady state.
pub fn step_response_bound(
    topo: &GridTopology,
    q_before: &HeatExchangeVector,
    scale_factor: f64,
    cfg: &SolverConfig,
) -> Result<Vec<StepBound>, SolveError> {
    let lay = topo.layout();
    let (before, report) = solve(q_before, topo, cfg)?;
    if !report.converged {
        return Err(SolveError::NotConverged { psi: report.psi, iterations: report.nr_iterations });
    }
    let q_after = HeatExchangeVector::new(&q_before.values * scale_factor);
    let (after, report2) = solve(&q_after, topo, cfg)?;
    if !report2.converged {
        return Err(SolveError::NotConverged {
            psi: report2.psi,
            iterations: report2.nr_iterations,
        });
    }

    // instantaneous flows: heat-exchange equation at pre-step temperatures,
    // network hydraulics rebalanced, temperatures untouched
    let mut frozen = before.clone();
    crate::solver::rebalance_hydraulics(&mut frozen, &q_after, topo)?;
    // steady thermal field at the frozen flows (per-pipe constant-flow
    // transport, i.e. the dynamic relation with constant mass flow)
    crate::solver::settle_thermal(&mut frozen, topo);

    let mut out = Vec::new();
    for (qi, e) in topo.demand_edges().iter().enumerate() {
        let name = topo.q_names()[qi].clone();
        let t_before = before.t(lay, e.from);
        let t_bound = frozen.t(lay, e.from);
        let t_after = after.t(lay, e.from);
        out.push(StepBound {
            demand: name,
            t_before,
            t_bound,
            t_after,
            gap: (t_bound - t_after).abs(),
        });
    }
    Ok(out)
}

/// Bound brackets: for a load increase the frozen-flow temperature must sit
/// at or above both steady states (and below for a reduction).
pub fn bound_brackets(bound: &StepBound, scale_factor: f64) -> bool {
    let tol = 1e-6;
    if scale_factor >= 1.0 {
        bound.t_bound >= bound.t_before - tol && bound.t_bound >= bound.t_after - tol
    } else {
        bound.t_bound <= bound.t_before + tol && bound.t_bound <= bound.t_after + tol
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{loop_prior, make_loop_grid};
    use approx::assert_relative_eq;

    fn params() -> PipeDynamicsParams {
        PipeDynamicsParams {
            rho: 960.0,
            area_m2: 0.004,
            length_m: 300.0,
            lambda: 0.2325,
            cp: 4.18,
            ambient_c: 10.0,
        }
    }

    #[test]
    fn constant_flow_delay_is_holdup_over_flow() {
        let mut p = params();
        p.rho = 1000.0;
        p.area_m2 = 0.001;
        // hold-up = 1000 * 0.001 * 300 = 300 kg
        let tau = delay_tau(&MassflowHistory::constant(1.0, 1e6), &p).unwrap();
        assert_relative_eq!(tau, 300.0, epsilon = 1e-12);
        // doubling the flow halves the delay
        let tau2 = delay_tau(&MassflowHistory::constant(2.0, 1e6), &p).unwrap();
        assert_relative_eq!(tau2, 150.0, epsilon = 1e-12);
    }

    #[test]
    fn piecewise_history_integrates_backwards() {
        let mut p = params();
        p.rho = 1000.0;
        p.area_m2 = 0.001; // hold-up 300 kg
        let h = MassflowHistory { segments: vec![(100.0, 1.0), (100.0, 2.0)] };
        // last 100 s at 2 kg/s carry 200 kg; 100 more seconds at 1 kg/s add 100
        let tau = delay_tau(&h, &p).unwrap();
        assert_relative_eq!(tau, 200.0, epsilon = 1e-12);
    }

    #[test]
    fn insufficient_history_is_an_error() {
        let p = params();
        assert!(delay_tau(&MassflowHistory::constant(1.0, 10.0), &p).is_err());
    }

    #[test]
    fn constant_flow_reduces_to_the_steady_pipe_equation() {
        let p = params();
        let mdot = 2.0;
        let tau = delay_tau(&MassflowHistory::constant(mdot, 1e9), &p).unwrap();
        let t_dyn = dynamic_outlet_temperature(|_| 120.0, tau, &p);
        let t_steady = crate::grid::residual::pipe_outlet_temperature(
            120.0, mdot, p.length_m, p.lambda, p.cp, p.ambient_c,
        );
        assert_relative_eq!(t_dyn, t_steady, epsilon = 1e-12);
    }

    #[test]
    fn no_losses_means_pure_transport() {
        let mut p = params();
        p.lambda = 0.0;
        let t = dynamic_outlet_temperature(|lookback| 100.0 - lookback, 42.0, &p);
        assert_relative_eq!(t, 100.0 - 42.0, epsilon = 1e-12);
    }

    #[test]
    fn zero_delay_passes_the_inlet_through() {
        let p = params();
        let t = dynamic_outlet_temperature(|_| 95.0, 0.0, &p);
        assert_relative_eq!(t, 95.0, epsilon = 1e-12);
    }

    #[test]
    fn unit_scale_factor_means_zero_gap() {
        let topo = make_loop_grid();
        let q = HeatExchangeVector::from_slice(&[200.0, 20.0, 200.0, 200.0]);
        let bounds = step_response_bound(&topo, &q, 1.0, &SolverConfig::tight()).unwrap();
        for b in &bounds {
            assert!(b.gap < 1e-6, "{}: gap {}", b.demand, b.gap);
        }
    }

    #[test]
    fn bounds_bracket_the_transition() {
        let topo = make_loop_grid();
        let prior = loop_prior();
        let qs = prior.sample(10, 77).unwrap();
        for scale in [0.7, 1.3] {
            for r in 0..qs.nrows() {
                let q = HeatExchangeVector::new(qs.row(r).transpose());
                let bounds = step_response_bound(&topo, &q, scale, &SolverConfig::tight()).unwrap();
                for b in &bounds {
                    assert!(
                        bound_brackets(b, scale),
                        "scale {scale} demand {}: before {} bound {} after {}",
                        b.demand,
                        b.t_before,
                        b.t_bound,
                        b.t_after
                    );
                }
            }
        }
    }

    #[test]
    fn gaps_shrink_toward_unit_scale() {
        let topo = make_loop_grid();
        let q = HeatExchangeVector::from_slice(&[200.0, 20.0, 200.0, 200.0]);
        let cfg = SolverConfig::tight();
        let far = step_response_bound(&topo, &q, 0.7, &cfg).unwrap();
        let near = step_response_bound(&topo, &q, 0.9, &cfg).unwrap();
        for (f, n) in far.iter().zip(near.iter()) {
            assert!(
                n.gap <= f.gap + 1e-9,
                "{}: gap {} at 0.9 vs {} at 0.7",
                f.demand,
                n.gap,
                f.gap
            );
        }
    }
}
