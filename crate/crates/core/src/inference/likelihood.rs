//! Gaussian measurement model over a selected subset of free states.

use crate::error::InferenceError;
use crate::grid::GridTopology;
use nalgebra::DVector;
use serde::{Deserialize, Serialize};

/// Selection of measured state entries with independent Gaussian noise.
/// Every selected entry must be FREE (not pinned by a setpoint).
#[derive(Debug, Clone)]
pub struct MeasurementSpec {
    /// Full-layout indices of the measured entries.
    indices: Vec<usize>,
    /// Noise standard deviation per measurement, in the entry's own unit.
    sigmas: Vec<f64>,
    names: Vec<String>,
}

impl MeasurementSpec {
    pub fn new(topo: &GridTopology, entries: &[(String, f64)]) -> Result<Self, InferenceError> {
        let lay = topo.layout();
        let mut indices = Vec::with_capacity(entries.len());
        let mut sigmas = Vec::with_capacity(entries.len());
        let mut names = Vec::with_capacity(entries.len());
        for (name, sigma) in entries {
            let idx = lay
                .index_of(name)
                .ok_or_else(|| InferenceError::BadMeasurement(name.clone()))?;
            if lay.is_fixed(idx) {
                return Err(InferenceError::BadMeasurement(format!(
                    "{name} is fixed by a setpoint"
                )));
            }
            if !(*sigma > 0.0) {
                return Err(InferenceError::Format(format!(
                    "measurement {name}: sigma must be > 0"
                )));
            }
            indices.push(idx);
            sigmas.push(*sigma);
            names.push(name.clone());
        }
        Ok(Self { indices, sigmas, names })
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }
    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
    pub fn indices(&self) -> &[usize] {
        &self.indices
    }
    pub fn sigmas(&self) -> &[f64] {
        &self.sigmas
    }
    pub fn names(&self) -> &[String] {
        &self.names
    }

    /// Select the measured entries out of a full state vector.
    pub fn select(&self, state: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(self.indices.len(), self.indices.iter().map(|&i| state[i]))
    }
}

/// Observed values aligned with a [`MeasurementSpec`].
#[derive(Debug, Clone)]
pub struct Measurement {
    pub values: DVector<f64>,
}

impl Measurement {
    pub fn new(values: DVector<f64>) -> Self {
        Self { values }
    }
}

/// Unnormalised Gaussian log-likelihood of `m` around the selected entries of
/// the full state vector (diagonal noise; the constant term is omitted).
pub fn log_likelihood(spec: &MeasurementSpec, m: &Measurement, state: &DVector<f64>) -> f64 {
    let mut ll = 0.0;
    for (k, &idx) in spec.indices.iter().enumerate() {
        let r = (m.values[k] - state[idx]) / spec.sigmas[k];
        ll -= 0.5 * r * r;
    }
    ll
}

/// d log-likelihood / d state, nonzero only at measured entries.
pub fn grad_log_likelihood_state(
    spec: &MeasurementSpec,
    m: &Measurement,
    state: &DVector<f64>,
) -> DVector<f64> {
    let mut g = DVector::zeros(state.len());
    for (k, &idx) in spec.indices.iter().enumerate() {
        g[idx] = (m.values[k] - state[idx]) / (spec.sigmas[k] * spec.sigmas[k]);
    }
    g
}

/// Measurements file format: a JSON list of named states with values and
/// noise levels.
#[derive(Debug, Serialize, Deserialize)]
pub struct MeasurementEntryDoc {
    pub state: String,
    pub value: f64,
    pub sigma: f64,
}

pub fn load_measurements(
    topo: &GridTopology,
    text: &str,
) -> Result<(MeasurementSpec, Measurement), InferenceError> {
    let docs: Vec<MeasurementEntryDoc> =
        serde_json::from_str(text).map_err(|e| InferenceError::Format(e.to_string()))?;
    let entries: Vec<(String, f64)> =
        docs.iter().map(|d| (d.state.clone(), d.sigma)).collect();
    let spec = MeasurementSpec::new(topo, &entries)?;
    let values = DVector::from_iterator(docs.len(), docs.iter().map(|d| d.value));
    Ok((spec, Measurement::new(values)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::make_loop_grid;

    #[test]
    fn likelihood_is_maximal_at_the_data() {
        let topo = make_loop_grid();
        let spec =
            MeasurementSpec::new(&topo, &[("T:hp_r".into(), 0.5), ("mdot:hp_r->hp_s".into(), 0.03)])
                .unwrap();
        let mut state = topo.initial_state();
        let lay = topo.layout();
        state.values[lay.index_of("T:hp_r").unwrap()] = 48.0;
        state.values[lay.index_of("mdot:hp_r->hp_s").unwrap()] = 2.6;
        let m = Measurement::new(DVector::from_row_slice(&[48.0, 2.6]));
        let at_data = log_likelihood(&spec, &m, &state.values);
        assert_eq!(at_data, 0.0);
        // one measurement off by one sigma drops the log-likelihood by 1/2
        state.values[lay.index_of("T:hp_r").unwrap()] = 48.5;
        let off = log_likelihood(&spec, &m, &state.values);
        approx::assert_relative_eq!(at_data - off, 0.5, epsilon = 1e-12);
    }

    #[test]
    fn independent_measurements_add() {
        let topo = make_loop_grid();
        let both =
            MeasurementSpec::new(&topo, &[("T:hp_r".into(), 0.5), ("T:s_b".into(), 0.25)]).unwrap();
        let first = MeasurementSpec::new(&topo, &[("T:hp_r".into(), 0.5)]).unwrap();
        let second = MeasurementSpec::new(&topo, &[("T:s_b".into(), 0.25)]).unwrap();
        let state = topo.initial_state();
        let m2 = Measurement::new(DVector::from_row_slice(&[47.0, 113.0]));
        let ma = Measurement::new(DVector::from_row_slice(&[47.0]));
        let mb = Measurement::new(DVector::from_row_slice(&[113.0]));
        let sum = log_likelihood(&first, &ma, &state.values)
            + log_likelihood(&second, &mb, &state.values);
        approx::assert_relative_eq!(
            log_likelihood(&both, &m2, &state.values),
            sum,
            epsilon = 1e-12
        );
    }

    #[test]
    fn fixed_states_cannot_be_measured() {
        let topo = make_loop_grid();
        // slack node pressure is fixed by the slack setpoints
        let err = MeasurementSpec::new(&topo, &[("p:hp_s".into(), 0.01)]);
        assert!(matches!(err, Err(InferenceError::BadMeasurement(_))));
        let err = MeasurementSpec::new(&topo, &[("T:nowhere".into(), 0.01)]);
        assert!(matches!(err, Err(InferenceError::BadMeasurement(_))));
    }

    #[test]
    fn gradient_points_toward_the_data() {
        let topo = make_loop_grid();
        let lay = topo.layout();
        let spec = MeasurementSpec::new(&topo, &[("T:hp_r".into(), 0.5)]).unwrap();
        let mut state = topo.initial_state();
        let idx = lay.index_of("T:hp_r").unwrap();
        state.values[idx] = 47.0;
        let m = Measurement::new(DVector::from_row_slice(&[48.0]));
        let g = grad_log_likelihood_state(&spec, &m, &state.values);
        approx::assert_relative_eq!(g[idx], 1.0 / 0.25, epsilon = 1e-12);
        assert_eq!(g.iter().filter(|v| **v != 0.0).count(), 1);
    }
}
