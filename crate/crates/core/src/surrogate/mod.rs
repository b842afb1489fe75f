//! Fully connected surrogate of the nonlinear solver map.
//!
//! Architecture: input (one neuron per heat exchange), hidden layers of 100,
//! 250, and 250 ReLU units, linear output covering the free state entries.
//! Inputs are min/max-scaled into [0, 1], outputs standardised per dimension;
//! both scalers are fitted on the training split only. All dense math runs
//! through one gemm kernel whose per-row results do not depend on the batch
//! size, so single and batched prediction are bitwise identical.

mod dataset;
mod scaler;
mod train;

pub use dataset::{generate_dataset, Dataset, DatasetProvenance};
pub use scaler::{InputScaler, OutputScaler};
pub use train::{train, EpochStats, TrainReport, TrainingConfig};

use crate::error::{InferenceError, TrainError};
use crate::grid::{GridState, GridTopology};
use crate::inference::{BatchVjp, DifferentiableMap, StateMap};
use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::path::Path;

pub(crate) const HIDDEN_WIDTHS: [usize; 3] = [100, 250, 250];
const BATCH_CHUNK_ROWS: usize = 4096;

/// C (m x n) += A (m x k) * B (k x n), all row-major. Per-row results are
/// independent of m (verified by test), which keeps predictions bitwise
/// stable across batch shapes.
pub(crate) fn gemm_rm(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], beta: f64, c: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            n as isize,
            1,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
pub struct ModelProvenance {
    pub seed: u64,
    pub config_hash: String,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub n_train: usize,
    pub n_val: usize,
}

/// Trained feed-forward surrogate with its scalers. Immutable and shareable;
/// prediction and gradients are reentrant.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SurrogateNet {
    /// Layer widths: `[q_dim, 100, 250, 250, free_dim]`.
    pub dims: Vec<usize>,
    /// Row-major `[in x out]` weight matrices.
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
    pub input_scaler: InputScaler,
    pub output_scaler: OutputScaler,
    /// Layout names of the predicted (free) state entries.
    pub free_names: Vec<String>,
    pub q_names: Vec<String>,
    pub provenance: ModelProvenance,
}

impl SurrogateNet {
    pub fn q_dim(&self) -> usize {
        self.dims[0]
    }
    pub fn free_dim(&self) -> usize {
        *self.dims.last().unwrap()
    }
    pub fn n_layers(&self) -> usize {
        self.weights.len()
    }

    /// Check that the net was trained for this topology's layout.
    pub fn validate_for(&self, topo: &GridTopology) -> Result<(), TrainError> {
        let lay = topo.layout();
        let names: Vec<String> =
            lay.free_indices().iter().map(|&i| lay.name(i).to_string()).collect();
        if names != self.free_names || topo.q_names() != self.q_names {
            return Err(TrainError::ModelFile(
                "model was trained for a different grid layout".into(),
            ));
        }
        Ok(())
    }

    /// Scaled forward pass over row-major scaled inputs; returns scaled
    /// outputs and, optionally, the pre-activation records for backprop.
    pub(crate) fn forward_scaled(
        &self,
        n: usize,
        a0: &[f64],
        keep: Option<&mut Vec<Vec<f64>>>,
    ) -> Vec<f64> {
        let mut activations = a0.to_vec();
        let mut records: Vec<Vec<f64>> = Vec::new();
        for (l, w) in self.weights.iter().enumerate() {
            let (din, dout) = (self.dims[l], self.dims[l + 1]);
            let mut z = vec![0.0; n * dout];
            gemm_rm(n, din, dout, &activations, w, 0.0, &mut z);
            for r in 0..n {
                for c in 0..dout {
                    z[r * dout + c] += self.biases[l][c];
                }
            }
            if keep.is_some() {
                records.push(z.clone());
            }
            if l + 1 < self.weights.len() {
                for v in z.iter_mut() {
                    if *v < 0.0 {
                        *v = 0.0;
                    }
                }
            }
            activations = z;
        }
        if let Some(k) = keep {
            *k = records;
        }
        activations
    }

    fn scale_inputs(&self, n: usize, q_rows: &[f64]) -> Vec<f64> {
        let dq = self.q_dim();
        let mut out = vec![0.0; n * dq];
        for r in 0..n {
            for c in 0..dq {
                out[r * dq + c] = self.input_scaler.scale(c, q_rows[r * dq + c]);
            }
        }
        out
    }

    /// Predict the free state entries for a batch of q rows (row-major).
    /// Chunks are evaluated in parallel; results are identical to predicting
    /// each row alone.
    pub fn predict_free_batch(&self, n: usize, q_rows: &[f64]) -> Vec<f64> {
        let dq = self.q_dim();
        let dout = self.free_dim();
        debug_assert_eq!(q_rows.len(), n * dq);
        let chunks: Vec<Vec<f64>> = q_rows
            .par_chunks(BATCH_CHUNK_ROWS * dq)
            .map(|chunk| {
                let rows = chunk.len() / dq;
                let a0 = self.scale_inputs(rows, chunk);
                let mut y = self.forward_scaled(rows, &a0, None);
                for r in 0..rows {
                    for c in 0..dout {
                        y[r * dout + c] = self.output_scaler.unscale(c, y[r * dout + c]);
                    }
                }
                y
            })
            .collect();
        chunks.concat()
    }

    /// Predict the free state entries for one q.
    pub fn predict_free(&self, q: &DVector<f64>) -> DVector<f64> {
        let rows: Vec<f64> = q.iter().copied().collect();
        let y = self.predict_free_batch(1, &rows);
        DVector::from_vec(y)
    }

    /// Full grid state: prediction for the free entries, setpoints for the
    /// fixed ones.
    pub fn predict_state(&self, topo: &GridTopology, q: &DVector<f64>) -> GridState {
        topo.state_from_free(&self.predict_free(q))
    }

    /// Exact Jacobian d(free state)/dq of the scaled-composed network at q.
    /// Piecewise constant in q; subgradient zero exactly at ReLU kinks.
    pub fn grad_input(&self, q: &DVector<f64>) -> DMatrix<f64> {
        let dq = self.q_dim();
        let rows: Vec<f64> = q.iter().copied().collect();
        let a0 = self.scale_inputs(1, &rows);
        let mut records = Vec::new();
        let _ = self.forward_scaled(1, &a0, Some(&mut records));
        // chain the transposed layer maps from the output side
        let dout = self.free_dim();
        let last = self.n_layers() - 1;
        // J starts as W_last^T: (dout x d_{last})
        let din_last = self.dims[last];
        let mut j = DMatrix::zeros(dout, din_last);
        for i in 0..din_last {
            for o in 0..dout {
                j[(o, i)] = self.weights[last][i * dout + o];
            }
        }
        for l in (0..last).rev() {
            let din = self.dims[l];
            let dmid = self.dims[l + 1];
            // apply relu mask of layer l's output, then W_l^T
            let z = &records[l];
            let mut masked = j.clone();
            for c in 0..dmid {
                if z[c] <= 0.0 {
                    for r in 0..dout {
                        masked[(r, c)] = 0.0;
                    }
                }
            }
            let mut wt = DMatrix::zeros(dmid, din);
            for i in 0..din {
                for o in 0..dmid {
                    wt[(o, i)] = self.weights[l][i * dmid + o];
                }
            }
            j = masked * wt;
        }
        // scaler chain rule: output std outside, input slope inside
        for o in 0..dout {
            for c in 0..dq {
                j[(o, c)] *= self.output_scaler.std[o] * self.input_scaler.slope(c);
            }
        }
        j
    }

    /// Backpropagate output cotangents (one row per sample, in physical
    /// units of the free entries) to input gradients. Both matrices are
    /// row-major. Returns (free predictions, input gradients).
    pub(crate) fn vjp_batch(
        &self,
        n: usize,
        q_rows: &[f64],
        w_of_row: &mut dyn FnMut(usize, &[f64]) -> Vec<f64>,
    ) -> (Vec<f64>, Vec<f64>) {
        let dq = self.q_dim();
        let dout = self.free_dim();
        let a0 = self.scale_inputs(n, q_rows);
        let mut records = Vec::new();
        let y_scaled = self.forward_scaled(n, &a0, Some(&mut records));
        let mut y_phys = y_scaled.clone();
        for r in 0..n {
            for c in 0..dout {
                y_phys[r * dout + c] = self.output_scaler.unscale(c, y_scaled[r * dout + c]);
            }
        }
        // cotangent in scaled output space
        let mut delta = vec![0.0; n * dout];
        for r in 0..n {
            let w = w_of_row(r, &y_phys[r * dout..(r + 1) * dout]);
            debug_assert_eq!(w.len(), dout);
            for c in 0..dout {
                delta[r * dout + c] = w[c] * self.output_scaler.std[c];
            }
        }
        // walk layers backwards: delta_{l} -> delta_{l-1} = (delta_l W_l^T) o relu'
        let mut grad = delta;
        for l in (0..self.n_layers()).rev() {
            let (din, dmid) = (self.dims[l], self.dims[l + 1]);
            // W^T as row-major [out x in]
            let mut wt = vec![0.0; dmid * din];
            for i in 0..din {
                for o in 0..dmid {
                    wt[o * din + i] = self.weights[l][i * dmid + o];
                }
            }
            let mut next = vec![0.0; n * din];
            gemm_rm(n, dmid, din, &grad, &wt, 0.0, &mut next);
            if l > 0 {
                let z = &records[l - 1];
                for (v, &zz) in next.iter_mut().zip(z.iter()) {
                    if zz <= 0.0 {
                        *v = 0.0;
                    }
                }
            }
            grad = next;
        }
        // input scaler slope
        for r in 0..n {
            for c in 0..dq {
                grad[r * dq + c] *= self.input_scaler.slope(c);
            }
        }
        (y_phys, grad)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), TrainError> {
        let text = serde_json::to_string(self).map_err(|e| TrainError::ModelFile(e.to_string()))?;
        std::fs::write(path, text + "\n").map_err(|e| TrainError::ModelFile(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, TrainError> {
        let text =
            std::fs::read_to_string(path).map_err(|e| TrainError::ModelFile(e.to_string()))?;
        serde_json::from_str(&text).map_err(|e| TrainError::ModelFile(e.to_string()))
    }
}

/// The surrogate bound to its grid: a drop-in [`StateMap`] for the samplers.
pub struct SurrogateMap<'a> {
    pub net: &'a SurrogateNet,
    pub topo: &'a GridTopology,
}

impl SurrogateMap<'_> {
    fn embed(&self, free: &[f64]) -> DVector<f64> {
        self.topo.state_from_free(&DVector::from_row_slice(free)).values
    }

    /// Select the free entries of a full-state cotangent (fixed entries have
    /// zero sensitivity) scaled for the net's output space.
    fn free_cotangent(&self, w: &DVector<f64>) -> Vec<f64> {
        self.topo
            .layout()
            .free_indices()
            .iter()
            .map(|&full| w[full])
            .collect()
    }
}

impl StateMap for SurrogateMap<'_> {
    fn state(&self, q: &DVector<f64>) -> Result<DVector<f64>, InferenceError> {
        Ok(self.net.predict_state(self.topo, q).values)
    }
}

impl DifferentiableMap for SurrogateMap<'_> {
    fn state_and_vjp(
        &self,
        q: &DVector<f64>,
        w: &DVector<f64>,
    ) -> Result<(DVector<f64>, DVector<f64>), InferenceError> {
        let q_rows: Vec<f64> = q.iter().copied().collect();
        let mut w_free = Some(self.free_cotangent(w));
        let (y, g) = self.net.vjp_batch(1, &q_rows, &mut |_, _| w_free.take().unwrap());
        Ok((self.embed(&y), DVector::from_vec(g)))
    }

    fn states_and_vjps(
        &self,
        qs: &DMatrix<f64>,
        cotangent: &mut dyn FnMut(usize, &DVector<f64>) -> DVector<f64>,
    ) -> Result<BatchVjp, InferenceError> {
        let n = qs.nrows();
        let dq = qs.ncols();
        let mut q_rows = vec![0.0; n * dq];
        for r in 0..n {
            for c in 0..dq {
                q_rows[r * dq + c] = qs[(r, c)];
            }
        }
        let mut full_states: Vec<DVector<f64>> = Vec::with_capacity(n);
        let (_, grads) = self.net.vjp_batch(n, &q_rows, &mut |r, y_free| {
            let full = self.embed(y_free);
            let w = cotangent(r, &full);
            let sel = self.free_cotangent(&w);
            full_states.push(full);
            sel
        });
        let dim = full_states[0].len();
        let mut states = DMatrix::zeros(n, dim);
        for (r, s) in full_states.iter().enumerate() {
            for c in 0..dim {
                states[(r, c)] = s[c];
            }
        }
        let mut vjps = DMatrix::zeros(n, dq);
        for r in 0..n {
            for c in 0..dq {
                vjps[(r, c)] = grads[r * dq + c];
            }
        }
        Ok(BatchVjp { states, vjps })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::util::stream_rng;
    use rand::Rng;
    use rand_distr::StandardNormal;

    pub(crate) fn random_net(dq: usize, dout: usize, seed: u64) -> SurrogateNet {
        let dims = vec![dq, HIDDEN_WIDTHS[0], HIDDEN_WIDTHS[1], HIDDEN_WIDTHS[2], dout];
        let mut rng = stream_rng(seed, 0);
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for w in dims.windows(2) {
            let scale = (2.0 / w[0] as f64).sqrt();
            weights.push(
                (0..w[0] * w[1])
                    .map(|_| rng.sample::<f64, _>(StandardNormal) * scale)
                    .collect::<Vec<f64>>(),
            );
            biases.push((0..w[1]).map(|_| 0.01 * rng.sample::<f64, _>(StandardNormal)).collect());
        }
        SurrogateNet {
            dims,
            weights,
            biases,
            input_scaler: InputScaler {
                lo: vec![-1.0; dq],
                hi: vec![3.0; dq],
            },
            output_scaler: OutputScaler {
                mean: (0..dout).map(|i| i as f64).collect(),
                std: (0..dout).map(|i| 0.5 + 0.1 * i as f64).collect(),
            },
            free_names: (0..dout).map(|i| format!("f{i}")).collect(),
            q_names: (0..dq).map(|i| format!("q{i}")).collect(),
            provenance: ModelProvenance::default(),
        }
    }

    #[test]
    fn single_and_batched_predictions_are_bitwise_identical() {
        let net = random_net(4, 75, 1);
        let mut rng = stream_rng(2, 0);
        let n = 257;
        let q_rows: Vec<f64> = (0..n * 4).map(|_| rng.random::<f64>() * 2.0).collect();
        let batch = net.predict_free_batch(n, &q_rows);
        for r in [0usize, 1, 137, 255, 256] {
            let single = net.predict_free(&DVector::from_row_slice(&q_rows[r * 4..(r + 1) * 4]));
            for c in 0..75 {
                assert_eq!(
                    single[c].to_bits(),
                    batch[r * 75 + c].to_bits(),
                    "row {r} col {c}"
                );
            }
        }
    }

    #[test]
    fn grad_input_matches_finite_differences_away_from_kinks() {
        let net = random_net(3, 8, 3);
        let mut rng = stream_rng(4, 0);
        // rejection-sample a point where no pre-activation is near zero
        let q = loop {
            let q = DVector::from_iterator(3, (0..3).map(|_| rng.random::<f64>() * 2.0));
            let rows: Vec<f64> = q.iter().copied().collect();
            let a0 = net.scale_inputs(1, &rows);
            let mut rec = Vec::new();
            let _ = net.forward_scaled(1, &a0, Some(&mut rec));
            let near_kink = rec[..rec.len() - 1]
                .iter()
                .any(|layer| layer.iter().any(|z| z.abs() < 1e-4));
            if !near_kink {
                break q;
            }
        };
        let j = net.grad_input(&q);
        let h = 1e-3;
        for c in 0..3 {
            let mut qp = q.clone();
            qp[c] += h;
            let mut qm = q.clone();
            qm[c] -= h;
            let yp = net.predict_free(&qp);
            let ym = net.predict_free(&qm);
            for o in 0..8 {
                let fd = (yp[o] - ym[o]) / (2.0 * h);
                let an = j[(o, c)];
                assert!(
                    (fd - an).abs() <= 1e-3 * an.abs().max(1e-6),
                    "({o},{c}): fd {fd} vs {an}"
                );
            }
        }
    }

    #[test]
    fn zero_weights_give_zero_gradient() {
        let mut net = random_net(2, 4, 5);
        for w in net.weights.iter_mut() {
            w.iter_mut().for_each(|v| *v = 0.0);
        }
        let j = net.grad_input(&DVector::from_row_slice(&[0.5, 0.5]));
        assert!(j.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn scaler_chain_rule_on_a_linear_unit_net() {
        // one effective linear path: gradient = std_out * w / input_range
        let mut net = random_net(1, 1, 6);
        for w in net.weights.iter_mut() {
            w.iter_mut().for_each(|v| *v = 0.0);
        }
        for b in net.biases.iter_mut() {
            b.iter_mut().for_each(|v| *v = 0.0);
        }
        // wire one monotone path through the hidden layers; positive input
        // keeps every relu active so the composition is linear
        net.weights[0][0] = 1.0; // input -> h1[0]
        net.weights[1][0] = 1.0; // h1[0] -> h2[0]
        net.weights[2][0] = 1.0; // h2[0] -> h3[0]
        net.weights[3][0] = 2.0; // h3[0] -> out
        net.input_scaler = InputScaler { lo: vec![0.0], hi: vec![4.0] };
        net.output_scaler = OutputScaler { mean: vec![10.0], std: vec![3.0] };
        let j = net.grad_input(&DVector::from_row_slice(&[2.0]));
        // d out/d q = std * 2.0 * (1/range) = 3 * 2 / 4
        approx::assert_relative_eq!(j[(0, 0)], 1.5, epsilon = 1e-12);
    }

    #[test]
    fn vjp_agrees_with_grad_input() {
        let net = random_net(4, 6, 7);
        let q = DVector::from_row_slice(&[0.3, 1.2, 2.0, 0.8]);
        let j = net.grad_input(&q);
        let w: Vec<f64> = (0..6).map(|i| 0.5 - 0.2 * i as f64).collect();
        let q_rows: Vec<f64> = q.iter().copied().collect();
        let mut w_once = Some(w.clone());
        let (_, g) = net.vjp_batch(1, &q_rows, &mut |_, _| w_once.take().unwrap());
        for c in 0..4 {
            let direct: f64 = (0..6).map(|o| w[o] * j[(o, c)]).sum();
            approx::assert_relative_eq!(g[c], direct, epsilon = 1e-10, max_relative = 1e-10);
        }
    }

    #[test]
    fn model_file_round_trip_is_bitwise() {
        let net = random_net(4, 10, 8);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        net.save(&path).unwrap();
        let re = SurrogateNet::load(&path).unwrap();
        assert_eq!(net.weights, re.weights);
        assert_eq!(net.biases, re.biases);
        assert_eq!(net.input_scaler, re.input_scaler);
        assert_eq!(net.output_scaler, re.output_scaler);
        let q = DVector::from_row_slice(&[0.1, 0.7, 1.3, 2.9]);
        let a = net.predict_free(&q);
        let b = re.predict_free(&q);
        for c in 0..10 {
            assert_eq!(a[c].to_bits(), b[c].to_bits());
        }
    }
}
