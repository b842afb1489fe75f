//! Training loop: Adam on the weighted quadratic loss with early stopping on
//! a held-out validation split.
//!
//! The loss weighs each state group in its physical units (the mass-flow
//! group gets w = 500 to compensate for its numerically small values), which
//! in the standardised output space of the net becomes a per-dimension weight
//! of `w_group * sigma^2`. The returned weights are those of the epoch with
//! the lowest validation loss.

use super::{gemm_rm, Dataset, InputScaler, ModelProvenance, OutputScaler, SurrogateNet, HIDDEN_WIDTHS};
use crate::error::TrainError;
use crate::grid::{GridTopology, VarKind};
use crate::util::stream_rng;
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainingConfig {
    pub n_train: usize,
    pub n_val: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_epsilon: f64,
    /// Early-stop patience in epochs without a new best validation loss.
    pub patience: usize,
    /// Hard cap; early stopping normally fires first.
    pub max_epochs: usize,
    pub seed: u64,
    pub weight_temperature: f64,
    pub weight_massflow: f64,
    pub weight_pressure: f64,
    pub weight_end_temperature: f64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            n_train: 50_000,
            n_val: 12_500,
            batch_size: 32,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_epsilon: 1e-8,
            patience: 20,
            max_epochs: 1000,
            seed: 0,
            weight_temperature: 1.0,
            weight_massflow: 500.0,
            weight_pressure: 1.0,
            weight_end_temperature: 1.0,
        }
    }
}

impl TrainingConfig {
    pub fn hash(&self) -> String {
        let text = serde_json::to_string(self).expect("config serializes");
        let mut h = Sha256::new();
        h.update(text.as_bytes());
        hex_string(&h.finalize())
    }
}

fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochStats>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
}

struct Adam {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl Adam {
    fn new(shapes: &[usize]) -> Self {
        Self {
            m: shapes.iter().map(|&s| vec![0.0; s]).collect(),
            v: shapes.iter().map(|&s| vec![0.0; s]).collect(),
            t: 0,
        }
    }

    fn step(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]], cfg: &TrainingConfig) {
        self.t += 1;
        let b1t = 1.0 - cfg.beta1.powi(self.t as i32);
        let b2t = 1.0 - cfg.beta2.powi(self.t as i32);
        for (k, (p, g)) in params.iter_mut().zip(grads.iter()).enumerate() {
            let m = &mut self.m[k];
            let v = &mut self.v[k];
            for i in 0..p.len() {
                m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
                v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
                let mhat = m[i] / b1t;
                let vhat = v[i] / b2t;
                p[i] -= cfg.learning_rate * mhat / (vhat.sqrt() + cfg.adam_epsilon);
            }
        }
    }
}

/// Train a surrogate for `topo` on `dataset`. The first `n_train` rows are
/// the training split, the following `n_val` rows the validation split;
/// scalers are fitted on the training split only. Single-threaded and
/// deterministic for a seed.
pub fn train(
    dataset: &Dataset,
    topo: &GridTopology,
    cfg: &TrainingConfig,
) -> Result<(SurrogateNet, TrainReport), TrainError> {
    let lay = topo.layout();
    if dataset.is_empty() || cfg.n_train == 0 || cfg.n_train + cfg.n_val > dataset.len() {
        return Err(TrainError::BadSplit);
    }
    let dq = dataset.q_dim;
    let free: Vec<usize> = lay.free_indices().to_vec();
    let dout = free.len();

    // free-state targets
    let extract = |lo: usize, n: usize| -> Vec<f64> {
        let mut out = vec![0.0; n * dout];
        for r in 0..n {
            let row = dataset.x_row(lo + r);
            for (c, &full) in free.iter().enumerate() {
                out[r * dout + c] = row[full];
            }
        }
        out
    };
    let y_train = extract(0, cfg.n_train);
    let y_val = extract(cfg.n_train, cfg.n_val);
    let q_train = &dataset.q[..cfg.n_train * dq];
    let q_val = &dataset.q[cfg.n_train * dq..(cfg.n_train + cfg.n_val) * dq];

    let input_scaler = InputScaler::fit(q_train, dq);
    let output_scaler = OutputScaler::fit(&y_train, dout);

    // per-dimension loss weight in the standardised space: w_group * sigma^2
    let weights_per_dim: Vec<f64> = free
        .iter()
        .enumerate()
        .map(|(c, &full)| {
            let group = match lay.kind(full) {
                VarKind::NodeTemperature => cfg.weight_temperature,
                VarKind::NodePressure => cfg.weight_pressure,
                VarKind::EdgeMassflow => cfg.weight_massflow,
                VarKind::EdgeEndTemperature => cfg.weight_end_temperature,
            };
            group * output_scaler.std[c] * output_scaler.std[c]
        })
        .collect();

    // standardised inputs/targets
    let scale_q = |q: &[f64], n: usize| {
        let mut a = vec![0.0; n * dq];
        for r in 0..n {
            for c in 0..dq {
                a[r * dq + c] = input_scaler.scale(c, q[r * dq + c]);
            }
        }
        a
    };
    let standardise_y = |y: &[f64], n: usize| {
        let mut t = vec![0.0; n * dout];
        for r in 0..n {
            for c in 0..dout {
                t[r * dout + c] = output_scaler.standardise(c, y[r * dout + c]);
            }
        }
        t
    };
    let a_train = scale_q(q_train, cfg.n_train);
    let t_train = standardise_y(&y_train, cfg.n_train);
    let a_val = scale_q(q_val, cfg.n_val);
    let t_val = standardise_y(&y_val, cfg.n_val);

    // Glorot-uniform init, seeded
    let dims = vec![dq, HIDDEN_WIDTHS[0], HIDDEN_WIDTHS[1], HIDDEN_WIDTHS[2], dout];
    let mut init_rng = stream_rng(cfg.seed, u64::MAX - 1);
    let mut weights: Vec<Vec<f64>> = Vec::new();
    let mut biases: Vec<Vec<f64>> = Vec::new();
    for w in dims.windows(2) {
        let limit = (6.0 / (w[0] + w[1]) as f64).sqrt();
        weights.push(
            (0..w[0] * w[1]).map(|_| init_rng.random_range(-limit..limit)).collect(),
        );
        biases.push(vec![0.0; w[1]]);
    }

    let n_layers = weights.len();
    let shapes: Vec<usize> = weights
        .iter()
        .map(|w| w.len())
        .chain(biases.iter().map(|b| b.len()))
        .collect();
    let mut adam = Adam::new(&shapes);

    let eval_loss = |weights: &[Vec<f64>], biases: &[Vec<f64>], a: &[f64], t: &[f64], n: usize| -> f64 {
        let mut total = 0.0;
        let chunk = 4096;
        let mut lo = 0;
        while lo < n {
            let rows = chunk.min(n - lo);
            let mut act = a[lo * dq..(lo + rows) * dq].to_vec();
            for l in 0..n_layers {
                let (din, dm) = (dims[l], dims[l + 1]);
                let mut z = vec![0.0; rows * dm];
                gemm_rm(rows, din, dm, &act, &weights[l], 0.0, &mut z);
                for r in 0..rows {
                    for c in 0..dm {
                        z[r * dm + c] += biases[l][c];
                    }
                }
                if l + 1 < n_layers {
                    for v in z.iter_mut() {
                        if *v < 0.0 {
                            *v = 0.0;
                        }
                    }
                }
                act = z;
            }
            for r in 0..rows {
                for c in 0..dout {
                    let d = act[r * dout + c] - t[(lo + r) * dout + c];
                    total += weights_per_dim[c] * d * d;
                }
            }
            lo += rows;
        }
        total / n as f64
    };

    let mut best_weights = weights.clone();
    let mut best_biases = biases.clone();
    let mut best_val = f64::INFINITY;
    let mut best_epoch = 0usize;
    let mut epochs: Vec<EpochStats> = Vec::new();
    let mut order: Vec<usize> = (0..cfg.n_train).collect();

    for epoch in 0..cfg.max_epochs {
        // seeded reshuffle per epoch
        let mut rng = stream_rng(cfg.seed, epoch as u64);
        for i in (1..order.len()).rev() {
            let j = rng.random_range(0..=i);
            order.swap(i, j);
        }

        let mut epoch_loss = 0.0;
        let mut lo = 0;
        while lo < cfg.n_train {
            let rows = cfg.batch_size.min(cfg.n_train - lo);
            // gather the batch
            let mut a0 = vec![0.0; rows * dq];
            let mut tb = vec![0.0; rows * dout];
            for (r, &src) in order[lo..lo + rows].iter().enumerate() {
                a0[r * dq..(r + 1) * dq].copy_from_slice(&a_train[src * dq..(src + 1) * dq]);
                tb[r * dout..(r + 1) * dout]
                    .copy_from_slice(&t_train[src * dout..(src + 1) * dout]);
            }
            // forward, keeping activations
            let mut acts: Vec<Vec<f64>> = vec![a0];
            for l in 0..n_layers {
                let (din, dm) = (dims[l], dims[l + 1]);
                let mut z = vec![0.0; rows * dm];
                gemm_rm(rows, din, dm, &acts[l], &weights[l], 0.0, &mut z);
                for r in 0..rows {
                    for c in 0..dm {
                        z[r * dm + c] += biases[l][c];
                    }
                }
                if l + 1 < n_layers {
                    for v in z.iter_mut() {
                        if *v < 0.0 {
                            *v = 0.0;
                        }
                    }
                }
                acts.push(z);
            }
            // loss and output delta
            let out = &acts[n_layers];
            let mut delta = vec![0.0; rows * dout];
            let mut batch_loss = 0.0;
            for r in 0..rows {
                for c in 0..dout {
                    let d = out[r * dout + c] - tb[r * dout + c];
                    batch_loss += weights_per_dim[c] * d * d;
                    delta[r * dout + c] = 2.0 * weights_per_dim[c] * d / rows as f64;
                }
            }
            epoch_loss += batch_loss;

            // backward
            let mut w_grads: Vec<Vec<f64>> = vec![Vec::new(); n_layers];
            let mut b_grads: Vec<Vec<f64>> = vec![Vec::new(); n_layers];
            let mut cur = delta;
            for l in (0..n_layers).rev() {
                let (din, dm) = (dims[l], dims[l + 1]);
                // dW = a^T * delta  (din x dm)
                let mut dw = vec![0.0; din * dm];
                unsafe {
                    matrixmultiply::dgemm(
                        din,
                        rows,
                        dm,
                        1.0,
                        acts[l].as_ptr(),
                        1,
                        din as isize,
                        cur.as_ptr(),
                        dm as isize,
                        1,
                        0.0,
                        dw.as_mut_ptr(),
                        dm as isize,
                        1,
                    );
                }
                let mut db = vec![0.0; dm];
                for r in 0..rows {
                    for c in 0..dm {
                        db[c] += cur[r * dm + c];
                    }
                }
                if l > 0 {
                    // delta_{l-1} = (delta_l W^T) o relu'(z_{l-1})
                    let mut wt = vec![0.0; dm * din];
                    for i in 0..din {
                        for o in 0..dm {
                            wt[o * din + i] = weights[l][i * dm + o];
                        }
                    }
                    let mut prev = vec![0.0; rows * din];
                    gemm_rm(rows, dm, din, &cur, &wt, 0.0, &mut prev);
                    for (v, &a) in prev.iter_mut().zip(acts[l].iter()) {
                        if a <= 0.0 {
                            *v = 0.0;
                        }
                    }
                    cur = prev;
                }
                w_grads[l] = dw;
                b_grads[l] = db;
            }

            // one Adam step over all params
            {
                let (w01, w23) = weights.split_at_mut(2);
                let (w0, w1) = w01.split_at_mut(1);
                let (w2, w3) = w23.split_at_mut(1);
                let (b01, b23) = biases.split_at_mut(2);
                let (b0, b1) = b01.split_at_mut(1);
                let (b2, b3) = b23.split_at_mut(1);
                let mut params: Vec<&mut [f64]> = vec![
                    &mut w0[0], &mut w1[0], &mut w2[0], &mut w3[0], &mut b0[0], &mut b1[0],
                    &mut b2[0], &mut b3[0],
                ];
                let grads: Vec<&[f64]> = w_grads.iter().chain(b_grads.iter()).map(|g| g.as_slice()).collect();
                adam.step(&mut params, &grads, cfg);
            }
            lo += rows;
        }
        let train_loss = epoch_loss / cfg.n_train as f64;
        let val_loss = eval_loss(&weights, &biases, &a_val, &t_val, cfg.n_val);
        if !train_loss.is_finite() || !val_loss.is_finite() {
            let last = epochs.last();
            return Err(TrainError::Diverged {
                epoch,
                train_loss: last.map(|e| e.train_loss).unwrap_or(f64::NAN),
                val_loss: last.map(|e| e.val_loss).unwrap_or(f64::NAN),
            });
        }
        epochs.push(EpochStats { epoch, train_loss, val_loss });
        if val_loss < best_val {
            best_val = val_loss;
            best_epoch = epoch;
            best_weights = weights.clone();
            best_biases = biases.clone();
        } else if epoch - best_epoch >= cfg.patience {
            break;
        }
    }

    let free_names: Vec<String> =
        free.iter().map(|&i| lay.name(i).to_string()).collect();
    let net = SurrogateNet {
        dims,
        weights: best_weights,
        biases: best_biases,
        input_scaler,
        output_scaler,
        free_names,
        q_names: topo.q_names(),
        provenance: ModelProvenance {
            seed: cfg.seed,
            config_hash: cfg.hash(),
            best_epoch,
            best_val_loss: best_val,
            n_train: cfg.n_train,
            n_val: cfg.n_val,
        },
    };
    Ok((net, TrainReport { epochs, best_epoch, best_val_loss: best_val }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{loop_prior, make_loop_grid};
    use crate::solver::SolverConfig;
    use crate::surrogate::generate_dataset;

    #[test]
    fn memorises_a_single_repeated_pair() {
        let topo = make_loop_grid();
        let prior = loop_prior();
        let one = generate_dataset(&prior, &topo, 1, 5, &SolverConfig::default()).unwrap();
        // repeat the same pair; tiny jitter on q so the input scaler has a range
        let n = 64;
        let mut ds = one.clone();
        ds.q = Vec::new();
        ds.x = Vec::new();
        for i in 0..n {
            let mut qr = one.q_row(0).to_vec();
            qr[0] += 1e-9 * i as f64;
            ds.q.extend_from_slice(&qr);
            ds.x.extend_from_slice(one.x_row(0));
        }
        let cfg = TrainingConfig {
            n_train: 48,
            n_val: 16,
            max_epochs: 200,
            patience: 200,
            ..TrainingConfig::default()
        };
        let (_, report) = train(&ds, &topo, &cfg).unwrap();
        let last = report.epochs.last().unwrap();
        assert!(
            last.train_loss < 1e-6,
            "train loss after memorisation: {}",
            last.train_loss
        );
    }

    #[test]
    fn returned_weights_carry_the_lowest_validation_loss() {
        let topo = make_loop_grid();
        let prior = loop_prior();
        let ds = generate_dataset(&prior, &topo, 300, 9, &SolverConfig::default()).unwrap();
        let cfg = TrainingConfig {
            n_train: 240,
            n_val: 60,
            max_epochs: 30,
            patience: 30,
            ..TrainingConfig::default()
        };
        let (net, report) = train(&ds, &topo, &cfg).unwrap();
        let min_recorded = report
            .epochs
            .iter()
            .map(|e| e.val_loss)
            .fold(f64::INFINITY, f64::min);
        assert_eq!(report.best_val_loss, min_recorded);
        assert_eq!(net.provenance.best_epoch, report.best_epoch);
    }

    #[test]
    fn bad_split_is_rejected() {
        let topo = make_loop_grid();
        let prior = loop_prior();
        let ds = generate_dataset(&prior, &topo, 10, 2, &SolverConfig::default()).unwrap();
        let cfg = TrainingConfig { n_train: 9, n_val: 5, ..TrainingConfig::default() };
        assert!(matches!(train(&ds, &topo, &cfg), Err(TrainError::BadSplit)));
    }

    #[test]
    fn training_is_deterministic_for_a_seed() {
        let topo = make_loop_grid();
        let prior = loop_prior();
        let ds = generate_dataset(&prior, &topo, 80, 4, &SolverConfig::default()).unwrap();
        let cfg = TrainingConfig {
            n_train: 64,
            n_val: 16,
            max_epochs: 5,
            ..TrainingConfig::default()
        };
        let (a, _) = train(&ds, &topo, &cfg).unwrap();
        let (b, _) = train(&ds, &topo, &cfg).unwrap();
        assert_eq!(a.weights, b.weights);
        assert_eq!(a.biases, b.biases);
    }
}
