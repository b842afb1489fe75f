//! Training data generation: prior draws mapped through the exact solver.

use crate::error::TrainError;
use crate::grid::{GridTopology, HeatExchangeVector};
use crate::inference::TruncatedNormalPrior;
use crate::solver::{solve, SolverConfig};
use crate::util::stream_rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetProvenance {
    pub seed: u64,
    pub n: usize,
    pub psi_threshold: f64,
    pub redraws: usize,
    pub prior_mean_kw: Vec<f64>,
}

/// Paired (q, x) samples; x rows are full state vectors, every one solved to
/// the configured tolerance.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub q_dim: usize,
    pub x_dim: usize,
    /// row-major n x q_dim
    pub q: Vec<f64>,
    /// row-major n x x_dim
    pub x: Vec<f64>,
    pub provenance: DatasetProvenance,
}

impl Dataset {
    pub fn len(&self) -> usize {
        if self.q_dim == 0 {
            0
        } else {
            self.q.len() / self.q_dim
        }
    }
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn q_row(&self, r: usize) -> &[f64] {
        &self.q[r * self.q_dim..(r + 1) * self.q_dim]
    }
    pub fn x_row(&self, r: usize) -> &[f64] {
        &self.x[r * self.x_dim..(r + 1) * self.x_dim]
    }

    pub fn save_csv(
        &self,
        path: impl AsRef<Path>,
        q_names: &[String],
        x_names: &[String],
    ) -> Result<(), TrainError> {
        let path = path.as_ref();
        let mut w =
            csv::Writer::from_path(path).map_err(|e| TrainError::ModelFile(e.to_string()))?;
        let mut header: Vec<String> = q_names.iter().map(|n| format!("q_{n}")).collect();
        header.extend(x_names.iter().map(|n| format!("x_{n}")));
        w.write_record(&header).map_err(|e| TrainError::ModelFile(e.to_string()))?;
        for r in 0..self.len() {
            let mut rec: Vec<String> = Vec::with_capacity(header.len());
            rec.extend(self.q_row(r).iter().map(|v| format!("{v}")));
            rec.extend(self.x_row(r).iter().map(|v| format!("{v}")));
            w.write_record(&rec).map_err(|e| TrainError::ModelFile(e.to_string()))?;
        }
        w.flush().map_err(|e| TrainError::ModelFile(e.to_string()))?;
        let sidecar = path.with_extension(format!(
            "{}provenance.json",
            path.extension().map(|e| format!("{}.", e.to_string_lossy())).unwrap_or_default()
        ));
        let text = serde_json::to_string_pretty(&self.provenance)
            .map_err(|e| TrainError::ModelFile(e.to_string()))?;
        std::fs::write(sidecar, text + "\n").map_err(|e| TrainError::ModelFile(e.to_string()))?;
        Ok(())
    }

    pub fn load_csv(path: impl AsRef<Path>) -> Result<Self, TrainError> {
        let path = path.as_ref();
        let mut r =
            csv::Reader::from_path(path).map_err(|e| TrainError::ModelFile(e.to_string()))?;
        let header = r.headers().map_err(|e| TrainError::ModelFile(e.to_string()))?.clone();
        let q_dim = header.iter().filter(|c| c.starts_with("q_")).count();
        let x_dim = header.iter().filter(|c| c.starts_with("x_")).count();
        if q_dim == 0 || x_dim == 0 {
            return Err(TrainError::ModelFile("dataset CSV needs q_ and x_ columns".into()));
        }
        let mut q = Vec::new();
        let mut x = Vec::new();
        for rec in r.records() {
            let rec = rec.map_err(|e| TrainError::ModelFile(e.to_string()))?;
            for (i, field) in rec.iter().enumerate() {
                let v: f64 = field
                    .parse()
                    .map_err(|e| TrainError::ModelFile(format!("bad float: {e}")))?;
                if i < q_dim {
                    q.push(v);
                } else {
                    x.push(v);
                }
            }
        }
        let sidecar = path.with_extension(format!(
            "{}provenance.json",
            path.extension().map(|e| format!("{}.", e.to_string_lossy())).unwrap_or_default()
        ));
        let provenance = std::fs::read_to_string(sidecar)
            .ok()
            .and_then(|t| serde_json::from_str(&t).ok())
            .unwrap_or(DatasetProvenance {
                seed: 0,
                n: q.len() / q_dim,
                psi_threshold: f64::NAN,
                redraws: 0,
                prior_mean_kw: Vec::new(),
            });
        Ok(Self { q_dim, x_dim, q, x, provenance })
    }
}

/// Draw `n` prior samples and solve each to a grid state. Sample i uses RNG
/// stream i of the seed; non-convergent draws are redrawn from the same
/// stream (logged in the provenance). More than 1% redraws aborts: that
/// signals a prior/solver mismatch rather than bad luck.
pub fn generate_dataset(
    prior: &TruncatedNormalPrior,
    topo: &GridTopology,
    n: usize,
    seed: u64,
    solver_cfg: &SolverConfig,
) -> Result<Dataset, TrainError> {
    assert!(n >= 1, "dataset size must be >= 1");
    let q_dim = topo.q_dim();
    let x_dim = topo.layout().dim();
    let rows: Vec<(Vec<f64>, Vec<f64>, usize)> = (0..n)
        .into_par_iter()
        .map(|i| -> Result<_, TrainError> {
            let mut rng = stream_rng(seed, i as u64);
            let mut redraws = 0usize;
            loop {
                let q = prior
                    .sample_one(&mut rng)
                    .map_err(|e| TrainError::ModelFile(e.to_string()))?;
                let hx = HeatExchangeVector::new(q.clone());
                match solve(&hx, topo, solver_cfg) {
                    Ok((state, report)) if report.converged => {
                        return Ok((
                            q.iter().copied().collect(),
                            state.values.iter().copied().collect(),
                            redraws,
                        ));
                    }
                    _ => {
                        redraws += 1;
                        if redraws > 100 {
                            return Err(TrainError::TooManyRedraws { redraws, samples: 1 });
                        }
                    }
                }
            }
        })
        .collect::<Result<_, _>>()?;
    let redraws: usize = rows.iter().map(|r| r.2).sum();
    if redraws * 100 > n {
        return Err(TrainError::TooManyRedraws { redraws, samples: n });
    }
    let mut q = Vec::with_capacity(n * q_dim);
    let mut x = Vec::with_capacity(n * x_dim);
    for row in &rows {
        q.extend_from_slice(&row.0);
        x.extend_from_slice(&row.1);
    }
    Ok(Dataset {
        q_dim,
        x_dim,
        q,
        x,
        provenance: DatasetProvenance {
            seed,
            n,
            psi_threshold: solver_cfg.psi_threshold,
            redraws,
            prior_mean_kw: prior.mean().iter().copied().collect(),
        },
    })
}
