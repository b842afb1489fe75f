//! Sample sets: the common currency of all samplers and metrics.

use crate::error::InferenceError;
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;

/// Where a sample set came from; written as a JSON sidecar next to the CSV.
#[derive(Debug, Clone, Serialize, Deserialize, Default)]
pub struct SampleProvenance {
    pub sampler: String,
    pub seed: u64,
    pub n_chains: usize,
    pub steps_per_chain: usize,
    pub burnin: usize,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub effective_sample_size: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean_acceptance: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub step_sizes: Option<Vec<f64>>,
}

/// Ordered collection of (q, x) samples with optional weights. Rows of `q` and
/// `x` are aligned; `x` rows are full state vectors in layout order.
#[derive(Debug, Clone)]
pub struct SampleSet {
    pub q: DMatrix<f64>,
    pub x: DMatrix<f64>,
    pub weights: Option<Vec<f64>>,
    /// (chain, step) per row.
    pub tags: Vec<(u32, u64)>,
    pub provenance: SampleProvenance,
}

impl SampleSet {
    pub fn len(&self) -> usize {
        self.x.nrows()
    }
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Write the CSV (`chain,step,q_...,x_...[,weight]`) and its provenance
    /// sidecar `<path>.provenance.json`.
    pub fn save_csv(
        &self,
        path: impl AsRef<Path>,
        q_names: &[String],
        x_names: &[String],
    ) -> Result<(), InferenceError> {
        let path = path.as_ref();
        let mut w = csv::Writer::from_path(path).map_err(|e| InferenceError::Format(e.to_string()))?;
        let mut header: Vec<String> = vec!["chain".into(), "step".into()];
        header.extend(q_names.iter().map(|n| format!("q_{n}")));
        header.extend(x_names.iter().map(|n| format!("x_{n}")));
        if self.weights.is_some() {
            header.push("weight".into());
        }
        w.write_record(&header).map_err(|e| InferenceError::Format(e.to_string()))?;
        for r in 0..self.len() {
            let mut rec: Vec<String> = Vec::with_capacity(header.len());
            rec.push(self.tags[r].0.to_string());
            rec.push(self.tags[r].1.to_string());
            for c in 0..self.q.ncols() {
                rec.push(format!("{}", self.q[(r, c)]));
            }
            for c in 0..self.x.ncols() {
                rec.push(format!("{}", self.x[(r, c)]));
            }
            if let Some(ws) = &self.weights {
                rec.push(format!("{}", ws[r]));
            }
            w.write_record(&rec).map_err(|e| InferenceError::Format(e.to_string()))?;
        }
        w.flush().map_err(InferenceError::Io)?;
        let sidecar = path.with_extension(format!(
            "{}provenance.json",
            path.extension().map(|e| format!("{}.", e.to_string_lossy())).unwrap_or_default()
        ));
        let mut f = std::fs::File::create(sidecar)?;
        let text = serde_json::to_string_pretty(&self.provenance)
            .map_err(|e| InferenceError::Format(e.to_string()))?;
        writeln!(f, "{text}")?;
        Ok(())
    }

    pub fn load_csv(path: impl AsRef<Path>) -> Result<Self, InferenceError> {
        let path = path.as_ref();
        let mut r =
            csv::Reader::from_path(path).map_err(|e| InferenceError::Format(e.to_string()))?;
        let header = r
            .headers()
            .map_err(|e| InferenceError::Format(e.to_string()))?
            .clone();
        let cols: Vec<&str> = header.iter().collect();
        if cols.len() < 2 || cols[0] != "chain" || cols[1] != "step" {
            return Err(InferenceError::Format("sample CSV must start with chain,step".into()));
        }
        let nq = cols.iter().filter(|c| c.starts_with("q_")).count();
        let nx = cols.iter().filter(|c| c.starts_with("x_")).count();
        let has_weight = cols.last() == Some(&"weight");
        let mut q_rows: Vec<f64> = Vec::new();
        let mut x_rows: Vec<f64> = Vec::new();
        let mut weights = Vec::new();
        let mut tags = Vec::new();
        for rec in r.records() {
            let rec = rec.map_err(|e| InferenceError::Format(e.to_string()))?;
            let get = |i: usize| -> Result<f64, InferenceError> {
                rec.get(i)
                    .ok_or_else(|| InferenceError::Format("short record".into()))?
                    .parse()
                    .map_err(|e| InferenceError::Format(format!("bad float: {e}")))
            };
            let chain: u32 = rec
                .get(0)
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| InferenceError::Format("bad chain id".into()))?;
            let step: u64 = rec
                .get(1)
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| InferenceError::Format("bad step".into()))?;
            tags.push((chain, step));
            for i in 0..nq {
                q_rows.push(get(2 + i)?);
            }
            for i in 0..nx {
                x_rows.push(get(2 + nq + i)?);
            }
            if has_weight {
                weights.push(get(2 + nq + nx)?);
            }
        }
        let n = tags.len();
        let provenance = {
            let sidecar = path.with_extension(format!(
                "{}provenance.json",
                path.extension().map(|e| format!("{}.", e.to_string_lossy())).unwrap_or_default()
            ));
            std::fs::read_to_string(sidecar)
                .ok()
                .and_then(|t| serde_json::from_str(&t).ok())
                .unwrap_or_default()
        };
        Ok(Self {
            q: DMatrix::from_row_iterator(n, nq, q_rows),
            x: DMatrix::from_row_iterator(n, nx, x_rows),
            weights: has_weight.then_some(weights),
            tags,
            provenance,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("samples.csv");
        let set = SampleSet {
            q: DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 3.5, 4.25]),
            x: DMatrix::from_row_slice(2, 3, &[0.1, 0.2, 0.3, 0.4, 0.5, 0.625]),
            weights: Some(vec![0.5, 1.5]),
            tags: vec![(0, 0), (0, 1)],
            provenance: SampleProvenance { sampler: "test".into(), seed: 9, ..Default::default() },
        };
        set.save_csv(&path, &["a".into(), "b".into()], &["u".into(), "v".into(), "w".into()])
            .unwrap();
        let re = SampleSet::load_csv(&path).unwrap();
        assert_eq!(re.q, set.q);
        assert_eq!(re.x, set.x);
        assert_eq!(re.weights, set.weights);
        assert_eq!(re.tags, set.tags);
        assert_eq!(re.provenance.sampler, "test");
        assert_eq!(re.provenance.seed, 9);
    }
}
