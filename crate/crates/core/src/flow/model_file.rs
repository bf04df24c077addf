//! JSON model document.
//!
//! Numbers are written as JSON decimals using the shortest representation
//! that parses back to the identical `f64`. Matrices are stored row-major.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::{CouplingLayer, Dense, Flow, FlowConfig, Mlp, PluLayer};
use crate::error::{Error, Result};

pub const MODEL_FORMAT: &str = "diengmf-flow";
pub const MODEL_VERSION: u32 = 1;

/// A flow together with its calibrated threshold and free-form provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelFile {
    pub flow: Flow,
    /// Natural log of the density threshold, if calibrated.
    pub log_tau: Option<f64>,
    pub provenance: serde_json::Value,
}

#[derive(Serialize, Deserialize)]
struct DenseDoc {
    rows: usize,
    cols: usize,
    weight: Vec<f64>,
    bias: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct PluDoc {
    perm: Vec<usize>,
    lower: Vec<f64>,
    upper: Vec<f64>,
    log_diag: Vec<f64>,
    sign: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct Document {
    format: String,
    version: u32,
    dim: usize,
    layers: usize,
    bins: usize,
    depth: usize,
    width: usize,
    tail_bound: f64,
    masks: Vec<Vec<u8>>,
    conditioners: Vec<Vec<DenseDoc>>,
    plu: Vec<PluDoc>,
    /// Informational; `log_scale` is authoritative.
    scale: f64,
    log_scale: f64,
    log_tau: Option<f64>,
    #[serde(default)]
    provenance: serde_json::Value,
}

fn dense_to_doc(d: &Dense) -> DenseDoc {
    let (rows, cols) = d.weight.shape();
    DenseDoc {
        rows,
        cols,
        weight: d.weight.transpose().as_slice().to_vec(),
        bias: d.bias.as_slice().to_vec(),
    }
}

fn doc_to_dense(d: &DenseDoc) -> Result<Dense> {
    if d.weight.len() != d.rows * d.cols || d.bias.len() != d.rows {
        return Err(Error::UnsupportedFormat("dense layer shape mismatch".into()));
    }
    Ok(Dense {
        weight: DMatrix::from_row_slice(d.rows, d.cols, &d.weight),
        bias: DVector::from_column_slice(&d.bias),
    })
}

fn malformed(msg: impl Into<String>) -> Error {
    Error::UnsupportedFormat(msg.into())
}

impl ModelFile {
    pub fn new(flow: Flow) -> Self {
        ModelFile {
            flow,
            log_tau: None,
            provenance: serde_json::Value::Null,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        if !self.flow.parameters_finite() || self.log_tau.is_some_and(|t| !t.is_finite()) {
            return Err(malformed("refusing to write non-finite parameters"));
        }
        let f = &self.flow;
        let doc = Document {
            format: MODEL_FORMAT.into(),
            version: MODEL_VERSION,
            dim: f.config.dim,
            layers: f.config.layers,
            bins: f.config.bins,
            depth: f.config.depth,
            width: f.config.width,
            tail_bound: f.config.tail_bound,
            masks: f.couplings.iter().map(|c| c.mask.iter().map(|&m| m as u8).collect()).collect(),
            conditioners: f
                .couplings
                .iter()
                .map(|c| c.conditioner.layers.iter().map(dense_to_doc).collect())
                .collect(),
            plu: f
                .plus
                .iter()
                .map(|p| PluDoc {
                    perm: p.perm.clone(),
                    lower: p.lower.clone(),
                    upper: p.upper.clone(),
                    log_diag: p.log_diag.clone(),
                    sign: p.sign.clone(),
                })
                .collect(),
            scale: f.scale(),
            log_scale: f.log_scale,
            log_tau: self.log_tau,
            provenance: self.provenance.clone(),
        };
        serde_json::to_string_pretty(&doc).map_err(|e| malformed(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_str(text).map_err(|e| malformed(e.to_string()))?;
        match value.get("format").and_then(|v| v.as_str()) {
            Some(MODEL_FORMAT) => {}
            other => return Err(malformed(format!("unknown model format {other:?}"))),
        }
        match value.get("version").and_then(|v| v.as_u64()) {
            Some(v) if v == MODEL_VERSION as u64 => {}
            other => return Err(malformed(format!("unsupported model version {other:?}"))),
        }
        let doc: Document = serde_json::from_value(value).map_err(|e| malformed(e.to_string()))?;
        let config = FlowConfig {
            dim: doc.dim,
            layers: doc.layers,
            bins: doc.bins,
            depth: doc.depth,
            width: doc.width,
            tail_bound: doc.tail_bound,
        };
        config.validate()?;
        let n = config.dim;
        if doc.masks.len() != config.layers || doc.conditioners.len() != config.layers || doc.plu.len() != config.layers {
            return Err(malformed("layer count mismatch"));
        }
        let mut couplings = Vec::with_capacity(config.layers);
        for (mask, layers) in doc.masks.iter().zip(&doc.conditioners) {
            if mask.len() != n || mask.iter().any(|&m| m > 1) {
                return Err(malformed("invalid mask"));
            }
            let mask: Vec<bool> = mask.iter().map(|&m| m == 1).collect();
            let cond = mask.iter().filter(|&&m| m).count();
            if cond == 0 || cond == n {
                return Err(malformed("mask must be neither all-zero nor all-one"));
            }
            let layers = layers.iter().map(doc_to_dense).collect::<Result<Vec<_>>>()?;
            if layers.len() != config.depth + 1 {
                return Err(malformed("conditioner depth mismatch"));
            }
            let mut fan_in = cond;
            for (i, l) in layers.iter().enumerate() {
                let out = if i == config.depth { (n - cond) * super::raw_len(config.bins) } else { config.width };
                if l.weight.shape() != (out, fan_in) {
                    return Err(malformed("conditioner shape mismatch"));
                }
                fan_in = out;
            }
            couplings.push(CouplingLayer {
                mask,
                conditioner: Mlp { layers },
                bins: config.bins,
                bound: config.tail_bound,
            });
        }
        let off = n * (n - 1) / 2;
        let mut plus = Vec::with_capacity(config.layers);
        for p in doc.plu {
            let mut seen = vec![false; n];
            for &i in &p.perm {
                if i >= n || std::mem::replace(&mut seen[i], true) {
                    return Err(malformed("invalid permutation"));
                }
            }
            if p.perm.len() != n || p.lower.len() != off || p.upper.len() != off || p.log_diag.len() != n || p.sign.len() != n {
                return Err(malformed("PLU shape mismatch"));
            }
            if p.sign.iter().any(|&s| s != 1.0 && s != -1.0) {
                return Err(malformed("PLU sign must be ±1"));
            }
            plus.push(PluLayer {
                perm: p.perm,
                lower: p.lower,
                upper: p.upper,
                log_diag: p.log_diag,
                sign: p.sign,
            });
        }
        let flow = Flow {
            config,
            couplings,
            plus,
            log_scale: doc.log_scale,
        };
        if !flow.parameters_finite() {
            return Err(malformed("non-finite parameters"));
        }
        Ok(ModelFile {
            flow,
            log_tau: doc.log_tau,
            provenance: doc.provenance,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = self.to_json()?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngStream;

    fn random_model() -> ModelFile {
        let mut rng = RngStream::new(8);
        let mut flow = Flow::new(FlowConfig::new(3, 2, 8, 4), 2.5, &mut rng).unwrap();
        let params: Vec<f64> = flow.parameters().iter().map(|_| 0.3 * rng.standard_normal()).collect();
        flow.set_parameters(&params);
        flow.plus[1].sign[2] = -1.0;
        ModelFile {
            flow,
            log_tau: Some(-3.25),
            provenance: serde_json::json!({"system": "lorenz63", "seed": 4}),
        }
    }

    #[test]
    fn round_trip_is_bitwise() {
        let model = random_model();
        let text = model.to_json().unwrap();
        let back = ModelFile::from_json(&text).unwrap();
        assert_eq!(back, model);
    }

    #[test]
    fn unknown_version_is_rejected() {
        let text = random_model().to_json().unwrap().replace("\"version\": 1", "\"version\": 2");
        assert!(matches!(ModelFile::from_json(&text), Err(Error::UnsupportedFormat(_))));
        let text = random_model().to_json().unwrap().replace(MODEL_FORMAT, "other");
        assert!(ModelFile::from_json(&text).is_err());
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        let model = random_model();
        model.save(&path).unwrap();
        assert_eq!(ModelFile::load(&path).unwrap(), model);
    }
}
