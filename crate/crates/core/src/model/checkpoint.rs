//! JSON checkpoints. Floats are written in shortest round-trip form, so a
//! save/load cycle reproduces every parameter bit for bit.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{apply_sigmas, Classifier, TrainConfig, UktlModel};
use crate::error::{Result, UktlError};
use crate::kernel::KernelConfig;
use crate::linalg::Matrix;
use crate::nystrom::NystromMap;
use crate::subspace::tensor_subspaces;
use crate::tensor::{decode_tensor, encode_tensor};
use crate::uncertainty::MsnParams;

pub const CHECKPOINT_FORMAT: &str = "uktl-ckpt-v1";

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MuRecord {
    unconstrained: f64,
    effective: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BandwidthRecord {
    log: f64,
    effective: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct NystromRecord {
    kernel: KernelConfig,
    clamp_eps: f64,
    p_inv: Matrix,
    feature_mean: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Checkpoint {
    format: String,
    config: TrainConfig,
    dims: Vec<usize>,
    orders: Vec<usize>,
    labels: Vec<usize>,
    mu: MuRecord,
    bandwidth: BandwidthRecord,
    msn: MsnParams,
    /// TNS v1 payloads.
    pivots: Vec<String>,
    pivot_sigmas: Vec<Vec<Vec<f64>>>,
    nystrom: NystromRecord,
    classifier: Classifier,
}

impl UktlModel {
    pub fn to_json(&self) -> Result<String> {
        let feature_mean = self
            .map
            .feature_mean
            .clone()
            .ok_or_else(|| UktlError::NotFitted("cannot save a model without a feature mean".into()))?;
        let doc = Checkpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            config: self.config.clone(),
            dims: self.dims.clone(),
            orders: self.orders.clone(),
            labels: self.labels.clone(),
            mu: MuRecord {
                unconstrained: self.mu_raw,
                effective: self.mu(),
            },
            bandwidth: BandwidthRecord {
                log: self.log_bandwidth,
                effective: self.bandwidth(),
            },
            msn: self.msn.clone(),
            pivots: self.pivots.iter().map(encode_tensor).collect(),
            pivot_sigmas: self.pivot_sigmas.clone(),
            nystrom: NystromRecord {
                kernel: self.map.cfg,
                clamp_eps: self.map.clamp_eps,
                p_inv: self.map.p_inv.clone(),
                feature_mean,
            },
            classifier: self.classifier.clone(),
        };
        let mut out = serde_json::to_string_pretty(&doc)?;
        out.push('\n');
        Ok(out)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: Checkpoint = serde_json::from_str(text)?;
        if doc.format != CHECKPOINT_FORMAT {
            return Err(UktlError::InvalidArgument(format!(
                "unsupported checkpoint format `{}` (expected {CHECKPOINT_FORMAT})",
                doc.format
            )));
        }
        doc.config.validate()?;
        let pivots = doc
            .pivots
            .iter()
            .map(|s| decode_tensor(s))
            .collect::<Result<Vec<_>>>()?;
        let c = pivots.len();
        let consistent = c > 0
            && doc.pivot_sigmas.len() == c
            && doc.nystrom.p_inv.rows() == c
            && doc.nystrom.p_inv.cols() == c
            && doc.nystrom.feature_mean.len() == c
            && doc.classifier.weights.cols() == c
            && doc.classifier.weights.rows() == doc.labels.len()
            && doc.classifier.bias.len() == doc.labels.len()
            && doc.orders.len() == doc.dims.len()
            && doc.msn.branches.len() == doc.dims.len();
        if !consistent {
            return Err(UktlError::DimensionMismatch("checkpoint arrays have inconsistent sizes".into()));
        }
        let mut pivot_bases = Vec::with_capacity(c);
        for (z, sig) in pivots.iter().zip(&doc.pivot_sigmas) {
            if z.dims() != doc.dims.as_slice() {
                return Err(UktlError::DimensionMismatch(format!(
                    "pivot dims {:?} differ from model dims {:?}",
                    z.dims(),
                    doc.dims
                )));
            }
            pivot_bases.push(apply_sigmas(&tensor_subspaces(z, &doc.orders)?, sig)?);
        }
        let model = Self {
            config: doc.config,
            dims: doc.dims,
            orders: doc.orders,
            labels: doc.labels,
            msn: doc.msn,
            mu_raw: doc.mu.unconstrained,
            log_bandwidth: doc.bandwidth.log,
            pivots,
            pivot_sigmas: doc.pivot_sigmas,
            map: NystromMap {
                pivot_bases,
                cfg: doc.nystrom.kernel,
                p_inv: doc.nystrom.p_inv,
                feature_mean: Some(doc.nystrom.feature_mean),
                clamp_eps: doc.nystrom.clamp_eps,
            },
            classifier: doc.classifier,
        };
        if model.kernel_config() != model.map.cfg {
            return Err(UktlError::InvalidArgument(
                "checkpoint kernel settings disagree with its mu/bandwidth parameters".into(),
            ));
        }
        Ok(model)
    }
}

pub fn save_checkpoint(model: &UktlModel, path: &Path) -> Result<()> {
    std::fs::write(path, model.to_json()?).map_err(|e| UktlError::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<UktlModel> {
    let text = std::fs::read_to_string(path).map_err(|e| UktlError::io(path, e))?;
    UktlModel::from_json(&text)
}
