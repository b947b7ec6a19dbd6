//! Versioned JSON model files. Floats round-trip bit-for-bit; unknown fields
//! are ignored on read.

use serde::{Deserialize, Serialize};

use crate::error::{DrmError, Result};
use crate::estimation::{FittedModel, GroupInfo};
use crate::inference::InferenceSummary;
use crate::model::{CombinedData, ModelParams};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelFile {
    pub schema_version: u32,
    pub dimension: usize,
    pub groups: Vec<GroupInfo>,
    pub reference: usize,
    pub alpha: Vec<f64>,
    pub beta: Vec<Vec<f64>>,
    pub rho: Vec<f64>,
    pub p_hat: Vec<f64>,
    pub log_lik: f64,
    pub converged: bool,
    pub iterations: usize,
    pub grad_norm: f64,
    pub center: Vec<f64>,
    pub scale: Vec<f64>,
    /// Combined data, tilted groups first and the reference last.
    pub points: Vec<Vec<f64>>,
    /// Sample-set group index of each point.
    pub point_groups: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub inference: Option<InferenceSummary>,
}

impl ModelFile {
    pub fn from_model(model: &FittedModel, inference: Option<InferenceSummary>) -> Self {
        ModelFile {
            schema_version: SCHEMA_VERSION,
            dimension: model.dim(),
            groups: model.groups.clone(),
            reference: model.reference,
            alpha: model.params.alpha.clone(),
            beta: model.params.beta.clone(),
            rho: model.rho.clone(),
            p_hat: model.p_hat.clone(),
            log_lik: model.log_lik,
            converged: model.converged,
            iterations: model.iterations,
            grad_norm: model.grad_norm,
            center: model.center.clone(),
            scale: model.scale.clone(),
            points: model.combined.points().map(<[f64]>::to_vec).collect(),
            point_groups: model.combined.group_of.clone(),
            inference,
        }
    }

    pub fn into_model(self) -> Result<FittedModel> {
        let bad = |msg: String| DrmError::Parse(format!("model file: {msg}"));
        if self.schema_version == 0 {
            return Err(bad("schema_version must be at least 1".into()));
        }
        let dim = self.dimension;
        let g = self.groups.len();
        if dim == 0 || g < 2 || self.reference >= g {
            return Err(bad("invalid dimension, groups or reference".into()));
        }
        let q = g - 1;
        let n = self.points.len();
        let consistent = self.alpha.len() == q
            && self.beta.len() == q
            && self.beta.iter().all(|b| b.len() == dim)
            && self.rho.len() == q
            && self.p_hat.len() == n
            && self.point_groups.len() == n
            && self.center.len() == dim
            && self.scale.len() == dim
            && self.points.iter().all(|p| p.len() == dim)
            && self.point_groups.iter().all(|&k| k < g);
        if !consistent {
            return Err(bad("array lengths are inconsistent".into()));
        }
        for (k, info) in self.groups.iter().enumerate() {
            let count = self.point_groups.iter().filter(|&&x| x == k).count();
            if count != info.size {
                return Err(bad(format!(
                    "group '{}' declares {} points but has {count}",
                    info.label, info.size
                )));
            }
        }
        Ok(FittedModel {
            params: ModelParams::new(self.alpha, self.beta)?,
            p_hat: self.p_hat,
            combined: CombinedData {
                dim,
                values: self.points.concat(),
                group_of: self.point_groups,
            },
            groups: self.groups,
            reference: self.reference,
            rho: self.rho,
            log_lik: self.log_lik,
            converged: self.converged,
            iterations: self.iterations,
            grad_norm: self.grad_norm,
            center: self.center,
            scale: self.scale,
        })
    }
}

pub fn to_json(model: &FittedModel, inference: Option<InferenceSummary>) -> Result<String> {
    serde_json::to_string_pretty(&ModelFile::from_model(model, inference))
        .map_err(|e| DrmError::InvalidInput(format!("cannot serialize model: {e}")))
}

/// Parses a model file, returning the model and any stored inference block.
pub fn from_json(text: &str) -> Result<(FittedModel, Option<InferenceSummary>)> {
    let mut file: ModelFile =
        serde_json::from_str(text).map_err(|e| DrmError::Parse(format!("model file: {e}")))?;
    let inference = file.inference.take();
    Ok((file.into_model()?, inference))
}
