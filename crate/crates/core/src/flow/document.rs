//! JSON archive format for trained flows.

use serde::{Deserialize, Serialize};

use super::{
    AffineFlow, AffineLayer, BaseDistribution, Conditioner, ConditionerSpec, CoordinateTransform,
    Ordering, LOGSCALE_CAP,
};
use crate::diffnet::{DenseLayer, MlpParams, ParamBlocks};
use crate::error::{Error, Result};
use crate::scalar::Real;

pub const FLOW_FORMAT_VERSION: &str = "causal-flow/1";

/// Serialized form of a flow plus the optional column scaler it was trained with.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowDocument {
    pub version: String,
    pub dim: usize,
    /// Zero-based variable indices, first-in-ordering first.
    pub ordering: Vec<usize>,
    pub base: BaseDistribution,
    pub logscale_cap: f64,
    pub conditioner: ConditionerSpec,
    pub layers: Vec<LayerDocument>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scaler: Option<ScalerDocument>,
    #[serde(default, skip_serializing_if = "serde_json::Value::is_null")]
    pub metadata: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalerDocument {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerDocument {
    /// One entry per position in the ordering.
    pub coordinates: Vec<CoordinateDocument>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoordinateDocument {
    pub variable: usize,
    pub shift: ConditionerDocument,
    pub log_scale: ConditionerDocument,
}

/// Flat parameters with their shape: `layer_sizes` is empty for a constant,
/// otherwise the MLP layer sizes; `params` lists each dense layer's row-major
/// weights followed by its bias.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionerDocument {
    pub layer_sizes: Vec<usize>,
    pub params: Vec<f64>,
}

impl ConditionerDocument {
    fn from_conditioner<T: Real>(c: &Conditioner<T>) -> Self {
        let layer_sizes = match c {
            Conditioner::Constant(_) => Vec::new(),
            Conditioner::Net { config, .. } => config.layer_sizes.clone(),
        };
        ConditionerDocument {
            layer_sizes,
            params: c.flatten().into_iter().map(Real::as_f64).collect(),
        }
    }

    fn to_conditioner<T: Real>(
        &self,
        spec: &ConditionerSpec,
        position: usize,
    ) -> Result<Conditioner<T>> {
        let values: Vec<T> = self.params.iter().map(|&v| T::of(v)).collect();
        if self.layer_sizes.is_empty() {
            if values.len() != 1 || position != 0 {
                return Err(Error::invalid(format!(
                    "constant conditioner at position {position} is malformed"
                )));
            }
            return Ok(Conditioner::Constant(values[0]));
        }
        let config = spec.mlp_config(position);
        if config.layer_sizes != self.layer_sizes {
            return Err(Error::invalid(format!(
                "conditioner at position {position} has layer sizes {:?}, expected {:?}",
                self.layer_sizes, config.layer_sizes
            )));
        }
        let mut offset = 0;
        let mut layers = Vec::new();
        for w in config.layer_sizes.windows(2) {
            let (i, o) = (w[0], w[1]);
            let end = offset + i * o + o;
            if end > values.len() {
                return Err(Error::invalid("conditioner parameter array is too short"));
            }
            layers.push(DenseLayer::from_parts(
                i,
                o,
                &values[offset..offset + i * o],
                &values[offset + i * o..end],
            )?);
            offset = end;
        }
        if offset != values.len() {
            return Err(Error::invalid("conditioner parameter array is too long"));
        }
        Ok(Conditioner::Net {
            config,
            params: MlpParams::from_layers(layers),
        })
    }
}

impl FlowDocument {
    pub fn from_flow<T: Real>(flow: &AffineFlow<T>) -> Self {
        let perm = flow.ordering().perm();
        FlowDocument {
            version: FLOW_FORMAT_VERSION.to_string(),
            dim: flow.dim(),
            ordering: perm.to_vec(),
            base: flow.base(),
            logscale_cap: LOGSCALE_CAP,
            conditioner: flow.conditioner_spec().clone(),
            layers: flow
                .layers()
                .iter()
                .map(|l| LayerDocument {
                    coordinates: l
                        .coords()
                        .iter()
                        .enumerate()
                        .map(|(k, c)| CoordinateDocument {
                            variable: perm[k],
                            shift: ConditionerDocument::from_conditioner(&c.shift),
                            log_scale: ConditionerDocument::from_conditioner(&c.log_scale),
                        })
                        .collect(),
                })
                .collect(),
            scaler: None,
            metadata: serde_json::Value::Null,
        }
    }

    pub fn to_flow<T: Real>(&self) -> Result<AffineFlow<T>> {
        if self.version != FLOW_FORMAT_VERSION {
            return Err(Error::UnsupportedVersion {
                found: self.version.clone(),
                expected: FLOW_FORMAT_VERSION.to_string(),
            });
        }
        if self.logscale_cap != LOGSCALE_CAP {
            return Err(Error::invalid(format!(
                "flow was saved with log-scale cap {}, this build uses {LOGSCALE_CAP}",
                self.logscale_cap
            )));
        }
        let ordering = Ordering::new(self.ordering.clone())?;
        if ordering.dim() != self.dim {
            return Err(Error::invalid("ordering length does not match dim"));
        }
        let mut layers = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            if layer.coordinates.len() != self.dim {
                return Err(Error::invalid("layer has the wrong number of coordinates"));
            }
            let mut coords = Vec::with_capacity(self.dim);
            for (k, c) in layer.coordinates.iter().enumerate() {
                if c.variable != ordering.perm()[k] {
                    return Err(Error::invalid(format!(
                        "coordinate {k} names variable {}, ordering places {} there",
                        c.variable,
                        ordering.perm()[k]
                    )));
                }
                coords.push(CoordinateTransform {
                    shift: c.shift.to_conditioner(&self.conditioner, k)?,
                    log_scale: c.log_scale.to_conditioner(&self.conditioner, k)?,
                });
            }
            layers.push(AffineLayer::from_coords(coords)?);
        }
        AffineFlow::from_layers(ordering, self.base, self.conditioner.clone(), layers)
    }

    /// Parses a document, reporting a version mismatch before any schema error.
    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_str(text)?;
        match value.get("version").and_then(|v| v.as_str()) {
            Some(FLOW_FORMAT_VERSION) => Ok(serde_json::from_value(value)?),
            Some(other) => Err(Error::UnsupportedVersion {
                found: other.to_string(),
                expected: FLOW_FORMAT_VERSION.to_string(),
            }),
            None => Err(Error::UnsupportedVersion {
                found: String::new(),
                expected: FLOW_FORMAT_VERSION.to_string(),
            }),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}
