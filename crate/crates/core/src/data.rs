//! On-disk dataset and representation formats shared by the pipeline
//! stages. Everything is JSON with unknown keys rejected.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A set of labeled frame-feature sequences.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Dataset {
    pub feature_dim: usize,
    /// class_id = index into this list.
    pub labels: Vec<String>,
    pub instances: Vec<Instance>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Instance {
    pub id: String,
    pub class_id: usize,
    /// T rows of feature_dim values each.
    pub frames: Vec<Vec<f64>>,
}

/// Encoder outputs: one vector per instance, labels carried along.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RepresentationSet {
    pub dim: usize,
    pub labels: Vec<String>,
    pub items: Vec<RepresentationItem>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RepresentationItem {
    pub id: String,
    pub class_id: usize,
    pub vector: Vec<f64>,
}

impl Dataset {
    pub fn load(path: &Path) -> Result<Self> {
        let ds: Dataset = serde_json::from_str(&fs::read_to_string(path)?)?;
        ds.validate()?;
        Ok(ds)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.validate()?;
        fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.feature_dim == 0 {
            return Err(Error::Format("feature_dim must be positive".into()));
        }
        if self.labels.is_empty() {
            return Err(Error::Format("dataset has no labels".into()));
        }
        if self.instances.is_empty() {
            return Err(Error::Format("dataset has no instances".into()));
        }
        for inst in &self.instances {
            if inst.class_id >= self.labels.len() {
                return Err(Error::Format(format!(
                    "instance {} has class_id {} but only {} labels exist",
                    inst.id,
                    inst.class_id,
                    self.labels.len()
                )));
            }
            if inst.frames.is_empty() {
                return Err(Error::Format(format!("instance {} has no frames", inst.id)));
            }
            for frame in &inst.frames {
                if frame.len() != self.feature_dim {
                    return Err(Error::Format(format!(
                        "instance {} has a frame of width {}, expected {}",
                        inst.id,
                        frame.len(),
                        self.feature_dim
                    )));
                }
                if frame.iter().any(|v| !v.is_finite()) {
                    return Err(Error::Format(format!(
                        "instance {} contains non-finite features",
                        inst.id
                    )));
                }
            }
        }
        Ok(())
    }

    /// Longest frame sequence in the set.
    pub fn max_frames(&self) -> usize {
        self.instances.iter().map(|i| i.frames.len()).max().unwrap_or(0)
    }
}

impl RepresentationSet {
    pub fn load(path: &Path) -> Result<Self> {
        let rs: RepresentationSet = serde_json::from_str(&fs::read_to_string(path)?)?;
        rs.validate()?;
        Ok(rs)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.validate()?;
        fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::Format("dim must be positive".into()));
        }
        if self.labels.is_empty() {
            return Err(Error::Format("representation set has no labels".into()));
        }
        if self.items.is_empty() {
            return Err(Error::Format("representation set has no items".into()));
        }
        for item in &self.items {
            if item.class_id >= self.labels.len() {
                return Err(Error::Format(format!(
                    "item {} has class_id {} but only {} labels exist",
                    item.id,
                    item.class_id,
                    self.labels.len()
                )));
            }
            if item.vector.len() != self.dim {
                return Err(Error::Format(format!(
                    "item {} has dim {}, expected {}",
                    item.id,
                    item.vector.len(),
                    self.dim
                )));
            }
            if item.vector.iter().any(|v| !v.is_finite()) {
                return Err(Error::Format(format!(
                    "item {} contains non-finite values",
                    item.id
                )));
            }
        }
        Ok(())
    }
}
