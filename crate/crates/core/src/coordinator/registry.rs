//! On-disk model registry: `manifest.json` plus `models/<detector_id>.json`
//! for every detector that owns a model.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::ErrorKind;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{AssignmentKind, ModelAssignment, RunConfig};
use crate::error::{Error, Result};
use crate::lstm::LstmModel;

pub const REGISTRY_FORMAT_VERSION: u32 = 1;

const MANIFEST: &str = "manifest.json";
const MODELS_DIR: &str = "models";

/// Assignments of a run together with the models they resolve to.
#[derive(Debug, Clone, PartialEq)]
pub struct Registry {
    pub config: RunConfig,
    pub assignments: Vec<ModelAssignment>,
    /// Owned models keyed by detector id.
    pub models: BTreeMap<String, LstmModel>,
}

impl Registry {
    /// The model a detector predicts with: its own, or its donor's.
    pub fn model_for(&self, detector_id: &str) -> Option<&LstmModel> {
        let a = self.assignments.iter().find(|a| a.detector_id == detector_id)?;
        self.models.get(a.model_owner())
    }

    /// Check that assignments and models agree.
    pub fn check(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for a in &self.assignments {
            if !seen.insert(a.detector_id.as_str()) {
                return Err(Error::Integrity(format!(
                    "detector {} assigned twice",
                    a.detector_id
                )));
            }
        }
        let owners: HashSet<&str> = self
            .assignments
            .iter()
            .filter(|a| a.kind == AssignmentKind::Owned)
            .map(|a| a.detector_id.as_str())
            .collect();
        for a in &self.assignments {
            match (&a.kind, &a.donor_id) {
                (AssignmentKind::Owned, None) => {
                    if !self.models.contains_key(&a.detector_id) {
                        return Err(Error::Integrity(format!("no model for owner {}", a.detector_id)));
                    }
                }
                (AssignmentKind::Shared, Some(donor)) if owners.contains(donor.as_str()) => {}
                (AssignmentKind::Shared, Some(donor)) => {
                    return Err(Error::Integrity(format!(
                        "detector {} borrows from {donor}, which owns no model",
                        a.detector_id
                    )))
                }
                _ => {
                    return Err(Error::Integrity(format!(
                        "assignment of {} has inconsistent donor",
                        a.detector_id
                    )))
                }
            }
        }
        if let Some(extra) = self.models.keys().find(|k| !owners.contains(k.as_str())) {
            return Err(Error::Integrity(format!(
                "model for {extra} has no owning assignment"
            )));
        }
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    config: RunConfig,
    assignments: Vec<ModelAssignment>,
}

/// Ids become file names, so keep them to a safe alphabet.
fn check_id(id: &str) -> Result<()> {
    let ok = !id.is_empty()
        && !id.starts_with('.')
        && id
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'));
    if ok {
        Ok(())
    } else {
        Err(Error::Integrity(format!(
            "detector id {id:?} cannot be used as a file name"
        )))
    }
}

pub fn registry_save(registry: &Registry, dir: impl AsRef<Path>) -> Result<()> {
    registry.check()?;
    let dir = dir.as_ref();
    let models_dir = dir.join(MODELS_DIR);
    fs::create_dir_all(&models_dir)?;
    for (id, model) in &registry.models {
        check_id(id)?;
        let text = serde_json::to_string(model).map_err(|e| Error::Format(e.to_string()))?;
        fs::write(models_dir.join(format!("{id}.json")), text)?;
    }
    let manifest = Manifest {
        format_version: REGISTRY_FORMAT_VERSION,
        config: registry.config.clone(),
        assignments: registry.assignments.clone(),
    };
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Format(e.to_string()))?;
    fs::write(dir.join(MANIFEST), text)?;
    Ok(())
}

pub fn registry_load(dir: impl AsRef<Path>) -> Result<Registry> {
    let dir = dir.as_ref();
    let text = match fs::read_to_string(dir.join(MANIFEST)) {
        Ok(t) => t,
        Err(e) if e.kind() == ErrorKind::NotFound => {
            return Err(Error::Integrity(format!("no manifest in {}", dir.display())))
        }
        Err(e) => return Err(e.into()),
    };
    let raw: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| Error::Format(format!("manifest: {e}")))?;
    let version = raw.get("format_version").and_then(|v| v.as_u64());
    if version != Some(u64::from(REGISTRY_FORMAT_VERSION)) {
        return Err(Error::Format(format!(
            "registry format version {version:?}, expected {REGISTRY_FORMAT_VERSION}"
        )));
    }
    let manifest: Manifest =
        serde_json::from_value(raw).map_err(|e| Error::Format(format!("manifest: {e}")))?;

    let mut models = BTreeMap::new();
    for a in manifest
        .assignments
        .iter()
        .filter(|a| a.kind == AssignmentKind::Owned)
    {
        check_id(&a.detector_id)?;
        let path = dir.join(MODELS_DIR).join(format!("{}.json", a.detector_id));
        let text = match fs::read_to_string(&path) {
            Ok(t) => t,
            Err(e) if e.kind() == ErrorKind::NotFound => {
                return Err(Error::Integrity(format!("missing model file {}", path.display())))
            }
            Err(e) => return Err(e.into()),
        };
        let model: LstmModel =
            serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        model.validate()?;
        models.insert(a.detector_id.clone(), model);
    }
    let registry = Registry {
        config: manifest.config,
        assignments: manifest.assignments,
        models,
    };
    registry.check()?;
    Ok(registry)
}
