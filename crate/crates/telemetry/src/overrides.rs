use std::collections::BTreeMap;

use aquafarm_core::control::ActiveOverrides;
use aquafarm_core::Device;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OverrideAction {
    On,
    Off,
    Release,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OverrideRequest {
    pub device: Device,
    pub action: OverrideAction,
    /// Required and positive for `on` and `off`.
    #[serde(default)]
    pub ttl_s: Option<f64>,
    #[serde(default = "default_operator")]
    pub operator_id: String,
}

fn default_operator() -> String {
    "operator".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActiveOverride {
    pub device: Device,
    pub on: bool,
    pub operator_id: String,
    pub issued_at_s: f64,
    pub expires_at_s: f64,
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum OverrideError {
    #[error("ttl_s must be a positive number of seconds")]
    BadTtl,
}

/// Operator overrides keyed by device; a new request for a device replaces the old one.
#[derive(Debug, Clone, Default)]
pub struct OverrideSet {
    active: BTreeMap<Device, ActiveOverride>,
}

impl OverrideSet {
    /// Applies `req` issued at simulated time `now_s`. Returns the new entry, or the released one.
    pub fn apply(&mut self, req: &OverrideRequest, now_s: f64) -> Result<Option<ActiveOverride>, OverrideError> {
        let on = match req.action {
            OverrideAction::Release => return Ok(self.active.remove(&req.device)),
            OverrideAction::On => true,
            OverrideAction::Off => false,
        };
        let ttl = req.ttl_s.filter(|t| t.is_finite() && *t > 0.0).ok_or(OverrideError::BadTtl)?;
        let o = ActiveOverride {
            device: req.device,
            on,
            operator_id: req.operator_id.clone(),
            issued_at_s: now_s,
            expires_at_s: now_s + ttl,
        };
        self.active.insert(req.device, o.clone());
        Ok(Some(o))
    }

    /// Removes and returns the overrides whose ttl has run out at `now_s`.
    pub fn expire(&mut self, now_s: f64) -> Vec<ActiveOverride> {
        let gone: Vec<Device> = self.active.values().filter(|o| now_s >= o.expires_at_s).map(|o| o.device).collect();
        gone.into_iter().filter_map(|d| self.active.remove(&d)).collect()
    }

    pub fn commands(&self) -> ActiveOverrides {
        self.active.values().map(|o| (o.device, o.on)).collect()
    }

    pub fn list(&self) -> Vec<ActiveOverride> {
        self.active.values().cloned().collect()
    }

    pub fn insert(&mut self, o: ActiveOverride) {
        self.active.insert(o.device, o);
    }
}
