//! Active alert ledger.
//!
//! Alerts are deduplicated by (code, device, channel) while active. Info and
//! warning alerts clear once their condition has been absent for
//! [`LAPSE_TICKS`] consecutive ticks. Critical alerts never auto-clear before an
//! acknowledgment; once acknowledged they clear as soon as the condition is absent.

use std::collections::BTreeMap;

use aquafarm_core::control::{Alert, AlertCode, Severity};
use aquafarm_core::{Channel, Device};
use serde::{Deserialize, Serialize};

pub const LAPSE_TICKS: u32 = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActiveAlert {
    pub id: u64,
    #[serde(flatten)]
    pub alert: Alert,
    pub first_seen_s: f64,
    pub last_seen_s: f64,
    /// Consecutive ticks the condition has been absent.
    pub lapsed_ticks: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChangeKind {
    Raised,
    Acknowledged,
    Cleared,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlertChange {
    pub change: ChangeKind,
    pub alert: ActiveAlert,
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
#[error("no active alert with id {0}")]
pub struct UnknownAlert(pub u64);

type Key = (AlertCode, Option<Device>, Option<Channel>);

fn key(a: &Alert) -> Key {
    (a.code, a.device, a.channel)
}

#[derive(Debug, Clone, Default)]
pub struct AlertLedger {
    active: BTreeMap<u64, ActiveAlert>,
    next_id: u64,
}

impl AlertLedger {
    pub fn new() -> Self {
        AlertLedger { active: BTreeMap::new(), next_id: 1 }
    }

    pub fn active(&self) -> Vec<ActiveAlert> {
        self.active.values().cloned().collect()
    }

    pub fn get(&self, id: u64) -> Option<&ActiveAlert> {
        self.active.get(&id)
    }

    /// Folds one tick's alerts into the ledger and returns what changed.
    pub fn observe(&mut self, alerts: &[Alert], now_s: f64) -> Vec<AlertChange> {
        let mut changes = Vec::new();
        let mut seen = Vec::new();
        for a in alerts {
            let k = key(a);
            match self.active.values_mut().find(|e| key(&e.alert) == k) {
                Some(e) => {
                    e.last_seen_s = now_s;
                    e.lapsed_ticks = 0;
                    if a.severity > e.alert.severity {
                        e.alert.severity = a.severity;
                        e.alert.message = a.message.clone();
                    }
                    seen.push(e.id);
                }
                None => {
                    let id = self.next_id.max(1);
                    self.next_id = id + 1;
                    let e = ActiveAlert {
                        id,
                        alert: Alert { acknowledged: false, ..a.clone() },
                        first_seen_s: now_s,
                        last_seen_s: now_s,
                        lapsed_ticks: 0,
                    };
                    changes.push(AlertChange { change: ChangeKind::Raised, alert: e.clone() });
                    self.active.insert(id, e);
                    seen.push(id);
                }
            }
        }
        let mut cleared = Vec::new();
        for e in self.active.values_mut().filter(|e| !seen.contains(&e.id)) {
            e.lapsed_ticks += 1;
            if clears(e) {
                cleared.push(e.id);
            }
        }
        for id in cleared {
            let e = self.active.remove(&id).expect("present");
            changes.push(AlertChange { change: ChangeKind::Cleared, alert: e });
        }
        changes
    }

    pub fn acknowledge(&mut self, id: u64) -> Result<Vec<AlertChange>, UnknownAlert> {
        let e = self.active.get_mut(&id).ok_or(UnknownAlert(id))?;
        e.alert.acknowledged = true;
        let mut changes = vec![AlertChange { change: ChangeKind::Acknowledged, alert: e.clone() }];
        if clears(e) {
            let e = self.active.remove(&id).expect("present");
            changes.push(AlertChange { change: ChangeKind::Cleared, alert: e });
        }
        Ok(changes)
    }

    /// Re-applies a logged change; used to rebuild the ledger after a restart.
    pub fn restore(&mut self, c: &AlertChange) {
        self.next_id = self.next_id.max(c.alert.id + 1);
        match c.change {
            ChangeKind::Raised | ChangeKind::Acknowledged => {
                self.active.insert(c.alert.id, c.alert.clone());
            }
            ChangeKind::Cleared => {
                self.active.remove(&c.alert.id);
            }
        }
    }
}

fn clears(e: &ActiveAlert) -> bool {
    match e.alert.severity {
        Severity::Critical => e.alert.acknowledged && e.lapsed_ticks >= 1,
        _ => e.lapsed_ticks >= LAPSE_TICKS,
    }
}
