//! Component health: self-reports, timing monitors and worst-of aggregation.

use std::collections::{BTreeMap, VecDeque};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DiagnosticsError {
    #[error("unknown component {0:?}")]
    UnknownComponent(String),
    #[error("invalid monitor for {component}: {reason}")]
    InvalidMonitor { component: String, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Status {
    Ok,
    Warn,
    Error,
    Stale,
}

impl Status {
    /// Aggregation rank; a stale component is as bad as a failed one.
    pub fn severity(self) -> u8 {
        match self {
            Status::Ok => 0,
            Status::Warn => 1,
            Status::Error | Status::Stale => 2,
        }
    }

    /// The more severe of two statuses. Between ERROR and STALE the stale one
    /// is kept so the absence of data stays visible.
    pub fn worst(self, other: Status) -> Status {
        if (other.severity(), other) > (self.severity(), self) {
            other
        } else {
            self
        }
    }
}

impl std::fmt::Display for Status {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Status::Ok => "OK",
            Status::Warn => "WARN",
            Status::Error => "ERROR",
            Status::Stale => "STALE",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComponentReport {
    pub component: String,
    pub status: Status,
    pub message: String,
    pub timestamp: f64,
}

impl ComponentReport {
    pub fn new(component: &str, status: Status, message: impl Into<String>, timestamp: f64) -> Self {
        Self {
            component: component.to_string(),
            status,
            message: message.into(),
            timestamp,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonitorSpec {
    pub component: String,
    pub expected_period: f64,
    pub stale_timeout: f64,
    pub max_delay: f64,
}

impl MonitorSpec {
    pub fn new(component: &str, expected_period: f64, stale_timeout: f64, max_delay: f64) -> Self {
        Self {
            component: component.to_string(),
            expected_period,
            stale_timeout,
            max_delay,
        }
    }
}

const WINDOW: usize = 20;
const PERIOD_TOLERANCE: f64 = 1.5;

#[derive(Debug, Clone)]
struct Monitor {
    spec: MonitorSpec,
    last: Option<ComponentReport>,
    arrivals: VecDeque<f64>,
    last_delay: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComponentStatus {
    pub status: Status,
    pub message: String,
}

#[derive(Debug, Clone, Default)]
pub struct Registry {
    monitors: BTreeMap<String, Monitor>,
}

impl Registry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, spec: MonitorSpec) -> Result<(), DiagnosticsError> {
        if !(spec.expected_period > 0.0 && spec.stale_timeout >= spec.expected_period && spec.max_delay >= 0.0) {
            return Err(DiagnosticsError::InvalidMonitor {
                component: spec.component.clone(),
                reason: "need stale_timeout >= expected_period > 0 and max_delay >= 0".into(),
            });
        }
        self.monitors.insert(
            spec.component.clone(),
            Monitor {
                spec,
                last: None,
                arrivals: VecDeque::with_capacity(WINDOW),
                last_delay: 0.0,
            },
        );
        Ok(())
    }

    pub fn components(&self) -> impl Iterator<Item = &str> {
        self.monitors.keys().map(String::as_str)
    }

    /// Stores a report that arrived at `received_at`.
    pub fn observe(&mut self, report: ComponentReport, received_at: f64) -> Result<(), DiagnosticsError> {
        let m = self
            .monitors
            .get_mut(&report.component)
            .ok_or_else(|| DiagnosticsError::UnknownComponent(report.component.clone()))?;
        if m.arrivals.len() == WINDOW {
            m.arrivals.pop_front();
        }
        m.arrivals.push_back(received_at);
        m.last_delay = received_at - report.timestamp;
        m.last = Some(report);
        Ok(())
    }

    /// Mean inter-arrival time over the window; undefined before two arrivals.
    pub fn mean_period(&self, component: &str) -> Option<f64> {
        let m = self.monitors.get(component)?;
        let n = m.arrivals.len();
        (n >= 2).then(|| (m.arrivals[n - 1] - m.arrivals[0]) / (n - 1) as f64)
    }

    pub fn last_report(&self, component: &str) -> Option<&ComponentReport> {
        self.monitors.get(component)?.last.as_ref()
    }

    /// Effective status of every registered component at `now`. A component
    /// that never reported is STALE.
    pub fn evaluate(&self, now: f64) -> BTreeMap<String, ComponentStatus> {
        self.monitors
            .iter()
            .map(|(name, m)| {
                let st = match &m.last {
                    None => ComponentStatus {
                        status: Status::Stale,
                        message: "no report received".into(),
                    },
                    Some(r) if now - r.timestamp > m.spec.stale_timeout => ComponentStatus {
                        status: Status::Stale,
                        message: format!("last report {:.2} s ago", now - r.timestamp),
                    },
                    Some(r) => {
                        let slow = self
                            .mean_period(name)
                            .is_some_and(|p| p > PERIOD_TOLERANCE * m.spec.expected_period);
                        let late = m.last_delay > m.spec.max_delay;
                        if (slow || late) && r.status < Status::Warn {
                            let reason = if slow { "reporting period too long" } else { "report delay too long" };
                            ComponentStatus {
                                status: Status::Warn,
                                message: reason.into(),
                            }
                        } else {
                            ComponentStatus {
                                status: r.status,
                                message: r.message.clone(),
                            }
                        }
                    }
                };
                (name.clone(), st)
            })
            .collect()
    }
}

/// Named groups of component names.
pub type TreeSpec = BTreeMap<String, Vec<String>>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemSummary {
    pub overall: Status,
    pub groups: BTreeMap<String, Status>,
    pub tree: BTreeMap<String, BTreeMap<String, Status>>,
    pub notes: Vec<String>,
}

impl SystemSummary {
    pub fn is_ok(&self) -> bool {
        self.overall == Status::Ok
    }
}

pub fn aggregate(statuses: &BTreeMap<String, ComponentStatus>, tree: &TreeSpec) -> Result<SystemSummary, DiagnosticsError> {
    let mut overall = Status::Ok;
    let mut groups = BTreeMap::new();
    let mut out_tree = BTreeMap::new();
    let mut notes = Vec::new();
    for (group, members) in tree {
        let mut worst = Status::Ok;
        let mut leaves = BTreeMap::new();
        for name in members {
            let st = statuses
                .get(name)
                .ok_or_else(|| DiagnosticsError::UnknownComponent(name.clone()))?;
            worst = worst.worst(st.status);
            leaves.insert(name.clone(), st.status);
            if st.status != Status::Ok {
                notes.push(format!("{group}/{name}: {}: {}", st.status, st.message));
            }
        }
        overall = overall.worst(worst);
        groups.insert(group.clone(), worst);
        out_tree.insert(group.clone(), leaves);
    }
    Ok(SystemSummary {
        overall,
        groups,
        tree: out_tree,
        notes,
    })
}
