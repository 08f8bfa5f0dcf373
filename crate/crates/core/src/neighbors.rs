//! Presumed neighbour trajectories rebuilt from the latest broadcast plan.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::model::AgentModel;
use crate::AgentId;

/// What an agent sends to its out-neighbours after each solve.
#[derive(Debug, Clone, PartialEq)]
pub struct BroadcastPackage {
    pub sender: AgentId,
    pub trigger_instant: usize,
    pub horizon: usize,
    pub u_opt: Vec<DVector<f64>>,
    pub x_opt: Vec<DVector<f64>>,
    pub terminal_gain: DMatrix<f64>,
}

impl BroadcastPackage {
    pub fn new(
        sender: AgentId,
        trigger_instant: usize,
        u_opt: Vec<DVector<f64>>,
        x_opt: Vec<DVector<f64>>,
        terminal_gain: DMatrix<f64>,
    ) -> Result<Self> {
        if x_opt.len() != u_opt.len() + 1 {
            return Err(Error::StateManagement(format!(
                "package from agent {sender}: {} inputs but {} states",
                u_opt.len(),
                x_opt.len()
            )));
        }
        Ok(Self {
            sender,
            trigger_instant,
            horizon: u_opt.len(),
            u_opt,
            x_opt,
            terminal_gain,
        })
    }

    /// Absolute time of the transmitted terminal state.
    pub fn end(&self) -> usize {
        self.trigger_instant + self.horizon
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CaseTag {
    /// The transmitted plan ended at or before `now`.
    Expired,
    /// The plan ends inside the needed window.
    Partial,
    /// The plan covers the whole needed window.
    Covering,
}

impl CaseTag {
    pub fn as_str(self) -> &'static str {
        match self {
            CaseTag::Expired => "expired",
            CaseTag::Partial => "partial",
            CaseTag::Covering => "covering",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PresumedTrajectory {
    /// Presumed states at `now + l`, `l ∈ [0, horizon]`.
    pub states: Vec<DVector<f64>>,
    pub case_tag: CaseTag,
    /// Offset at which the transmitted inputs run out (partial case only).
    pub switch_offset: Option<usize>,
}

pub fn classify(package: &BroadcastPackage, now: usize, horizon: usize) -> CaseTag {
    let end = package.end();
    if end <= now {
        CaseTag::Expired
    } else if end <= now + horizon {
        CaseTag::Partial
    } else {
        CaseTag::Covering
    }
}

/// Rebuilds neighbour `j`'s presumed trajectory over `[now, now + horizon]`.
///
/// The expired case anchors the transmitted terminal state at its own
/// absolute time and rolls the terminal feedback forward from there, so the
/// result does not depend on when it is assembled. The other cases replay
/// the transmitted inputs at matching absolute times, or the single input
/// at `now` when `literal_case23` is set.
pub fn assemble(
    package: &BroadcastPackage,
    now: usize,
    horizon: usize,
    model_j: &AgentModel,
    literal_case23: bool,
) -> Result<PresumedTrajectory> {
    if package.trigger_instant > now {
        return Err(Error::PackageStaleness {
            sender: package.sender,
            detail: format!(
                "package from instant {} used at earlier instant {now}",
                package.trigger_instant
            ),
        });
    }
    let k = &package.terminal_gain;
    let case_tag = classify(package, now, horizon);
    let mut states = Vec::with_capacity(horizon + 1);
    match case_tag {
        CaseTag::Expired => {
            let mut x = package.x_opt[package.horizon].clone();
            for _ in package.end()..now {
                x = model_j.step(&x, &(k * &x))?;
            }
            states.push(x);
            for l in 0..horizon {
                let next = model_j.step(&states[l], &(k * &states[l]))?;
                states.push(next);
            }
            Ok(PresumedTrajectory {
                states,
                case_tag,
                switch_offset: None,
            })
        }
        CaseTag::Partial | CaseTag::Covering => {
            let offset = now - package.trigger_instant;
            let anchor = package.x_opt.get(offset).ok_or_else(|| Error::PackageStaleness {
                sender: package.sender,
                detail: format!("anchor offset {offset} beyond horizon {}", package.horizon),
            })?;
            let available = package.horizon - offset;
            states.push(anchor.clone());
            for l in 0..horizon {
                let u = if l < available {
                    if literal_case23 {
                        package.u_opt[offset].clone()
                    } else {
                        package.u_opt[offset + l].clone()
                    }
                } else {
                    k * &states[l]
                };
                let next = model_j.step(&states[l], &u)?;
                states.push(next);
            }
            Ok(PresumedTrajectory {
                states,
                case_tag,
                switch_offset: (case_tag == CaseTag::Partial).then_some(available),
            })
        }
    }
}

/// Constant reference used before any package exists.
pub fn initial_reference(x0: &DVector<f64>, horizon: usize) -> Vec<DVector<f64>> {
    vec![x0.clone(); horizon + 1]
}

/// Latest package per sender. Older packages never replace newer ones.
#[derive(Debug, Clone, Default)]
pub struct PackageStore {
    latest: BTreeMap<AgentId, BroadcastPackage>,
}

impl PackageStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, package: BroadcastPackage) {
        match self.latest.get(&package.sender) {
            Some(old) if old.trigger_instant > package.trigger_instant => {}
            _ => {
                self.latest.insert(package.sender, package);
            }
        }
    }

    pub fn get(&self, sender: AgentId) -> Option<&BroadcastPackage> {
        self.latest.get(&sender)
    }

    pub fn len(&self) -> usize {
        self.latest.len()
    }

    pub fn is_empty(&self) -> bool {
        self.latest.is_empty()
    }
}
