//! Denoising-step-aware pruning schedules.
//!
//! During the first `tau` steps a [`SkipPolicy`] picks attention blocks that
//! are left unpruned; every later step prunes all blocks at the same ratio.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::costmodel::{StageKind, UNetTopology};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DownPick {
    First,
    Last,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum UpPick {
    First,
    Middle,
    Last,
    None,
}

/// Which attention block of each down- and up-stage a prune-less step exempts.
///
/// Serialized as its code, for example `"FL"` or `"FL+mid"`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct SkipPolicy {
    pub down_pick: DownPick,
    pub up_pick: UpPick,
    /// Also exempt the mid-stage attention blocks.
    pub include_mid: bool,
}

impl Default for SkipPolicy {
    /// First block of every down-stage, last of every up-stage, mid untouched.
    fn default() -> Self {
        Self {
            down_pick: DownPick::First,
            up_pick: UpPick::Last,
            include_mid: false,
        }
    }
}

impl SkipPolicy {
    pub fn new(down_pick: DownPick, up_pick: UpPick) -> Self {
        Self {
            down_pick,
            up_pick,
            include_mid: false,
        }
    }

    pub fn with_mid(mut self) -> Self {
        self.include_mid = true;
        self
    }

    /// Exempt attention-block identifiers, in walk order.
    pub fn resolve(&self, topology: &UNetTopology) -> Vec<String> {
        let mut out = Vec::new();
        for (s, stage) in topology.stages.iter().enumerate() {
            let n = if stage.attention_layers_per_block > 0 {
                stage.attention_blocks
            } else {
                0
            };
            if n == 0 {
                continue;
            }
            let picked: Vec<usize> = match stage.kind {
                StageKind::Down => match self.down_pick {
                    DownPick::First => vec![0],
                    DownPick::Last => vec![n - 1],
                    DownPick::None => vec![],
                },
                StageKind::Up => match self.up_pick {
                    UpPick::First => vec![0],
                    UpPick::Middle => vec![n / 2],
                    UpPick::Last => vec![n - 1],
                    UpPick::None => vec![],
                },
                StageKind::Mid if self.include_mid => (0..n).collect(),
                StageKind::Mid => vec![],
            };
            out.extend(picked.into_iter().map(|b| topology.attention_block_id(s, b)));
        }
        out
    }
}

/// Two-letter code: down pick (`F`, `L`, `N`) then up pick (`F`, `M`, `L`, `N`),
/// with an optional `+mid` suffix.
impl FromStr for SkipPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (code, mid) = match s.strip_suffix("+mid") {
            Some(code) => (code, true),
            None => (s, false),
        };
        let bad = || Error::InvalidSchedule(format!("unknown skip policy `{s}`"));
        let mut chars = code.chars();
        let down = match chars.next().ok_or_else(bad)?.to_ascii_uppercase() {
            'F' => DownPick::First,
            'L' => DownPick::Last,
            'N' => DownPick::None,
            _ => return Err(bad()),
        };
        let up = match chars.next().ok_or_else(bad)?.to_ascii_uppercase() {
            'F' => UpPick::First,
            'M' => UpPick::Middle,
            'L' => UpPick::Last,
            'N' => UpPick::None,
            _ => return Err(bad()),
        };
        if chars.next().is_some() {
            return Err(bad());
        }
        Ok(Self {
            down_pick: down,
            up_pick: up,
            include_mid: mid,
        })
    }
}

impl fmt::Display for SkipPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let d = match self.down_pick {
            DownPick::First => 'F',
            DownPick::Last => 'L',
            DownPick::None => 'N',
        };
        let u = match self.up_pick {
            UpPick::First => 'F',
            UpPick::Middle => 'M',
            UpPick::Last => 'L',
            UpPick::None => 'N',
        };
        write!(f, "{d}{u}")?;
        if self.include_mid {
            f.write_str("+mid")?;
        }
        Ok(())
    }
}

impl TryFrom<String> for SkipPolicy {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<SkipPolicy> for String {
    fn from(p: SkipPolicy) -> String {
        p.to_string()
    }
}

/// Pruning configuration of one denoising step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepConfig {
    pub step: usize,
    /// Attention blocks that skip pruning in this step.
    pub exempt: Vec<String>,
    pub ratio: f64,
}

impl StepConfig {
    pub fn uniform(step: usize, ratio: f64) -> Self {
        Self {
            step,
            exempt: Vec::new(),
            ratio,
        }
    }
}

/// Everything about a schedule except the pruning ratio.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScheduleOptions {
    pub total_steps: usize,
    pub tau: usize,
    pub policy: SkipPolicy,
    /// Put the prune-less steps at the end instead of the start, so early
    /// steps prune more than late ones.
    pub invert: bool,
    /// Blocks exempt on every step (for example a whole feature level).
    pub permanent_exempt: Vec<String>,
}

impl Default for ScheduleOptions {
    fn default() -> Self {
        Self {
            total_steps: 50,
            tau: 15,
            policy: SkipPolicy::default(),
            invert: false,
            permanent_exempt: Vec::new(),
        }
    }
}

impl ScheduleOptions {
    /// Same steps with no prune-less phase.
    pub fn without_dsap(total_steps: usize) -> Self {
        Self {
            total_steps,
            tau: 0,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepSchedule {
    pub total_steps: usize,
    pub tau: usize,
    pub policy: SkipPolicy,
    pub inverted: bool,
    pub per_step: Vec<StepConfig>,
}

impl StepSchedule {
    /// Whether step `t` belongs to the prune-less phase.
    pub fn is_prune_less(&self, t: usize) -> bool {
        prune_less(t, self.tau, self.total_steps, self.inverted)
    }
}

fn prune_less(t: usize, tau: usize, total: usize, inverted: bool) -> bool {
    if inverted {
        t >= total - tau
    } else {
        t < tau
    }
}

/// Resolve `opts` against `topology` and record `ratio` on every step.
pub fn build_schedule(opts: &ScheduleOptions, topology: &UNetTopology, ratio: f64) -> Result<StepSchedule> {
    if opts.tau > opts.total_steps {
        return Err(Error::TauOutOfRange {
            tau: opts.tau,
            total_steps: opts.total_steps,
        });
    }
    if opts.total_steps == 0 {
        return Err(Error::InvalidSchedule("schedule needs at least one step".into()));
    }
    if !(0.0..1.0).contains(&ratio) {
        return Err(Error::RatioOutOfRange(ratio));
    }
    let known = topology.attention_block_ids();
    if let Some(id) = opts.permanent_exempt.iter().find(|id| !known.contains(id)) {
        return Err(Error::UnknownBlock(id.clone()));
    }
    let skip = opts.policy.resolve(topology);
    let in_order = |extra: &[String]| -> Vec<String> {
        known
            .iter()
            .filter(|id| opts.permanent_exempt.contains(id) || extra.contains(id))
            .cloned()
            .collect()
    };
    let early = in_order(&skip);
    let late = in_order(&[]);
    let per_step = (0..opts.total_steps)
        .map(|t| StepConfig {
            step: t,
            exempt: if prune_less(t, opts.tau, opts.total_steps, opts.invert) {
                early.clone()
            } else {
                late.clone()
            },
            ratio,
        })
        .collect();
    Ok(StepSchedule {
        total_steps: opts.total_steps,
        tau: opts.tau,
        policy: opts.policy,
        inverted: opts.invert,
        per_step,
    })
}

/// Smallest step index from which every variance stays at or above
/// `threshold`; the sequence length when the last entry is below it.
pub fn recommend_tau(variances: &[f64], threshold: f64) -> Result<usize> {
    if variances.is_empty() {
        return Err(Error::EmptySequence);
    }
    if !(threshold > 0.0) {
        return Err(Error::InvalidSchedule(format!("threshold {threshold} must be > 0")));
    }
    let tail = variances.iter().rev().take_while(|&&v| v >= threshold).count();
    Ok(variances.len() - tail)
}
