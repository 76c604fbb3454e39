use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ConvLayout, ModelConfig};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct WorkerSpec {
    pub worker_id: usize,
    pub owned_groups: Range<usize>,
    /// Final-layer kernels (equivalently, image-level tokens) this worker produces.
    pub owned_kernel_range: Range<usize>,
    pub is_aggregator: bool,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum ExecutionMode {
    /// Workers run one after another on the calling thread over a byte bus.
    #[default]
    #[serde(rename = "seq", alias = "sequential")]
    SequentialSim,
    /// One thread per worker; messages travel over channels.
    #[serde(rename = "conc", alias = "concurrent")]
    Concurrent,
}

impl FromStr for ExecutionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "seq" | "sequential" => Ok(ExecutionMode::SequentialSim),
            "conc" | "concurrent" => Ok(ExecutionMode::Concurrent),
            other => Err(Error::Config(format!(
                "unknown execution mode {other:?}; use seq or conc"
            ))),
        }
    }
}

impl fmt::Display for ExecutionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ExecutionMode::SequentialSim => "seq",
            ExecutionMode::Concurrent => "conc",
        })
    }
}

fn divisors(n: usize) -> Vec<usize> {
    (1..=n).filter(|k| n.is_multiple_of(*k)).collect()
}

/// Splits the attention groups (and with them the kernels) contiguously
/// over `k` workers. Worker 0 aggregates.
pub fn plan_partition(config: &ModelConfig, k: usize) -> Result<Vec<WorkerSpec>> {
    config.validate()?;
    let kg = config.num_attention_groups;
    if k == 0 || !kg.is_multiple_of(k) {
        return Err(Error::Config(format!(
            "{k} workers cannot share {kg} attention groups evenly; valid worker counts: {:?}",
            divisors(kg)
        )));
    }
    if k > 1 && (config.conv_layout == ConvLayout::Dense && !config.ablate_conv) {
        return Err(Error::Config(
            "the dense conv layout mixes every kernel's inputs and only runs on one worker".into(),
        ));
    }
    if k > 1 && config.shared_attention && !config.ablate_attn {
        return Err(Error::Config("shared attention weights only run on one worker".into()));
    }
    let groups_per = kg / k;
    let tokens_per = config.num_tokens() / k;
    Ok((0..k)
        .map(|w| WorkerSpec {
            worker_id: w,
            owned_groups: w * groups_per..(w + 1) * groups_per,
            owned_kernel_range: w * tokens_per..(w + 1) * tokens_per,
            is_aggregator: w == 0,
        })
        .collect())
}
