use std::fmt::Write as _;
use std::path::PathBuf;

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

use c2v_core::diffusion::{ddim_timesteps, BridgeSchedule};

#[derive(Debug, Clone, clap::Args, Serialize, Deserialize)]
pub struct ScheduleDumpArgs {
    /// Output directory for schedule.csv and ddim.csv.
    #[arg(long)]
    #[serde(skip)]
    pub out: PathBuf,
    /// Total diffusion steps.
    #[arg(long = "T", default_value_t = 1000)]
    #[serde(rename = "T")]
    pub total_steps: usize,
    /// Length of the DDIM subsequence.
    #[arg(long, default_value_t = 10)]
    pub steps: usize,
}

pub fn run(a: &ScheduleDumpArgs, _seed: u64) -> Result<serde_json::Value> {
    let sched = BridgeSchedule::new(a.total_steps)?;
    let path = a.out.join("schedule.csv");
    std::fs::write(&path, sched.to_csv()).with_context(|| format!("writing {}", path.display()))?;
    let ts = ddim_timesteps(a.total_steps, a.steps)?;
    let mut csv = String::from("index,t\n");
    for (i, t) in ts.iter().enumerate() {
        let _ = writeln!(csv, "{i},{t}");
    }
    let path = a.out.join("ddim.csv");
    std::fs::write(&path, csv).with_context(|| format!("writing {}", path.display()))?;
    Ok(serde_json::json!({ "T": a.total_steps, "ddim_timesteps": ts }))
}
