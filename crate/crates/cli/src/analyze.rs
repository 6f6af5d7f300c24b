use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::Args;
use serde::Serialize;

use lcdet_core::model::{Mode, NetworkSpec};
use lcdet_core::perfsim::{self, BwScenario, FrameRate, HeadDims, HeadKind, PerfReport, PerfSummary, ScenarioFile};

use crate::common::{self, usage, NetArgs, OutArgs};

/// OPs per second assumed when `--compute-rate` is not given.
pub const DEFAULT_COMPUTE_RATE: f64 = 1e12;

#[derive(Args, Debug, Serialize)]
pub struct TargetArgs {
    #[command(flatten)]
    pub net: NetArgs,
    /// Take the network from a model file instead.
    #[arg(long, conflicts_with_all = ["profile", "config"])]
    pub model: Option<PathBuf>,
    /// Input resolution as WIDTHxHEIGHT (default: the network's nominal size).
    #[arg(long, value_parser = common::parse_size)]
    pub input: Option<(usize, usize)>,
    /// Data width of weights and activations: float or quantized (u8).
    #[arg(long, default_value = "float")]
    pub mode: Mode,
}

impl TargetArgs {
    fn resolve(&self) -> Result<(NetworkSpec, (usize, usize))> {
        let net = match &self.model {
            Some(p) => common::load_model(p)?.spec().clone(),
            None => self.net.network()?,
        };
        let (w, h) = self.input.unwrap_or((net.input_size[0], net.input_size[1]));
        Ok((net, (w, h)))
    }
}

#[derive(Args, Debug, Serialize)]
pub struct AnalyzeArgs {
    #[command(flatten)]
    pub target: TargetArgs,
    /// DDR bandwidths to sweep, in Gbit/s, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "1,2,3,4,5,6")]
    pub bw_sweep: Vec<f64>,
    /// Compute throughput in OPs per second.
    #[arg(long, default_value_t = DEFAULT_COMPUTE_RATE)]
    pub compute_rate: f64,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Debug, Serialize)]
struct HeadRow {
    head: &'static str,
    formula: &'static str,
    params: u64,
}

fn formula(kind: HeadKind) -> &'static str {
    match kind {
        HeadKind::Rpn => "Ch_f * K * (5 + C)",
        HeadKind::YlDet => "F_fc1 * (W_f * H_f * Ch_f + W_o * H_o * (C + 5K))",
        HeadKind::ConvDet => "F_w * F_h * Ch_d1 * (Ch_f + C + 5K)",
    }
}

pub fn run(a: AnalyzeArgs) -> Result<()> {
    let (net, (w, h)) = a.target.resolve()?;
    let report = perfsim::analyze(&net, (h, w), a.target.mode)?;
    let mut scenarios: Vec<BwScenario> = a
        .bw_sweep
        .iter()
        .map(|g| BwScenario {
            ddr_bandwidth_bps: Some(g * 1e9),
            compute_rate_ops: a.compute_rate,
        })
        .collect();
    scenarios.push(BwScenario {
        ddr_bandwidth_bps: None,
        compute_rate_ops: a.compute_rate,
    });
    for s in &scenarios {
        s.validate().map_err(|e| usage(e.to_string()))?;
    }
    let dims = HeadDims::reference();
    let heads = HeadKind::ALL
        .iter()
        .map(|&k| {
            Ok(HeadRow {
                head: k.name(),
                formula: formula(k),
                params: perfsim::head_params(k, &dims)?,
            })
        })
        .collect::<lcdet_core::Result<Vec<_>>>()?;

    let dir = a.out.prepare()?;
    common::write_resolved_config(
        dir,
        "analyze",
        serde_json::json!({ "args": &a, "input": [w, h], "scenarios": scenarios, "head_dims": dims, "network": net }),
    )?;
    let unlimited = write_reports(dir, &report, &scenarios)?;
    write_head_params(dir, &dims, &heads)?;

    println!(
        "{} at {w}x{h} ({:?}): {} OPs, {} params, {} weight bytes, output grid {:?}",
        report.profile,
        report.mode,
        report.total_ops,
        report.total_params,
        report.total_weight_bytes,
        report.layers.last().map(|l| l.output)
    );
    println!("compute-bound {:.2} fps", unlimited.fps);
    for r in &heads {
        println!("  {:<8} {:>12}  {}", r.head, r.params, r.formula);
    }
    Ok(())
}

#[derive(Args, Debug, Serialize)]
pub struct SweepArgs {
    #[command(flatten)]
    pub target: TargetArgs,
    /// Scenario JSON: compute_rate_ops, bandwidth_sweep_gbps, include_unlimited.
    #[arg(long)]
    pub scenario: PathBuf,
    #[command(flatten)]
    pub out: OutArgs,
}

pub fn sweep(a: SweepArgs) -> Result<()> {
    let text = fs::read_to_string(&a.scenario).with_context(|| format!("reading {}", a.scenario.display()))?;
    let file = ScenarioFile::from_json(&text).with_context(|| format!("in {}", a.scenario.display()))?;
    let mut scenarios = file.scenarios();
    if !scenarios.iter().any(|s| s.ddr_bandwidth_bps.is_none()) {
        scenarios.push(BwScenario {
            ddr_bandwidth_bps: None,
            compute_rate_ops: file.compute_rate_ops,
        });
    }
    for s in &scenarios {
        s.validate()?;
    }
    let (net, (w, h)) = a.target.resolve()?;
    let report = perfsim::analyze(&net, (h, w), a.target.mode)?;

    let dir = a.out.prepare()?;
    common::write_resolved_config(
        dir,
        "sweep",
        serde_json::json!({ "args": &a, "scenario": file, "input": [w, h], "network": net }),
    )?;
    write_reports(dir, &report, &scenarios)?;
    let points = perfsim::bandwidth_sweep(&report, &scenarios)?;
    for p in &points {
        let bw = p.bandwidth_gbps.map_or_else(|| "unlimited".to_string(), |b| format!("{b} Gbps"));
        println!("{bw:>12}  {:.3} fps  ({:?}-bound)", p.fps, p.bound);
    }
    Ok(())
}

/// layers.csv (at unlimited bandwidth), layer_bandwidth.csv, fps_sweep.csv
/// and summary.json. Returns the unlimited-bandwidth frame rate.
fn write_reports(dir: &Path, report: &PerfReport, scenarios: &[BwScenario]) -> Result<FrameRate> {
    let unlimited_scenario = scenarios
        .iter()
        .find(|s| s.ddr_bandwidth_bps.is_none())
        .expect("callers add an unlimited scenario");
    let unlimited = perfsim::frame_rate(report, unlimited_scenario)?;

    let mut buf = Vec::new();
    perfsim::write_layers_csv(&mut buf, report, Some(&unlimited))?;
    fs::write(dir.join("layers.csv"), buf)?;

    let points = perfsim::bandwidth_sweep(report, scenarios)?;
    let mut buf = Vec::new();
    perfsim::write_sweep_csv(&mut buf, &points)?;
    fs::write(dir.join("fps_sweep.csv"), buf)?;

    let mut bw = fs::File::create(dir.join("layer_bandwidth.csv"))?;
    writeln!(bw, "bandwidth_gbps,layer,traffic_bytes,time_share,bandwidth_bps")?;
    for s in scenarios {
        let fr = perfsim::frame_rate(report, s)?;
        let label = s.ddr_bandwidth_bps.map_or_else(|| "inf".to_string(), |b| (b / 1e9).to_string());
        for l in &fr.layers {
            writeln!(bw, "{label},{},{},{},{}", l.index, l.traffic_bytes, l.time_share, l.bandwidth_bps)?;
        }
    }

    common::write_json(&dir.join("summary.json"), &PerfSummary::new(report, points))?;
    Ok(unlimited)
}

fn write_head_params(dir: &Path, dims: &HeadDims, rows: &[HeadRow]) -> Result<()> {
    let mut f = fs::File::create(dir.join("head_params.csv"))?;
    writeln!(f, "head,formula,params")?;
    for r in rows {
        writeln!(f, "{},\"{}\",{}", r.head, r.formula, r.params)?;
    }
    common::write_json(
        &dir.join("head_params.json"),
        &serde_json::json!({ "dims": dims, "heads": rows }),
    )
}
