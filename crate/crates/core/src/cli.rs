//! Command-line front end.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use log::info;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::analysis::{analyze_campaign, AnalysisReport};
use crate::config::{ConfigFile, RunConfig};
use crate::correlation::{section_to_csv, ShotSet};
use crate::dynamics::{self, fit_power_scale, FitOptions, PowerScale, RateTraces};
use crate::error::{Error, Result};
use crate::shots::{read_shot_file, run_campaign, CampaignSummary};

#[derive(Debug, Parser)]
#[command(
    name = "phonon-herald",
    version,
    about = "Pulsed optomechanical photon-phonon correlation toolkit"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// TOML run configuration; the built-in preset when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Master seed, overriding the configuration.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory, created when missing.
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    /// Worker threads; defaults to the available parallelism.
    #[arg(long)]
    pub workers: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Occupation and photon rate traces.
    Rates(Common),
    /// Simulate a shot campaign.
    Simulate(Common),
    /// Correlation map, read-window section and p-value of a shot file.
    Analyze {
        #[command(flatten)]
        common: Common,
        /// Shot file; defaults to <out>/shots.ndjson.
        #[arg(long)]
        shots: Option<PathBuf>,
    },
    /// Fit drive power coefficients to an observed rate trace.
    Fit {
        #[command(flatten)]
        common: Common,
        /// CSV with time_us and gamma_total_hz (or both channel columns).
        #[arg(long)]
        observed: PathBuf,
    },
    /// Filter impulse response and off-resonance suppression.
    Filter(Common),
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Rates(c) => with_context(&c, |ctx| cmd_rates(ctx).map(|_| ())),
        Command::Simulate(c) => with_context(&c, |ctx| cmd_simulate(ctx).map(|_| ())),
        Command::Analyze { common, shots } => with_context(&common, |ctx| {
            let path = shots.clone().unwrap_or_else(|| ctx.out.join(SHOTS_FILE));
            cmd_analyze(ctx, &path).map(|_| ())
        }),
        Command::Fit { common, observed } => {
            with_context(&common, |ctx| cmd_fit(ctx, &observed).map(|_| ()))
        }
        Command::Filter(c) => with_context(&c, |ctx| cmd_filter(ctx).map(|_| ())),
    }
}

pub const SHOTS_FILE: &str = "shots.ndjson";

/// Resolved inputs of one command.
#[derive(Debug, Clone)]
pub struct Context {
    pub config: RunConfig,
    pub out: PathBuf,
    pub workers: usize,
}

impl Context {
    pub fn new(common: &Common) -> Result<Self> {
        let file = match &common.config {
            Some(path) => ConfigFile::load(path)?,
            None => ConfigFile::default(),
        };
        let config = file.resolve(common.seed)?;
        let workers = match common.workers {
            Some(0) => return Err(Error::Config("--workers must be >= 1".into())),
            Some(n) => n,
            None => std::thread::available_parallelism().map_or(1, |n| n.get()),
        };
        fs::create_dir_all(&common.out).map_err(|e| Error::io(&common.out, e))?;
        Ok(Context {
            config,
            out: common.out.clone(),
            workers,
        })
    }

    fn write(&self, name: &str, contents: &str) -> Result<PathBuf> {
        let path = self.out.join(name);
        write_atomic(&path, contents.as_bytes())?;
        info!("wrote {}", path.display());
        Ok(path)
    }

    fn write_csv(&self, name: &str, body: &str) -> Result<PathBuf> {
        self.write(name, &format!("{}{}", self.config.csv_comment(), body))
    }

    fn write_json<T: Serialize>(&self, name: &str, value: &T) -> Result<PathBuf> {
        let mut text = serde_json::to_string_pretty(value).expect("serializable output");
        text.push('\n');
        self.write(name, &text)
    }
}

fn with_context(common: &Common, f: impl FnOnce(&Context) -> Result<()> + Send) -> Result<()> {
    let ctx = Context::new(common)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(ctx.workers)
        .build()
        .map_err(|e| Error::Config(format!("cannot start {} workers: {e}", ctx.workers)))?;
    pool.install(|| f(&ctx))
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_os_string();
    tmp.push(".partial");
    let tmp = PathBuf::from(tmp);
    let result = fs::write(&tmp, bytes).and_then(|_| fs::rename(&tmp, path));
    if let Err(e) = result {
        let _ = fs::remove_file(&tmp);
        return Err(Error::io(path, e));
    }
    Ok(())
}

fn file_sha256(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

pub fn cmd_rates(ctx: &Context) -> Result<Vec<PathBuf>> {
    let c = &ctx.config.campaign;
    let (occ, raw, filtered) =
        dynamics::simulate_rates(&c.params, &c.schedule, &c.scale, &c.cascade, c.dt_us)?;
    Ok(vec![
        ctx.write_csv("occupation.csv", &occ.to_csv())?,
        ctx.write_csv("rates_raw.csv", &raw.to_csv())?,
        ctx.write_csv("rates_filtered.csv", &filtered.to_csv())?,
    ])
}

#[derive(Debug, Serialize)]
struct SimulateOutput<'a> {
    run_config_hash: String,
    seed: u64,
    shot_file: &'a str,
    shot_file_sha256: String,
    #[serde(flatten)]
    summary: &'a CampaignSummary,
}

pub fn cmd_simulate(ctx: &Context) -> Result<CampaignSummary> {
    let path = ctx.out.join(SHOTS_FILE);
    let summary = run_campaign(&ctx.config.campaign, &path, ctx.workers)?;
    info!(
        "{} shots, {} coincidences (expected {:.1})",
        summary.n_shots, summary.coincidences, summary.expected_coincidences
    );
    let out = SimulateOutput {
        run_config_hash: ctx.config.hash(),
        seed: ctx.config.seed(),
        shot_file: SHOTS_FILE,
        shot_file_sha256: file_sha256(&path)?,
        summary: &summary,
    };
    ctx.write_json("campaign_summary.json", &out)?;
    Ok(summary)
}

#[derive(Debug, Serialize)]
struct AnalyzeOutput<'a> {
    run_config_hash: String,
    campaign_config_hash: String,
    seed: u64,
    shot_file_sha256: String,
    #[serde(flatten)]
    report: &'a AnalysisReport,
}

pub fn cmd_analyze(ctx: &Context, shots_path: &Path) -> Result<AnalysisReport> {
    let campaign = &ctx.config.campaign;
    let file = read_shot_file(shots_path, Some(campaign.n_shots))?;
    let expected = campaign.hash();
    if file.header.config_hash != expected {
        return Err(Error::Config(format!(
            "shot file {} was produced with config {}, not {}",
            shots_path.display(),
            file.header.config_hash,
            expected
        )));
    }
    let shots = ShotSet::new(&file.shots);
    let report = analyze_campaign(&shots, campaign, &ctx.config.analysis)?;
    ctx.write_csv("map.csv", &report.map.to_csv())?;
    ctx.write_csv("section.csv", &section_to_csv(&report.section))?;
    match &report.optimum {
        Some(o) => info!(
            "optimum: R = {:.3} ± {:.3}, p = {:.4}, g2_wr = {:.3}",
            o.cs.r, o.cs.r_err, o.bootstrap.p_value, o.g2_wr.value
        ),
        None => info!("no read position had enough counts for R"),
    }
    ctx.write_json(
        "analysis_summary.json",
        &AnalyzeOutput {
            run_config_hash: ctx.config.hash(),
            campaign_config_hash: expected,
            seed: ctx.config.seed(),
            shot_file_sha256: file_sha256(shots_path)?,
            report: &report,
        },
    )?;
    Ok(report)
}

#[derive(Debug, Serialize)]
struct FitOutput<'a> {
    run_config_hash: String,
    seed: u64,
    observed_sha256: String,
    report: &'a dynamics::FitReport,
}

pub fn cmd_fit(ctx: &Context, observed_path: &Path) -> Result<PowerScale> {
    let text = fs::read_to_string(observed_path).map_err(|e| Error::io(observed_path, e))?;
    let observed = RateTraces::from_csv(&text)?;
    let c = &ctx.config.campaign;
    let options = FitOptions {
        dt_us: c.dt_us,
        efficiency: ctx.config.fit.efficiency,
        initial: ctx.config.fit.initial,
        max_iterations: ctx.config.fit.max_iterations,
        ..FitOptions::new(ctx.config.fit.initial)
    };
    let report = fit_power_scale(&observed, &c.params, &c.schedule, &c.cascade, &options)?;
    let obs_total = observed.total();
    let mut overlay = String::from("time_us,observed_hz,model_hz,residual_hz\n");
    for ((t, o), m) in observed
        .times
        .iter()
        .zip(&obs_total)
        .zip(&report.model_total)
    {
        overlay.push_str(&format!("{t},{o},{m},{}\n", o - m));
    }
    ctx.write_csv("fit_overlay.csv", &overlay)?;
    ctx.write_json(
        "power_scale.json",
        &FitOutput {
            run_config_hash: ctx.config.hash(),
            seed: ctx.config.seed(),
            observed_sha256: file_sha256(observed_path)?,
            report: &report,
        },
    )?;
    info!(
        "coeff_w = {:.6e}, coeff_r = {:.6e}, residual norm {:.4e}",
        report.scale.coeff_w, report.scale.coeff_r, report.residual_norm
    );
    Ok(report.scale)
}

#[derive(Debug, Serialize)]
struct FilterSummary {
    run_config_hash: String,
    seed: u64,
    mean_delay_us: f64,
    peak_time_us: f64,
    mechanical_offset_hz: f64,
    suppression_at_mechanical_db: f64,
}

pub fn cmd_filter(ctx: &Context) -> Result<f64> {
    let cascade = &ctx.config.campaign.cascade;
    let f = &ctx.config.filter_output;
    let n = (f.response_span_us / f.response_step_us).round() as usize;
    let mut response = String::from("t_us,xi\n");
    for t in dynamics::grid_times(n + 1, f.response_step_us) {
        response.push_str(&format!("{t},{}\n", cascade.impulse_response(t * 1e-6)));
    }
    ctx.write_csv("filter_response.csv", &response)?;

    let mut suppression = String::from("offset_hz,suppression_db\n");
    for k in 0..f.offset_points {
        let offset = f.max_offset_hz * k as f64 / (f.offset_points - 1) as f64;
        let db =
            cascade.frequency_suppression(2.0 * std::f64::consts::PI * offset, f.interpretation);
        suppression.push_str(&format!("{offset},{db}\n"));
    }
    ctx.write_csv("filter_suppression.csv", &suppression)?;

    let omega = ctx.config.campaign.params.omega_m;
    let at_mech = cascade.frequency_suppression(omega, f.interpretation);
    ctx.write_json(
        "filter_summary.json",
        &FilterSummary {
            run_config_hash: ctx.config.hash(),
            seed: ctx.config.seed(),
            mean_delay_us: cascade.mean_delay() * 1e6,
            peak_time_us: cascade.peak_time() * 1e6,
            mechanical_offset_hz: omega / (2.0 * std::f64::consts::PI),
            suppression_at_mechanical_db: at_mech,
        },
    )?;
    info!("suppression at the mechanical offset: {at_mech:.2} dB");
    Ok(at_mech)
}
