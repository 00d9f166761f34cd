//! Synthetic single-detector timestamp streams for pulsed shot campaigns.
//!
//! Each shot is the union of three independent parts:
//! background counts drawn by thinning from the filter-convolved rate model
//! (with the pair-process mean removed) plus dark counts; write-channel
//! photons of a Bose-distributed pair number; and read-channel photons from
//! the surviving phonons plus thermal additions.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution, Geometric, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dynamics::{self, PowerScale, PulseSchedule, Stage};
use crate::error::{Error, Result};
use crate::filter::FilterCascade;
use crate::physics::{optical_broadening, quantum_cooperativity, SystemParams};

pub const SHOT_FORMAT: &str = "phonon-herald/shots/v1";
/// Timestamp quantum in the shot file, µs.
pub const TIMESTAMP_RESOLUTION_US: f64 = 0.1;
/// Fraction of wall-clock time spent in shots; idle time is not simulated.
pub const DUTY_CYCLE: f64 = 0.05;
/// Grid points per thinning block.
const THINNING_BLOCK: usize = 32;
/// Shots generated per parallel batch before writing.
const BATCH: usize = 8192;

/// Optical loss chain in dB.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBudget {
    pub extraction_db: f64,
    pub filter_db: f64,
    pub fiber_db: f64,
    pub detection_db: f64,
}

impl LossBudget {
    /// 2 dB extraction, filter insertion from the cascade transmission,
    /// 3 dB fibre interconnects, 1 dB propagation and detection.
    pub fn preset(cascade: &FilterCascade) -> Self {
        LossBudget {
            extraction_db: 2.0,
            filter_db: -10.0 * cascade.transmission.log10(),
            fiber_db: 3.0,
            detection_db: 1.0,
        }
    }

    pub fn total_db(&self) -> f64 {
        self.extraction_db + self.filter_db + self.fiber_db + self.detection_db
    }

    pub fn efficiency(&self) -> f64 {
        10f64.powf(-self.total_db() / 10.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CampaignConfig {
    pub params: SystemParams,
    pub schedule: PulseSchedule,
    pub scale: PowerScale,
    pub cascade: FilterCascade,
    /// Mean pair number per shot.
    pub mu_w: f64,
    pub eta_w: f64,
    pub eta_r: f64,
    /// Occupation left after cooling.
    pub n_residual: f64,
    /// Thermal phonon admixture of the readout.
    pub thermal_admix: f64,
    /// Dark count rate, 1/s.
    pub dark_rate: f64,
    pub storage_delay_us: f64,
    pub n_shots: u64,
    pub master_seed: u64,
    /// Independent thermal modes sharing the pair and thermal populations.
    pub temporal_modes: u32,
    /// Include the rate-model background counts.
    pub include_background: bool,
    /// Rate-model integration step, µs.
    pub dt_us: f64,
}

impl CampaignConfig {
    /// Built-in preset: μ_w from the schedule's write pulse, efficiencies from
    /// the loss budget, residual occupation from the model at write onset,
    /// admixture 1/C_q, storage delay from mid-write to read onset.
    pub fn preset(n_shots: u64, master_seed: u64) -> Result<Self> {
        let params = SystemParams::preset();
        let schedule = PulseSchedule::preset();
        let scale = PowerScale::preset(&params);
        let cascade = FilterCascade::default();
        Self::derived(params, schedule, scale, cascade, n_shots, master_seed)
    }

    /// Fills the pair, noise and efficiency fields from the rate model.
    pub fn derived(
        params: SystemParams,
        schedule: PulseSchedule,
        scale: PowerScale,
        cascade: FilterCascade,
        n_shots: u64,
        master_seed: u64,
    ) -> Result<Self> {
        let dt_us = dynamics::DEFAULT_DT_US;
        let windows = ChannelWindows::from_schedule(&schedule)?;
        let occ = dynamics::evolve_occupation(&params, &schedule, &scale, dt_us)?;
        let n_residual = occ.at(windows.write.start_us);
        let mu_w = integrate_stokes_pair_rate(&params, &schedule, &scale, &windows.write);
        let gamma_opt = read_broadening(&params, &schedule, &scale, &windows.read);
        // Without a read drive nothing is read out.
        let admix = if gamma_opt > 0.0 {
            quantum_cooperativity(gamma_opt, params.gamma_th())?.thermal_admixture
        } else {
            0.0
        };
        let eta = LossBudget::preset(&cascade).efficiency();
        Ok(CampaignConfig {
            params,
            schedule,
            scale,
            cascade,
            mu_w,
            eta_w: eta,
            eta_r: eta,
            n_residual,
            thermal_admix: admix,
            dark_rate: 0.0,
            storage_delay_us: windows.read.start_us
                - 0.5 * (windows.write.start_us + windows.write.end_us),
            n_shots,
            master_seed,
            temporal_modes: 1,
            include_background: true,
            dt_us,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.params.validate()?;
        self.schedule.validate()?;
        self.scale.validate()?;
        self.cascade.validate()?;
        for (name, eta) in [("eta_w", self.eta_w), ("eta_r", self.eta_r)] {
            if !(0.0..=1.0).contains(&eta) {
                return Err(Error::InvalidParameter(format!(
                    "{name} must be in [0, 1], got {eta}"
                )));
            }
        }
        let non_negative = [
            ("mu_w", self.mu_w),
            ("n_residual", self.n_residual),
            ("thermal_admix", self.thermal_admix),
            ("dark_rate", self.dark_rate),
            ("storage_delay_us", self.storage_delay_us),
        ];
        for (name, v) in non_negative {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::InvalidParameter(format!(
                    "{name} must be >= 0, got {v}"
                )));
            }
        }
        if self.n_shots < 1 {
            return Err(Error::InvalidParameter("n_shots must be >= 1".into()));
        }
        if self.temporal_modes < 1 {
            return Err(Error::InvalidParameter(
                "temporal_modes must be >= 1".into(),
            ));
        }
        ChannelWindows::from_schedule(&self.schedule)?;
        Ok(())
    }

    /// SHA-256 of the canonical JSON serialization.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&json))
    }

    /// exp(−Γ_m(n̄_th+1)·storage_delay).
    pub fn survival_probability(&self) -> f64 {
        (-self.params.gamma_m * (self.params.n_th + 1.0) * self.storage_delay_us * 1e-6).exp()
    }

    /// Γ_th·storage_delay + n_residual + thermal_admix.
    pub fn thermal_additions_mean(&self) -> f64 {
        self.params.gamma_th() * self.storage_delay_us * 1e-6 + self.n_residual + self.thermal_admix
    }
}

/// Write and read stages used for pair generation and readout.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChannelWindows {
    pub write: Stage,
    pub read: Stage,
}

impl ChannelWindows {
    /// First write stage and the first read stage after it.
    pub fn from_schedule(schedule: &PulseSchedule) -> Result<Self> {
        let write = *schedule
            .write_stages()
            .next()
            .ok_or_else(|| Error::InvalidParameter("schedule has no write stage".into()))?;
        let read = *schedule
            .read_stages()
            .find(|s| s.start_us >= write.end_us)
            .ok_or_else(|| {
                Error::InvalidParameter("schedule has no read stage after the write stage".into())
            })?;
        Ok(ChannelWindows { write, read })
    }
}

fn integrate_stokes_pair_rate(
    params: &SystemParams,
    schedule: &PulseSchedule,
    scale: &PowerScale,
    write: &Stage,
) -> f64 {
    let powers = schedule.powers_at(write.start_us);
    scale.rates(params, powers).a_plus * (write.end_us - write.start_us) * 1e-6
}

fn read_broadening(
    params: &SystemParams,
    schedule: &PulseSchedule,
    scale: &PowerScale,
    read: &Stage,
) -> f64 {
    let powers = schedule.powers_at(read.start_us);
    optical_broadening(params, scale.coeff_r * powers.read)
}

/// One shot: index and sorted detection times, µs from shot start.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShotRecord {
    #[serde(rename = "shot")]
    pub shot_index: u64,
    #[serde(rename = "ts")]
    pub timestamps: Vec<f64>,
}

/// Everything a shot needs that does not depend on the shot index.
#[derive(Debug, Clone)]
pub struct ShotModel {
    config: CampaignConfig,
    windows: ChannelWindows,
    readout_rate: f64,
    survival: f64,
    additions_mean: f64,
    grid_dt_us: f64,
    intensity: Vec<f64>,
    block_max: Vec<f64>,
}

impl ShotModel {
    pub fn new(config: &CampaignConfig) -> Result<Self> {
        config.validate()?;
        let windows = ChannelWindows::from_schedule(&config.schedule)?;
        let readout_rate = read_broadening(
            &config.params,
            &config.schedule,
            &config.scale,
            &windows.read,
        );
        if config.include_background && !(readout_rate > 0.0) {
            return Err(Error::InvalidParameter(
                "read stage has no read drive".into(),
            ));
        }
        let survival = config.survival_probability();
        let additions_mean = config.thermal_additions_mean();

        let (occ, raw, _) = dynamics::simulate_rates(
            &config.params,
            &config.schedule,
            &config.scale,
            &config.cascade,
            config.dt_us,
        )?;
        let grid_dt_us = occ.step_us()?;
        let mut intensity = vec![config.dark_rate; raw.times.len()];
        if config.include_background {
            let t_w = (windows.write.end_us - windows.write.start_us) * 1e-6;
            let pair_rate_w = config.mu_w / t_w;
            let read_mean = survival * config.mu_w + additions_mean;
            let t_r = (windows.read.end_us - windows.read.start_us) * 1e-6;
            let norm = readout_rate / -(-readout_rate * t_r).exp_m1();
            let mut stokes = raw.gamma_s.clone();
            let mut anti = raw.gamma_as.clone();
            for (i, &t) in raw.times.iter().enumerate() {
                if t >= windows.write.start_us && t < windows.write.end_us {
                    stokes[i] = (stokes[i] - pair_rate_w).max(0.0);
                }
                if t >= windows.read.start_us && t < windows.read.end_us {
                    let s = (t - windows.read.start_us) * 1e-6;
                    let env = read_mean * norm * (-readout_rate * s).exp();
                    anti[i] = (anti[i] - env).max(0.0);
                }
            }
            let kernel = config.cascade.kernel(grid_dt_us)?;
            let stokes = kernel.apply(&stokes);
            let anti = kernel.apply(&anti);
            for (i, v) in intensity.iter_mut().enumerate() {
                *v += config.eta_w * stokes[i] + config.eta_r * anti[i];
            }
        }
        let block_max = intensity
            .chunks(THINNING_BLOCK)
            .enumerate()
            .map(|(b, chunk)| {
                // the block spans up to the first point of the next block
                let next = intensity
                    .get((b + 1) * THINNING_BLOCK)
                    .copied()
                    .unwrap_or(0.0);
                chunk.iter().copied().fold(next, f64::max)
            })
            .collect();
        Ok(ShotModel {
            config: config.clone(),
            windows,
            readout_rate,
            survival,
            additions_mean,
            grid_dt_us,
            intensity,
            block_max,
        })
    }

    pub fn config(&self) -> &CampaignConfig {
        &self.config
    }

    pub fn windows(&self) -> &ChannelWindows {
        &self.windows
    }

    /// Background detection intensity (1/s) on the model grid.
    pub fn background_intensity(&self) -> (&[f64], f64) {
        (&self.intensity, self.grid_dt_us)
    }

    /// Expected background counts per shot in [a, b), µs.
    pub fn expected_background(&self, a_us: f64, b_us: f64) -> f64 {
        let dt = self.grid_dt_us;
        let mut sum = 0.0;
        for (i, w) in self.intensity.windows(2).enumerate() {
            let lo = (i as f64 * dt).max(a_us);
            let hi = ((i + 1) as f64 * dt).min(b_us);
            if hi > lo {
                // trapezoid on the sub-interval of a linear segment
                let f = |t: f64| w[0] + (w[1] - w[0]) * (t - i as f64 * dt) / dt;
                sum += 0.5 * (f(lo) + f(hi)) * (hi - lo);
            }
        }
        sum * 1e-6
    }

    /// Per-shot rng: one ChaCha stream per shot index under the master seed.
    pub fn shot_rng(&self, shot_index: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.master_seed);
        rng.set_stream(shot_index);
        rng
    }

    fn intensity_at(&self, t_us: f64) -> f64 {
        let x = t_us / self.grid_dt_us;
        let i = x.floor() as usize;
        if i + 1 >= self.intensity.len() {
            return *self.intensity.last().unwrap_or(&0.0);
        }
        let f = x - i as f64;
        self.intensity[i] * (1.0 - f) + self.intensity[i + 1] * f
    }

    fn bose<R: Rng>(&self, mean: f64, rng: &mut R) -> u64 {
        if mean <= 0.0 {
            return 0;
        }
        let modes = self.config.temporal_modes;
        let per_mode = mean / modes as f64;
        let geo = Geometric::new(1.0 / (1.0 + per_mode)).expect("valid geometric parameter");
        (0..modes).map(|_| geo.sample(rng)).sum()
    }

    fn delay_us<R: Rng>(&self, rng: &mut R) -> f64 {
        self.config.cascade.sample_delay(rng) * 1e6
    }

    pub fn simulate_shot(&self, shot_index: u64) -> ShotRecord {
        let mut rng = self.shot_rng(shot_index);
        let cfg = &self.config;
        let mut ts: Vec<f64> = Vec::new();

        // background by thinning, block by block
        let dt = self.grid_dt_us;
        for (b, &lmax) in self.block_max.iter().enumerate() {
            if lmax <= 0.0 {
                continue;
            }
            let t0 = (b * THINNING_BLOCK) as f64 * dt;
            let t1 = (((b + 1) * THINNING_BLOCK) as f64 * dt).min(cfg.schedule.shot_length_us);
            if t1 <= t0 {
                continue;
            }
            let expected = lmax * (t1 - t0) * 1e-6;
            let candidates = Poisson::new(expected)
                .expect("positive mean")
                .sample(&mut rng) as u64;
            for _ in 0..candidates {
                let t = t0 + (t1 - t0) * rng.random::<f64>();
                if rng.random::<f64>() * lmax < self.intensity_at(t) {
                    ts.push(t);
                }
            }
        }

        // pairs
        let m = self.bose(cfg.mu_w, &mut rng);
        let w = self.windows.write;
        let n_write = binomial(m, cfg.eta_w, &mut rng);
        for _ in 0..n_write {
            let t = w.start_us + (w.end_us - w.start_us) * rng.random::<f64>();
            ts.push(t + self.delay_us(&mut rng));
        }

        let survived = binomial(m, self.survival, &mut rng);
        let added = self.bose(self.additions_mean, &mut rng);
        let n_read = binomial(survived + added, cfg.eta_r, &mut rng);
        let r = self.windows.read;
        let t_r = (r.end_us - r.start_us) * 1e-6;
        for _ in 0..n_read {
            let s = truncated_exponential(self.readout_rate, t_r, &mut rng);
            ts.push(r.start_us + s * 1e6 + self.delay_us(&mut rng));
        }

        let end = cfg.schedule.shot_length_us;
        let mut ts: Vec<f64> = ts
            .into_iter()
            .filter(|&t| (0.0..end).contains(&t))
            .map(quantize)
            .collect();
        ts.sort_by(f64::total_cmp);
        ShotRecord {
            shot_index,
            timestamps: ts,
        }
    }
}

fn quantize(t: f64) -> f64 {
    (t / TIMESTAMP_RESOLUTION_US).round() / (1.0 / TIMESTAMP_RESOLUTION_US)
}

fn binomial<R: Rng>(n: u64, p: f64, rng: &mut R) -> u64 {
    if n == 0 || p <= 0.0 {
        return 0;
    }
    if p >= 1.0 {
        return n;
    }
    Binomial::new(n, p).expect("valid binomial").sample(rng)
}

/// Draw from rate·e^(−rate·s) restricted to [0, span), seconds. A zero rate
/// gives a uniform draw.
fn truncated_exponential<R: Rng>(rate: f64, span: f64, rng: &mut R) -> f64 {
    let u: f64 = rng.random();
    if !(rate > 0.0) {
        return u * span;
    }
    let mass = -(-rate * span).exp_m1();
    -(-u * mass).ln_1p() / rate
}

/// Simulates one shot; builds the shared model on every call, so prefer
/// [`ShotModel`] for campaigns.
pub fn simulate_shot(config: &CampaignConfig, shot_index: u64) -> Result<ShotRecord> {
    Ok(ShotModel::new(config)?.simulate_shot(shot_index))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ShotFileHeader {
    pub format: String,
    pub config_hash: String,
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize)]
pub struct WindowSummary {
    pub start_us: f64,
    pub end_us: f64,
    pub total_counts: u64,
    pub mean_counts_per_shot: f64,
    /// Mean detection rate inside the window, 1/s.
    pub empirical_rate_hz: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct CampaignSummary {
    pub format: String,
    pub config_hash: String,
    pub master_seed: u64,
    pub n_shots: u64,
    pub total_counts: u64,
    pub write_window: WindowSummary,
    pub read_window: WindowSummary,
    /// Σ over shots of (write-window counts)·(read-window counts).
    pub coincidences: u64,
    /// Analytic expectation of `coincidences` under the generative model.
    pub expected_coincidences: f64,
    pub mu_w: f64,
    pub survival_probability: f64,
    pub thermal_additions_mean: f64,
    pub shot_length_us: f64,
    pub duty_cycle: f64,
    /// Wall-clock idle time per shot implied by the duty cycle (not simulated).
    pub idle_time_us: f64,
}

/// Model expectation of the window-pair correlations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ExpectedCorrelations {
    pub mean_write: f64,
    pub mean_read: f64,
    pub g2_wr: f64,
    pub g2_ww: f64,
    pub g2_rr: f64,
    pub r: f64,
}

impl ShotModel {
    /// Probability that a write photon is detected inside [a, b), µs.
    pub fn write_capture(&self, a_us: f64, b_us: f64) -> f64 {
        let w = self.windows.write;
        self.capture(a_us, b_us, w.start_us, w.end_us, |_| 1.0)
    }

    /// Probability that a read photon is detected inside [a, b), µs.
    pub fn read_capture(&self, a_us: f64, b_us: f64) -> f64 {
        let r = self.windows.read;
        let rate = self.readout_rate * 1e-6;
        self.capture(a_us, b_us, r.start_us, r.end_us, |s| (-rate * s).exp())
    }

    /// Emission density `shape` on [t0, t1), convolved with the filter
    /// delay, integrated over [a, b).
    fn capture(&self, a_us: f64, b_us: f64, t0: f64, t1: f64, shape: impl Fn(f64) -> f64) -> f64 {
        const POINTS: usize = 4000;
        let h = (t1 - t0) / POINTS as f64;
        let cdf = |d_us: f64| {
            if d_us <= 0.0 {
                0.0
            } else {
                self.config.cascade.step_response(d_us * 1e-6)
            }
        };
        let (mut num, mut den) = (0.0, 0.0);
        for k in 0..POINTS {
            let t = t0 + (k as f64 + 0.5) * h;
            let wgt = shape(t - t0);
            num += wgt * (cdf(b_us - t) - cdf(a_us - t));
            den += wgt;
        }
        num / den
    }

    /// Expected g² values for a write window and a disjoint later read
    /// window, treating background counts as Poisson.
    pub fn expected_correlations(
        &self,
        write: (f64, f64),
        read: (f64, f64),
    ) -> ExpectedCorrelations {
        let cfg = &self.config;
        let g = 1.0 + 1.0 / cfg.temporal_modes as f64;
        let (mu, p, add) = (cfg.mu_w, self.survival, self.additions_mean);
        let a = cfg.eta_w * self.write_capture(write.0, write.1) * mu;
        let c = cfg.eta_r * self.read_capture(read.0, read.1);
        let bw = self.expected_background(write.0, write.1);
        let br = self.expected_background(read.0, read.1);
        let x = p * mu + add;
        let mean_write = a + bw;
        let mean_read = c * x + br;
        let ww = g * a * a + 2.0 * a * bw + bw * bw;
        let xx = p * p * g * mu * mu + 2.0 * p * mu * add + g * add * add;
        let rr = c * c * xx + 2.0 * c * x * br + br * br;
        let wr = a * c * (p * (1.0 + g * mu) + add) + a * br + bw * c * x + bw * br;
        let g2_wr = wr / (mean_write * mean_read);
        let g2_ww = ww / (mean_write * mean_write);
        let g2_rr = rr / (mean_read * mean_read);
        ExpectedCorrelations {
            mean_write,
            mean_read,
            g2_wr,
            g2_ww,
            g2_rr,
            r: g2_wr * g2_wr / (g2_ww * g2_rr),
        }
    }
}

/// Moments of the shot model for the summary windows.
pub fn expected_coincidences(model: &ShotModel, write: (f64, f64), read: (f64, f64)) -> f64 {
    let cfg = model.config();
    let mu = cfg.mu_w;
    let p = model.survival;
    let m = cfg.temporal_modes as f64;
    let mean_w = cfg.eta_w * mu + model.expected_background(write.0, write.1);
    let mean_r =
        cfg.eta_r * (p * mu + model.additions_mean) + model.expected_background(read.0, read.1);
    let cov = cfg.eta_w * cfg.eta_r * p * (mu + mu * mu / m);
    cfg.n_shots as f64 * (mean_w * mean_r + cov)
}

/// Generates all shots into `path` (NDJSON with a header line). Output is
/// identical for any `workers`. On failure the partial file is removed.
pub fn run_campaign(
    config: &CampaignConfig,
    path: &Path,
    workers: usize,
) -> Result<CampaignSummary> {
    let model = ShotModel::new(config)?;
    let tmp = tmp_path(path);
    let result = write_campaign(&model, &tmp, workers).and_then(|summary| {
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))?;
        Ok(summary)
    });
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    result
}

fn tmp_path(path: &Path) -> PathBuf {
    let mut name = path
        .file_name()
        .map(|n| n.to_os_string())
        .unwrap_or_default();
    name.push(".partial");
    path.with_file_name(name)
}

fn pool(workers: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::Config(format!("cannot start {workers} workers: {e}")))
}

/// Simulates all shots in memory, in index order.
pub fn simulate_campaign(config: &CampaignConfig, workers: usize) -> Result<Vec<ShotRecord>> {
    let model = ShotModel::new(config)?;
    let pool = pool(workers)?;
    Ok(pool.install(|| {
        (0..config.n_shots)
            .into_par_iter()
            .map(|i| model.simulate_shot(i))
            .collect()
    }))
}

fn write_campaign(model: &ShotModel, path: &Path, workers: usize) -> Result<CampaignSummary> {
    let cfg = model.config();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    let header = ShotFileHeader {
        format: SHOT_FORMAT.to_string(),
        config_hash: cfg.hash(),
        seed: cfg.master_seed,
    };
    let io = |e| Error::io(path, e);
    serde_json::to_writer(&mut out, &header).map_err(|e| io(e.into()))?;
    out.write_all(b"\n").map_err(io)?;

    let w = model.windows();
    let write_win = (w.write.start_us, w.read.start_us);
    let read_win = (w.read.start_us, cfg.schedule.shot_length_us);
    let (mut total, mut wc, mut rc, mut coinc) = (0u64, 0u64, 0u64, 0u64);

    let pool = pool(workers)?;
    let mut next = 0u64;
    while next < cfg.n_shots {
        let end = (next + BATCH as u64).min(cfg.n_shots);
        let batch: Vec<ShotRecord> = pool.install(|| {
            (next..end)
                .into_par_iter()
                .map(|i| model.simulate_shot(i))
                .collect()
        });
        for rec in &batch {
            serde_json::to_writer(&mut out, rec).map_err(|e| io(e.into()))?;
            out.write_all(b"\n").map_err(io)?;
            let nw = count_in(&rec.timestamps, write_win.0, write_win.1);
            let nr = count_in(
                &rec.timestamps,
                read_win.0,
                read_win.1 + TIMESTAMP_RESOLUTION_US,
            );
            total += rec.timestamps.len() as u64;
            wc += nw;
            rc += nr;
            coinc += nw * nr;
        }
        next = end;
    }
    out.flush().map_err(io)?;

    let n = cfg.n_shots as f64;
    let window = |(a, b): (f64, f64), c: u64| WindowSummary {
        start_us: a,
        end_us: b,
        total_counts: c,
        mean_counts_per_shot: c as f64 / n,
        empirical_rate_hz: c as f64 / n / ((b - a) * 1e-6),
    };
    Ok(CampaignSummary {
        format: SHOT_FORMAT.to_string(),
        config_hash: header.config_hash,
        master_seed: cfg.master_seed,
        n_shots: cfg.n_shots,
        total_counts: total,
        write_window: window(write_win, wc),
        read_window: window(read_win, rc),
        coincidences: coinc,
        expected_coincidences: expected_coincidences(model, write_win, read_win),
        mu_w: cfg.mu_w,
        survival_probability: model.survival,
        thermal_additions_mean: model.additions_mean,
        shot_length_us: cfg.schedule.shot_length_us,
        duty_cycle: DUTY_CYCLE,
        idle_time_us: cfg.schedule.shot_length_us * (1.0 / DUTY_CYCLE - 1.0),
    })
}

fn count_in(ts: &[f64], a: f64, b: f64) -> u64 {
    (ts.partition_point(|&t| t < b) - ts.partition_point(|&t| t < a)) as u64
}

#[derive(Debug, Clone)]
pub struct ShotFile {
    pub header: ShotFileHeader,
    pub shots: Vec<ShotRecord>,
}

/// Reads a shot file. Errors name the first offending line (1-based).
pub fn read_shot_file(path: &Path, expected_shots: Option<u64>) -> Result<ShotFile> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let parse_err = |line: usize, msg: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let mut lines = BufReader::new(file).lines();
    let first = lines
        .next()
        .ok_or_else(|| parse_err(1, "empty file, missing header".into()))?
        .map_err(|e| Error::io(path, e))?;
    let header: ShotFileHeader =
        serde_json::from_str(&first).map_err(|e| parse_err(1, format!("bad header: {e}")))?;
    if header.format != SHOT_FORMAT {
        return Err(parse_err(
            1,
            format!("format {:?} is not {SHOT_FORMAT:?}", header.format),
        ));
    }
    let mut shots = Vec::new();
    for (i, line) in lines.enumerate() {
        let lineno = i + 2;
        let line = line.map_err(|e| Error::io(path, e))?;
        let rec: ShotRecord = serde_json::from_str(&line)
            .map_err(|e| parse_err(lineno, format!("corrupt record: {e}")))?;
        if rec.shot_index != shots.len() as u64 {
            return Err(parse_err(
                lineno,
                format!(
                    "expected shot {}, found shot {}",
                    shots.len(),
                    rec.shot_index
                ),
            ));
        }
        if rec.timestamps.windows(2).any(|w| w[1] < w[0]) {
            return Err(parse_err(lineno, "timestamps not sorted".into()));
        }
        shots.push(rec);
    }
    if let Some(n) = expected_shots {
        if shots.len() as u64 != n {
            return Err(parse_err(
                shots.len() + 2,
                format!("truncated: expected {n} shots, found {}", shots.len()),
            ));
        }
    }
    Ok(ShotFile { header, shots })
}
