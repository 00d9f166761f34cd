//! End-to-end campaign analysis: default windows, correlation map, read
//! window section, and the bootstrap test at the chosen optimum.

use serde::Serialize;

use crate::correlation::{
    self, best_section_point, correlation_map, optimize_read_window, BootstrapOptions,
    CorrelationMap, CsEstimate, G2Estimate, JointCounts, PValue, PairEstimate, SectionPoint,
    ShotSet, WindowSpec,
};
use crate::error::{Error, Result};
use crate::shots::{CampaignConfig, ChannelWindows, TIMESTAMP_RESOLUTION_US};

#[derive(Debug, Clone, PartialEq, Serialize, serde::Deserialize)]
pub struct AnalysisSettings {
    /// Window duration, µs; defaults to the filtered write-envelope FWHM
    /// rounded to the timestamp resolution.
    pub tau_us: Option<f64>,
    /// Map grid step, µs; defaults to τ/4.
    pub grid_step_us: Option<f64>,
    /// Write window center, µs; defaults to the filtered write-envelope center.
    pub write_center_us: Option<f64>,
    pub resamples: usize,
    pub map_resamples: usize,
    pub seed: u64,
}

impl Default for AnalysisSettings {
    fn default() -> Self {
        AnalysisSettings {
            tau_us: None,
            grid_step_us: None,
            write_center_us: None,
            resamples: correlation::DEFAULT_RESAMPLES,
            map_resamples: correlation::DEFAULT_MAP_RESAMPLES,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct OptimumSummary {
    pub write_window: WindowSpec,
    pub read_window: WindowSpec,
    pub g2_wr: G2Estimate,
    pub g2_ww: G2Estimate,
    pub g2_rr: G2Estimate,
    pub cs: CsEstimate,
    pub bootstrap: PValue,
}

#[derive(Debug, Clone, Serialize)]
pub struct AnalysisReport {
    pub n_shots: usize,
    pub tau_us: f64,
    pub grid_step_us: f64,
    pub seed: u64,
    pub resamples: usize,
    pub map_resamples: usize,
    /// None when no read position had enough counts for a defined R.
    pub optimum: Option<OptimumSummary>,
    #[serde(skip)]
    pub map: CorrelationMap,
    #[serde(skip)]
    pub section: Vec<SectionPoint>,
}

/// Lattice a, a+step, … up to b inclusive (within rounding).
pub fn lattice(a: f64, b: f64, step: f64) -> Vec<f64> {
    let n = ((b - a) / step + 1e-9).floor() as usize;
    (0..=n)
        .map(|k| ((a + k as f64 * step) * 1e6).round() / 1e6)
        .collect()
}

pub fn analyze_campaign(
    shots: &ShotSet,
    config: &CampaignConfig,
    settings: &AnalysisSettings,
) -> Result<AnalysisReport> {
    if shots.is_empty() {
        return Err(Error::InvalidParameter("empty shot set".into()));
    }
    let windows = ChannelWindows::from_schedule(&config.schedule)?;
    let envelope = correlation::write_envelope(&config.schedule, &config.cascade, config.dt_us)?;
    let tau = settings
        .tau_us
        .unwrap_or((envelope.fwhm_us / TIMESTAMP_RESOLUTION_US).round() * TIMESTAMP_RESOLUTION_US);
    let step = settings.grid_step_us.unwrap_or(tau / 4.0);
    let length = config.schedule.shot_length_us;
    if !(tau > 0.0 && tau < length) || !(step > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "bad window {tau} us or grid step {step} us"
        )));
    }
    let write_center = settings.write_center_us.unwrap_or(
        (envelope.center_us / TIMESTAMP_RESOLUTION_US).round() * TIMESTAMP_RESOLUTION_US,
    );
    let w_fixed = WindowSpec::new(write_center, tau)?;
    if !w_fixed.within(length) {
        return Err(Error::InvalidParameter(format!(
            "write window at {write_center} us leaves the shot"
        )));
    }

    let lo = (windows.write.start_us - 0.5 * tau).max(0.5 * tau);
    let grid = lattice(lo, length - 0.5 * tau, step);
    let map = correlation_map(
        shots,
        &grid,
        &grid,
        tau,
        &BootstrapOptions {
            resamples: settings.map_resamples,
            seed: settings.seed,
        },
    )?;

    let scan = lattice(windows.read.start_us, length - 0.5 * tau, step);
    let section = optimize_read_window(
        shots,
        &w_fixed,
        &scan,
        tau,
        &BootstrapOptions {
            resamples: settings.map_resamples,
            seed: settings.seed,
        },
    )?;

    let optimum = match best_section_point(&section) {
        Some(best) => {
            let w_read = WindowSpec::new(best.tr_us, tau)?;
            Some(optimum_at(shots, &w_fixed, &w_read, settings)?)
        }
        None => None,
    };

    Ok(AnalysisReport {
        n_shots: shots.len(),
        tau_us: tau,
        grid_step_us: step,
        seed: settings.seed,
        resamples: settings.resamples,
        map_resamples: settings.map_resamples,
        optimum,
        map,
        section,
    })
}

/// Full bootstrap at one window pair.
pub fn optimum_at(
    shots: &ShotSet,
    w_write: &WindowSpec,
    w_read: &WindowSpec,
    settings: &AnalysisSettings,
) -> Result<OptimumSummary> {
    let counts = JointCounts::collect(shots, w_write, w_read);
    let est = PairEstimate::compute(
        &counts,
        &BootstrapOptions {
            resamples: settings.resamples,
            seed: settings.seed,
        },
    );
    let undefined = || Error::InsufficientCounts {
        center_us: w_read.center_us,
        tau_us: w_read.tau_us,
    };
    let g2_wr = est.g12().ok_or_else(undefined)?;
    let (g2_ww, g2_rr) = est.autocorrelations().ok_or_else(undefined)?;
    Ok(OptimumSummary {
        write_window: *w_write,
        read_window: *w_read,
        g2_wr,
        g2_ww,
        g2_rr,
        cs: est.cs()?,
        bootstrap: est.p_value()?,
    })
}
