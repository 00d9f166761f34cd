//! Run configuration file.
//!
//! TOML with one table per component. Frequencies are ordinary frequencies
//! in MHz (`kappa_mhz = 0.8` means κ = 2π × 0.8 MHz) and times are in µs;
//! conversion to angular units happens here. Every key is optional and
//! falls back to the `default` preset.
//!
//! ```toml
//! preset = "default"
//! seed = 7
//!
//! [system]
//! kappa_mhz = 0.8
//! omega_m_mhz = 1.4
//! g0_mhz = 0.0001
//! n_th = 2e5              # or t_env_k = 15.0
//! gamma_th_mhz = 0.0015   # sets gamma_m = gamma_th / n_th
//!
//! [schedule]
//! shot_length_us = 1100.0
//! idle_read_fraction = 0.01
//! [[schedule.stages]]
//! start_us = 150.0
//! end_us = 650.0
//! write_power = 0.0
//! read_power = 1.0
//!
//! [power]
//! coeff_w = 1.0e9
//! coeff_r = 3.0e8
//!
//! [filter]
//! linewidth_mhz = 0.03
//! stages = 4
//! transmission = 0.3
//!
//! [campaign]
//! n_shots = 100000
//! eta_w = 0.05
//! dark_rate_hz = 5.0
//!
//! [analysis]
//! resamples = 5000
//! map_resamples = 200
//!
//! [fit]
//! efficiency = 1.0
//!
//! [filter_output]
//! max_offset_mhz = 2.0
//! ```
//!
//! When only the bath (`n_th`, `t_env_k`) changes, Γ_m is kept. Default drive
//! coefficients come from the preset targets evaluated with the preset bath,
//! so changing the bath does not change the drives.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::analysis::AnalysisSettings;
use crate::dynamics::{PowerScale, PulseSchedule, Stage};
use crate::error::{Error, Result};
use crate::filter::{FilterCascade, LinewidthInterpretation};
use crate::physics::{angular, SystemParams};
use crate::shots::CampaignConfig;

const MHZ: f64 = 1e6;

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub preset: Option<String>,
    pub seed: Option<u64>,
    #[serde(default)]
    pub system: SystemSection,
    #[serde(default)]
    pub schedule: ScheduleSection,
    #[serde(default)]
    pub power: PowerSection,
    #[serde(default)]
    pub filter: FilterSection,
    #[serde(default)]
    pub campaign: CampaignSection,
    #[serde(default)]
    pub analysis: AnalysisSection,
    #[serde(default)]
    pub fit: FitSection,
    #[serde(default)]
    pub filter_output: FilterOutputSection,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemSection {
    pub kappa_mhz: Option<f64>,
    pub omega_m_mhz: Option<f64>,
    pub g0_mhz: Option<f64>,
    pub n_th: Option<f64>,
    pub t_env_k: Option<f64>,
    pub gamma_th_mhz: Option<f64>,
    pub write_detuning_mhz: Option<f64>,
    pub read_detuning_mhz: Option<f64>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleSection {
    pub shot_length_us: Option<f64>,
    pub idle_read_fraction: Option<f64>,
    pub write_leakage: Option<f64>,
    pub stages: Option<Vec<Stage>>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PowerSection {
    pub coeff_w: Option<f64>,
    pub coeff_r: Option<f64>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FilterSection {
    pub linewidth_mhz: Option<f64>,
    pub stages: Option<u32>,
    pub transmission: Option<f64>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CampaignSection {
    pub n_shots: Option<u64>,
    pub mu_w: Option<f64>,
    pub eta_w: Option<f64>,
    pub eta_r: Option<f64>,
    pub n_residual: Option<f64>,
    pub thermal_admix: Option<f64>,
    pub dark_rate_hz: Option<f64>,
    pub storage_delay_us: Option<f64>,
    pub temporal_modes: Option<u32>,
    pub include_background: Option<bool>,
    pub dt_us: Option<f64>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalysisSection {
    pub tau_us: Option<f64>,
    pub grid_step_us: Option<f64>,
    pub write_center_us: Option<f64>,
    pub resamples: Option<usize>,
    pub map_resamples: Option<usize>,
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitSection {
    pub efficiency: Option<f64>,
    pub initial_coeff_w: Option<f64>,
    pub initial_coeff_r: Option<f64>,
    pub max_iterations: Option<usize>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FilterOutputSection {
    pub max_offset_mhz: Option<f64>,
    pub offset_points: Option<usize>,
    pub interpretation: Option<LinewidthInterpretation>,
    pub response_span_us: Option<f64>,
    pub response_step_us: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FitSettings {
    pub efficiency: f64,
    pub initial: PowerScale,
    pub max_iterations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FilterOutputSettings {
    pub max_offset_hz: f64,
    pub offset_points: usize,
    pub interpretation: LinewidthInterpretation,
    pub response_span_us: f64,
    pub response_step_us: f64,
}

/// Fully resolved configuration.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunConfig {
    pub preset: String,
    pub campaign: CampaignConfig,
    pub analysis: AnalysisSettings,
    pub fit: FitSettings,
    pub filter_output: FilterOutputSettings,
}

impl RunConfig {
    pub fn seed(&self) -> u64 {
        self.campaign.master_seed
    }

    /// SHA-256 of the canonical JSON of the resolved configuration.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&json))
    }

    /// Leading comment line for CSV outputs.
    pub fn csv_comment(&self) -> String {
        format!(
            "# phonon-herald config_hash={} seed={}\n",
            self.hash(),
            self.seed()
        )
    }
}

impl ConfigFile {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    /// Resolves every value; `seed` overrides the file's seed.
    pub fn resolve(&self, seed: Option<u64>) -> Result<RunConfig> {
        let preset = self.preset.clone().unwrap_or_else(|| "default".into());
        if preset != "default" {
            return Err(Error::Config(format!(
                "unknown preset {preset:?}; available: default"
            )));
        }
        let seed = seed.or(self.seed).unwrap_or(0);

        let base = SystemParams::preset();
        let s = &self.system;
        let mut params = base;
        if let Some(v) = s.kappa_mhz {
            params.kappa = angular(v * MHZ);
        }
        if let Some(v) = s.omega_m_mhz {
            params.omega_m = angular(v * MHZ);
        }
        if let Some(v) = s.g0_mhz {
            params.g0 = angular(v * MHZ);
        }
        match (s.n_th, s.t_env_k) {
            (Some(_), Some(_)) => {
                return Err(Error::Config("give n_th or t_env_k, not both".into()))
            }
            (Some(n), None) => params.n_th = n,
            (None, Some(t)) => params = params.with_temperature(t)?,
            (None, None) => {}
        }
        if let Some(v) = s.gamma_th_mhz {
            if !(params.n_th > 0.0) {
                return Err(Error::Config("gamma_th_mhz needs n_th > 0".into()));
            }
            params.gamma_m = angular(v * MHZ) / params.n_th;
        }
        params.write_detuning = s
            .write_detuning_mhz
            .map_or(params.omega_m, |v| angular(v * MHZ));
        params.read_detuning = s
            .read_detuning_mhz
            .map_or(-params.omega_m, |v| angular(v * MHZ));
        params.validate()?;

        let mut schedule = PulseSchedule::preset();
        let sc = &self.schedule;
        if let Some(v) = sc.shot_length_us {
            schedule.shot_length_us = v;
        }
        if let Some(v) = sc.idle_read_fraction {
            schedule.idle_read_fraction = v;
        }
        if let Some(v) = sc.write_leakage {
            schedule.write_leakage = v;
        }
        if let Some(stages) = &sc.stages {
            schedule.stages = stages.clone();
        }
        schedule.validate()?;

        let reference = SystemParams {
            gamma_m: base.gamma_m,
            n_th: base.n_th,
            t_env: None,
            ..params
        };
        let default_scale = PowerScale::preset(&reference);
        let scale = PowerScale {
            coeff_w: self.power.coeff_w.unwrap_or(default_scale.coeff_w),
            coeff_r: self.power.coeff_r.unwrap_or(default_scale.coeff_r),
        };

        let mut cascade = FilterCascade::default();
        if let Some(v) = self.filter.linewidth_mhz {
            cascade.kappa_f = angular(v * MHZ);
        }
        if let Some(v) = self.filter.stages {
            cascade.n_stages = v;
        }
        if let Some(v) = self.filter.transmission {
            cascade.transmission = v;
        }
        cascade.validate()?;

        let c = &self.campaign;
        let n_shots = c.n_shots.unwrap_or(100_000);
        let mut campaign =
            CampaignConfig::derived(params, schedule, scale, cascade, n_shots.max(1), seed)?;
        campaign.n_shots = n_shots;
        let set = |dst: &mut f64, v: Option<f64>| {
            if let Some(v) = v {
                *dst = v;
            }
        };
        set(&mut campaign.mu_w, c.mu_w);
        set(&mut campaign.eta_w, c.eta_w);
        set(&mut campaign.eta_r, c.eta_r);
        set(&mut campaign.n_residual, c.n_residual);
        set(&mut campaign.thermal_admix, c.thermal_admix);
        set(&mut campaign.dark_rate, c.dark_rate_hz);
        set(&mut campaign.storage_delay_us, c.storage_delay_us);
        set(&mut campaign.dt_us, c.dt_us);
        if let Some(m) = c.temporal_modes {
            campaign.temporal_modes = m;
        }
        if let Some(b) = c.include_background {
            campaign.include_background = b;
        }
        campaign.validate()?;

        let a = &self.analysis;
        let defaults = AnalysisSettings::default();
        let analysis = AnalysisSettings {
            tau_us: a.tau_us,
            grid_step_us: a.grid_step_us,
            write_center_us: a.write_center_us,
            resamples: a.resamples.unwrap_or(defaults.resamples),
            map_resamples: a.map_resamples.unwrap_or(defaults.map_resamples),
            seed: a.seed.unwrap_or(seed),
        };
        if analysis.resamples < 1000 {
            return Err(Error::Config(format!(
                "analysis.resamples must be >= 1000, got {}",
                analysis.resamples
            )));
        }
        if analysis.map_resamples < 2 {
            return Err(Error::Config("analysis.map_resamples must be >= 2".into()));
        }

        let fit = FitSettings {
            efficiency: self.fit.efficiency.unwrap_or(1.0),
            initial: PowerScale {
                coeff_w: self.fit.initial_coeff_w.unwrap_or(scale.coeff_w),
                coeff_r: self.fit.initial_coeff_r.unwrap_or(scale.coeff_r),
            },
            max_iterations: self.fit.max_iterations.unwrap_or(200),
        };

        let f = &self.filter_output;
        let filter_output = FilterOutputSettings {
            max_offset_hz: f.max_offset_mhz.unwrap_or(2.0) * MHZ,
            offset_points: f.offset_points.unwrap_or(201),
            interpretation: f.interpretation.unwrap_or_default(),
            response_span_us: f.response_span_us.unwrap_or(400.0),
            response_step_us: f.response_step_us.unwrap_or(0.1),
        };
        if filter_output.offset_points < 2 || !(filter_output.max_offset_hz > 0.0) {
            return Err(Error::Config(
                "filter_output needs max_offset_mhz > 0 and offset_points >= 2".into(),
            ));
        }
        if !(filter_output.response_step_us > 0.0
            && filter_output.response_span_us > filter_output.response_step_us)
        {
            return Err(Error::Config(
                "filter_output response span must exceed its step".into(),
            ));
        }

        Ok(RunConfig {
            preset,
            campaign,
            analysis,
            fit,
            filter_output,
        })
    }
}
