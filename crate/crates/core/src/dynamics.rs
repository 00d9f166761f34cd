//! Phonon-occupation dynamics over a pulse schedule, the filter-passed
//! Stokes/anti-Stokes photon rates, and the power-scale fit.
//!
//! Times are in µs, rates in 1/s.

use std::fmt::Write as _;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::filter::FilterCascade;
use crate::physics::{
    self, occupation_rate, scattering_rates, steady_state_occupation, DriveTone, ScatteringRates,
    SystemParams,
};

/// Default integration step for the built-in preset.
pub const DEFAULT_DT_US: f64 = 0.1;
/// Stiffness product dt·(A₋ + A₊ + Γ_m(2n̄_th+1)) must stay below this.
const STABILITY_LIMIT: f64 = 0.1;
/// Undershoot below zero that is clamped silently.
const CLAMP_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stage {
    pub start_us: f64,
    pub end_us: f64,
    pub write_power: f64,
    pub read_power: f64,
}

/// Instantaneous drive powers in measured (arbitrary) units.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct DrivePowers {
    pub write: f64,
    pub read: f64,
}

/// Piecewise-constant drive powers over one shot.
///
/// Outside all stages before the first and after the last one the read
/// beam idles at `idle_read_fraction` of the largest stage read power.
/// Gaps between stages are dark. During any stage with write power and no
/// read power a red leakage of `write_leakage` (same reference) is present.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PulseSchedule {
    pub stages: Vec<Stage>,
    pub shot_length_us: f64,
    pub idle_read_fraction: f64,
    #[serde(default)]
    pub write_leakage: f64,
}

impl PulseSchedule {
    /// Cool 150–650 µs, write 750–850 µs, read from 950 µs for Γ_opt·T_r = 5
    /// at the preset cooperativity, 1% idle read power, 1.1 ms shot.
    pub fn preset() -> Self {
        let gamma_opt = physics::preset::COOPERATIVITY * physics::preset::gamma_th();
        let t_read = (5.0 / gamma_opt * 1e6 * 1e4).round() / 1e4;
        PulseSchedule {
            stages: vec![
                Stage {
                    start_us: 150.0,
                    end_us: 650.0,
                    write_power: 0.0,
                    read_power: 1.0,
                },
                Stage {
                    start_us: 750.0,
                    end_us: 850.0,
                    write_power: 1.0,
                    read_power: 0.0,
                },
                Stage {
                    start_us: 950.0,
                    end_us: 950.0 + t_read,
                    write_power: 0.0,
                    read_power: 1.0,
                },
            ],
            shot_length_us: 1100.0,
            idle_read_fraction: 0.01,
            write_leakage: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.shot_length_us.is_finite() && self.shot_length_us > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "shot length must be positive, got {}",
                self.shot_length_us
            )));
        }
        if !(0.0..=1.0).contains(&self.idle_read_fraction) {
            return Err(Error::InvalidParameter(format!(
                "idle_read_fraction must be in [0, 1], got {}",
                self.idle_read_fraction
            )));
        }
        if !(self.write_leakage >= 0.0 && self.write_leakage.is_finite()) {
            return Err(Error::InvalidParameter("write_leakage must be >= 0".into()));
        }
        let mut prev_end = 0.0;
        for (i, s) in self.stages.iter().enumerate() {
            if !(s.start_us >= prev_end && s.end_us > s.start_us && s.end_us <= self.shot_length_us)
            {
                return Err(Error::InvalidParameter(format!(
                    "stage {i} [{}, {}) is unsorted, overlapping or outside [0, {}]",
                    s.start_us, s.end_us, self.shot_length_us
                )));
            }
            if !(s.write_power >= 0.0 && s.read_power >= 0.0) {
                return Err(Error::InvalidParameter(format!(
                    "stage {i} has a negative power"
                )));
            }
            prev_end = s.end_us;
        }
        Ok(())
    }

    /// Largest stage read power, the reference for idle and leakage levels.
    pub fn reference_read_power(&self) -> f64 {
        self.stages.iter().map(|s| s.read_power).fold(0.0, f64::max)
    }

    fn idle_power(&self) -> DrivePowers {
        DrivePowers {
            write: 0.0,
            read: self.idle_read_fraction * self.reference_read_power(),
        }
    }

    /// Drive powers at `t_us`; stages are half-open [start, end).
    pub fn powers_at(&self, t_us: f64) -> DrivePowers {
        let first = self.stages.first().map_or(f64::INFINITY, |s| s.start_us);
        let last = self.stages.last().map_or(f64::NEG_INFINITY, |s| s.end_us);
        if t_us < first || t_us >= last {
            return self.idle_power();
        }
        match self
            .stages
            .iter()
            .find(|s| t_us >= s.start_us && t_us < s.end_us)
        {
            Some(s) => {
                let mut read = s.read_power;
                if s.write_power > 0.0 && s.read_power == 0.0 {
                    read = self.write_leakage * self.reference_read_power();
                }
                DrivePowers {
                    write: s.write_power,
                    read,
                }
            }
            None => DrivePowers::default(),
        }
    }

    /// Stages carrying write power, in order.
    pub fn write_stages(&self) -> impl Iterator<Item = &Stage> {
        self.stages.iter().filter(|s| s.write_power > 0.0)
    }

    /// Stages carrying read power, in order.
    pub fn read_stages(&self) -> impl Iterator<Item = &Stage> {
        self.stages.iter().filter(|s| s.read_power > 0.0)
    }

    /// Every instant at which the drive can change.
    fn breakpoints(&self) -> Vec<f64> {
        self.stages
            .iter()
            .flat_map(|s| [s.start_us, s.end_us])
            .collect()
    }
}

/// Conversion from measured power units to intracavity photon number.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PowerScale {
    pub coeff_w: f64,
    pub coeff_r: f64,
}

impl PowerScale {
    /// Unit powers map to g_w·T_w = 0.1 over the 100 µs preset write pulse
    /// and to Γ_opt = C_q·Γ_th on the read beam.
    pub fn preset(params: &SystemParams) -> Self {
        PowerScale {
            coeff_w: params.n_cav_for_write_gain(physics::preset::WRITE_GAIN_PRODUCT, 100e-6),
            coeff_r: params.n_cav_for_cooperativity(physics::preset::COOPERATIVITY),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.coeff_w >= 0.0
            && self.coeff_r >= 0.0
            && self.coeff_w.is_finite()
            && self.coeff_r.is_finite())
        {
            return Err(Error::InvalidParameter(format!(
                "power scale must be >= 0: {self:?}"
            )));
        }
        Ok(())
    }

    pub fn write_drive(&self, params: &SystemParams, powers: DrivePowers) -> DriveTone {
        DriveTone {
            detuning: params.write_detuning,
            n_cav: self.coeff_w * powers.write,
        }
    }

    pub fn read_drive(&self, params: &SystemParams, powers: DrivePowers) -> DriveTone {
        DriveTone {
            detuning: params.read_detuning,
            n_cav: self.coeff_r * powers.read,
        }
    }

    /// Total scattering rates with both drives acting independently.
    pub fn rates(&self, params: &SystemParams, powers: DrivePowers) -> ScatteringRates {
        scattering_rates(params, &self.write_drive(params, powers))
            + scattering_rates(params, &self.read_drive(params, powers))
    }
}

/// Times of a uniform grid, rounded to 10⁻⁹ µs so that printed values stay short.
pub fn grid_times(n_points: usize, dt_us: f64) -> Vec<f64> {
    (0..n_points)
        .map(|i| ((i as f64 * dt_us) * 1e9).round() / 1e9)
        .collect()
}

fn uniform_step(times: &[f64]) -> Result<f64> {
    if times.len() < 2 {
        return Err(Error::GridMismatch("grid needs at least two points".into()));
    }
    let dt = (times[times.len() - 1] - times[0]) / (times.len() - 1) as f64;
    if !(dt > 0.0) {
        return Err(Error::GridMismatch(
            "grid is not strictly increasing".into(),
        ));
    }
    for (i, w) in times.windows(2).enumerate() {
        if ((w[1] - w[0]) - dt).abs() > 1e-6 * dt.max(1e-3) {
            return Err(Error::GridMismatch(format!(
                "grid is not uniform at index {i}"
            )));
        }
    }
    Ok(dt)
}

/// Number of steps of size `dt_us` covering the shot.
pub(crate) fn step_count(shot_length_us: f64, dt_us: f64) -> Result<usize> {
    if !(dt_us > 0.0 && dt_us.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "dt must be positive, got {dt_us}"
        )));
    }
    let n = (shot_length_us / dt_us).round();
    if (n * dt_us - shot_length_us).abs() > 1e-9 * shot_length_us {
        return Err(Error::InvalidParameter(format!(
            "shot length {shot_length_us} us is not a multiple of dt {dt_us} us"
        )));
    }
    Ok(n as usize)
}

#[derive(Debug, Clone, PartialEq)]
pub struct OccupationTrace {
    pub times: Vec<f64>,
    pub n_bar: Vec<f64>,
}

impl OccupationTrace {
    pub fn step_us(&self) -> Result<f64> {
        uniform_step(&self.times)
    }

    /// Occupation at `t_us`, linearly interpolated.
    pub fn at(&self, t_us: f64) -> f64 {
        interpolate(&self.times, &self.n_bar, t_us)
    }

    /// `time_us,n_bar`, one row per grid point, values in shortest
    /// round-trip decimal form.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("time_us,n_bar\n");
        for (t, n) in self.times.iter().zip(&self.n_bar) {
            let _ = writeln!(s, "{t},{n}");
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RateTraces {
    pub times: Vec<f64>,
    pub gamma_s: Vec<f64>,
    pub gamma_as: Vec<f64>,
}

impl RateTraces {
    pub fn step_us(&self) -> Result<f64> {
        uniform_step(&self.times)
    }

    pub fn total(&self) -> Vec<f64> {
        self.gamma_s
            .iter()
            .zip(&self.gamma_as)
            .map(|(a, b)| a + b)
            .collect()
    }

    pub fn scaled(&self, factor: f64) -> RateTraces {
        RateTraces {
            times: self.times.clone(),
            gamma_s: self.gamma_s.iter().map(|v| v * factor).collect(),
            gamma_as: self.gamma_as.iter().map(|v| v * factor).collect(),
        }
    }

    /// `time_us,gamma_s_hz,gamma_as_hz,gamma_total_hz`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("time_us,gamma_s_hz,gamma_as_hz,gamma_total_hz\n");
        for ((t, a), b) in self.times.iter().zip(&self.gamma_s).zip(&self.gamma_as) {
            let _ = writeln!(s, "{t},{a},{b},{}", a + b);
        }
        s
    }

    /// Parses the rate CSV. Only `time_us` and one of `gamma_total_hz` or the
    /// two channel columns are required; a lone total is stored as Stokes.
    pub fn from_csv(text: &str) -> Result<RateTraces> {
        let mut lines = text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty() && !l.starts_with('#'));
        let (_, header) = lines
            .next()
            .ok_or_else(|| Error::Config("empty rate file".into()))?;
        let cols: Vec<&str> = header.split(',').map(str::trim).collect();
        let find = |name: &str| cols.iter().position(|c| *c == name);
        let t_col =
            find("time_us").ok_or_else(|| Error::Config("missing time_us column".into()))?;
        let s_col = find("gamma_s_hz");
        let as_col = find("gamma_as_hz");
        let tot_col = find("gamma_total_hz");
        if tot_col.is_none() && (s_col.is_none() || as_col.is_none()) {
            return Err(Error::Config(
                "rate file needs gamma_total_hz or both channel columns".into(),
            ));
        }
        let mut out = RateTraces {
            times: vec![],
            gamma_s: vec![],
            gamma_as: vec![],
        };
        for (lineno, line) in lines {
            let fields: Vec<&str> = line.split(',').map(str::trim).collect();
            let get = |c: usize| -> Result<f64> {
                fields
                    .get(c)
                    .ok_or_else(|| {
                        Error::Config(format!("line {}: missing column {c}", lineno + 1))
                    })?
                    .parse::<f64>()
                    .map_err(|e| Error::Config(format!("line {}: {e}", lineno + 1)))
            };
            out.times.push(get(t_col)?);
            match (s_col, as_col) {
                (Some(a), Some(b)) => {
                    out.gamma_s.push(get(a)?);
                    out.gamma_as.push(get(b)?);
                }
                _ => {
                    out.gamma_s.push(get(tot_col.unwrap())?);
                    out.gamma_as.push(0.0);
                }
            }
        }
        Ok(out)
    }
}

pub(crate) fn interpolate(times: &[f64], values: &[f64], t: f64) -> f64 {
    if times.is_empty() {
        return 0.0;
    }
    if t <= times[0] {
        return values[0];
    }
    let last = times.len() - 1;
    if t >= times[last] {
        return values[last];
    }
    let dt = (times[last] - times[0]) / last as f64;
    let x = (t - times[0]) / dt;
    let i = (x.floor() as usize).min(last - 1);
    let f = x - i as f64;
    values[i] * (1.0 - f) + values[i + 1] * f
}

fn rk4_step(n: f64, h: f64, rates: &ScatteringRates, params: &SystemParams) -> f64 {
    let f = |x: f64| occupation_rate(x, rates, params);
    let k1 = f(n);
    let k2 = f(n + 0.5 * h * k1);
    let k3 = f(n + 0.5 * h * k2);
    let k4 = f(n + h * k3);
    n + h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
}

fn stiffness(rates: &ScatteringRates, params: &SystemParams) -> f64 {
    rates.a_minus + rates.a_plus + params.gamma_m * (2.0 * params.n_th + 1.0)
}

/// Steady state under the idle read drive alone.
pub fn idle_occupation(
    params: &SystemParams,
    schedule: &PulseSchedule,
    scale: &PowerScale,
) -> Result<f64> {
    let rates = scale.rates(params, schedule.idle_power());
    steady_state_occupation(&rates, params)
}

/// Integrates the occupation equation from the idle steady state.
pub fn evolve_occupation(
    params: &SystemParams,
    schedule: &PulseSchedule,
    scale: &PowerScale,
    dt_us: f64,
) -> Result<OccupationTrace> {
    params.validate()?;
    schedule.validate()?;
    scale.validate()?;
    let initial = idle_occupation(params, schedule, scale)?;
    evolve_occupation_from(params, schedule, scale, dt_us, initial)
}

/// Classical fixed-step RK4. Drives are held at their value at the step
/// midpoint, so steps never straddle a switching edge when the edges lie
/// on the grid.
pub fn evolve_occupation_from(
    params: &SystemParams,
    schedule: &PulseSchedule,
    scale: &PowerScale,
    dt_us: f64,
    initial: f64,
) -> Result<OccupationTrace> {
    params.validate()?;
    schedule.validate()?;
    scale.validate()?;
    if !(initial >= 0.0 && initial.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "initial occupation must be >= 0, got {initial}"
        )));
    }
    let steps = step_count(schedule.shot_length_us, dt_us)?;
    let h = dt_us * 1e-6;

    let mut probes = schedule.breakpoints();
    probes.push(0.0);
    let peak = probes
        .iter()
        .map(|&t| stiffness(&scale.rates(params, schedule.powers_at(t)), params))
        .fold(0.0, f64::max);
    let product = peak * h;
    if product >= STABILITY_LIMIT {
        return Err(Error::StepTooLarge {
            dt_us,
            product,
            suggested_us: 0.5 * STABILITY_LIMIT / peak * 1e6,
        });
    }

    let times = grid_times(steps + 1, dt_us);
    let mut n_bar = Vec::with_capacity(steps + 1);
    let mut n = initial;
    n_bar.push(n);
    for i in 0..steps {
        let mid = (i as f64 + 0.5) * dt_us;
        let rates = scale.rates(params, schedule.powers_at(mid));
        n = rk4_step(n, h, &rates, params);
        if n < 0.0 {
            if n < -CLAMP_TOLERANCE {
                warn!("occupation undershoot {n:e} at t = {mid} us clamped to 0");
            }
            n = 0.0;
        }
        n_bar.push(n);
    }
    Ok(OccupationTrace { times, n_bar })
}

/// Filter-passed emission: Stokes from the write drive with factor (n̄+1),
/// anti-Stokes from the read drive with factor n̄.
pub fn photon_rate_traces(
    occupation: &OccupationTrace,
    params: &SystemParams,
    schedule: &PulseSchedule,
    scale: &PowerScale,
) -> Result<RateTraces> {
    let dt = occupation.step_us()?;
    let first = occupation.times[0];
    let last = *occupation.times.last().unwrap();
    if first.abs() > 1e-9 || (last - schedule.shot_length_us).abs() > 1e-6 * dt.max(1.0) {
        return Err(Error::GridMismatch(format!(
            "occupation grid [{first}, {last}] does not span the shot [0, {}]",
            schedule.shot_length_us
        )));
    }
    if occupation.n_bar.len() != occupation.times.len() {
        return Err(Error::GridMismatch(
            "occupation values and times differ in length".into(),
        ));
    }
    let mut gamma_s = Vec::with_capacity(occupation.times.len());
    let mut gamma_as = Vec::with_capacity(occupation.times.len());
    for (&t, &n) in occupation.times.iter().zip(&occupation.n_bar) {
        let powers = schedule.powers_at(t);
        let stokes = scattering_rates(params, &scale.write_drive(params, powers)).a_plus;
        let anti = scattering_rates(params, &scale.read_drive(params, powers)).a_minus;
        gamma_s.push(stokes * (n + 1.0));
        gamma_as.push(anti * n);
    }
    Ok(RateTraces {
        times: occupation.times.clone(),
        gamma_s,
        gamma_as,
    })
}

/// Occupation, raw rates and filter-convolved rates in one pass.
pub fn simulate_rates(
    params: &SystemParams,
    schedule: &PulseSchedule,
    scale: &PowerScale,
    cascade: &FilterCascade,
    dt_us: f64,
) -> Result<(OccupationTrace, RateTraces, RateTraces)> {
    let occ = evolve_occupation(params, schedule, scale, dt_us)?;
    let raw = photon_rate_traces(&occ, params, schedule, scale)?;
    let filtered = cascade.convolve_rates(&raw)?;
    Ok((occ, raw, filtered))
}

#[derive(Debug, Clone)]
pub struct FitOptions {
    /// Integration step for the model.
    pub dt_us: f64,
    /// Flat factor between emitted and observed rates.
    pub efficiency: f64,
    pub initial: PowerScale,
    pub max_iterations: usize,
    pub rel_tolerance: f64,
}

impl FitOptions {
    pub fn new(initial: PowerScale) -> Self {
        FitOptions {
            dt_us: DEFAULT_DT_US,
            efficiency: 1.0,
            initial,
            max_iterations: 200,
            rel_tolerance: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StageComparison {
    pub start_us: f64,
    pub end_us: f64,
    pub observed_mean_hz: f64,
    pub model_mean_hz: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct FitReport {
    pub scale: PowerScale,
    pub residual_norm: f64,
    pub iterations: usize,
    pub stages: Vec<StageComparison>,
    #[serde(skip)]
    pub model_total: Vec<f64>,
}

/// Filter-convolved total detected rate at the observation times.
pub fn model_total_rate(
    params: &SystemParams,
    schedule: &PulseSchedule,
    cascade: &FilterCascade,
    scale: &PowerScale,
    dt_us: f64,
    efficiency: f64,
    at_times: &[f64],
) -> Result<Vec<f64>> {
    let (_, _, filtered) = simulate_rates(params, schedule, scale, cascade, dt_us)?;
    let total = filtered.total();
    Ok(at_times
        .iter()
        .map(|&t| efficiency * interpolate(&filtered.times, &total, t))
        .collect())
}

/// Levenberg–Marquardt over the logarithms of the two coefficients with a
/// central-difference Jacobian. λ = 0 is a plain Gauss–Newton step.
pub fn fit_power_scale(
    observed: &RateTraces,
    params: &SystemParams,
    schedule: &PulseSchedule,
    cascade: &FilterCascade,
    options: &FitOptions,
) -> Result<FitReport> {
    observed.step_us()?;
    let obs = observed.total();
    let obs_norm2: f64 = obs.iter().map(|v| v * v).sum();
    if !(obs_norm2 > 0.0) || obs.iter().any(|v| !v.is_finite()) {
        return Err(Error::Fit(
            "observed rates are all zero or non-finite".into(),
        ));
    }
    if options.initial.coeff_w <= 0.0 || options.initial.coeff_r <= 0.0 {
        return Err(Error::Fit("initial coefficients must be positive".into()));
    }
    let eval = |theta: [f64; 2]| -> Result<Vec<f64>> {
        let scale = PowerScale {
            coeff_w: theta[0].exp(),
            coeff_r: theta[1].exp(),
        };
        let m = model_total_rate(
            params,
            schedule,
            cascade,
            &scale,
            options.dt_us,
            options.efficiency,
            &observed.times,
        )?;
        Ok(m.iter().zip(&obs).map(|(a, b)| a - b).collect())
    };
    let cost = |r: &[f64]| r.iter().map(|v| v * v).sum::<f64>();

    let mut theta = [options.initial.coeff_w.ln(), options.initial.coeff_r.ln()];
    let mut resid = eval(theta)?;
    let mut c = cost(&resid);
    let mut lambda = 0.0;
    let mut iterations = 0;
    let mut converged = false;
    let h = 1e-6;

    while iterations < options.max_iterations {
        iterations += 1;
        let mut jac = [vec![0.0; obs.len()], vec![0.0; obs.len()]];
        for k in 0..2 {
            let mut up = theta;
            let mut dn = theta;
            up[k] += h;
            dn[k] -= h;
            let ru = eval(up)?;
            let rd = eval(dn)?;
            for (j, (a, b)) in jac[k].iter_mut().zip(ru.iter().zip(&rd)) {
                *j = (a - b) / (2.0 * h);
            }
        }
        let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
        let jtj = [
            [dot(&jac[0], &jac[0]), dot(&jac[0], &jac[1])],
            [dot(&jac[1], &jac[0]), dot(&jac[1], &jac[1])],
        ];
        let jtr = [dot(&jac[0], &resid), dot(&jac[1], &resid)];
        if jtj[0][0] <= 0.0 || jtj[1][1] <= 0.0 {
            return Err(Error::Fit(format!(
                "model insensitive to a coefficient (J^T J diagonal {:?}); schedule lacks a write or read stage?",
                [jtj[0][0], jtj[1][1]]
            )));
        }

        let mut accepted = false;
        for _ in 0..30 {
            let a = [
                [jtj[0][0] * (1.0 + lambda), jtj[0][1]],
                [jtj[1][0], jtj[1][1] * (1.0 + lambda)],
            ];
            let det = a[0][0] * a[1][1] - a[0][1] * a[1][0];
            if det.abs() > 0.0 && det.is_finite() {
                let step = [
                    -(a[1][1] * jtr[0] - a[0][1] * jtr[1]) / det,
                    -(-a[1][0] * jtr[0] + a[0][0] * jtr[1]) / det,
                ];
                // keep single steps within a factor e^3
                let scale = (step[0].abs().max(step[1].abs()) / 3.0).max(1.0);
                let trial = [theta[0] + step[0] / scale, theta[1] + step[1] / scale];
                if let Ok(r) = eval(trial) {
                    let ct = cost(&r);
                    if ct <= c {
                        let rel_change = (c - ct) / c.max(f64::MIN_POSITIVE);
                        let step_size = (step[0] / scale).abs().max((step[1] / scale).abs());
                        theta = trial;
                        resid = r;
                        c = ct;
                        lambda = if lambda > 1e-3 { lambda / 10.0 } else { 0.0 };
                        accepted = true;
                        if rel_change < options.rel_tolerance || step_size < options.rel_tolerance {
                            converged = true;
                        }
                        break;
                    }
                }
            }
            lambda = if lambda == 0.0 { 1e-3 } else { lambda * 10.0 };
        }
        if !accepted {
            // no downhill step at any damping: a (local) minimum
            converged = true;
        }
        if converged || c <= 1e-28 * obs_norm2 {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::Fit(format!(
            "no convergence after {iterations} iterations: coefficients ({:.6e}, {:.6e}), residual norm {:.6e}",
            theta[0].exp(),
            theta[1].exp(),
            c.sqrt()
        )));
    }

    let scale = PowerScale {
        coeff_w: theta[0].exp(),
        coeff_r: theta[1].exp(),
    };
    let model_total: Vec<f64> = resid.iter().zip(&obs).map(|(r, o)| r + o).collect();
    let stages = schedule
        .stages
        .iter()
        .map(|s| {
            let (mut so, mut sm, mut k) = (0.0, 0.0, 0usize);
            for ((t, o), m) in observed.times.iter().zip(&obs).zip(&model_total) {
                if *t >= s.start_us && *t < s.end_us {
                    so += o;
                    sm += m;
                    k += 1;
                }
            }
            let k = k.max(1) as f64;
            StageComparison {
                start_us: s.start_us,
                end_us: s.end_us,
                observed_mean_hz: so / k,
                model_mean_hz: sm / k,
            }
        })
        .collect();
    Ok(FitReport {
        scale,
        residual_norm: c.sqrt(),
        iterations,
        stages,
        model_total,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::physics::angular;

    fn fast_relaxation_params() -> SystemParams {
        SystemParams {
            gamma_m: 1.0e5,
            n_th: 0.0,
            ..SystemParams::preset()
        }
    }

    fn dark_schedule(length: f64) -> PulseSchedule {
        PulseSchedule {
            stages: vec![],
            shot_length_us: length,
            idle_read_fraction: 0.0,
            write_leakage: 0.0,
        }
    }

    #[test]
    fn preset_schedule_is_valid() {
        let s = PulseSchedule::preset();
        s.validate().unwrap();
        let read = s.stages[2];
        let gamma_opt = angular(15e3);
        assert!((gamma_opt * (read.end_us - read.start_us) * 1e-6 - 5.0).abs() < 1e-3);
        assert_eq!(s.powers_at(100.0).read, 0.01);
        assert_eq!(s.powers_at(700.0), DrivePowers::default());
        assert_eq!(s.powers_at(750.0).write, 1.0);
        assert_eq!(s.powers_at(850.0).write, 0.0);
        assert_eq!(s.powers_at(1090.0).read, 0.01);
    }

    #[test]
    fn schedule_validation() {
        let mut s = PulseSchedule::preset();
        s.stages.swap(0, 1);
        assert!(s.validate().is_err());
        let mut s = PulseSchedule::preset();
        s.idle_read_fraction = 1.5;
        assert!(s.validate().is_err());
        let mut s = PulseSchedule::preset();
        s.stages[2].end_us = 2000.0;
        assert!(s.validate().is_err());
        let mut s = PulseSchedule::preset();
        s.stages[0].read_power = -1.0;
        assert!(s.validate().is_err());
    }

    #[test]
    fn leakage_only_during_write() {
        let mut s = PulseSchedule::preset();
        s.write_leakage = 0.02;
        assert_eq!(s.powers_at(800.0).read, 0.02);
        assert_eq!(s.powers_at(900.0).read, 0.0);
    }

    #[test]
    fn constant_drive_converges_to_fixed_point() {
        let p = SystemParams::preset();
        let scale = PowerScale::preset(&p);
        let sched = PulseSchedule {
            stages: vec![Stage {
                start_us: 0.0,
                end_us: 2000.0,
                write_power: 0.2,
                read_power: 1.0,
            }],
            shot_length_us: 2000.0,
            idle_read_fraction: 0.0,
            write_leakage: 0.0,
        };
        let occ = evolve_occupation_from(&p, &sched, &scale, 0.1, 50.0).unwrap();
        let rates = scale.rates(
            &p,
            DrivePowers {
                write: 0.2,
                read: 1.0,
            },
        );
        let fixed = steady_state_occupation(&rates, &p).unwrap();
        let last = *occ.n_bar.last().unwrap();
        assert!((last - fixed).abs() < 1e-6 * fixed, "{last} vs {fixed}");
    }

    #[test]
    fn free_relaxation_matches_exponential() {
        let p = fast_relaxation_params();
        let sched = dark_schedule(50.0);
        let scale = PowerScale {
            coeff_w: 0.0,
            coeff_r: 0.0,
        };
        let n0 = 7.0;
        let occ = evolve_occupation_from(&p, &sched, &scale, 0.1, n0).unwrap();
        for (t, n) in occ.times.iter().zip(&occ.n_bar) {
            let exact = p.n_th + (n0 - p.n_th) * (-p.gamma_m * t * 1e-6).exp();
            assert!((n - exact).abs() <= 1e-4 * exact, "{t}: {n} vs {exact}");
        }
    }

    #[test]
    fn step_guard() {
        let p = fast_relaxation_params();
        let sched = dark_schedule(100.0);
        let scale = PowerScale {
            coeff_w: 0.0,
            coeff_r: 0.0,
        };
        let err = evolve_occupation_from(&p, &sched, &scale, 2.0, 1.0).unwrap_err();
        match err {
            Error::StepTooLarge { suggested_us, .. } => {
                assert!(suggested_us < 1.0);
                evolve_occupation_from(&p, &sched, &scale, 0.5, 1.0).unwrap();
            }
            other => panic!("{other}"),
        }
    }

    #[test]
    fn unaligned_shot_length_rejected() {
        let p = SystemParams::preset();
        let sched = dark_schedule(100.05);
        let scale = PowerScale {
            coeff_w: 0.0,
            coeff_r: 0.0,
        };
        assert!(evolve_occupation_from(&p, &sched, &scale, 0.1, 1.0).is_err());
    }

    #[test]
    fn zero_occupation_rate_floors() {
        let p = SystemParams::preset();
        let sched = PulseSchedule::preset();
        let scale = PowerScale::preset(&p);
        let occ = OccupationTrace {
            times: grid_times(11001, 0.1),
            n_bar: vec![0.0; 11001],
        };
        let r = photon_rate_traces(&occ, &p, &sched, &scale).unwrap();
        assert!(r.gamma_as.iter().all(|&v| v == 0.0));
        for (t, s) in r.times.iter().zip(&r.gamma_s) {
            if sched.powers_at(*t).write > 0.0 {
                assert!(*s > 0.0);
            } else {
                assert_eq!(*s, 0.0);
            }
        }
    }

    #[test]
    fn no_write_power_no_stokes() {
        let p = SystemParams::preset();
        let mut sched = PulseSchedule::preset();
        for s in &mut sched.stages {
            s.write_power = 0.0;
        }
        sched.stages.retain(|s| s.read_power > 0.0);
        let scale = PowerScale::preset(&p);
        let occ = evolve_occupation(&p, &sched, &scale, 0.1).unwrap();
        let r = photon_rate_traces(&occ, &p, &sched, &scale).unwrap();
        assert!(r.gamma_s.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn exact_sideband_lorentzians() {
        let p = SystemParams::preset();
        let sched = PulseSchedule::preset();
        let scale = PowerScale::preset(&p);
        let occ = OccupationTrace {
            times: grid_times(11001, 0.1),
            n_bar: vec![2.0; 11001],
        };
        let r = photon_rate_traces(&occ, &p, &sched, &scale).unwrap();
        let g2 = p.g0 * p.g0;
        let i_w = 8000; // 800 µs
        let expect_s = g2 * scale.coeff_w * 4.0 / p.kappa * 3.0;
        assert!((r.gamma_s[i_w] - expect_s).abs() < 1e-12 * expect_s);
        let i_r = 9600;
        let expect_as = g2 * scale.coeff_r * 4.0 / p.kappa * 2.0;
        assert!((r.gamma_as[i_r] - expect_as).abs() < 1e-12 * expect_as);
    }

    #[test]
    fn grid_mismatch_rejected() {
        let p = SystemParams::preset();
        let sched = PulseSchedule::preset();
        let scale = PowerScale::preset(&p);
        let occ = OccupationTrace {
            times: grid_times(1001, 0.1),
            n_bar: vec![1.0; 1001],
        };
        assert!(matches!(
            photon_rate_traces(&occ, &p, &sched, &scale),
            Err(Error::GridMismatch(_))
        ));
    }

    #[test]
    fn rates_are_affine_in_occupation() {
        let p = SystemParams::preset();
        let sched = PulseSchedule::preset();
        let scale = PowerScale::preset(&p);
        let t = grid_times(11001, 0.1);
        let a = OccupationTrace {
            times: t.clone(),
            n_bar: (0..11001).map(|i| (i % 13) as f64 * 0.3).collect(),
        };
        let b = OccupationTrace {
            times: t.clone(),
            n_bar: (0..11001).map(|i| (i % 7) as f64).collect(),
        };
        let ab = OccupationTrace {
            times: t,
            n_bar: a.n_bar.iter().zip(&b.n_bar).map(|(x, y)| x + y).collect(),
        };
        let zero = OccupationTrace {
            times: a.times.clone(),
            n_bar: vec![0.0; 11001],
        };
        let ra = photon_rate_traces(&a, &p, &sched, &scale).unwrap();
        let rb = photon_rate_traces(&b, &p, &sched, &scale).unwrap();
        let rab = photon_rate_traces(&ab, &p, &sched, &scale).unwrap();
        let r0 = photon_rate_traces(&zero, &p, &sched, &scale).unwrap();
        for i in 0..11001 {
            let lin = ra.gamma_as[i] + rb.gamma_as[i];
            assert!((rab.gamma_as[i] - lin).abs() <= 1e-9 * lin.abs().max(1.0));
            let aff = ra.gamma_s[i] + rb.gamma_s[i] - r0.gamma_s[i];
            assert!((rab.gamma_s[i] - aff).abs() <= 1e-9 * aff.abs().max(1.0));
        }
    }

    #[test]
    fn csv_round_trip_and_format() {
        let r = RateTraces {
            times: vec![0.0, 0.1],
            gamma_s: vec![1.5, 2.0],
            gamma_as: vec![0.0, 0.25],
        };
        let csv = r.to_csv();
        assert_eq!(
            csv,
            "time_us,gamma_s_hz,gamma_as_hz,gamma_total_hz\n0,1.5,0,1.5\n0.1,2,0.25,2.25\n"
        );
        assert_eq!(RateTraces::from_csv(&csv).unwrap(), r);
        let o = OccupationTrace {
            times: vec![0.0, 0.1],
            n_bar: vec![20.25, 0.125],
        };
        assert_eq!(o.to_csv(), "time_us,n_bar\n0,20.25\n0.1,0.125\n");
    }

    #[test]
    fn fit_rejects_all_zero() {
        let p = SystemParams::preset();
        let sched = PulseSchedule::preset();
        let obs = RateTraces {
            times: grid_times(1101, 1.0),
            gamma_s: vec![0.0; 1101],
            gamma_as: vec![0.0; 1101],
        };
        let err = fit_power_scale(
            &obs,
            &p,
            &sched,
            &FilterCascade::default(),
            &FitOptions::new(PowerScale::preset(&p)),
        );
        assert!(matches!(err, Err(Error::Fit(_))));
    }
}
