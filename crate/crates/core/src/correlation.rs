//! Windowed second-order correlations of single-detector timestamp streams.
//!
//! For two windows the per-shot statistic is n₁n₂ − n_o, where n_o counts
//! the photons in their intersection. Disjoint windows give the plain
//! product, identical windows give n(n−1), and partial overlaps remove each
//! photon's pairing with itself exactly once.
//!
//! Uncertainties come from a shot-level bootstrap. Shots are grouped by
//! their (n₁, n₂, n_o) tuple, so a resample is a multinomial draw over the
//! distinct tuples rather than over individual shots.

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution};
use rayon::prelude::*;
use serde::Serialize;

use crate::dynamics::{grid_times, step_count, PulseSchedule};
use crate::error::{Error, Result};
use crate::filter::FilterCascade;
use crate::shots::ShotRecord;

/// Minimum expected coincidences for a cell to be reported.
pub const MIN_EXPECTED_COINCIDENCES: f64 = 5.0;
/// Largest tolerated fraction of bootstrap resamples with undefined R.
pub const MAX_DEGENERATE_FRACTION: f64 = 0.2;
pub const DEFAULT_RESAMPLES: usize = 5000;
pub const DEFAULT_MAP_RESAMPLES: usize = 200;

/// Window [center − τ/2, center + τ/2), µs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct WindowSpec {
    pub center_us: f64,
    pub tau_us: f64,
}

impl WindowSpec {
    pub fn new(center_us: f64, tau_us: f64) -> Result<Self> {
        if !(tau_us > 0.0 && tau_us.is_finite()) || !center_us.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "window needs finite center and tau > 0, got center {center_us} tau {tau_us}"
            )));
        }
        Ok(WindowSpec { center_us, tau_us })
    }

    pub fn start(&self) -> f64 {
        self.center_us - 0.5 * self.tau_us
    }

    pub fn end(&self) -> f64 {
        self.center_us + 0.5 * self.tau_us
    }

    pub fn within(&self, shot_length_us: f64) -> bool {
        self.start() >= -1e-9 && self.end() <= shot_length_us + 1e-9
    }

    fn overlap(&self, other: &WindowSpec) -> Option<(f64, f64)> {
        let a = self.start().max(other.start());
        let b = self.end().min(other.end());
        (b > a).then_some((a, b))
    }
}

/// Flattened timestamps of a campaign.
#[derive(Debug, Clone, Default)]
pub struct ShotSet {
    offsets: Vec<usize>,
    times: Vec<f64>,
}

impl ShotSet {
    pub fn new(records: &[ShotRecord]) -> Self {
        Self::from_timestamps(records.iter().map(|r| r.timestamps.as_slice()))
    }

    /// Each item is one shot; timestamps must be sorted.
    pub fn from_timestamps<'a>(shots: impl IntoIterator<Item = &'a [f64]>) -> Self {
        let mut offsets = vec![0];
        let mut times = Vec::new();
        for ts in shots {
            times.extend_from_slice(ts);
            offsets.push(times.len());
        }
        ShotSet { offsets, times }
    }

    pub fn len(&self) -> usize {
        self.offsets.len().saturating_sub(1)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn shot(&self, i: usize) -> &[f64] {
        &self.times[self.offsets[i]..self.offsets[i + 1]]
    }

    /// Counts of shot `i` in [a, b).
    pub fn count(&self, i: usize, a: f64, b: f64) -> u32 {
        let ts = self.shot(i);
        (ts.partition_point(|&t| t < b) - ts.partition_point(|&t| t < a)) as u32
    }
}

/// Sums over shots needed by the estimators.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Moments {
    pub n_shots: f64,
    pub s1: f64,
    pub s2: f64,
    /// Σ n₁n₂ − n_o
    pub s12: f64,
    /// Σ n₁(n₁−1)
    pub s11: f64,
    /// Σ n₂(n₂−1)
    pub s22: f64,
}

impl Moments {
    pub fn g12(&self) -> Option<f64> {
        (self.s1 > 0.0 && self.s2 > 0.0).then(|| self.s12 * self.n_shots / (self.s1 * self.s2))
    }

    pub fn g11(&self) -> Option<f64> {
        (self.s1 > 0.0).then(|| self.s11 * self.n_shots / (self.s1 * self.s1))
    }

    pub fn g22(&self) -> Option<f64> {
        (self.s2 > 0.0).then(|| self.s22 * self.n_shots / (self.s2 * self.s2))
    }

    /// R = g₁₂²/(g₁₁·g₂₂), undefined unless both autocorrelations are positive.
    pub fn r(&self) -> Option<f64> {
        let (g12, g11, g22) = (self.g12()?, self.g11()?, self.g22()?);
        (g11 > 0.0 && g22 > 0.0).then(|| g12 * g12 / (g11 * g22))
    }

    /// N·⟨n₁⟩⟨n₂⟩, the coincidences expected without correlation.
    pub fn expected_cross(&self) -> f64 {
        self.s1 * self.s2 / self.n_shots
    }

    pub fn expected_auto(&self) -> (f64, f64) {
        (
            self.s1 * self.s1 / self.n_shots,
            self.s2 * self.s2 / self.n_shots,
        )
    }
}

/// Histogram of per-shot (n₁, n₂, n_o) tuples.
#[derive(Debug, Clone, PartialEq)]
pub struct JointCounts {
    n_shots: u64,
    categories: Vec<([u32; 3], u64)>,
}

impl JointCounts {
    /// Tuples are (n₁, n₂, n_o) with n_o ≤ min(n₁, n₂).
    pub fn from_tuples(tuples: impl IntoIterator<Item = (u32, u32, u32)>) -> Self {
        let mut map: HashMap<[u32; 3], u64> = HashMap::new();
        let mut n = 0;
        for (a, b, o) in tuples {
            *map.entry([a, b, o]).or_default() += 1;
            n += 1;
        }
        let mut categories: Vec<_> = map.into_iter().collect();
        categories.sort_unstable();
        JointCounts {
            n_shots: n,
            categories,
        }
    }

    pub fn collect(shots: &ShotSet, w1: &WindowSpec, w2: &WindowSpec) -> Self {
        let overlap = w1.overlap(w2);
        Self::from_tuples((0..shots.len()).map(|i| {
            let n1 = shots.count(i, w1.start(), w1.end());
            let n2 = shots.count(i, w2.start(), w2.end());
            let no = overlap.map_or(0, |(a, b)| shots.count(i, a, b));
            (n1, n2, no)
        }))
    }

    pub fn n_shots(&self) -> u64 {
        self.n_shots
    }

    pub fn moments(&self) -> Moments {
        self.weighted(self.categories.iter().map(|c| c.1))
    }

    fn weighted(&self, weights: impl Iterator<Item = u64>) -> Moments {
        let mut m = Moments::default();
        for (&([a, b, o], _), w) in self.categories.iter().zip(weights) {
            let (a, b, o, w) = (a as f64, b as f64, o as f64, w as f64);
            m.n_shots += w;
            m.s1 += w * a;
            m.s2 += w * b;
            m.s12 += w * (a * b - o);
            m.s11 += w * a * (a - 1.0);
            m.s22 += w * b * (b - 1.0);
        }
        m
    }

    /// One bootstrap resample: N shots drawn with replacement, expressed
    /// as a multinomial over the tuple categories.
    pub fn resample(&self, rng: &mut ChaCha8Rng) -> Moments {
        let mut remaining_draws = self.n_shots;
        let mut remaining_mass = self.n_shots;
        let weights = self.categories.iter().map(|&(_, c)| {
            if remaining_draws == 0 {
                return 0;
            }
            let x = if c >= remaining_mass {
                remaining_draws
            } else {
                let p = c as f64 / remaining_mass as f64;
                Binomial::new(remaining_draws, p)
                    .expect("valid binomial")
                    .sample(rng)
            };
            remaining_draws -= x;
            remaining_mass -= c;
            x
        });
        let weights: Vec<u64> = weights.collect();
        self.weighted(weights.into_iter())
    }
}

/// Point estimate with its 1σ bootstrap error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct G2Estimate {
    pub value: f64,
    pub err: f64,
    /// N·⟨n₁n₂⟩ with the self-pair term removed.
    pub coincidences: f64,
    /// value/√coincidences, for cross-checking `err`.
    pub poisson_err: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CsEstimate {
    pub r: f64,
    pub r_err: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum CellFlag {
    Ok,
    Insufficient,
    UndefinedR,
}

impl CellFlag {
    pub fn as_str(&self) -> &'static str {
        match self {
            CellFlag::Ok => "ok",
            CellFlag::Insufficient => "insufficient",
            CellFlag::UndefinedR => "undefined_r",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BootstrapOptions {
    pub resamples: usize,
    pub seed: u64,
}

impl Default for BootstrapOptions {
    fn default() -> Self {
        BootstrapOptions {
            resamples: DEFAULT_RESAMPLES,
            seed: 0,
        }
    }
}

/// Bootstrap summary of (g₁₂, g₁₁, g₂₂, R) for one window pair.
#[derive(Debug, Clone, PartialEq)]
pub struct PairEstimate {
    pub moments: Moments,
    /// Covariance of (g₁₂, g₁₁, g₂₂) over valid resamples.
    pub covariance: [[f64; 3]; 3],
    /// Bootstrap R values of resamples where R is defined.
    pub r_samples: Vec<f64>,
    /// Resamples where some estimator was undefined.
    pub degenerate: usize,
    pub resamples: usize,
}

impl PairEstimate {
    pub fn compute(counts: &JointCounts, opts: &BootstrapOptions) -> Self {
        let moments = counts.moments();
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        let mut samples: Vec<[f64; 3]> = Vec::with_capacity(opts.resamples);
        let mut r_samples = Vec::with_capacity(opts.resamples);
        let mut degenerate = 0;
        for _ in 0..opts.resamples {
            let m = counts.resample(&mut rng);
            match (m.g12(), m.g11(), m.g22()) {
                (Some(a), Some(b), Some(c)) => samples.push([a, b, c]),
                _ => {}
            }
            match m.r() {
                Some(r) => r_samples.push(r),
                None => degenerate += 1,
            }
        }
        PairEstimate {
            moments,
            covariance: covariance(&samples),
            r_samples,
            degenerate,
            resamples: opts.resamples,
        }
    }

    pub fn g12(&self) -> Option<G2Estimate> {
        let value = self.moments.g12()?;
        Some(G2Estimate {
            value,
            err: self.covariance[0][0].sqrt(),
            coincidences: self.moments.s12,
            poisson_err: if self.moments.s12 > 0.0 {
                value / self.moments.s12.sqrt()
            } else {
                f64::NAN
            },
        })
    }

    pub fn autocorrelations(&self) -> Option<(G2Estimate, G2Estimate)> {
        let m = &self.moments;
        let g11 = m.g11()?;
        let g22 = m.g22()?;
        let est = |value: f64, var: f64, s: f64| G2Estimate {
            value,
            err: var.sqrt(),
            coincidences: s,
            poisson_err: if s > 0.0 { value / s.sqrt() } else { f64::NAN },
        };
        Some((
            est(g11, self.covariance[1][1], m.s11),
            est(g22, self.covariance[2][2], m.s22),
        ))
    }

    pub fn cs(&self) -> Result<CsEstimate> {
        let m = &self.moments;
        let undefined = || Error::UndefinedR("a window has no counts".into());
        cs_parameter(
            m.g12().ok_or_else(undefined)?,
            m.g11().ok_or_else(undefined)?,
            m.g22().ok_or_else(undefined)?,
            &self.covariance,
        )
    }

    pub fn flag(&self) -> CellFlag {
        let (a1, a2) = self.moments.expected_auto();
        if self.moments.expected_cross().min(a1).min(a2) < MIN_EXPECTED_COINCIDENCES {
            CellFlag::Insufficient
        } else if self.moments.r().is_none() {
            CellFlag::UndefinedR
        } else {
            CellFlag::Ok
        }
    }

    /// One-sided bootstrap p-value for R ≤ 1 and a 95% percentile interval.
    pub fn p_value(&self) -> Result<PValue> {
        if self.degenerate as f64 > MAX_DEGENERATE_FRACTION * self.resamples as f64 {
            return Err(Error::DegenerateBootstrap {
                degenerate: self.degenerate,
                total: self.resamples,
            });
        }
        let r = self.cs()?.r;
        let mut sorted = self.r_samples.clone();
        sorted.sort_by(f64::total_cmp);
        let valid = sorted.len();
        let at_or_below = sorted.partition_point(|&x| x <= 1.0);
        Ok(PValue {
            r,
            p_value: at_or_below as f64 / valid as f64,
            ci_low: percentile(&sorted, 0.025),
            ci_high: percentile(&sorted, 0.975),
            valid,
            degenerate: self.degenerate,
        })
    }
}

fn percentile(sorted: &[f64], q: f64) -> f64 {
    let idx = ((sorted.len() - 1) as f64 * q).round() as usize;
    sorted[idx]
}

fn covariance(samples: &[[f64; 3]]) -> [[f64; 3]; 3] {
    let mut cov = [[f64::NAN; 3]; 3];
    if samples.len() < 2 {
        return cov;
    }
    let n = samples.len() as f64;
    let mut mean = [0.0; 3];
    for s in samples {
        for k in 0..3 {
            mean[k] += s[k] / n;
        }
    }
    for (i, row) in cov.iter_mut().enumerate() {
        for (j, c) in row.iter_mut().enumerate() {
            *c = samples
                .iter()
                .map(|s| (s[i] - mean[i]) * (s[j] - mean[j]))
                .sum::<f64>()
                / (n - 1.0);
        }
    }
    cov
}

/// Cross-correlation of two windows with its bootstrap error.
pub fn g2_windows(
    shots: &ShotSet,
    w1: &WindowSpec,
    w2: &WindowSpec,
    opts: &BootstrapOptions,
) -> Result<G2Estimate> {
    if shots.is_empty() {
        return Err(Error::InvalidParameter("empty shot set".into()));
    }
    let counts = JointCounts::collect(shots, w1, w2);
    let m = counts.moments();
    for (s, w) in [(m.s1, w1), (m.s2, w2)] {
        if s == 0.0 {
            return Err(Error::InsufficientCounts {
                center_us: w.center_us,
                tau_us: w.tau_us,
            });
        }
    }
    Ok(PairEstimate::compute(&counts, opts)
        .g12()
        .expect("nonzero denominators"))
}

/// R = g₁₂²/(g₁₁·g₂₂) with first-order error from the covariance of
/// (g₁₂, g₁₁, g₂₂).
pub fn cs_parameter(
    g12: f64,
    g11: f64,
    g22: f64,
    covariance: &[[f64; 3]; 3],
) -> Result<CsEstimate> {
    if !(g11 > 0.0 && g22 > 0.0) {
        return Err(Error::UndefinedR(format!(
            "autocorrelations must be positive, got {g11} and {g22}"
        )));
    }
    let r = g12 * g12 / (g11 * g22);
    let grad = [2.0 * g12 / (g11 * g22), -r / g11, -r / g22];
    let mut var = 0.0;
    for i in 0..3 {
        for j in 0..3 {
            var += grad[i] * covariance[i][j] * grad[j];
        }
    }
    Ok(CsEstimate {
        r,
        r_err: var.max(0.0).sqrt(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PValue {
    pub r: f64,
    pub p_value: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub valid: usize,
    pub degenerate: usize,
}

/// Shot-level bootstrap p-value for R ≤ 1.
pub fn bootstrap_pvalue(
    shots: &ShotSet,
    w1: &WindowSpec,
    w2: &WindowSpec,
    n_resamples: usize,
    seed: u64,
) -> Result<PValue> {
    if n_resamples < 1000 {
        return Err(Error::InvalidParameter(format!(
            "n_resamples must be >= 1000, got {n_resamples}"
        )));
    }
    if shots.is_empty() {
        return Err(Error::InvalidParameter("empty shot set".into()));
    }
    let counts = JointCounts::collect(shots, w1, w2);
    PairEstimate::compute(
        &counts,
        &BootstrapOptions {
            resamples: n_resamples,
            seed,
        },
    )
    .p_value()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MapCell {
    pub g2: f64,
    pub g2_err: f64,
    pub r: f64,
    pub r_err: f64,
    pub coincidences: f64,
    pub flag: CellFlag,
}

impl MapCell {
    fn from_estimate(est: &PairEstimate) -> Self {
        let flag = est.flag();
        let coincidences = est.moments.s12;
        if flag == CellFlag::Insufficient {
            return MapCell {
                g2: f64::NAN,
                g2_err: f64::NAN,
                r: f64::NAN,
                r_err: f64::NAN,
                coincidences,
                flag,
            };
        }
        let g = est.g12();
        let cs = est.cs().ok();
        MapCell {
            g2: g.map_or(f64::NAN, |g| g.value),
            g2_err: g.map_or(f64::NAN, |g| g.err),
            r: cs.map_or(f64::NAN, |c| c.r),
            r_err: cs.map_or(f64::NAN, |c| c.r_err),
            coincidences,
            flag,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorrelationMap {
    pub t1_grid: Vec<f64>,
    pub t2_grid: Vec<f64>,
    pub tau_us: f64,
    /// Row-major, `cells[i][j]` at (t1_grid[i], t2_grid[j]).
    pub cells: Vec<Vec<MapCell>>,
}

impl CorrelationMap {
    pub fn cell(&self, i: usize, j: usize) -> &MapCell {
        &self.cells[i][j]
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("t1_us,t2_us,g2,g2_err,R,R_err,coincidences,flag\n");
        for (i, t1) in self.t1_grid.iter().enumerate() {
            for (j, t2) in self.t2_grid.iter().enumerate() {
                let c = &self.cells[i][j];
                out.push_str(&format!(
                    "{},{},{},{},{},{},{},{}\n",
                    t1,
                    t2,
                    field(c.g2),
                    field(c.g2_err),
                    field(c.r),
                    field(c.r_err),
                    c.coincidences,
                    c.flag.as_str()
                ));
            }
        }
        out
    }
}

/// Empty for undefined values.
fn field(x: f64) -> String {
    if x.is_finite() {
        x.to_string()
    } else {
        String::new()
    }
}

fn cell_seed(seed: u64, i: usize, j: usize) -> u64 {
    let mut z = seed ^ ((i as u64) << 32 | j as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// g² and R at every grid point. Cells are independent and computed in
/// parallel; a square map on identical grids is filled from its upper
/// triangle, so it is exactly symmetric.
pub fn correlation_map(
    shots: &ShotSet,
    t1_grid: &[f64],
    t2_grid: &[f64],
    tau_us: f64,
    opts: &BootstrapOptions,
) -> Result<CorrelationMap> {
    if shots.is_empty() {
        return Err(Error::InvalidParameter("empty shot set".into()));
    }
    let w1: Vec<WindowSpec> = t1_grid
        .iter()
        .map(|&t| WindowSpec::new(t, tau_us))
        .collect::<Result<_>>()?;
    let w2: Vec<WindowSpec> = t2_grid
        .iter()
        .map(|&t| WindowSpec::new(t, tau_us))
        .collect::<Result<_>>()?;
    let symmetric = t1_grid == t2_grid;
    let pairs: Vec<(usize, usize)> = (0..w1.len())
        .flat_map(|i| (0..w2.len()).map(move |j| (i, j)))
        .filter(|&(i, j)| !symmetric || i <= j)
        .collect();
    let computed: Vec<((usize, usize), MapCell)> = pairs
        .par_iter()
        .map(|&(i, j)| {
            let counts = JointCounts::collect(shots, &w1[i], &w2[j]);
            let o = BootstrapOptions {
                resamples: opts.resamples,
                seed: cell_seed(opts.seed, i, j),
            };
            (
                (i, j),
                MapCell::from_estimate(&PairEstimate::compute(&counts, &o)),
            )
        })
        .collect();
    let blank = MapCell {
        g2: f64::NAN,
        g2_err: f64::NAN,
        r: f64::NAN,
        r_err: f64::NAN,
        coincidences: 0.0,
        flag: CellFlag::Insufficient,
    };
    let mut cells = vec![vec![blank; w2.len()]; w1.len()];
    for ((i, j), c) in computed {
        cells[i][j] = c;
        if symmetric {
            cells[j][i] = c;
        }
    }
    Ok(CorrelationMap {
        t1_grid: t1_grid.to_vec(),
        t2_grid: t2_grid.to_vec(),
        tau_us,
        cells,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SectionPoint {
    pub tr_us: f64,
    pub r: f64,
    pub r_err: f64,
    pub flag: CellFlag,
}

/// R along a scan of read-window positions with the write window fixed.
pub fn optimize_read_window(
    shots: &ShotSet,
    w_fixed: &WindowSpec,
    t_r_scan: &[f64],
    tau_us: f64,
    opts: &BootstrapOptions,
) -> Result<Vec<SectionPoint>> {
    if shots.is_empty() {
        return Err(Error::InvalidParameter("empty shot set".into()));
    }
    t_r_scan
        .par_iter()
        .enumerate()
        .map(|(k, &tr)| {
            let w2 = WindowSpec::new(tr, tau_us)?;
            let counts = JointCounts::collect(shots, w_fixed, &w2);
            let o = BootstrapOptions {
                resamples: opts.resamples,
                seed: cell_seed(opts.seed, usize::MAX, k),
            };
            let cell = MapCell::from_estimate(&PairEstimate::compute(&counts, &o));
            Ok(SectionPoint {
                tr_us: tr,
                r: cell.r,
                r_err: cell.r_err,
                flag: cell.flag,
            })
        })
        .collect()
}

/// Point of largest R among reportable points.
pub fn best_section_point(section: &[SectionPoint]) -> Option<&SectionPoint> {
    section
        .iter()
        .filter(|p| p.flag == CellFlag::Ok && p.r.is_finite())
        .max_by(|a, b| a.r.total_cmp(&b.r))
}

pub fn section_to_csv(section: &[SectionPoint]) -> String {
    let mut out = String::from("tr_us,R,R_err,flag\n");
    for p in section {
        out.push_str(&format!(
            "{},{},{},{}\n",
            p.tr_us,
            field(p.r),
            field(p.r_err),
            p.flag.as_str()
        ));
    }
    out
}

/// Center and FWHM of a filtered envelope.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EnvelopeWindow {
    pub center_us: f64,
    pub fwhm_us: f64,
}

/// Half-maximum crossing points of `shape` convolved with the filter,
/// sampled on [0, length_us).
pub fn filtered_envelope(
    shape: impl Fn(f64) -> f64,
    cascade: &FilterCascade,
    dt_us: f64,
    length_us: f64,
) -> Result<EnvelopeWindow> {
    let n = step_count(length_us, dt_us)? + 1;
    let times = grid_times(n, dt_us);
    let profile: Vec<f64> = times.iter().map(|&t| shape(t)).collect();
    let filtered = cascade.kernel(dt_us)?.apply(&profile);
    let (imax, &peak) = filtered
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .ok_or_else(|| Error::InvalidParameter("empty envelope".into()))?;
    if !(peak > 0.0) {
        return Err(Error::InvalidParameter(
            "envelope is zero everywhere".into(),
        ));
    }
    let half = 0.5 * peak;
    let cross = |i: usize, j: usize| {
        let (a, b) = (filtered[i], filtered[j]);
        times[i] + (half - a) / (b - a) * (times[j] - times[i])
    };
    let left = (1..=imax)
        .rev()
        .find(|&i| filtered[i - 1] < half)
        .map_or(times[0], |i| cross(i - 1, i));
    let right = (imax..n - 1)
        .find(|&i| filtered[i + 1] < half)
        .map_or(times[n - 1], |i| cross(i, i + 1));
    Ok(EnvelopeWindow {
        center_us: 0.5 * (left + right),
        fwhm_us: right - left,
    })
}

/// Filtered write-pulse envelope; its FWHM is the default τ.
pub fn write_envelope(
    schedule: &PulseSchedule,
    cascade: &FilterCascade,
    dt_us: f64,
) -> Result<EnvelopeWindow> {
    let w = *schedule
        .write_stages()
        .next()
        .ok_or_else(|| Error::InvalidParameter("schedule has no write stage".into()))?;
    filtered_envelope(
        |t| {
            if t >= w.start_us && t < w.end_us {
                1.0
            } else {
                0.0
            }
        },
        cascade,
        dt_us,
        schedule.shot_length_us,
    )
}
