//! Series filter cascade: Erlang-type impulse response, causal convolution
//! of rate traces, off-resonance power suppression and per-photon delays.
//!
//! Time arguments of the response functions are in seconds; rate traces are
//! on microsecond grids as everywhere else in the crate.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dynamics::RateTraces;
use crate::error::{Error, Result};
use crate::physics::angular;

/// Kernel truncation: never shorter than this many 1/κ_f.
const MIN_KERNEL_SPAN: f64 = 20.0;
/// Kernel truncation: extended until the neglected tail mass is below this.
const KERNEL_TAIL_MASS: f64 = 1e-10;
/// Maximum grid step in units of 1/κ_f.
const MAX_STEP_KAPPA: f64 = 0.2;

/// N identical Lorentzian stages in series.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FilterCascade {
    /// Per-stage decay rate κ_f in rad/s.
    pub kappa_f: f64,
    pub n_stages: u32,
    /// End-to-end signal transmission, applied as a flat loss elsewhere.
    pub transmission: f64,
}

impl Default for FilterCascade {
    fn default() -> Self {
        FilterCascade {
            kappa_f: angular(30e3),
            n_stages: 4,
            transmission: 0.30,
        }
    }
}

/// How a filter linewidth maps onto the pole of one stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LinewidthInterpretation {
    /// Pole at κ_f.
    PoleRate,
    /// κ_f is a full width; the pole sits at κ_f/2.
    #[default]
    Fwhm,
}

impl FilterCascade {
    pub fn validate(&self) -> Result<()> {
        if !(self.kappa_f.is_finite() && self.kappa_f > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "kappa_f must be positive, got {}",
                self.kappa_f
            )));
        }
        if self.n_stages < 1 {
            return Err(Error::InvalidParameter("n_stages must be >= 1".into()));
        }
        if !(self.transmission > 0.0 && self.transmission <= 1.0) {
            return Err(Error::InvalidParameter(format!(
                "transmission must be in (0, 1], got {}",
                self.transmission
            )));
        }
        Ok(())
    }

    /// Mean filter delay N/κ_f, seconds.
    pub fn mean_delay(&self) -> f64 {
        self.n_stages as f64 / self.kappa_f
    }

    /// Mode of the impulse response, (N−1)/κ_f, seconds.
    pub fn peak_time(&self) -> f64 {
        (self.n_stages as f64 - 1.0) / self.kappa_f
    }

    /// ξ(t) = κ_f^N t^(N−1) e^(−κ_f t)/(N−1)!, zero for t < 0. For N = 4 this
    /// is κ_f⁴t³e^(−κ_f t)/6.
    pub fn impulse_response(&self, t: f64) -> f64 {
        if t < 0.0 {
            return 0.0;
        }
        let n = self.n_stages;
        let x = self.kappa_f * t;
        if n == 1 {
            return self.kappa_f * (-x).exp();
        }
        if x == 0.0 {
            return 0.0;
        }
        let log = (n as f64 - 1.0) * x.ln() - x - ln_factorial(n - 1);
        self.kappa_f * log.exp()
    }

    /// ∫₀ᵗ ξ, the step response.
    pub fn step_response(&self, t: f64) -> f64 {
        if t <= 0.0 {
            return 0.0;
        }
        1.0 - self.tail_mass(t)
    }

    /// ∫ₜ^∞ ξ.
    pub fn tail_mass(&self, t: f64) -> f64 {
        if t <= 0.0 {
            return 1.0;
        }
        let x = self.kappa_f * t;
        // e^{-x} Σ_{k<N} x^k/k!
        let mut term = 1.0;
        let mut sum = 1.0;
        for k in 1..self.n_stages {
            term *= x / k as f64;
            sum += term;
        }
        (sum * (-x).exp()).min(1.0)
    }

    /// Power suppression in dB at angular `offset` from the filter resonance:
    /// N·10·log₁₀(1 + (offset/κ_pole)²).
    pub fn frequency_suppression(
        &self,
        offset: f64,
        interpretation: LinewidthInterpretation,
    ) -> f64 {
        let pole = match interpretation {
            LinewidthInterpretation::PoleRate => self.kappa_f,
            LinewidthInterpretation::Fwhm => self.kappa_f / 2.0,
        };
        let r = offset / pole;
        self.n_stages as f64 * 10.0 * (r * r).ln_1p() / std::f64::consts::LN_10
    }

    /// One draw from Erlang(N, κ_f), seconds.
    pub fn sample_delay<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let mut s = 0.0;
        for _ in 0..self.n_stages {
            // 1 - u lies in (0, 1]
            let u: f64 = rng.random();
            s -= (1.0 - u).ln();
        }
        s / self.kappa_f
    }

    /// Largest admissible convolution grid step, µs.
    pub fn max_grid_step_us(&self) -> f64 {
        MAX_STEP_KAPPA / self.kappa_f * 1e6
    }

    pub fn kernel(&self, dt_us: f64) -> Result<FilterKernel> {
        FilterKernel::new(self, dt_us)
    }

    /// Causal convolution of both rate channels with ξ on the trace's grid.
    pub fn convolve_rates(&self, trace: &RateTraces) -> Result<RateTraces> {
        let dt = trace.step_us()?;
        let kernel = self.kernel(dt)?;
        Ok(RateTraces {
            times: trace.times.clone(),
            gamma_s: kernel.apply(&trace.gamma_s),
            gamma_as: kernel.apply(&trace.gamma_as),
        })
    }
}

fn ln_factorial(n: u32) -> f64 {
    (2..=n).map(|k| (k as f64).ln()).sum()
}

/// Discretized impulse response on a uniform grid.
///
/// Weight k is the mass of ξ on the cell centred at k·dt (the first cell is
/// half width), so the weights sum to one minus the truncated tail.
#[derive(Debug, Clone)]
pub struct FilterKernel {
    weights: Vec<f64>,
    tail_mass: f64,
}

impl FilterKernel {
    pub fn new(cascade: &FilterCascade, dt_us: f64) -> Result<Self> {
        cascade.validate()?;
        let required = cascade.max_grid_step_us();
        if !(dt_us > 0.0) || dt_us > required * (1.0 + 1e-12) {
            return Err(Error::GridTooCoarse {
                step_us: dt_us,
                required_us: required,
            });
        }
        let dt = dt_us * 1e-6;
        let min_len = (MIN_KERNEL_SPAN / (cascade.kappa_f * dt)).ceil() as usize;
        let mut weights = Vec::with_capacity(min_len + 1);
        let mut prev = 0.0;
        let mut k = 0usize;
        loop {
            let edge = (k as f64 + 0.5) * dt;
            let cdf = cascade.step_response(edge);
            weights.push(cdf - prev);
            prev = cdf;
            k += 1;
            if k >= min_len && cascade.tail_mass(edge) < KERNEL_TAIL_MASS {
                break;
            }
        }
        Ok(FilterKernel {
            weights,
            tail_mass: 1.0 - prev,
        })
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Mass of ξ beyond the truncated kernel.
    pub fn tail_mass(&self) -> f64 {
        self.tail_mass
    }

    /// y[i] = Σ_k w[k]·x[i−k].
    pub fn apply(&self, input: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; input.len()];
        for (j, &x) in input.iter().enumerate() {
            if x == 0.0 {
                continue;
            }
            for (y, w) in out[j..].iter_mut().zip(&self.weights) {
                *y += w * x;
            }
        }
        out
    }
}
