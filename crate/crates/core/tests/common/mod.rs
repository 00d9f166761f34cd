#![allow(dead_code)]

use phonon_herald::dynamics::{PowerScale, PulseSchedule};
use phonon_herald::filter::FilterCascade;
use phonon_herald::physics::SystemParams;
use phonon_herald::shots::CampaignConfig;

/// Low-gain campaign with noise calibrated so that both autocorrelations
/// sit between 1.5 and 1.7: a 15x colder bath (Γ_m kept), 5 dark counts/s
/// and a thermal read admixture of 0.3 phonons.
pub fn calibrated_low_gain(n_shots: u64, seed: u64) -> CampaignConfig {
    let mut params = SystemParams::preset();
    let mut scale = PowerScale::preset(&params);
    // A₊·T_w = 0.1
    scale.coeff_w *= 0.5;
    params.n_th /= 15.0;
    let mut c = CampaignConfig::derived(
        params,
        PulseSchedule::preset(),
        scale,
        FilterCascade::default(),
        n_shots,
        seed,
    )
    .unwrap();
    c.eta_w = 0.05;
    c.eta_r = 0.05;
    c.dark_rate = 5.0;
    c.thermal_admix = 0.3;
    c
}

/// Built-in preset driven to a mean of `mu` pairs: the rate model grows the
/// occupation as e^(A₊T_w), so the write drive is set to A₊T_w = ln(1+μ).
pub fn high_gain(mu: f64, n_shots: u64, seed: u64) -> CampaignConfig {
    let params = SystemParams::preset();
    let mut scale = PowerScale::preset(&params);
    scale.coeff_w *= (1.0 + mu).ln() / 0.2;
    let mut c = CampaignConfig::derived(
        params,
        PulseSchedule::preset(),
        scale,
        FilterCascade::default(),
        n_shots,
        seed,
    )
    .unwrap();
    c.mu_w = mu;
    c.eta_w = 0.05;
    c.eta_r = 0.05;
    c
}

/// Noise-free source with unit efficiencies and no storage loss.
pub fn ideal_pairs(mu: f64, n_shots: u64, seed: u64) -> CampaignConfig {
    let mut c = CampaignConfig::preset(n_shots, seed).unwrap();
    c.mu_w = mu;
    c.eta_w = 1.0;
    c.eta_r = 1.0;
    c.n_residual = 0.0;
    c.thermal_admix = 0.0;
    c.storage_delay_us = 0.0;
    c.include_background = false;
    c
}

/// Pure Poisson counts: only dark counts, so every g² and R equal 1.
pub fn poisson_only(dark_rate: f64, n_shots: u64, seed: u64) -> CampaignConfig {
    let mut c = ideal_pairs(0.0, n_shots, seed);
    c.dark_rate = dark_rate;
    c
}

/// Moments of the Bose law P(m) = μ^m/(1+μ)^(m+1) by direct summation.
/// Returns (⟨m⟩, ⟨m²⟩, ⟨m(m−1)⟩). The sum runs over m ≤ 64 and further
/// until the remaining tail mass is below 1e-12.
pub fn bose_moments(mu: f64) -> (f64, f64, f64) {
    let q = mu / (1.0 + mu);
    let mut p = 1.0 / (1.0 + mu);
    let (mut mass, mut m1, mut m2, mut mf) = (0.0, 0.0, 0.0, 0.0);
    let mut m = 0u32;
    while m <= 64 || 1.0 - mass > 1e-12 {
        let x = m as f64;
        mass += p;
        m1 += x * p;
        m2 += x * x * p;
        mf += x * (x - 1.0) * p;
        p *= q;
        m += 1;
    }
    (m1, m2, mf)
}

/// g² between the two arms of a Bose pair source with perfect correlation.
pub fn bose_cross_g2(mu: f64) -> f64 {
    let (m1, m2, _) = bose_moments(mu);
    m2 / (m1 * m1)
}
