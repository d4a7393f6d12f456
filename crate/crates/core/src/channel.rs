//! Wireless layer: block-fading channel draws with path loss, SNR
//! bookkeeping, and the uniform-forcing analog aggregation chain.

use nalgebra::DVector;
use num_complex::Complex64;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::model::LocalUpdate;

/// Gain below which a channel is treated as unusable for uniform forcing.
pub const DEGENERATE_GAIN: f64 = 1e-14;

/// Physical-layer configuration. Distances are in meters; `p0` is the
/// per-entry transmit power budget.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelConfig {
    pub k: usize,
    pub p0: f64,
    pub snr_db: f64,
    pub g0: f64,
    pub d0: f64,
    pub nu: f64,
    pub distances: Vec<f64>,
}

impl ChannelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::Config("antenna count k must be >= 1".into()));
        }
        if self.p0 <= 0.0 {
            return Err(Error::Config("P0 must be positive".into()));
        }
        if self.nu <= 0.0 {
            return Err(Error::Config("path-loss exponent nu must be positive".into()));
        }
        if self.distances.iter().any(|&d| d < self.d0) {
            return Err(Error::Config("device distances must be >= d0".into()));
        }
        Ok(())
    }

    /// Path-loss amplitude `sqrt(G0) * (d0 / d)^(nu/2)` for one device.
    pub fn path_loss(&self, device: usize) -> f64 {
        self.g0.sqrt() * (self.d0 / self.distances[device]).powf(self.nu / 2.0)
    }

    pub fn sigma2(&self) -> f64 {
        snr_to_sigma2(self.snr_db, self.p0)
    }
}

/// Defaults from the experimental setup: G0 = 10^-3.35, d0 = 1 m, nu = 3.76.
pub fn default_channel_config(k: usize, p0: f64, snr_db: f64, distances: Vec<f64>) -> ChannelConfig {
    ChannelConfig {
        k,
        p0,
        snr_db,
        g0: 10f64.powf(-3.35),
        d0: 1.0,
        nu: 3.76,
        distances,
    }
}

/// Per-round channel state: raw channels, effective channels (raw divided by
/// the device's reported update magnitude), and noise power.
#[derive(Debug, Clone)]
pub struct RoundChannel {
    pub h: Vec<DVector<Complex64>>,
    pub h_eff: Vec<DVector<Complex64>>,
    pub sigma2: f64,
}

impl RoundChannel {
    /// Attach reported magnitudes `norm_scaled[i] = |D_i| * ||p_i||`, forming
    /// the effective channels `h_i / norm_scaled[i]`.
    pub fn from_raw(h: Vec<DVector<Complex64>>, norm_scaled: &[f64], sigma2: f64) -> Result<Self> {
        if h.len() != norm_scaled.len() {
            return Err(Error::Config("channel/update count mismatch".into()));
        }
        let h_eff = h
            .iter()
            .zip(norm_scaled)
            .map(|(hi, &s)| {
                if s <= 0.0 {
                    return Err(Error::Config(
                        "reported update magnitude must be positive to form effective channels".into(),
                    ));
                }
                Ok(hi.map(|c| c / s))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { h, h_eff, sigma2 })
    }
}

/// Receive beamformer with its scaling factor and per-selected-device
/// uniform-forcing power factors.
#[derive(Debug, Clone)]
pub struct BeamformerSolution {
    pub a: DVector<Complex64>,
    pub eta: f64,
    pub b: Vec<Complex64>,
}

/// Noise power from the SNR definition `SNR = P0 / sigma^2`.
pub fn snr_to_sigma2(snr_db: f64, p0: f64) -> f64 {
    p0 / 10f64.powf(snr_db / 10.0)
}

pub fn complex_standard_normal(rng: &mut impl Rng) -> Complex64 {
    // CN(0,1): real and imaginary parts each N(0, 1/2)
    let re: f64 = StandardNormal.sample(rng);
    let im: f64 = StandardNormal.sample(rng);
    Complex64::new(re, im) * std::f64::consts::FRAC_1_SQRT_2
}

/// Fresh block-fading draw: `h_i = PL_i * h'_i` with `h' ~ CN(0, I)`.
pub fn draw_channels(cfg: &ChannelConfig, m: usize, rng: &mut impl Rng) -> Vec<DVector<Complex64>> {
    (0..m)
        .map(|i| {
            let pl = cfg.path_loss(i);
            DVector::from_fn(cfg.k, |_, _| complex_standard_normal(rng) * pl)
        })
        .collect()
}

/// Encode a local update as a unit-norm symbol vector `s = p / ||p||`.
pub fn preprocess(update: &LocalUpdate) -> Result<DVector<f64>> {
    let norm = update.p.norm();
    if norm <= 0.0 {
        return Err(Error::Other(format!(
            "device {}: zero direction cannot be encoded (locally converged update should be skipped)",
            update.device
        )));
    }
    Ok(&update.p / norm)
}

/// Uniform-forcing power factor: `b = sqrt(eta) * (a^H h)^H / |a^H h|^2`,
/// so that `a^H h * b = sqrt(eta)`.
pub fn uniform_forcing_b(
    a: &DVector<Complex64>,
    h_eff_i: &DVector<Complex64>,
    eta: f64,
    device: usize,
) -> Result<Complex64> {
    let gain = a.dotc(h_eff_i); // a^H h
    let mag2 = gain.norm_sqr();
    if mag2.sqrt() < DEGENERATE_GAIN {
        return Err(Error::DegenerateChannel {
            device,
            gain: mag2.sqrt(),
        });
    }
    Ok(eta.sqrt() * gain.conj() / mag2)
}

/// Power-feasible scaling factor `eta = d * P0 * min_i |a^H h_i|^2` over the
/// selected devices.
pub fn scaling_factor(
    a: &DVector<Complex64>,
    h_eff_selected: &[&DVector<Complex64>],
    d: usize,
    p0: f64,
) -> Result<f64> {
    if h_eff_selected.is_empty() {
        return Err(Error::EmptySelection);
    }
    let min_gain2 = h_eff_selected
        .iter()
        .map(|h| a.dotc(h).norm_sqr())
        .fold(f64::INFINITY, f64::min);
    Ok(d as f64 * p0 * min_gain2)
}

/// Result of one analog aggregation: the recovered direction and the
/// additive effective-noise vector (for diagnostics).
#[derive(Debug, Clone)]
pub struct AggregationOutput {
    pub p_hat: DVector<f64>,
    pub noise: DVector<f64>,
}

/// Run the full analog aggregation chain for the selected updates:
/// simultaneous transmission with uniform forcing, receive combining,
/// post-processing back to a real direction vector. The imaginary residual
/// of the combined signal is discarded; with uniform forcing the signal term
/// is exactly real and the discarded part is pure noise.
pub fn aircomp_aggregate(
    selected: &[&LocalUpdate],
    h_eff_selected: &[&DVector<Complex64>],
    beam: &BeamformerSolution,
    sigma2: f64,
    rng: &mut impl Rng,
) -> Result<AggregationOutput> {
    if selected.is_empty() {
        return Err(Error::EmptySelection);
    }
    debug_assert_eq!(selected.len(), h_eff_selected.len());
    debug_assert_eq!(selected.len(), beam.b.len());
    let d = selected[0].p.len();
    let k = beam.a.len();
    let total_size: f64 = selected.iter().map(|u| u.size as f64).sum();
    let sqrt_eta = beam.eta.sqrt();

    // signal gain per device: (a^H h_eff) * b / sqrt(eta); equals 1 exactly
    // in algebra under uniform forcing
    let gains: Vec<Complex64> = h_eff_selected
        .iter()
        .zip(&beam.b)
        .map(|(h, b)| beam.a.dotc(h) * b / sqrt_eta)
        .collect();

    let mut p_hat = DVector::zeros(d);
    let mut noise = DVector::zeros(d);
    for j in 0..d {
        let mut r = Complex64::new(0.0, 0.0);
        for (u, gain) in selected.iter().zip(&gains) {
            // transmitted symbol entry carries |D_i| p_i[j] / norm_scaled;
            // the receive chain rescales back by norm_scaled via h_eff
            r += gain * (u.size as f64) * u.p[j];
        }
        // fresh noise column e_j ~ CN(0, sigma2 I_k), combined as a^H e_j
        let mut combined_noise = Complex64::new(0.0, 0.0);
        if sigma2 > 0.0 {
            let std = sigma2.sqrt();
            for l in 0..k {
                let e = complex_standard_normal(rng) * std;
                combined_noise += beam.a[l].conj() * e;
            }
        }
        let recovered = (r + combined_noise / sqrt_eta) / total_size;
        noise[j] = (combined_noise / sqrt_eta).re / total_size;
        p_hat[j] = recovered.re;
    }
    Ok(AggregationOutput { p_hat, noise })
}

/// Weighted mean of the selected directions, `sum |D_i| p_i / sum |D_i|`.
/// The ideal (noise-free, selection-aware) aggregate.
pub fn weighted_mean(selected: &[&LocalUpdate]) -> Result<DVector<f64>> {
    if selected.is_empty() {
        return Err(Error::EmptySelection);
    }
    let d = selected[0].p.len();
    let mut acc = DVector::zeros(d);
    let mut total = 0.0;
    for u in selected {
        acc.axpy(u.size as f64, &u.p, 1.0);
        total += u.size as f64;
    }
    Ok(acc / total)
}
