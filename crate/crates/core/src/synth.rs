//! Layered phantom volumes with known surfaces and known per-B-scan
//! misalignment.
//!
//! Surfaces are sums of low-frequency sinusoids. Lateral frequencies are
//! whole cycles across the A-scan axis, so every surface has the same
//! A-scan-averaged depth in every B-scan; the only B-scan-to-B-scan offset
//! of that average is the injected displacement (plus small drusen bumps).

use std::f64::consts::TAU;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{OctError, Result};
use crate::types::{DisplacementVector, OctVolume, Spacing, SurfaceSet};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhantomSpec {
    /// `[N_A, N_B, R]`.
    pub shape: [usize; 3],
    pub k: usize,
    /// Cycles of surface undulation across the A-scans and across the B-scans.
    pub frequencies: [f64; 2],
    /// Peak undulation amplitude in pixels.
    pub amplitude: f64,
    /// Peak amplitude of the per-surface thickness variation in pixels.
    pub jitter: f64,
    /// Inclusive range for the number of drusen bumps per volume.
    pub drusen_count: [usize; 2],
    /// Range of drusen heights in pixels.
    pub drusen_amplitude: [f64; 2],
    /// Standard deviation of the multiplicative speckle.
    pub noise_sigma: f64,
    /// Maximum |injected displacement| in pixels.
    pub shift_range: f64,
    /// Surfaces must stay within `[1 + margin, R - margin]`.
    pub margin: f64,
    /// Mean intensity per region (K + 1 values, top to bottom); derived when empty.
    pub layer_means: Vec<f64>,
    pub spacing: Spacing,
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            shape: [128, 12, 96],
            k: 3,
            frequencies: [2.0, 0.5],
            amplitude: 4.0,
            jitter: 1.0,
            drusen_count: [0, 2],
            drusen_amplitude: [1.0, 3.0],
            noise_sigma: 0.05,
            shift_range: 6.0,
            margin: 4.0,
            layer_means: Vec::new(),
            spacing: Spacing::default(),
            seed: 0,
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        let [na, nb, nr] = self.shape;
        if na < 1 || nb < 2 || nr < 8 {
            return Err(OctError::Invalid(format!("phantom shape {:?} too small", self.shape)));
        }
        if self.k < 1 {
            return Err(OctError::Invalid("phantom needs K >= 1".into()));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(OctError::Invalid("noise sigma must be >= 0".into()));
        }
        if !(self.shift_range >= 0.0 && self.shift_range < nr as f64 / 4.0) {
            return Err(OctError::Invalid(format!("shift range {} must lie in [0, R/4)", self.shift_range)));
        }
        if self.drusen_count[0] > self.drusen_count[1] || self.drusen_amplitude[0] > self.drusen_amplitude[1] {
            return Err(OctError::Invalid("drusen ranges must be ordered".into()));
        }
        if !self.layer_means.is_empty() && self.layer_means.len() != self.k + 1 {
            return Err(OctError::Invalid(format!("layer_means needs K + 1 = {} entries", self.k + 1)));
        }
        Ok(())
    }

    pub fn region_means(&self) -> Vec<f64> {
        if !self.layer_means.is_empty() {
            return self.layer_means.clone();
        }
        let k = self.k;
        (0..=k)
            .map(|j| match j {
                0 => 0.1,
                j if j == k => 0.25,
                j if (k - 1 - j) % 2 == 0 => 0.9,
                _ => 0.45,
            })
            .collect()
    }

    /// Per-sample spec used by [`crate::dataset::make_dataset`].
    pub fn for_sample(&self, index: u64) -> PhantomSpec {
        PhantomSpec { seed: sample_seed(self.seed, index), ..self.clone() }
    }
}

/// SplitMix64 mixing of a base seed and a sample index.
pub fn sample_seed(base: u64, index: u64) -> u64 {
    let mut z = base ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Phantom {
    /// Misaligned (acquired) volume.
    pub volume: OctVolume,
    /// Ground truth in the unshifted frame.
    pub truth: SurfaceSet,
    pub injected: DisplacementVector,
    pub drusen: usize,
}

impl Phantom {
    /// Ground truth in the frame of `volume`.
    pub fn acquired_truth(&self) -> SurfaceSet {
        crate::types::apply_displacement_to_surfaces(&self.truth, &self.injected.negated(), None)
            .expect("shapes agree by construction")
    }
}

struct Wave {
    amp: f64,
    fa: f64,
    fb: f64,
    phase: f64,
}

impl Wave {
    fn eval(&self, a: f64, b: f64, na: f64, nb: f64) -> f64 {
        self.amp * (TAU * (self.fa * a / na + self.fb * b / nb) + self.phase).sin()
    }
}

fn smooth_walk(rng: &mut ChaCha8Rng, n: usize, range: f64) -> Vec<f64> {
    if range == 0.0 {
        return vec![0.0; n];
    }
    let mut w = Vec::with_capacity(n);
    let mut acc = 0.0;
    for _ in 0..n {
        let step: f64 = rng.sample(StandardNormal);
        acc += step;
        w.push(acc);
    }
    let mean = w.iter().sum::<f64>() / n as f64;
    for v in &mut w {
        *v -= mean;
    }
    let peak = w.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let target = range * rng.random_range(0.6..=1.0);
    if peak > 0.0 {
        for v in &mut w {
            *v *= target / peak;
        }
    }
    w
}

/// Fraction of pixel `r` (1-based) lying below a boundary at position `s`.
fn below_fraction(r: f64, s: f64) -> f64 {
    (r - s + 1.0).clamp(0.0, 1.0)
}

pub fn generate_phantom(spec: &PhantomSpec) -> Result<Phantom> {
    spec.validate()?;
    let [na, nb, nr] = spec.shape;
    let (naf, nbf, nrf) = (na as f64, nb as f64, nr as f64);
    let k = spec.k;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    // shared undulation: whole lateral cycles, two harmonics
    let [fa, fb] = spec.frequencies;
    let fa = fa.round().max(0.0);
    let shared: Vec<Wave> = (1..=2)
        .map(|h| Wave {
            amp: spec.amplitude / h as f64 * rng.random_range(0.5..=1.0),
            fa: fa * h as f64,
            fb: fb / h as f64,
            phase: rng.random_range(0.0..TAU),
        })
        .collect();
    // per-surface thickness variation
    let own: Vec<Wave> = (0..k)
        .map(|_| Wave {
            amp: spec.jitter * rng.random_range(0.3..=1.0),
            fa: fa.max(1.0) * rng.random_range(1..=2) as f64,
            fb: fb * rng.random_range(0.5..=1.0),
            phase: rng.random_range(0.0..TAU),
        })
        .collect();
    let base: Vec<f64> = (0..k)
        .map(|kk| if k == 1 { 0.5 * nrf } else { nrf * (0.30 + 0.36 * kk as f64 / (k - 1) as f64) })
        .collect();

    let n_drusen = rng.random_range(spec.drusen_count[0]..=spec.drusen_count[1]);
    let bumps: Vec<(f64, f64, f64, f64, f64)> = (0..n_drusen)
        .map(|_| {
            (
                rng.random_range(0.0..naf),
                rng.random_range(0.0..nbf),
                rng.random_range(4.0..=10.0),
                rng.random_range(1.0..=2.5),
                rng.random_range(spec.drusen_amplitude[0]..=spec.drusen_amplitude[1]),
            )
        })
        .collect();
    let drusen_surface = k.saturating_sub(2);

    let names = SurfaceSet::default_names(k);
    let mut truth = SurfaceSet::from_fn(names, nb, na, |kk, b, a| {
        let (af, bf) = (a as f64, b as f64);
        let depth_gain = 1.0 - 0.3 * kk as f64 / k as f64;
        let u: f64 = shared.iter().map(|w| w.eval(af, bf, naf, nbf)).sum::<f64>() * depth_gain;
        base[kk] + u + own[kk].eval(af, bf, naf, nbf)
    })?;
    for b in 0..nb {
        for a in 0..na {
            let lift: f64 = bumps
                .iter()
                .map(|&(a0, b0, sa, sb, amp)| {
                    amp * (-0.5 * (((a as f64 - a0) / sa).powi(2) + ((b as f64 - b0) / sb).powi(2))).exp()
                })
                .sum();
            let v = truth.at(drusen_surface, b, a) - lift;
            truth.set(drusen_surface, b, a, v);
            // keep strict stratification with at least 2 px layers
            for kk in 1..k {
                let floor = truth.at(kk - 1, b, a) + 2.0;
                if truth.at(kk, b, a) < floor {
                    truth.set(kk, b, a, floor);
                }
            }
        }
    }

    let injected = DisplacementVector::new(smooth_walk(&mut rng, nb, spec.shift_range))?;
    let lo = 1.0 + spec.margin;
    let hi = nrf - spec.margin;
    for kk in 0..k {
        for b in 0..nb {
            for a in 0..na {
                let s = truth.at(kk, b, a);
                let shifted = s + injected.values()[b];
                if s < lo || s > hi || shifted < lo || shifted > hi {
                    return Err(OctError::Invalid(format!(
                        "surface {kk} reaches row {:.2} at b={b}, a={a}; allowed [{lo}, {hi}]",
                        if s < lo || s > hi { s } else { shifted }
                    )));
                }
            }
        }
    }

    let volume = render(spec, &truth, &injected)?;
    Ok(Phantom { volume, truth, injected, drusen: n_drusen })
}

/// Renders the acquired volume for surfaces in the unshifted frame moved by
/// `injected` per B-scan: partial-volume layer intensities and
/// multiplicative speckle, clamped to `[0, 1]`.
pub fn render(spec: &PhantomSpec, truth: &SurfaceSet, injected: &DisplacementVector) -> Result<OctVolume> {
    let [na, nb, nr] = spec.shape;
    let k = truth.k();
    if (truth.n_b(), truth.n_a()) != (nb, na) || injected.len() != nb {
        return Err(OctError::Shape("surfaces or displacement do not match the phantom shape".into()));
    }
    let mut means = spec.region_means();
    if means.len() != k + 1 {
        means = PhantomSpec { k, layer_means: Vec::new(), ..spec.clone() }.region_means();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(spec.seed, u64::MAX));
    let noise = spec.noise_sigma;
    let mut data = Vec::with_capacity(na * nb * nr);
    let mut frac = vec![0.0; k];
    for a in 0..na {
        for b in 0..nb {
            let shift = injected.values()[b];
            for r in 0..nr {
                let r1 = (r + 1) as f64;
                for (kk, f) in frac.iter_mut().enumerate() {
                    *f = below_fraction(r1, truth.at(kk, b, a) + shift);
                }
                let mut v = means[0] * (1.0 - frac[0]) + means[k] * frac[k - 1];
                for j in 1..k {
                    v += means[j] * (frac[j - 1] - frac[j]);
                }
                if noise > 0.0 {
                    let z: f64 = rng.sample(StandardNormal);
                    v *= 1.0 + noise * z;
                }
                data.push(v.clamp(0.0, 1.0) as f32);
            }
        }
    }
    OctVolume::new(format!("phantom-{:016x}", spec.seed), na, nb, nr, data, spec.spacing)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn flat_spec() -> PhantomSpec {
        PhantomSpec {
            shape: [4, 3, 20],
            k: 1,
            amplitude: 0.0,
            jitter: 0.0,
            frequencies: [0.0, 0.0],
            drusen_count: [0, 0],
            noise_sigma: 0.0,
            shift_range: 0.0,
            ..PhantomSpec::default()
        }
    }

    #[test]
    fn flat_noiseless_phantom_is_a_sharp_step() {
        let mut spec = flat_spec();
        spec.seed = 3;
        let p = generate_phantom(&spec).unwrap();
        for a in 0..4 {
            for b in 0..3 {
                assert_eq!(p.truth.at(0, b, a), 10.0);
                let col = p.volume.ascan(a, b);
                assert!(col[..9].iter().all(|&v| v == 0.1f32));
                assert!(col[9..].iter().all(|&v| v == 0.25f32));
            }
        }
        assert!(p.injected.values().iter().all(|&d| d == 0.0));
    }

    #[test]
    fn deterministic_given_seed() {
        let spec = PhantomSpec { seed: 42, ..PhantomSpec::default() };
        let a = generate_phantom(&spec).unwrap();
        let b = generate_phantom(&spec).unwrap();
        assert_eq!(a, b);
        let c = generate_phantom(&PhantomSpec { seed: 43, ..spec }).unwrap();
        assert_ne!(a.volume, c.volume);
    }

    #[test]
    fn injected_shift_is_bounded_and_zero_mean() {
        for seed in 0..20 {
            let spec = PhantomSpec { seed, shift_range: 6.0, ..PhantomSpec::default() };
            let p = generate_phantom(&spec).unwrap();
            let d = p.injected.values();
            let mean = d.iter().sum::<f64>() / d.len() as f64;
            assert!(mean.abs() < 1e-6, "mean {mean}");
            assert!(d.iter().all(|v| v.abs() <= 6.0 + 1e-12));
        }
    }

    #[test]
    fn surfaces_are_ordered_and_in_bounds() {
        for seed in 0..10 {
            let spec = PhantomSpec { seed, drusen_count: [2, 4], ..PhantomSpec::default() };
            let p = generate_phantom(&spec).unwrap();
            p.truth.check_ordered().unwrap();
            p.acquired_truth().check_bounds(96).unwrap();
        }
    }

    #[test]
    fn rejects_out_of_range_specs() {
        let spec = PhantomSpec { amplitude: 60.0, ..PhantomSpec::default() };
        assert!(generate_phantom(&spec).is_err());
        let spec = PhantomSpec { shift_range: 24.0, ..PhantomSpec::default() };
        assert!(generate_phantom(&spec).is_err());
        let spec = PhantomSpec { k: 0, ..PhantomSpec::default() };
        assert!(generate_phantom(&spec).is_err());
    }

    #[test]
    fn lateral_mean_depth_is_constant_across_bscans_without_drusen() {
        let spec = PhantomSpec { seed: 5, drusen_count: [0, 0], ..PhantomSpec::default() };
        let p = generate_phantom(&spec).unwrap();
        for k in 0..3 {
            let means: Vec<f64> = (0..12)
                .map(|b| (0..128).map(|a| p.truth.at(k, b, a)).sum::<f64>() / 128.0)
                .collect();
            for m in &means {
                assert!((m - means[0]).abs() < 1e-9, "{means:?}");
            }
        }
    }
}
