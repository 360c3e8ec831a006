//! Procedural pseudo-speech and six synthetic vocoder artifact families.
//!
//! Each family leaves a different kind of trace: spectral holes, amplitude
//! steps, aliasing images, narrow tones, phase damage in one band, and frame
//! discontinuities.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::StandardNormal;
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;

use crate::error::{Error, Result};
use crate::seed;

/// Peak level of generated clean voices.
pub const PEAK: f64 = 0.95;

/// Deterministic pseudo-speech: 3 to 8 harmonics over a drifting fundamental
/// in 80 to 300 Hz, a syllable-rate envelope, and white noise at 25 to 35 dB
/// SNR. Peak-normalized to [`PEAK`].
pub fn synth_clean_voice(seed: u64, length: usize, sample_rate: u32) -> Vec<f64> {
    assert!(length > 0, "length must be positive");
    let mut r = seed::rng(&[seed, 0x0076_6f69_6365]);
    let sr = sample_rate as f64;

    let f0_base = r.random_range(90.0..260.0);
    let drift = r.random_range(0.03..0.12);
    let drift_rate = r.random_range(0.5..2.0);
    let drift_phase = r.random_range(0.0..2.0 * PI);
    let harmonics: usize = r.random_range(3..=8);
    let amps: Vec<(f64, f64)> = (1..=harmonics)
        .map(|k| (r.random_range(0.5..1.0) / k as f64, r.random_range(0.0..2.0 * PI)))
        .collect();
    let syllable_rate = r.random_range(3.0..6.0);
    let syllable_phase = r.random_range(0.0..2.0 * PI);
    let snr_db = r.random_range(25.0..35.0);

    let mut phase = 0.0;
    let mut x: Vec<f64> = (0..length)
        .map(|n| {
            let t = n as f64 / sr;
            let f0 = (f0_base * (1.0 + drift * (2.0 * PI * drift_rate * t + drift_phase).sin())).clamp(80.0, 300.0);
            phase += 2.0 * PI * f0 / sr;
            let voiced: f64 = amps
                .iter()
                .enumerate()
                .map(|(i, &(a, p))| a * ((i + 1) as f64 * phase + p).sin())
                .sum();
            let env = 0.5 * (1.0 - (2.0 * PI * syllable_rate * t + syllable_phase).cos());
            voiced * (0.05 + 0.95 * env.powf(1.5))
        })
        .collect();

    let power = x.iter().map(|v| v * v).sum::<f64>() / length as f64;
    let noise_std = (power / 10f64.powf(snr_db / 10.0)).sqrt();
    for v in &mut x {
        *v += noise_std * r.sample::<f64, _>(StandardNormal);
    }
    normalize_peak(&mut x, PEAK);
    x
}

fn normalize_peak(x: &mut [f64], peak: f64) {
    let m = x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if m > 0.0 {
        let g = peak / m;
        x.iter_mut().for_each(|v| *v *= g);
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum VocoderFamily {
    CombNotch,
    Quantize,
    AliasResample,
    HarmonicHum,
    BandPhaseScramble,
    FrameSmear,
}

impl VocoderFamily {
    pub const ALL: [VocoderFamily; 6] = [
        VocoderFamily::CombNotch,
        VocoderFamily::Quantize,
        VocoderFamily::AliasResample,
        VocoderFamily::HarmonicHum,
        VocoderFamily::BandPhaseScramble,
        VocoderFamily::FrameSmear,
    ];

    pub fn name(self) -> &'static str {
        match self {
            VocoderFamily::CombNotch => "comb_notch",
            VocoderFamily::Quantize => "quantize",
            VocoderFamily::AliasResample => "alias_resample",
            VocoderFamily::HarmonicHum => "harmonic_hum",
            VocoderFamily::BandPhaseScramble => "band_phase_scramble",
            VocoderFamily::FrameSmear => "frame_smear",
        }
    }
}

impl fmt::Display for VocoderFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for VocoderFamily {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Self::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| format!("unknown vocoder family `{s}`"))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SyntheticVocoderSpec {
    pub family: VocoderFamily,
    /// In (0, 1].
    pub strength: f64,
    pub seed: u64,
}

/// Width of one comb band.
const COMB_BAND_HZ: f64 = 250.0;
const HUM_BASE_HZ: f64 = 3150.0;
const SMEAR_FRAME: usize = 256;

/// Applies the artifact family described by `spec`. The output has the same
/// length as the input and is rescaled to [`PEAK`] only if it would clip.
pub fn apply_vocoder_artifact(clean: &[f64], spec: &SyntheticVocoderSpec, sample_rate: u32) -> Result<Vec<f64>> {
    if !(spec.strength > 0.0 && spec.strength <= 1.0) {
        return Err(Error::Validation(format!(
            "strength must be in (0, 1], got {}",
            spec.strength
        )));
    }
    if clean.is_empty() {
        return Err(Error::Validation("empty waveform".into()));
    }
    let s = spec.strength;
    let sr = sample_rate as f64;
    let mut rng = seed::rng(&[spec.seed, spec.family as u64]);
    let mut y = match spec.family {
        VocoderFamily::CombNotch => {
            let k = ((2.0 + (1.0 - s) * 4.0).round() as usize).max(2);
            let width = ((COMB_BAND_HZ * clean.len() as f64 / sr).round() as usize).max(1);
            spectral_edit(clean, |bin, _| {
                if (bin / width) % k == k - 1 {
                    Some(Complex64::new(0.0, 0.0))
                } else {
                    None
                }
            })
        }
        VocoderFamily::Quantize => {
            let levels = 2f64.powf(8.0 * (1.0 - s)).max(2.0);
            clean.iter().map(|&v| quantize_uniform(v, levels)).collect()
        }
        VocoderFamily::AliasResample => {
            let m = 2 + (s * 4.0).round() as usize;
            (0..clean.len()).map(|n| clean[n - n % m]).collect()
        }
        VocoderFamily::HarmonicHum => {
            let amp = 10f64.powf(-30.0 * (1.0 - s) / 20.0);
            let tones: Vec<f64> = [1.0, 2.0].into_iter().filter(|k| k * HUM_BASE_HZ < sr / 2.0).collect();
            let mut hum: Vec<f64> = (0..clean.len())
                .map(|n| {
                    let t = n as f64 / sr;
                    tones.iter().map(|k| (2.0 * PI * HUM_BASE_HZ * k * t).sin() / k).sum()
                })
                .collect();
            normalize_peak(&mut hum, amp);
            clean.iter().zip(&hum).map(|(a, b)| a + b).collect()
        }
        VocoderFamily::BandPhaseScramble => {
            let lo = 300.0;
            let hi = 300.0 + 4000.0 * s;
            let n = clean.len() as f64;
            spectral_edit(clean, |bin, x| {
                let f = bin as f64 * sr / n;
                if (lo..hi).contains(&f) {
                    let phi = rng.random_range(-PI..PI);
                    Some(Complex64::from_polar(x.norm(), phi))
                } else {
                    None
                }
            })
        }
        VocoderFamily::FrameSmear => frame_smear(clean, s, &mut rng),
    };
    if y.iter().any(|v| v.abs() > 1.0) {
        normalize_peak(&mut y, PEAK);
    }
    Ok(y)
}

/// `round(x·levels/2) / (levels/2)`: a uniform mid-tread quantizer with
/// `levels` steps across [-1, 1].
pub fn quantize_uniform(x: f64, levels: f64) -> f64 {
    let h = levels / 2.0;
    (x * h).round() / h
}

/// Edits the one-sided spectrum of a real signal. `edit(bin, value)` returns
/// a replacement for bins strictly between DC and Nyquist; the negative
/// frequencies are mirrored so the result stays real.
fn spectral_edit(x: &[f64], mut edit: impl FnMut(usize, Complex64) -> Option<Complex64>) -> Vec<f64> {
    let n = x.len();
    let mut planner = FftPlanner::<f64>::new();
    let mut buf: Vec<Complex64> = x.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    planner.plan_fft_forward(n).process(&mut buf);
    for bin in 1..n.div_ceil(2) {
        if let Some(v) = edit(bin, buf[bin]) {
            buf[bin] = v;
            buf[n - bin] = v.conj();
        }
    }
    planner.plan_fft_inverse(n).process(&mut buf);
    buf.iter().map(|c| c.re / n as f64).collect()
}

/// Rectangular frames cut at jittered positions and laid down on a fixed
/// half-overlap grid. Unjittered frames reconstruct the input exactly; jitter
/// leaves a discontinuity at every frame edge.
fn frame_smear(x: &[f64], s: f64, rng: &mut impl Rng) -> Vec<f64> {
    let n = SMEAR_FRAME;
    let hop = n / 2;
    let len = x.len();
    let jitter = ((s * n as f64 / 4.0) as i64).max(1);
    let padded_len = len + 2 * n;
    let at = |i: usize| if i >= n && i < n + len { x[i - n] } else { 0.0 };
    let mut y = vec![0.0; padded_len];
    let mut start = 0;
    while start < len + n {
        let offset = rng.random_range(-jitter..=jitter);
        let src = (start as i64 + offset).clamp(0, (len + n) as i64) as usize;
        for k in 0..n {
            if start + k < padded_len {
                y[start + k] += 0.5 * at(src + k);
            }
        }
        start += hop;
    }
    y[n..n + len].to_vec()
}
