//! Hann-windowed STFT with 50% overlap and its weighted overlap-add inverse.
//!
//! Analysis pads half a frame at each end (reflection where the clip is long
//! enough, zeros beyond) so every sample is covered by two frames. Synthesis
//! windows again and divides by the summed squared window, which makes
//! `istft(stft(x)) == x` up to rounding.

use std::f64::consts::PI;
use std::sync::Arc;

use num_complex::{Complex, Complex32};
use rustfft::{Fft, FftPlanner};

use super::{AudioClip, Framing, Spectrogram, Window};
use crate::error::{Error, Result};
use crate::parallel;

pub const FRAME_SIZE: usize = 2048;
pub const HOP: usize = FRAME_SIZE / 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StftConfig {
    pub frame_size: usize,
}

impl Default for StftConfig {
    fn default() -> Self {
        StftConfig {
            frame_size: FRAME_SIZE,
        }
    }
}

impl StftConfig {
    pub fn hop(&self) -> usize {
        self.frame_size / 2
    }

    pub fn bins(&self) -> usize {
        self.frame_size / 2 + 1
    }

    /// Frames produced for a clip of `len` samples.
    pub fn frames_for(&self, len: usize) -> usize {
        len.div_ceil(self.hop()) + 1
    }

    /// Clip length that yields exactly `frames` frames.
    pub fn samples_for(&self, frames: usize) -> usize {
        (frames.max(2) - 1) * self.hop()
    }
}

/// Periodic Hann window.
pub fn hann(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos())
        .collect()
}

fn reflect(x: &[f32], j: isize) -> f32 {
    let len = x.len() as isize;
    let k = if j < 0 {
        -j
    } else if j >= len {
        2 * (len - 1) - j
    } else {
        j
    };
    if (0..len).contains(&k) {
        x[k as usize]
    } else {
        0.0
    }
}

fn plan(n: usize, inverse: bool) -> Arc<dyn Fft<f64>> {
    let mut planner = FftPlanner::new();
    if inverse {
        planner.plan_fft_inverse(n)
    } else {
        planner.plan_fft_forward(n)
    }
}

pub fn stft(clip: &AudioClip) -> Result<Spectrogram> {
    stft_with(clip, StftConfig::default())
}

pub fn stft_with(clip: &AudioClip, cfg: StftConfig) -> Result<Spectrogram> {
    if clip.is_empty() {
        return Err(Error::Empty { op: "stft" });
    }
    let n = cfg.frame_size;
    if n < 2 || !n.is_multiple_of(2) {
        return Err(Error::invalid(format!("frame size {n} must be even")));
    }
    let hop = cfg.hop();
    let bins = cfg.bins();
    let frames = cfg.frames_for(clip.len());
    let window = hann(n);
    let fft = plan(n, false);
    let half = (n / 2) as isize;
    let channels = clip.channels();
    let rows = parallel::map_range(channels * frames, |row| {
        let (c, t) = (row / frames, row % frames);
        let x = clip.channel(c);
        let start = (t * hop) as isize - half;
        let mut buf: Vec<Complex<f64>> = (0..n)
            .map(|i| Complex::new(reflect(x, start + i as isize) as f64 * window[i], 0.0))
            .collect();
        fft.process(&mut buf);
        buf[..bins]
            .iter()
            .map(|z| Complex32::new(z.re as f32, z.im as f32))
            .collect::<Vec<_>>()
    });
    let data = rows.concat();
    Spectrogram::new(
        data,
        channels,
        frames,
        bins,
        Framing {
            frame_size: n,
            hop,
            window: Window::Hann,
            original_length: clip.len(),
            sample_rate: clip.sample_rate(),
        },
    )
}

pub fn istft(spec: &Spectrogram) -> Result<AudioClip> {
    let f = &spec.framing;
    let n = f.frame_size;
    if n < 2 || f.hop != n / 2 || spec.bins != n / 2 + 1 || f.original_length == 0 {
        return Err(Error::invalid(format!(
            "istft: inconsistent framing (frame {n}, hop {}, bins {}, length {})",
            f.hop, spec.bins, f.original_length
        )));
    }
    let needed = StftConfig { frame_size: n }.frames_for(f.original_length);
    if spec.frames < needed {
        return Err(Error::invalid(format!(
            "istft: {} frames cannot cover {} samples",
            spec.frames, f.original_length
        )));
    }
    let hop = f.hop;
    let window = hann(n);
    let ifft = plan(n, true);
    let padded = (spec.frames - 1) * hop + n;
    let mut norm = vec![0.0f64; padded];
    for t in 0..spec.frames {
        for (i, w) in window.iter().enumerate() {
            norm[t * hop + i] += w * w;
        }
    }
    let channels = parallel::map_range(spec.channels, |c| {
        let mut acc = vec![0.0f64; padded];
        let mut buf = vec![Complex::new(0.0, 0.0); n];
        for t in 0..spec.frames {
            let row = &spec.data[(c * spec.frames + t) * spec.bins..][..spec.bins];
            for k in 0..spec.bins {
                buf[k] = Complex::new(row[k].re as f64, row[k].im as f64);
            }
            // Hermitian completion; DC and Nyquist imaginary parts are dropped
            // by taking the real part after the inverse transform.
            for k in spec.bins..n {
                buf[k] = buf[n - k].conj();
            }
            ifft.process(&mut buf);
            for (i, z) in buf.iter().enumerate() {
                acc[t * hop + i] += z.re / n as f64 * window[i];
            }
        }
        let half = n / 2;
        (0..f.original_length)
            .map(|i| {
                let d = norm[i + half];
                if d > 1e-12 {
                    (acc[i + half] / d) as f32
                } else {
                    0.0
                }
            })
            .collect::<Vec<f32>>()
    });
    AudioClip::new(channels, f.sample_rate)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn noise_clip(seed: u64, channels: usize, len: usize) -> AudioClip {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        AudioClip::new(
            (0..channels)
                .map(|_| (0..len).map(|_| rng.random_range(-0.5..0.5)).collect())
                .collect(),
            44_100,
        )
        .unwrap()
    }

    pub(crate) fn snr_db(reference: &AudioClip, estimate: &AudioClip) -> f64 {
        let mut sig = 0.0;
        let mut err = 0.0;
        for c in 0..reference.channels() {
            for (a, b) in reference.channel(c).iter().zip(estimate.channel(c)) {
                sig += (*a as f64).powi(2);
                err += (*a as f64 - *b as f64).powi(2);
            }
        }
        10.0 * (sig / err.max(1e-300)).log10()
    }

    #[test]
    fn round_trip_snr_exceeds_60_db() {
        for (seed, len) in [(1, 4 * HOP * 2), (2, 10_001), (3, 50_000)] {
            let clip = noise_clip(seed, 2, len);
            let spec = stft(&clip).unwrap();
            assert_eq!(spec.bins(), 1025);
            let back = istft(&spec).unwrap();
            assert_eq!(back.len(), clip.len());
            let snr = snr_db(&clip, &back);
            assert!(snr > 60.0, "len {len}: {snr} dB");
        }
    }

    #[test]
    fn short_clips_round_trip() {
        for len in [1, 7, 600, 1500] {
            let clip = noise_clip(len as u64, 1, len);
            let back = istft(&stft(&clip).unwrap()).unwrap();
            assert!(snr_db(&clip, &back) > 60.0, "len {len}");
        }
    }

    #[test]
    fn zero_in_zero_out() {
        let clip = AudioClip::silence(2, 5000, 44_100);
        let spec = stft(&clip).unwrap();
        assert!(spec.data().iter().all(|z| z.norm() == 0.0));
        let back = istft(&spec).unwrap();
        assert!(back.channel(0).iter().all(|&x| x == 0.0));
    }

    #[test]
    fn impulse_at_window_center_is_flat() {
        let mut x = vec![0.0f32; FRAME_SIZE];
        x[FRAME_SIZE / 2] = 1.0;
        let clip = AudioClip::new(vec![x], 44_100).unwrap();
        let spec = stft(&clip).unwrap();
        // Frame 1 starts at sample 0 once the half-frame pad is accounted for.
        let center = hann(FRAME_SIZE)[FRAME_SIZE / 2];
        for f in 0..spec.bins() {
            assert!((spec.at(0, 1, f).norm() as f64 - center).abs() < 1e-6);
        }
    }

    #[test]
    fn bin_centred_sinusoid_peaks_with_low_leakage() {
        let sr = 44_100.0;
        let freq = 43.0 * sr / FRAME_SIZE as f64;
        let x: Vec<f32> = (0..20 * HOP)
            .map(|i| (2.0 * PI * freq * i as f64 / sr).sin() as f32)
            .collect();
        let spec = stft(&AudioClip::new(vec![x], 44_100).unwrap()).unwrap();
        for t in 2..spec.frames() - 2 {
            let peak = spec.at(0, t, 43).norm();
            let argmax = (0..spec.bins())
                .max_by(|&a, &b| spec.at(0, t, a).norm().total_cmp(&spec.at(0, t, b).norm()))
                .unwrap();
            assert_eq!(argmax, 43);
            for f in (0..spec.bins()).filter(|f| f.abs_diff(43) >= 3) {
                let ratio_db = 20.0 * (peak / spec.at(0, t, f).norm().max(1e-30)).log10();
                assert!(ratio_db >= 20.0, "frame {t} bin {f}: {ratio_db} dB");
            }
        }
    }

    #[test]
    fn linear_and_scales() {
        let a = noise_clip(5, 1, 9000);
        let b = noise_clip(6, 1, 9000);
        let sum = AudioClip::new(
            vec![a.channel(0).iter().zip(b.channel(0)).map(|(x, y)| 0.3 * x - 1.7 * y).collect()],
            44_100,
        )
        .unwrap();
        let (sa, sb, ss) = (stft(&a).unwrap(), stft(&b).unwrap(), stft(&sum).unwrap());
        let mut num = 0.0f64;
        let mut den = 0.0f64;
        for i in 0..ss.data().len() {
            let want = sa.data()[i] * 0.3 - sb.data()[i] * 1.7;
            num += (ss.data()[i] - want).norm_sqr() as f64;
            den += want.norm_sqr() as f64;
        }
        assert!((num / den).sqrt() < 1e-5);

        let back = istft(&sa.scaled(2.5)).unwrap();
        for (x, y) in a.channel(0).iter().zip(back.channel(0)) {
            assert!((2.5 * x - y).abs() < 1e-5);
        }
    }

    #[test]
    fn parseval_on_stationary_noise() {
        let clip = noise_clip(7, 1, 200 * HOP);
        let spec = stft(&clip).unwrap();
        let w = hann(FRAME_SIZE);
        let x = clip.channel(0);
        let (mut spec_e, mut sig_e) = (0.0f64, 0.0f64);
        for t in 1..spec.frames() - 1 {
            for f in 0..spec.bins() {
                let weight = if f == 0 || f == spec.bins() - 1 { 1.0 } else { 2.0 };
                spec_e += weight * spec.at(0, t, f).norm_sqr() as f64;
            }
            let start = t * HOP - HOP;
            sig_e += (0..FRAME_SIZE)
                .map(|i| (x[start + i] as f64 * w[i]).powi(2))
                .sum::<f64>();
        }
        spec_e /= FRAME_SIZE as f64;
        assert!((spec_e / sig_e - 1.0).abs() < 0.01, "{spec_e} vs {sig_e}");
    }

    #[test]
    fn inconsistent_framing_is_rejected() {
        let clip = noise_clip(8, 1, 5000);
        let mut spec = stft(&clip).unwrap();
        spec.framing.hop = 512;
        assert!(istft(&spec).is_err());
        assert!(stft(&AudioClip::silence(1, 0, 44_100)).is_err());
    }
}
