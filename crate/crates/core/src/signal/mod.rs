//! Audio clips, WAV I/O and the STFT front end.

pub mod stft;
pub mod wav;

use num_complex::Complex32;

use crate::error::{Error, Result};

pub use stft::{istft, stft, StftConfig, FRAME_SIZE, HOP};
pub use wav::{load_wav, save_wav, WavCodec, WavError};

/// Multichannel audio with equal-length channels, nominally in [−1, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct AudioClip {
    channels: Vec<Vec<f32>>,
    sample_rate: u32,
}

impl AudioClip {
    pub fn new(channels: Vec<Vec<f32>>, sample_rate: u32) -> Result<Self> {
        if channels.is_empty() {
            return Err(Error::invalid("audio clip needs at least one channel"));
        }
        if sample_rate == 0 {
            return Err(Error::invalid("sample rate must be positive"));
        }
        let len = channels[0].len();
        if channels.iter().any(|c| c.len() != len) {
            return Err(Error::invalid("audio channels differ in length"));
        }
        Ok(AudioClip {
            channels,
            sample_rate,
        })
    }

    pub fn silence(channels: usize, len: usize, sample_rate: u32) -> Self {
        AudioClip {
            channels: vec![vec![0.0; len]; channels],
            sample_rate,
        }
    }

    pub fn channels(&self) -> usize {
        self.channels.len()
    }

    /// Samples per channel.
    pub fn len(&self) -> usize {
        self.channels[0].len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        &self.channels[c]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f32] {
        &mut self.channels[c]
    }

    pub fn channel_data(&self) -> &[Vec<f32>] {
        &self.channels
    }

    pub fn into_channels(self) -> Vec<Vec<f32>> {
        self.channels
    }

    /// Samples `start..start + len` of every channel.
    pub fn crop(&self, start: usize, len: usize) -> Result<AudioClip> {
        if start + len > self.len() || len == 0 {
            return Err(Error::invalid(format!(
                "crop [{start}, {}) outside clip of {} samples",
                start + len,
                self.len()
            )));
        }
        Ok(AudioClip {
            channels: self
                .channels
                .iter()
                .map(|c| c[start..start + len].to_vec())
                .collect(),
            sample_rate: self.sample_rate,
        })
    }

    /// Element-wise sum of clips with identical layout.
    pub fn sum<'a>(clips: impl IntoIterator<Item = &'a AudioClip>) -> Result<AudioClip> {
        let mut iter = clips.into_iter();
        let mut acc = iter.next().ok_or(Error::Empty { op: "AudioClip::sum" })?.clone();
        for clip in iter {
            if clip.channels() != acc.channels() || clip.len() != acc.len() {
                return Err(Error::ShapeMismatch {
                    op: "AudioClip::sum",
                    left: vec![acc.channels(), acc.len()],
                    right: vec![clip.channels(), clip.len()],
                });
            }
            for (a, b) in acc.channels.iter_mut().zip(&clip.channels) {
                a.iter_mut().zip(b).for_each(|(a, b)| *a += b);
            }
        }
        Ok(acc)
    }

    pub fn scaled(&self, gain: f32) -> AudioClip {
        AudioClip {
            channels: self
                .channels
                .iter()
                .map(|c| c.iter().map(|x| x * gain).collect())
                .collect(),
            sample_rate: self.sample_rate,
        }
    }

    pub fn swap_channels(&mut self) {
        self.channels.reverse();
    }
}

/// Analysis window tag carried with a spectrogram.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Window {
    Hann,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Framing {
    pub frame_size: usize,
    pub hop: usize,
    pub window: Window,
    pub original_length: usize,
    pub sample_rate: u32,
}

/// Complex STFT, indexed `(channel, frame, bin)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Spectrogram {
    pub(crate) data: Vec<Complex32>,
    pub(crate) channels: usize,
    pub(crate) frames: usize,
    pub(crate) bins: usize,
    pub framing: Framing,
}

impl Spectrogram {
    pub fn new(data: Vec<Complex32>, channels: usize, frames: usize, bins: usize, framing: Framing) -> Result<Self> {
        if data.len() != channels * frames * bins {
            return Err(Error::invalid(format!(
                "spectrogram data has {} values, shape needs {}",
                data.len(),
                channels * frames * bins
            )));
        }
        Ok(Spectrogram {
            data,
            channels,
            frames,
            bins,
            framing,
        })
    }

    pub fn zeros_like(other: &Spectrogram) -> Self {
        Spectrogram {
            data: vec![Complex32::new(0.0, 0.0); other.data.len()],
            ..other.clone()
        }
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.frames, self.bins)
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    pub fn data(&self) -> &[Complex32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [Complex32] {
        &mut self.data
    }

    pub fn at(&self, c: usize, t: usize, f: usize) -> Complex32 {
        self.data[(c * self.frames + t) * self.bins + f]
    }

    pub fn scaled(&self, s: f32) -> Spectrogram {
        Spectrogram {
            data: self.data.iter().map(|z| z * s).collect(),
            ..self.clone()
        }
    }

    /// Element-wise modulus.
    pub fn magnitude(&self) -> MagSpectrogram {
        MagSpectrogram {
            data: self.data.iter().map(|z| z.norm()).collect(),
            channels: self.channels,
            frames: self.frames,
            bins: self.bins,
            framing: self.framing.clone(),
        }
    }
}

/// Non-negative magnitudes with the same indexing as [`Spectrogram`].
#[derive(Clone, Debug, PartialEq)]
pub struct MagSpectrogram {
    pub(crate) data: Vec<f32>,
    pub(crate) channels: usize,
    pub(crate) frames: usize,
    pub(crate) bins: usize,
    pub framing: Framing,
}

impl MagSpectrogram {
    pub fn new(data: Vec<f32>, channels: usize, frames: usize, bins: usize, framing: Framing) -> Result<Self> {
        if data.len() != channels * frames * bins {
            return Err(Error::invalid(format!(
                "magnitude data has {} values, shape needs {}",
                data.len(),
                channels * frames * bins
            )));
        }
        if let Some(i) = data.iter().position(|&v| !(v >= 0.0)) {
            return Err(Error::invalid(format!(
                "magnitude {} at index {i} is negative or NaN",
                data[i]
            )));
        }
        Ok(MagSpectrogram {
            data,
            channels,
            frames,
            bins,
            framing,
        })
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.frames, self.bins)
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn at(&self, c: usize, t: usize, f: usize) -> f32 {
        self.data[(c * self.frames + t) * self.bins + f]
    }
}

pub fn magnitude(spec: &Spectrogram) -> MagSpectrogram {
    spec.magnitude()
}

/// Recombines `mag` with the phase of `phase_source`; bins where the source
/// is exactly zero take phase 0.
pub fn apply_phase(mag: &MagSpectrogram, phase_source: &Spectrogram) -> Result<Spectrogram> {
    if mag.shape() != phase_source.shape() {
        let (a, b, c) = mag.shape();
        let (d, e, f) = phase_source.shape();
        return Err(Error::ShapeMismatch {
            op: "apply_phase",
            left: vec![a, b, c],
            right: vec![d, e, f],
        });
    }
    let data = mag
        .data
        .iter()
        .zip(&phase_source.data)
        .map(|(&m, &z)| {
            let r = z.norm();
            if r > 0.0 {
                z * (m / r)
            } else {
                Complex32::new(m, 0.0)
            }
        })
        .collect();
    Ok(Spectrogram {
        data,
        ..phase_source.clone()
    })
}
