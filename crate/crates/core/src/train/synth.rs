//! Synthetic multitrack scenes and the on-disk dataset convention
//! `<root>/<song>/{mixture,<instrument>}.wav`.

use std::f64::consts::{FRAC_PI_2, PI, TAU};
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use indexmap::IndexMap;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::parallel::map_range;
use crate::signal::{load_wav, save_wav, AudioClip, WavCodec};

pub const SAMPLE_RATE: u32 = 44_100;
const SOURCE_RMS: f64 = 0.08;
const BASS_CUTOFF_HZ: f64 = 500.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Recipe {
    /// Harmonic oscillator bank with vibrato ("vocals-like").
    Tonal,
    /// High-passed decaying noise hits ("drums-like").
    NoiseBurst,
    /// Low notes through a fourth-order low-pass ("bass-like").
    Bass,
    /// Slowly modulated pink noise ("other-like").
    Texture,
}

impl Recipe {
    pub const ALL: [Recipe; 4] = [Recipe::Tonal, Recipe::NoiseBurst, Recipe::Bass, Recipe::Texture];

    pub fn name(self) -> &'static str {
        match self {
            Recipe::Tonal => "tonal",
            Recipe::NoiseBurst => "noise-burst",
            Recipe::Bass => "bass",
            Recipe::Texture => "texture",
        }
    }
}

impl fmt::Display for Recipe {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Recipe {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Recipe::ALL
            .into_iter()
            .find(|r| r.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown source recipe `{s}`")))
    }
}

/// One song: isolated stereo sources and their mixture.
#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub id: String,
    /// Generator seed for synthetic scenes.
    pub seed: Option<u64>,
    pub sources: IndexMap<String, AudioClip>,
    pub mixture: AudioClip,
}

pub type SynthScene = Scene;

impl Scene {
    /// Builds a scene whose mixture is the exact sample-wise sum of `sources`.
    pub fn from_sources(id: impl Into<String>, seed: Option<u64>, sources: IndexMap<String, AudioClip>) -> Result<Self> {
        let mixture = AudioClip::sum(sources.values())?;
        Ok(Scene {
            id: id.into(),
            seed,
            sources,
            mixture,
        })
    }

    pub fn len(&self) -> usize {
        self.mixture.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mixture.is_empty()
    }
}

/// The four default recipes, one stem each.
pub fn synth_dataset(seed: u64, n_scenes: usize, duration: f64) -> Vec<Scene> {
    synth_dataset_with(seed, n_scenes, duration, &Recipe::ALL)
}

pub fn synth_dataset_with(seed: u64, n_scenes: usize, duration: f64, recipes: &[Recipe]) -> Vec<Scene> {
    map_range(n_scenes, |i| synth_scene(seed, i as u64, duration, recipes))
}

/// Scene `index` of the dataset generated from `seed`.
pub fn synth_scene(seed: u64, index: u64, duration: f64, recipes: &[Recipe]) -> Scene {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    let len = (duration * SAMPLE_RATE as f64).round().max(1.0) as usize;
    let mut sources = IndexMap::new();
    for &r in recipes {
        let mut src_rng = ChaCha8Rng::seed_from_u64(rng.next_u64());
        sources.insert(r.name().to_string(), render(r, len, &mut src_rng));
    }
    Scene::from_sources(format!("synth-{seed}-{index:03}"), Some(seed), sources).expect("equal-length stems")
}

fn render(recipe: Recipe, len: usize, rng: &mut ChaCha8Rng) -> AudioClip {
    let sr = SAMPLE_RATE as f64;
    let mut mono = match recipe {
        Recipe::Tonal => tonal(len, sr, rng),
        Recipe::NoiseBurst => noise_bursts(len, sr, rng),
        Recipe::Bass => bass(len, sr, rng),
        Recipe::Texture => texture(len, sr, rng),
    };
    let rms = (mono.iter().map(|v| v * v).sum::<f64>() / len as f64).sqrt();
    let level = SOURCE_RMS * 10f64.powf(rng.random_range(-3.0..3.0) / 20.0);
    let norm = if rms > 0.0 { level / rms } else { 0.0 };
    mono.iter_mut().for_each(|v| *v *= norm);
    let pan = rng.random_range(0.1..0.9) * FRAC_PI_2;
    let (gl, gr) = (pan.cos() * std::f64::consts::SQRT_2, pan.sin() * std::f64::consts::SQRT_2);
    let left = mono.iter().map(|v| (v * gl) as f32).collect();
    let right = mono.iter().map(|v| (v * gr) as f32).collect();
    AudioClip::new(vec![left, right], SAMPLE_RATE).expect("stereo clip")
}

/// Raised-cosine attack and release over `[0, n)`.
fn envelope(i: usize, n: usize, attack: usize, release: usize) -> f64 {
    let rise = if i < attack {
        0.5 - 0.5 * (PI * i as f64 / attack as f64).cos()
    } else {
        1.0
    };
    let left = n - i;
    let fall = if left < release {
        0.5 - 0.5 * (PI * left as f64 / release as f64).cos()
    } else {
        1.0
    };
    rise * fall
}

/// Consecutive notes of random length; calls `note(start, len, rng)`.
fn note_sequence(len: usize, sr: f64, min_s: f64, max_s: f64, rng: &mut ChaCha8Rng, mut note: impl FnMut(usize, usize, &mut ChaCha8Rng)) {
    let mut t = (rng.random_range(0.0..min_s) * sr) as usize;
    while t < len {
        let n = ((rng.random_range(min_s..max_s) * sr) as usize).min(len - t);
        if rng.random_bool(0.85) {
            note(t, n, rng);
        }
        t += n;
    }
}

fn tonal(len: usize, sr: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut out = vec![0.0; len];
    note_sequence(len, sr, 0.15, 0.5, rng, |start, n, rng| {
        let f0 = 110.0 * 2f64.powf(rng.random_range(12..37) as f64 / 12.0);
        let vib_rate = rng.random_range(4.0..6.5);
        let vib_depth = rng.random_range(0.0..0.008);
        let weights: Vec<f64> = (1..=12)
            .take_while(|&h| h as f64 * f0 < 8000.0)
            .map(|h| rng.random_range(0.3..1.0) / h as f64)
            .collect();
        let attack = (0.02 * sr) as usize;
        let release = (0.05 * sr) as usize;
        let mut phase = 0.0;
        for i in 0..n {
            let t = i as f64 / sr;
            let f = f0 * (1.0 + vib_depth * (TAU * vib_rate * t).sin());
            phase += TAU * f / sr;
            let s: f64 = weights
                .iter()
                .enumerate()
                .map(|(h, w)| w * ((h + 1) as f64 * phase).sin())
                .sum();
            out[start + i] += s * envelope(i, n, attack.min(n / 2), release.min(n / 2));
        }
    });
    out
}

fn noise_bursts(len: usize, sr: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut out = vec![0.0; len];
    let mut t = (rng.random_range(0.0..0.1) * sr) as usize;
    while t < len {
        let tau = rng.random_range(0.015..0.07) * sr;
        let cutoff = rng.random_range(400.0..4000.0);
        let amp = rng.random_range(0.4..1.0);
        let a = (-TAU * cutoff / sr).exp();
        let n = ((5.0 * tau) as usize).min(len - t);
        let (mut prev_x, mut prev_y) = (0.0, 0.0);
        for i in 0..n {
            let x: f64 = rng.random_range(-1.0..1.0);
            // one-pole high-pass
            let y = a * (prev_y + x - prev_x);
            prev_x = x;
            prev_y = y;
            let attack = (i as f64 / (0.002 * sr)).min(1.0);
            out[t + i] += amp * y * attack * (-(i as f64) / tau).exp();
        }
        t += (rng.random_range(0.12..0.35) * sr) as usize;
    }
    out
}

#[derive(Clone, Copy)]
struct Biquad {
    b: [f64; 3],
    a: [f64; 2],
    z: [f64; 2],
}

impl Biquad {
    fn lowpass(cutoff: f64, q: f64, sr: f64) -> Self {
        let w = TAU * cutoff / sr;
        let alpha = w.sin() / (2.0 * q);
        let cos = w.cos();
        let a0 = 1.0 + alpha;
        Biquad {
            b: [(1.0 - cos) / 2.0 / a0, (1.0 - cos) / a0, (1.0 - cos) / 2.0 / a0],
            a: [-2.0 * cos / a0, (1.0 - alpha) / a0],
            z: [0.0; 2],
        }
    }

    fn process(&mut self, x: f64) -> f64 {
        let y = self.b[0] * x + self.z[0];
        self.z[0] = self.b[1] * x - self.a[0] * y + self.z[1];
        self.z[1] = self.b[2] * x - self.a[1] * y;
        y
    }
}

fn bass(len: usize, sr: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut out = vec![0.0; len];
    note_sequence(len, sr, 0.25, 0.8, rng, |start, n, rng| {
        let f0 = 41.2 * 2f64.powf(rng.random_range(0..25) as f64 / 12.0);
        let weights: Vec<f64> = (1..=6)
            .take_while(|&h| h as f64 * f0 < 700.0)
            .map(|h| rng.random_range(0.5..1.0) / h as f64)
            .collect();
        let attack = (0.03 * sr) as usize;
        let release = (0.06 * sr) as usize;
        for i in 0..n {
            let ph = TAU * f0 * i as f64 / sr;
            let s: f64 = weights
                .iter()
                .enumerate()
                .map(|(h, w)| w * ((h + 1) as f64 * ph).sin())
                .sum();
            out[start + i] += s * envelope(i, n, attack.min(n / 2), release.min(n / 2));
        }
    });
    // Butterworth fourth order as two second-order sections
    let mut s1 = Biquad::lowpass(BASS_CUTOFF_HZ, 0.541_196_1, sr);
    let mut s2 = Biquad::lowpass(BASS_CUTOFF_HZ, 1.306_563, sr);
    out.iter_mut().for_each(|v| *v = s2.process(s1.process(*v)));
    out
}

fn texture(len: usize, sr: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let rate = rng.random_range(0.2..1.0);
    let phase0 = rng.random_range(0.0..TAU);
    let mut b = [0.0f64; 3];
    (0..len)
        .map(|i| {
            let w: f64 = rng.random_range(-1.0..1.0);
            // Kellet's economy pink filter
            b[0] = 0.99765 * b[0] + w * 0.0990460;
            b[1] = 0.96300 * b[1] + w * 0.2965164;
            b[2] = 0.57000 * b[2] + w * 1.0526913;
            let pink = b[0] + b[1] + b[2] + w * 0.1848;
            let lfo = 0.6 + 0.4 * (TAU * rate * i as f64 / sr + phase0).sin();
            pink * lfo
        })
        .collect()
}

/// Writes `<root>/<scene id>/{mixture,<source>}.wav` as float WAV.
pub fn write_dataset(scenes: &[Scene], root: &Path) -> Result<()> {
    for scene in scenes {
        let dir = root.join(&scene.id);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        save_wav(&scene.mixture, dir.join("mixture.wav"), WavCodec::Float32)?;
        for (name, clip) in &scene.sources {
            save_wav(clip, dir.join(format!("{name}.wav")), WavCodec::Float32)?;
        }
    }
    Ok(())
}

/// Reads every song directory under `root` (sorted by name). Stems listed in
/// `instruments` that are absent are skipped with a warning; the mixture is
/// required.
pub fn load_dataset(root: &Path, instruments: &[String]) -> Result<Vec<Scene>> {
    let entries = fs::read_dir(root).map_err(|e| Error::io(root, e))?;
    let mut dirs: Vec<_> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    dirs.sort();
    let mut scenes = Vec::with_capacity(dirs.len());
    for dir in dirs {
        let id = dir.file_name().unwrap_or_default().to_string_lossy().into_owned();
        let mix_path = dir.join("mixture.wav");
        if !mix_path.exists() {
            log::warn!("{}: no mixture.wav, song skipped", dir.display());
            continue;
        }
        let mixture = load_wav(&mix_path)?;
        let mut sources = IndexMap::new();
        for inst in instruments {
            let p = dir.join(format!("{inst}.wav"));
            if p.exists() {
                sources.insert(inst.clone(), load_wav(&p)?);
            } else {
                log::warn!("{id}: missing stem `{inst}`");
            }
        }
        scenes.push(Scene {
            id,
            seed: None,
            sources,
            mixture,
        });
    }
    if scenes.is_empty() {
        return Err(Error::invalid(format!("{}: no songs found", root.display())));
    }
    Ok(scenes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::signal::stft;

    #[test]
    fn deterministic_and_exact_mixture() {
        let a = synth_dataset(7, 2, 0.5);
        let b = synth_dataset(7, 2, 0.5);
        assert_eq!(a, b);
        assert_ne!(a[0], a[1]);
        for s in &a {
            let sum = AudioClip::sum(s.sources.values()).unwrap();
            assert_eq!(sum, s.mixture);
            assert_eq!(s.sources.len(), 4);
        }
    }

    #[test]
    fn bass_stays_below_two_kilohertz() {
        for seed in 0..3 {
            let s = synth_scene(seed, 0, 2.0, &[Recipe::Bass]);
            let spec = stft(&s.sources["bass"]).unwrap();
            let cut = (2000.0 * spec.framing.frame_size as f64 / SAMPLE_RATE as f64).ceil() as usize;
            let (mut hi, mut total) = (0.0f64, 0.0f64);
            for c in 0..spec.channels() {
                for t in 0..spec.frames() {
                    for f in 0..spec.bins() {
                        let p = spec.at(c, t, f).norm_sqr() as f64;
                        total += p;
                        if f >= cut {
                            hi += p;
                        }
                    }
                }
            }
            assert!(hi / total < 0.01, "seed {seed}: {}", hi / total);
        }
    }

    #[test]
    fn recipes_parse_by_name() {
        for r in Recipe::ALL {
            assert_eq!(r.name().parse::<Recipe>().unwrap(), r);
        }
        assert!("vocals".parse::<Recipe>().is_err());
    }

    #[test]
    fn dataset_round_trips_through_disk() {
        let dir = tempfile::tempdir().unwrap();
        let scenes = synth_dataset(1, 2, 0.2);
        write_dataset(&scenes, dir.path()).unwrap();
        let names: Vec<String> = vec!["tonal".into(), "bass".into(), "vocals".into()];
        let back = load_dataset(dir.path(), &names).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[0].mixture, scenes[0].mixture);
        assert_eq!(back[0].sources.keys().collect::<Vec<_>>(), ["tonal", "bass"]);
    }
}
