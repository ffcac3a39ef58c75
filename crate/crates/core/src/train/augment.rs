//! Per-source training augmentation: gain, channel swap, remixing across
//! scenes and random cropping. The mixture is always re-formed as the sum.

use indexmap::IndexMap;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::synth::Scene;
use crate::error::{Error, Result};
use crate::signal::AudioClip;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub gain: bool,
    pub gain_range: (f32, f32),
    pub swap: bool,
    pub remix: bool,
    /// Crop every source to this many samples (zero-padded if shorter).
    pub crop: Option<usize>,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            gain: true,
            gain_range: (0.25, 1.25),
            swap: true,
            remix: true,
            crop: None,
        }
    }
}

impl AugmentConfig {
    pub fn none() -> Self {
        AugmentConfig {
            gain: false,
            gain_range: (1.0, 1.0),
            swap: false,
            remix: false,
            crop: None,
        }
    }

    pub fn with_crop(mut self, samples: usize) -> Self {
        self.crop = Some(samples);
        self
    }
}

fn crop_or_pad(clip: &AudioClip, start: usize, len: usize) -> Result<AudioClip> {
    if clip.len() >= start + len {
        return clip.crop(start, len);
    }
    let channels = clip
        .channel_data()
        .iter()
        .map(|c| {
            let mut v = c.get(start..).unwrap_or(&[]).to_vec();
            v.resize(len, 0.0);
            v
        })
        .collect();
    AudioClip::new(channels, clip.sample_rate())
}

/// Augments every source of `scene` independently. With `remix`, source
/// `name` is replaced by the same-named source of a scene drawn uniformly
/// from `pool` (when that scene has it).
pub fn augment<R: Rng + ?Sized>(scene: &Scene, pool: &[Scene], cfg: &AugmentConfig, rng: &mut R) -> Result<Scene> {
    if scene.sources.is_empty() {
        return Err(Error::Empty { op: "augment" });
    }
    let mut picked: Vec<(&String, &AudioClip)> = Vec::with_capacity(scene.sources.len());
    for (name, own) in &scene.sources {
        let clip = if cfg.remix && !pool.is_empty() {
            let donor = &pool[rng.random_range(0..pool.len())];
            donor.sources.get(name).unwrap_or(own)
        } else {
            own
        };
        picked.push((name, clip));
    }
    let len = cfg
        .crop
        .unwrap_or_else(|| picked.iter().map(|(_, c)| c.len()).min().unwrap_or(0));
    let mut sources = IndexMap::with_capacity(picked.len());
    for (name, clip) in picked {
        let start = match cfg.crop {
            Some(n) if clip.len() > n => rng.random_range(0..=clip.len() - n),
            _ => 0,
        };
        let mut out = crop_or_pad(clip, start, len)?;
        if cfg.gain {
            let (lo, hi) = cfg.gain_range;
            let g = if hi > lo { rng.random_range(lo..=hi) } else { lo };
            if g != 1.0 {
                out = out.scaled(g);
            }
        }
        if cfg.swap && rng.random_bool(0.5) {
            out.swap_channels();
        }
        sources.insert(name.clone(), out);
    }
    Scene::from_sources(scene.id.clone(), scene.seed, sources)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::train::synth::synth_dataset;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identity_without_augmentation() {
        let scenes = synth_dataset(3, 2, 0.2);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = augment(&scenes[0], &scenes, &AugmentConfig::none(), &mut rng).unwrap();
        assert_eq!(out, scenes[0]);
    }

    #[test]
    fn mixture_is_exact_sum_after_augmentation() {
        let scenes = synth_dataset(3, 3, 0.3);
        let cfg = AugmentConfig::default().with_crop(5000);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..5 {
            let out = augment(&scenes[1], &scenes, &cfg, &mut rng).unwrap();
            assert_eq!(out.len(), 5000);
            assert_eq!(AudioClip::sum(out.sources.values()).unwrap(), out.mixture);
            for g in out.sources.values() {
                assert!(g.channel(0).iter().all(|v| v.is_finite()));
            }
        }
    }

    #[test]
    fn swap_twice_with_same_draw_is_identity() {
        let scenes = synth_dataset(5, 1, 0.2);
        let cfg = AugmentConfig {
            swap: true,
            ..AugmentConfig::none()
        };
        let once = augment(&scenes[0], &[], &cfg, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        assert_ne!(once, scenes[0]);
        let twice = augment(&once, &[], &cfg, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        assert_eq!(twice, scenes[0]);
    }

    #[test]
    fn gains_stay_in_range() {
        let scenes = synth_dataset(2, 1, 0.2);
        let cfg = AugmentConfig {
            gain: true,
            ..AugmentConfig::none()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let out = augment(&scenes[0], &[], &cfg, &mut rng).unwrap();
            for (name, clip) in &out.sources {
                let orig = &scenes[0].sources[name];
                if orig.channel(0).iter().all(|&v| v == 0.0) {
                    continue;
                }
                let (i, _) = orig
                    .channel(0)
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1.abs().total_cmp(&b.1.abs()))
                    .unwrap();
                let g = clip.channel(0)[i] / orig.channel(0)[i];
                assert!((0.25 - 1e-6..=1.25 + 1e-6).contains(&g), "{g}");
            }
        }
    }
}
