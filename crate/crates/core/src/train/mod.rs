//! Per-instrument training on synthetic or user-supplied multitrack scenes.

pub mod augment;
pub mod checkpoint;
pub mod optim;
pub mod synth;

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use augment::{augment, AugmentConfig};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointError};
pub use optim::{mse_loss, rmsprop_step, RmspropState};
pub use synth::{load_dataset, synth_dataset, synth_dataset_with, write_dataset, Recipe, Scene, SynthScene};

use crate::arch::{ArchSpec, Model};
use crate::autodiff::Graph;
use crate::error::{Error, Result};
use crate::layers::Mode;
use crate::parallel::map_range;
use crate::separate::prepare_input;
use crate::signal::{stft, StftConfig};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub instrument: String,
    pub lr_initial: f64,
    pub lr_reduced: f64,
    /// Evaluations without a ≥ `plateau_threshold` relative improvement of
    /// the validation loss before the learning rate drops.
    pub plateau_patience: usize,
    pub plateau_threshold: f64,
    pub batch: usize,
    pub segment_frames: usize,
    pub max_steps: u64,
    pub seed: u64,
    /// Steps between validation evaluations (0 disables them).
    pub eval_every: u64,
    /// Clips in the fixed validation batch.
    pub val_clips: usize,
    /// Steps between checkpoints written to `out_dir` (0: only at the end).
    pub checkpoint_every: u64,
    pub out_dir: Option<PathBuf>,
    pub augment: AugmentConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            instrument: String::new(),
            lr_initial: 1e-3,
            lr_reduced: 1e-4,
            plateau_patience: 5,
            plateau_threshold: 0.01,
            batch: 4,
            segment_frames: 128,
            max_steps: 2000,
            seed: 0,
            eval_every: 100,
            val_clips: 8,
            checkpoint_every: 0,
            out_dir: None,
            augment: AugmentConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: TrainConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, reason: &str| Err(Error::Config(format!("`{field}`: {reason}")));
        if self.instrument.is_empty() {
            return bad("instrument", "must be set");
        }
        if !(self.lr_reduced < self.lr_initial) || self.lr_reduced < 0.0 {
            return bad("lr_reduced", "must be non-negative and below lr_initial");
        }
        if self.segment_frames == 0 || !self.segment_frames.is_multiple_of(8) {
            return bad("segment_frames", "must be a positive multiple of 8");
        }
        if self.batch == 0 {
            return bad("batch", "must be at least 1");
        }
        if self.augment.gain_range.0 > self.augment.gain_range.1 {
            return bad("augment.gain_range", "lower bound exceeds upper bound");
        }
        Ok(())
    }

    /// Samples whose STFT has exactly `segment_frames` frames.
    pub fn segment_samples(&self) -> usize {
        StftConfig::default().samples_for(self.segment_frames)
    }
}

/// Learning-rate schedule: one drop from `lr_initial` to `lr_reduced` once
/// the validation loss stops improving.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlateauState {
    pub lr: f64,
    pub best_val: Option<f64>,
    pub since_best: usize,
    pub reduced: bool,
}

impl PlateauState {
    pub fn new(lr: f64) -> Self {
        PlateauState {
            lr,
            best_val: None,
            since_best: 0,
            reduced: false,
        }
    }

    /// Records one validation loss. Returns true when this call lowered the rate.
    pub fn observe(&mut self, val: f64, cfg: &TrainConfig) -> bool {
        match self.best_val {
            Some(best) if val > best * (1.0 - cfg.plateau_threshold) => self.since_best += 1,
            _ => {
                self.best_val = Some(val);
                self.since_best = 0;
            }
        }
        if !self.reduced && self.since_best >= cfg.plateau_patience {
            self.reduced = true;
            self.lr = cfg.lr_reduced;
            self.since_best = 0;
            return true;
        }
        false
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub step: u64,
    pub lr: f64,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
}

pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut out = String::from("step,lr,train_loss,val_loss\n");
    for r in rows {
        let val = r.val_loss.map(|v| format!("{v:.8e}")).unwrap_or_default();
        writeln!(out, "{},{},{:.8e},{val}", r.step, r.lr, r.train_loss).unwrap();
    }
    out
}

/// `(mixture input, target)` tensors of shape `(n, 2, frames, 1024)`.
pub type Batch = (Tensor<f32>, Tensor<f32>);

fn stack(items: Vec<Tensor<f32>>) -> Result<Tensor<f32>> {
    let first = items.first().ok_or(Error::Empty { op: "stack" })?;
    let mut shape = first.shape().to_vec();
    shape[0] = items.len();
    let mut data = Vec::with_capacity(first.numel() * items.len());
    for t in &items {
        data.extend_from_slice(t.data());
    }
    Tensor::new(shape, data)
}

/// Model input and target for one clip; both crop to exactly `frames`.
pub fn clip_pair(scene: &Scene, instrument: &str, frames: usize) -> Result<Batch> {
    let target = scene
        .sources
        .get(instrument)
        .ok_or_else(|| Error::invalid(format!("scene `{}` has no `{instrument}` stem", scene.id)))?;
    let to_input = |clip| -> Result<Tensor<f32>> {
        let (t, info) = prepare_input(&stft(clip)?.magnitude())?;
        if info.crop != frames || info.padded != frames {
            return Err(Error::invalid(format!(
                "clip of {} frames, expected {frames}",
                info.crop
            )));
        }
        Ok(t)
    };
    Ok((to_input(&scene.mixture)?, to_input(target)?))
}

pub struct Trainer {
    config: TrainConfig,
    model: Model<f32>,
    opt: RmspropState<f32>,
    schedule: PlateauState,
    step: u64,
    metrics: Vec<MetricsRow>,
    train: Vec<Scene>,
    val: Option<Batch>,
}

impl Trainer {
    /// `train` scenes must contain the configured instrument; scenes lacking
    /// it are dropped with a warning. The validation batch is the centre
    /// crop of up to `val_clips` scenes from `val`, or from `train` when
    /// `val` is empty.
    pub fn new(config: TrainConfig, spec: &ArchSpec, train: Vec<Scene>, val: &[Scene]) -> Result<Self> {
        config.validate()?;
        let model = Model::build(spec)?;
        let opt = RmspropState::new(&model, config.lr_initial);
        let schedule = PlateauState::new(config.lr_initial);
        Self::assemble(config, model, opt, schedule, 0, train, val)
    }

    pub fn resume(config: TrainConfig, ckpt: &Checkpoint, train: Vec<Scene>, val: &[Scene]) -> Result<Self> {
        config.validate()?;
        if ckpt.instrument != config.instrument {
            return Err(Error::Config(format!(
                "checkpoint is for `{}`, config trains `{}`",
                ckpt.instrument, config.instrument
            )));
        }
        let model = ckpt.to_model()?;
        let opt = ckpt
            .optimizer
            .clone()
            .ok_or_else(|| Error::invalid("checkpoint has no optimizer state"))?;
        Self::assemble(config, model, opt, ckpt.schedule.clone(), ckpt.step, train, val)
    }

    fn assemble(
        config: TrainConfig,
        model: Model<f32>,
        mut opt: RmspropState<f32>,
        schedule: PlateauState,
        step: u64,
        train: Vec<Scene>,
        val: &[Scene],
    ) -> Result<Self> {
        let inst = config.instrument.clone();
        let seg = config.segment_samples();
        let keep = |s: &Scene| {
            let ok = s.sources.contains_key(&inst);
            if !ok {
                log::warn!("scene `{}` has no `{inst}` stem, skipped", s.id);
            }
            ok
        };
        let train: Vec<Scene> = train.into_iter().filter(keep).collect();
        if train.is_empty() {
            return Err(Error::invalid("training data is empty"));
        }
        let val_src: Vec<&Scene> = if val.is_empty() { train.iter().collect() } else { val.iter().filter(|s| keep(s)).collect() };
        let val = if config.eval_every > 0 && config.val_clips > 0 {
            let clips: Vec<Scene> = val_src
                .iter()
                .take(config.val_clips)
                .map(|s| {
                    let start = s.len().saturating_sub(seg) / 2;
                    let cfg = AugmentConfig::none().with_crop(seg);
                    let mut pinned = (*s).clone();
                    for clip in pinned.sources.values_mut() {
                        *clip = clip.crop(start, seg.min(clip.len() - start))?;
                    }
                    augment(&pinned, &[], &cfg, &mut ChaCha8Rng::seed_from_u64(0))
                })
                .collect::<Result<_>>()?;
            let pairs = clips
                .iter()
                .map(|s| clip_pair(s, &inst, config.segment_frames))
                .collect::<Result<Vec<_>>>()?;
            let (xs, ys): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
            Some((stack(xs)?, stack(ys)?))
        } else {
            None
        };
        opt.lr = schedule.lr;
        Ok(Trainer {
            config,
            model,
            opt,
            schedule,
            step,
            metrics: Vec::new(),
            train,
            val,
        })
    }

    pub fn model(&self) -> &Model<f32> {
        &self.model
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn lr(&self) -> f64 {
        self.opt.lr
    }

    pub fn metrics(&self) -> &[MetricsRow] {
        &self.metrics
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::from_model(
            &self.model,
            &self.config.instrument,
            self.step,
            Some(&self.opt),
            self.schedule.clone(),
        )
    }

    /// The training batch of step `step`: a pure function of the seed, the
    /// step and the training scenes.
    pub fn batch_for_step(&self, step: u64) -> Result<Batch> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(step);
        let draws: Vec<(usize, u64)> = (0..self.config.batch)
            .map(|_| (rng.random_range(0..self.train.len()), rng.random()))
            .collect();
        let cfg = self.config.augment.clone().with_crop(self.config.segment_samples());
        let pairs = map_range(draws.len(), |b| {
            let (idx, seed) = draws[b];
            let mut item_rng = ChaCha8Rng::seed_from_u64(seed);
            let scene = augment(&self.train[idx], &self.train, &cfg, &mut item_rng)?;
            clip_pair(&scene, &self.config.instrument, self.config.segment_frames)
        });
        let (xs, ys): (Vec<_>, Vec<_>) = pairs.into_iter().collect::<Result<Vec<_>>>()?.into_iter().unzip();
        Ok((stack(xs)?, stack(ys)?))
    }

    /// Training-mode loss of a batch without updating anything.
    pub fn loss_on(&self, batch: &Batch) -> Result<f64> {
        let mut g = Graph::no_grad();
        let x = g.constant(batch.0.clone());
        let fwd = self.model.forward(&mut g, x, Mode::Train)?;
        let t = g.constant(batch.1.clone());
        let loss = mse_loss(&mut g, fwd.output, t)?;
        Ok(g.value(loss).item() as f64)
    }

    /// Eval-mode loss on the fixed validation batch.
    pub fn validation_loss(&self) -> Result<Option<f64>> {
        let Some((x, y)) = &self.val else { return Ok(None) };
        let out = self.model.infer(x.clone())?;
        let n = out.numel() as f64;
        let sum: f64 = out
            .data()
            .iter()
            .zip(y.data())
            .map(|(a, b)| (*a as f64 - *b as f64).powi(2))
            .sum();
        Ok(Some(sum / n))
    }

    /// One optimization step. Returns the loss before the update.
    pub fn step(&mut self) -> Result<f64> {
        let (x, y) = self.batch_for_step(self.step)?;
        let mut g = Graph::new();
        let xv = g.constant(x);
        let fwd = self.model.forward(&mut g, xv, Mode::Train)?;
        let yv = g.constant(y);
        let loss_var = mse_loss(&mut g, fwd.output, yv)?;
        let loss = g.value(loss_var).item() as f64;
        if !loss.is_finite() {
            return Err(Error::Diverged {
                step: self.step,
                last_good: Box::new(self.checkpoint()),
            });
        }
        let mut grads = g.backward(loss_var)?;
        let named = fwd.named_grads(&mut grads);
        drop(grads);
        rmsprop_step(self.model.params_mut(), &named, &mut self.opt)?;
        self.model.update_running_stats(&g, &fwd)?;
        let row_step = self.step;
        self.step += 1;

        let mut val_loss = None;
        if self.config.eval_every > 0 && self.step.is_multiple_of(self.config.eval_every) {
            val_loss = self.validation_loss()?;
            if let Some(v) = val_loss {
                if self.schedule.observe(v, &self.config) {
                    log::info!("step {}: validation plateau, lr → {}", self.step, self.schedule.lr);
                }
                self.opt.lr = self.schedule.lr;
                log::info!("step {}: train {loss:.4e} val {v:.4e}", self.step);
            }
        }
        self.metrics.push(MetricsRow {
            step: row_step,
            lr: self.opt.lr,
            train_loss: loss,
            val_loss,
        });
        Ok(loss)
    }

    /// Steps until `max_steps`, writing periodic checkpoints when `out_dir` is set.
    pub fn run(&mut self) -> Result<()> {
        while self.step < self.config.max_steps {
            self.step()?;
            if self.config.checkpoint_every > 0 && self.step.is_multiple_of(self.config.checkpoint_every) {
                self.write_outputs()?;
            }
        }
        self.write_outputs()
    }

    /// `<out_dir>/<instrument>.ckpt` and `<out_dir>/<instrument>.metrics.csv`.
    pub fn write_outputs(&self) -> Result<()> {
        let Some(dir) = &self.config.out_dir else { return Ok(()) };
        let inst = &self.config.instrument;
        save_checkpoint(&self.checkpoint(), dir.join(format!("{inst}.ckpt")))?;
        let path = dir.join(format!("{inst}.metrics.csv"));
        fs::write(&path, metrics_csv(&self.metrics)).map_err(|e| Error::io(&path, e))
    }
}

pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub metrics: Vec<MetricsRow>,
}

pub fn train(config: TrainConfig, spec: &ArchSpec, train: Vec<Scene>, val: &[Scene]) -> Result<TrainOutcome> {
    let mut t = Trainer::new(config, spec, train, val)?;
    t.run()?;
    Ok(TrainOutcome {
        checkpoint: t.checkpoint(),
        metrics: t.metrics,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config() -> TrainConfig {
        TrainConfig {
            instrument: "tonal".into(),
            batch: 1,
            segment_frames: 8,
            max_steps: 2,
            eval_every: 1,
            val_clips: 1,
            ..TrainConfig::default()
        }
    }

    fn tiny_spec() -> ArchSpec {
        ArchSpec::mmdensenet_table1().scaled_widths(0.25)
    }

    #[test]
    fn config_rejects_bad_fields() {
        let mut c = small_config();
        c.segment_frames = 12;
        assert!(c.validate().is_err());
        let mut c = small_config();
        c.lr_reduced = 0.01;
        assert!(c.validate().is_err());
        let c = TrainConfig::from_toml("instrument = \"bass\"\nbatch = 2\n[augment]\nremix = false\n").unwrap();
        assert_eq!(c.batch, 2);
        assert!(!c.augment.remix && c.augment.swap);
        assert!(TrainConfig::from_toml("bogus = 1").is_err());
    }

    #[test]
    fn plateau_drops_once() {
        let cfg = TrainConfig {
            plateau_patience: 2,
            ..small_config()
        };
        let mut p = PlateauState::new(cfg.lr_initial);
        assert!(!p.observe(1.0, &cfg));
        assert!(!p.observe(0.5, &cfg));
        assert!(!p.observe(0.499, &cfg));
        assert!(p.observe(0.498, &cfg));
        assert_eq!(p.lr, cfg.lr_reduced);
        for _ in 0..5 {
            assert!(!p.observe(1.0, &cfg));
        }
        assert_eq!(p.lr, cfg.lr_reduced);
    }

    #[test]
    fn zero_learning_rate_leaves_parameters() {
        let scenes = synth_dataset(0, 2, 0.3);
        let mut t = Trainer::new(small_config(), &tiny_spec(), scenes, &[]).unwrap();
        t.opt.lr = 0.0;
        t.schedule.lr = 0.0;
        let before = t.model().params().clone();
        let loss = t.step().unwrap();
        assert!(loss.is_finite() && loss > 0.0);
        assert_eq!(t.model().params(), &before);
        assert_eq!(t.metrics().len(), 1);
        assert!(t.metrics()[0].val_loss.is_some());
    }

    #[test]
    fn batches_are_deterministic() {
        let scenes = synth_dataset(0, 3, 0.3);
        let t = Trainer::new(small_config(), &tiny_spec(), scenes, &[]).unwrap();
        let a = t.batch_for_step(5).unwrap();
        assert_eq!(a, t.batch_for_step(5).unwrap());
        assert_ne!(a, t.batch_for_step(6).unwrap());
        assert_eq!(a.0.shape(), &[1, 2, 8, 1024]);
    }

    #[test]
    fn metrics_csv_layout() {
        let rows = [
            MetricsRow {
                step: 0,
                lr: 1e-3,
                train_loss: 0.5,
                val_loss: None,
            },
            MetricsRow {
                step: 1,
                lr: 1e-3,
                train_loss: 0.25,
                val_loss: Some(0.3),
            },
        ];
        let csv = metrics_csv(&rows);
        let lines: Vec<_> = csv.lines().collect();
        assert_eq!(lines[0], "step,lr,train_loss,val_loss");
        assert!(lines[1].ends_with(','));
        assert_eq!(lines.len(), 3);
    }
}
