//! Inference: model input preparation, segmented per-instrument estimation,
//! and reconstruction by soft masking or a multichannel Wiener filter.

use std::path::{Path, PathBuf};

use indexmap::IndexMap;
use num_complex::{Complex32, Complex64};

use crate::arch::{receptive_field, Model};
use crate::error::{Error, Result};
use crate::parallel;
use crate::signal::{istft, load_wav, save_wav, stft, AudioClip, MagSpectrogram, Spectrogram, WavCodec};
use crate::tensor::Tensor;

/// Bins the network consumes; the Nyquist bin is split off.
pub const MODEL_BINS: usize = 1024;
pub const SEGMENT_FRAMES: usize = 256;
pub const SEGMENT_OVERLAP: usize = 32;
pub const MASK_EPSILON: f32 = 1e-10;
pub const DEFAULT_MASK_EXPONENT: f32 = 2.0;
const POWER_EPSILON: f64 = 1e-10;
const DELTA_SCALE: f64 = 1e-8;

/// Factor applied to STFT magnitudes before they enter a model.
pub fn magnitude_scale() -> f32 {
    1.0
}

pub type ModelSet = IndexMap<String, Model<f32>>;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PadInfo {
    /// Frames before padding.
    pub crop: usize,
    pub padded: usize,
    /// Bins of the source spectrogram.
    pub bins: usize,
}

/// `(1, channels, frames padded to a multiple of 8, 1024)`, scaled by
/// [`magnitude_scale`].
pub fn prepare_input(mag: &MagSpectrogram) -> Result<(Tensor<f32>, PadInfo)> {
    prepare_input_to(mag, 8)
}

pub fn prepare_input_to(mag: &MagSpectrogram, multiple: usize) -> Result<(Tensor<f32>, PadInfo)> {
    let (c, t, f) = mag.shape();
    if t == 0 {
        return Err(Error::Empty { op: "prepare_input" });
    }
    if f < MODEL_BINS {
        return Err(Error::invalid(format!("prepare_input: {f} bins, need at least {MODEL_BINS}")));
    }
    let padded = t.div_ceil(multiple) * multiple;
    let scale = magnitude_scale();
    let mut data = vec![0.0f32; c * padded * MODEL_BINS];
    for ch in 0..c {
        for fr in 0..t {
            let src = &mag.data()[(ch * t + fr) * f..][..MODEL_BINS];
            let dst = &mut data[(ch * padded + fr) * MODEL_BINS..][..MODEL_BINS];
            dst.iter_mut().zip(src).for_each(|(d, s)| *d = s * scale);
        }
    }
    Ok((
        Tensor::new(vec![1, c, padded, MODEL_BINS], data)?,
        PadInfo {
            crop: t,
            padded,
            bins: f,
        },
    ))
}

/// Inverse of [`prepare_input`]: crops frames, undoes the scaling and fills
/// the bins above 1023 by repeating bin 1023.
pub fn restore_output(out: &Tensor<f32>, info: PadInfo, like: &MagSpectrogram) -> Result<MagSpectrogram> {
    let (n, c, padded, bins) = out.dims4()?;
    if n != 1 || padded != info.padded || bins != MODEL_BINS || c != like.channels() {
        return Err(Error::ShapeMismatch {
            op: "restore_output",
            left: vec![1, like.channels(), info.padded, MODEL_BINS],
            right: out.shape().to_vec(),
        });
    }
    let inv = 1.0 / magnitude_scale();
    let mut data = Vec::with_capacity(c * info.crop * info.bins);
    for ch in 0..c {
        for fr in 0..info.crop {
            let row = &out.data()[(ch * padded + fr) * MODEL_BINS..][..MODEL_BINS];
            data.extend(row.iter().map(|v| v * inv));
            let edge = row[MODEL_BINS - 1] * inv;
            data.extend(std::iter::repeat_n(edge, info.bins - MODEL_BINS));
        }
    }
    MagSpectrogram::new(data, c, info.crop, info.bins, like.framing.clone())
}

#[derive(Clone, Debug, PartialEq)]
pub struct SourceEstimateSet {
    estimates: IndexMap<String, MagSpectrogram>,
}

impl SourceEstimateSet {
    pub fn new(estimates: IndexMap<String, MagSpectrogram>) -> Result<Self> {
        let mut it = estimates.values();
        let first = it.next().ok_or(Error::Empty { op: "SourceEstimateSet" })?;
        for e in it {
            if e.shape() != first.shape() {
                let (a, b, c) = first.shape();
                let (d, f, g) = e.shape();
                return Err(Error::ShapeMismatch {
                    op: "SourceEstimateSet",
                    left: vec![a, b, c],
                    right: vec![d, f, g],
                });
            }
        }
        Ok(SourceEstimateSet { estimates })
    }

    pub fn get(&self, instrument: &str) -> Option<&MagSpectrogram> {
        self.estimates.get(instrument)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &MagSpectrogram)> {
        self.estimates.iter()
    }

    pub fn len(&self) -> usize {
        self.estimates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.estimates.is_empty()
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        self.estimates[0].shape()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SegmentOptions {
    pub frames: usize,
    pub overlap: usize,
}

impl Default for SegmentOptions {
    fn default() -> Self {
        SegmentOptions {
            frames: SEGMENT_FRAMES,
            overlap: SEGMENT_OVERLAP,
        }
    }
}

impl SegmentOptions {
    /// Whole clip in one pass.
    pub fn single_pass() -> Self {
        SegmentOptions {
            frames: usize::MAX,
            overlap: 0,
        }
    }
}

/// Segment starts covering `total` frames.
fn segment_starts(total: usize, seg: usize, hop: usize) -> Vec<usize> {
    let mut starts = vec![0];
    while starts.last().unwrap() + seg < total {
        let next = (starts.last().unwrap() + hop).min(total - seg);
        starts.push(next);
    }
    starts
}

/// Runs `model` over `x` (`(1, c, frames, bins)`) in overlapping segments.
/// Each segment is evaluated with extra context on both sides, wide enough
/// to cover the receptive field, so its kept frames match a single pass;
/// neighbouring segments are blended with linear ramps over their overlap.
pub fn run_segmented(model: &Model<f32>, x: &Tensor<f32>, opts: SegmentOptions) -> Result<Tensor<f32>> {
    let (n, c, total, bins) = x.dims4()?;
    let spec = model.spec();
    let div = spec.divisor();
    if opts.frames == usize::MAX || total <= opts.frames {
        return model.infer(x.clone());
    }
    if !opts.frames.is_multiple_of(div) || !opts.overlap.is_multiple_of(div) || opts.overlap >= opts.frames || total % div != 0 {
        return Err(Error::invalid(format!(
            "segments of {} frames with overlap {} over {total} frames must all be multiples of {div}",
            opts.frames, opts.overlap
        )));
    }
    let margin = receptive_field(spec).frame_radius.div_ceil(div) * div;
    let seg = opts.frames;
    let starts = segment_starts(total, seg, seg - opts.overlap);
    let out_c = spec.io_channels;
    let mut acc = vec![0.0f64; n * out_c * total * bins];
    let mut wsum = vec![0.0f64; total];
    for (i, &s) in starts.iter().enumerate() {
        let lo = s.saturating_sub(margin);
        let hi = (s + seg + margin).min(total);
        let mut win = vec![0.0f32; n * c * (hi - lo) * bins];
        for b in 0..n * c {
            let src = &x.data()[(b * total + lo) * bins..(b * total + hi) * bins];
            win[b * (hi - lo) * bins..(b + 1) * (hi - lo) * bins].copy_from_slice(src);
        }
        let y = model.infer(Tensor::new(vec![n, c, hi - lo, bins], win)?)?;
        let rise = if i > 0 { starts[i - 1] + seg - s } else { 0 };
        let fall = starts.get(i + 1).map_or(0, |&nx| s + seg - nx);
        for t in s..s + seg {
            let k = t - s;
            let mut w = 1.0f64;
            if k < rise {
                w = w.min((k as f64 + 0.5) / rise as f64);
            }
            if seg - k <= fall {
                w = w.min(((seg - k) as f64 - 0.5) / fall as f64);
            }
            wsum[t] += w;
            for b in 0..n * out_c {
                let src = &y.data()[(b * (hi - lo) + t - lo) * bins..][..bins];
                let dst = &mut acc[(b * total + t) * bins..][..bins];
                dst.iter_mut().zip(src).for_each(|(d, &v)| *d += w * v as f64);
            }
        }
    }
    let mut out = vec![0.0f32; acc.len()];
    for b in 0..n * out_c {
        for t in 0..total {
            let w = wsum[t];
            let base = (b * total + t) * bins;
            for f in 0..bins {
                out[base + f] = (acc[base + f] / w) as f32;
            }
        }
    }
    Tensor::new(vec![n, out_c, total, bins], out)
}

fn check_fingerprints(models: &ModelSet, expected: &str) -> Result<()> {
    for (name, m) in models {
        if m.fingerprint() != expected {
            return Err(Error::FingerprintMismatch {
                instrument: name.clone(),
                expected: expected.into(),
                found: m.fingerprint().into(),
            });
        }
    }
    Ok(())
}

pub fn estimate_sources(mix: &MagSpectrogram, models: &ModelSet, expected_fingerprint: &str) -> Result<SourceEstimateSet> {
    estimate_sources_with(mix, models, expected_fingerprint, SegmentOptions::default())
}

/// Eval-mode forward of every instrument model on the mixture magnitude.
pub fn estimate_sources_with(
    mix: &MagSpectrogram,
    models: &ModelSet,
    expected_fingerprint: &str,
    opts: SegmentOptions,
) -> Result<SourceEstimateSet> {
    if models.is_empty() {
        return Err(Error::Empty { op: "estimate_sources" });
    }
    check_fingerprints(models, expected_fingerprint)?;
    let div = models[0].spec().divisor();
    let (x, info) = prepare_input_to(mix, div.max(8))?;
    let names: Vec<&String> = models.keys().collect();
    let outs = parallel::map_range(models.len(), |i| {
        let y = run_segmented(&models[i], &x, opts)?;
        restore_output(&y, info, mix)
    });
    let mut estimates = IndexMap::new();
    for (name, out) in names.into_iter().zip(outs) {
        estimates.insert(name.clone(), out?);
    }
    SourceEstimateSet::new(estimates)
}

fn check_mix(est: &SourceEstimateSet, mix: &Spectrogram, op: &'static str) -> Result<()> {
    if est.is_empty() {
        return Err(Error::Empty { op });
    }
    if est.shape() != mix.shape() {
        let (a, b, c) = est.shape();
        let (d, e, f) = mix.shape();
        return Err(Error::ShapeMismatch {
            op,
            left: vec![a, b, c],
            right: vec![d, e, f],
        });
    }
    Ok(())
}

/// Ratio masks `est_i^p / (Σ_j est_j^p + ε)` applied to the complex mixture.
pub fn soft_mask(est: &SourceEstimateSet, mix: &Spectrogram, exponent: f32) -> Result<IndexMap<String, Spectrogram>> {
    check_mix(est, mix, "soft_mask")?;
    let n = mix.data().len();
    let powered: Vec<Vec<f32>> = est
        .iter()
        .map(|(_, e)| e.data().iter().map(|v| v.powf(exponent)).collect())
        .collect();
    let mut denom = vec![MASK_EPSILON; n];
    for p in &powered {
        denom.iter_mut().zip(p).for_each(|(d, v)| *d += v);
    }
    Ok(est
        .iter()
        .zip(&powered)
        .map(|((name, _), p)| {
            let data = mix
                .data()
                .iter()
                .zip(p)
                .zip(&denom)
                .map(|((z, v), d)| z * (v / d))
                .collect();
            (
                name.clone(),
                Spectrogram {
                    data,
                    ..mix.clone()
                },
            )
        })
        .collect())
}

/// 2×2 complex Hermitian matrix in row-major order.
pub type Mat2 = [Complex64; 4];

fn outer(x: [Complex64; 2]) -> Mat2 {
    [
        x[0] * x[0].conj(),
        x[0] * x[1].conj(),
        x[1] * x[0].conj(),
        x[1] * x[1].conj(),
    ]
}

fn trace(m: &Mat2) -> f64 {
    m[0].re + m[3].re
}

fn mat_vec(m: &Mat2, x: [Complex64; 2]) -> [Complex64; 2] {
    [m[0] * x[0] + m[1] * x[1], m[2] * x[0] + m[3] * x[1]]
}

fn inv2(m: &Mat2) -> Mat2 {
    let det = m[0] * m[3] - m[1] * m[2];
    let inv = 1.0 / det;
    [m[3] * inv, -m[1] * inv, -m[2] * inv, m[0] * inv]
}

/// Eigenvalues of a Hermitian 2×2 matrix, ascending.
pub fn hermitian_eigenvalues(m: &Mat2) -> (f64, f64) {
    let mean = 0.5 * (m[0].re + m[3].re);
    let half = 0.5 * (m[0].re - m[3].re);
    let r = (half * half + m[1].norm_sqr()).sqrt();
    (mean - r, mean + r)
}

/// Per-instrument spatial model: `r[f]` is the trace-2 spatial covariance of
/// bin `f`, `v[t * bins + f]` the channel-mean power.
#[derive(Clone, Debug)]
pub struct SpatialCovariance {
    pub r: Vec<Mat2>,
    pub v: Vec<f64>,
}

impl SpatialCovariance {
    /// Largest deviation from Hermitian symmetry and smallest eigenvalue
    /// relative to the trace, over all bins.
    pub fn hermitian_psd_report(&self) -> (f64, f64) {
        let mut asym: f64 = 0.0;
        let mut min_eig = f64::INFINITY;
        for m in &self.r {
            let scale = trace(m).abs().max(1e-300);
            asym = asym
                .max((m[1] - m[2].conj()).norm() / scale)
                .max(m[0].im.abs() / scale)
                .max(m[3].im.abs() / scale);
            min_eig = min_eig.min(hermitian_eigenvalues(m).0 / scale);
        }
        (asym, min_eig)
    }
}

fn stereo(mix: &Spectrogram, t: usize, f: usize) -> [Complex64; 2] {
    let a = mix.at(0, t, f);
    let b = mix.at(1, t, f);
    [
        Complex64::new(a.re as f64, a.im as f64),
        Complex64::new(b.re as f64, b.im as f64),
    ]
}

/// Weighted covariance `Σ_t w(t) y(t) y(t)ᴴ`, scaled to trace 2 (identity
/// when the bin carries no energy).
fn normalized_covariance(frames: usize, mut weighted: impl FnMut(usize) -> Mat2) -> Mat2 {
    let mut acc = [Complex64::new(0.0, 0.0); 4];
    for t in 0..frames {
        let m = weighted(t);
        for k in 0..4 {
            acc[k] += m[k];
        }
    }
    let tr = trace(&acc);
    if !(tr > 1e-300) {
        let one = Complex64::new(1.0, 0.0);
        let zero = Complex64::new(0.0, 0.0);
        return [one, zero, zero, one];
    }
    let s = 2.0 / tr;
    // Exact Hermitian symmetry despite rounding in the sums.
    let off = 0.5 * (acc[1] + acc[2].conj()) * s;
    [
        Complex64::new(acc[0].re * s, 0.0),
        off,
        off.conj(),
        Complex64::new(acc[3].re * s, 0.0),
    ]
}

/// Initial spatial models from the network estimates: `v_i` is the
/// channel-mean of `est_i²`, `R_i(f)` the mixture covariance weighted by
/// `v_i / Σ_j v_j`.
pub fn spatial_covariances(est: &SourceEstimateSet, mix: &Spectrogram) -> Result<Vec<SpatialCovariance>> {
    check_mix(est, mix, "mwf")?;
    if mix.channels() != 2 {
        return Err(Error::invalid(format!("mwf needs a stereo mixture, got {} channels", mix.channels())));
    }
    let (_, frames, bins) = mix.shape();
    let vs: Vec<Vec<f64>> = est
        .iter()
        .map(|(_, e)| {
            (0..frames * bins)
                .map(|i| {
                    let (t, f) = (i / bins, i % bins);
                    let a = e.at(0, t, f) as f64;
                    let b = e.at(1, t, f) as f64;
                    0.5 * (a * a + b * b) + POWER_EPSILON
                })
                .collect()
        })
        .collect();
    let total: Vec<f64> = (0..frames * bins).map(|i| vs.iter().map(|v| v[i]).sum()).collect();
    Ok(vs
        .into_iter()
        .map(|v| {
            let r = parallel::map_range(bins, |f| {
                normalized_covariance(frames, |t| {
                    let w = v[t * bins + f] / total[t * bins + f];
                    outer(stereo(mix, t, f)).map(|z| z * w)
                })
            });
            SpatialCovariance { r, v }
        })
        .collect())
}

/// Wiener estimates `v_i R_i (Σ_j v_j R_j + δI)⁻¹ x` for every instrument.
fn wiener_pass(models: &[SpatialCovariance], mix: &Spectrogram) -> Vec<Vec<[Complex64; 2]>> {
    let (_, frames, bins) = mix.shape();
    let per_bin = parallel::map_range(bins, |f| {
        let mut out = vec![vec![[Complex64::new(0.0, 0.0); 2]; frames]; models.len()];
        for t in 0..frames {
            let i = t * bins + f;
            let mut c = [Complex64::new(0.0, 0.0); 4];
            for m in models {
                for k in 0..4 {
                    c[k] += m.r[f][k] * m.v[i];
                }
            }
            let delta = DELTA_SCALE * (0.5 * trace(&c)).max(1e-30);
            c[0] += delta;
            c[3] += delta;
            let y = mat_vec(&inv2(&c), stereo(mix, t, f));
            for (s, m) in models.iter().enumerate() {
                let g = mat_vec(&m.r[f], y);
                out[s][t] = [g[0] * m.v[i], g[1] * m.v[i]];
            }
        }
        out
    });
    (0..models.len())
        .map(|s| {
            let mut v = vec![[Complex64::new(0.0, 0.0); 2]; frames * bins];
            for (f, bin) in per_bin.iter().enumerate() {
                for t in 0..frames {
                    v[t * bins + f] = bin[s][t];
                }
            }
            v
        })
        .collect()
}

/// Multichannel Wiener filter. `iterations` counts filtering passes: 1 is
/// the plain filter; each further pass re-estimates `v_i` and `R_i` from
/// the previous source images.
pub fn mwf(est: &SourceEstimateSet, mix: &Spectrogram, iterations: usize) -> Result<IndexMap<String, Spectrogram>> {
    let mut models = spatial_covariances(est, mix)?;
    let (_, frames, bins) = mix.shape();
    let mut images = wiener_pass(&models, mix);
    for _ in 1..iterations.max(1) {
        for (m, img) in models.iter_mut().zip(&images) {
            m.v = img
                .iter()
                .map(|s| 0.5 * (s[0].norm_sqr() + s[1].norm_sqr()) + POWER_EPSILON)
                .collect();
            m.r = parallel::map_range(bins, |f| normalized_covariance(frames, |t| outer(img[t * bins + f])));
        }
        images = wiener_pass(&models, mix);
    }
    Ok(est
        .iter()
        .zip(images)
        .map(|((name, _), img)| {
            let mut data = vec![Complex32::new(0.0, 0.0); 2 * frames * bins];
            for (i, s) in img.iter().enumerate() {
                data[i] = Complex32::new(s[0].re as f32, s[0].im as f32);
                data[frames * bins + i] = Complex32::new(s[1].re as f32, s[1].im as f32);
            }
            (
                name.clone(),
                Spectrogram {
                    data,
                    ..mix.clone()
                },
            )
        })
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Method {
    Mask,
    Mwf,
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mask" => Ok(Method::Mask),
            "mwf" => Ok(Method::Mwf),
            other => Err(Error::Config(format!("unknown method `{other}` (mask|mwf)"))),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct SeparateOptions {
    pub method: Method,
    pub mask_exponent: f32,
    pub mwf_iterations: usize,
    pub segments: SegmentOptions,
}

impl Default for SeparateOptions {
    fn default() -> Self {
        SeparateOptions {
            method: Method::Mwf,
            mask_exponent: DEFAULT_MASK_EXPONENT,
            mwf_iterations: 1,
            segments: SegmentOptions::default(),
        }
    }
}

/// STFT → estimates → mask or MWF → iSTFT, one clip per instrument with the
/// mixture's length.
pub fn separate_clip(
    mix: &AudioClip,
    models: &ModelSet,
    expected_fingerprint: &str,
    opts: &SeparateOptions,
) -> Result<IndexMap<String, AudioClip>> {
    let spec = stft(mix)?;
    let est = estimate_sources_with(&spec.magnitude(), models, expected_fingerprint, opts.segments)?;
    let images = match opts.method {
        Method::Mask => soft_mask(&est, &spec, opts.mask_exponent)?,
        Method::Mwf => mwf(&est, &spec, opts.mwf_iterations)?,
    };
    images
        .into_iter()
        .map(|(name, s)| Ok((name, istft(&s)?)))
        .collect()
}

/// Writes `<out_dir>/<instrument>.wav` for every model.
pub fn separate_file(
    in_path: &Path,
    models: &ModelSet,
    expected_fingerprint: &str,
    opts: &SeparateOptions,
    out_dir: &Path,
) -> Result<Vec<PathBuf>> {
    let mix = load_wav(in_path)?;
    let clips = separate_clip(&mix, models, expected_fingerprint, opts)?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut written = Vec::new();
    for (name, clip) in clips {
        let path = out_dir.join(format!("{name}.wav"));
        save_wav(&clip, &path, WavCodec::Float32)?;
        written.push(path);
    }
    Ok(written)
}
