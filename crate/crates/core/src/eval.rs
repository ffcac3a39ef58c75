//! SI-SDR, a filtered-projection SDR and dataset evaluation.

use std::fmt::{self, Write as _};

use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::parallel::map_range;
use crate::separate::{separate_clip, ModelSet, SeparateOptions};
use crate::signal::AudioClip;
use crate::train::Scene;

pub const DB_CAP: f64 = 100.0;
pub const DEFAULT_TAPS: usize = 32;
const RIDGE: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Metric {
    Sdr,
    SiSdr,
}

impl Metric {
    pub fn as_str(self) -> &'static str {
        match self {
            Metric::Sdr => "SDR",
            Metric::SiSdr => "SI-SDR",
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ChannelScores {
    pub per_channel: Vec<f64>,
    pub mean: f64,
}

fn ratio_db(signal: f64, noise: f64) -> f64 {
    if noise <= 0.0 {
        return DB_CAP;
    }
    if signal <= 0.0 {
        return -DB_CAP;
    }
    (10.0 * (signal / noise).log10()).clamp(-DB_CAP, DB_CAP)
}

fn check_pair(estimate: &AudioClip, reference: &AudioClip, op: &'static str) -> Result<()> {
    if estimate.channels() != reference.channels() || estimate.len() != reference.len() {
        return Err(Error::ShapeMismatch {
            op,
            left: vec![estimate.channels(), estimate.len()],
            right: vec![reference.channels(), reference.len()],
        });
    }
    for c in 0..reference.channels() {
        if reference.channel(c).iter().all(|&v| v == 0.0) {
            return Err(Error::invalid(format!("{op}: reference channel {c} is all zeros")));
        }
    }
    Ok(())
}

fn scores(per_channel: Vec<f64>) -> ChannelScores {
    let mean = per_channel.iter().sum::<f64>() / per_channel.len() as f64;
    ChannelScores { per_channel, mean }
}

fn si_sdr_channel(e: &[f32], r: &[f32]) -> f64 {
    let (mut er, mut rr) = (0.0f64, 0.0f64);
    for (&a, &b) in e.iter().zip(r) {
        er += a as f64 * b as f64;
        rr += b as f64 * b as f64;
    }
    let alpha = er / rr;
    let (mut sig, mut err) = (0.0f64, 0.0f64);
    for (&a, &b) in e.iter().zip(r) {
        let p = alpha * b as f64;
        sig += p * p;
        err += (a as f64 - p).powi(2);
    }
    ratio_db(sig, err)
}

/// Scale-invariant SDR per channel, capped at ±100 dB.
pub fn si_sdr(estimate: &AudioClip, reference: &AudioClip) -> Result<ChannelScores> {
    check_pair(estimate, reference, "si_sdr")?;
    Ok(scores(
        (0..reference.channels())
            .map(|c| si_sdr_channel(estimate.channel(c), reference.channel(c)))
            .collect(),
    ))
}

/// Cholesky solve of `a x = b` for symmetric `a` (row-major, n×n).
fn cholesky_solve(a: &[f64], b: &[f64], n: usize) -> Option<Vec<f64>> {
    let mut l = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let s: f64 = a[i * n + j] - (0..j).map(|k| l[i * n + k] * l[j * n + k]).sum::<f64>();
            if i == j {
                if !(s > 0.0) {
                    return None;
                }
                l[i * n + i] = s.sqrt();
            } else {
                l[i * n + j] = s / l[j * n + j];
            }
        }
    }
    let mut y = vec![0.0; n];
    for i in 0..n {
        y[i] = (b[i] - (0..i).map(|k| l[i * n + k] * y[k]).sum::<f64>()) / l[i * n + i];
    }
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        x[i] = (y[i] - (i + 1..n).map(|k| l[k * n + i] * x[k]).sum::<f64>()) / l[i * n + i];
    }
    Some(x)
}

fn sdr_proj_channel(e: &[f32], r: &[f32], taps: usize) -> f64 {
    let len = r.len();
    let taps = taps.min(len);
    let rf: Vec<f64> = r.iter().map(|&v| v as f64).collect();
    let ef: Vec<f64> = e.iter().map(|&v| v as f64).collect();
    // Delayed copy d_j[n] = r[n − j] (zero for n < j). Gram entries
    // <d_j, d_k> = Σ_{m=0}^{len−1−max(j,k)} r[m + |k−j|]·r[m].
    let auto: Vec<f64> = (0..taps)
        .map(|d| (0..len - d).map(|m| rf[m + d] * rf[m]).sum())
        .collect();
    let mut gram = vec![0.0; taps * taps];
    for j in 0..taps {
        for k in j..taps {
            let d = k - j;
            let tail: f64 = (len - k..len - d).map(|m| rf[m + d] * rf[m]).sum();
            let v = auto[d] - tail;
            gram[j * taps + k] = v;
            gram[k * taps + j] = v;
        }
    }
    let rhs: Vec<f64> = (0..taps)
        .map(|j| (j..len).map(|n| ef[n] * rf[n - j]).sum())
        .collect();
    let coef = cholesky_solve(&gram, &rhs, taps).unwrap_or_else(|| {
        let trace: f64 = (0..taps).map(|i| gram[i * taps + i]).sum();
        let ridge = RIDGE * trace / taps as f64;
        let mut reg = gram.clone();
        (0..taps).for_each(|i| reg[i * taps + i] += ridge);
        cholesky_solve(&reg, &rhs, taps).unwrap_or_else(|| vec![0.0; taps])
    });
    let (mut sig, mut err) = (0.0f64, 0.0f64);
    for n in 0..len {
        let p: f64 = (0..taps.min(n + 1)).map(|j| coef[j] * rf[n - j]).sum();
        sig += p * p;
        err += (ef[n] - p).powi(2);
    }
    ratio_db(sig, err)
}

/// SDR after least-squares projection of the estimate onto the reference
/// filtered by a causal FIR of `taps` coefficients (delays 0..taps−1).
/// With one tap this is SI-SDR.
pub fn sdr_proj(estimate: &AudioClip, reference: &AudioClip, taps: usize) -> Result<ChannelScores> {
    check_pair(estimate, reference, "sdr_proj")?;
    if taps == 0 {
        return Err(Error::invalid("sdr_proj: taps must be at least 1"));
    }
    if taps == 1 {
        return si_sdr(estimate, reference);
    }
    Ok(scores(
        map_range(reference.channels(), |c| sdr_proj_channel(estimate.channel(c), reference.channel(c), taps)),
    ))
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub song: String,
    pub instrument: String,
    pub metric: Metric,
    pub value: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SummaryRow {
    pub instrument: String,
    pub metric: Metric,
    pub median: f64,
    pub mean: f64,
    pub count: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<MetricRow>,
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

impl EvalReport {
    pub fn values(&self, instrument: &str, metric: Metric) -> Vec<f64> {
        self.rows
            .iter()
            .filter(|r| r.instrument == instrument && r.metric == metric)
            .map(|r| r.value)
            .collect()
    }

    pub fn median(&self, instrument: &str, metric: Metric) -> f64 {
        median(&self.values(instrument, metric))
    }

    /// Median and mean per `(instrument, metric)`, in first-seen order.
    pub fn summary(&self) -> Vec<SummaryRow> {
        let mut groups: IndexMap<(String, Metric), Vec<f64>> = IndexMap::new();
        for r in &self.rows {
            groups.entry((r.instrument.clone(), r.metric)).or_default().push(r.value);
        }
        groups
            .into_iter()
            .map(|((instrument, metric), v)| SummaryRow {
                instrument,
                metric,
                median: median(&v),
                mean: v.iter().sum::<f64>() / v.len() as f64,
                count: v.len(),
            })
            .collect()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("song,instrument,metric,value\n");
        for r in &self.rows {
            writeln!(out, "{},{},{},{:.4}", r.song, r.instrument, r.metric, r.value).unwrap();
        }
        out
    }

    pub fn summary_csv(&self) -> String {
        let mut out = String::from("instrument,metric,median,mean,count\n");
        for s in self.summary() {
            writeln!(out, "{},{},{:.4},{:.4},{}", s.instrument, s.metric, s.median, s.mean, s.count).unwrap();
        }
        out
    }
}

/// SI-SDR and SDR rows for every instrument in `estimates` that has a
/// reference stem; missing or silent stems are skipped with a warning.
pub fn score_song(
    song: &str,
    estimates: &IndexMap<String, AudioClip>,
    references: &IndexMap<String, AudioClip>,
    taps: usize,
) -> Result<Vec<MetricRow>> {
    let mut rows = Vec::new();
    for (inst, est) in estimates {
        let Some(reference) = references.get(inst) else {
            log::warn!("{song}: no ground truth for `{inst}`, row skipped");
            continue;
        };
        if reference.channel_data().iter().any(|c| c.iter().all(|&v| v == 0.0)) {
            log::warn!("{song}: ground truth for `{inst}` is silent, row skipped");
            continue;
        }
        let row = |metric, value| MetricRow {
            song: song.to_string(),
            instrument: inst.clone(),
            metric,
            value,
        };
        rows.push(row(Metric::Sdr, sdr_proj(est, reference, taps)?.mean));
        rows.push(row(Metric::SiSdr, si_sdr(est, reference)?.mean));
    }
    Ok(rows)
}

fn collect(per_song: Vec<Result<Vec<MetricRow>>>) -> Result<EvalReport> {
    let mut rows = Vec::new();
    for r in per_song {
        rows.extend(r?);
    }
    Ok(EvalReport { rows })
}

/// Separates every song and scores each model's instrument.
pub fn evaluate(
    models: &ModelSet,
    expected_fingerprint: &str,
    songs: &[Scene],
    opts: &SeparateOptions,
    taps: usize,
) -> Result<EvalReport> {
    collect(map_range(songs.len(), |i| {
        let song = &songs[i];
        let est = separate_clip(&song.mixture, models, expected_fingerprint, opts)?;
        score_song(&song.id, &est, &song.sources, taps)
    }))
}

/// The unseparated mixture used as every instrument's estimate.
pub fn evaluate_mixture_baseline(songs: &[Scene], instruments: &[String], taps: usize) -> Result<EvalReport> {
    collect(map_range(songs.len(), |i| {
        let song = &songs[i];
        let est = instruments
            .iter()
            .map(|k| (k.clone(), song.mixture.clone()))
            .collect();
        score_song(&song.id, &est, &song.sources, taps)
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn noise(rng: &mut ChaCha8Rng, n: usize) -> Vec<f32> {
        (0..n).map(|_| rng.random_range(-1.0f32..1.0)).collect()
    }

    fn mono(v: Vec<f32>) -> AudioClip {
        AudioClip::new(vec![v], 44_100).unwrap()
    }

    /// Reference and noise with exactly zero inner product and
    /// ‖noise‖ = ‖reference‖/10.
    fn orthogonal_pair(n: usize) -> (AudioClip, AudioClip) {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let r: Vec<f64> = noise(&mut rng, n).iter().map(|&v| v as f64).collect();
        let w: Vec<f64> = noise(&mut rng, n).iter().map(|&v| v as f64).collect();
        let rr: f64 = r.iter().map(|v| v * v).sum();
        let k = w.iter().zip(&r).map(|(a, b)| a * b).sum::<f64>() / rr;
        let w: Vec<f64> = w.iter().zip(&r).map(|(a, b)| a - k * b).collect();
        let ww: f64 = w.iter().map(|v| v * v).sum();
        let s = (rr / 100.0 / ww).sqrt();
        let e: Vec<f32> = r.iter().zip(&w).map(|(a, b)| (a + s * b) as f32).collect();
        (mono(e), mono(r.iter().map(|&v| v as f32).collect()))
    }

    #[test]
    fn si_sdr_reference_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let r = mono(noise(&mut rng, 4000));
        assert_eq!(si_sdr(&r, &r).unwrap().mean, DB_CAP);
        assert_eq!(si_sdr(&r.scaled(2.0), &r).unwrap().mean, DB_CAP);
        let (e, r) = orthogonal_pair(4000);
        assert!((si_sdr(&e, &r).unwrap().mean - 20.0).abs() < 1e-3);
        assert!(si_sdr(&e, &mono(vec![0.0; 4000])).is_err());
    }

    #[test]
    fn si_sdr_scale_invariant() {
        let (e, r) = orthogonal_pair(3000);
        let a = si_sdr(&e, &r).unwrap().mean;
        let b = si_sdr(&e.scaled(0.37), &r).unwrap().mean;
        assert!((a - b).abs() < 1e-4);
    }

    #[test]
    fn one_tap_is_si_sdr() {
        let (e, r) = orthogonal_pair(3000);
        assert_eq!(sdr_proj(&e, &r, 1).unwrap(), si_sdr(&e, &r).unwrap());
        // the general solver agrees with the closed form
        let general = sdr_proj_channel(e.channel(0), r.channel(0), 1);
        assert!((general - si_sdr(&e, &r).unwrap().mean).abs() < 1e-9);
    }

    #[test]
    fn delay_is_absorbed() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let r = noise(&mut rng, 8000);
        let mut e = vec![0.0f32; 5];
        e.extend_from_slice(&r[..r.len() - 5]);
        let v = sdr_proj(&mono(e), &mono(r), 32).unwrap().mean;
        assert!(v >= 60.0, "{v}");
    }

    #[test]
    fn independent_noise_scores_low() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let r = mono(noise(&mut rng, 20_000));
        let e = mono(noise(&mut rng, 20_000));
        assert!(sdr_proj(&e, &r, 32).unwrap().mean <= 0.0);
    }

    #[test]
    fn projection_dominates_si_sdr() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..4 {
            let r = mono(noise(&mut rng, 5000));
            let n = mono(noise(&mut rng, 5000)).scaled(0.3);
            let e = AudioClip::sum([&r, &n]).unwrap();
            let a = sdr_proj(&e, &r, 8).unwrap().mean;
            let b = si_sdr(&e, &r).unwrap().mean;
            assert!(a >= b - 1e-9, "{a} < {b}");
        }
    }

    #[test]
    fn singular_normal_equations_use_ridge() {
        // A constant reference makes every delayed copy nearly collinear.
        let r = mono(vec![0.5; 64]);
        let e = mono(vec![0.5; 64]);
        let v = sdr_proj(&e, &r, 16).unwrap().mean;
        assert!(v.is_finite() && v > 40.0, "{v}");
    }

    #[test]
    fn report_aggregates() {
        let mk = |song: &str, v| MetricRow {
            song: song.into(),
            instrument: "tonal".into(),
            metric: Metric::SiSdr,
            value: v,
        };
        let rep = EvalReport {
            rows: vec![mk("a", 1.0), mk("b", 5.0), mk("c", 3.0), mk("d", 10.0)],
        };
        let s = &rep.summary()[0];
        assert_eq!((s.median, s.mean, s.count), (4.0, 4.75, 4));
        assert_eq!(rep.to_csv().lines().count(), 5);
        assert!(rep.summary_csv().starts_with("instrument,metric,median,mean,count\ntonal,SI-SDR,4.0000"));
    }

    #[test]
    fn ground_truth_scores_at_cap() {
        let scenes = crate::train::synth_dataset(1, 2, 1.0);
        for s in &scenes {
            let rows = score_song(&s.id, &s.sources, &s.sources, 4).unwrap();
            assert_eq!(rows.len(), 2 * s.sources.len());
            assert!(rows.iter().all(|r| r.value == DB_CAP), "{rows:?}");
        }
        let base = evaluate_mixture_baseline(&scenes, &["tonal".into(), "vocals".into()], 4).unwrap();
        assert_eq!(base.rows.len(), 2 * 2);
    }
}
