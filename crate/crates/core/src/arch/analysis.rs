//! Parameter counts, receptive fields and the skip/up-path kernel norms.

use std::fmt::Write as _;

use indexmap::IndexMap;

use super::model::{block_input_channels, block_name, layout, skip_source, Model};
use super::spec::{ArchSpec, DenseBlockSpec};
use crate::kernels::same_pad_lead;
use crate::tensor::Real;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamCount {
    /// `(component, trainable scalars)` in construction order.
    pub rows: Vec<(String, usize)>,
    pub total: usize,
}

impl ParamCount {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("component,params\n");
        for (name, n) in &self.rows {
            writeln!(out, "{name},{n}").unwrap();
        }
        writeln!(out, "total,{}", self.total).unwrap();
        out
    }
}

/// Trainable scalars per component (kernels, biases, gamma, beta).
pub fn count_params<T: Real>(model: &Model<T>) -> ParamCount {
    let lay = layout(model.spec());
    let mut rows: IndexMap<String, usize> = IndexMap::new();
    for decl in &lay.params {
        let n = model.params().get(&decl.name).map_or(0, |t| t.numel());
        *rows.entry(decl.component.clone()).or_default() += n;
    }
    let total = rows.values().sum();
    ParamCount {
        rows: rows.into_iter().collect(),
        total,
    }
}

/// Same table computed from the spec alone.
pub fn count_spec_params(spec: &ArchSpec) -> ParamCount {
    let lay = layout(spec);
    let mut rows: IndexMap<String, usize> = IndexMap::new();
    for decl in &lay.params {
        *rows.entry(decl.component.clone()).or_default() += decl.numel();
    }
    let total = rows.values().sum();
    ParamCount {
        rows: rows.into_iter().collect(),
        total,
    }
}

/// Per-position input support along one axis: inclusive `[lo, hi]`, or
/// `None` for positions that see no input.
pub type Support = Vec<Option<(i64, i64)>>;

fn hull(a: Option<(i64, i64)>, b: Option<(i64, i64)>) -> Option<(i64, i64)> {
    match (a, b) {
        (Some((a0, a1)), Some((b0, b1))) => Some((a0.min(b0), a1.max(b1))),
        (x, None) | (None, x) => x,
    }
}

fn conv_support(x: &Support, k: usize) -> Support {
    let lead = same_pad_lead(k) as i64;
    let n = x.len() as i64;
    (0..n)
        .map(|p| {
            (p - lead..p - lead + k as i64)
                .filter(|q| (0..n).contains(q))
                .fold(None, |acc, q| hull(acc, x[q as usize]))
        })
        .collect()
}

fn pool_support(x: &Support) -> Support {
    x.chunks(2).map(|c| hull(c[0], c[1])).collect()
}

fn up_support(x: &Support) -> Support {
    x.iter().flat_map(|&v| [v, v]).collect()
}

fn union_support(a: &Support, b: &Support) -> Support {
    a.iter().zip(b).map(|(&x, &y)| hull(x, y)).collect()
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Axis {
    Frames,
    Bins,
}

fn kernel_len(axis: Axis, k: (usize, usize)) -> usize {
    match axis {
        Axis::Frames => k.0,
        Axis::Bins => k.1,
    }
}

fn block_support(x: &Support, spec: &DenseBlockSpec, axis: Axis) -> Support {
    let k = kernel_len(axis, spec.kernel);
    let mut input = x.clone();
    let mut last = x.clone();
    for l in 0..spec.layers {
        last = conv_support(&input, k);
        if l + 1 < spec.layers {
            input = union_support(&input, &last);
        }
    }
    last
}

fn band_support(spec: &ArchSpec, band: &super::spec::BandSpec, x: Support, axis: Axis) -> Support {
    let s = spec.scales;
    let ic = band.initial_conv;
    let h0 = conv_support(&x, kernel_len(axis, (ic.kt, ic.kf)));
    let mut cur = block_support(&h0, &band.blocks[0], axis);
    let mut skips = vec![];
    if s > 1 {
        skips.push(cur.clone());
    }
    for j in 1..s {
        cur = block_support(&pool_support(&cur), &band.blocks[j], axis);
        if j < s - 1 {
            skips.push(cur.clone());
        }
    }
    for j in s..2 * s - 1 {
        let u = up_support(&cur);
        let c = union_support(&u, &skips.pop().expect("skip"));
        cur = block_support(&c, &band.blocks[j], axis);
    }
    cur
}

/// Exact input support of every output position along one axis for an
/// input of `len` positions on that axis.
fn network_support(spec: &ArchSpec, len: usize, axis: Axis) -> Support {
    let identity: Support = (0..len as i64).map(|i| Some((i, i))).collect();
    let mut fused: Option<Support> = None;
    let mut merge = |s: Support| {
        fused = Some(match fused.take() {
            None => s,
            Some(f) => union_support(&f, &s),
        })
    };
    if axis == Axis::Bins && spec.sub_bands().count() > 0 {
        let mut joined = Support::with_capacity(len);
        for band in spec.sub_bands() {
            let (start, n) = band.bin_window(len);
            joined.extend(band_support(spec, band, identity[start..start + n].to_vec(), axis));
        }
        merge(joined);
    } else {
        for band in spec.sub_bands() {
            merge(band_support(spec, band, identity.clone(), axis));
        }
    }
    if let Some(full) = spec.full_band() {
        merge(band_support(spec, full, identity.clone(), axis));
    }
    let d8 = block_support(&fused.expect("at least one band"), &spec.final_block, axis);
    let fc = spec.final_conv;
    conv_support(&d8, kernel_len(axis, (fc.kt, fc.kf)))
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ReceptiveField {
    /// Largest support extent over output positions.
    pub frames: usize,
    pub bins: usize,
    /// Largest distance from an output position to an input it depends on.
    pub frame_radius: usize,
    pub bin_radius: usize,
}

impl ReceptiveField {
    pub fn to_csv(&self) -> String {
        format!(
            "axis,extent,radius\nframes,{},{}\nbins,{},{}\n",
            self.frames, self.frame_radius, self.bins, self.bin_radius
        )
    }
}

fn summarize(sup: &Support) -> (usize, usize) {
    let mut extent = 0;
    let mut radius = 0;
    for (p, s) in sup.iter().enumerate() {
        if let Some((lo, hi)) = *s {
            extent = extent.max((hi - lo + 1) as usize);
            radius = radius.max((p as i64 - lo).max(hi - p as i64) as usize);
        }
    }
    (extent, radius)
}

/// Receptive field for a nominal input of 1024 bins and enough frames that
/// interior positions are unaffected by the clip edges.
pub fn receptive_field(spec: &ArchSpec) -> ReceptiveField {
    let div = spec.divisor();
    let bins = 1024usize.div_ceil(spec.bin_divisor()) * spec.bin_divisor();
    let frames = (4096 / div).max(1) * div;
    let (frames_ext, frame_radius) = summarize(&network_support(spec, frames, Axis::Frames));
    let (bins_ext, bin_radius) = summarize(&network_support(spec, bins, Axis::Bins));
    ReceptiveField {
        frames: frames_ext,
        bins: bins_ext,
        frame_radius,
        bin_radius,
    }
}

/// Per-output `(frame support, bin support)` for an input of the given size.
pub fn support_map(spec: &ArchSpec, frames: usize, bins: usize) -> (Support, Support) {
    (
        network_support(spec, frames, Axis::Frames),
        network_support(spec, bins, Axis::Bins),
    )
}

#[derive(Clone, Debug, PartialEq)]
pub struct KernelNormRow {
    pub band: String,
    pub block: String,
    pub up_norm: f64,
    pub skip_norm: f64,
}

impl KernelNormRow {
    pub fn ratio(&self) -> f64 {
        self.skip_norm / self.up_norm
    }
}

pub fn kernel_norm_csv(rows: &[KernelNormRow]) -> String {
    let mut out = String::from("band,block,up_norm,skip_norm,ratio\n");
    for r in rows {
        writeln!(
            out,
            "{},{},{:.6},{:.6},{:.6}",
            r.band,
            r.block,
            r.up_norm,
            r.skip_norm,
            r.ratio()
        )
        .unwrap();
    }
    out
}

/// For the first layer of every up-path block, the mean over input maps of
/// the l2-norm of that map's kernel slice, split into maps arriving from the
/// up-sampling layer and from the skip connection.
pub fn kernel_norm_report<T: Real>(model: &Model<T>) -> crate::Result<Vec<KernelNormRow>> {
    let spec = model.spec();
    let s = spec.scales;
    let mut rows = Vec::new();
    for band in &spec.bands {
        let b = band.name.as_str();
        for j in s..2 * s - 1 {
            let name = block_name(b, j);
            let w = model.param(&format!("{name}.layer1.conv.kernel"))?;
            let [out, inp, kt, kf] = *w.shape() else { unreachable!() };
            let up_ch = band.blocks[j - 1].k;
            debug_assert_eq!(inp, block_input_channels(band, s, j));
            debug_assert_eq!(inp - up_ch, band.blocks[skip_source(s, j)].k);
            let taps = kt * kf;
            let map_norm = |c: usize| -> f64 {
                let mut acc = 0.0;
                for o in 0..out {
                    let base = (o * inp + c) * taps;
                    acc += w.data()[base..base + taps]
                        .iter()
                        .map(|v| v.as_f64().powi(2))
                        .sum::<f64>();
                }
                acc.sqrt()
            };
            let mean = |r: std::ops::Range<usize>| {
                let n = r.len() as f64;
                r.map(map_norm).sum::<f64>() / n
            };
            rows.push(KernelNormRow {
                band: b.into(),
                block: format!("dense{}", j + 1),
                up_norm: mean(0..up_ch),
                skip_norm: mean(up_ch..inp),
            });
        }
    }
    Ok(rows)
}
