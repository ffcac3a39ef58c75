//! Declarative network description and the two built-in presets.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::layers::{DEFAULT_BN_EPSILON, DEFAULT_BN_MOMENTUM};

pub const MDENSENET_PRESET: &str = "mdensenet-table1";
pub const MMDENSENET_PRESET: &str = "mmdensenet-table1";
pub const PRESETS: [&str; 2] = [MDENSENET_PRESET, MMDENSENET_PRESET];

/// Tag mixed into the fingerprint; bump when parameter naming or layer
/// conventions change.
const NAMING_SCHEME: &str = "names-v1;pad-trailing";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DenseBlockSpec {
    /// Growth rate.
    pub k: usize,
    /// Composite layers in the block.
    pub layers: usize,
    /// `(kt, kf)`.
    pub kernel: (usize, usize),
}

impl DenseBlockSpec {
    pub fn new(k: usize, layers: usize) -> Self {
        DenseBlockSpec {
            k,
            layers,
            kernel: (3, 3),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub kt: usize,
    pub kf: usize,
    pub ch: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BandName {
    Low,
    High,
    Full,
}

impl BandName {
    pub fn as_str(self) -> &'static str {
        match self {
            BandName::Low => "low",
            BandName::High => "high",
            BandName::Full => "full",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BandSpec {
    pub name: BandName,
    /// Half-open fraction of the input bins, e.g. `[0.0, 0.5]`.
    pub bin_range: (f64, f64),
    pub initial_conv: ConvSpec,
    /// Down path first, then the up path.
    pub blocks: Vec<DenseBlockSpec>,
}

impl BandSpec {
    pub fn is_sub_band(&self) -> bool {
        self.name != BandName::Full
    }

    /// `(start, len)` in bins for an input with `bins` bins.
    pub fn bin_window(&self, bins: usize) -> (usize, usize) {
        let start = (self.bin_range.0 * bins as f64).round() as usize;
        let end = (self.bin_range.1 * bins as f64).round() as usize;
        (start, end.saturating_sub(start))
    }

    /// Channels leaving the band (its last block's growth rate).
    pub fn out_channels(&self) -> usize {
        self.blocks.last().map_or(0, |b| b.k)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchSpec {
    pub name: String,
    /// Resolution levels per band, including full resolution.
    pub scales: usize,
    pub io_channels: usize,
    pub bn_epsilon: f64,
    pub bn_momentum: f64,
    pub seed: u64,
    pub bands: Vec<BandSpec>,
    pub final_block: DenseBlockSpec,
    pub final_conv: ConvSpec,
}

fn spec_err(field: impl Into<String>, reason: impl Into<String>) -> Error {
    Error::InvalidSpec {
        field: field.into(),
        reason: reason.into(),
    }
}

fn blocks(rows: &[(usize, usize)]) -> Vec<DenseBlockSpec> {
    rows.iter().map(|&(k, l)| DenseBlockSpec::new(k, l)).collect()
}

impl ArchSpec {
    pub fn mdensenet_table1() -> Self {
        ArchSpec {
            name: MDENSENET_PRESET.into(),
            scales: 4,
            io_channels: 2,
            bn_epsilon: DEFAULT_BN_EPSILON,
            bn_momentum: DEFAULT_BN_MOMENTUM,
            seed: 0,
            bands: vec![BandSpec {
                name: BandName::Full,
                bin_range: (0.0, 1.0),
                initial_conv: ConvSpec { kt: 3, kf: 4, ch: 32 },
                blocks: blocks(&[(12, 4); 7]),
            }],
            final_block: DenseBlockSpec::new(4, 2),
            final_conv: ConvSpec { kt: 1, kf: 2, ch: 2 },
        }
    }

    pub fn mmdensenet_table1() -> Self {
        let mut low = vec![(14, 4)];
        low.extend([(16, 4); 6]);
        ArchSpec {
            name: MMDENSENET_PRESET.into(),
            scales: 4,
            io_channels: 2,
            bn_epsilon: DEFAULT_BN_EPSILON,
            bn_momentum: DEFAULT_BN_MOMENTUM,
            seed: 0,
            bands: vec![
                BandSpec {
                    name: BandName::Low,
                    bin_range: (0.0, 0.5),
                    initial_conv: ConvSpec { kt: 3, kf: 4, ch: 32 },
                    blocks: blocks(&low),
                },
                BandSpec {
                    name: BandName::High,
                    bin_range: (0.5, 1.0),
                    initial_conv: ConvSpec { kt: 3, kf: 3, ch: 32 },
                    blocks: blocks(&[(10, 3); 7]),
                },
                BandSpec {
                    name: BandName::Full,
                    bin_range: (0.0, 1.0),
                    initial_conv: ConvSpec { kt: 3, kf: 4, ch: 32 },
                    blocks: blocks(&[(6, 2), (6, 2), (6, 2), (6, 4), (6, 2), (6, 2), (6, 2)]),
                },
            ],
            final_block: DenseBlockSpec::new(4, 2),
            final_conv: ConvSpec { kt: 1, kf: 2, ch: 2 },
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            MDENSENET_PRESET => Some(Self::mdensenet_table1()),
            MMDENSENET_PRESET => Some(Self::mmdensenet_table1()),
            _ => None,
        }
    }

    /// A preset name, or a path to a TOML spec file.
    pub fn resolve(name_or_path: &str) -> Result<Self> {
        if let Some(spec) = Self::preset(name_or_path) {
            return Ok(spec);
        }
        let path = Path::new(name_or_path);
        if !path.exists() {
            return Err(Error::Config(format!(
                "`{name_or_path}` is neither a preset ({}) nor an existing file",
                PRESETS.join(", ")
            )));
        }
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let spec: ArchSpec = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("ArchSpec serializes")
    }

    /// Multiplies every growth rate and initial-conv width by `factor`
    /// (rounded, at least 1). I/O channels are unchanged.
    pub fn scaled_widths(&self, factor: f64) -> Self {
        let scale = |v: usize| ((v as f64 * factor).round() as usize).max(1);
        let mut out = self.clone();
        for band in &mut out.bands {
            band.initial_conv.ch = scale(band.initial_conv.ch);
            for b in &mut band.blocks {
                b.k = scale(b.k);
            }
        }
        out.final_block.k = scale(out.final_block.k);
        out
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn sub_bands(&self) -> impl Iterator<Item = &BandSpec> {
        self.bands.iter().filter(|b| b.is_sub_band())
    }

    pub fn full_band(&self) -> Option<&BandSpec> {
        self.bands.iter().find(|b| !b.is_sub_band())
    }

    /// Channel count every sub-band is adapted to before frequency concat.
    pub fn sub_band_channels(&self) -> Option<usize> {
        self.sub_bands().next().map(BandSpec::out_channels)
    }

    /// Input channels of the final dense block.
    pub fn fused_channels(&self) -> usize {
        self.sub_band_channels().unwrap_or(0) + self.full_band().map_or(0, BandSpec::out_channels)
    }

    /// Frames and each band's bins must be multiples of this.
    pub fn divisor(&self) -> usize {
        1 << (self.scales - 1)
    }

    /// Bin counts must be multiples of this so every band window is a
    /// multiple of [`divisor`](Self::divisor).
    pub fn bin_divisor(&self) -> usize {
        if self.sub_bands().count() > 0 {
            2 * self.divisor()
        } else {
            self.divisor()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.scales == 0 || self.scales > 8 {
            return Err(spec_err("scales", format!("{} is outside 1..=8", self.scales)));
        }
        if self.io_channels == 0 {
            return Err(spec_err("io_channels", "must be positive"));
        }
        if !(self.bn_epsilon > 0.0) {
            return Err(spec_err("bn_epsilon", "must be positive"));
        }
        if !(0.0..1.0).contains(&self.bn_momentum) {
            return Err(spec_err("bn_momentum", "must lie in [0, 1)"));
        }
        if self.bands.is_empty() {
            return Err(spec_err("bands", "at least one band is required"));
        }
        let want_blocks = 2 * self.scales - 1;
        for (bi, band) in self.bands.iter().enumerate() {
            let field = |f: &str| format!("bands[{bi}].{f}");
            if band.blocks.len() != want_blocks {
                return Err(spec_err(
                    field("blocks"),
                    format!("{} scales need {want_blocks} blocks, got {}", self.scales, band.blocks.len()),
                ));
            }
            let ic = band.initial_conv;
            if ic.kt == 0 || ic.kf == 0 || ic.ch == 0 {
                return Err(spec_err(field("initial_conv"), "sizes must be positive"));
            }
            for (j, b) in band.blocks.iter().enumerate() {
                check_block(b, &field(&format!("blocks[{j}]")))?;
            }
            let (lo, hi) = band.bin_range;
            if !(0.0..1.0).contains(&lo) || !(lo < hi && hi <= 1.0) {
                return Err(spec_err(field("bin_range"), format!("[{lo}, {hi}) is not inside [0, 1]")));
            }
            if !band.is_sub_band() && (lo, hi) != (0.0, 1.0) {
                return Err(spec_err(field("bin_range"), "the full band must span [0, 1)"));
            }
        }
        if self.bands.iter().filter(|b| !b.is_sub_band()).count() > 1 {
            return Err(spec_err("bands", "at most one full band"));
        }
        let mut edge = 0.0;
        for (bi, band) in self.bands.iter().enumerate().filter(|(_, b)| b.is_sub_band()) {
            if band.bin_range.0 != edge {
                return Err(spec_err(
                    format!("bands[{bi}].bin_range"),
                    format!("sub-bands must tile the bins in order; expected start {edge}"),
                ));
            }
            edge = band.bin_range.1;
        }
        if self.sub_bands().count() > 0 && edge != 1.0 {
            return Err(spec_err("bands", "sub-bands must end at 1.0"));
        }
        check_block(&self.final_block, "final_block")?;
        let fc = self.final_conv;
        if fc.kt == 0 || fc.kf == 0 {
            return Err(spec_err("final_conv", "kernel sizes must be positive"));
        }
        if fc.ch != self.io_channels {
            return Err(spec_err(
                "final_conv.ch",
                format!("{} differs from io_channels {}", fc.ch, self.io_channels),
            ));
        }
        Ok(())
    }

    /// Checks an input's spatial size against the pooling depth and bands.
    pub fn check_input(&self, frames: usize, bins: usize) -> Result<()> {
        let d = self.divisor();
        if frames == 0 || !frames.is_multiple_of(d) {
            return Err(Error::invalid(format!("frame count {frames} is not a positive multiple of {d}")));
        }
        if bins == 0 || !bins.is_multiple_of(self.bin_divisor()) {
            return Err(Error::invalid(format!(
                "bin count {bins} is not a positive multiple of {}",
                self.bin_divisor()
            )));
        }
        for band in &self.bands {
            let (_, len) = band.bin_window(bins);
            if len == 0 || len % d != 0 {
                return Err(Error::invalid(format!(
                    "band `{}` spans {len} of {bins} bins, not a positive multiple of {d}",
                    band.name.as_str()
                )));
            }
        }
        Ok(())
    }

    /// Canonical dump used for fingerprinting: the TOML form with the seed
    /// cleared, since the seed changes initial values but not the layout.
    pub fn canonical_dump(&self) -> String {
        let mut s = self.clone();
        s.seed = 0;
        s.name = String::new();
        s.to_toml()
    }

    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.canonical_dump().as_bytes());
        h.update(NAMING_SCHEME.as_bytes());
        let mut out = String::with_capacity(64);
        for b in h.finalize() {
            write!(out, "{b:02x}").unwrap();
        }
        out
    }
}

fn check_block(b: &DenseBlockSpec, field: &str) -> Result<()> {
    if b.k == 0 {
        return Err(spec_err(format!("{field}.k"), "growth rate must be at least 1"));
    }
    if b.layers == 0 {
        return Err(spec_err(format!("{field}.layers"), "must be at least 1"));
    }
    if b.kernel.0 == 0 || b.kernel.1 == 0 {
        return Err(spec_err(format!("{field}.kernel"), "sizes must be positive"));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate_and_round_trip_through_toml() {
        for name in PRESETS {
            let spec = ArchSpec::preset(name).unwrap();
            spec.validate().unwrap();
            let back = ArchSpec::from_toml(&spec.to_toml()).unwrap();
            assert_eq!(back, spec);
        }
    }

    #[test]
    fn table_rows() {
        let md = ArchSpec::mdensenet_table1();
        assert!(md.bands[0].blocks.iter().all(|b| (b.k, b.layers) == (12, 4)));
        assert_eq!(md.bands[0].initial_conv, ConvSpec { kt: 3, kf: 4, ch: 32 });
        let mm = ArchSpec::mmdensenet_table1();
        assert_eq!((mm.bands[0].blocks[0].k, mm.bands[0].blocks[0].layers), (14, 4));
        assert_eq!(mm.bands[2].blocks[3].layers, 4);
        assert_eq!(mm.bands[1].initial_conv.kf, 3);
        assert_eq!(mm.fused_channels(), 16 + 6);
        assert_eq!(mm.bin_divisor(), 16);
    }

    #[test]
    fn invalid_specs_name_the_field() {
        let mut s = ArchSpec::mmdensenet_table1();
        s.bands[1].blocks.pop();
        match s.validate() {
            Err(Error::InvalidSpec { field, .. }) => assert_eq!(field, "bands[1].blocks"),
            other => panic!("{other:?}"),
        }
        let mut s = ArchSpec::mdensenet_table1();
        s.final_block.k = 0;
        assert!(matches!(s.validate(), Err(Error::InvalidSpec { field, .. }) if field == "final_block.k"));
        let mut s = ArchSpec::mdensenet_table1();
        s.final_conv.ch = 3;
        assert!(matches!(s.validate(), Err(Error::InvalidSpec { field, .. }) if field == "final_conv.ch"));
        let mut s = ArchSpec::mmdensenet_table1();
        s.bands[1].bin_range = (0.6, 1.0);
        assert!(s.validate().is_err());
    }

    #[test]
    fn fingerprint_ignores_seed_but_not_layout() {
        let a = ArchSpec::mmdensenet_table1();
        assert_eq!(a.fingerprint(), a.clone().with_seed(99).fingerprint());
        assert_ne!(a.fingerprint(), a.scaled_widths(0.5).fingerprint());
        assert_ne!(a.fingerprint(), ArchSpec::mdensenet_table1().fingerprint());
    }

    #[test]
    fn halved_widths() {
        let h = ArchSpec::mmdensenet_table1().scaled_widths(0.5);
        assert_eq!(h.bands[0].blocks[0].k, 7);
        assert_eq!(h.bands[0].blocks[1].k, 8);
        assert_eq!(h.bands[1].blocks[0].k, 5);
        assert_eq!(h.bands[2].blocks[0].k, 3);
        assert_eq!(h.bands[0].initial_conv.ch, 16);
        assert_eq!(h.final_block.k, 2);
        assert_eq!(h.final_conv.ch, 2);
    }

    #[test]
    fn input_checks() {
        let s = ArchSpec::mmdensenet_table1();
        s.check_input(64, 1024).unwrap();
        assert!(s.check_input(60, 1024).is_err());
        assert!(s.check_input(64, 1000).is_err());
        assert!(s.check_input(64, 1032).is_err());
    }
}
