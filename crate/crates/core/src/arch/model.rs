//! Parameter layout, initialization and the forward passes of dense blocks,
//! MDenseNet bands and the multi-band fusion.

use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::spec::{ArchSpec, BandSpec, DenseBlockSpec};
use crate::autodiff::{GradMap, Graph, Var};
use crate::error::{Error, Result};
use crate::layers::{
    composite_layer, conv2d, down_sample, up_sample, BnVars, CompositeVars, ConvVars, ForwardCtx, Mode, RunningStats,
};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    Kernel { fan_in: usize },
    Bias,
    Gamma,
    Beta,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamDecl {
    pub name: String,
    pub shape: Vec<usize>,
    pub kind: ParamKind,
    /// Row of the parameter-count table this tensor is tallied under.
    pub component: String,
}

impl ParamDecl {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Every trainable tensor and every batch-norm site, in construction order.
#[derive(Clone, Debug, Default)]
pub struct Layout {
    pub params: Vec<ParamDecl>,
    /// `(bn name, channels)`; running statistics live under these names.
    pub batch_norms: Vec<(String, usize)>,
}

impl Layout {
    fn conv(&mut self, component: &str, name: &str, out: usize, inp: usize, kt: usize, kf: usize) {
        self.params.push(ParamDecl {
            name: format!("{name}.kernel"),
            shape: vec![out, inp, kt, kf],
            kind: ParamKind::Kernel { fan_in: inp * kt * kf },
            component: component.into(),
        });
        self.params.push(ParamDecl {
            name: format!("{name}.bias"),
            shape: vec![out],
            kind: ParamKind::Bias,
            component: component.into(),
        });
    }

    fn up(&mut self, component: &str, name: &str, ch: usize) {
        self.params.push(ParamDecl {
            name: format!("{name}.kernel"),
            shape: vec![ch, ch, 2, 2],
            // Each output pixel sees exactly one tap per input channel.
            kind: ParamKind::Kernel { fan_in: ch },
            component: component.into(),
        });
        self.params.push(ParamDecl {
            name: format!("{name}.bias"),
            shape: vec![ch],
            kind: ParamKind::Bias,
            component: component.into(),
        });
    }

    fn block(&mut self, prefix: &str, spec: &DenseBlockSpec, c0: usize) {
        for l in 1..=spec.layers {
            let inp = c0 + (l - 1) * spec.k;
            let lp = format!("{prefix}.layer{l}");
            let bn = format!("{lp}.bn");
            self.params.push(ParamDecl {
                name: format!("{bn}.gamma"),
                shape: vec![inp],
                kind: ParamKind::Gamma,
                component: prefix.into(),
            });
            self.params.push(ParamDecl {
                name: format!("{bn}.beta"),
                shape: vec![inp],
                kind: ParamKind::Beta,
                component: prefix.into(),
            });
            self.batch_norms.push((bn, inp));
            self.conv(prefix, &format!("{lp}.conv"), spec.k, inp, spec.kernel.0, spec.kernel.1);
        }
    }

    pub fn find(&self, name: &str) -> Option<&ParamDecl> {
        self.params.iter().find(|p| p.name == name)
    }
}

/// Input channels of block `j` (0-based) in a band with `s` scales.
pub fn block_input_channels(band: &BandSpec, scales: usize, j: usize) -> usize {
    if j == 0 {
        band.initial_conv.ch
    } else if j < scales {
        band.blocks[j - 1].k
    } else {
        band.blocks[j - 1].k + band.blocks[skip_source(scales, j)].k
    }
}

/// Down-path block whose output is concatenated into up-path block `j`.
pub fn skip_source(scales: usize, j: usize) -> usize {
    2 * scales - 2 - j
}

pub fn block_name(band: &str, j: usize) -> String {
    format!("{band}.dense{}", j + 1)
}

pub fn up_name(band: &str, j: usize) -> String {
    format!("{band}.up{}", j + 1)
}

pub fn final_block_name(spec: &ArchSpec) -> String {
    format!("dense{}", 2 * spec.scales)
}

pub fn adapter_name(band: &str) -> String {
    format!("adapter.{band}")
}

pub fn layout(spec: &ArchSpec) -> Layout {
    let mut lay = Layout::default();
    let s = spec.scales;
    let target = spec.sub_band_channels();
    for band in &spec.bands {
        let b = band.name.as_str();
        let ic = band.initial_conv;
        let c0 = format!("{b}.conv0");
        lay.conv(&c0, &c0, ic.ch, spec.io_channels, ic.kt, ic.kf);
        for (j, blk) in band.blocks.iter().enumerate() {
            if j >= s {
                let up = up_name(b, j);
                lay.up(&up, &up, band.blocks[j - 1].k);
            }
            lay.block(&block_name(b, j), blk, block_input_channels(band, s, j));
        }
        if band.is_sub_band() {
            let t = target.expect("sub-band present");
            if band.out_channels() != t {
                let a = adapter_name(b);
                lay.conv(&a, &a, t, band.out_channels(), 1, 1);
            }
        }
    }
    let fb = final_block_name(spec);
    lay.block(&fb, &spec.final_block, spec.fused_channels());
    let fc = spec.final_conv;
    lay.conv("final", "final", fc.ch, spec.final_block.k, fc.kt, fc.kf);
    lay
}

/// An instantiated network: named parameters plus batch-norm running
/// statistics, bound to the spec that produced them.
#[derive(Clone, Debug)]
pub struct Model<T> {
    spec: ArchSpec,
    params: IndexMap<String, Tensor<T>>,
    running: IndexMap<String, RunningStats<T>>,
    fingerprint: String,
}

impl<T: Real> Model<T> {
    /// Uniform He fan-in kernels, zero biases and beta, unit gamma, running
    /// statistics (0, 1). Deterministic in `spec.seed`.
    pub fn build(spec: &ArchSpec) -> Result<Self> {
        spec.validate()?;
        let lay = layout(spec);
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let mut params = IndexMap::with_capacity(lay.params.len());
        for decl in &lay.params {
            let t = match decl.kind {
                ParamKind::Kernel { fan_in } => {
                    let bound = (6.0 / fan_in as f64).sqrt();
                    Tensor::from_fn(&decl.shape, |_| T::from_f64_lossy(rng.random_range(-bound..bound)))
                }
                ParamKind::Bias | ParamKind::Beta => Tensor::zeros(&decl.shape),
                ParamKind::Gamma => Tensor::ones(&decl.shape),
            };
            params.insert(decl.name.clone(), t);
        }
        let running = lay
            .batch_norms
            .iter()
            .map(|(name, ch)| {
                (
                    name.clone(),
                    RunningStats {
                        mean: Tensor::zeros(&[*ch]),
                        var: Tensor::ones(&[*ch]),
                    },
                )
            })
            .collect();
        Ok(Model {
            spec: spec.clone(),
            params,
            running,
            fingerprint: spec.fingerprint(),
        })
    }

    pub fn spec(&self) -> &ArchSpec {
        &self.spec
    }

    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    pub fn params(&self) -> &IndexMap<String, Tensor<T>> {
        &self.params
    }

    pub fn param(&self, name: &str) -> Result<&Tensor<T>> {
        self.params.get(name).ok_or_else(|| Error::MissingParam(name.into()))
    }

    pub fn param_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.params.get_mut(name).ok_or_else(|| Error::MissingParam(name.into()))
    }

    /// Replaces a parameter, keeping its shape.
    pub fn set_param(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        let slot = self.param_mut(name)?;
        if slot.shape() != value.shape() {
            return Err(Error::ShapeMismatch {
                op: "set_param",
                left: slot.shape().to_vec(),
                right: value.shape().to_vec(),
            });
        }
        *slot = value;
        Ok(())
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<T>)> {
        self.params.iter_mut()
    }

    pub fn running(&self) -> &IndexMap<String, RunningStats<T>> {
        &self.running
    }

    pub fn running_mut(&mut self, name: &str) -> Result<&mut RunningStats<T>> {
        self.running
            .get_mut(name)
            .ok_or_else(|| Error::MissingParam(name.into()))
    }

    pub fn num_params(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    pub fn cast<U: Real>(&self) -> Model<U> {
        Model {
            spec: self.spec.clone(),
            params: self.params.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
            running: self
                .running
                .iter()
                .map(|(k, r)| {
                    (
                        k.clone(),
                        RunningStats {
                            mean: r.mean.cast(),
                            var: r.var.cast(),
                        },
                    )
                })
                .collect(),
            fingerprint: self.fingerprint.clone(),
        }
    }

    /// Records all parameters as trainable leaves of `g`.
    pub fn bind<'m>(&'m self, g: &mut Graph<T>) -> Bound<'m, T> {
        let vars = self
            .params
            .iter()
            .map(|(k, v)| (k.clone(), g.param(v.clone())))
            .collect();
        Bound { model: self, vars }
    }

    /// Binds existing graph nodes, one per parameter in parameter order,
    /// instead of recording fresh leaves.
    pub fn bind_vars<'m>(&'m self, vars: &[Var]) -> Result<Bound<'m, T>> {
        if vars.len() != self.params.len() {
            return Err(Error::invalid(format!(
                "bind_vars: {} vars for {} parameters",
                vars.len(),
                self.params.len()
            )));
        }
        Ok(Bound {
            model: self,
            vars: self.params.keys().cloned().zip(vars.iter().copied()).collect(),
        })
    }

    /// Full network on `x` of shape `(n, io_channels, frames, bins)`.
    pub fn forward(&self, g: &mut Graph<T>, x: Var, mode: Mode) -> Result<Forward> {
        let bound = self.bind(g);
        self.forward_bound(g, x, bound, mode)
    }

    pub fn forward_bound(&self, g: &mut Graph<T>, x: Var, bound: Bound<'_, T>, mode: Mode) -> Result<Forward> {
        let mut ctx = ForwardCtx::new(mode);
        let output = mmdensenet_forward(g, x, &bound, &mut ctx)?;
        Ok(Forward {
            output,
            vars: bound.vars,
            bn_nodes: ctx.bn_nodes().to_vec(),
        })
    }

    /// Eval-mode forward without recording gradients.
    pub fn infer(&self, input: Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::no_grad();
        let x = g.constant(input);
        let fwd = self.forward(&mut g, x, Mode::Eval)?;
        Ok(g.take_value(fwd.output))
    }

    /// Folds the batch statistics of a training-mode forward into the
    /// running averages.
    pub fn update_running_stats(&mut self, g: &Graph<T>, fwd: &Forward) -> Result<()> {
        let momentum = T::from_f64_lossy(self.spec.bn_momentum);
        for (name, var) in &fwd.bn_nodes {
            let (mean, var) = g
                .batch_stats(*var)
                .ok_or_else(|| Error::invalid(format!("`{name}` is not a training-mode batch norm")))?;
            let r = self.running_mut(name)?;
            crate::layers::update_running(Some(r), momentum, mean, var);
        }
        Ok(())
    }
}

/// Result of [`Model::forward`].
#[derive(Clone, Debug)]
pub struct Forward {
    pub output: Var,
    /// Parameter name → graph leaf.
    pub vars: IndexMap<String, Var>,
    pub bn_nodes: Vec<(String, Var)>,
}

impl Forward {
    /// Gradients keyed by parameter name, in parameter order.
    pub fn named_grads<T: Real>(&self, grads: &mut GradMap<T>) -> IndexMap<String, Tensor<T>> {
        self.vars
            .iter()
            .filter_map(|(name, &v)| grads.take(v).map(|t| (name.clone(), t)))
            .collect()
    }
}

/// A model's parameters recorded on one graph.
pub struct Bound<'m, T> {
    model: &'m Model<T>,
    vars: IndexMap<String, Var>,
}

impl<'m, T: Real> Bound<'m, T> {
    pub fn model(&self) -> &'m Model<T> {
        self.model
    }

    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::MissingParam(name.into()))
    }

    pub fn conv(&self, prefix: &str) -> Result<ConvVars> {
        Ok(ConvVars {
            kernel: self.var(&format!("{prefix}.kernel"))?,
            bias: self.var(&format!("{prefix}.bias"))?,
        })
    }

    pub fn composite(&self, prefix: &str) -> Result<CompositeVars<'m, T>> {
        let bn = format!("{prefix}.bn");
        let running = self
            .model
            .running
            .get(&bn)
            .map(|r| (r.mean.data(), r.var.data()));
        Ok(CompositeVars {
            bn: BnVars {
                gamma: self.var(&format!("{bn}.gamma"))?,
                beta: self.var(&format!("{bn}.beta"))?,
                running,
                epsilon: T::from_f64_lossy(self.model.spec.bn_epsilon),
                name: bn,
            },
            conv: self.conv(&format!("{prefix}.conv"))?,
        })
    }
}

/// `L` composite layers, layer `l` reading the channel concatenation of the
/// block input and all earlier layer outputs. Returns the last layer's `k`
/// maps.
pub fn dense_block<T: Real>(
    g: &mut Graph<T>,
    x: Var,
    spec: &DenseBlockSpec,
    params: &Bound<'_, T>,
    prefix: &str,
    ctx: &mut ForwardCtx,
) -> Result<Var> {
    let c0 = g.shape(x).get(1).copied().unwrap_or(0);
    let mut feats = vec![x];
    for l in 1..=spec.layers {
        let input = if l == 1 { x } else { g.concat(&feats, 1)? };
        let expected = c0 + (l - 1) * spec.k;
        let got = g.shape(input)[1];
        if got != expected {
            return Err(Error::ChannelMismatch {
                op: "dense_block",
                expected,
                got,
            });
        }
        let p = params.composite(&format!("{prefix}.layer{l}"))?;
        let y = composite_layer(g, input, &p, ctx)?;
        if l > 1 {
            g.free(input);
        }
        feats.push(y);
    }
    let out = feats.pop().expect("at least one layer");
    for &f in &feats[1..] {
        g.free(f);
    }
    Ok(out)
}

/// One multi-scale band: initial conv, down path with pooling, up path with
/// transposed convolutions and skip concatenation `(up, skip)`.
pub fn mdensenet_forward<T: Real>(
    g: &mut Graph<T>,
    x: Var,
    band: &BandSpec,
    params: &Bound<'_, T>,
    ctx: &mut ForwardCtx,
) -> Result<Var> {
    let spec = params.model().spec();
    let s = spec.scales;
    let div = spec.divisor();
    let shape = g.shape(x).to_vec();
    if shape.len() != 4 || !shape[2].is_multiple_of(div) || !shape[3].is_multiple_of(div) {
        return Err(Error::invalid(format!(
            "band `{}`: input {shape:?} needs frames and bins divisible by {div}",
            band.name.as_str()
        )));
    }
    let b = band.name.as_str();
    let h0 = conv2d(g, x, &params.conv(&format!("{b}.conv0"))?)?;
    let mut cur = dense_block(g, h0, &band.blocks[0], params, &block_name(b, 0), ctx)?;
    g.free(h0);
    let mut skips = Vec::with_capacity(s);
    if s > 1 {
        skips.push(cur);
    }
    for j in 1..s {
        let p = down_sample(g, cur)?;
        cur = dense_block(g, p, &band.blocks[j], params, &block_name(b, j), ctx)?;
        g.free(p);
        if j < s - 1 {
            skips.push(cur);
        }
    }
    for j in s..2 * s - 1 {
        let u = up_sample(g, cur, &params.conv(&up_name(b, j))?)?;
        g.free(cur);
        let skip = skips.pop().expect("skip per up block");
        let c = g.concat(&[u, skip], 1)?;
        g.free(u);
        g.free(skip);
        cur = dense_block(g, c, &band.blocks[j], params, &block_name(b, j), ctx)?;
        g.free(c);
    }
    Ok(cur)
}

/// Sub-bands on their bin windows (adapted to a common width and joined
/// along frequency), the full band on all bins, channel concatenation, the
/// final dense block, the output conv and a ReLU clamp.
pub fn mmdensenet_forward<T: Real>(
    g: &mut Graph<T>,
    x: Var,
    params: &Bound<'_, T>,
    ctx: &mut ForwardCtx,
) -> Result<Var> {
    let spec = params.model().spec();
    let (_, c, frames, bins) = g.value(x).dims4()?;
    if c != spec.io_channels {
        return Err(Error::ChannelMismatch {
            op: "mmdensenet_forward",
            expected: spec.io_channels,
            got: c,
        });
    }
    spec.check_input(frames, bins)?;
    let target = spec.sub_band_channels();
    let mut subs = Vec::new();
    for band in spec.sub_bands() {
        let (start, len) = band.bin_window(bins);
        let xi = g.slice(x, 3, start, len)?;
        let mut y = mdensenet_forward(g, xi, band, params, ctx)?;
        g.free(xi);
        if Some(band.out_channels()) != target {
            let a = conv2d(g, y, &params.conv(&adapter_name(band.name.as_str()))?)?;
            g.free(y);
            y = a;
        }
        subs.push(y);
    }
    let mut parts = Vec::with_capacity(2);
    match subs.len() {
        0 => {}
        1 => parts.push(subs[0]),
        _ => {
            let f = g.concat(&subs, 3)?;
            subs.iter().for_each(|&v| g.free(v));
            parts.push(f);
        }
    }
    if let Some(full) = spec.full_band() {
        parts.push(mdensenet_forward(g, x, full, params, ctx)?);
    }
    let fused = if parts.len() == 1 {
        parts[0]
    } else {
        let f = g.concat(&parts, 1)?;
        parts.iter().for_each(|&v| g.free(v));
        f
    };
    let d = dense_block(g, fused, &spec.final_block, params, &final_block_name(spec), ctx)?;
    g.free(fused);
    let out = conv2d(g, d, &params.conv("final")?)?;
    g.free(d);
    let y = g.relu(out);
    g.free(out);
    Ok(y)
}
