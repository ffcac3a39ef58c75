//! Central finite-difference checks of analytic gradients (f64 only).

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::arch::model::block_name;
use crate::arch::{dense_block, ArchSpec, BandName, BandSpec, ConvSpec, DenseBlockSpec, Model};
use crate::autodiff::{BnMode, Graph, Var};
use crate::error::{Error, Result};
use crate::layers::{composite_layer, down_sample, up_sample, BnVars, CompositeVars, ConvVars, ForwardCtx, Mode};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub eps: f64,
    /// Relative-error denominator floor, as a fraction of the largest
    /// analytic gradient magnitude (`0` keeps only the absolute 1e-12 floor).
    pub relative_floor: f64,
    /// Coordinates sampled per tensor; `None` checks all of them.
    pub max_coords: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            eps: 1e-5,
            relative_floor: 0.0,
            max_coords: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(tensor index, flat coordinate)` of the worst coordinate.
    pub worst: (usize, usize),
    pub analytic_at_worst: f64,
    pub numeric_at_worst: f64,
    pub coords_checked: usize,
}

/// Checks `f(input)` (a scalar) against central differences over every
/// coordinate of `input`, returning the maximum relative error
/// `|a − n| / max(|a|, |n|, 1e-12)`.
pub fn grad_check<F>(f: F, input: &Tensor<f64>, eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, Var) -> Result<Var>,
{
    let opts = GradCheckOptions {
        eps,
        ..Default::default()
    };
    let report = grad_check_many(|g, vars| f(g, vars[0]), std::slice::from_ref(input), &opts)?;
    Ok(report.max_rel_error)
}

/// Multi-input variant: every tensor in `inputs` becomes a trainable leaf.
pub fn grad_check_many<F>(f: F, inputs: &[Tensor<f64>], opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let eval = |ts: &[Tensor<f64>]| -> Result<(Graph<f64>, Vec<Var>, Var)> {
        let mut g = Graph::new();
        let vars: Vec<Var> = ts.iter().map(|t| g.param(t.clone())).collect();
        let root = f(&mut g, &vars)?;
        if !g.value(root).is_scalar() {
            return Err(Error::invalid("grad_check: function must return a scalar"));
        }
        Ok((g, vars, root))
    };
    let scalar = |ts: &[Tensor<f64>], which: usize, coord: usize| -> Result<f64> {
        let (g, _, root) = eval(ts)?;
        let v = g.value(root).item();
        if v.is_nan() {
            return Err(Error::NonFinite {
                op: "grad_check",
                index: which * 1_000_000_000 + coord,
            });
        }
        Ok(v)
    };

    let (g, vars, root) = eval(inputs)?;
    if let Some(i) = g.value(root).first_non_finite() {
        return Err(Error::NonFinite { op: "grad_check", index: i });
    }
    let grads = g.backward(root)?;
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .map(|&v| grads.get(v).expect("trainable leaf").clone())
        .collect();
    drop(g);

    let max_grad = analytic.iter().map(|t| t.max_abs()).fold(0.0, f64::max);
    let floor = (opts.relative_floor * max_grad).max(1e-12);
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: (0, 0),
        analytic_at_worst: 0.0,
        numeric_at_worst: 0.0,
        coords_checked: 0,
    };
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (ti, input) in inputs.iter().enumerate() {
        let coords: Vec<usize> = match opts.max_coords {
            Some(m) if m < input.numel() => sample(&mut rng, input.numel(), m).into_vec(),
            _ => (0..input.numel()).collect(),
        };
        for c in coords {
            let orig = input.data()[c];
            work[ti].data_mut()[c] = orig + opts.eps;
            let plus = scalar(&work, ti, c)?;
            work[ti].data_mut()[c] = orig - opts.eps;
            let minus = scalar(&work, ti, c)?;
            work[ti].data_mut()[c] = orig;
            let numeric = (plus - minus) / (2.0 * opts.eps);
            let a = analytic[ti].data()[c];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
            report.coords_checked += 1;
            if rel > report.max_rel_error || rel.is_nan() {
                report.max_rel_error = rel;
                report.worst = (ti, c);
                report.analytic_at_worst = a;
                report.numeric_at_worst = numeric;
            }
        }
    }
    Ok(report)
}

/// Denominator floor for network-level checks. Conv biases that feed a
/// batch norm have an exactly zero gradient, where central differences only
/// see rounding noise.
pub const NETWORK_FLOOR: f64 = 1e-5;

/// One entry of [`run_suite`].
#[derive(Clone, Debug)]
pub struct SuiteCase {
    pub name: &'static str,
    pub tolerance: f64,
    pub report: GradCheckReport,
}

impl SuiteCase {
    pub fn passed(&self) -> bool {
        self.report.max_rel_error < self.tolerance
    }
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// `mean(y ⊙ w)` for a fixed random `w`, so every output coordinate carries
/// a distinct weight.
fn weighted_mean(g: &mut Graph<f64>, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = uniform(&mut rng, g.shape(y), -1.0, 1.0);
    let wv = g.constant(w);
    let p = g.mul(y, wv)?;
    Ok(g.mean(p))
}

fn dense_block_spec() -> ArchSpec {
    ArchSpec {
        name: "gradcheck-dense".into(),
        scales: 1,
        io_channels: 3,
        bn_epsilon: 1e-5,
        bn_momentum: 0.9,
        seed: 5,
        bands: vec![BandSpec {
            name: BandName::Full,
            bin_range: (0.0, 1.0),
            initial_conv: ConvSpec { kt: 1, kf: 1, ch: 3 },
            blocks: vec![DenseBlockSpec::new(2, 2)],
        }],
        final_block: DenseBlockSpec::new(1, 1),
        final_conv: ConvSpec { kt: 1, kf: 1, ch: 3 },
    }
}

/// Miniature MMDenseNet used by the end-to-end check: Table 1 layout at a
/// quarter of the widths.
pub fn mini_mmdensenet() -> ArchSpec {
    ArchSpec::mmdensenet_table1().scaled_widths(0.25).with_seed(11)
}

/// Checks `model` end to end on a `(1, io, frames, bins)` input against
/// every parameter (sampling `coords` coordinates per tensor).
pub fn check_model(spec: &ArchSpec, frames: usize, bins: usize, coords: usize, seed: u64) -> Result<GradCheckReport> {
    let model = Model::<f64>::build(spec)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = uniform(&mut rng, &[1, spec.io_channels, frames, bins], 0.0, 2.0);
    let mut inputs = vec![x];
    inputs.extend(model.params().values().cloned());
    let opts = GradCheckOptions {
        eps: 1e-6,
        relative_floor: NETWORK_FLOOR,
        max_coords: Some(coords),
        seed,
    };
    grad_check_many(
        |g, v| {
            let bound = model.bind_vars(&v[1..])?;
            let fwd = model.forward_bound(g, v[0], bound, Mode::Train)?;
            weighted_mean(g, fwd.output, seed + 1)
        },
        &inputs,
        &opts,
    )
}

/// Finite-difference checks of every layer type, a (k=2, L=2) dense block
/// and a miniature MMDenseNet at 16 frames × 64 bins.
pub fn run_suite() -> Result<Vec<SuiteCase>> {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let opts = GradCheckOptions {
        eps: 1e-6,
        ..Default::default()
    };
    let mut cases = Vec::new();
    let mut push = |name, tolerance, report| cases.push(SuiteCase { name, tolerance, report });

    let x = uniform(&mut rng, &[2, 2, 4, 6], -1.0, 1.0);
    let w = uniform(&mut rng, &[3, 2, 3, 4], -1.0, 1.0);
    let b = uniform(&mut rng, &[3], -1.0, 1.0);
    let r = grad_check_many(
        |g, v| {
            let y = g.conv2d(v[0], v[1], v[2])?;
            weighted_mean(g, y, 1)
        },
        &[x.clone(), w, b],
        &opts,
    )?;
    push("conv2d", 1e-4, r);

    let gamma = uniform(&mut rng, &[2], 0.5, 1.5);
    let beta = uniform(&mut rng, &[2], -0.5, 0.5);
    let r = grad_check_many(
        |g, v| {
            let y = g.batch_norm(v[0], v[1], v[2], BnMode::Train { eps: 1e-5 })?;
            weighted_mean(g, y, 2)
        },
        &[x.clone(), gamma.clone(), beta.clone()],
        &opts,
    )?;
    push("batch_norm (train)", 1e-4, r);

    let (mean, var) = ([0.1, -0.2], [0.8, 1.3]);
    let r = grad_check_many(
        |g, v| {
            let y = g.batch_norm(
                v[0],
                v[1],
                v[2],
                BnMode::Eval {
                    mean: &mean,
                    var: &var,
                    eps: 1e-5,
                },
            )?;
            weighted_mean(g, y, 3)
        },
        &[x.clone(), gamma.clone(), beta.clone()],
        &opts,
    )?;
    push("batch_norm (eval)", 1e-4, r);

    let away = x.map(|v| if v.abs() < 1e-3 { v + 1e-2 } else { v });
    let r = grad_check_many(
        |g, v| {
            let y = g.relu(v[0]);
            weighted_mean(g, y, 4)
        },
        &[away],
        &opts,
    )?;
    push("relu", 1e-4, r);

    let r = grad_check_many(
        |g, v| {
            let y = down_sample(g, v[0])?;
            weighted_mean(g, y, 5)
        },
        std::slice::from_ref(&x),
        &opts,
    )?;
    push("down_sample", 1e-4, r);

    let wu = uniform(&mut rng, &[3, 2, 2, 2], -1.0, 1.0);
    let bu = uniform(&mut rng, &[3], -1.0, 1.0);
    let r = grad_check_many(
        |g, v| {
            let y = up_sample(g, v[0], &ConvVars { kernel: v[1], bias: v[2] })?;
            weighted_mean(g, y, 6)
        },
        &[x.clone(), wu, bu],
        &opts,
    )?;
    push("up_sample", 1e-4, r);

    let wc = uniform(&mut rng, &[4, 2, 3, 3], -1.0, 1.0);
    let bc = uniform(&mut rng, &[4], -1.0, 1.0);
    let r = grad_check_many(
        |g, v| {
            let p = CompositeVars {
                bn: BnVars {
                    name: "composite".into(),
                    gamma: v[1],
                    beta: v[2],
                    running: None,
                    epsilon: 1e-5,
                },
                conv: ConvVars { kernel: v[3], bias: v[4] },
            };
            let y = composite_layer(g, v[0], &p, &mut ForwardCtx::train())?;
            weighted_mean(g, y, 7)
        },
        &[x.clone(), gamma, beta, wc, bc],
        &opts,
    )?;
    push("composite_layer", 1e-4, r);

    let y0 = uniform(&mut rng, &[2, 3, 4, 6], -1.0, 1.0);
    let r = grad_check_many(
        |g, v| {
            let c = g.concat(&[v[0], v[1]], 1)?;
            let s = g.slice(c, 3, 1, 4)?;
            weighted_mean(g, s, 8)
        },
        &[x.clone(), y0],
        &opts,
    )?;
    push("concat + slice", 1e-4, r);

    let spec = dense_block_spec();
    let model = Model::<f64>::build(&spec)?;
    let block = spec.bands[0].blocks[0];
    let prefix = block_name(spec.bands[0].name.as_str(), 0);
    let names: Vec<String> = model
        .params()
        .keys()
        .filter(|k| k.starts_with(&format!("{prefix}.")))
        .cloned()
        .collect();
    let xd = uniform(&mut rng, &[2, 3, 4, 6], -1.0, 1.0);
    let mut inputs = vec![xd];
    inputs.extend(names.iter().map(|n| model.params()[n].clone()));
    let r = grad_check_many(
        |g, v| {
            let mut all: Vec<Var> = Vec::with_capacity(model.params().len());
            for (name, t) in model.params() {
                all.push(match names.iter().position(|n| n == name) {
                    Some(i) => v[1 + i],
                    None => g.constant(t.clone()),
                });
            }
            let bound = model.bind_vars(&all)?;
            let y = dense_block(g, v[0], &block, &bound, &prefix, &mut ForwardCtx::train())?;
            weighted_mean(g, y, 9)
        },
        &inputs,
        &GradCheckOptions {
            relative_floor: NETWORK_FLOOR,
            ..opts.clone()
        },
    )?;
    push("dense block k=2 L=2", 1e-4, r);

    let r = check_model(&mini_mmdensenet(), 16, 64, 6, 10)?;
    push("mmdensenet 16x64", 1e-3, r);
    Ok(cases)
}
