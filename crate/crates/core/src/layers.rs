//! Network building blocks: convolution, batch norm, the BN→ReLU→conv
//! composite layer, pooling and transposed-convolution up-sampling.
//!
//! Parameter records own tensors; binding them into a [`Graph`] yields the
//! `*Vars` handles the layer functions consume.

use crate::autodiff::{BnMode, Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub const DEFAULT_BN_EPSILON: f64 = 1e-5;
pub const DEFAULT_BN_MOMENTUM: f64 = 0.9;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Conv2dParams<T> {
    /// `(out_ch, in_ch, kt, kf)`; `kt` runs along frames, `kf` along bins.
    pub kernel: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Real> Conv2dParams<T> {
    pub fn new(kernel: Tensor<T>, bias: Tensor<T>) -> Result<Self> {
        let [out, _, _, _] = *kernel.shape() else {
            return Err(Error::invalid(format!(
                "conv kernel must be 4-d, got {:?}",
                kernel.shape()
            )));
        };
        if bias.shape() != [out] {
            return Err(Error::ShapeMismatch {
                op: "conv2d params",
                left: vec![out],
                right: bias.shape().to_vec(),
            });
        }
        Ok(Conv2dParams { kernel, bias })
    }

    pub fn zeros(out_ch: usize, in_ch: usize, kt: usize, kf: usize) -> Self {
        Conv2dParams {
            kernel: Tensor::zeros(&[out_ch, in_ch, kt, kf]),
            bias: Tensor::zeros(&[out_ch]),
        }
    }

    pub fn out_ch(&self) -> usize {
        self.kernel.shape()[0]
    }

    pub fn in_ch(&self) -> usize {
        self.kernel.shape()[1]
    }

    pub fn bind(&self, g: &mut Graph<T>) -> ConvVars {
        ConvVars {
            kernel: g.param(self.kernel.clone()),
            bias: g.param(self.bias.clone()),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats<T> {
    pub mean: Tensor<T>,
    pub var: Tensor<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormParams<T> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub running: Option<RunningStats<T>>,
    pub momentum: T,
    pub epsilon: T,
}

impl<T: Real> BatchNormParams<T> {
    /// gamma 1, beta 0, running stats (0, 1).
    pub fn new(ch: usize) -> Self {
        BatchNormParams {
            gamma: Tensor::ones(&[ch]),
            beta: Tensor::zeros(&[ch]),
            running: Some(RunningStats {
                mean: Tensor::zeros(&[ch]),
                var: Tensor::ones(&[ch]),
            }),
            momentum: T::from_f64_lossy(DEFAULT_BN_MOMENTUM),
            epsilon: T::from_f64_lossy(DEFAULT_BN_EPSILON),
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.numel()
    }

    /// `running ← momentum·running + (1 − momentum)·batch`.
    pub fn update_running(&mut self, mean: &[T], var: &[T]) {
        update_running(self.running.as_mut(), self.momentum, mean, var);
    }

    pub fn bind<'a>(&'a self, g: &mut Graph<T>, name: &str) -> BnVars<'a, T> {
        BnVars {
            name: name.to_string(),
            gamma: g.param(self.gamma.clone()),
            beta: g.param(self.beta.clone()),
            running: self
                .running
                .as_ref()
                .map(|r| (r.mean.data(), r.var.data())),
            epsilon: self.epsilon,
        }
    }
}

pub(crate) fn update_running<T: Real>(running: Option<&mut RunningStats<T>>, momentum: T, mean: &[T], var: &[T]) {
    if let Some(r) = running {
        let keep = momentum;
        let take = T::one() - momentum;
        r.mean
            .data_mut()
            .iter_mut()
            .zip(mean)
            .for_each(|(r, &m)| *r = keep * *r + take * m);
        r.var
            .data_mut()
            .iter_mut()
            .zip(var)
            .for_each(|(r, &v)| *r = keep * *r + take * v);
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CompositeLayerParams<T> {
    pub bn: BatchNormParams<T>,
    pub conv: Conv2dParams<T>,
}

impl<T: Real> CompositeLayerParams<T> {
    pub fn new(bn: BatchNormParams<T>, conv: Conv2dParams<T>) -> Result<Self> {
        if bn.channels() != conv.in_ch() {
            return Err(Error::ChannelMismatch {
                op: "composite layer",
                expected: conv.in_ch(),
                got: bn.channels(),
            });
        }
        Ok(CompositeLayerParams { bn, conv })
    }

    pub fn bind<'a>(&'a self, g: &mut Graph<T>, name: &str) -> CompositeVars<'a, T> {
        CompositeVars {
            bn: self.bn.bind(g, name),
            conv: self.conv.bind(g),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ConvVars {
    pub kernel: Var,
    pub bias: Var,
}

#[derive(Clone, Debug)]
pub struct BnVars<'a, T> {
    pub name: String,
    pub gamma: Var,
    pub beta: Var,
    pub running: Option<(&'a [T], &'a [T])>,
    pub epsilon: T,
}

#[derive(Clone, Debug)]
pub struct CompositeVars<'a, T> {
    pub bn: BnVars<'a, T>,
    pub conv: ConvVars,
}

/// Forward-pass context: the mode plus the training-mode batch-norm nodes
/// whose batch statistics feed the running averages afterwards.
#[derive(Debug)]
pub struct ForwardCtx {
    pub mode: Mode,
    bn_nodes: Vec<(String, Var)>,
}

impl ForwardCtx {
    pub fn new(mode: Mode) -> Self {
        ForwardCtx {
            mode,
            bn_nodes: Vec::new(),
        }
    }

    pub fn train() -> Self {
        Self::new(Mode::Train)
    }

    pub fn eval() -> Self {
        Self::new(Mode::Eval)
    }

    /// `(layer name, node)` of every training-mode batch norm, in order.
    pub fn bn_nodes(&self) -> &[(String, Var)] {
        &self.bn_nodes
    }
}

pub fn conv2d<T: Real>(g: &mut Graph<T>, x: Var, p: &ConvVars) -> Result<Var> {
    g.conv2d(x, p.kernel, p.bias)
}

pub fn batch_norm<T: Real>(g: &mut Graph<T>, x: Var, p: &BnVars<'_, T>, ctx: &mut ForwardCtx) -> Result<Var> {
    match ctx.mode {
        Mode::Train => {
            let y = g.batch_norm(x, p.gamma, p.beta, BnMode::Train { eps: p.epsilon })?;
            ctx.bn_nodes.push((p.name.clone(), y));
            Ok(y)
        }
        Mode::Eval => {
            let (mean, var) = p
                .running
                .ok_or_else(|| Error::UninitializedRunningStats(p.name.clone()))?;
            g.batch_norm(
                x,
                p.gamma,
                p.beta,
                BnMode::Eval {
                    mean,
                    var,
                    eps: p.epsilon,
                },
            )
        }
    }
}

/// `conv2d(relu(batch_norm(x)))`.
pub fn composite_layer<T: Real>(
    g: &mut Graph<T>,
    x: Var,
    p: &CompositeVars<'_, T>,
    ctx: &mut ForwardCtx,
) -> Result<Var> {
    let n = batch_norm(g, x, &p.bn, ctx)?;
    let r = g.relu(n);
    g.free(n);
    let y = conv2d(g, r, &p.conv)?;
    g.free(r);
    Ok(y)
}

/// 2×2 average pooling, stride 2.
pub fn down_sample<T: Real>(g: &mut Graph<T>, x: Var) -> Result<Var> {
    g.avg_pool2(x)
}

/// Transposed 2×2 convolution, stride 2: doubles frames and bins.
pub fn up_sample<T: Real>(g: &mut Graph<T>, x: Var, p: &ConvVars) -> Result<Var> {
    g.conv_transpose2(x, p.kernel, p.bias)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{grad_check_many, GradCheckOptions};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(seed: u64, shape: &[usize]) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn conv_same_padding_counts() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::ones(&[1, 1, 4, 4]));
        let p = Conv2dParams::new(Tensor::ones(&[1, 1, 3, 3]), Tensor::zeros(&[1])).unwrap();
        let v = p.bind(&mut g);
        let y = conv2d(&mut g, x, &v).unwrap();
        let y = g.value(y);
        assert_eq!(y.shape(), &[1, 1, 4, 4]);
        assert_eq!(y.get(&[0, 0, 1, 1]), 9.0);
        assert_eq!(y.get(&[0, 0, 2, 2]), 9.0);
        assert_eq!(y.get(&[0, 0, 0, 0]), 4.0);
        assert_eq!(y.get(&[0, 0, 3, 3]), 4.0);
        assert_eq!(y.get(&[0, 0, 0, 1]), 6.0);
    }

    #[test]
    fn unit_one_by_one_is_identity() {
        let mut g = Graph::<f64>::new();
        let xt = rand_tensor(1, &[2, 1, 3, 5]);
        let x = g.constant(xt.clone());
        let p = Conv2dParams::new(Tensor::ones(&[1, 1, 1, 1]), Tensor::zeros(&[1])).unwrap();
        let v = p.bind(&mut g);
        let y = conv2d(&mut g, x, &v).unwrap();
        assert_eq!(g.value(y), &xt);
    }

    #[test]
    fn even_kernel_pads_trailing_side() {
        // A 1×2 kernel [0, 1] reads the next bin; the last bin reads the pad.
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::new(vec![1, 1, 1, 3], vec![1., 2., 3.]).unwrap());
        let p = Conv2dParams::new(
            Tensor::new(vec![1, 1, 1, 2], vec![0., 1.]).unwrap(),
            Tensor::zeros(&[1]),
        )
        .unwrap();
        let v = p.bind(&mut g);
        let y = conv2d(&mut g, x, &v).unwrap();
        assert_eq!(g.value(y).data(), &[2., 3., 0.]);
    }

    #[test]
    fn conv_channel_mismatch_names_both_counts() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::zeros(&[1, 3, 4, 4]));
        let v = Conv2dParams::zeros(2, 2, 3, 3).bind(&mut g);
        match conv2d(&mut g, x, &v) {
            Err(Error::ChannelMismatch { expected: 2, got: 3, .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn batch_norm_train_normalizes() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(rand_tensor(2, &[3, 2, 4, 5]).map(|v| 3.0 * v + 1.5));
        let p = BatchNormParams::<f64>::new(2);
        let v = p.bind(&mut g, "bn");
        let mut ctx = ForwardCtx::train();
        let y = batch_norm(&mut g, x, &v, &mut ctx).unwrap();
        let yt = g.value(y);
        for c in 0..2 {
            let vals: Vec<f64> = (0..3)
                .flat_map(|n| (0..4).flat_map(move |t| (0..5).map(move |f| (n, t, f))))
                .map(|(n, t, f)| yt.get(&[n, c, t, f]))
                .collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
            assert!(mean.abs() < 1e-5);
            assert!((var - 1.0).abs() < 1e-3);
        }
        assert_eq!(ctx.bn_nodes().len(), 1);
    }

    #[test]
    fn batch_norm_constant_channel_gives_beta() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::full(&[2, 1, 3, 3], 4.2));
        let mut p = BatchNormParams::<f64>::new(1);
        p.beta = Tensor::full(&[1], 0.7);
        let v = p.bind(&mut g, "bn");
        let y = batch_norm(&mut g, x, &v, &mut ForwardCtx::train()).unwrap();
        assert!(g.value(y).data().iter().all(|&y| (y - 0.7).abs() < 1e-12));
    }

    #[test]
    fn batch_norm_eval_uses_running_stats() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::full(&[1, 1, 1, 1], 0.5));
        let mut p = BatchNormParams::<f64>::new(1);
        p.gamma = Tensor::full(&[1], 2.0);
        p.beta = Tensor::full(&[1], 1.0);
        let v = p.bind(&mut g, "bn");
        let y = batch_norm(&mut g, x, &v, &mut ForwardCtx::eval()).unwrap();
        let want = 2.0 * 0.5 / (1.0f64 + 1e-5).sqrt() + 1.0;
        assert!((g.value(y).item() - want).abs() < 1e-12);
        assert!((g.value(y).item() - 1.9999).abs() < 1e-4);
    }

    #[test]
    fn batch_norm_eval_without_running_stats_is_rejected() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::zeros(&[1, 1, 2, 2]));
        let mut p = BatchNormParams::<f64>::new(1);
        p.running = None;
        let v = p.bind(&mut g, "dense1.layer0.bn");
        assert!(matches!(
            batch_norm(&mut g, x, &v, &mut ForwardCtx::eval()),
            Err(Error::UninitializedRunningStats(_))
        ));
    }

    #[test]
    fn running_stats_follow_momentum() {
        let mut p = BatchNormParams::<f64>::new(1);
        p.update_running(&[2.0], &[3.0]);
        let r = p.running.as_ref().unwrap();
        assert!((r.mean.item() - 0.2).abs() < 1e-12);
        assert!((r.var.item() - 1.2).abs() < 1e-12);
    }

    #[test]
    fn composite_layer_emits_k_maps_and_bias_when_dead() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(rand_tensor(5, &[2, 3, 4, 6]));
        let mut bn = BatchNormParams::new(3);
        bn.gamma = Tensor::zeros(&[3]);
        bn.beta = Tensor::full(&[3], -1.0);
        let conv = Conv2dParams::new(rand_tensor(6, &[5, 3, 3, 3]), Tensor::full(&[5], 0.25)).unwrap();
        let p = CompositeLayerParams::new(bn, conv).unwrap();
        let v = p.bind(&mut g, "layer");
        let y = composite_layer(&mut g, x, &v, &mut ForwardCtx::train()).unwrap();
        assert_eq!(g.shape(y), &[2, 5, 4, 6]);
        assert!(g.value(y).data().iter().all(|&v| v == 0.25));
    }

    #[test]
    fn composite_layer_gradients() {
        let x = rand_tensor(7, &[1, 3, 6, 8]);
        let gamma = rand_tensor(8, &[3]).map(|v| v + 1.5);
        let beta = rand_tensor(9, &[3]);
        let w = rand_tensor(10, &[4, 3, 3, 3]);
        let b = rand_tensor(11, &[4]);
        let weights = rand_tensor(12, &[1, 4, 6, 8]);
        let opts = GradCheckOptions {
            eps: 1e-6,
            ..Default::default()
        };
        let report = grad_check_many(
            |g, v| {
                let mut ctx = ForwardCtx::train();
                let bn = BnVars {
                    name: "l".into(),
                    gamma: v[1],
                    beta: v[2],
                    running: None,
                    epsilon: 1e-5,
                };
                let p = CompositeVars {
                    bn,
                    conv: ConvVars { kernel: v[3], bias: v[4] },
                };
                let y = composite_layer(g, v[0], &p, &mut ctx)?;
                let wt = g.constant(weights.clone());
                let prod = g.mul(y, wt)?;
                Ok(g.mean(prod))
            },
            &[x, gamma, beta, w, b],
            &opts,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }

    #[test]
    fn pooling_examples_and_gradient() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::full(&[1, 2, 4, 6], 3.5));
        let y = down_sample(&mut g, x).unwrap();
        assert_eq!(g.shape(y), &[1, 2, 2, 3]);
        assert!(g.value(y).data().iter().all(|&v| v == 3.5));

        let odd = g.constant(Tensor::zeros(&[1, 1, 3, 4]));
        assert!(down_sample(&mut g, odd).is_err());

        let xt = rand_tensor(13, &[2, 2, 4, 4]);
        let wt = rand_tensor(14, &[2, 2, 2, 2]);
        let r = grad_check_many(
            |g, v| {
                let p = down_sample(g, v[0])?;
                let w = g.constant(wt.clone());
                let m = g.mul(p, w)?;
                Ok(g.mean(m))
            },
            &[xt],
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-6, "{r:?}");
    }

    #[test]
    fn up_sample_single_tap_spread_and_shape() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::ones(&[1, 1, 1, 1]));
        let p = Conv2dParams::new(Tensor::ones(&[1, 1, 2, 2]), Tensor::zeros(&[1])).unwrap();
        let v = p.bind(&mut g);
        let y = up_sample(&mut g, x, &v).unwrap();
        assert_eq!(g.shape(y), &[1, 1, 2, 2]);
        assert_eq!(g.value(y).data(), &[1., 1., 1., 1.]);

        let z = g.constant(Tensor::zeros(&[1, 1, 8, 6]));
        let d = down_sample(&mut g, z).unwrap();
        let u = up_sample(&mut g, d, &v).unwrap();
        assert_eq!(g.shape(u), &[1, 1, 8, 6]);
    }

    /// `⟨up_sample(x), u⟩ = ⟨x, C(u)⟩` where `C` is the forward 2×2
    /// stride-2 convolution written out directly.
    #[test]
    fn up_sample_is_adjoint_of_strided_conv() {
        let (cin, cout, h, w) = (3, 2, 3, 4);
        let x = rand_tensor(20, &[1, cin, h, w]);
        let k = rand_tensor(21, &[cout, cin, 2, 2]);
        let u = rand_tensor(22, &[1, cout, 2 * h, 2 * w]);
        let mut g = Graph::<f64>::new();
        let xv = g.constant(x.clone());
        let kv = g.constant(k.clone());
        let bv = g.constant(Tensor::zeros(&[cout]));
        let y = g.conv_transpose2(xv, kv, bv).unwrap();
        let lhs: f64 = g.value(y).data().iter().zip(u.data()).map(|(a, b)| a * b).sum();
        let mut rhs = 0.0;
        for i in 0..cin {
            for t in 0..h {
                for f in 0..w {
                    let mut cu = 0.0;
                    for o in 0..cout {
                        for a in 0..2 {
                            for b in 0..2 {
                                cu += k.get(&[o, i, a, b]) * u.get(&[0, o, 2 * t + a, 2 * f + b]);
                            }
                        }
                    }
                    rhs += x.get(&[0, i, t, f]) * cu;
                }
            }
        }
        assert!((lhs - rhs).abs() < 1e-5 * rhs.abs().max(1.0), "{lhs} vs {rhs}");
    }

    #[test]
    fn conv_and_up_sample_gradients() {
        let x = rand_tensor(30, &[2, 2, 4, 6]);
        let w = rand_tensor(31, &[3, 2, 3, 4]);
        let b = rand_tensor(32, &[3]);
        let wu = rand_tensor(33, &[2, 3, 2, 2]);
        let bu = rand_tensor(34, &[2]);
        let mix = rand_tensor(35, &[2, 2, 8, 12]);
        let r = grad_check_many(
            |g, v| {
                let c = g.conv2d(v[0], v[1], v[2])?;
                let u = g.conv_transpose2(c, v[3], v[4])?;
                let m = g.constant(mix.clone());
                let p = g.mul(u, m)?;
                Ok(g.mean(p))
            },
            &[x, w, b, wu, bu],
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-4, "{r:?}");
    }
}
