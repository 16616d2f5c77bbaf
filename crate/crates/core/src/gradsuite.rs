//! Finite-difference checks of every differentiable op and composite block,
//! run in `f64` on small random shapes.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::loss::{seg_loss, ClassWeights, UncertaintyWeights, IGNORE_LABEL};
use crate::nn::{
    init_params, BatchNorm2d, Binding, Conv2d, ConvTranspose2d, DenseBlock, Downsampler, Mode, NonBottleneck1d,
    ParamRegistry, Scope, Transition,
};
use crate::seed::{derive, label};
use crate::seg::{SegArch, SegNetConfig};
use crate::tensor::gradcheck::{check, check_fn, GradcheckConfig, GradcheckReport, Operand};
use crate::tensor::{BnStats, ConvGeometry, Graph, Reduction, Tensor, Var};
use crate::transfer::{
    cycle_loss, disc_adversarial_loss, gen_adversarial_loss, translate_var, GenLoss, Generator, PatchDiscriminator,
};

/// Parameter count the segmentation network is compared against.
pub const TARGET_PARAMS: usize = 2_400_000;
/// Accepted relative deviation from [`TARGET_PARAMS`].
pub const PARAM_TOLERANCE: f64 = 0.30;

#[derive(Clone, Debug)]
pub struct SuiteEntry {
    pub name: String,
    pub report: GradcheckReport,
}

/// Parameter count of the full-size network and its deviation from the target.
pub fn param_report() -> Result<(usize, f64)> {
    let mut reg = ParamRegistry::<f32>::new();
    SegArch::new(&SegNetConfig::default(), &mut reg, "seg")?;
    let n = reg.param_count();
    Ok((n, n as f64 / TARGET_PARAMS as f64 - 1.0))
}

struct Shapes {
    rng: ChaCha8Rng,
}

impl Shapes {
    fn dim(&mut self, lo: usize, hi: usize) -> usize {
        self.rng.random_range(lo..=hi)
    }

    fn tensor(&mut self, shape: &[usize]) -> Tensor<f64> {
        let r = &mut self.rng;
        Tensor::from_fn(shape.to_vec(), |_| r.random_range(-1.0..1.0))
    }

    /// Values kept away from zero so sign-dependent ops stay smooth under
    /// the perturbation.
    fn tensor_off_zero(&mut self, shape: &[usize]) -> Tensor<f64> {
        let r = &mut self.rng;
        Tensor::from_fn(shape.to_vec(), |_| {
            let m = r.random_range(0.05..1.0);
            if r.random_bool(0.5) {
                m
            } else {
                -m
            }
        })
    }

    /// `[n, c, h, w]` with `n <= 2`, `c <= 4`, `h, w` in `lo..=8`.
    fn nchw(&mut self, lo: usize) -> [usize; 4] {
        [self.dim(1, 2), self.dim(1, 4), self.dim(lo, 8), self.dim(lo, 8)]
    }
}

/// Checks a parametrised block: the input and every parameter are perturbed.
fn check_block<F>(reg: &ParamRegistry<f64>, input: Tensor<f64>, cfg: &GradcheckConfig, fwd: F) -> Result<GradcheckReport>
where
    F: Fn(&mut Graph<f64>, &mut Binding<'_, f64>, Var) -> Result<Var>,
{
    let mut ops = vec![Operand::new("input", input)];
    ops.extend(reg.iter().map(|(n, t)| Operand::new(n, t.clone())));
    check(
        &mut ops,
        |g, ops| {
            let mut r = reg.clone();
            for (op, id) in ops[1..].iter().zip(reg.ids().collect::<Vec<_>>()) {
                *r.param_mut(id) = op.value.clone();
            }
            let ids: Vec<_> = r.ids().collect();
            let mut b = Binding::new(&mut r, Mode::Train).with_seed(7);
            let x = g.param(ops[0].value.clone());
            let out = fwd(g, &mut b, x)?;
            let mut leaves = vec![x];
            leaves.extend(ids.into_iter().map(|id| b.var(g, id)));
            Ok((out, leaves))
        },
        cfg,
    )
}

fn seeded_registry<B>(seed: u64, build: impl FnOnce(&mut Scope<'_, f64>) -> Result<B>) -> Result<(ParamRegistry<f64>, B)> {
    let mut reg = ParamRegistry::new();
    let block = build(&mut Scope::new(&mut reg, ""))?;
    init_params(&mut reg, seed);
    // non-trivial affine parameters so the batch-norm path is exercised
    let mut r = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    for (name, t) in reg.iter_mut() {
        if name.ends_with("gamma") || name.ends_with("beta") || name.ends_with("bias") {
            t.data_mut().iter_mut().for_each(|v| *v += r.random_range(-0.5..0.5));
        }
    }
    Ok((reg, block))
}

/// Runs the whole suite. `seed` fixes every random shape and value.
pub fn run_suite(seed: u64) -> Result<Vec<SuiteEntry>> {
    run_suite_with(&GradcheckConfig {
        seed,
        ..Default::default()
    })
}

/// [`run_suite`] with explicit step, tolerance and seed.
pub fn run_suite_with(cfg: &GradcheckConfig) -> Result<Vec<SuiteEntry>> {
    let cfg = cfg.clone();
    let seed = cfg.seed;
    let mut sh = Shapes {
        rng: ChaCha8Rng::seed_from_u64(derive(seed, &[label("gradsuite")])),
    };
    let mut out = Vec::new();
    let mut push = |name: &str, report: GradcheckReport| {
        out.push(SuiteEntry {
            name: name.to_string(),
            report,
        })
    };

    // convolutions
    for (name, stride, pad, dil) in [("conv2d", 1, 1, 1), ("conv2d_strided", 2, 1, 1), ("conv2d_dilated", 1, 2, 2)] {
        let [n, ci, h, w] = sh.nchw(4);
        let co = sh.dim(1, 4);
        let (kh, kw) = (sh.dim(1, 3), sh.dim(1, 3));
        let geom = ConvGeometry::new(stride, pad).with_dilation(dil, dil);
        let mut ops = [
            Operand::new("x", sh.tensor(&[n, ci, h, w])),
            Operand::new("w", sh.tensor(&[co, ci, kh, kw])),
            Operand::new("b", sh.tensor(&[co])),
        ];
        push(name, check_fn(&mut ops, |g, v| g.conv2d(v[0], v[1], Some(v[2]), geom), &cfg)?);
    }
    {
        let [n, ci, h, w] = sh.nchw(2);
        let co = sh.dim(1, 4);
        let geom = ConvGeometry::new(2, 1).with_output_padding(1, 1);
        let mut ops = [
            Operand::new("x", sh.tensor(&[n, ci, h.min(4), w.min(4)])),
            Operand::new("w", sh.tensor(&[ci, co, 3, 3])),
            Operand::new("b", sh.tensor(&[co])),
        ];
        push(
            "conv_transpose2d",
            check_fn(&mut ops, |g, v| g.conv_transpose2d(v[0], v[1], Some(v[2]), geom), &cfg)?,
        );
    }

    // pooling
    for name in ["max_pool2d", "avg_pool2d"] {
        let [n, c, h, w] = sh.nchw(2);
        let mut ops = [Operand::new("x", sh.tensor(&[n, c, h / 2 * 2, w / 2 * 2]))];
        let r = check_fn(
            &mut ops,
            |g, v| if name == "max_pool2d" { g.max_pool2d(v[0]) } else { g.avg_pool2d(v[0]) },
            &cfg,
        )?;
        push(name, r);
    }

    // batch norm with batch and with fixed statistics
    {
        let [n, c, h, w] = sh.nchw(2);
        let mut ops = [
            Operand::new("x", sh.tensor(&[n, c, h, w])),
            Operand::new("gamma", sh.tensor(&[c])),
            Operand::new("beta", sh.tensor(&[c])),
        ];
        push(
            "batch_norm_batch_stats",
            check_fn(&mut ops, |g, v| Ok(g.batch_norm(v[0], v[1], v[2], BnStats::Batch, 1e-5)?.0), &cfg)?,
        );
        let mean: Vec<f64> = (0..c).map(|i| 0.1 * i as f64).collect();
        let var: Vec<f64> = (0..c).map(|i| 0.5 + 0.2 * i as f64).collect();
        push(
            "batch_norm_fixed_stats",
            check_fn(
                &mut ops,
                |g, v| {
                    let s = BnStats::Fixed { mean: &mean, var: &var };
                    Ok(g.batch_norm(v[0], v[1], v[2], s, 1e-5)?.0)
                },
                &cfg,
            )?,
        );
    }

    // pointwise
    type Unary = fn(&mut Graph<f64>, Var) -> Var;
    let unary: [(&str, Unary); 6] = [
        ("relu", |g, x| g.relu(x)),
        ("leaky_relu", |g, x| g.leaky_relu(x, 0.2)),
        ("tanh", |g, x| g.tanh(x)),
        ("exp", |g, x| g.exp(x)),
        ("affine", |g, x| g.affine(x, -1.7, 0.3)),
        ("log_sigmoid", |g, x| g.log_sigmoid(x, 1e-8)),
    ];
    for (name, f) in unary {
        let s = sh.nchw(1);
        let mut ops = [Operand::new("x", sh.tensor_off_zero(&s))];
        push(name, check_fn(&mut ops, |g, v| Ok(f(g, v[0])), &cfg)?);
    }
    type Binary = fn(&mut Graph<f64>, Var, Var) -> Result<Var>;
    let binary: [(&str, Binary); 4] = [
        ("add", |g, a, b| g.add(a, b)),
        ("sub", |g, a, b| g.sub(a, b)),
        ("mul", |g, a, b| g.mul(a, b)),
        ("l1_mean", |g, a, b| g.l1_mean(a, b)),
    ];
    for (name, f) in binary {
        let s = sh.nchw(1);
        let a = sh.tensor(&s);
        // keep |a - b| away from zero for the L1 kink
        let d = sh.tensor_off_zero(&s);
        let b = Tensor::new(s.to_vec(), a.data().iter().zip(d.data()).map(|(x, y)| x + y).collect())?;
        let mut ops = [Operand::new("a", a), Operand::new("b", b)];
        push(name, check_fn(&mut ops, |g, v| f(g, v[0], v[1]), &cfg)?);
    }
    for (name, f) in [("sum", Graph::<f64>::sum as fn(&mut Graph<f64>, Var) -> Var), ("mean", Graph::mean)] {
        let s = sh.nchw(1);
        let mut ops = [Operand::new("x", sh.tensor(&s))];
        push(name, check_fn(&mut ops, |g, v| Ok(f(g, v[0])), &cfg)?);
    }

    // layout
    {
        let [n, c, h, w] = sh.nchw(1);
        let c2 = sh.dim(1, 4);
        let mut ops = [
            Operand::new("a", sh.tensor(&[n, c, h, w])),
            Operand::new("b", sh.tensor(&[n, c2, h, w])),
        ];
        push("concat_channels", check_fn(&mut ops, |g, v| g.concat_channels(v[0], v[1]), &cfg)?);
        let mut ops = [
            Operand::new("a", sh.tensor(&[1, c, h, w])),
            Operand::new("b", sh.tensor(&[n, c, h, w])),
        ];
        push("concat_batch", check_fn(&mut ops, |g, v| g.concat_batch(&[v[0], v[1]]), &cfg)?);
        let coeffs: Vec<f64> = (0..c).map(|i| 0.3 + 0.25 * i as f64).collect();
        let mut ops = [Operand::new("x", sh.tensor(&[n, c, h, w]))];
        push("channel_mix", check_fn(&mut ops, |g, v| g.channel_mix(v[0], &coeffs), &cfg)?);
        let mut ops = [Operand::new("x", sh.tensor(&[n, c, h, w]))];
        push(
            "dropout2d",
            check_fn(
                &mut ops,
                |g, v| g.dropout2d(v[0], 0.4, &mut ChaCha8Rng::seed_from_u64(3)),
                &cfg,
            )?,
        );
    }

    // cross-entropy, with void pixels and unequal weights
    for (name, red) in [("softmax_xent_mean", Reduction::Mean), ("softmax_xent_sum", Reduction::Sum)] {
        let [n, k, h, w] = sh.nchw(1);
        let k = k.max(2);
        let labels: Vec<u8> = (0..n * h * w)
            .map(|_| if sh.rng.random_bool(0.15) { IGNORE_LABEL } else { sh.dim(0, k - 1) as u8 })
            .collect();
        let cw = ClassWeights {
            weights: (0..k).map(|_| sh.rng.random_range(0.5..3.0)).collect(),
            c: f64::NAN,
        };
        let mut ops = [Operand::new("logits", sh.tensor(&[n, k, h, w]))];
        push(name, check_fn(&mut ops, |g, v| seg_loss(g, v[0], &labels, &cw, red), &cfg)?);
    }

    // layers and blocks
    {
        let [n, c, h, w] = sh.nchw(4);
        let (reg, conv) = seeded_registry(seed, |s| Conv2d::new(s, "c", c, 3, (3, 3), ConvGeometry::new(1, 1), true))?;
        let x = sh.tensor(&[n, c, h, w]);
        push("layer_conv2d", check_block(&reg, x, &cfg, |g, b, x| conv.forward(g, b, x))?);
        let (reg, up) = seeded_registry(seed, |s| {
            ConvTranspose2d::new(s, "u", c, 2, (3, 3), ConvGeometry::new(2, 1).with_output_padding(1, 1), true)
        })?;
        let x = sh.tensor(&[n, c, 4, 4]);
        push("layer_conv_transpose2d", check_block(&reg, x, &cfg, |g, b, x| up.forward(g, b, x))?);
        let (reg, bn) = seeded_registry(seed, |s| BatchNorm2d::new(s, "bn", c))?;
        let x = sh.tensor(&[2, c, h, w]);
        push("layer_batch_norm2d", check_block(&reg, x, &cfg, |g, b, x| bn.forward(g, b, x))?);
    }
    {
        let (reg, d) = seeded_registry(seed, |s| Downsampler::new(s, "d", 3, 4))?;
        let x = sh.tensor(&[2, 3, 8, 8]);
        push("block_downsampler", check_block(&reg, x, &cfg, |g, b, x| d.forward(g, b, x))?);
        let (reg, nb) = seeded_registry(seed, |s| NonBottleneck1d::new(s, "nb", 4, 2, 0.3))?;
        let x = sh.tensor(&[2, 4, 8, 8]);
        push("block_non_bottleneck_1d", check_block(&reg, x, &cfg, |g, b, x| nb.forward(g, b, x))?);
        let (reg, db) = seeded_registry(seed, |s| DenseBlock::new(s, "dense", 2, 2, 2))?;
        let x = sh.tensor(&[2, 2, 8, 8]);
        push("block_dense", check_block(&reg, x, &cfg, |g, b, x| db.forward(g, b, x))?);
        let (reg, t) = seeded_registry(seed, |s| Transition::new(s, "t", 4, 3))?;
        let x = sh.tensor(&[2, 4, 8, 8]);
        push("block_transition", check_block(&reg, x, &cfg, |g, b, x| t.forward(g, b, x))?);
    }

    // adversarial and cycle losses
    {
        let s = [2, 1, 3, 3];
        let mut ops = [Operand::new("real", sh.tensor(&s)), Operand::new("fake", sh.tensor(&s))];
        push(
            "disc_adversarial_loss",
            check_fn(&mut ops, |g, v| Ok(disc_adversarial_loss(g, v[0], v[1])), &cfg)?,
        );
        for (name, mode) in [("gen_adversarial_loss", GenLoss::NonSaturating), ("gen_adversarial_literal", GenLoss::Literal)] {
            let mut ops = [Operand::new("fake", sh.tensor(&s))];
            push(name, check_fn(&mut ops, |g, v| Ok(gen_adversarial_loss(g, v[0], mode)), &cfg)?);
        }
        let s = sh.nchw(1);
        let mut ops: Vec<Operand> = (0..4).map(|i| Operand::new(format!("t{i}"), sh.tensor_off_zero(&s))).collect();
        push(
            "cycle_loss",
            check_fn(&mut ops, |g, v| cycle_loss(g, v[0], v[1], v[2], v[3], 10.0), &cfg)?,
        );
    }

    // uncertainty-weighted joint objective
    {
        let mut ops = [
            Operand::new("l_adv", Tensor::scalar(0.8)),
            Operand::new("l_seg", Tensor::scalar(2.3)),
            Operand::new("s_adv", Tensor::scalar(0.4)),
            Operand::new("s_seg", Tensor::scalar(-0.6)),
        ];
        let r = check(
            &mut ops,
            |g, ops| {
                let mut reg = ParamRegistry::<f64>::new();
                let u = UncertaintyWeights::new(&mut reg)?;
                *reg.param_mut(u.s_adv) = ops[2].value.clone();
                *reg.param_mut(u.s_seg) = ops[3].value.clone();
                let mut b = Binding::new(&mut reg, Mode::Train);
                let la = g.param(ops[0].value.clone());
                let ls = g.param(ops[1].value.clone());
                let j = u.joint_loss(g, &mut b, Some(la), ls)?;
                let (sa, ss) = (b.var(g, u.s_adv), b.var(g, u.s_seg));
                Ok((j, vec![la, ls, sa, ss]))
            },
            &cfg,
        )?;
        push("joint_loss", r);
    }

    Ok(out)
}

/// Network-level checks at the default step and tolerance.
pub fn run_network_suite(seed: u64) -> Result<Vec<SuiteEntry>> {
    run_network_suite_with(&GradcheckConfig {
        seed,
        ..Default::default()
    })
}

/// Whole networks: both translation networks, the tiny segmentation network
/// on a `1x3x16x16` input, and translation feeding segmentation. Parameters
/// are sampled, not exhausted.
pub fn run_network_suite_with(cfg: &GradcheckConfig) -> Result<Vec<SuiteEntry>> {
    let seed = cfg.seed;
    // batch-1 batch norm over a handful of bottleneck values is curved enough
    // that central-difference truncation alone exceeds the tolerance at the
    // op-level step; the error shrinks as h^2
    let sampled = GradcheckConfig {
        max_coords: Some(12),
        step: cfg.step.min(1e-5),
        ..cfg.clone()
    };
    let mut sh = Shapes {
        rng: ChaCha8Rng::seed_from_u64(derive(seed, &[label("gradsuite.networks")])),
    };
    let mut out = Vec::new();
    let mut push = |name: &str, report: GradcheckReport| {
        out.push(SuiteEntry {
            name: name.to_string(),
            report,
        })
    };
    {
        let (reg, gen) = seeded_registry(seed, |s| Generator::new(s, "gen", 2, 1))?;
        let x = sh.tensor(&[1, 3, 16, 16]);
        push("generator", check_block(&reg, x, &sampled, |g, b, x| gen.forward(g, b, x))?);
        let (reg, disc) = seeded_registry(seed, |s| PatchDiscriminator::new(s, "disc", 2, 2))?;
        let x = sh.tensor(&[2, 3, 16, 16]);
        push("patch_discriminator", check_block(&reg, x, &sampled, |g, b, x| disc.forward(g, b, x))?);
    }
    // end to end: the tiny segmentation network, then translation into it
    {
        let k = 3;
        let mut scfg = SegNetConfig::tiny(k);
        scfg.input_height = 16;
        scfg.input_width = 16;
        // the bottleneck is 2x2 here, so any dilation leaves only the centre tap live
        scfg.dilations = vec![1];
        let mut reg = ParamRegistry::<f64>::new();
        let arch = SegArch::new(&scfg, &mut reg, "seg")?;
        init_params(&mut reg, seed);
        let rgb = sh.tensor(&[1, 3, 16, 16]);
        let ld = sh.tensor(&[1, scfg.ld_channels(), 16, 16]);
        let labels: Vec<u8> = (0..256).map(|_| sh.dim(0, k - 1) as u8).collect();
        let mut ops = vec![Operand::new("rgb", rgb), Operand::new("ld", ld)];
        ops.extend(reg.iter().map(|(n, t)| Operand::new(n, t.clone())));
        let ids: Vec<_> = reg.ids().collect();
        let r = check(
            &mut ops,
            |g, ops| {
                let mut r = reg.clone();
                for (op, &id) in ops[2..].iter().zip(&ids) {
                    *r.param_mut(id) = op.value.clone();
                }
                let mut b = Binding::new(&mut r, Mode::Train);
                let (x, l) = (g.param(ops[0].value.clone()), g.param(ops[1].value.clone()));
                let logits = arch.forward(g, &mut b, x, l)?;
                let mut leaves = vec![x, l];
                leaves.extend(ids.iter().map(|&id| b.var(g, id)));
                Ok((logits, leaves))
            },
            &sampled,
        )?;
        push("segnet_tiny_end_to_end", r);

        let (greg, gen) = seeded_registry(seed, |s| Generator::new(s, "gen", 2, 1))?;
        let fog = sh.tensor(&[1, 3, 16, 16]);
        let fog = Tensor::new(fog.shape().to_vec(), fog.data().iter().map(|v| 0.5 + 0.4 * v).collect())?;
        let depth = sh.tensor(&[1, 1, 16, 16]);
        let mut ops = vec![Operand::new("foggy", fog)];
        ops.extend(greg.iter().map(|(n, t)| Operand::new(n, t.clone())));
        let gids: Vec<_> = greg.ids().collect();
        let labels = &labels[..];
        let r = check(
            &mut ops,
            |g, ops| {
                let mut gr = greg.clone();
                for (op, &id) in ops[1..].iter().zip(&gids) {
                    *gr.param_mut(id) = op.value.clone();
                }
                let mut sr = reg.clone();
                let mut gb = Binding::new(&mut gr, Mode::BatchStats);
                let x = g.param(ops[0].value.clone());
                let y = translate_var(&gen, g, &mut gb, x)?;
                let lum = g.channel_mix(y, &crate::data::LUMA)?;
                let d = g.input(depth.clone());
                let ld = g.concat_channels(lum, d)?;
                let mut sb = Binding::new(&mut sr, Mode::Eval);
                let logits = arch.forward(g, &mut sb, y, ld)?;
                let loss = seg_loss(g, logits, labels, &ClassWeights::uniform(k), Reduction::Mean)?;
                let mut leaves = vec![x];
                leaves.extend(gids.iter().map(|&id| gb.var(g, id)));
                Ok((loss, leaves))
            },
            &sampled,
        )?;
        push("translate_then_segment", r);
    }

    Ok(out)
}
