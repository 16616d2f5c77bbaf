//! Dual-encoder segmentation network: an RGB encoder and a luminance(+depth)
//! encoder whose matched stages are summed and fed to a skip-connected
//! decoder.

use crate::error::{Error, Result};
use crate::nn::{
    init_params, BatchNorm2d, Binding, Conv2d, ConvTranspose2d, DenseBlock, Downsampler, Mode,
    NonBottleneck1d, ParamRegistry, Scope, Transition,
};
use crate::tensor::{ConvGeometry, Element, Graph, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct SegNetConfig {
    pub num_classes: usize,
    pub stage_channels: [usize; 3],
    /// Two-channel luminance+depth input when true, luminance only otherwise.
    pub use_depth: bool,
    pub input_height: usize,
    pub input_width: usize,
    pub dense_growth: usize,
    pub dense_layers: usize,
    pub plain_blocks: usize,
    pub dilations: Vec<usize>,
    pub decoder_blocks: usize,
    pub dropout: f64,
}

impl Default for SegNetConfig {
    fn default() -> Self {
        SegNetConfig {
            num_classes: 19,
            stage_channels: [16, 64, 128],
            use_depth: true,
            input_height: 256,
            input_width: 512,
            dense_growth: 12,
            dense_layers: 4,
            plain_blocks: 5,
            dilations: vec![2, 4, 8, 16, 2, 4, 8, 16],
            decoder_blocks: 2,
            dropout: 0.0,
        }
    }
}

impl SegNetConfig {
    /// A narrow network for gradient checks and fast tests.
    pub fn tiny(num_classes: usize) -> Self {
        SegNetConfig {
            num_classes,
            stage_channels: [4, 6, 8],
            input_height: 16,
            input_width: 16,
            dense_growth: 2,
            dense_layers: 2,
            plain_blocks: 1,
            dilations: vec![2],
            decoder_blocks: 1,
            ..Default::default()
        }
    }

    pub fn ld_channels(&self) -> usize {
        if self.use_depth {
            2
        } else {
            1
        }
    }

    pub fn validate(&self) -> Result<()> {
        let [a, b, c] = self.stage_channels;
        let bad = |d: String| Err(Error::Config(d));
        if !(3 < a && a < b && b < c) {
            return bad(format!(
                "stage channels must be strictly increasing and exceed 3, got {:?}",
                self.stage_channels
            ));
        }
        if self.num_classes == 0 || self.num_classes > 255 {
            return bad(format!("num_classes {} outside 1..=255", self.num_classes));
        }
        if self.input_height % 8 != 0 || self.input_width % 8 != 0 || self.input_height == 0 || self.input_width == 0 {
            return bad(format!(
                "input {}x{} must be a positive multiple of 8",
                self.input_height, self.input_width
            ));
        }
        if self.dilations.contains(&0) {
            return bad("dilations must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        Ok(())
    }
}

/// Feature maps at 1/2, 1/4 and 1/8 resolution.
#[derive(Clone, Copy, Debug)]
pub struct Stages {
    pub s1: Var,
    pub s2: Var,
    pub s3: Var,
}

#[derive(Clone, Debug)]
struct RgbEncoder {
    down: [Downsampler; 3],
    blocks: Vec<NonBottleneck1d>,
}

#[derive(Clone, Debug)]
struct LdEncoder {
    down: Downsampler,
    dense: [DenseBlock; 3],
    trans: [Transition; 3],
}

#[derive(Clone, Debug)]
struct DecoderStage {
    up: ConvTranspose2d,
    bn: BatchNorm2d,
    proj: Conv2d,
    blocks: Vec<NonBottleneck1d>,
}

/// Layer layout of the network; parameters live in a separate registry.
#[derive(Clone, Debug)]
pub struct SegArch {
    cfg: SegNetConfig,
    rgb: RgbEncoder,
    ld: LdEncoder,
    dec: [DecoderStage; 2],
    head: ConvTranspose2d,
}

fn upsample_geom() -> ConvGeometry {
    ConvGeometry::new(2, 1).with_output_padding(1, 1)
}

impl SegArch {
    pub fn new<T: Element>(cfg: &SegNetConfig, reg: &mut ParamRegistry<T>, prefix: &str) -> Result<Self> {
        cfg.validate()?;
        let [c1, c2, c3] = cfg.stage_channels;
        let mut root = Scope::new(reg, prefix);
        let rgb = {
            let mut s = root.child("rgb_encoder");
            let down = [
                Downsampler::new(&mut s, "down0", 3, c1)?,
                Downsampler::new(&mut s, "down1", c1, c2)?,
                Downsampler::new(&mut s, "down2", c2, c3)?,
            ];
            let dil = std::iter::repeat_n(1, cfg.plain_blocks).chain(cfg.dilations.iter().copied());
            let blocks = dil
                .enumerate()
                .map(|(i, d)| NonBottleneck1d::new(&mut s, &format!("block{i}"), c3, d, cfg.dropout))
                .collect::<Result<_>>()?;
            RgbEncoder { down, blocks }
        };
        let ld = {
            let mut s = root.child("ld_encoder");
            let down = Downsampler::new(&mut s, "down0", cfg.ld_channels(), c1)?;
            let (g, l) = (cfg.dense_growth, cfg.dense_layers);
            let mut dense = Vec::new();
            let mut trans = Vec::new();
            for (i, (cin, cout)) in [(c1, c1), (c1, c2), (c2, c3)].into_iter().enumerate() {
                let d = DenseBlock::new(&mut s, &format!("dense{i}"), cin, g, l)?;
                trans.push(Transition::new(&mut s, &format!("trans{i}"), d.out_channels(), cout)?);
                dense.push(d);
            }
            LdEncoder {
                down,
                dense: dense.try_into().expect("three stages"),
                trans: trans.try_into().expect("three stages"),
            }
        };
        let mut dec = Vec::new();
        {
            let mut s = root.child("decoder");
            for (i, (cin, cout)) in [(c3, c2), (c2, c1)].into_iter().enumerate() {
                let mut st = s.child(&format!("stage{i}"));
                let up = ConvTranspose2d::new(&mut st, "up", cin, cout, (3, 3), upsample_geom(), false)?;
                let bn = BatchNorm2d::new(&mut st, "bn", cout)?;
                let proj = Conv2d::new(&mut st, "proj", 2 * cout, cout, (1, 1), ConvGeometry::default(), true)?;
                let blocks = (0..cfg.decoder_blocks)
                    .map(|j| NonBottleneck1d::new(&mut st, &format!("block{j}"), cout, 1, cfg.dropout))
                    .collect::<Result<_>>()?;
                dec.push(DecoderStage { up, bn, proj, blocks });
            }
        }
        let head = {
            let mut s = root.child("decoder");
            ConvTranspose2d::new(&mut s, "head", c1, cfg.num_classes, (2, 2), ConvGeometry::new(2, 0), true)?
        };
        Ok(SegArch {
            cfg: cfg.clone(),
            rgb,
            ld,
            dec: dec.try_into().expect("two stages"),
            head,
        })
    }

    pub fn config(&self) -> &SegNetConfig {
        &self.cfg
    }

    fn check_input<T: Element>(&self, g: &Graph<T>, x: Var, channels: usize, what: &str) -> Result<[usize; 4]> {
        let [n, c, h, w] = g.value(x).dims4("segnet")?;
        if c != channels {
            return Err(Error::shape("segnet", format!("{what} expects {channels} channels, got {c}")));
        }
        if h % 8 != 0 || w % 8 != 0 || h == 0 || w == 0 {
            return Err(Error::shape("segnet", format!("{what} size {h}x{w} is not a multiple of 8")));
        }
        Ok([n, c, h, w])
    }

    pub fn encode_rgb<T: Element>(&self, g: &mut Graph<T>, b: &mut Binding<'_, T>, rgb: Var) -> Result<Stages> {
        self.check_input(g, rgb, 3, "rgb input")?;
        let s1 = self.rgb.down[0].forward(g, b, rgb)?;
        let s2 = self.rgb.down[1].forward(g, b, s1)?;
        let mut s3 = self.rgb.down[2].forward(g, b, s2)?;
        for blk in &self.rgb.blocks {
            s3 = blk.forward(g, b, s3)?;
        }
        Ok(Stages { s1, s2, s3 })
    }

    pub fn encode_ld<T: Element>(&self, g: &mut Graph<T>, b: &mut Binding<'_, T>, ld: Var) -> Result<Stages> {
        self.check_input(g, ld, self.cfg.ld_channels(), "ld input")?;
        let x = self.ld.down.forward(g, b, ld)?;
        let d = self.ld.dense[0].forward(g, b, x)?;
        let s1 = self.ld.trans[0].project(g, b, d)?;
        let x = g.avg_pool2d(s1)?;
        let d = self.ld.dense[1].forward(g, b, x)?;
        let s2 = self.ld.trans[1].project(g, b, d)?;
        let x = g.avg_pool2d(s2)?;
        let d = self.ld.dense[2].forward(g, b, x)?;
        let s3 = self.ld.trans[2].project(g, b, d)?;
        Ok(Stages { s1, s2, s3 })
    }

    pub fn fuse<T: Element>(g: &mut Graph<T>, a: &Stages, b: &Stages) -> Result<Stages> {
        Ok(Stages {
            s1: g.add(a.s1, b.s1)?,
            s2: g.add(a.s2, b.s2)?,
            s3: g.add(a.s3, b.s3)?,
        })
    }

    pub fn decode<T: Element>(&self, g: &mut Graph<T>, b: &mut Binding<'_, T>, fused: &Stages) -> Result<Var> {
        let mut x = fused.s3;
        for (stage, skip) in self.dec.iter().zip([fused.s2, fused.s1]) {
            x = stage.up.forward(g, b, x)?;
            x = stage.bn.forward(g, b, x)?;
            x = g.relu(x);
            x = g.concat_channels(x, skip)?;
            x = stage.proj.forward(g, b, x)?;
            for blk in &stage.blocks {
                x = blk.forward(g, b, x)?;
            }
        }
        self.head.forward(g, b, x)
    }

    pub fn forward<T: Element>(&self, g: &mut Graph<T>, b: &mut Binding<'_, T>, rgb: Var, ld: Var) -> Result<Var> {
        let [n, _, h, w] = self.check_input(g, rgb, 3, "rgb input")?;
        let [nl, _, hl, wl] = self.check_input(g, ld, self.cfg.ld_channels(), "ld input")?;
        if (n, h, w) != (nl, hl, wl) {
            return Err(Error::shape("segnet", format!("rgb {n}x{h}x{w} vs ld {nl}x{hl}x{wl}")));
        }
        let a = self.encode_rgb(g, b, rgb)?;
        let l = self.encode_ld(g, b, ld)?;
        let fused = Self::fuse(g, &a, &l)?;
        self.decode(g, b, &fused)
    }

    /// Decoder applied to the RGB encoder alone.
    pub fn forward_rgb_only<T: Element>(&self, g: &mut Graph<T>, b: &mut Binding<'_, T>, rgb: Var) -> Result<Var> {
        let a = self.encode_rgb(g, b, rgb)?;
        self.decode(g, b, &a)
    }

    /// Makes the luminance encoder emit exact zeros at every stage.
    pub fn silence_ld_encoder<T: Element>(&self, reg: &mut ParamRegistry<T>) {
        for t in &self.ld.trans {
            reg.param_mut(t.bn.gamma).data_mut().fill(T::zero());
            reg.param_mut(t.bn.beta).data_mut().fill(T::zero());
        }
    }
}

/// Architecture plus its `f32` parameters.
#[derive(Clone, Debug)]
pub struct SegNet {
    pub arch: SegArch,
    pub params: ParamRegistry<f32>,
}

/// Checkpoint name prefix of segmentation parameters.
pub const SEG_PREFIX: &str = "seg";

impl SegNet {
    pub fn new(cfg: &SegNetConfig, seed: u64) -> Result<Self> {
        let mut params = ParamRegistry::new();
        let arch = SegArch::new(cfg, &mut params, SEG_PREFIX)?;
        init_params(&mut params, seed);
        Ok(SegNet { arch, params })
    }

    pub fn config(&self) -> &SegNetConfig {
        self.arch.config()
    }

    pub fn param_count(&self) -> usize {
        self.params.param_count()
    }

    /// Inference-mode logits for a batch.
    pub fn predict(&mut self, rgb: &Tensor, ld: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let (x, l) = (g.input(rgb.clone()), g.input(ld.clone()));
        let mut b = Binding::new(&mut self.params, Mode::Eval);
        let y = self.arch.forward(&mut g, &mut b, x, l)?;
        Ok(g.value(y).clone())
    }
}

/// Per-pixel argmax over the class axis of `[N, K, H, W]` logits.
pub fn argmax_labels(logits: &Tensor) -> Result<Vec<u8>> {
    let [n, k, h, w] = logits.dims4("argmax")?;
    let plane = h * w;
    let x = logits.data();
    let mut out = Vec::with_capacity(n * plane);
    for s in 0..n {
        for p in 0..plane {
            let mut best = 0;
            for c in 1..k {
                if x[(s * k + c) * plane + p] > x[(s * k + best) * plane + p] {
                    best = c;
                }
            }
            out.push(best as u8);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_validation() {
        assert!(SegNetConfig::default().validate().is_ok());
        let bad = SegNetConfig {
            stage_channels: [16, 16, 128],
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = SegNetConfig {
            input_height: 100,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn argmax_picks_largest() {
        let t = Tensor::new([1, 3, 1, 2], vec![0.0, 5.0, 2.0, 1.0, 1.0, 9.0]).unwrap();
        assert_eq!(argmax_labels(&t).unwrap(), vec![1, 2]);
    }
}
