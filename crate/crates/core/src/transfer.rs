//! Unpaired foggy-to-clear translation: two ResNet generators, two patch
//! discriminators, adversarial and cycle-consistency losses.

use crate::error::{Error, Result};
use crate::nn::{init_params, BatchNorm2d, Binding, Conv2d, ConvTranspose2d, Mode, ParamRegistry, Scope};
use crate::optim::Adam;
use crate::tensor::{ConvGeometry, Element, Graph, Tensor, Var};

/// Generator objective.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum GenLoss {
    /// Minimise `-log D(G(x))`.
    #[default]
    NonSaturating,
    /// Minimise `log(1 - D(G(x)))` as in the minimax game.
    Literal,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TransferConfig {
    pub ngf: usize,
    pub ndf: usize,
    pub res_blocks: usize,
    /// Stride-2 layers in each discriminator.
    pub disc_layers: usize,
    pub lambda_cycle: f64,
    pub gen_loss: GenLoss,
}

impl Default for TransferConfig {
    fn default() -> Self {
        TransferConfig {
            ngf: 32,
            ndf: 32,
            res_blocks: 3,
            disc_layers: 3,
            lambda_cycle: 10.0,
            gen_loss: GenLoss::NonSaturating,
        }
    }
}

impl TransferConfig {
    pub fn validate(&self) -> Result<()> {
        if self.ngf == 0 || self.ndf == 0 || self.disc_layers == 0 {
            return Err(Error::Config("transfer widths and depth must be positive".into()));
        }
        if !(self.lambda_cycle >= 0.0 && self.lambda_cycle.is_finite()) {
            return Err(Error::Config(format!("lambda_cycle {} must be finite and >= 0", self.lambda_cycle)));
        }
        Ok(())
    }
}

pub const ADV_EPS: f64 = 1e-8;

#[derive(Clone, Debug)]
struct ConvBnRelu {
    conv: Conv2d,
    bn: BatchNorm2d,
}

impl ConvBnRelu {
    fn forward<T: Element>(&self, g: &mut Graph<T>, b: &mut Binding<'_, T>, x: Var) -> Result<Var> {
        let y = self.conv.forward(g, b, x)?;
        let y = self.bn.forward(g, b, y)?;
        Ok(g.relu(y))
    }
}

#[derive(Clone, Debug)]
struct ResBlock {
    a: ConvBnRelu,
    conv: Conv2d,
    bn: BatchNorm2d,
}

/// ResNet generator: 7x7 stem, two stride-2 convs, residual blocks, two
/// transposed convs, 7x7 output conv and tanh.
#[derive(Clone, Debug)]
pub struct Generator {
    stem: ConvBnRelu,
    down: [ConvBnRelu; 2],
    blocks: Vec<ResBlock>,
    up: [(ConvTranspose2d, BatchNorm2d); 2],
    out: Conv2d,
}

impl Generator {
    pub fn new<T: Element>(s: &mut Scope<'_, T>, name: &str, ngf: usize, res_blocks: usize) -> Result<Self> {
        let mut s = s.child(name);
        let cbr = |s: &mut Scope<'_, T>, name: &str, cin, cout, k, geom| -> Result<ConvBnRelu> {
            let mut c = s.child(name);
            Ok(ConvBnRelu {
                conv: Conv2d::new(&mut c, "conv", cin, cout, (k, k), geom, false)?,
                bn: BatchNorm2d::new(&mut c, "bn", cout)?,
            })
        };
        let same3 = ConvGeometry::new(1, 1);
        let stem = cbr(&mut s, "stem", 3, ngf, 7, ConvGeometry::new(1, 3))?;
        let down = [
            cbr(&mut s, "down0", ngf, 2 * ngf, 3, ConvGeometry::new(2, 1))?,
            cbr(&mut s, "down1", 2 * ngf, 4 * ngf, 3, ConvGeometry::new(2, 1))?,
        ];
        let w = 4 * ngf;
        let blocks = (0..res_blocks)
            .map(|i| {
                let mut r = s.child(&format!("res{i}"));
                Ok(ResBlock {
                    a: cbr(&mut r, "a", w, w, 3, same3)?,
                    conv: Conv2d::new(&mut r, "conv", w, w, (3, 3), same3, false)?,
                    bn: BatchNorm2d::new(&mut r, "bn", w)?,
                })
            })
            .collect::<Result<_>>()?;
        let upg = ConvGeometry::new(2, 1).with_output_padding(1, 1);
        let mut up = Vec::new();
        for (i, (cin, cout)) in [(4 * ngf, 2 * ngf), (2 * ngf, ngf)].into_iter().enumerate() {
            let mut u = s.child(&format!("up{i}"));
            up.push((
                ConvTranspose2d::new(&mut u, "conv", cin, cout, (3, 3), upg, false)?,
                BatchNorm2d::new(&mut u, "bn", cout)?,
            ));
        }
        let out = Conv2d::new(&mut s, "out", ngf, 3, (7, 7), ConvGeometry::new(1, 3), true)?;
        Ok(Generator {
            stem,
            down,
            blocks,
            up: up.try_into().expect("two upsamplers"),
            out,
        })
    }

    /// Maps `[N, 3, H, W]` in `[-1, 1]` to the same shape in `(-1, 1)`.
    pub fn forward<T: Element>(&self, g: &mut Graph<T>, b: &mut Binding<'_, T>, x: Var) -> Result<Var> {
        let [_, c, h, w] = g.value(x).dims4("generator")?;
        if c != 3 {
            return Err(Error::shape("generator", format!("expects 3 channels, got {c}")));
        }
        if h % 4 != 0 || w % 4 != 0 || h == 0 || w == 0 {
            return Err(Error::shape("generator", format!("size {h}x{w} not divisible by 4")));
        }
        let mut y = self.stem.forward(g, b, x)?;
        for d in &self.down {
            y = d.forward(g, b, y)?;
        }
        for r in &self.blocks {
            let h = r.a.forward(g, b, y)?;
            let h = r.conv.forward(g, b, h)?;
            let h = r.bn.forward(g, b, h)?;
            y = g.add(y, h)?;
        }
        for (conv, bn) in &self.up {
            y = conv.forward(g, b, y)?;
            y = bn.forward(g, b, y)?;
            y = g.relu(y);
        }
        let y = self.out.forward(g, b, y)?;
        Ok(g.tanh(y))
    }
}

/// PatchGAN discriminator emitting raw per-patch logits.
#[derive(Clone, Debug)]
pub struct PatchDiscriminator {
    first: Conv2d,
    mid: Vec<(Conv2d, BatchNorm2d)>,
    last: Conv2d,
}

impl PatchDiscriminator {
    pub fn new<T: Element>(s: &mut Scope<'_, T>, name: &str, ndf: usize, layers: usize) -> Result<Self> {
        let mut s = s.child(name);
        let k = (4, 4);
        let first = Conv2d::new(&mut s, "conv0", 3, ndf, k, ConvGeometry::new(2, 1), true)?;
        let mut mid = Vec::new();
        let mut width = ndf;
        // stride-2 layers after the first, then one stride-1 layer
        for i in 1..=layers {
            let stride = if i < layers { 2 } else { 1 };
            let next = ndf * (1 << i.min(3));
            let mut c = s.child(&format!("layer{i}"));
            mid.push((
                Conv2d::new(&mut c, "conv", width, next, k, ConvGeometry::new(stride, 1), false)?,
                BatchNorm2d::new(&mut c, "bn", next)?,
            ));
            width = next;
        }
        let last = Conv2d::new(&mut s, "out", width, 1, k, ConvGeometry::new(1, 1), true)?;
        Ok(PatchDiscriminator { first, mid, last })
    }

    pub fn forward<T: Element>(&self, g: &mut Graph<T>, b: &mut Binding<'_, T>, x: Var) -> Result<Var> {
        let mut y = self.first.forward(g, b, x)?;
        y = g.leaky_relu(y, 0.2);
        for (conv, bn) in &self.mid {
            y = conv.forward(g, b, y)?;
            y = bn.forward(g, b, y)?;
            y = g.leaky_relu(y, 0.2);
        }
        self.last.forward(g, b, y)
    }
}

/// `-(mean log D(real) + mean log(1 - D(fake)))` on logits.
pub fn disc_adversarial_loss<T: Element>(g: &mut Graph<T>, real: Var, fake: Var) -> Var {
    let lr = g.log_sigmoid(real, ADV_EPS);
    let nf = g.affine(fake, -1.0, 0.0);
    let lf = g.log_sigmoid(nf, ADV_EPS);
    let (a, b) = (g.mean(lr), g.mean(lf));
    let s = g.add(a, b).expect("scalars");
    g.affine(s, -1.0, 0.0)
}

/// Generator adversarial loss on discriminator logits for generated images.
pub fn gen_adversarial_loss<T: Element>(g: &mut Graph<T>, fake: Var, mode: GenLoss) -> Var {
    match mode {
        GenLoss::NonSaturating => {
            let l = g.log_sigmoid(fake, ADV_EPS);
            let m = g.mean(l);
            g.affine(m, -1.0, 0.0)
        }
        GenLoss::Literal => {
            let nf = g.affine(fake, -1.0, 0.0);
            let l = g.log_sigmoid(nf, ADV_EPS);
            g.mean(l)
        }
    }
}

/// `lambda * (mean|x - rec_x| + mean|y - rec_y|)`.
pub fn cycle_loss<T: Element>(g: &mut Graph<T>, x: Var, rec_x: Var, y: Var, rec_y: Var, lambda: f64) -> Result<Var> {
    let a = g.l1_mean(x, rec_x)?;
    let b = g.l1_mean(y, rec_y)?;
    let s = g.add(a, b)?;
    Ok(g.affine(s, lambda, 0.0))
}

/// Layer layout of both translation directions.
#[derive(Clone, Debug)]
pub struct TransferArch {
    pub cfg: TransferConfig,
    pub gen_xy: Generator,
    pub gen_yx: Generator,
    pub disc_x: PatchDiscriminator,
    pub disc_y: PatchDiscriminator,
}

pub const TRANSFER_PREFIX: &str = "transfer";

impl TransferArch {
    pub fn new<T: Element>(
        cfg: &TransferConfig,
        gens: &mut ParamRegistry<T>,
        discs: &mut ParamRegistry<T>,
    ) -> Result<Self> {
        cfg.validate()?;
        let mut gs = Scope::new(gens, TRANSFER_PREFIX);
        let gen_xy = Generator::new(&mut gs, "gen_xy", cfg.ngf, cfg.res_blocks)?;
        let gen_yx = Generator::new(&mut gs, "gen_yx", cfg.ngf, cfg.res_blocks)?;
        let mut ds = Scope::new(discs, TRANSFER_PREFIX);
        let disc_x = PatchDiscriminator::new(&mut ds, "disc_x", cfg.ndf, cfg.disc_layers)?;
        let disc_y = PatchDiscriminator::new(&mut ds, "disc_y", cfg.ndf, cfg.disc_layers)?;
        Ok(TransferArch {
            cfg: cfg.clone(),
            gen_xy,
            gen_yx,
            disc_x,
            disc_y,
        })
    }
}

/// Generators and discriminators with separate registries so each side has
/// its own optimizer.
#[derive(Clone, Debug)]
pub struct TransferModel {
    pub arch: TransferArch,
    pub gens: ParamRegistry<f32>,
    pub discs: ParamRegistry<f32>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct GanLosses {
    pub gen: f64,
    pub adv: f64,
    pub cycle: f64,
    pub disc_x: f64,
    pub disc_y: f64,
}

impl GanLosses {
    pub fn disc(&self) -> f64 {
        self.disc_x + self.disc_y
    }
}

impl TransferModel {
    pub fn new(cfg: &TransferConfig, seed: u64) -> Result<Self> {
        let (mut gens, mut discs) = (ParamRegistry::new(), ParamRegistry::new());
        let arch = TransferArch::new(cfg, &mut gens, &mut discs)?;
        init_params(&mut gens, seed);
        init_params(&mut discs, seed);
        Ok(TransferModel { arch, gens, discs })
    }

    /// One generator update followed by one discriminator update. Images are
    /// `[N, 3, H, W]` in `[-1, 1]`; `x` foggy, `y` clear, unpaired.
    pub fn train_step(&mut self, x: &Tensor, y: &Tensor, opt_g: &mut Adam, opt_d: &mut Adam) -> Result<GanLosses> {
        let a = &self.arch;
        let mut out = GanLosses::default();
        let (fake_y, fake_x) = {
            let mut g = Graph::new();
            let (xv, yv) = (g.input(x.clone()), g.input(y.clone()));
            let mut gb = Binding::new(&mut self.gens, Mode::Train);
            let mut db = Binding::new(&mut self.discs, Mode::BatchStats).frozen();
            let fake_y = a.gen_xy.forward(&mut g, &mut gb, xv)?;
            let rec_x = a.gen_yx.forward(&mut g, &mut gb, fake_y)?;
            let fake_x = a.gen_yx.forward(&mut g, &mut gb, yv)?;
            let rec_y = a.gen_xy.forward(&mut g, &mut gb, fake_x)?;
            let dy = a.disc_y.forward(&mut g, &mut db, fake_y)?;
            let dx = a.disc_x.forward(&mut g, &mut db, fake_x)?;
            let ay = gen_adversarial_loss(&mut g, dy, a.cfg.gen_loss);
            let ax = gen_adversarial_loss(&mut g, dx, a.cfg.gen_loss);
            let adv = g.add(ay, ax)?;
            let cyc = cycle_loss(&mut g, xv, rec_x, yv, rec_y, a.cfg.lambda_cycle)?;
            let total = g.add(adv, cyc)?;
            g.backward(total)?;
            gb.store_grads(&g);
            out.adv = g.value(adv).item() as f64;
            out.cycle = g.value(cyc).item() as f64;
            out.gen = g.value(total).item() as f64;
            (g.value(fake_y).clone(), g.value(fake_x).clone())
        };
        opt_g.step(&mut self.gens)?;
        (out.disc_x, out.disc_y) = self.disc_step(x, y, &fake_x, &fake_y, opt_d)?;
        Ok(out)
    }

    /// Discriminator update on real images and detached fakes, all in
    /// `[-1, 1]`. Returns `(loss_x, loss_y)`.
    pub fn disc_step(
        &mut self,
        x: &Tensor,
        y: &Tensor,
        fake_x: &Tensor,
        fake_y: &Tensor,
        opt_d: &mut Adam,
    ) -> Result<(f64, f64)> {
        let a = &self.arch;
        let mut g = Graph::new();
        let mut db = Binding::new(&mut self.discs, Mode::Train);
        let (xv, yv) = (g.input(x.clone()), g.input(y.clone()));
        let (fx, fy) = (g.input(fake_x.clone()), g.input(fake_y.clone()));
        let ry = a.disc_y.forward(&mut g, &mut db, yv)?;
        let py = a.disc_y.forward(&mut g, &mut db, fy)?;
        let ly = disc_adversarial_loss(&mut g, ry, py);
        let rx = a.disc_x.forward(&mut g, &mut db, xv)?;
        let px = a.disc_x.forward(&mut g, &mut db, fx)?;
        let lx = disc_adversarial_loss(&mut g, rx, px);
        let total = g.add(lx, ly)?;
        g.backward(total)?;
        db.store_grads(&g);
        let losses = (g.value(lx).item() as f64, g.value(ly).item() as f64);
        opt_d.step(&mut self.discs)?;
        Ok(losses)
    }

    /// Foggy `[N, 3, H, W]` in `[0, 1]` to corrected images in `[0, 1]`.
    /// Each image is normalised with its own statistics, as during training.
    pub fn translate(&mut self, images: &Tensor) -> Result<Tensor> {
        self.translate_dir(Direction::FoggyToClear, images)
    }

    pub fn translate_dir(&mut self, dir: Direction, images: &Tensor) -> Result<Tensor> {
        let gen = match dir {
            Direction::FoggyToClear => &self.arch.gen_xy,
            Direction::ClearToFoggy => &self.arch.gen_yx,
        };
        let [n, ..] = images.dims4("translate")?;
        let mut outs = Vec::with_capacity(n);
        for i in 0..n {
            let mut g = Graph::new();
            let x = g.input(images.batch_slice(i)?);
            let mut b = Binding::new(&mut self.gens, Mode::BatchStats).frozen();
            let y = translate_var(gen, &mut g, &mut b, x)?;
            outs.push(g.value(y).batch_item(0)?);
        }
        Tensor::stack(&outs.iter().collect::<Vec<_>>())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    FoggyToClear,
    ClearToFoggy,
}

/// Differentiable `[0, 1] -> [0, 1]` translation through `gen`.
pub fn translate_var<T: Element>(gen: &Generator, g: &mut Graph<T>, b: &mut Binding<'_, T>, x01: Var) -> Result<Var> {
    let x = g.affine(x01, 2.0, -1.0);
    let y = gen.forward(g, b, x)?;
    Ok(g.affine(y, 0.5, 0.5))
}
