//! Training loops for both components, joint finetuning and evaluation.

use std::fs::{self, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::{Checkpoint, CheckpointDir, NamedTensor};
use crate::config::{LuminanceSource, RunConfig};
use crate::data::{augment_hflip, hflip, label_histogram, ld_from_images, Batch, Sample};
use crate::error::{Error, Result};
use crate::loss::{class_weights, seg_loss, ClassWeights, UncertaintyWeights, IGNORE_LABEL};
use crate::metrics::{format_report, format_sidecar, ConfusionMatrix, Metrics, CITYSCAPES_CLASSES};
use crate::nn::{Binding, Mode};
use crate::optim::{Adam, AdamConfig};
use crate::seed::{derive, label};
use crate::seg::{argmax_labels, SegNet, SEG_PREFIX};
use crate::tensor::{Graph, Tensor};
use crate::transfer::{gen_adversarial_loss, translate_var, Direction, GanLosses, TransferModel};

/// Checkpoint entry holding the class weights used for training.
pub const CLASS_WEIGHTS_ENTRY: &str = "loss.class_weights";

const SEG_HEADER: &str = "epoch,loss,pixel_acc,class_avg,miou";
const DA_HEADER: &str = "step,gen,adv,cycle,disc_x,disc_y";
const FT_HEADER: &str = "epoch,joint,seg,adv,s_adv,s_seg,disc";

/// Append-only CSV log. On resume the rows past the checkpoint are dropped.
struct CsvLog {
    path: PathBuf,
}

impl CsvLog {
    fn open(path: PathBuf, header: &str, keep_rows: Option<usize>) -> Result<Self> {
        let mut text = format!("{header}\n");
        if let Some(k) = keep_rows {
            let old = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
            let rows: Vec<&str> = old.lines().skip(1).take(k).collect();
            if rows.len() < k {
                return Err(Error::Checkpoint(format!("{} has fewer than {k} rows", path.display())));
            }
            for r in rows {
                text.push_str(r);
                text.push('\n');
            }
        }
        fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        Ok(CsvLog { path })
    }

    fn push(&self, row: &str) -> Result<()> {
        let mut f = OpenOptions::new()
            .append(true)
            .open(&self.path)
            .map_err(|e| Error::io(&self.path, e))?;
        writeln!(f, "{row}").map_err(|e| Error::io(&self.path, e))
    }
}

fn rng(seed: u64, parts: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(seed, parts))
}

fn seg_init_seed(seed: u64) -> u64 {
    derive(seed, &[label("seg.init")])
}

fn transfer_init_seed(seed: u64) -> u64 {
    derive(seed, &[label("transfer.init")])
}

/// Shuffled sample order of one epoch.
fn epoch_order(n: usize, seed: u64, stream: &str, epoch: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng(seed, &[label(stream), epoch]));
    order
}

fn check_samples(samples: &[Sample], what: &str) -> Result<()> {
    if samples.is_empty() {
        return Err(Error::Dataset(format!("{what} dataset is empty")));
    }
    Ok(())
}

fn fmt(v: f64) -> String {
    format!("{v:.9e}")
}

fn resume_point(dir: &CheckpointDir, cfg: &RunConfig, resume: bool) -> Result<Option<Checkpoint>> {
    if !resume {
        return Ok(None);
    }
    let Some(path) = dir.latest()? else {
        return Ok(None);
    };
    let ck = Checkpoint::load(&path)?;
    let mut saved = RunConfig::from_text(&ck.config)?;
    saved.run.epochs = cfg.run.epochs;
    saved.finetune.epochs = cfg.finetune.epochs;
    saved.transfer.steps = cfg.transfer.steps;
    if &saved != cfg {
        return Err(Error::Checkpoint(format!(
            "{} was written with a different configuration",
            path.display()
        )));
    }
    Ok(Some(ck))
}

/// Class weights from the labels of `samples`, or uniform when disabled.
pub fn training_weights(cfg: &RunConfig, samples: &[Sample]) -> Result<ClassWeights> {
    let k = cfg.segnet.num_classes;
    if !cfg.loss.class_weights {
        return Ok(ClassWeights::uniform(k));
    }
    let mut counts = vec![0u64; k];
    for s in samples {
        for (c, n) in counts.iter_mut().zip(label_histogram(&s.labels, k)) {
            *c += n;
        }
    }
    class_weights(&counts, cfg.loss.class_weight_c)
}

fn weights_entry(w: &ClassWeights) -> NamedTensor {
    NamedTensor {
        name: CLASS_WEIGHTS_ENTRY.to_string(),
        shape: vec![w.weights.len()],
        data: w.weights.iter().map(|&v| v as f32).collect(),
    }
}

fn weights_from(ck: &Checkpoint) -> Option<ClassWeights> {
    ck.tensors.iter().find(|t| t.name == CLASS_WEIGHTS_ENTRY).map(|t| ClassWeights {
        weights: t.data.iter().map(|&v| v as f64).collect(),
        c: f64::NAN,
    })
}

/// Rebuilds the segmentation network stored in `ck`.
pub fn load_seg(ck: &Checkpoint) -> Result<(RunConfig, SegNet)> {
    let cfg = RunConfig::from_text(&ck.config)?;
    let mut net = SegNet::new(&cfg.segnet, 0)?;
    ck.load_registry(&mut net.params, &format!("{SEG_PREFIX}."))?;
    Ok((cfg, net))
}

/// Rebuilds the translation model stored in `ck`.
pub fn load_transfer(ck: &Checkpoint) -> Result<(RunConfig, TransferModel)> {
    let cfg = RunConfig::from_text(&ck.config)?;
    let mut m = TransferModel::new(&cfg.transfer.model, 0)?;
    ck.load_registry(&mut m.gens, "transfer.gen")?;
    ck.load_registry(&mut m.discs, "transfer.disc")?;
    Ok((cfg, m))
}

/// Whether `ck` carries translator weights.
pub fn has_transfer(ck: &Checkpoint) -> bool {
    ck.tensors.iter().any(|t| t.name.starts_with("transfer.gen"))
}

#[derive(Clone, Debug, PartialEq)]
pub struct SegEpoch {
    pub epoch: u64,
    pub loss: f64,
    pub pixel_acc: f64,
    pub class_avg: f64,
    pub miou: f64,
}

pub struct SegRun {
    pub net: SegNet,
    pub log: Vec<SegEpoch>,
    pub checkpoint: PathBuf,
}

/// Supervised segmentation training. Writes `seg_log.csv` and one
/// checkpoint per epoch into `out`; with `resume`, continues from the
/// latest checkpoint there.
pub fn train_segmentation(cfg: &RunConfig, samples: &[Sample], out: &Path, resume: bool) -> Result<SegRun> {
    cfg.validate()?;
    check_samples(samples, "training")?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let seed = cfg.run.seed;
    let dir = CheckpointDir::new(out, "seg", cfg.run.keep_last);
    let mut net = SegNet::new(&cfg.segnet, seg_init_seed(seed))?;
    let weights = training_weights(cfg, samples)?;
    let mut opt = Adam::new(cfg.optim, &net.params);
    let mut start = 0;
    let log_path = out.join("seg_log.csv");
    let log = match resume_point(&dir, cfg, resume)? {
        Some(ck) => {
            ck.load_registry(&mut net.params, &format!("{SEG_PREFIX}."))?;
            ck.restore_optimizer("seg", &mut opt, &net.params)?;
            start = ck.epoch;
            CsvLog::open(log_path, SEG_HEADER, Some(start as usize))?
        }
        None => CsvLog::open(log_path, SEG_HEADER, None)?,
    };
    let k = cfg.segnet.num_classes;
    let bs = cfg.run.batch_size;
    let mut rows = Vec::new();
    let mut checkpoint = dir.latest()?.unwrap_or_default();
    for epoch in start..cfg.run.epochs as u64 {
        let order = epoch_order(samples.len(), seed, "seg.shuffle", epoch);
        let mut cm = ConfusionMatrix::with_ignore(k, IGNORE_LABEL);
        let (mut loss_sum, mut batches) = (0.0, 0);
        for (step, idx) in order.chunks(bs).enumerate() {
            let step = step as u64;
            let mut aug = rng(seed, &[label("seg.augment"), epoch, step]);
            let picked: Vec<Sample> = idx
                .iter()
                .map(|&i| if cfg.data.hflip { augment_hflip(&samples[i], &mut aug) } else { samples[i].clone() })
                .collect();
            let refs: Vec<&Sample> = picked.iter().collect();
            let batch = Batch::new(&refs, cfg.segnet.use_depth, cfg.data.luma)?;
            let dropout = derive(seed, &[label("seg.dropout"), epoch, step]);
            let (loss, pred) = seg_step(&mut net, &mut opt, &batch, &weights, cfg, dropout)?;
            cm.update(&pred, &batch.labels)?;
            loss_sum += loss;
            batches += 1;
        }
        let m = cm.metrics()?;
        let row = SegEpoch {
            epoch: epoch + 1,
            loss: loss_sum / batches as f64,
            pixel_acc: m.global_acc,
            class_avg: m.class_avg,
            miou: m.miou,
        };
        log.push(&format!(
            "{},{},{},{},{}",
            row.epoch,
            fmt(row.loss),
            fmt(row.pixel_acc),
            fmt(row.class_avg),
            fmt(row.miou)
        ))?;
        log::info!("seg epoch {} loss {:.5} acc {:.4} miou {:.4}", row.epoch, row.loss, m.global_acc, m.miou);
        rows.push(row);
        let mut ck = Checkpoint::new(epoch + 1, seed, cfg.to_text());
        ck.add_registry(&net.params);
        ck.add_optimizer("seg", &opt, &net.params);
        ck.tensors.push(weights_entry(&weights));
        checkpoint = dir.save(&ck)?;
    }
    Ok(SegRun { net, log: rows, checkpoint })
}

fn seg_step(
    net: &mut SegNet,
    opt: &mut Adam,
    batch: &Batch,
    weights: &ClassWeights,
    cfg: &RunConfig,
    dropout_seed: u64,
) -> Result<(f64, Vec<u8>)> {
    let mut g = Graph::new();
    let (x, l) = (g.input(batch.rgb.clone()), g.input(batch.ld.clone()));
    let mut b = Binding::new(&mut net.params, Mode::Train).with_seed(dropout_seed);
    let logits = net.arch.forward(&mut g, &mut b, x, l)?;
    let loss = seg_loss(&mut g, logits, &batch.labels, weights, cfg.loss.reduction)?;
    g.backward(loss)?;
    b.store_grads(&g);
    let pred = argmax_labels(g.value(logits))?;
    let value = g.value(loss).item() as f64;
    opt.step(&mut net.params)?;
    Ok((value, pred))
}

/// `[N, 3, H, W]` stack of sample images mapped to `[-1, 1]`.
fn signed_stack(samples: &[&Sample]) -> Result<Tensor> {
    let imgs: Vec<&Tensor> = samples.iter().map(|s| &s.rgb).collect();
    let mut t = Tensor::stack(&imgs)?;
    t.data_mut().iter_mut().for_each(|v| *v = 2.0 * *v - 1.0);
    Ok(t)
}

fn unit_stack(samples: &[&Sample]) -> Result<Tensor> {
    Tensor::stack(&samples.iter().map(|s| &s.rgb).collect::<Vec<_>>())
}

fn to_signed(t: &Tensor) -> Tensor {
    let mut t = t.clone();
    t.data_mut().iter_mut().for_each(|v| *v = 2.0 * *v - 1.0);
    t
}

/// `n` uniformly drawn samples, optionally flipped.
fn draw<'a>(pool: &'a [Sample], n: usize, flip: bool, r: &mut ChaCha8Rng) -> Vec<std::borrow::Cow<'a, Sample>> {
    (0..n)
        .map(|_| {
            let s = &pool[r.random_range(0..pool.len())];
            if flip && r.random_bool(0.5) {
                std::borrow::Cow::Owned(hflip(s))
            } else {
                std::borrow::Cow::Borrowed(s)
            }
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct DaStep {
    pub step: u64,
    pub losses: GanLosses,
}

pub struct TransferRun {
    pub model: TransferModel,
    pub log: Vec<DaStep>,
    pub checkpoint: PathBuf,
}

/// Unpaired translation training, foggy (`x`) to clear (`y`). Writes
/// `da_log.csv` and checkpoints every `checkpoint_every` steps and at the end.
pub fn train_transfer(
    cfg: &RunConfig,
    foggy: &[Sample],
    clear: &[Sample],
    out: &Path,
    resume: bool,
) -> Result<TransferRun> {
    cfg.validate()?;
    check_samples(foggy, "foggy")?;
    check_samples(clear, "clear")?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let seed = cfg.run.seed;
    let dir = CheckpointDir::new(out, "da", cfg.run.keep_last);
    let mut model = TransferModel::new(&cfg.transfer.model, transfer_init_seed(seed))?;
    let da_optim = AdamConfig {
        lr: cfg.transfer_lr(),
        ..cfg.optim
    };
    let mut opt_g = Adam::new(da_optim, &model.gens);
    let mut opt_d = Adam::new(da_optim, &model.discs);
    let mut start = 0;
    let log_path = out.join("da_log.csv");
    let log = match resume_point(&dir, cfg, resume)? {
        Some(ck) => {
            ck.load_registry(&mut model.gens, "transfer.gen")?;
            ck.load_registry(&mut model.discs, "transfer.disc")?;
            ck.restore_optimizer("gen", &mut opt_g, &model.gens)?;
            ck.restore_optimizer("disc", &mut opt_d, &model.discs)?;
            start = ck.epoch;
            CsvLog::open(log_path, DA_HEADER, Some(start as usize))?
        }
        None => CsvLog::open(log_path, DA_HEADER, None)?,
    };
    let steps = cfg.transfer.steps as u64;
    let every = cfg.transfer.checkpoint_every.max(1) as u64;
    let bs = cfg.transfer.batch_size;
    let mut rows = Vec::new();
    let mut checkpoint = dir.latest()?.unwrap_or_default();
    for step in start..steps {
        let mut r = rng(seed, &[label("da.sample"), step]);
        let xs = draw(foggy, bs, cfg.data.hflip, &mut r);
        let ys = draw(clear, bs, cfg.data.hflip, &mut r);
        let x = signed_stack(&xs.iter().map(|c| c.as_ref()).collect::<Vec<_>>())?;
        let y = signed_stack(&ys.iter().map(|c| c.as_ref()).collect::<Vec<_>>())?;
        let l = model.train_step(&x, &y, &mut opt_g, &mut opt_d)?;
        log.push(&format!(
            "{},{},{},{},{},{}",
            step + 1,
            fmt(l.gen),
            fmt(l.adv),
            fmt(l.cycle),
            fmt(l.disc_x),
            fmt(l.disc_y)
        ))?;
        if (step + 1) % 50 == 0 {
            log::info!("da step {} cycle {:.5} adv {:.5} disc {:.5}", step + 1, l.cycle, l.adv, l.disc());
        }
        rows.push(DaStep { step: step + 1, losses: l });
        if (step + 1) % every == 0 || step + 1 == steps {
            let mut ck = Checkpoint::new(step + 1, seed, cfg.to_text());
            ck.add_registry(&model.gens);
            ck.add_registry(&model.discs);
            ck.add_optimizer("gen", &opt_g, &model.gens);
            ck.add_optimizer("disc", &opt_d, &model.discs);
            checkpoint = dir.save(&ck)?;
        }
    }
    Ok(TransferRun { model, log: rows, checkpoint })
}

/// Mean absolute difference of two equally shaped tensors.
pub fn mean_abs_diff(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::shape("mean_abs_diff", format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    let s: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs() as f64).sum();
    Ok(s / a.numel().max(1) as f64)
}

/// Mean cycle-reconstruction L1 over both directions, on `[0, 1]` images
/// translated one at a time.
pub fn cycle_l1(model: &mut TransferModel, foggy: &[Sample], clear: &[Sample]) -> Result<f64> {
    let x = unit_stack(&foggy.iter().collect::<Vec<_>>())?;
    let y = unit_stack(&clear.iter().collect::<Vec<_>>())?;
    let fy = model.translate_dir(Direction::FoggyToClear, &x)?;
    let rx = model.translate_dir(Direction::ClearToFoggy, &fy)?;
    let fx = model.translate_dir(Direction::ClearToFoggy, &y)?;
    let ry = model.translate_dir(Direction::FoggyToClear, &fx)?;
    Ok(0.5 * (mean_abs_diff(&rx, &x)? + mean_abs_diff(&ry, &y)?))
}

#[derive(Clone, Debug, PartialEq)]
pub struct FinetuneEpoch {
    pub epoch: u64,
    pub joint: f64,
    pub seg: f64,
    pub adv: f64,
    pub s_adv: f64,
    pub s_seg: f64,
    pub disc: f64,
}

pub struct FinetuneRun {
    pub net: SegNet,
    pub transfer: Option<TransferModel>,
    pub log: Vec<FinetuneEpoch>,
    pub checkpoint: PathBuf,
}

/// Joint finetuning on labelled foggy samples. With domain adaptation each
/// image is translated first and the adversarial term joins the loss;
/// `clear` supplies unpaired real images for the discriminator update.
pub fn finetune_joint(
    cfg: &RunConfig,
    seg_ck: &Checkpoint,
    da_ck: Option<&Checkpoint>,
    foggy: &[Sample],
    clear: &[Sample],
    out: &Path,
    resume: bool,
) -> Result<FinetuneRun> {
    cfg.validate()?;
    check_samples(foggy, "finetuning")?;
    let use_da = cfg.finetune.use_domain_adaptation;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let seed = cfg.run.seed;

    let (seg_cfg, mut net) = load_seg(seg_ck)?;
    if seg_cfg.segnet != cfg.segnet {
        return Err(Error::Config("segmentation checkpoint was built with a different network".into()));
    }
    let unc = UncertaintyWeights::new(&mut net.params)?;
    let mut transfer = match (use_da, da_ck) {
        (false, _) => None,
        (true, None) => return Err(Error::Config("domain adaptation needs a translation checkpoint".into())),
        (true, Some(ck)) => {
            let (da_cfg, m) = load_transfer(ck)?;
            if da_cfg.transfer.model != cfg.transfer.model {
                return Err(Error::Config("translation checkpoint was built with a different model".into()));
            }
            check_samples(clear, "clear")?;
            Some(m)
        }
    };
    let weights = match weights_from(seg_ck) {
        Some(w) => w,
        None => training_weights(cfg, foggy)?,
    };

    let mut opt_s = Adam::new(cfg.optim, &net.params);
    let mut opts = transfer
        .as_ref()
        .map(|m| (Adam::new(cfg.optim, &m.gens), Adam::new(cfg.optim, &m.discs)));
    let dir = CheckpointDir::new(out, "ft", cfg.run.keep_last);
    let log_path = out.join("ft_log.csv");
    let mut start = 0;
    let log = match resume_point(&dir, cfg, resume)? {
        Some(ck) => {
            // segmenter weights plus the uncertainty terms registered beside them
            let names: Vec<String> = net.params.named_tensors().map(|(n, _)| n.to_string()).collect();
            for name in names {
                let t = ck
                    .tensors
                    .iter()
                    .find(|t| t.name == name)
                    .ok_or_else(|| Error::Checkpoint(format!("missing {name}")))?;
                net.params.set(&name, &t.data, &t.shape)?;
            }
            ck.restore_optimizer("seg", &mut opt_s, &net.params)?;
            if let (Some(m), Some((og, od))) = (transfer.as_mut(), opts.as_mut()) {
                ck.load_registry(&mut m.gens, "transfer.gen")?;
                ck.load_registry(&mut m.discs, "transfer.disc")?;
                ck.restore_optimizer("gen", og, &m.gens)?;
                ck.restore_optimizer("disc", od, &m.discs)?;
            }
            start = ck.epoch;
            CsvLog::open(log_path, FT_HEADER, Some(start as usize))?
        }
        None => CsvLog::open(log_path, FT_HEADER, None)?,
    };

    let bs = cfg.run.batch_size;
    let mut rows = Vec::new();
    let mut checkpoint = dir.latest()?.unwrap_or_default();
    for epoch in start..cfg.finetune.epochs as u64 {
        let order = epoch_order(foggy.len(), seed, "ft.shuffle", epoch);
        let mut acc = [0.0f64; 4];
        let mut batches = 0;
        for (step, idx) in order.chunks(bs).enumerate() {
            let step = step as u64;
            let mut aug = rng(seed, &[label("ft.augment"), epoch, step]);
            let picked: Vec<Sample> = idx
                .iter()
                .map(|&i| if cfg.data.hflip { augment_hflip(&foggy[i], &mut aug) } else { foggy[i].clone() })
                .collect();
            let refs: Vec<&Sample> = picked.iter().collect();
            let batch = Batch::new(&refs, cfg.segnet.use_depth, cfg.data.luma)?;
            let dropout = derive(seed, &[label("ft.dropout"), epoch, step]);
            let s = match (transfer.as_mut(), opts.as_mut()) {
                (Some(m), Some((og, od))) => {
                    let mut r = rng(seed, &[label("ft.clear"), epoch, step]);
                    let reals = draw(clear, idx.len(), cfg.data.hflip, &mut r);
                    let reals: Vec<&Sample> = reals.iter().map(|c| c.as_ref()).collect();
                    let step_in = JointInputs {
                        batch: &batch,
                        samples: &refs,
                        clear: &reals,
                        weights: &weights,
                        dropout,
                    };
                    joint_step_da(cfg, &mut net, &unc, m, &mut opt_s, og, od, step_in)?
                }
                _ => joint_step_plain(cfg, &mut net, &unc, &mut opt_s, &batch, &weights, dropout)?,
            };
            for (a, v) in acc.iter_mut().zip(s) {
                *a += v;
            }
            batches += 1;
        }
        let [joint, seg, adv, disc] = acc.map(|v| v / batches as f64);
        let row = FinetuneEpoch {
            epoch: epoch + 1,
            joint,
            seg,
            adv,
            s_adv: net.params.param(unc.s_adv).item() as f64,
            s_seg: net.params.param(unc.s_seg).item() as f64,
            disc,
        };
        log.push(&format!(
            "{},{},{},{},{},{},{}",
            row.epoch,
            fmt(row.joint),
            fmt(row.seg),
            fmt(row.adv),
            fmt(row.s_adv),
            fmt(row.s_seg),
            fmt(row.disc)
        ))?;
        log::info!("finetune epoch {} joint {:.5} seg {:.5}", row.epoch, joint, seg);
        rows.push(row);
        let mut ck = Checkpoint::new(epoch + 1, seed, cfg.to_text());
        ck.add_registry(&net.params);
        ck.add_optimizer("seg", &opt_s, &net.params);
        if let (Some(m), Some((og, od))) = (transfer.as_ref(), opts.as_ref()) {
            ck.add_registry(&m.gens);
            ck.add_registry(&m.discs);
            ck.add_optimizer("gen", og, &m.gens);
            ck.add_optimizer("disc", od, &m.discs);
        }
        ck.tensors.push(weights_entry(&weights));
        checkpoint = dir.save(&ck)?;
    }
    Ok(FinetuneRun {
        net,
        transfer,
        log: rows,
        checkpoint,
    })
}

struct JointInputs<'a> {
    batch: &'a Batch,
    samples: &'a [&'a Sample],
    clear: &'a [&'a Sample],
    weights: &'a ClassWeights,
    dropout: u64,
}

/// Returns `[joint, seg, adv, disc]`.
fn joint_step_plain(
    cfg: &RunConfig,
    net: &mut SegNet,
    unc: &UncertaintyWeights,
    opt: &mut Adam,
    batch: &Batch,
    weights: &ClassWeights,
    dropout: u64,
) -> Result<[f64; 4]> {
    let mut g = Graph::new();
    let (x, l) = (g.input(batch.rgb.clone()), g.input(batch.ld.clone()));
    let mut b = Binding::new(&mut net.params, Mode::Train).with_seed(dropout);
    let logits = net.arch.forward(&mut g, &mut b, x, l)?;
    let l_seg = seg_loss(&mut g, logits, &batch.labels, weights, cfg.loss.reduction)?;
    let joint = unc.joint_loss(&mut g, &mut b, None, l_seg)?;
    g.backward(joint)?;
    b.store_grads(&g);
    let out = [g.value(joint).item() as f64, g.value(l_seg).item() as f64, 0.0, 0.0];
    opt.step(&mut net.params)?;
    Ok(out)
}

#[allow(clippy::too_many_arguments)]
fn joint_step_da(
    cfg: &RunConfig,
    net: &mut SegNet,
    unc: &UncertaintyWeights,
    m: &mut TransferModel,
    opt_s: &mut Adam,
    opt_g: &mut Adam,
    opt_d: &mut Adam,
    inp: JointInputs<'_>,
) -> Result<[f64; 4]> {
    let train_gen = cfg.finetune.train_generator;
    let n = inp.samples.len();
    let (out, corrected) = {
        let mut g = Graph::new();
        let mut gb = Binding::new(&mut m.gens, Mode::BatchStats);
        if !train_gen {
            gb = gb.frozen();
        }
        let parts = (0..n)
            .map(|i| {
                let xi = g.input(inp.batch.rgb.batch_slice(i)?);
                translate_var(&m.arch.gen_xy, &mut g, &mut gb, xi)
            })
            .collect::<Result<Vec<_>>>()?;
        let y01 = g.concat_batch(&parts)?;
        let ld = match cfg.finetune.luminance_from {
            LuminanceSource::Foggy => g.input(inp.batch.ld.clone()),
            LuminanceSource::Corrected => {
                let lum = g.channel_mix(y01, &cfg.data.luma)?;
                if cfg.segnet.use_depth {
                    let depth = ld_depth(inp.batch.ld.clone())?;
                    let d = g.input(depth);
                    g.concat_channels(lum, d)?
                } else {
                    lum
                }
            }
        };
        let mut sb = Binding::new(&mut net.params, Mode::Train).with_seed(inp.dropout);
        let logits = net.arch.forward(&mut g, &mut sb, y01, ld)?;
        let l_seg = seg_loss(&mut g, logits, &inp.batch.labels, inp.weights, cfg.loss.reduction)?;
        let signed = g.affine(y01, 2.0, -1.0);
        let mut db = Binding::new(&mut m.discs, Mode::BatchStats).frozen();
        let dy = m.arch.disc_y.forward(&mut g, &mut db, signed)?;
        let l_adv = gen_adversarial_loss(&mut g, dy, m.arch.cfg.gen_loss);
        let joint = unc.joint_loss(&mut g, &mut sb, Some(l_adv), l_seg)?;
        gb.bind_all(&mut g);
        g.backward(joint)?;
        sb.store_grads(&g);
        gb.store_grads(&g);
        let vals = [
            g.value(joint).item() as f64,
            g.value(l_seg).item() as f64,
            g.value(l_adv).item() as f64,
        ];
        (vals, g.value(y01).clone())
    };
    opt_s.step(&mut net.params)?;
    if train_gen {
        opt_g.step(&mut m.gens)?;
    }
    let real_y = unit_stack(inp.clear)?;
    let fake_x = m.translate_dir(Direction::ClearToFoggy, &real_y)?;
    let (dx, dy) = m.disc_step(
        &to_signed(&inp.batch.rgb),
        &to_signed(&real_y),
        &to_signed(&fake_x),
        &to_signed(&corrected),
        opt_d,
    )?;
    Ok([out[0], out[1], out[2], dx + dy])
}

/// Depth channel of a `[N, 2, H, W]` LD batch.
fn ld_depth(ld: Tensor) -> Result<Tensor> {
    let [n, c, h, w] = ld.dims4("ld_depth")?;
    if c != 2 {
        return Err(Error::shape("ld_depth", format!("expected 2 channels, got {c}")));
    }
    let plane = h * w;
    let d = ld.data();
    let data = (0..n).flat_map(|s| d[(2 * s + 1) * plane..(2 * s + 2) * plane].iter().copied()).collect();
    Tensor::new([n, 1, h, w], data)
}

/// Streams `samples` through the optional translator and the network in
/// inference mode. Nothing is mutated.
pub fn evaluate(
    cfg: &RunConfig,
    net: &mut SegNet,
    mut translator: Option<&mut TransferModel>,
    samples: &[Sample],
) -> Result<ConfusionMatrix> {
    check_samples(samples, "evaluation")?;
    let mut cm = ConfusionMatrix::with_ignore(net.config().num_classes, IGNORE_LABEL);
    let use_depth = net.config().use_depth;
    for chunk in samples.chunks(cfg.run.batch_size) {
        let refs: Vec<&Sample> = chunk.iter().collect();
        let batch = Batch::new(&refs, use_depth, cfg.data.luma)?;
        let (rgb, ld) = match translator.as_deref_mut() {
            Some(t) => {
                let y = t.translate(&batch.rgb)?;
                let ld = match cfg.finetune.luminance_from {
                    LuminanceSource::Corrected => ld_from_images(&y, &refs, use_depth, cfg.data.luma)?,
                    LuminanceSource::Foggy => batch.ld.clone(),
                };
                (y, ld)
            }
            None => (batch.rgb.clone(), batch.ld.clone()),
        };
        let logits = net.predict(&rgb, &ld)?;
        cm.update(&argmax_labels(&logits)?, &batch.labels)?;
    }
    Ok(cm)
}

/// Writes `report.txt` and the `report.kv` sidecar into `dir`.
pub fn write_report(m: &Metrics, dir: &Path) -> Result<(PathBuf, PathBuf)> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let names = if m.iou.len() == CITYSCAPES_CLASSES.len() {
        CITYSCAPES_CLASSES.to_vec()
    } else {
        Vec::new()
    };
    let report = dir.join("report.txt");
    let sidecar = dir.join("report.kv");
    fs::write(&report, format_report(m, &names)).map_err(|e| Error::io(&report, e))?;
    fs::write(&sidecar, format_sidecar(m, &names)).map_err(|e| Error::io(&sidecar, e))?;
    Ok((report, sidecar))
}
