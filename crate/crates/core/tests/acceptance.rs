//! Acceptance criteria, one test and one `PASS`/`FAIL` line each.
//!
//! Criteria 6 to 8 share one trained segmenter and one trained translator,
//! built on first use. Run with `--nocapture` to see the lines.

use std::fs;
use std::path::Path;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use fogseg_core::checkpoint::Checkpoint;
use fogseg_core::config::RunConfig;
use fogseg_core::data::{luminance, synth_fog_corpus, Sample, LUMA, NUM_CLASSES};
use fogseg_core::gradsuite::{self, PARAM_TOLERANCE, TARGET_PARAMS};
use fogseg_core::loss::{class_weights, seg_loss, ClassWeights, UncertaintyWeights};
use fogseg_core::metrics::{ConfusionMatrix, Metrics};
use fogseg_core::nn::{Binding, Mode, ParamRegistry};
use fogseg_core::parallel;
use fogseg_core::seg::{SegNet, SegNetConfig};
use fogseg_core::tensor::Reduction;
use fogseg_core::train::{self, mean_abs_diff, TransferRun};
use fogseg_core::transfer::TransferModel;
use fogseg_core::{Graph, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn verdict(id: u32, name: &str, pass: bool, detail: String) {
    println!("\ncriterion {id} {} {name}: {detail}", if pass { "PASS" } else { "FAIL" });
    assert!(pass, "criterion {id} ({name}) failed: {detail}");
}

fn secs(d: Duration) -> String {
    format!("{:.1}s", d.as_secs_f64())
}

#[test]
fn c1_gradient_suite() {
    let t = Instant::now();
    let entries = gradsuite::run_suite(0).unwrap();
    let elapsed = t.elapsed();
    let failed: Vec<String> = entries
        .iter()
        .filter(|e| !e.report.passed())
        .map(|e| format!("{} ({:.2e})", e.name, e.report.max_rel_err))
        .collect();
    let worst = entries.iter().map(|e| e.report.max_rel_err).fold(0.0, f64::max);
    let checked: usize = entries.iter().map(|e| e.report.checked).sum();
    verdict(
        1,
        "gradient suite",
        failed.is_empty() && elapsed < Duration::from_secs(300),
        format!(
            "{} checks, {checked} coordinates, worst rel err {worst:.2e} < 1e-4, failed {failed:?}, {}",
            entries.len(),
            secs(elapsed)
        ),
    );
}

#[test]
fn c2_shape_contract() {
    let cfg = SegNetConfig::default();
    let mut net = SegNet::new(&cfg, 0).unwrap();
    let t = Instant::now();
    let rgb = Tensor::from_fn(vec![1, 3, 256, 512], |i| (i % 255) as f32 / 255.0);
    let ld = Tensor::from_fn(vec![1, 2, 256, 512], |i| (i % 97) as f32 / 97.0);
    let y = net.predict(&rgb, &ld).unwrap();
    let ok = y.shape() == [1, NUM_CLASSES, 256, 512] && y.data().iter().all(|v| v.is_finite());
    verdict(2, "shape contract", ok, format!("logits {:?}, {}", y.shape(), secs(t.elapsed())));
}

#[test]
fn c3_parameter_count() {
    let (n, dev) = gradsuite::param_report().unwrap();
    verdict(
        3,
        "parameter count",
        dev.abs() <= PARAM_TOLERANCE,
        format!("{n} vs {TARGET_PARAMS}, deviation {:+.2}% within ±{:.0}%", dev * 100.0, PARAM_TOLERANCE * 100.0),
    );
}

/// Aggregates straight from label and prediction arrays, no confusion matrix.
fn brute_force(pairs: &[(Vec<u8>, Vec<u8>)], k: usize) -> (f64, f64, f64) {
    let (mut tp, mut gt, mut pr) = (vec![0u64; k], vec![0u64; k], vec![0u64; k]);
    let mut valid = 0u64;
    for (labels, pred) in pairs {
        for (&l, &p) in labels.iter().zip(pred) {
            if l == 255 {
                continue;
            }
            valid += 1;
            gt[l as usize] += 1;
            pr[p as usize] += 1;
            if l == p {
                tp[l as usize] += 1;
            }
        }
    }
    let mean = |v: Vec<f64>| v.iter().sum::<f64>() / v.len() as f64;
    let acc: Vec<f64> = (0..k).filter(|&c| gt[c] > 0).map(|c| tp[c] as f64 / gt[c] as f64).collect();
    let iou: Vec<f64> = (0..k)
        .filter(|&c| gt[c] + pr[c] > 0)
        .map(|c| tp[c] as f64 / (gt[c] + pr[c] - tp[c]) as f64)
        .collect();
    (tp.iter().sum::<u64>() as f64 / valid as f64, mean(acc), mean(iou))
}

#[test]
fn c4_metric_oracle() {
    let k = NUM_CLASSES;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let pairs: Vec<(Vec<u8>, Vec<u8>)> = (0..1000)
        .map(|_| {
            let labels = (0..256)
                .map(|_| if rng.random_bool(0.1) { 255 } else { rng.random_range(0..k as u8) })
                .collect();
            let pred = (0..256).map(|_| rng.random_range(0..k as u8)).collect();
            (labels, pred)
        })
        .collect();
    let mut streamed = ConfusionMatrix::with_ignore(k, 255);
    let mut sharded = [ConfusionMatrix::with_ignore(k, 255), ConfusionMatrix::with_ignore(k, 255)];
    for (i, (l, p)) in pairs.iter().enumerate() {
        streamed.update(p, l).unwrap();
        sharded[i % 2].update(p, l).unwrap();
    }
    let [mut merged, other] = sharded;
    merged.merge(&other).unwrap();
    let m: Metrics = streamed.metrics().unwrap();
    let mm = merged.metrics().unwrap();
    let oracle = brute_force(&pairs, k);
    let got = (m.global_acc, m.class_avg, m.miou);
    let ok = got == oracle && (mm.global_acc, mm.class_avg, mm.miou) == oracle;
    verdict(4, "metric oracle", ok, format!("streamed {got:?} vs brute force {oracle:?}, exact"));
}

#[test]
fn c5_formula_spot_values() {
    let w = class_weights(&[0, 1], 1.10).unwrap().weights[0];
    let w_ok = (w - 10.49206).abs() < 1e-4;

    let mut g = Graph::<f64>::new();
    let x = g.input(Tensor::zeros(vec![1, NUM_CLASSES, 2, 2]));
    let l = seg_loss(&mut g, x, &[0, 5, 11, 18], &ClassWeights::uniform(NUM_CLASSES), Reduction::Mean).unwrap();
    let ce = g.value(l).item();
    let ce_ok = (ce - (NUM_CLASSES as f64).ln()).abs() < 1e-5;

    let lum = luminance(&Tensor::new(vec![3, 1, 1], vec![1.0f32; 3]).unwrap(), LUMA).data()[0];
    let lum_ok = lum == 1.03f32;

    let mut worst = 0.0f64;
    for (s_adv, s_seg, l_adv, l_seg) in [(0.0, 0.0, 0.7, 1.9), (0.4, -0.3, 2.5, 0.2), (-1.2, 0.9, 0.05, 3.3)] {
        let mut reg = ParamRegistry::<f64>::new();
        let u = UncertaintyWeights::new(&mut reg).unwrap();
        reg.param_mut(u.s_adv).data_mut()[0] = s_adv;
        reg.param_mut(u.s_seg).data_mut()[0] = s_seg;
        let mut g = Graph::new();
        let la = g.input(Tensor::scalar(l_adv));
        let ls = g.input(Tensor::scalar(l_seg));
        let mut b = Binding::new(&mut reg, Mode::Train);
        let j = u.joint_loss(&mut g, &mut b, Some(la), ls).unwrap();
        g.backward(j).unwrap();
        for (id, s, l) in [(u.s_adv, s_adv, l_adv), (u.s_seg, s_seg, l_seg)] {
            let got = g.grad(b.bound(id).unwrap()).unwrap()[0];
            let want = -(-s as f64).exp() * l + 0.5;
            worst = worst.max((got - want).abs());
        }
    }
    let joint_ok = worst < 1e-6;
    verdict(
        5,
        "formula spot values",
        w_ok && ce_ok && lum_ok && joint_ok,
        format!(
            "class weight {w:.6} (10.49206 ± 1e-4), uniform seg_loss {ce:.7} (ln 19 ± 1e-5), \
             luminance(1,1,1) {lum} (== 1.03), joint ds max err {worst:.1e} (< 1e-6)"
        ),
    );
}

// shared artifacts for criteria 6 to 8

const OVERFIT_SAMPLES: usize = 8;
const OVERFIT_EPOCHS: usize = 200;
const DA_TRAIN: usize = 64;
const DA_HELD_OUT: usize = 8;
const DA_STEPS: usize = 500;

struct Overfit {
    cfg: RunConfig,
    net: SegNet,
    clean: Vec<Sample>,
    hazy: Vec<Sample>,
    elapsed: Duration,
}

fn overfit() -> &'static std::sync::Mutex<Overfit> {
    static CELL: OnceLock<std::sync::Mutex<Overfit>> = OnceLock::new();
    CELL.get_or_init(|| {
        let mut cfg = RunConfig::default();
        cfg.run.seed = 6;
        cfg.run.epochs = OVERFIT_EPOCHS;
        let (h, w) = (cfg.segnet.input_height, cfg.segnet.input_width);
        let corpus = synth_fog_corpus(OVERFIT_SAMPLES, h, w, 6).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let t = Instant::now();
        let run = train::train_segmentation(&cfg, &corpus.clean, dir.path(), false).unwrap();
        std::sync::Mutex::new(Overfit {
            cfg,
            net: run.net,
            clean: corpus.clean,
            hazy: corpus.hazy,
            elapsed: t.elapsed(),
        })
    })
}

struct Transfer {
    run: TransferRun,
    initial: TransferModel,
    held_foggy: Vec<Sample>,
    held_clear: Vec<Sample>,
    elapsed: Duration,
}

fn transfer() -> &'static std::sync::Mutex<Transfer> {
    static CELL: OnceLock<std::sync::Mutex<Transfer>> = OnceLock::new();
    CELL.get_or_init(|| {
        let mut cfg = RunConfig::default();
        cfg.run.seed = 7;
        cfg.transfer.steps = DA_STEPS;
        cfg.transfer.checkpoint_every = DA_STEPS;
        let c = synth_fog_corpus(DA_TRAIN + DA_HELD_OUT, 64, 64, 7).unwrap();
        let half = DA_TRAIN / 2;
        // unpaired: foggy views of one half of the scenes, clean views of the other
        let foggy = &c.hazy[..half];
        let clear = &c.clean[half..DA_TRAIN];
        let dir = tempfile::tempdir().unwrap();
        let t = Instant::now();
        let run = train::train_transfer(&cfg, foggy, clear, dir.path(), false).unwrap();
        let elapsed = t.elapsed();
        let initial = initial_transfer(&cfg);
        std::sync::Mutex::new(Transfer {
            run,
            initial,
            held_foggy: c.hazy[DA_TRAIN..].to_vec(),
            held_clear: c.clean[DA_TRAIN..].to_vec(),
            elapsed,
        })
    })
}

/// The translator exactly as training initialises it, via a zero-step run.
fn initial_transfer(cfg: &RunConfig) -> TransferModel {
    let mut zero = cfg.clone();
    zero.transfer.steps = 0;
    let c = synth_fog_corpus(1, 16, 16, 0).unwrap();
    let dir = tempfile::tempdir().unwrap();
    train::train_transfer(&zero, &c.hazy, &c.clean, dir.path(), false).unwrap().model
}

fn stack(samples: &[Sample]) -> Tensor {
    Tensor::stack(&samples.iter().map(|s| &s.rgb).collect::<Vec<_>>()).unwrap()
}

#[test]
fn c6_overfit() {
    let mut o = overfit().lock().unwrap();
    let o = &mut *o;
    let m = train::evaluate(&o.cfg, &mut o.net, None, &o.clean).unwrap().metrics().unwrap();
    let ok = m.global_acc > 0.95 && m.miou > 0.90 && o.elapsed < Duration::from_secs(15 * 60);
    verdict(
        6,
        "overfit",
        ok,
        format!(
            "{OVERFIT_SAMPLES} samples 64x128, {OVERFIT_EPOCHS} epochs, eval-mode pixel acc {:.5} (> 0.95), mIoU {:.5} (> 0.90), {}",
            m.global_acc,
            m.miou,
            secs(o.elapsed)
        ),
    );
}

#[test]
fn c7_domain_transfer() {
    let mut t = transfer().lock().unwrap();
    let t = &mut *t;
    let before = train::cycle_l1(&mut t.initial, &t.held_foggy, &t.held_clear).unwrap();
    let after = train::cycle_l1(&mut t.run.model, &t.held_foggy, &t.held_clear).unwrap();
    let reduction = 1.0 - after / before;
    let (x, y) = (stack(&t.held_foggy), stack(&t.held_clear));
    let hazy_mae = mean_abs_diff(&x, &y).unwrap();
    let translated_mae = mean_abs_diff(&t.run.model.translate(&x).unwrap(), &y).unwrap();
    let ok = reduction > 0.5 && translated_mae < hazy_mae && t.elapsed < Duration::from_secs(30 * 60);
    verdict(
        7,
        "domain transfer",
        ok,
        format!(
            "held-out cycle L1 {before:.4} -> {after:.4} ({:.1}% reduction, > 50%), MAE to clean: translated {translated_mae:.4} vs hazy {hazy_mae:.4}, {DA_STEPS} steps in {}",
            reduction * 100.0,
            secs(t.elapsed)
        ),
    );
}

#[test]
fn c8_ablation_direction() {
    let mut o = overfit().lock().unwrap();
    let mut t = transfer().lock().unwrap();
    let o = &mut *o;
    let without = train::evaluate(&o.cfg, &mut o.net, None, &o.hazy).unwrap().metrics().unwrap();
    let with = train::evaluate(&o.cfg, &mut o.net, Some(&mut t.run.model), &o.hazy).unwrap().metrics().unwrap();
    let margin = with.miou - without.miou;
    verdict(
        8,
        "ablation direction",
        margin > 0.0,
        format!(
            "hazy-input mIoU of the clean-trained segmenter: with translator {:.4}, --no-da {:.4}, margin {margin:+.4} (> 0)",
            with.miou, without.miou
        ),
    );
}

fn pipeline(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut cfg = RunConfig::default();
    cfg.run.seed = 9;
    cfg.run.epochs = 2;
    cfg.run.batch_size = 2;
    cfg.segnet = SegNetConfig {
        input_height: 16,
        input_width: 32,
        ..SegNetConfig::tiny(NUM_CLASSES)
    };
    cfg.segnet.dropout = 0.1;
    cfg.transfer.model.ngf = 4;
    cfg.transfer.model.ndf = 4;
    cfg.transfer.model.res_blocks = 1;
    cfg.transfer.model.disc_layers = 2;
    cfg.transfer.steps = 4;
    cfg.transfer.checkpoint_every = 2;
    cfg.finetune.epochs = 2;
    let c = synth_fog_corpus(6, 16, 32, 9).unwrap();
    let seg = train::train_segmentation(&cfg, &c.clean, &root.join("seg"), false).unwrap();
    let da = train::train_transfer(&cfg, &c.hazy[..3], &c.clean[3..], &root.join("da"), false).unwrap();
    let seg_ck = Checkpoint::load(&seg.checkpoint).unwrap();
    let da_ck = Checkpoint::load(&da.checkpoint).unwrap();
    let ft = train::finetune_joint(&cfg, &seg_ck, Some(&da_ck), &c.hazy, &c.clean, &root.join("ft"), false).unwrap();
    let read = |p: &Path| (p.strip_prefix(root).unwrap().display().to_string(), fs::read(p).unwrap());
    vec![
        read(&root.join("seg/seg_log.csv")),
        read(&root.join("da/da_log.csv")),
        read(&root.join("ft/ft_log.csv")),
        read(&seg.checkpoint),
        read(&da.checkpoint),
        read(&ft.checkpoint),
    ]
}

#[test]
fn c9_determinism() {
    parallel::set_enabled(false);
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let first = pipeline(a.path());
    let second = pipeline(b.path());
    parallel::set_enabled(true);
    let differing: Vec<&str> = first
        .iter()
        .zip(&second)
        .filter(|(x, y)| x != y)
        .map(|(x, _)| x.0.as_str())
        .collect();
    let bytes: usize = first.iter().map(|f| f.1.len()).sum();
    verdict(
        9,
        "determinism",
        differing.is_empty() && first.len() == second.len(),
        format!("{} artifacts ({bytes} bytes) across seg/da/ft, single-threaded; differing {differing:?}", first.len()),
    );
}
