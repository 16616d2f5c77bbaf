use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use fogseg_core::checkpoint::{Checkpoint, CheckpointDir};
use fogseg_core::config::RunConfig;
use fogseg_core::data::{load_dataset, load_rgb, save_rgb, synth_fog_corpus, write_corpus, Manifest, Sample};
use fogseg_core::gradsuite::{self, PARAM_TOLERANCE, TARGET_PARAMS};
use fogseg_core::tensor::gradcheck::GradcheckConfig;
use fogseg_core::train::{self, has_transfer, load_seg, load_transfer};

#[derive(Parser, Debug)]
#[command(name = "fogseg", version, about = "Foggy-scene segmentation with foggy-to-clear domain transfer")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Supervised segmentation training.
    TrainSeg(TrainSeg),
    /// Unpaired foggy-to-clear translation training.
    TrainDa(TrainDa),
    /// Joint finetuning of translator and segmenter on labelled foggy data.
    Finetune(Finetune),
    /// Metric report of a checkpoint on a manifest.
    Eval(Eval),
    /// Translates one foggy image into a corrected one.
    Translate(Translate),
    /// Writes a seeded synthetic clean/hazy corpus.
    SynthData(SynthData),
    /// Runs the finite-difference gradient suites.
    Gradcheck(Gradcheck),
}

#[derive(Args, Debug)]
struct Common {
    /// Sectioned key=value configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides `[run] seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides one key, `section.key=value`; repeatable.
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
    set: Vec<String>,
}

impl Common {
    fn load(&self) -> anyhow::Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        for s in &self.set {
            let (lhs, value) = s.split_once('=').with_context(|| format!("--set {s:?}: expected SECTION.KEY=VALUE"))?;
            let (section, key) = lhs
                .split_once('.')
                .with_context(|| format!("--set {s:?}: expected SECTION.KEY=VALUE"))?;
            cfg.set(section.trim(), key.trim(), value.trim())?;
        }
        if let Some(seed) = self.seed {
            cfg.run.seed = seed;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args, Debug)]
struct TrainSeg {
    #[command(flatten)]
    common: Common,
    /// Labelled training manifest; defaults to `[data] train_manifest`.
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Continue from the latest checkpoint in `--out`.
    #[arg(long)]
    resume: bool,
}

#[derive(Args, Debug)]
struct TrainDa {
    #[command(flatten)]
    common: Common,
    /// Foggy images; defaults to `[data] foggy_manifest`.
    #[arg(long)]
    foggy: Option<PathBuf>,
    /// Clear images; defaults to `[data] clear_manifest`.
    #[arg(long)]
    clear: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    resume: bool,
}

#[derive(Args, Debug)]
struct Finetune {
    #[command(flatten)]
    common: Common,
    /// Segmentation checkpoint, or a directory holding one.
    #[arg(long)]
    ckpt: PathBuf,
    /// Translation checkpoint, or a directory holding one.
    #[arg(long)]
    da_ckpt: Option<PathBuf>,
    /// Labelled foggy manifest; defaults to `[data] foggy_manifest`.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Clear images for the discriminator; defaults to `[data] clear_manifest`.
    #[arg(long)]
    clear: Option<PathBuf>,
    /// Finetune the segmenter alone, without translation.
    #[arg(long)]
    no_da: bool,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    resume: bool,
}

#[derive(Args, Debug)]
struct Eval {
    /// Checkpoint holding a segmenter, or a directory holding one.
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    /// Translator to prepend; a finetuned checkpoint carries its own.
    #[arg(long)]
    da_ckpt: Option<PathBuf>,
    /// Evaluate without any translator.
    #[arg(long)]
    no_da: bool,
    /// Report directory; defaults to the checkpoint's directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct Translate {
    /// Checkpoint holding a translator, or a directory holding one.
    #[arg(long)]
    ckpt: PathBuf,
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct SynthData {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(short = 'n', default_value_t = 16)]
    n: usize,
    #[arg(long, default_value_t = 64)]
    height: usize,
    #[arg(long, default_value_t = 128)]
    width: usize,
}

#[derive(Args, Debug)]
struct Gradcheck {
    /// Print the full-size parameter count and its deviation instead.
    #[arg(long)]
    params: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli.cmd) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn run(cmd: Cmd) -> anyhow::Result<ExitCode> {
    match cmd {
        Cmd::TrainSeg(a) => train_seg(a)?,
        Cmd::TrainDa(a) => train_da(a)?,
        Cmd::Finetune(a) => finetune(a)?,
        Cmd::Eval(a) => eval(a)?,
        Cmd::Translate(a) => translate(a)?,
        Cmd::SynthData(a) => {
            let corpus = synth_fog_corpus(a.n, a.height, a.width, a.seed)?;
            let (clean, hazy) = write_corpus(&corpus, &a.out)?;
            println!("{}", clean.display());
            println!("{}", hazy.display());
        }
        Cmd::Gradcheck(a) => return gradcheck(a),
    }
    Ok(ExitCode::SUCCESS)
}

fn manifest_arg(given: Option<PathBuf>, fallback: &Option<PathBuf>, what: &str) -> anyhow::Result<PathBuf> {
    match given.or_else(|| fallback.clone()) {
        Some(p) => Ok(p),
        None => bail!("no {what} manifest given on the command line or in the config"),
    }
}

fn samples(path: &Path, size: Option<(usize, usize)>) -> anyhow::Result<Vec<Sample>> {
    let m = Manifest::load(path)?;
    Ok(load_dataset(&m, size)?)
}

/// A checkpoint file, or the newest one of the given kinds in a directory.
fn resolve_ckpt(path: &Path, kinds: &[&str]) -> anyhow::Result<Checkpoint> {
    if path.is_dir() {
        for kind in kinds {
            if let Some(p) = CheckpointDir::new(path, kind, 1).latest()? {
                return Ok(Checkpoint::load(&p)?);
            }
        }
        bail!("no {} checkpoint in {}", kinds.join("/"), path.display());
    }
    Ok(Checkpoint::load(path)?)
}

fn seg_size(cfg: &RunConfig) -> Option<(usize, usize)> {
    Some((cfg.segnet.input_height, cfg.segnet.input_width))
}

fn train_seg(a: TrainSeg) -> anyhow::Result<()> {
    let cfg = a.common.load()?;
    let m = manifest_arg(a.manifest, &cfg.data.train_manifest, "training")?;
    let data = samples(&m, seg_size(&cfg))?;
    let run = train::train_segmentation(&cfg, &data, &a.out, a.resume)?;
    if let Some(last) = run.log.last() {
        println!(
            "epoch {} loss {:.6} pixel_acc {:.4} miou {:.4}",
            last.epoch, last.loss, last.pixel_acc, last.miou
        );
    }
    println!("{}", run.checkpoint.display());
    Ok(())
}

fn train_da(a: TrainDa) -> anyhow::Result<()> {
    let cfg = a.common.load()?;
    let foggy = samples(&manifest_arg(a.foggy, &cfg.data.foggy_manifest, "foggy")?, None)?;
    let clear = samples(&manifest_arg(a.clear, &cfg.data.clear_manifest, "clear")?, None)?;
    let mut run = train::train_transfer(&cfg, &foggy, &clear, &a.out, a.resume)?;
    let cycle = train::cycle_l1(&mut run.model, &foggy, &clear)?;
    println!("cycle_l1 {cycle:.6}");
    println!("{}", run.checkpoint.display());
    Ok(())
}

fn finetune(a: Finetune) -> anyhow::Result<()> {
    let mut cfg = a.common.load()?;
    if a.no_da {
        cfg.finetune.use_domain_adaptation = false;
    }
    let seg_ck = resolve_ckpt(&a.ckpt, &["seg"])?;
    let da_ck = match (&a.da_ckpt, cfg.finetune.use_domain_adaptation) {
        (Some(p), true) => Some(resolve_ckpt(p, &["da"])?),
        _ => None,
    };
    let foggy = samples(&manifest_arg(a.manifest, &cfg.data.foggy_manifest, "foggy")?, seg_size(&cfg))?;
    let clear = if cfg.finetune.use_domain_adaptation {
        samples(&manifest_arg(a.clear, &cfg.data.clear_manifest, "clear")?, seg_size(&cfg))?
    } else {
        Vec::new()
    };
    let run = train::finetune_joint(&cfg, &seg_ck, da_ck.as_ref(), &foggy, &clear, &a.out, a.resume)?;
    if let Some(last) = run.log.last() {
        println!("epoch {} joint {:.6} seg {:.6}", last.epoch, last.joint, last.seg);
    }
    println!("{}", run.checkpoint.display());
    Ok(())
}

fn eval(a: Eval) -> anyhow::Result<()> {
    let ck = resolve_ckpt(&a.ckpt, &["ft", "seg"])?;
    let (cfg, mut net) = load_seg(&ck)?;
    let mut translator = match (&a.da_ckpt, a.no_da) {
        (_, true) => None,
        (Some(p), false) => Some(load_transfer(&resolve_ckpt(p, &["da", "ft"])?)?.1),
        (None, false) if has_transfer(&ck) => Some(load_transfer(&ck)?.1),
        (None, false) => None,
    };
    let data = samples(&a.manifest, seg_size(&cfg))?;
    let cm = train::evaluate(&cfg, &mut net, translator.as_mut(), &data)?;
    let m = cm.metrics()?;
    let dir = match a.out {
        Some(d) => d,
        None if a.ckpt.is_dir() => a.ckpt.clone(),
        None => a.ckpt.parent().map(Path::to_path_buf).unwrap_or_default(),
    };
    let (report, _) = train::write_report(&m, &dir)?;
    println!(
        "translator {} global_acc {:.4} class_avg {:.4} miou {:.4}",
        if translator.is_some() { "on" } else { "off" },
        m.global_acc,
        m.class_avg,
        m.miou
    );
    println!("{}", report.display());
    Ok(())
}

fn translate(a: Translate) -> anyhow::Result<()> {
    let ck = resolve_ckpt(&a.ckpt, &["da", "ft"])?;
    if !has_transfer(&ck) {
        bail!("checkpoint carries no translator");
    }
    let (_, mut model) = load_transfer(&ck)?;
    let rgb = load_rgb(&a.input)?;
    let shape = rgb.shape().to_vec();
    let y = model.translate(&rgb.reshape([1, shape[0], shape[1], shape[2]])?)?;
    save_rgb(&a.out, &y.batch_item(0)?)?;
    println!("{}", a.out.display());
    Ok(())
}

fn gradcheck(a: Gradcheck) -> anyhow::Result<ExitCode> {
    if a.params {
        let (n, dev) = gradsuite::param_report()?;
        println!(
            "params {n} target {TARGET_PARAMS} deviation {:+.2}% (tolerance ±{:.0}%)",
            dev * 100.0,
            PARAM_TOLERANCE * 100.0
        );
        return Ok(if dev.abs() <= PARAM_TOLERANCE { ExitCode::SUCCESS } else { ExitCode::from(2) });
    }
    let cfg = GradcheckConfig {
        seed: a.seed,
        ..Default::default()
    };
    let mut entries = gradsuite::run_suite_with(&cfg)?;
    entries.extend(gradsuite::run_network_suite_with(&cfg)?);
    let mut failed = 0;
    for e in &entries {
        let r = &e.report;
        let verdict = if r.passed() { "ok" } else { "FAIL" };
        println!(
            "{verdict:4} {:<28} checked {:>5} skipped {:>4} max_rel_err {:.3e}",
            e.name, r.checked, r.skipped, r.max_rel_err
        );
        if !r.passed() {
            failed += 1;
            for m in r.failures.iter().take(3) {
                println!("     {} [{}] analytic {:.6e} numeric {:.6e}", m.tensor, m.index, m.analytic, m.numeric);
            }
        }
    }
    println!("{} checks, {failed} failed", entries.len());
    Ok(if failed == 0 { ExitCode::SUCCESS } else { ExitCode::from(2) })
}
