//! Plain-text sectioned `key = value` run configuration.

use std::fmt::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::data::LUMA;
use crate::error::{Error, Result};
use crate::optim::AdamConfig;
use crate::seg::SegNetConfig;
use crate::tensor::Reduction;
use crate::transfer::{GenLoss, TransferConfig};

/// Which image the luminance channel is computed from during finetuning.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum LuminanceSource {
    #[default]
    Corrected,
    Foggy,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunSection {
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub keep_last: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataSection {
    /// Labelled training images (clear for segmentation, foggy for finetuning).
    pub train_manifest: Option<PathBuf>,
    pub eval_manifest: Option<PathBuf>,
    /// Unpaired corpora for translation training.
    pub foggy_manifest: Option<PathBuf>,
    pub clear_manifest: Option<PathBuf>,
    pub hflip: bool,
    pub luma: [f64; 3],
}

#[derive(Clone, Debug, PartialEq)]
pub struct TransferSection {
    pub model: TransferConfig,
    pub steps: usize,
    /// Images per side per step.
    pub batch_size: usize,
    pub checkpoint_every: usize,
    /// Overrides `[optim] lr` for translation training.
    pub lr: Option<f64>,
}

impl RunConfig {
    /// Learning rate for translation training.
    pub fn transfer_lr(&self) -> f64 {
        self.transfer.lr.unwrap_or(self.optim.lr)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossSection {
    pub class_weights: bool,
    pub class_weight_c: f64,
    pub reduction: Reduction,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FinetuneSection {
    pub use_domain_adaptation: bool,
    pub train_generator: bool,
    pub luminance_from: LuminanceSource,
    pub epochs: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub run: RunSection,
    pub data: DataSection,
    pub segnet: SegNetConfig,
    pub transfer: TransferSection,
    pub loss: LossSection,
    pub optim: AdamConfig,
    pub finetune: FinetuneSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            run: RunSection {
                seed: 0,
                epochs: 100,
                batch_size: 4,
                keep_last: 2,
            },
            data: DataSection {
                train_manifest: None,
                eval_manifest: None,
                foggy_manifest: None,
                clear_manifest: None,
                hflip: true,
                luma: LUMA,
            },
            segnet: SegNetConfig {
                input_height: 64,
                input_width: 128,
                ..Default::default()
            },
            transfer: TransferSection {
                model: TransferConfig::default(),
                steps: 500,
                batch_size: 1,
                checkpoint_every: 100,
                lr: None,
            },
            loss: LossSection {
                class_weights: true,
                class_weight_c: 1.10,
                reduction: Reduction::Mean,
            },
            optim: AdamConfig::default(),
            finetune: FinetuneSection {
                use_domain_adaptation: true,
                train_generator: true,
                luminance_from: LuminanceSource::Corrected,
                epochs: 10,
            },
        }
    }
}

fn parse<T: FromStr>(section: &str, key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("[{section}] {key}: cannot parse {v:?}")))
}

fn parse_bool(section: &str, key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "yes" | "on" | "1" => Ok(true),
        "false" | "no" | "off" | "0" => Ok(false),
        _ => Err(Error::Config(format!("[{section}] {key}: expected a boolean, got {v:?}"))),
    }
}

fn parse_list<T: FromStr>(section: &str, key: &str, v: &str) -> Result<Vec<T>> {
    v.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse(section, key, s))
        .collect()
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    pub fn from_text(text: &str) -> Result<Self> {
        let mut c = RunConfig::default();
        let mut section = String::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                section = name.trim().to_string();
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            c.set(&section, key.trim(), value.trim())?;
        }
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }

    pub fn set(&mut self, section: &str, key: &str, v: &str) -> Result<()> {
        let s = section;
        let path = || Some(PathBuf::from(v));
        match (s, key) {
            ("run", "seed") => self.run.seed = parse(s, key, v)?,
            ("run", "epochs") => self.run.epochs = parse(s, key, v)?,
            ("run", "batch_size") => self.run.batch_size = parse(s, key, v)?,
            ("run", "keep_last") => self.run.keep_last = parse(s, key, v)?,
            ("data", "train_manifest") => self.data.train_manifest = path(),
            ("data", "eval_manifest") => self.data.eval_manifest = path(),
            ("data", "foggy_manifest") => self.data.foggy_manifest = path(),
            ("data", "clear_manifest") => self.data.clear_manifest = path(),
            ("data", "hflip") => self.data.hflip = parse_bool(s, key, v)?,
            ("data", "luma") => {
                let l: Vec<f64> = parse_list(s, key, v)?;
                self.data.luma = l
                    .try_into()
                    .map_err(|_| Error::Config("[data] luma: expected three coefficients".into()))?;
            }
            ("segnet", "num_classes") => self.segnet.num_classes = parse(s, key, v)?,
            ("segnet", "stage_channels") => {
                let l: Vec<usize> = parse_list(s, key, v)?;
                self.segnet.stage_channels = l
                    .try_into()
                    .map_err(|_| Error::Config("[segnet] stage_channels: expected three values".into()))?;
            }
            ("segnet", "use_depth") => self.segnet.use_depth = parse_bool(s, key, v)?,
            ("segnet", "height") => self.segnet.input_height = parse(s, key, v)?,
            ("segnet", "width") => self.segnet.input_width = parse(s, key, v)?,
            ("segnet", "dense_growth") => self.segnet.dense_growth = parse(s, key, v)?,
            ("segnet", "dense_layers") => self.segnet.dense_layers = parse(s, key, v)?,
            ("segnet", "plain_blocks") => self.segnet.plain_blocks = parse(s, key, v)?,
            ("segnet", "dilations") => self.segnet.dilations = parse_list(s, key, v)?,
            ("segnet", "decoder_blocks") => self.segnet.decoder_blocks = parse(s, key, v)?,
            ("segnet", "dropout") => self.segnet.dropout = parse(s, key, v)?,
            ("transfer", "ngf") => self.transfer.model.ngf = parse(s, key, v)?,
            ("transfer", "ndf") => self.transfer.model.ndf = parse(s, key, v)?,
            ("transfer", "res_blocks") => self.transfer.model.res_blocks = parse(s, key, v)?,
            ("transfer", "disc_layers") => self.transfer.model.disc_layers = parse(s, key, v)?,
            ("transfer", "lambda_cycle") => self.transfer.model.lambda_cycle = parse(s, key, v)?,
            ("transfer", "gen_loss") => {
                self.transfer.model.gen_loss = match v {
                    "non_saturating" => GenLoss::NonSaturating,
                    "literal" => GenLoss::Literal,
                    _ => return Err(Error::Config(format!("[transfer] gen_loss: unknown mode {v:?}"))),
                }
            }
            ("transfer", "steps") => self.transfer.steps = parse(s, key, v)?,
            ("transfer", "batch_size") => self.transfer.batch_size = parse(s, key, v)?,
            ("transfer", "checkpoint_every") => self.transfer.checkpoint_every = parse(s, key, v)?,
            ("transfer", "lr") => self.transfer.lr = Some(parse(s, key, v)?),
            ("loss", "class_weights") => self.loss.class_weights = parse_bool(s, key, v)?,
            ("loss", "class_weight_c") => self.loss.class_weight_c = parse(s, key, v)?,
            ("loss", "reduction") => {
                self.loss.reduction = match v {
                    "mean" => Reduction::Mean,
                    "sum" => Reduction::Sum,
                    _ => return Err(Error::Config(format!("[loss] reduction: unknown mode {v:?}"))),
                }
            }
            ("optim", "lr") => self.optim.lr = parse(s, key, v)?,
            ("optim", "beta1") => self.optim.beta1 = parse(s, key, v)?,
            ("optim", "beta2") => self.optim.beta2 = parse(s, key, v)?,
            ("optim", "eps") => self.optim.eps = parse(s, key, v)?,
            ("finetune", "use_domain_adaptation") => self.finetune.use_domain_adaptation = parse_bool(s, key, v)?,
            ("finetune", "train_generator") => self.finetune.train_generator = parse_bool(s, key, v)?,
            ("finetune", "luminance_from") => {
                self.finetune.luminance_from = match v {
                    "corrected" => LuminanceSource::Corrected,
                    "foggy" => LuminanceSource::Foggy,
                    _ => return Err(Error::Config(format!("[finetune] luminance_from: unknown source {v:?}"))),
                }
            }
            ("finetune", "epochs") => self.finetune.epochs = parse(s, key, v)?,
            _ => return Err(Error::Config(format!("unknown key [{s}] {key}"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.segnet.validate()?;
        self.transfer.model.validate()?;
        if self.run.batch_size == 0 || self.transfer.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        let o = &self.optim;
        if !(o.lr > 0.0 && (0.0..1.0).contains(&o.beta1) && (0.0..1.0).contains(&o.beta2) && o.eps > 0.0) {
            return Err(Error::Config(format!("invalid optimizer settings {o:?}")));
        }
        if self.transfer.lr.is_some_and(|lr| !(lr > 0.0)) {
            return Err(Error::Config("[transfer] lr must be positive".into()));
        }
        if self.loss.class_weights && self.loss.class_weight_c <= 1.0 {
            return Err(Error::Config("[loss] class_weight_c must exceed 1".into()));
        }
        Ok(())
    }

    /// Canonical text; `from_text(to_text())` reproduces the config.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let w = &mut s;
        let _ = writeln!(w, "[run]");
        let _ = writeln!(w, "seed = {}", self.run.seed);
        let _ = writeln!(w, "epochs = {}", self.run.epochs);
        let _ = writeln!(w, "batch_size = {}", self.run.batch_size);
        let _ = writeln!(w, "keep_last = {}", self.run.keep_last);
        let _ = writeln!(w, "\n[data]");
        for (k, p) in [
            ("train_manifest", &self.data.train_manifest),
            ("eval_manifest", &self.data.eval_manifest),
            ("foggy_manifest", &self.data.foggy_manifest),
            ("clear_manifest", &self.data.clear_manifest),
        ] {
            if let Some(p) = p {
                let _ = writeln!(w, "{k} = {}", p.display());
            }
        }
        let _ = writeln!(w, "hflip = {}", self.data.hflip);
        let _ = writeln!(w, "luma = {}", join(&self.data.luma));
        let g = &self.segnet;
        let _ = writeln!(w, "\n[segnet]");
        let _ = writeln!(w, "num_classes = {}", g.num_classes);
        let _ = writeln!(w, "stage_channels = {}", join(&g.stage_channels));
        let _ = writeln!(w, "use_depth = {}", g.use_depth);
        let _ = writeln!(w, "height = {}", g.input_height);
        let _ = writeln!(w, "width = {}", g.input_width);
        let _ = writeln!(w, "dense_growth = {}", g.dense_growth);
        let _ = writeln!(w, "dense_layers = {}", g.dense_layers);
        let _ = writeln!(w, "plain_blocks = {}", g.plain_blocks);
        let _ = writeln!(w, "dilations = {}", join(&g.dilations));
        let _ = writeln!(w, "decoder_blocks = {}", g.decoder_blocks);
        let _ = writeln!(w, "dropout = {}", g.dropout);
        let t = &self.transfer;
        let _ = writeln!(w, "\n[transfer]");
        let _ = writeln!(w, "ngf = {}", t.model.ngf);
        let _ = writeln!(w, "ndf = {}", t.model.ndf);
        let _ = writeln!(w, "res_blocks = {}", t.model.res_blocks);
        let _ = writeln!(w, "disc_layers = {}", t.model.disc_layers);
        let _ = writeln!(w, "lambda_cycle = {}", t.model.lambda_cycle);
        let gl = match t.model.gen_loss {
            GenLoss::NonSaturating => "non_saturating",
            GenLoss::Literal => "literal",
        };
        let _ = writeln!(w, "gen_loss = {gl}");
        let _ = writeln!(w, "steps = {}", t.steps);
        let _ = writeln!(w, "batch_size = {}", t.batch_size);
        let _ = writeln!(w, "checkpoint_every = {}", t.checkpoint_every);
        if let Some(lr) = t.lr {
            let _ = writeln!(w, "lr = {lr}");
        }
        let _ = writeln!(w, "\n[loss]");
        let _ = writeln!(w, "class_weights = {}", self.loss.class_weights);
        let _ = writeln!(w, "class_weight_c = {}", self.loss.class_weight_c);
        let red = match self.loss.reduction {
            Reduction::Mean => "mean",
            Reduction::Sum => "sum",
        };
        let _ = writeln!(w, "reduction = {red}");
        let _ = writeln!(w, "\n[optim]");
        let _ = writeln!(w, "lr = {}", self.optim.lr);
        let _ = writeln!(w, "beta1 = {}", self.optim.beta1);
        let _ = writeln!(w, "beta2 = {}", self.optim.beta2);
        let _ = writeln!(w, "eps = {}", self.optim.eps);
        let f = &self.finetune;
        let _ = writeln!(w, "\n[finetune]");
        let _ = writeln!(w, "use_domain_adaptation = {}", f.use_domain_adaptation);
        let _ = writeln!(w, "train_generator = {}", f.train_generator);
        let src = match f.luminance_from {
            LuminanceSource::Corrected => "corrected",
            LuminanceSource::Foggy => "foggy",
        };
        let _ = writeln!(w, "luminance_from = {src}");
        let _ = writeln!(w, "epochs = {}", f.epochs);
        s
    }
}
