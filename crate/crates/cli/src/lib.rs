//! Command implementations behind the `selfmae` binary.

pub mod config;

use std::fs::File;
use std::io::Write;
use std::ops::ControlFlow;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use selfmae::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use selfmae::data::{load_dataset, load_image, split_dataset, synth_generate, write_corpus, LabeledSample, SplitManifest};
use selfmae::interpret::{export_overlay, gradcam, GradCamOptions, Upsample};
use selfmae::mae::{export_triptych, sample_mask};
use selfmae::rng::derive_seed;
use selfmae::tensor::{Real, Tensor};
use selfmae::training::{
    classify_defect, encoder_from_checkpoint, evaluate, mae_from_checkpoint, regressor_from_checkpoint, FinetuneState,
    Init, MetricRecord, Phase, Precision, PretrainState,
};
use selfmae::vit::NormSite;
use selfmae::{Error, Result};

pub use config::RunConfig;

#[derive(Debug, Parser)]
#[command(name = "selfmae", version, about = "MAE self pre-training, ΔB_max fine-tuning and GradCAM for ViTs")]
pub struct Cli {
    /// Configuration file (`key = value` lines under [run], [model], [pretrain], [finetune], [data]).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads for evaluation; 1 is bit-exact reproducible.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Run directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, global = true, value_enum)]
    pub model: Option<ModelArg>,
    /// Use a generated corpus of this many LEDs instead of files.
    #[arg(long, global = true)]
    pub synthetic: Option<usize>,
    /// Directory that manifest image paths are relative to.
    #[arg(long, global = true)]
    pub data_root: Option<PathBuf>,
    #[arg(long, global = true)]
    pub manifest: Option<PathBuf>,
    #[arg(long, global = true, value_enum)]
    pub precision: Option<PrecisionArg>,
    /// Any configuration key, as `section.key=value`.
    #[arg(long = "set", global = true, value_parser = parse_kv)]
    pub set: Vec<(String, String)>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ModelArg {
    Ti,
    S,
    B,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum PrecisionArg {
    F32,
    F64,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// MAE pre-training on the training split images.
    Pretrain(TrainArgs),
    /// Supervised ΔB_max fine-tuning, from a checkpoint or from scratch.
    Finetune(FinetuneArgs),
    /// Test-split (or other split) MSE and defect confusion counts.
    Eval(EvalArgs),
    /// original | masked | reconstruction triptychs.
    Reconstruct(ImageArgs),
    /// GradCAM overlays plus predicted ΔB_max per image.
    Gradcam(GradcamArgs),
    /// Write a synthetic corpus (manifest, images, crack masks).
    Synth,
}

#[derive(Debug, Default, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub warmup_epochs: Option<usize>,
    #[arg(long)]
    pub mask_ratio: Option<f64>,
}

#[derive(Debug, Args)]
pub struct FinetuneArgs {
    #[command(flatten)]
    pub train: TrainArgs,
    /// Pre-trained checkpoint; without it the encoder starts from scratch.
    #[arg(long)]
    pub from_checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub freeze_encoder: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub from_checkpoint: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: String,
}

#[derive(Debug, Args)]
pub struct ImageArgs {
    #[arg(long)]
    pub from_checkpoint: PathBuf,
    /// 64×64 8-bit grayscale PNG or PGM files.
    #[arg(required = true)]
    pub images: Vec<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GradcamArgs {
    #[command(flatten)]
    pub images: ImageArgs,
    /// Pre-MLP norm instead of the pre-attention norm.
    #[arg(long)]
    pub pre_mlp: bool,
    /// Blocky patch-level upsampling.
    #[arg(long)]
    pub nearest: bool,
    /// Also write the normalized heatmap as comma-separated text.
    #[arg(long)]
    pub csv: bool,
}

fn parse_kv(s: &str) -> std::result::Result<(String, String), String> {
    s.split_once('=')
        .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        .ok_or_else(|| format!("expected section.key=value, got {s:?}"))
}

/// Process exit status for an error: 1 configuration or usage, 2 data, 3 numeric.
pub fn exit_code(e: &Error) -> i32 {
    if e.is_numeric() {
        return 3;
    }
    match e {
        Error::Data(_) | Error::Io { .. } | Error::Checkpoint(_) => 2,
        _ => 1,
    }
}

pub fn error_kind(e: &Error) -> &'static str {
    if e.is_numeric() {
        return "numeric";
    }
    match e {
        Error::Data(_) => "data",
        Error::Io { .. } => "io",
        Error::Checkpoint(_) => "checkpoint",
        Error::Contract(_) | Error::Tensor(_) => "contract",
        _ => "config",
    }
}

/// `error kind=<kind> code=<n>: <message>` on one line.
pub fn error_line(kind: &str, code: i32, message: &str) -> String {
    let msg = message.split_whitespace().collect::<Vec<_>>().join(" ");
    format!("error kind={kind} code={code}: {msg}")
}

impl Cli {
    fn overrides(&self) -> Vec<(String, String)> {
        let mut o = Vec::new();
        let mut put = |k: &str, v: String| o.push((k.to_string(), v));
        if let Some(v) = self.seed {
            put("run.seed", v.to_string());
        }
        if let Some(v) = self.threads {
            put("run.threads", v.to_string());
        }
        if let Some(v) = &self.out {
            put("run.out", v.display().to_string());
        }
        if let Some(v) = self.precision {
            put("run.precision", format!("{v:?}").to_lowercase());
        }
        if let Some(v) = self.model {
            put("model.size", format!("{v:?}").to_lowercase());
        }
        if let Some(v) = self.synthetic {
            put("data.synthetic", v.to_string());
        }
        if let Some(v) = &self.data_root {
            put("data.root", v.display().to_string());
        }
        if let Some(v) = &self.manifest {
            put("data.manifest", v.display().to_string());
        }
        let phase_args = match &self.command {
            Command::Pretrain(a) => Some(("pretrain", a)),
            Command::Finetune(a) => Some(("finetune", &a.train)),
            _ => None,
        };
        if let Some((phase, a)) = phase_args {
            let mut put = |k: &str, v: Option<String>| {
                if let Some(v) = v {
                    o.push((format!("{phase}.{k}"), v));
                }
            };
            put("epochs", a.epochs.map(|v| v.to_string()));
            put("batch_size", a.batch_size.map(|v| v.to_string()));
            put("base_learning_rate", a.lr.map(|v| format!("{v:?}")));
            put("weight_decay", a.weight_decay.map(|v| format!("{v:?}")));
            put("warmup_epochs", a.warmup_epochs.map(|v| v.to_string()));
            if let Some(m) = a.mask_ratio {
                o.push(("model.mask_ratio".into(), format!("{m:?}")));
            }
        }
        if let Command::Finetune(a) = &self.command {
            if a.freeze_encoder {
                o.push(("finetune.freeze_encoder".into(), "true".into()));
            }
        }
        o.extend(self.set.iter().cloned());
        o
    }

    pub fn resolve(&self) -> Result<RunConfig> {
        RunConfig::resolve(self.config.as_deref(), &self.overrides())
    }
}

/// Output directory with the config echo and metric logs.
pub struct RunDir {
    pub path: PathBuf,
    log: File,
    tsv: File,
}

impl RunDir {
    pub fn create(cfg: &RunConfig) -> Result<Self> {
        let path = cfg.run.out.clone();
        std::fs::create_dir_all(&path).map_err(|e| Error::io(&path, e))?;
        let write = |name: &str, text: &str| {
            let p = path.join(name);
            std::fs::write(&p, text).map_err(|e| Error::io(p, e))
        };
        write("config.resolved", &cfg.to_text())?;
        let open = |name: &str| {
            let p = path.join(name);
            File::create(&p).map_err(|e| Error::io(p, e))
        };
        let log = open("metrics.log")?;
        let mut tsv = open("metrics.tsv")?;
        writeln!(tsv, "{}", MetricRecord::TSV_HEADER).map_err(|e| Error::io(path.join("metrics.tsv"), e))?;
        Ok(RunDir { path, log, tsv })
    }

    pub fn record(&mut self, r: &MetricRecord) -> ControlFlow<()> {
        let line = format!("epoch={} phase={} {}={:.6} lr={:.3e}", r.epoch, r.phase.name(), r.metric, r.value, r.lr);
        log::info!("{line}");
        let _ = writeln!(self.log, "{line}");
        let _ = writeln!(self.tsv, "{}", r.tsv());
        ControlFlow::Continue(())
    }

    pub fn file(&self, name: &str) -> PathBuf {
        self.path.join(name)
    }
}

/// Samples from the synthetic generator or the configured manifest.
pub fn load_samples(cfg: &RunConfig) -> Result<Vec<LabeledSample>> {
    if let Some(n) = cfg.data.synthetic {
        return Ok(synth_generate(n, cfg.run.seed)?.samples);
    }
    let Some(root) = &cfg.data.root else {
        return Err(Error::Config("no dataset: pass --synthetic N or set data.root".into()));
    };
    let manifest = cfg.data.manifest.clone().unwrap_or_else(|| root.join("manifest.csv"));
    load_dataset(root, &manifest)
}

fn split<'a>(samples: &'a [LabeledSample], m: &SplitManifest, name: &str) -> Result<Vec<&'a LabeledSample>> {
    let ids = match name {
        "train" => &m.train,
        "val" => &m.val,
        "test" => &m.test,
        other => return Err(Error::Config(format!("unknown split {other:?} (train, val or test)"))),
    };
    Ok(m.select(samples, ids))
}

fn stem(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "image".into())
}

/// Runs the parsed command, writing human output to `out`.
pub fn run(cli: &Cli, out: &mut dyn Write) -> Result<()> {
    if let Command::Synth = cli.command {
        let cfg = cli.resolve()?;
        let n = cfg.data.synthetic.ok_or_else(|| Error::Config("synth needs --synthetic N".into()))?;
        let corpus = synth_generate(n, cfg.run.seed)?;
        write_corpus(&corpus, &cfg.run.out)?;
        let _ = writeln!(out, "wrote {} images of {n} LEDs to {}", corpus.samples.len(), cfg.run.out.display());
        return Ok(());
    }
    let cfg = cli.resolve()?;
    match cfg.run.precision {
        Precision::F32 => dispatch::<f32>(cli, &cfg, out),
        Precision::F64 => dispatch::<f64>(cli, &cfg, out),
    }
}

fn dispatch<T: Real>(cli: &Cli, cfg: &RunConfig, out: &mut dyn Write) -> Result<()> {
    match &cli.command {
        Command::Pretrain(_) => cmd_pretrain::<T>(cfg, out),
        Command::Finetune(a) => cmd_finetune::<T>(cfg, a.from_checkpoint.as_deref(), out),
        Command::Eval(a) => cmd_eval::<T>(cfg, &a.from_checkpoint, &a.split, out),
        Command::Reconstruct(a) => cmd_reconstruct::<T>(cfg, a, out),
        Command::Gradcam(a) => cmd_gradcam::<T>(cfg, a, out),
        Command::Synth => unreachable!("handled before dispatch"),
    }
}

fn w(out: &mut dyn Write, line: String) {
    let _ = writeln!(out, "{line}");
}

fn with_run_config(mut ck: Checkpoint, cfg: &RunConfig) -> Checkpoint {
    ck.meta.run_config = Some(cfg.to_text());
    ck
}

pub fn cmd_pretrain<T: Real>(cfg: &RunConfig, out: &mut dyn Write) -> Result<()> {
    let samples = load_samples(cfg)?;
    let m = split_dataset(&samples, cfg.run.seed)?;
    let train = split(&samples, &m, "train")?;
    let mut dir = RunDir::create(cfg)?;
    let mut state = PretrainState::<T>::new(&cfg.model.config, &cfg.train(Phase::Pretrain))?;
    state.run(&train, &mut |r| dir.record(r))?;
    let path = dir.file("pretrain.maec");
    save_checkpoint(&with_run_config(state.to_checkpoint()?, cfg), &path)?;
    let last = state.losses().last().copied().unwrap_or(f64::NAN);
    w(out, format!("pretrain epochs={} images={} final_loss={last:.6} checkpoint={}", state.epoch, train.len(), path.display()));
    Ok(())
}

pub fn cmd_finetune<T: Real>(cfg: &RunConfig, from: Option<&Path>, out: &mut dyn Write) -> Result<()> {
    let samples = load_samples(cfg)?;
    let m = split_dataset(&samples, cfg.run.seed)?;
    let (train, val, test) = (split(&samples, &m, "train")?, split(&samples, &m, "val")?, split(&samples, &m, "test")?);
    let tc = cfg.train(Phase::Finetune);
    let (pre, model_cfg) = match from {
        Some(p) => {
            let ck = load_checkpoint(p)?;
            let mut mc = ck.meta.model.clone();
            mc.head_hidden = cfg.model.config.head_hidden;
            (Some(encoder_from_checkpoint::<T>(&ck)?), mc)
        }
        None => (None, cfg.model.config.clone()),
    };
    let init = pre.as_ref().map_or(Init::Scratch, Init::Pretrained);
    let mut dir = RunDir::create(cfg)?;
    let mut state = FinetuneState::<T>::new(init, &model_cfg, &tc)?;
    state.run(&train, &val, &mut |r| dir.record(r))?;
    let path = dir.file("finetune.maec");
    save_checkpoint(&with_run_config(state.to_checkpoint()?, cfg), &path)?;
    let model = state.selected_model();
    let mode = if from.is_some() { "pretrained" } else { "scratch" };
    for (name, set) in [("val", &val), ("test", &test)] {
        if set.is_empty() {
            continue;
        }
        let report = evaluate(&model, set, name, cfg.run.threads)?;
        let p = dir.file(&format!("eval_{name}.tsv"));
        std::fs::write(&p, report.tsv()).map_err(|e| Error::io(p, e))?;
        w(out, format!("finetune init={mode} split={name} n={} mse={:.6}", set.len(), report.mse));
    }
    w(out, format!("checkpoint={} best_epoch={}", path.display(), state.best_epoch.map_or("-".into(), |e| e.to_string())));
    Ok(())
}

pub fn cmd_eval<T: Real>(cfg: &RunConfig, from: &Path, split_name: &str, out: &mut dyn Write) -> Result<()> {
    let ck = load_checkpoint(from)?;
    let model = regressor_from_checkpoint::<T>(&ck)?;
    let samples = load_samples(cfg)?;
    let m = split_dataset(&samples, cfg.run.seed)?;
    let set = split(&samples, &m, split_name)?;
    let report = evaluate(&model, &set, split_name, cfg.run.threads)?;
    std::fs::create_dir_all(&cfg.run.out).map_err(|e| Error::io(&cfg.run.out, e))?;
    let p = cfg.run.out.join(format!("eval_{split_name}.tsv"));
    std::fs::write(&p, report.tsv()).map_err(|e| Error::io(p, e))?;
    let c = report.confusion;
    w(out, "split\tn\tmse\ttp\tfp\ttn\tfn".into());
    w(out, format!("{}\t{}\t{:.6}\t{}\t{}\t{}\t{}", split_name, set.len(), report.mse, c.tp, c.fp, c.tn, c.fn_));
    Ok(())
}

fn load_inputs(paths: &[PathBuf]) -> Result<Vec<Tensor<f32>>> {
    paths.iter().map(|p| load_image(p)).collect()
}

pub fn cmd_reconstruct<T: Real>(cfg: &RunConfig, a: &ImageArgs, out: &mut dyn Write) -> Result<()> {
    let ck = load_checkpoint(&a.from_checkpoint)?;
    if !ck.has_prefix("decoder.") {
        return Err(Error::Config(format!("{} has no MAE decoder (fine-tuned checkpoint?)", a.from_checkpoint.display())));
    }
    let model = mae_from_checkpoint::<T>(&ck)?;
    let images = load_inputs(&a.images)?;
    let dir = cfg.run.out.join("reconstruct");
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    for (i, (img, p)) in images.iter().zip(&a.images).enumerate() {
        let seed = derive_seed(cfg.run.seed, "reconstruct", i as u64);
        let plan = sample_mask(model.encoder.num_patches(), model.config.mask_ratio, seed)?;
        let output = model.run(img, &plan)?;
        let path = dir.join(format!("{}_triptych.png", stem(p)));
        export_triptych(&img.cast::<T>(), &output, model.grid(), &path)?;
        w(out, format!("{}\t{:.6}\t{}", p.display(), output.loss, path.display()));
    }
    Ok(())
}

/// Header of the table printed by `gradcam`.
pub const GRADCAM_HEADER: &str = "image\tdelta_b_max\tdefect\toverlay";

pub fn cmd_gradcam<T: Real>(cfg: &RunConfig, a: &GradcamArgs, out: &mut dyn Write) -> Result<()> {
    let ck = load_checkpoint(&a.images.from_checkpoint)?;
    let model = regressor_from_checkpoint::<T>(&ck)
        .map_err(|_| Error::Contract(format!("{} has no regression head", a.images.from_checkpoint.display())))?;
    let images = load_inputs(&a.images.images)?;
    let dir = cfg.run.out.join("gradcam");
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let opts = GradCamOptions {
        block: None,
        site: if a.pre_mlp { NormSite::PreMlp } else { NormSite::PreAttention },
        upsample: if a.nearest { Upsample::Nearest } else { Upsample::Bilinear },
    };
    w(out, GRADCAM_HEADER.into());
    for (img, p) in images.iter().zip(&a.images.images) {
        let name = stem(p);
        let pred = model.predict(img)?;
        let heat = gradcam(&model, img, &name, opts)?;
        let overlay = dir.join(format!("{name}_gradcam.png"));
        export_overlay(img, &heat, &overlay)?;
        if a.csv {
            let c = dir.join(format!("{name}_heatmap.csv"));
            std::fs::write(&c, heat.to_csv()).map_err(|e| Error::io(c, e))?;
        }
        let file = overlay.file_name().map(|f| f.to_string_lossy().into_owned()).unwrap_or_default();
        w(out, format!("{name}\t{pred:.6}\t{}\t{file}", classify_defect(pred).name()));
    }
    Ok(())
}
