//! Command implementations behind the `fsdiff` binary.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use crate::checkpoint::{Checkpoint, CheckpointKind};
use crate::clse::{clarity_accuracy, pretrain_clse, retrieval_accuracy, ClseModel};
use crate::config::RunConfig;
use crate::data::{build_dataset, clarity_pairs, write_json_line, BlurPolicy, DatasetManifest, DatasetSpec};
use crate::engine::{batch_indices, fuse, prepare_item, FusionNet, PreparedItem, SamplerConfig, TrainItem, Trainer};
use crate::error::{Error, Result};
use crate::io::{read_image, sidecar_path, write_png, write_tensor, TENSOR_EXT};
use crate::metrics::evaluate_manifest;
use crate::nn::{Adam, ParamStore};

pub const LOSS_LOG: &str = "loss.jsonl";
pub const CHECKPOINT_DIR: &str = "checkpoint";
const ADAM_M: &str = "adam.m.";
const ADAM_V: &str = "adam.v.";

#[derive(Debug, Parser)]
#[command(name = "fsdiff", version, about = "Joint visible/infrared fusion and super-resolution by conditional diffusion")]
pub struct Cli {
    /// Worker threads; 1 makes every command bit-reproducible.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a synthetic dataset with known fusion targets.
    GenData(GenDataArgs),
    /// Train the clarity model on clear/blurred pairs.
    PretrainClse(PretrainArgs),
    /// Train the fusion network.
    Train(TrainArgs),
    /// Fuse one LR pair, or every record of a dataset.
    Fuse(FuseArgs),
    /// Score fused images against a dataset's targets.
    Eval(EvalArgs),
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// TOML run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Built-in configuration when no file is given: desk, small or smoke.
    #[arg(long, default_value = "desk")]
    pub preset: String,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<RunConfig> {
        match &self.config {
            Some(p) => RunConfig::load(p),
            None => RunConfig::preset(&self.preset),
        }
    }
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long, default_value_t = 256)]
    pub scenes: usize,
    #[arg(long, default_value_t = 4)]
    pub scale: usize,
    /// none | vi | ir | both | mixed | mixed:VI,IR,BOTH,NONE
    #[arg(long, default_value = "mixed")]
    pub blur_policy: String,
    #[arg(long, default_value_t = 64)]
    pub hr_size: usize,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct PretrainArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    #[arg(long)]
    pub out: PathBuf,
    /// Training pairs (defaults to data.clarity_pairs).
    #[arg(long)]
    pub pairs: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Held-out pairs scored after training; 0 skips the evaluation.
    #[arg(long, default_value_t = 200)]
    pub eval_pairs: usize,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    /// Dataset directory written by gen-data.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Clarity checkpoint written by pretrain-clse.
    #[arg(long)]
    pub clse_ckpt: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Total optimiser steps (overrides train.steps).
    #[arg(long)]
    pub steps: Option<u64>,
    /// Continue from a fusion checkpoint.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct FuseArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Visible LR image (RGB PNG or .f32t).
    #[arg(long, requires = "ir", conflicts_with = "data")]
    pub vi: Option<PathBuf>,
    /// Infrared LR image (grey PNG or .f32t).
    #[arg(long, requires = "vi")]
    pub ir: Option<PathBuf>,
    /// Fuse every record of this dataset into the `--out` directory.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub scale: Option<usize>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Skip clipping of the intermediate clean-image estimate.
    #[arg(long)]
    pub no_clip: bool,
    /// Output PNG, or a directory with `--data`.
    #[arg(long)]
    pub out: PathBuf,
    /// Also write a lossless `.f32t` sidecar.
    #[arg(long)]
    pub raw: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub fused: PathBuf,
    /// Report file (JSON lines); the summary always goes to stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Writes one JSON object per line to stderr.
pub fn diag(v: serde_json::Value) {
    let mut e = std::io::stderr().lock();
    let _ = write_json_line(&mut e, &v);
}

fn emit(v: serde_json::Value) -> Result<()> {
    let mut out = std::io::stdout().lock();
    write_json_line(&mut out, &v).map_err(|e| Error::io("<stdout>", e))
}

pub fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        crate::par::set_threads(n);
    }
    match cli.command {
        Command::GenData(a) => cmd_gen_data(&a),
        Command::PretrainClse(a) => cmd_pretrain_clse(&a),
        Command::Train(a) => cmd_train(&a),
        Command::Fuse(a) => cmd_fuse(&a),
        Command::Eval(a) => cmd_eval(&a),
    }
}

pub fn cmd_gen_data(a: &GenDataArgs) -> Result<()> {
    let mut spec = DatasetSpec::new(a.scenes, a.scale, BlurPolicy::parse(&a.blur_policy)?, a.seed);
    spec.hr_size = a.hr_size;
    let m = build_dataset(&spec, &a.out)?;
    emit(json!({"command": "gen-data", "out": a.out, "records": m.records.len(), "scale": a.scale}))
}

pub fn cmd_pretrain_clse(a: &PretrainArgs) -> Result<()> {
    let mut cfg = a.cfg.resolve()?;
    if let Some(e) = a.epochs {
        cfg.clse.epochs = e;
    }
    if let Some(s) = a.seed {
        cfg.clse.seed = s;
    }
    let n = a.pairs.unwrap_or(cfg.data.clarity_pairs);
    let (scale, hr) = (cfg.data.scale, cfg.model.hr_size);
    let pairs = clarity_pairs(n, scale, hr, cfg.clse.seed)?;
    let start = Instant::now();
    let model = pretrain_clse(&pairs, &cfg.clse, |s| {
        diag(json!({"event": "epoch", "epoch": s.epoch, "loss": s.loss, "clarity_loss": s.clarity_loss,
                    "content_loss": s.content_loss, "wall_time_s": start.elapsed().as_secs_f64()}))
    })?;
    Checkpoint {
        kind: CheckpointKind::Clse,
        step: cfg.clse.epochs as u64,
        config: cfg.clone(),
        tensors: model.params.clone(),
    }
    .save(&a.out)?;
    let mut summary = json!({"command": "pretrain-clse", "out": a.out, "pairs": n, "epochs": cfg.clse.epochs,
                             "prototype_cosine": model.prototype_cosine()});
    if a.eval_pairs > 0 {
        let held = clarity_pairs(a.eval_pairs, scale, hr, cfg.clse.seed.wrapping_add(1))?;
        summary["accuracy"] = json!(clarity_accuracy(&model, &held)?);
        summary["retrieval"] = json!(retrieval_accuracy(&model, &held)?);
    }
    emit(summary)
}

/// Loads a clarity checkpoint (standalone or embedded in a fusion one).
pub fn load_clse(dir: &Path) -> Result<ClseModel> {
    let ck = Checkpoint::load(dir)?;
    let model = ClseModel {
        config: ck.config.clse.clone(),
        params: ck.tensors.subset("clse."),
    };
    model.layout()?;
    Ok(model)
}

fn required<'a>(v: &'a Option<PathBuf>, fallback: &'a Option<PathBuf>, flag: &str) -> Result<&'a PathBuf> {
    v.as_ref()
        .or(fallback.as_ref())
        .ok_or_else(|| Error::Config(format!("missing --{flag} (or the matching [paths] entry)")))
}

fn fusion_checkpoint(trainer: &Trainer, clse: &ClseModel, cfg: &RunConfig) -> Checkpoint {
    let mut t = trainer.params.clone();
    for (k, v) in trainer.adam.m.iter() {
        t.insert(format!("{ADAM_M}{k}"), v.clone());
    }
    for (k, v) in trainer.adam.v.iter() {
        t.insert(format!("{ADAM_V}{k}"), v.clone());
    }
    t.extend(clse.params.clone());
    Checkpoint {
        kind: CheckpointKind::Fusion,
        step: trainer.step(),
        config: cfg.clone(),
        tensors: t,
    }
}

fn strip(store: &ParamStore<f32>, prefix: &str) -> ParamStore<f32> {
    let mut out = ParamStore::new();
    for (k, v) in store.iter() {
        if let Some(rest) = k.strip_prefix(prefix) {
            out.insert(rest.to_string(), v.clone());
        }
    }
    out
}

/// Network parameters of a fusion checkpoint (no optimiser or clarity keys).
fn net_params(ck: &Checkpoint) -> ParamStore<f32> {
    let mut p = ParamStore::new();
    for (k, v) in ck.tensors.iter() {
        if !(k.starts_with(ADAM_M) || k.starts_with(ADAM_V) || k.starts_with("clse.")) {
            p.insert(k.clone(), v.clone());
        }
    }
    p
}

pub fn cmd_train(a: &TrainArgs) -> Result<()> {
    let resumed = match &a.resume {
        Some(dir) => Some(Checkpoint::load(dir)?.expect_kind(CheckpointKind::Fusion, dir)?),
        None => None,
    };
    let mut cfg = match (&resumed, &a.cfg.config) {
        (Some(ck), Some(path)) => {
            let c = RunConfig::load(path)?;
            ck.config.check_compatible(&c)?;
            c
        }
        (Some(ck), None) => ck.config.clone(),
        (None, _) => a.cfg.resolve()?,
    };
    if let Some(s) = a.steps {
        cfg.train.steps = s;
    }
    let data_dir = required(&a.data, &cfg.paths.data, "data")?.clone();
    let out = required(&a.out, &cfg.paths.out, "out")?.clone();

    let clse = match (&resumed, &a.clse_ckpt.as_ref().or(cfg.paths.clse_ckpt.as_ref())) {
        (Some(ck), _) => {
            let m = ClseModel {
                config: ck.config.clse.clone(),
                params: ck.tensors.subset("clse."),
            };
            m.layout()?;
            m
        }
        (None, Some(dir)) => load_clse(dir)?,
        (None, None) => return Err(Error::Config("missing --clse-ckpt".into())),
    };
    if (clse.config.channels.clone(), clse.config.sem_dim) != (cfg.clse.channels.clone(), cfg.clse.sem_dim) {
        diag(json!({"event": "note", "message": "using the clarity architecture stored in the checkpoint"}));
        cfg.clse = clse.config.clone();
    }
    cfg.validate()?;

    let manifest = DatasetManifest::load(&data_dir)?;
    if manifest.header.scale != cfg.data.scale || manifest.header.hr_size != [cfg.model.hr_size; 2] {
        return Err(Error::Config(format!(
            "dataset is ×{} at {:?}, config expects ×{} at {}",
            manifest.header.scale, manifest.header.hr_size, cfg.data.scale, cfg.model.hr_size
        )));
    }
    if manifest.records.is_empty() {
        return Err(Error::Config("dataset has no records".into()));
    }
    let items: Vec<PreparedItem> = crate::par::map(&manifest.records, |_, r| {
        let item = TrainItem::from_record(&manifest, r)?;
        prepare_item(&item, &clse)
    })
    .into_iter()
    .collect::<Result<_>>()?;

    let net = FusionNet::new(cfg.model.clone())?;
    let schedule = cfg.schedule.build()?;
    let mut trainer = Trainer::new(net, schedule, cfg.train.lr, cfg.train.seed);
    if let Some(ck) = &resumed {
        let params = net_params(ck);
        trainer.net.check_params(&params)?;
        trainer.params = params;
        trainer.adam = Adam::new(&trainer.params, cfg.train.lr);
        trainer.adam.m = strip(&ck.tensors, ADAM_M);
        trainer.adam.v = strip(&ck.tensors, ADAM_V);
        trainer.adam.step = ck.step;
    }

    fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    let log_path = out.join(LOSS_LOG);
    let mut log = OpenOptions::new()
        .create(true)
        .append(true)
        .open(&log_path)
        .map_err(|e| Error::io(&log_path, e))?;
    let ck_dir = out.join(CHECKPOINT_DIR);
    let start = Instant::now();
    let n = items.len();
    while trainer.step() < cfg.train.steps {
        let idx = batch_indices(n, cfg.train.batch, cfg.train.seed, trainer.step());
        let batch: Vec<PreparedItem> = idx.iter().map(|&i| items[i].clone()).collect();
        trainer.adam.lr = cfg.train.lr_at(trainer.step(), cfg.train.steps);
        let stats = trainer.train_step(&batch)?;
        write_json_line(&mut log, &json!({"step": stats.step, "loss": stats.loss, "wall_time_s": start.elapsed().as_secs_f64()}))
            .map_err(|e| Error::io(&log_path, e))?;
        let every = cfg.train.checkpoint_every;
        if every > 0 && stats.step % every == 0 && stats.step < cfg.train.steps {
            fusion_checkpoint(&trainer, &clse, &cfg).save(&ck_dir)?;
        }
    }
    log.flush().map_err(|e| Error::io(&log_path, e))?;
    fusion_checkpoint(&trainer, &clse, &cfg).save(&ck_dir)?;
    emit(json!({"command": "train", "checkpoint": ck_dir, "step": trainer.step(), "items": n,
                "wall_time_s": start.elapsed().as_secs_f64()}))
}

struct Fuser {
    cfg: RunConfig,
    net: FusionNet,
    params: ParamStore<f32>,
    clse: ClseModel,
    sampler: SamplerConfig,
}

impl Fuser {
    fn load(a: &FuseArgs) -> Result<Self> {
        let ck = Checkpoint::load(&a.ckpt)?.expect_kind(CheckpointKind::Fusion, &a.ckpt)?;
        let net = FusionNet::new(ck.config.model.clone())?;
        let params = net_params(&ck);
        net.check_params(&params)?;
        let clse = ClseModel {
            config: ck.config.clse.clone(),
            params: ck.tensors.subset("clse."),
        };
        clse.layout()?;
        let mut sampler = ck.config.sample.clone();
        if let Some(s) = a.steps {
            sampler.steps = s;
        }
        if let Some(s) = a.seed {
            sampler.seed = s;
        }
        if a.no_clip {
            sampler.clip_estimate = false;
        }
        Ok(Self {
            cfg: ck.config,
            net,
            params,
            clse,
            sampler,
        })
    }

    fn fuse(&self, vi: &crate::Tensor<f32>, ir: &crate::Tensor<f32>, scale: usize) -> Result<crate::Tensor<f32>> {
        let schedule = self.cfg.schedule.build()?;
        fuse(&self.net, &self.params, &self.clse, vi, ir, scale, &schedule, &self.sampler)
    }
}

pub fn cmd_fuse(a: &FuseArgs) -> Result<()> {
    let fuser = Fuser::load(a)?;
    let scale = a.scale.unwrap_or(fuser.cfg.data.scale);
    match (&a.vi, &a.ir, &a.data) {
        (Some(vi), Some(ir), None) => {
            let out = fuser.fuse(&read_image(vi)?, &read_image(ir)?, scale)?;
            write_png(&a.out, &out)?;
            if a.raw {
                write_tensor(&sidecar_path(&a.out), &out)?;
            }
            emit(json!({"command": "fuse", "out": a.out, "shape": out.shape(), "seed": fuser.sampler.seed}))
        }
        (None, None, Some(data)) => {
            let manifest = DatasetManifest::load(data)?;
            fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
            let done = crate::par::map(&manifest.records, |_, r| -> Result<()> {
                let imgs = manifest.load_images(r)?;
                let out = fuser.fuse(&imgs.vi_lr, &imgs.ir_lr, r.scale)?;
                let png = a.out.join(format!("{}.png", r.id));
                write_png(&png, &out)?;
                write_tensor(&a.out.join(format!("{}.{TENSOR_EXT}", r.id)), &out)
            });
            for r in done {
                r?;
            }
            emit(json!({"command": "fuse", "out": a.out, "records": manifest.records.len(), "seed": fuser.sampler.seed}))
        }
        _ => Err(Error::Config("give either --vi and --ir, or --data".into())),
    }
}

pub fn cmd_eval(a: &EvalArgs) -> Result<()> {
    let manifest = DatasetManifest::load(&a.data)?;
    let report = evaluate_manifest(&manifest, &a.fused)?;
    if let Some(path) = &a.out {
        crate::io::write_atomic(path, report.to_jsonl().as_bytes())?;
    }
    emit(json!({"command": "eval", "scored": report.records.len(), "missing": report.missing.len(), "means": report.means}))
}
