//! Thin orchestration of the core operations behind each subcommand.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use occtrack_core::data_io::{generate_dataset, is_sequence_dir, load_dataset, load_sequence, save_dataset};
use occtrack_core::evaluator::{
    emit_ablation, emit_lambda_sweep, emit_report, evaluate_sequence, lambda_sweep, run_ablation,
};
use occtrack_core::rng::substream;
use occtrack_core::tracker::{read_tracking_csv, track_sequence, write_tracking_csv};
use occtrack_core::trainer::{
    final_checkpoint_dir, generator_loss_variance, load_checkpoint, read_train_log, train as run_training,
    TrainOptions,
};
use occtrack_core::{BoundingBox, Error, Model, Result, Sequence};
use rand::Rng;

use crate::config::RunConfig;

pub struct Context {
    pub cfg: RunConfig,
    pub out: PathBuf,
    pub jobs: usize,
}

impl Context {
    fn start(&self) -> Result<()> {
        self.cfg.write_resolved(&self.out)?;
        log::info!("resolved configuration written to {}", self.out.display());
        Ok(())
    }

    fn pool(&self) -> Result<rayon::ThreadPool> {
        rayon::ThreadPoolBuilder::new()
            .num_threads(self.jobs.max(1))
            .build()
            .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))
    }
}

fn load_sequences(path: &Path) -> Result<Vec<Sequence>> {
    if is_sequence_dir(path) {
        Ok(vec![load_sequence(path)?])
    } else {
        load_dataset(path)
    }
}

pub fn synth(ctx: &Context) -> Result<()> {
    ctx.start()?;
    let seqs = generate_dataset(&ctx.cfg.synth, ctx.cfg.seed)?;
    save_dataset(&seqs, &ctx.out)?;
    log::info!("wrote {} sequences to {}", seqs.len(), ctx.out.display());
    Ok(())
}

pub fn train(ctx: &Context, data: &Path, resume: Option<&Path>) -> Result<()> {
    ctx.start()?;
    let dataset = load_dataset(data)?;
    let resume = resume.map(|p| load_checkpoint(p, true)).transpose()?;
    let run = run_training(
        &ctx.cfg.train,
        &ctx.cfg.model,
        &dataset,
        TrainOptions {
            out_dir: Some(ctx.out.clone()),
            resume,
            stop_at: None,
        },
    )?;
    log::info!(
        "trained to iteration {}; final checkpoint in {}",
        run.checkpoint.meta.iteration,
        final_checkpoint_dir(&ctx.out).display()
    );
    Ok(())
}

pub fn track(ctx: &Context, checkpoint: &Path, sequences: &Path) -> Result<()> {
    ctx.start()?;
    let model = load_checkpoint(checkpoint, false)?.model;
    let seqs = load_sequences(sequences)?;
    let dir = ctx.out.join("tracks");
    fs::create_dir_all(&dir)?;
    ctx.pool()?.install(|| {
        seqs.par_iter().try_for_each(|s| {
            let points = track_sequence(&model, s, &ctx.cfg.track)?;
            write_tracking_csv(&dir.join(format!("{}.csv", s.name)), &points)
        })
    })?;
    log::info!("tracked {} sequences into {}", seqs.len(), dir.display());
    Ok(())
}

pub fn eval(ctx: &Context, tracks: &Path, sequences: &Path) -> Result<()> {
    ctx.start()?;
    let seqs = load_sequences(sequences)?;
    let tracks = if tracks.join("tracks").is_dir() { tracks.join("tracks") } else { tracks.to_path_buf() };
    let results = ctx.pool()?.install(|| {
        seqs.par_iter()
            .map(|s| {
                let path = tracks.join(format!("{}.csv", s.name));
                if !path.is_file() {
                    return Err(Error::Dataset(format!("no track for {} at {}", s.name, path.display())));
                }
                let boxes: Vec<BoundingBox> = read_tracking_csv(&path)?.iter().map(|p| p.bbox).collect();
                evaluate_sequence(s, &boxes)
            })
            .collect::<Result<Vec<_>>>()
    })?;
    emit_report(&results, &ctx.out)?;
    let auc = results.iter().map(|r| r.auc).sum::<f64>() / results.len() as f64;
    log::info!("{} sequences, mean AUC {auc:.4}", results.len());
    Ok(())
}

/// Loss-term switches for the four ablation variants.
pub const VARIANTS: [(&str, bool, bool); 4] = [
    ("none", false, false),
    ("gan_only", true, false),
    ("l2_only", false, true),
    ("both", true, true),
];

fn variant_model(ctx: &Context, data: &mut Option<Vec<Sequence>>, data_dir: &Path, name: &str, adv: bool, rec: bool) -> Result<(Model, Option<f64>)> {
    let dir = ctx.out.join("variants").join(name);
    let final_dir = final_checkpoint_dir(&dir);
    if !final_dir.is_dir() {
        let mut cfg = ctx.cfg.train.clone();
        if !adv {
            cfg.weights.w_v = 0.0;
        }
        if !rec {
            cfg.weights.w_r = 0.0;
        }
        if data.is_none() {
            *data = Some(load_dataset(data_dir)?);
        }
        log::info!("training variant {name}");
        run_training(
            &cfg,
            &ctx.cfg.model,
            data.as_ref().expect("loaded above"),
            TrainOptions {
                out_dir: Some(dir.clone()),
                ..TrainOptions::default()
            },
        )?;
    }
    let model = load_checkpoint(&final_dir, false)?.model;
    let log_path = dir.join("train_log.csv");
    let var = if log_path.is_file() {
        Some(generator_loss_variance(&read_train_log(&log_path)?, ctx.cfg.eval.variance_window))
    } else {
        None
    };
    Ok((model, var))
}

pub fn ablate(ctx: &Context, data: &Path, checkpoint: Option<&Path>) -> Result<()> {
    ctx.start()?;
    let held_seed: u64 = substream(ctx.cfg.seed, "eval.heldout", 0).random();
    let held = generate_dataset(&ctx.cfg.eval.dataset(&ctx.cfg.synth), held_seed)?;
    let mut train_data = None;
    let mut models = Vec::new();
    for (name, adv, rec) in VARIANTS {
        let (m, var) = variant_model(ctx, &mut train_data, data, name, adv, rec)?;
        models.push((name.to_string(), adv, rec, m, var));
    }
    let sweep_model = match checkpoint {
        Some(p) => load_checkpoint(p, false)?.model,
        None => models[3].3.clone(),
    };
    let (rows, _) = lambda_sweep(&sweep_model, &held, &ctx.cfg.eval.lambdas, &ctx.cfg.track, ctx.jobs)?;
    emit_lambda_sweep(&rows, &ctx.out)?;
    let refs: Vec<_> = models
        .iter()
        .map(|(n, a, r, m, v)| (n.clone(), *a, *r, m, *v))
        .collect();
    let table = run_ablation(&refs, &held, &ctx.cfg.track, ctx.jobs)?;
    emit_ablation(&table, &ctx.out)?;
    for r in &table {
        log::info!("{:<9} AUC {:.4} occl+recovery IoU {:.4}", r.name, r.mean_auc, r.mean_occl_recovery_iou);
    }
    Ok(())
}
