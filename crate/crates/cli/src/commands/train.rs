use std::fs;
use std::path::PathBuf;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use grufcn::metrics::ConfusionCounts;
use grufcn::model::{parameter_count, ArchConfig, CellKind, GruFcnModel};
use grufcn::train::{evaluate, fit_with, write_history, LrSchedule, TrainRun};
use serde::Serialize;

use super::{check_against_registry, resolve_dataset, write_file};
use crate::args::{Cell, TrainArgs};

pub const DEFAULT_EPOCHS: usize = 2000;
pub const DEFAULT_BATCH: usize = 128;

#[derive(Serialize)]
struct Summary {
    dataset: String,
    cell: CellKind,
    seed: u64,
    epochs: usize,
    train_batch: usize,
    test_batch: usize,
    series_length: usize,
    num_classes: usize,
    parameter_count: usize,
    best_epoch: Option<usize>,
    test_error: f64,
    test_loss: f64,
    macro_f1: f64,
    wall_clock_seconds: f64,
}

pub fn run(args: TrainArgs) -> Result<()> {
    let resolved = resolve_dataset(&args.data)?;
    check_against_registry(&resolved);
    let data = &resolved.dataset;
    let entry = resolved.entry;

    let epochs = args.epochs.or(entry.map(|e| e.epochs)).unwrap_or(DEFAULT_EPOCHS);
    let train_batch = args.train_batch.or(entry.map(|e| e.train_batch)).unwrap_or(DEFAULT_BATCH);
    let test_batch = args
        .test_batch
        .or(entry.map(|e| e.test_batch))
        .unwrap_or(DEFAULT_BATCH)
        .min(data.test_y.len());
    if train_batch == 0 || test_batch == 0 {
        bail!("batch sizes must be at least 1");
    }
    if !(args.lr > 0.0 && args.lr.is_finite()) {
        bail!("learning rate must be positive, got {}", args.lr);
    }

    let config = ArchConfig {
        hidden_size: args.hidden,
        dropout_rate: args.dropout,
        seed: args.seed,
        ..ArchConfig::new(
            data.series_length(),
            data.num_classes(),
            match args.cell {
                Cell::Gru => CellKind::Gru,
                Cell::Lstm => CellKind::Lstm,
            },
        )
    };
    let mut model = GruFcnModel::from_seed(config.clone())?;

    let out = args
        .out
        .clone()
        .unwrap_or_else(|| PathBuf::from("runs").join(&data.name).join(format!("seed-{}", args.seed)));
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    let best_path = out.join("best.ckpt");
    let final_path = out.join("final.ckpt");

    println!(
        "training {} ({} train / {} test, length {}, {} classes) for {epochs} epochs, {} parameters",
        data.name,
        data.train_y.len(),
        data.test_y.len(),
        data.series_length(),
        data.num_classes(),
        parameter_count(&config)
    );
    let mut run = TrainRun::new(epochs, train_batch, test_batch, args.seed).with_checkpoint(&best_path);
    run.schedule = LrSchedule {
        initial: args.lr,
        ..LrSchedule::default()
    };
    let started = Instant::now();
    let log_every = args.log_every;
    let run = fit_with(&mut model, data, run, |r| {
        if log_every > 0 && ((r.epoch + 1) % log_every == 0 || r.epoch + 1 == epochs) {
            println!(
                "epoch {:>5}/{epochs}  lr {:.6}  train_loss {:.6}  test_loss {:.6}  test_error {:.6}",
                r.epoch + 1,
                r.lr,
                r.train_loss,
                r.eval_loss,
                r.eval_error
            );
        }
    })?;
    let wall = started.elapsed().as_secs_f64();

    write_history(out.join("history.csv"), &run.history)?;
    model.save(&final_path)?;
    if run.best_epoch.is_none() {
        // No epoch ran, so the untrained model is also the best one seen.
        model.save(&best_path)?;
    }

    // Summarize from the file on disk so `eval` on final.ckpt agrees exactly.
    let reloaded = GruFcnModel::load(&final_path)?;
    let eval = evaluate(&reloaded, &data.test_x, &data.test_y, test_batch)?;
    let confusion = ConfusionCounts::from_predictions(&eval.predictions, &data.test_y, data.num_classes())?;
    let summary = Summary {
        dataset: data.name.clone(),
        cell: config.cell_kind,
        seed: args.seed,
        epochs,
        train_batch,
        test_batch,
        series_length: data.series_length(),
        num_classes: data.num_classes(),
        parameter_count: reloaded.parameter_count(),
        best_epoch: run.best_epoch,
        test_error: eval.error,
        test_loss: eval.loss,
        macro_f1: confusion.macro_f1(),
        wall_clock_seconds: wall,
    };
    let json = serde_json::to_string_pretty(&summary)?;
    write_file(&out.join("summary.json"), format!("{json}\n"))?;
    println!(
        "final test_error {:.6}  macro_f1 {:.6}  ({wall:.1}s); artifacts in {}",
        summary.test_error,
        summary.macro_f1,
        out.display()
    );
    Ok(())
}
