use std::fmt::Write as _;

use anyhow::{bail, Result};
use grufcn::metrics::ConfusionCounts;
use grufcn::model::GruFcnModel;
use grufcn::train::evaluate;

use super::{resolve_dataset, write_file};
use crate::args::EvalArgs;
use crate::commands::train::DEFAULT_BATCH;

pub fn run(args: EvalArgs) -> Result<()> {
    let model = GruFcnModel::load(&args.checkpoint)?;
    let resolved = resolve_dataset(&args.data)?;
    let data = &resolved.dataset;
    let cfg = model.config();
    if cfg.series_length != data.series_length() {
        bail!(
            "configuration error: checkpoint expects series length {} but {} has length {}",
            cfg.series_length,
            data.name,
            data.series_length()
        );
    }
    if cfg.num_classes != data.num_classes() {
        bail!(
            "configuration error: checkpoint has {} classes but {} has {}",
            cfg.num_classes,
            data.name,
            data.num_classes()
        );
    }
    let batch = args
        .test_batch
        .or(resolved.entry.map(|e| e.test_batch))
        .unwrap_or(DEFAULT_BATCH)
        .min(data.test_y.len());
    if batch == 0 {
        bail!("test batch must be at least 1");
    }

    let eval = evaluate(&model, &data.test_x, &data.test_y, batch)?;
    let confusion = ConfusionCounts::from_predictions(&eval.predictions, &data.test_y, data.num_classes())?;
    println!("dataset {}", data.name);
    println!("test_error {:.6}", eval.error);
    println!("test_loss {:.6}", eval.loss);
    println!("macro_f1 {:.6}", confusion.macro_f1());
    println!("class,label,tp,fp,fn,f1");
    for c in 0..confusion.classes() {
        println!(
            "{c},{},{},{},{},{:.6}",
            data.label_map[c],
            confusion.tp[c],
            confusion.fp[c],
            confusion.fn_[c],
            confusion.f1(c)
        );
    }

    if let Some(path) = &args.predictions {
        let c = data.num_classes();
        let mut csv = String::from("index,label,predicted,confidence\n");
        for (i, (&p, &t)) in eval.predictions.iter().zip(&data.test_y).enumerate() {
            let conf = eval.probs.data()[i * c + p];
            writeln!(csv, "{i},{},{},{conf:.6}", data.label_map[t], data.label_map[p]).unwrap();
        }
        write_file(path, csv)?;
    }
    Ok(())
}
