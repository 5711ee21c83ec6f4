use std::collections::BTreeMap;
use std::fs;

use anyhow::{bail, Context, Result};
use grufcn::data::{registry, registry_lookup, RegistryEntry};
use grufcn::model::{parameter_count, ArchConfig, CellKind};

use crate::args::ParamsArgs;

fn counts(e: &RegistryEntry) -> (usize, usize) {
    let count = |kind| parameter_count(&ArchConfig::new(e.length, e.classes, kind));
    (count(CellKind::Gru), count(CellKind::Lstm))
}

pub fn run(args: ParamsArgs) -> Result<()> {
    let entries: Vec<&RegistryEntry> = if args.all {
        registry().iter().collect()
    } else if args.dataset.is_empty() {
        bail!("give --dataset NAME (repeatable) or --all");
    } else {
        args.dataset.iter().map(|n| registry_lookup(n)).collect::<Result<_, _>>()?
    };

    let mut rows: Vec<(String, usize, usize)> = entries
        .iter()
        .map(|e| {
            let (g, l) = counts(e);
            (e.name.clone(), g, l)
        })
        .collect();
    if args.all {
        let (g, l) = rows.iter().fold((0, 0), |(a, b), r| (a + r.1, b + r.2));
        rows.push(("Total".into(), g, l));
    }
    println!("dataset,gru_fcn,lstm_fcn");
    for (name, g, l) in &rows {
        println!("{name},{g},{l}");
    }

    if let Some(path) = &args.check {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let reference = parse_reference(&text).with_context(|| format!("parsing {}", path.display()))?;
        let mut mismatches = Vec::new();
        for (name, g, l) in &rows {
            match reference.get(name.as_str()) {
                None => mismatches.push(format!("{name}: not in reference")),
                Some(&(rg, rl)) => {
                    if rg != *g {
                        mismatches.push(format!("{name}: gru_fcn {g} vs reference {rg}"));
                    }
                    if rl != *l {
                        mismatches.push(format!("{name}: lstm_fcn {l} vs reference {rl}"));
                    }
                }
            }
        }
        println!("check: {} rows compared, {} mismatches", rows.len(), mismatches.len());
        if !mismatches.is_empty() {
            bail!("parameter counts disagree with the reference:\n  {}", mismatches.join("\n  "));
        }
    }
    Ok(())
}

fn parse_reference(text: &str) -> Result<BTreeMap<String, (usize, usize)>> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes());
    let header = reader.headers()?.clone();
    let col = |name: &str| {
        header
            .iter()
            .position(|h| h == name)
            .with_context(|| format!("no `{name}` column"))
    };
    let (gc, lc) = (col("gru_fcn")?, col("lstm_fcn")?);
    let mut out = BTreeMap::new();
    for record in reader.records() {
        let record = record?;
        let line = record.position().map_or(0, |p| p.line());
        let num = |c: usize| -> Result<usize> {
            let field = record.get(c).unwrap_or("");
            field
                .replace(',', "")
                .parse()
                .with_context(|| format!("line {line}, column {}: `{field}` is not a count", c + 1))
        };
        out.insert(record[0].to_string(), (num(gc)?, num(lc)?));
    }
    Ok(out)
}
