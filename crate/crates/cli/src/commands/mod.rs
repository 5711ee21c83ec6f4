pub mod compare;
pub mod eval;
pub mod params;
pub mod train;

use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use grufcn::data::{self, RegistryEntry, UcrDataset};

use crate::args::DatasetArgs;

/// A loaded dataset and, when it has one, its registry row.
pub struct Resolved {
    pub dataset: UcrDataset,
    pub entry: Option<&'static RegistryEntry>,
}

pub fn resolve_dataset(args: &DatasetArgs) -> Result<Resolved> {
    if let (Some(train), Some(test)) = (&args.train, &args.test) {
        let entry = match &args.dataset {
            Some(name) => data::registry_lookup(name).ok(),
            None => None,
        };
        let name = match (&args.dataset, entry) {
            (_, Some(e)) => e.name.clone(),
            (Some(n), None) => n.clone(),
            (None, None) => stem_name(train),
        };
        if entry.is_none() {
            println!("warning: `{name}` is not in the registry; built-in defaults apply");
        }
        let dataset = data::make_dataset(train, test, &name)?;
        return Ok(Resolved { dataset, entry });
    }
    let name = args.dataset.as_deref().expect("clap requires --dataset without --train");
    let entry = data::registry_lookup(name)?;
    let Some(root) = &args.root else {
        bail!(
            "no archive root: pass --root or set {} (or give --train and --test)",
            crate::args::ROOT_ENV
        );
    };
    let (train, test) = data::find_split_files(root, entry)?;
    let dataset = data::make_dataset(train, test, &entry.name)?;
    Ok(Resolved {
        dataset,
        entry: Some(entry),
    })
}

fn stem_name(path: &Path) -> String {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    stem.strip_suffix("_TRAIN").map(str::to_string).unwrap_or(stem)
}

/// Warns when loaded data disagrees with its registry row.
pub fn check_against_registry(resolved: &Resolved) {
    let (Some(e), d) = (resolved.entry, &resolved.dataset) else {
        return;
    };
    let found = (d.series_length(), d.num_classes(), d.train_y.len(), d.test_y.len());
    let listed = (e.length, e.classes, e.train_size, e.test_size);
    if found != listed {
        println!(
            "warning: {} files have (length, classes, train, test) = {found:?}, registry lists {listed:?}",
            e.name
        );
    }
}

pub fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}
