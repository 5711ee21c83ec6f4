//! UCR-format loading, label mapping and the shipped per-dataset settings.
//!
//! A split file holds one series per line: the label first, then the
//! values. Fields are tab-separated if the first record contains a tab,
//! comma-separated if it contains a comma, and whitespace-separated
//! otherwise. Values are used raw; nothing is normalized.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use serde::Deserialize;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// One parsed split before label mapping.
#[derive(Clone, Debug, PartialEq)]
pub struct RawSplit {
    pub labels: Vec<f64>,
    /// N×L
    pub series: Tensor,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Delimiter {
    Tab,
    Comma,
    Whitespace,
}

impl Delimiter {
    fn detect(line: &str) -> Self {
        if line.contains('\t') {
            Delimiter::Tab
        } else if line.contains(',') {
            Delimiter::Comma
        } else {
            Delimiter::Whitespace
        }
    }

    fn split<'a>(self, line: &'a str) -> Box<dyn Iterator<Item = &'a str> + 'a> {
        match self {
            Delimiter::Tab => Box::new(line.split('\t').map(str::trim)),
            Delimiter::Comma => Box::new(line.split(',').map(str::trim)),
            Delimiter::Whitespace => Box::new(line.split_whitespace()),
        }
    }
}

/// Parses split text; `source_name` only labels error messages.
pub fn parse_split(text: &str, source_name: &str) -> Result<RawSplit> {
    let parse_err = |line: usize, message: String| Error::Parse {
        source_name: source_name.to_string(),
        line,
        message,
    };
    let mut delim = None;
    let mut labels = Vec::new();
    let mut values = Vec::new();
    let mut width = None;

    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let d = *delim.get_or_insert_with(|| Delimiter::detect(line));
        let start = values.len();
        let mut label = None;
        for (col, field) in d.split(line).enumerate() {
            let v: f64 = field
                .parse()
                .map_err(|_| parse_err(lineno, format!("field {} is not a number: `{field}`", col + 1)))?;
            if !v.is_finite() {
                return Err(parse_err(lineno, format!("field {} is not finite: `{field}`", col + 1)));
            }
            match label {
                None => label = Some(v),
                Some(_) => values.push(v),
            }
        }
        let len = values.len() - start;
        if len == 0 {
            return Err(parse_err(lineno, "record has a label but no values".into()));
        }
        match width {
            None => width = Some(len),
            Some(w) if w != len => {
                return Err(parse_err(lineno, format!("record has {len} values, earlier records have {w}")));
            }
            _ => {}
        }
        labels.push(label.expect("non-empty line has a first field"));
    }
    let width = width.ok_or_else(|| parse_err(0, "file contains no records".into()))?;
    Ok(RawSplit {
        series: Tensor::new(&[labels.len(), width], values)?,
        labels,
    })
}

pub fn load_split(path: impl AsRef<Path>) -> Result<RawSplit> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_split(&text, &path.display().to_string())
}

/// Comma-separated, shortest round-trip formatting, so reloading is exact.
pub fn format_split(split: &RawSplit) -> String {
    let mut out = String::new();
    let width = split.series.shape()[1];
    for (label, row) in split.labels.iter().zip(split.series.data().chunks_exact(width)) {
        write!(out, "{label}").unwrap();
        for v in row {
            write!(out, ",{v}").unwrap();
        }
        out.push('\n');
    }
    out
}

pub fn write_split(path: impl AsRef<Path>, split: &RawSplit) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, format_split(split)).map_err(|e| Error::io(path, e))
}

/// Both splits of one dataset with labels mapped to 0..C.
#[derive(Clone, Debug, PartialEq)]
pub struct UcrDataset {
    pub name: String,
    pub train_x: Tensor,
    pub train_y: Vec<usize>,
    pub test_x: Tensor,
    pub test_y: Vec<usize>,
    /// `label_map[class]` is the original label; ascending.
    pub label_map: Vec<f64>,
}

impl UcrDataset {
    /// Builds the label map from the sorted union of both splits' labels.
    pub fn from_splits(name: impl Into<String>, train: RawSplit, test: RawSplit) -> Result<Self> {
        let (lt, le) = (train.series.shape()[1], test.series.shape()[1]);
        if lt != le {
            return Err(Error::dim(format!(
                "train series have length {lt} but test series have length {le}"
            )));
        }
        let mut label_map: Vec<f64> = train.labels.iter().chain(&test.labels).copied().collect();
        label_map.sort_by(f64::total_cmp);
        label_map.dedup();
        let index = |labels: &[f64]| -> Vec<usize> {
            labels
                .iter()
                .map(|l| label_map.binary_search_by(|m| m.total_cmp(l)).expect("label is in the union"))
                .collect()
        };
        Ok(Self {
            name: name.into(),
            train_y: index(&train.labels),
            test_y: index(&test.labels),
            train_x: train.series,
            test_x: test.series,
            label_map,
        })
    }

    pub fn series_length(&self) -> usize {
        self.train_x.shape()[1]
    }

    pub fn num_classes(&self) -> usize {
        self.label_map.len()
    }
}

pub fn make_dataset(train_path: impl AsRef<Path>, test_path: impl AsRef<Path>, name: &str) -> Result<UcrDataset> {
    UcrDataset::from_splits(name, load_split(train_path)?, load_split(test_path)?)
}

/// B×C indicator matrix.
pub fn one_hot(labels: &[usize], classes: usize) -> Result<Tensor> {
    if labels.is_empty() || classes == 0 {
        return Err(Error::arg("one_hot needs at least one label and one class"));
    }
    let mut t = Tensor::zeros(&[labels.len(), classes]);
    for (i, &l) in labels.iter().enumerate() {
        if l >= classes {
            return Err(Error::arg(format!("label {l} out of range for {classes} classes")));
        }
        t.data_mut()[i * classes + l] = 1.0;
    }
    Ok(t)
}

/// One row of the shipped run-settings table.
#[derive(Clone, Debug, PartialEq, Eq, Deserialize)]
pub struct RegistryEntry {
    pub name: String,
    #[serde(rename = "type")]
    pub type_tag: String,
    pub classes: usize,
    pub length: usize,
    pub train_size: usize,
    pub test_size: usize,
    pub epochs: usize,
    pub train_batch: usize,
    pub test_batch: usize,
    #[serde(skip)]
    pub archive_names: Vec<String>,
}

pub const REGISTRY_CSV: &str = include_str!("../data/registry.csv");
const ARCHIVE_NAMES_CSV: &str = include_str!("../data/archive_names.csv");

fn parse_registry() -> Result<Vec<RegistryEntry>> {
    let csv_err = |source: &str, e: csv::Error| Error::Parse {
        source_name: source.into(),
        line: e.position().map_or(0, |p| p.line() as usize),
        message: e.to_string(),
    };
    let mut entries: Vec<RegistryEntry> = csv::Reader::from_reader(REGISTRY_CSV.as_bytes())
        .deserialize()
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| csv_err("registry.csv", e))?;
    let mut names = csv::Reader::from_reader(ARCHIVE_NAMES_CSV.as_bytes());
    for record in names.records() {
        let record = record.map_err(|e| csv_err("archive_names.csv", e))?;
        let entry = entries.iter_mut().find(|e| e.name == record[0]).ok_or_else(|| Error::Parse {
            source_name: "archive_names.csv".into(),
            line: record.position().map_or(0, |p| p.line() as usize),
            message: format!("`{}` is not a registry name", &record[0]),
        })?;
        entry.archive_names = record[1].split(';').map(str::to_string).collect();
    }
    for e in &mut entries {
        if e.archive_names.is_empty() {
            e.archive_names.push(e.name.clone());
        }
    }
    Ok(entries)
}

/// All 85 entries, in table order.
pub fn registry() -> &'static [RegistryEntry] {
    static REGISTRY: OnceLock<Vec<RegistryEntry>> = OnceLock::new();
    REGISTRY.get_or_init(|| parse_registry().expect("shipped registry parses"))
}

/// Exact match on the registry name or on any archive directory name.
/// Otherwise a lookup error carrying up to five near matches.
pub fn registry_lookup(name: &str) -> Result<&'static RegistryEntry> {
    let reg = registry();
    if let Some(e) = reg
        .iter()
        .find(|e| e.name == name || e.archive_names.iter().any(|a| a == name))
    {
        return Ok(e);
    }
    let lower = name.to_lowercase();
    let mut scored: Vec<(f64, &str)> = reg
        .iter()
        .map(|e| {
            let best = std::iter::once(&e.name)
                .chain(&e.archive_names)
                .map(|c| strsim::jaro_winkler(&lower, &c.to_lowercase()))
                .fold(0.0, f64::max);
            (best, e.name.as_str())
        })
        .filter(|(s, _)| *s >= 0.8)
        .collect();
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(b.1)));
    Err(Error::Lookup {
        name: name.to_string(),
        suggestions: scored.into_iter().take(5).map(|(_, n)| n.to_string()).collect(),
    })
}

/// Finds `<Name>_TRAIN` and `<Name>_TEST` (optionally `.txt`/`.tsv`) under
/// `root/<Name>/` or directly under `root`, trying each archive name of
/// the entry.
pub fn find_split_files(root: &Path, entry: &RegistryEntry) -> Result<(PathBuf, PathBuf)> {
    let mut tried = Vec::new();
    for archive in &entry.archive_names {
        for dir in [root.join(archive), root.to_path_buf()] {
            for ext in ["", ".txt", ".tsv"] {
                let train = dir.join(format!("{archive}_TRAIN{ext}"));
                let test = dir.join(format!("{archive}_TEST{ext}"));
                if train.is_file() && test.is_file() {
                    return Ok((train, test));
                }
                tried.push(train);
            }
        }
    }
    Err(Error::Config(format!(
        "no split files for `{}` under {}; tried e.g. {}",
        entry.name,
        root.display(),
        tried.first().map_or(String::new(), |p| p.display().to_string())
    )))
}

/// Loads a registry dataset from an archive root; the dataset keeps the
/// registry name.
pub fn load_registered(root: &Path, name: &str) -> Result<UcrDataset> {
    let entry = registry_lookup(name)?;
    let (train, test) = find_split_files(root, entry)?;
    make_dataset(train, test, &entry.name)
}
