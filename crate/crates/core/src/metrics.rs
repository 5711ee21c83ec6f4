//! Evaluation statistics: per-dataset error and f1, cross-dataset mean
//! per-class error, model ranking, Wilcoxon signed-rank tests and the
//! Nemenyi critical difference.

use std::collections::HashMap;
use std::fmt::Write as _;

use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};

fn check_pairs(predictions: &[usize], truths: &[usize]) -> Result<()> {
    if predictions.is_empty() {
        return Err(Error::arg("no predictions"));
    }
    if predictions.len() != truths.len() {
        return Err(Error::arg(format!(
            "{} predictions for {} truths",
            predictions.len(),
            truths.len()
        )));
    }
    Ok(())
}

pub fn error_rate(predictions: &[usize], truths: &[usize]) -> Result<f64> {
    check_pairs(predictions, truths)?;
    let wrong = predictions.iter().zip(truths).filter(|(p, t)| p != t).count();
    Ok(wrong as f64 / predictions.len() as f64)
}

pub fn accuracy(predictions: &[usize], truths: &[usize]) -> Result<f64> {
    Ok(1.0 - error_rate(predictions, truths)?)
}

/// Per-class true positives, false positives and false negatives.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionCounts {
    pub tp: Vec<usize>,
    pub fp: Vec<usize>,
    pub fn_: Vec<usize>,
}

impl ConfusionCounts {
    pub fn from_predictions(predictions: &[usize], truths: &[usize], classes: usize) -> Result<Self> {
        check_pairs(predictions, truths)?;
        if classes < 2 {
            return Err(Error::arg("confusion counts need at least 2 classes"));
        }
        let mut c = Self {
            tp: vec![0; classes],
            fp: vec![0; classes],
            fn_: vec![0; classes],
        };
        for (&p, &t) in predictions.iter().zip(truths) {
            if p >= classes || t >= classes {
                return Err(Error::arg(format!("class {} out of range for {classes} classes", p.max(t))));
            }
            if p == t {
                c.tp[t] += 1;
            } else {
                c.fp[p] += 1;
                c.fn_[t] += 1;
            }
        }
        Ok(c)
    }

    pub fn classes(&self) -> usize {
        self.tp.len()
    }

    /// Σ TP + Σ FN
    pub fn total(&self) -> usize {
        self.tp.iter().sum::<usize>() + self.fn_.iter().sum::<usize>()
    }

    /// f1 of one class; 0 when precision + recall is 0.
    pub fn f1(&self, class: usize) -> f64 {
        let tp = self.tp[class] as f64;
        let ratio = |den: usize| if den == 0 { 0.0 } else { tp / den as f64 };
        let p = ratio(self.tp[class] + self.fp[class]);
        let r = ratio(self.tp[class] + self.fn_[class]);
        if p + r == 0.0 {
            0.0
        } else {
            2.0 * p * r / (p + r)
        }
    }

    pub fn macro_f1(&self) -> f64 {
        (0..self.classes()).map(|c| self.f1(c)).sum::<f64>() / self.classes() as f64
    }
}

/// Mean over datasets of error / class count.
pub fn mpce(errors: &[f64], class_counts: &[usize]) -> Result<f64> {
    if errors.is_empty() || errors.len() != class_counts.len() {
        return Err(Error::arg(format!(
            "mpce needs equal, non-empty lists (got {} errors, {} class counts)",
            errors.len(),
            class_counts.len()
        )));
    }
    if let Some(c) = class_counts.iter().find(|&&c| c < 2) {
        return Err(Error::arg(format!("class count {c} is below 2")));
    }
    let total: f64 = errors.iter().zip(class_counts).map(|(e, &c)| e / c as f64).sum();
    Ok(total / errors.len() as f64)
}

/// How a missing entry takes part in a dataset's ranking.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum MissingMode {
    /// Ranked among the present entries only.
    #[default]
    Exclude,
    /// Missing entries share the worst positions.
    Worst,
}

impl std::str::FromStr for MissingMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "exclude" => Ok(MissingMode::Exclude),
            "worst" => Ok(MissingMode::Worst),
            _ => Err(Error::arg(format!("unknown missing-entry mode `{s}` (expected exclude or worst)"))),
        }
    }
}

/// Ascending ranks with tied values sharing the mean of their positions.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &o in &order[i..=j] {
            ranks[o] = rank;
        }
        i = j + 1;
    }
    ranks
}

/// Ranks one dataset row. In exclude mode missing entries get no rank; in
/// worst mode they tie for the positions after every present entry.
pub fn rank_row(errors: &[Option<f64>], mode: MissingMode) -> Vec<Option<f64>> {
    let present: Vec<f64> = errors.iter().flatten().copied().collect();
    let mut ranks = average_ranks(&present).into_iter();
    let p = present.len();
    let missing_rank = (p + 1 + errors.len()) as f64 / 2.0;
    errors
        .iter()
        .map(|e| match (e, mode) {
            (Some(_), _) => ranks.next(),
            (None, MissingMode::Exclude) => None,
            (None, MissingMode::Worst) => Some(missing_rank),
        })
        .collect()
}

/// Error rates of several models over several datasets; `None` is missing.
#[derive(Clone, Debug, PartialEq)]
pub struct ErrorMatrix {
    pub models: Vec<String>,
    pub datasets: Vec<String>,
    /// `errors[dataset][model]`
    pub errors: Vec<Vec<Option<f64>>>,
}

impl ErrorMatrix {
    /// Header `dataset,<model>...`; one row per dataset; empty field = missing.
    pub fn parse_csv(text: &str, source_name: &str) -> Result<Self> {
        let perr = |line: u64, message: String| Error::Parse {
            source_name: source_name.to_string(),
            line: line as usize,
            message,
        };
        let csv_err = |e: csv::Error| perr(e.position().map_or(0, |p| p.line()), e.to_string());
        let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes());
        let header = reader.headers().map_err(csv_err)?.clone();
        let models: Vec<String> = header.iter().skip(1).map(str::to_string).collect();
        if models.len() < 2 {
            return Err(perr(1, format!("need at least 2 model columns, found {}", models.len())));
        }
        if let Some(dup) = models.iter().enumerate().find(|(i, m)| models[..*i].contains(m)) {
            return Err(perr(1, format!("model `{}` appears twice", dup.1)));
        }
        let mut datasets = Vec::new();
        let mut errors = Vec::new();
        for record in reader.records() {
            let record = record.map_err(csv_err)?;
            let line = record.position().map_or(0, |p| p.line());
            let mut row = Vec::with_capacity(models.len());
            for (col, field) in record.iter().enumerate().skip(1) {
                if field.is_empty() {
                    row.push(None);
                    continue;
                }
                let where_ = || format!("column {} ({})", col + 1, models[col - 1]);
                let v: f64 = field
                    .parse()
                    .map_err(|_| perr(line, format!("{}: `{field}` is not a number", where_())))?;
                if !(0.0..=1.0).contains(&v) {
                    return Err(perr(line, format!("{}: error rate {v} outside [0, 1]", where_())));
                }
                row.push(Some(v));
            }
            datasets.push(record[0].to_string());
            errors.push(row);
        }
        if datasets.is_empty() {
            return Err(perr(1, "no dataset rows".into()));
        }
        Ok(Self {
            models,
            datasets,
            errors,
        })
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!("dataset,{}\n", self.models.join(","));
        for (name, row) in self.datasets.iter().zip(&self.errors) {
            out.push_str(name);
            for e in row {
                out.push(',');
                if let Some(v) = e {
                    write!(out, "{v:.6}").unwrap();
                }
            }
            out.push('\n');
        }
        out
    }

    pub fn model_index(&self, name: &str) -> Result<usize> {
        self.models
            .iter()
            .position(|m| m == name)
            .ok_or_else(|| Error::arg(format!("no model column named `{name}`")))
    }

    /// MPCE of one model over the datasets where it has an entry.
    pub fn mpce(&self, model: usize, class_counts: &HashMap<String, usize>) -> Result<f64> {
        let mut errs = Vec::new();
        let mut counts = Vec::new();
        for (name, row) in self.datasets.iter().zip(&self.errors) {
            if let Some(e) = row[model] {
                let c = class_counts
                    .get(name)
                    .ok_or_else(|| Error::Config(format!("no class count for dataset `{name}`")))?;
                errs.push(e);
                counts.push(*c);
            }
        }
        mpce(&errs, &counts)
    }
}

/// `name,...,classes,...` rows keyed by the first column. Extra columns
/// are ignored, so the shipped registry file can be used directly.
pub fn parse_class_counts(text: &str, source_name: &str) -> Result<HashMap<String, usize>> {
    let perr = |line: u64, message: String| Error::Parse {
        source_name: source_name.to_string(),
        line: line as usize,
        message,
    };
    let csv_err = |e: csv::Error| perr(e.position().map_or(0, |p| p.line()), e.to_string());
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes());
    let col = reader
        .headers()
        .map_err(csv_err)?
        .iter()
        .position(|h| h == "classes")
        .ok_or_else(|| perr(1, "no `classes` column".into()))?;
    let mut out = HashMap::new();
    for record in reader.records() {
        let record = record.map_err(csv_err)?;
        let line = record.position().map_or(0, |p| p.line());
        let field = record.get(col).ok_or_else(|| perr(line, "missing `classes` field".into()))?;
        let c: usize = field
            .parse()
            .map_err(|_| perr(line, format!("column {}: `{field}` is not a class count", col + 1)))?;
        out.insert(record[0].to_string(), c);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelRank {
    pub model: String,
    pub mean_rank: f64,
    /// Datasets that contributed a rank.
    pub ranked: usize,
    /// Datasets where the model attains the row minimum (ties all count).
    pub no_best: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RankReport {
    pub models: Vec<ModelRank>,
    /// Per-dataset ranks in matrix layout; `None` where unranked.
    pub ranks: Vec<Vec<Option<f64>>>,
    pub warnings: Vec<String>,
}

/// Rows with fewer than two present entries are skipped with a warning.
pub fn rank_models(matrix: &ErrorMatrix, mode: MissingMode) -> Result<RankReport> {
    let k = matrix.models.len();
    if k < 2 {
        return Err(Error::arg("ranking needs at least 2 models"));
    }
    let mut sums = vec![0.0; k];
    let mut counts = vec![0usize; k];
    let mut best = vec![0usize; k];
    let mut ranks = Vec::with_capacity(matrix.errors.len());
    let mut warnings = Vec::new();
    for (name, row) in matrix.datasets.iter().zip(&matrix.errors) {
        let present = row.iter().flatten().count();
        if present < 2 {
            warnings.push(format!("dataset `{name}` has {present} present entries; not ranked"));
            ranks.push(vec![None; k]);
            continue;
        }
        let r = rank_row(row, mode);
        let min = row.iter().flatten().copied().fold(f64::INFINITY, f64::min);
        for m in 0..k {
            if let Some(v) = r[m] {
                sums[m] += v;
                counts[m] += 1;
            }
            if row[m] == Some(min) {
                best[m] += 1;
            }
        }
        ranks.push(r);
    }
    let models = (0..k)
        .map(|m| ModelRank {
            model: matrix.models[m].clone(),
            mean_rank: if counts[m] == 0 { f64::NAN } else { sums[m] / counts[m] as f64 },
            ranked: counts[m],
            no_best: best[m],
        })
        .collect();
    Ok(RankReport {
        models,
        ranks,
        warnings,
    })
}

/// Largest sample size for which the automatic method enumerates exactly.
pub const EXACT_WILCOXON_MAX_N: usize = 25;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WilcoxonMethod {
    /// Exact for n ≤ 25, normal approximation above.
    Auto,
    Exact,
    Normal,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Wilcoxon {
    /// min(W+, W-)
    pub statistic: f64,
    pub w_plus: f64,
    pub w_minus: f64,
    /// Pairs left after dropping zero differences.
    pub n: usize,
    pub p_value: f64,
    pub exact: bool,
}

/// Signed-rank test of paired samples, two-sided.
pub fn wilcoxon_signed_rank(a: &[f64], b: &[f64]) -> Result<Wilcoxon> {
    wilcoxon_signed_rank_with(a, b, WilcoxonMethod::Auto)
}

pub fn wilcoxon_signed_rank_with(a: &[f64], b: &[f64], method: WilcoxonMethod) -> Result<Wilcoxon> {
    if a.len() != b.len() {
        return Err(Error::arg(format!("paired samples differ in length ({} vs {})", a.len(), b.len())));
    }
    let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).filter(|d| *d != 0.0).collect();
    if diffs.is_empty() {
        return Err(Error::UndefinedTest("every paired difference is zero".into()));
    }
    let n = diffs.len();
    let abs: Vec<f64> = diffs.iter().map(|d| d.abs()).collect();
    let ranks = average_ranks(&abs);
    let w_plus: f64 = ranks.iter().zip(&diffs).filter(|(_, d)| **d > 0.0).map(|(r, _)| r).sum();
    let w_minus = (n * (n + 1)) as f64 / 2.0 - w_plus;
    let statistic = w_plus.min(w_minus);

    let exact = match method {
        WilcoxonMethod::Auto => n <= EXACT_WILCOXON_MAX_N,
        WilcoxonMethod::Exact => true,
        WilcoxonMethod::Normal => false,
    };
    let p_value = if exact {
        if n > 63 {
            return Err(Error::arg(format!("exact enumeration is limited to n <= 63, got {n}")));
        }
        exact_p(&ranks, statistic)
    } else {
        normal_p(&abs, statistic)
    };
    Ok(Wilcoxon {
        statistic,
        w_plus,
        w_minus,
        n,
        p_value,
        exact,
    })
}

/// Exact two-sided p-value: 2·#{sign assignments with W+ ≤ w} / 2ⁿ, capped
/// at 1. Tie-averaged ranks are multiples of ½, so the subset-sum
/// distribution is counted over doubled ranks.
fn exact_p(ranks: &[f64], w: f64) -> f64 {
    let doubled: Vec<usize> = ranks.iter().map(|r| (2.0 * r).round() as usize).collect();
    let total: usize = doubled.iter().sum();
    let mut counts = vec![0u64; total + 1];
    counts[0] = 1;
    let mut reach = 0;
    for &d in &doubled {
        reach += d;
        for s in (d..=reach).rev() {
            counts[s] += counts[s - d];
        }
    }
    let limit = (2.0 * w).round() as usize;
    let at_most: u64 = counts[..=limit.min(total)].iter().sum();
    exact_p_from_count(at_most, ranks.len())
}

pub(crate) fn exact_p_from_count(at_most: u64, n: usize) -> f64 {
    (2.0 * at_most as f64 / 2f64.powi(n as i32)).min(1.0)
}

/// Normal approximation with tie-corrected variance and a ½ continuity
/// correction toward the mean.
fn normal_p(abs: &[f64], w: f64) -> f64 {
    let n = abs.len() as f64;
    let mean = n * (n + 1.0) / 4.0;
    let mut sorted = abs.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut tie_term = 0.0;
    for group in sorted.chunk_by(|a, b| a == b) {
        let t = group.len() as f64;
        tie_term += t * t * t - t;
    }
    let var = n * (n + 1.0) * (2.0 * n + 1.0) / 24.0 - tie_term / 48.0;
    if var <= 0.0 {
        return 1.0;
    }
    let z = ((w - mean).abs() - 0.5).max(0.0) / var.sqrt();
    let std = Normal::new(0.0, 1.0).expect("standard normal");
    (2.0 * std.cdf(-z)).min(1.0)
}

/// Two-sided p-values for every model pair over datasets where both are
/// present. `None` on the diagonal and where the test is undefined.
pub fn pairwise_wilcoxon(matrix: &ErrorMatrix) -> Vec<Vec<Option<f64>>> {
    let k = matrix.models.len();
    let mut out = vec![vec![None; k]; k];
    for i in 0..k {
        for j in (i + 1)..k {
            let (mut a, mut b) = (Vec::new(), Vec::new());
            for row in &matrix.errors {
                if let (Some(x), Some(y)) = (row[i], row[j]) {
                    a.push(x);
                    b.push(y);
                }
            }
            let p = wilcoxon_signed_rank(&a, &b).ok().map(|w| w.p_value);
            out[i][j] = p;
            out[j][i] = p;
        }
    }
    out
}

pub fn pvalue_matrix_csv(models: &[String], p: &[Vec<Option<f64>>]) -> String {
    let mut out = format!("model,{}\n", models.join(","));
    for (name, row) in models.iter().zip(p) {
        out.push_str(name);
        for v in row {
            out.push(',');
            if let Some(v) = v {
                write!(out, "{v:.6}").unwrap();
            }
        }
        out.push('\n');
    }
    out
}

/// Critical values q_α of the Nemenyi test for k = 2..=50 classifiers: the
/// upper-α studentized range for k groups and infinite degrees of freedom,
/// divided by √2.
const NEMENYI_Q05: [f64; 49] = [
    1.959964, 2.343701, 2.569032, 2.727774, 2.849705, 2.948320, 3.030878, 3.101730, 3.163684,
    3.218654, 3.268004, 3.312739, 3.353618, 3.391230, 3.426041, 3.458425, 3.488685, 3.517073,
    3.543799, 3.569040, 3.592946, 3.615646, 3.637252, 3.657861, 3.677556, 3.696413, 3.714498,
    3.731869, 3.748578, 3.764672, 3.780193, 3.795179, 3.809664, 3.823680, 3.837254, 3.850413,
    3.863181, 3.875579, 3.887627, 3.899344, 3.910747, 3.921852, 3.932673, 3.943224, 3.953518,
    3.963566, 3.973379, 3.982969, 3.992343,
];

const NEMENYI_Q10: [f64; 49] = [
    1.644854, 2.052293, 2.291341, 2.459516, 2.588521, 2.692732, 2.779884, 2.854606, 2.919889,
    2.977768, 3.029694, 3.076733, 3.119693, 3.159199, 3.195743, 3.229723, 3.261461, 3.291224,
    3.319233, 3.345676, 3.370712, 3.394477, 3.417089, 3.438651, 3.459253, 3.478971, 3.497878,
    3.516033, 3.533492, 3.550305, 3.566516, 3.582165, 3.597288, 3.611917, 3.626084, 3.639814,
    3.653134, 3.666066, 3.678631, 3.690848, 3.702736, 3.714312, 3.725590, 3.736584, 3.747310,
    3.757778, 3.768000, 3.777987, 3.787750,
];

pub fn nemenyi_q(k: usize, alpha: f64) -> Result<f64> {
    let table = if alpha == 0.05 {
        &NEMENYI_Q05
    } else if alpha == 0.10 {
        &NEMENYI_Q10
    } else {
        return Err(Error::arg(format!("no Nemenyi table for alpha {alpha} (use 0.05 or 0.10)")));
    };
    if !(2..=50).contains(&k) {
        return Err(Error::arg(format!("Nemenyi table covers 2..=50 models, got {k}")));
    }
    Ok(table[k - 2])
}

/// CD = q_α(k) · √(k(k+1) / (6N))
pub fn nemenyi_cd(k: usize, datasets: usize, alpha: f64) -> Result<f64> {
    if datasets == 0 {
        return Err(Error::arg("critical difference needs at least one dataset"));
    }
    let q = nemenyi_q(k, alpha)?;
    Ok(q * ((k * (k + 1)) as f64 / (6.0 * datasets as f64)).sqrt())
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Critical-difference diagram: a mean-rank axis, one labelled leader per
/// model, a bar of length CD, and thick bars joining groups of models whose
/// mean ranks lie within CD of each other.
pub fn cd_diagram_svg(models: &[String], mean_ranks: &[f64], cd: f64) -> String {
    let k = models.len();
    let mut order: Vec<usize> = (0..k).filter(|&i| mean_ranks[i].is_finite()).collect();
    order.sort_by(|&a, &b| mean_ranks[a].total_cmp(&mean_ranks[b]).then(a.cmp(&b)));
    let n = order.len();
    let half = n.div_ceil(2);
    let (width, left, right) = (800.0, 200.0, 600.0);
    let axis_y = 80.0;
    let row_h = 22.0;
    let height = axis_y + 60.0 + row_h * half as f64 + 20.0;
    let max_rank = k.max(2) as f64;
    let x = |r: f64| left + (r - 1.0) / (max_rank - 1.0) * (right - left);

    let mut s = String::new();
    writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-family="sans-serif" font-size="13">"#
    )
    .unwrap();
    writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#).unwrap();
    writeln!(s, r#"<line x1="{left}" y1="{axis_y}" x2="{right}" y2="{axis_y}" stroke="black"/>"#).unwrap();
    for r in 1..=k.max(2) {
        let xr = x(r as f64);
        writeln!(s, r#"<line x1="{xr:.2}" y1="{axis_y}" x2="{xr:.2}" y2="{:.2}" stroke="black"/>"#, axis_y - 6.0).unwrap();
        writeln!(s, r#"<text x="{xr:.2}" y="{:.2}" text-anchor="middle">{r}</text>"#, axis_y - 10.0).unwrap();
    }
    let (cd0, cd1) = (x(1.0), x(1.0 + cd));
    writeln!(s, r#"<line x1="{cd0:.2}" y1="30" x2="{cd1:.2}" y2="30" stroke="black" stroke-width="2"/>"#).unwrap();
    writeln!(s, r#"<text x="{:.2}" y="22" text-anchor="middle">CD = {cd:.3}</text>"#, (cd0 + cd1) / 2.0).unwrap();

    for (pos, &m) in order.iter().enumerate() {
        let xr = x(mean_ranks[m]);
        let (row, side_x, anchor) = if pos < half {
            (pos, left - 10.0, "end")
        } else {
            (n - 1 - pos, right + 10.0, "start")
        };
        let y = axis_y + 50.0 + row_h * row as f64;
        writeln!(
            s,
            r#"<polyline points="{xr:.2},{axis_y} {xr:.2},{y:.2} {:.2},{y:.2}" fill="none" stroke="black"/>"#,
            if pos < half { left - 5.0 } else { right + 5.0 }
        )
        .unwrap();
        writeln!(
            s,
            r#"<text x="{side_x:.2}" y="{:.2}" text-anchor="{anchor}">{} ({:.3})</text>"#,
            y + 4.0,
            xml_escape(&models[m]),
            mean_ranks[m]
        )
        .unwrap();
    }

    let mut cliques: Vec<(usize, usize)> = Vec::new();
    for i in 0..n {
        let mut j = i;
        while j + 1 < n && mean_ranks[order[j + 1]] - mean_ranks[order[i]] <= cd {
            j += 1;
        }
        if j > i && !cliques.iter().any(|&(a, b)| a <= i && j <= b) {
            cliques.push((i, j));
        }
    }
    for (c, &(i, j)) in cliques.iter().enumerate() {
        let y = axis_y + 12.0 + 6.0 * c as f64;
        writeln!(
            s,
            r#"<line x1="{:.2}" y1="{y:.2}" x2="{:.2}" y2="{y:.2}" stroke="black" stroke-width="4"/>"#,
            x(mean_ranks[order[i]]) - 3.0,
            x(mean_ranks[order[j]]) + 3.0
        )
        .unwrap();
    }
    s.push_str("</svg>\n");
    s
}
