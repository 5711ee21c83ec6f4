use std::fmt::Write as _;
use std::fs;

use anyhow::{Context, Result};
use grufcn::data::REGISTRY_CSV;
use grufcn::metrics::{
    cd_diagram_svg, nemenyi_cd, pairwise_wilcoxon, parse_class_counts, pvalue_matrix_csv, rank_models,
    ErrorMatrix, MissingMode,
};

use super::write_file;
use crate::args::{CompareArgs, Missing};

pub fn run(args: CompareArgs) -> Result<()> {
    let source = args.errors.display().to_string();
    let text = fs::read_to_string(&args.errors).with_context(|| format!("reading {source}"))?;
    let matrix = ErrorMatrix::parse_csv(&text, &source)?;
    let class_counts = match &args.classes {
        Some(path) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            parse_class_counts(&text, &path.display().to_string())?
        }
        None => parse_class_counts(REGISTRY_CSV, "registry.csv")?,
    };
    let mode = match args.missing {
        Missing::Exclude => MissingMode::Exclude,
        Missing::Worst => MissingMode::Worst,
    };

    let report = rank_models(&matrix, mode)?;
    for w in &report.warnings {
        println!("warning: {w}");
    }
    let ranked_rows = report.ranks.iter().filter(|r| r.iter().any(Option::is_some)).count();
    let k = matrix.models.len();
    let cd = nemenyi_cd(k, ranked_rows, args.alpha)?;

    let mut ranks_csv = String::from("model,mean_rank,no_best,mpce\n");
    for (m, r) in report.models.iter().enumerate() {
        let mpce = matrix.mpce(m, &class_counts)?;
        writeln!(ranks_csv, "{},{:.6},{},{:.6}", r.model, r.mean_rank, r.no_best, mpce).unwrap();
    }
    print!("{ranks_csv}");
    println!("critical_difference {cd:.6} (alpha {}, {k} models, {ranked_rows} datasets)", args.alpha);

    if let Some(out) = &args.out {
        fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
        write_file(&out.join("ranks.csv"), &ranks_csv)?;
        let p = pairwise_wilcoxon(&matrix);
        write_file(&out.join("wilcoxon.csv"), pvalue_matrix_csv(&matrix.models, &p))?;
        let means: Vec<f64> = report.models.iter().map(|r| r.mean_rank).collect();
        write_file(&out.join("cd.svg"), cd_diagram_svg(&matrix.models, &means, cd))?;
    }
    Ok(())
}
