use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::datagen::Dataset;
use crate::error::{MbvrError, Result};

use super::evaluate::{analyze, evaluate, AnalyzeOptions, Diagnostics};
use super::train::train;
use super::{TrainConfig, Variant};

/// Cutoff reported in the ablation table.
const TABLE_K: usize = 10;

/// Headline numbers of one trained variant.
#[derive(Debug, Clone, PartialEq)]
pub struct VariantSummary {
    pub precision: f64,
    pub mrr_unnormalized: f64,
    pub mrr_normalized: f64,
    /// PNR over the judged evaluation pairs.
    pub pnr: f64,
    pub rvt_below_fraction: f64,
    pub rvt_median: f64,
    pub overlap: f64,
}

#[derive(Debug)]
pub struct AblationRow {
    pub variant: Variant,
    pub result: Result<VariantSummary>,
}

#[derive(Debug)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn get(&self, variant: Variant) -> Option<&VariantSummary> {
        self.rows
            .iter()
            .find(|r| r.variant == variant)
            .and_then(|r| r.result.as_ref().ok())
    }

    /// One line per variant; failed variants carry NaN metrics and the error
    /// in the `status` column.
    pub fn to_tsv(&self, stamp: &str) -> String {
        let mut out = format!(
            "{stamp}\nvariant\tprecision@{TABLE_K}\tmrr@{TABLE_K}_unnormalized\tmrr@{TABLE_K}_normalized\tpnr\trvt_below_fraction\trvt_median\toverlap_stat\tstatus\n"
        );
        for row in &self.rows {
            match &row.result {
                Ok(s) => writeln!(
                    out,
                    "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\tok",
                    row.variant,
                    s.precision,
                    s.mrr_unnormalized,
                    s.mrr_normalized,
                    s.pnr,
                    s.rvt_below_fraction,
                    s.rvt_median,
                    s.overlap
                ),
                Err(e) => writeln!(
                    out,
                    "{}\tNaN\tNaN\tNaN\tNaN\tNaN\tNaN\tNaN\terror: {}",
                    row.variant,
                    e.to_string().replace(['\t', '\n'], " ")
                ),
            }
            .expect("string write");
        }
        out
    }
}

/// Trains, evaluates and analyzes every variant from `base` (only the
/// variant differs; seed and data order are shared). A failing variant is
/// recorded in its row and the remaining variants still run. With `out_dir`,
/// each variant's artifacts go to `<out_dir>/<variant>/` and the table to
/// `<out_dir>/ablation.tsv`.
pub fn ablate(base: &TrainConfig, dataset: &Dataset, out_dir: Option<&Path>) -> Result<AblationTable> {
    base.validate()?;
    let mut rows = Vec::with_capacity(Variant::ALL.len());
    for variant in Variant::ALL {
        let cfg = TrainConfig {
            variant,
            ..base.clone()
        };
        let dir = out_dir.map(|d| d.join(variant_dir(variant)));
        let result = run_variant(&cfg, dataset, dir.as_deref());
        if let Err(e) = &result {
            log::error!("variant {variant} failed: {e}");
        }
        rows.push(AblationRow { variant, result });
    }
    let table = AblationTable { rows };
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("ablation.tsv"), table.to_tsv(&base.stamp()))?;
    }
    Ok(table)
}

fn variant_dir(variant: Variant) -> String {
    variant.name().replace('+', "_")
}

fn run_variant(cfg: &TrainConfig, dataset: &Dataset, dir: Option<&Path>) -> Result<VariantSummary> {
    let outcome = train(cfg, dataset, dir)?;
    let eval = evaluate(&outcome.params, dataset, cfg.variant.repr(), &[TABLE_K])?;
    let diag: Diagnostics = analyze(
        &outcome.params,
        dataset,
        &AnalyzeOptions {
            seed: cfg.seed,
            ..AnalyzeOptions::default()
        },
    )?;
    if let Some(dir) = dir {
        let stamp = cfg.stamp();
        fs::write(dir.join("metrics.tsv"), format!("{stamp}\n{}", eval.report.to_tsv()))?;
        diag.write(dir, &stamp)?;
    }
    let metric = |m: &str, v: &str, k: Option<usize>| {
        eval.report
            .get(m, v, k)
            .ok_or_else(|| MbvrError::InvalidArgument(format!("report lacks {m}/{v}")))
    };
    Ok(VariantSummary {
        precision: metric("precision", "-", Some(TABLE_K))?,
        mrr_unnormalized: metric("mrr", "unnormalized", Some(TABLE_K))?,
        mrr_normalized: metric("mrr", "normalized", Some(TABLE_K))?,
        pnr: metric("pnr", "labeled_pairs", None)?,
        rvt_below_fraction: diag.rvt.below_fraction,
        rvt_median: diag.rvt.median,
        overlap: diag.overlap,
    })
}
