//! Ranking metrics, the `R_vt` histogram and the positive/MS-negative overlap
//! statistic, plus a tab-separated report format.

use std::cmp::Ordering;
use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;

use crate::error::{MbvrError, Result};
use crate::losses::r_vt;
use crate::numcore::Tensor;

/// Ranked results for one query together with its relevance judgments.
#[derive(Debug, Clone, PartialEq)]
pub struct RankedRun {
    results: Vec<(u32, f64)>,
    judgments: HashMap<u32, u8>,
    relevant_min: u8,
}

impl RankedRun {
    /// `results` must be sorted by non-increasing score with unique ids.
    /// Unjudged ids have label 0. A result counts as relevant for precision
    /// and MRR when its label is at least 1; see
    /// [`RankedRun::with_relevance_threshold`].
    pub fn new(results: Vec<(u32, f64)>, judgments: HashMap<u32, u8>) -> Result<Self> {
        let mut seen = HashSet::with_capacity(results.len());
        for (i, &(id, score)) in results.iter().enumerate() {
            if score.is_nan() {
                return Err(MbvrError::InvalidArgument(format!("score of id {id} is NaN")));
            }
            if !seen.insert(id) {
                return Err(MbvrError::InvalidArgument(format!("id {id} appears twice in a run")));
            }
            if i > 0 && results[i - 1].1 < score {
                return Err(MbvrError::InvalidArgument(format!("scores increase at rank {}", i + 1)));
            }
        }
        Ok(RankedRun {
            results,
            judgments,
            relevant_min: 1,
        })
    }

    /// Sorts arbitrary `(id, score)` pairs by score descending, then id ascending.
    pub fn from_unsorted(mut results: Vec<(u32, f64)>, judgments: HashMap<u32, u8>) -> Result<Self> {
        results.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        RankedRun::new(results, judgments)
    }

    pub fn with_relevance_threshold(mut self, min_label: u8) -> Self {
        self.relevant_min = min_label;
        self
    }

    pub fn results(&self) -> &[(u32, f64)] {
        &self.results
    }

    pub fn label(&self, id: u32) -> u8 {
        self.judgments.get(&id).copied().unwrap_or(0)
    }

    fn relevant(&self, id: u32) -> bool {
        self.relevant_min > 0 && self.label(id) >= self.relevant_min
    }
}

fn check_k(k: usize) -> Result<()> {
    if k == 0 {
        return Err(MbvrError::InvalidArgument("K must be at least 1".into()));
    }
    Ok(())
}

/// Relevant results among the top `k`, divided by `k`. Missing ranks count as
/// irrelevant.
pub fn precision_at_k(run: &RankedRun, k: usize) -> Result<f64> {
    check_k(k)?;
    let hits = run.results.iter().take(k).filter(|(id, _)| run.relevant(*id)).count();
    Ok(hits as f64 / k as f64)
}

/// `Σ_{i ≤ k} rel(i) / i`, divided by `k` when `normalized`.
pub fn mrr_at_k(run: &RankedRun, k: usize, normalized: bool) -> Result<f64> {
    check_k(k)?;
    let total: f64 = run
        .results
        .iter()
        .take(k)
        .enumerate()
        .filter(|(_, (id, _))| run.relevant(*id))
        .map(|(i, _)| 1.0 / (i + 1) as f64)
        .sum();
    Ok(if normalized { total / k as f64 } else { total })
}

/// Mean of a per-run metric over several runs.
pub fn mean_over<F>(runs: &[RankedRun], metric: F) -> Result<f64>
where
    F: Fn(&RankedRun) -> Result<f64>,
{
    if runs.is_empty() {
        return Err(MbvrError::InvalidArgument("no runs to average".into()));
    }
    let mut total = 0.0;
    for r in runs {
        total += metric(r)?;
    }
    Ok(total / runs.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PnrValue {
    /// `concordant / discordant`; `+inf` when nothing is discordant.
    pub value: f64,
    pub concordant: u64,
    pub discordant: u64,
    /// Set when `value` is the infinite sentinel.
    pub infinite: bool,
}

/// Concordant over discordant ordered pairs, pooled across runs. A pair of
/// results with different labels is concordant when the higher label has the
/// strictly higher score; score ties count for neither side.
pub fn pnr(runs: &[RankedRun]) -> Result<PnrValue> {
    let (mut concordant, mut discordant) = (0u64, 0u64);
    for run in runs {
        let (c, d) = pnr_counts(run);
        concordant += c;
        discordant += d;
    }
    if concordant + discordant == 0 {
        return Err(MbvrError::Degenerate(
            "PNR undefined: no pair of differently labeled results with distinct scores".into(),
        ));
    }
    Ok(if discordant == 0 {
        PnrValue {
            value: f64::INFINITY,
            concordant,
            discordant,
            infinite: true,
        }
    } else {
        PnrValue {
            value: concordant as f64 / discordant as f64,
            concordant,
            discordant,
            infinite: false,
        }
    })
}

/// Counts in `O(n log n)`: group results by label, then for each label pair
/// count score orderings with binary search over the lower label's scores.
fn pnr_counts(run: &RankedRun) -> (u64, u64) {
    let mut by_label: HashMap<u8, Vec<f64>> = HashMap::new();
    for &(id, score) in &run.results {
        by_label.entry(run.label(id)).or_default().push(score);
    }
    for scores in by_label.values_mut() {
        scores.sort_by(f64::total_cmp);
    }
    let mut labels: Vec<u8> = by_label.keys().copied().collect();
    labels.sort_unstable();
    let (mut concordant, mut discordant) = (0u64, 0u64);
    for (i, hi) in labels.iter().enumerate() {
        for lo in &labels[..i] {
            let lower = &by_label[lo];
            for &s in &by_label[hi] {
                let below = lower.partition_point(|&x| x < s) as u64;
                let not_above = lower.partition_point(|&x| x <= s) as u64;
                concordant += below;
                discordant += lower.len() as u64 - not_above;
            }
        }
    }
    (concordant, discordant)
}

/// `P(ms ≥ pos)` over all (positive, MS-negative) pairs, ties weighted one
/// half: 0.5 means indistinguishable, 0 means the positives always win.
pub fn overlap_stat(pos_scores: &[f64], ms_scores: &[f64]) -> Result<f64> {
    if pos_scores.is_empty() || ms_scores.is_empty() {
        return Err(MbvrError::InvalidArgument("overlap_stat needs nonempty inputs".into()));
    }
    if pos_scores.iter().chain(ms_scores).any(|x| x.is_nan()) {
        return Err(MbvrError::InvalidArgument("overlap_stat inputs contain NaN".into()));
    }
    let mut ms = ms_scores.to_vec();
    ms.sort_by(f64::total_cmp);
    // Twice the weighted count, kept integral so the result is exact.
    let mut doubled: u128 = 0;
    for &p in pos_scores {
        let below = ms.partition_point(|&x| x < p);
        let not_above = ms.partition_point(|&x| x <= p);
        let above = ms.len() - not_above;
        let ties = not_above - below;
        doubled += 2 * above as u128 + ties as u128;
    }
    let pairs = pos_scores.len() as u128 * ms.len() as u128;
    Ok(doubled as f64 / (2 * pairs) as f64)
}

/// Fixed-width histogram whose bins `[edges[i], edges[i + 1])` span the data.
#[derive(Debug, Clone, PartialEq)]
pub struct Histogram {
    pub bin_edges: Vec<f64>,
    pub counts: Vec<u64>,
    pub total: u64,
}

impl Histogram {
    /// Bin `i` holds values with `floor(x / bin_width) == start + i`, where
    /// `start = floor(min / bin_width)`.
    pub fn from_values(values: &[f64], bin_width: f64) -> Result<Self> {
        if !(bin_width > 0.0 && bin_width.is_finite()) {
            return Err(MbvrError::InvalidArgument(format!(
                "bin width must be positive, got {bin_width}"
            )));
        }
        if values.is_empty() {
            return Err(MbvrError::InvalidArgument("histogram of no values".into()));
        }
        if values.iter().any(|x| !x.is_finite()) {
            return Err(MbvrError::InvalidArgument("histogram values must be finite".into()));
        }
        let slot = |x: f64| (x / bin_width).floor() as i64;
        let start = values.iter().map(|&x| slot(x)).min().expect("nonempty");
        let end = values.iter().map(|&x| slot(x)).max().expect("nonempty");
        let bins = (end - start + 1) as usize;
        if bins > 1_000_000 {
            return Err(MbvrError::InvalidArgument(format!(
                "{bins} bins requested; widen the bins"
            )));
        }
        let mut counts = vec![0u64; bins];
        for &x in values {
            counts[(slot(x) - start) as usize] += 1;
        }
        let bin_edges = (0..=bins).map(|i| (start + i as i64) as f64 * bin_width).collect();
        Ok(Histogram {
            bin_edges,
            counts,
            total: values.len() as u64,
        })
    }

    /// Index of the bin whose range contains `x`, if any.
    pub fn bin_of(&self, x: f64) -> Option<usize> {
        (0..self.counts.len()).find(|&i| self.bin_edges[i] <= x && x < self.bin_edges[i + 1])
    }

    /// Bin with the most mass (first on ties).
    pub fn mode_bin(&self) -> usize {
        let max = self.counts.iter().copied().max().unwrap_or(0);
        self.counts.iter().position(|&c| c == max).unwrap_or(0)
    }

    /// `lower\tupper\tcount` lines under a header.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("lower\tupper\tcount\n");
        for (i, c) in self.counts.iter().enumerate() {
            writeln!(out, "{}\t{}\t{c}", self.bin_edges[i], self.bin_edges[i + 1]).expect("string write");
        }
        out
    }

    /// Parses [`Histogram::to_tsv`] output; lines starting with `#` are skipped.
    pub fn from_tsv(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.starts_with('#'));
        if lines.next() != Some("lower\tupper\tcount") {
            return Err(MbvrError::InvalidArgument("histogram header missing".into()));
        }
        let mut bin_edges = Vec::new();
        let mut counts = Vec::new();
        for (n, line) in lines.enumerate() {
            let bad = || MbvrError::InvalidArgument(format!("malformed histogram line {}", n + 2));
            let fields: Vec<&str> = line.split('\t').collect();
            let [lo, hi, c] = fields[..] else { return Err(bad()) };
            let lo: f64 = lo.parse().map_err(|_| bad())?;
            let hi: f64 = hi.parse().map_err(|_| bad())?;
            if let Some(&last) = bin_edges.last() {
                if last != lo {
                    return Err(bad());
                }
                bin_edges.pop();
            }
            bin_edges.push(lo);
            bin_edges.push(hi);
            counts.push(c.parse::<u64>().map_err(|_| bad())?);
        }
        let total = counts.iter().sum();
        Ok(Histogram {
            bin_edges,
            counts,
            total,
        })
    }
}

/// Distribution of `R_vt` over a corpus.
#[derive(Debug, Clone, PartialEq)]
pub struct RvtSummary {
    pub histogram: Histogram,
    /// Videos whose ratio is undefined (text/fused cosine near zero).
    pub undefined: usize,
    pub threshold: f64,
    /// Fraction of defined ratios strictly below `threshold`.
    pub below_fraction: f64,
    pub median: f64,
    pub values: Vec<f64>,
}

pub const DEFAULT_RVT_THRESHOLD: f64 = 0.3;

/// `R_vt` for every row of the `[n, d]` text, vision and fused embeddings.
pub fn rvt_histogram(
    text: &Tensor,
    vision: &Tensor,
    fused: &Tensor,
    bin_width: f64,
    threshold: f64,
) -> Result<RvtSummary> {
    if text.dims2() != vision.dims2() || text.dims2() != fused.dims2() {
        return Err(MbvrError::Shape(
            "text, vision and fused embeddings differ in shape".into(),
        ));
    }
    if text.rows() == 0 || text.is_empty() {
        return Err(MbvrError::InvalidArgument("R_vt histogram of an empty corpus".into()));
    }
    let mut values = Vec::with_capacity(text.rows());
    let mut undefined = 0;
    for i in 0..text.rows() {
        match r_vt(text.row(i), vision.row(i), fused.row(i)) {
            Ok(x) => values.push(x),
            Err(MbvrError::Degenerate(_)) => undefined += 1,
            Err(e) => return Err(e),
        }
    }
    if values.is_empty() {
        return Err(MbvrError::Degenerate("R_vt is undefined for every video".into()));
    }
    let histogram = Histogram::from_values(&values, bin_width)?;
    let below = values.iter().filter(|&&x| x < threshold).count();
    Ok(RvtSummary {
        histogram,
        undefined,
        threshold,
        below_fraction: below as f64 / values.len() as f64,
        median: median(&values),
        values,
    })
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// One line of a metric report.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub metric: String,
    pub variant: String,
    pub k: Option<usize>,
    pub value: f64,
}

/// Rows with the fixed column contract `metric, variant, K, value`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricReport {
    pub rows: Vec<MetricRow>,
}

impl MetricReport {
    pub fn push(&mut self, metric: &str, variant: &str, k: Option<usize>, value: f64) {
        self.rows.push(MetricRow {
            metric: metric.to_string(),
            variant: variant.to_string(),
            k,
            value,
        });
    }

    pub fn get(&self, metric: &str, variant: &str, k: Option<usize>) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.metric == metric && r.variant == variant && r.k == k)
            .map(|r| r.value)
    }

    /// Tab-separated, with `-` for an absent K. Values use the shortest
    /// representation that parses back to the same bits.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("metric\tvariant\tK\tvalue\n");
        for r in &self.rows {
            let k = r.k.map_or_else(|| "-".to_string(), |k| k.to_string());
            writeln!(out, "{}\t{}\t{k}\t{}", r.metric, r.variant, r.value).expect("string write");
        }
        out
    }

    /// Parses [`MetricReport::to_tsv`] output; lines starting with `#` are skipped.
    pub fn from_tsv(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.starts_with('#'));
        if lines.next() != Some("metric\tvariant\tK\tvalue") {
            return Err(MbvrError::InvalidArgument("report header missing".into()));
        }
        let mut report = MetricReport::default();
        for (n, line) in lines.enumerate() {
            let bad = || MbvrError::InvalidArgument(format!("malformed report line {}", n + 2));
            let fields: Vec<&str> = line.split('\t').collect();
            let [metric, variant, k, value] = fields[..] else {
                return Err(bad());
            };
            let k = match k {
                "-" => None,
                k => Some(k.parse().map_err(|_| bad())?),
            };
            report.push(metric, variant, k, value.parse().map_err(|_| bad())?);
        }
        Ok(report)
    }
}

/// Descending by score, then ascending by id.
pub fn rank_order(a: &(u32, f64), b: &(u32, f64)) -> Ordering {
    b.1.total_cmp(&a.1).then(a.0.cmp(&b.0))
}
