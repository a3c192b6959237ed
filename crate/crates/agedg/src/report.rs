//! Evaluation reports, derived tables, and the results file.
//!
//! `evaluate` scores a model on every age group's test split in one pass
//! per domain. The table emitters turn a pile of [`RunRecord`]s into the
//! fixed layouts used in the write-up, as markdown or csv with identical
//! numeric cells. Records persist as line-delimited JSON behind a
//! schema-version header, floats bit-exact.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::algorithms::{batch_from_samples, AlgorithmId};
use crate::backbone::{forward, ModelState};
use crate::data::{AgeGroup, DomainSplit, Sample, DOMAIN_COUNT};
use crate::error::{AgedgError, Result};
use crate::harness::RunRecord;
use crate::metrics::{accuracy, ccc_or_zero, composite_loss, ShakeWeights};

/// Test-set scores for one age group.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainScores {
    pub arousal_ccc: f64,
    pub valence_ccc: f64,
    pub accuracy: f64,
    /// Composite loss with the three continuous terms at weight 1/3 each.
    pub loss: f64,
}

/// Per-domain test scores, indexed by age-group ordinal.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub domains: [DomainScores; DOMAIN_COUNT],
}

impl EvalReport {
    pub fn scores(&self, g: AgeGroup) -> &DomainScores {
        &self.domains[g.ordinal()]
    }

    /// Arithmetic mean of the five per-domain values, unrounded.
    pub fn mean(&self) -> DomainScores {
        let n = DOMAIN_COUNT as f64;
        DomainScores {
            arousal_ccc: self.domains.iter().map(|d| d.arousal_ccc).sum::<f64>() / n,
            valence_ccc: self.domains.iter().map(|d| d.valence_ccc).sum::<f64>() / n,
            accuracy: self.domains.iter().map(|d| d.accuracy).sum::<f64>() / n,
            loss: self.domains.iter().map(|d| d.loss).sum::<f64>() / n,
        }
    }
}

/// Scores `state` on every domain's test split. Whole-set CCC, not
/// batch-averaged; degenerate variance counts as correlation zero for
/// the CCC columns but still fails the loss, which needs real spread.
pub fn evaluate(state: &ModelState, data: &DomainSplit) -> Result<EvalReport> {
    let w = ShakeWeights::uniform();
    let mut domains = Vec::with_capacity(DOMAIN_COUNT);
    for g in AgeGroup::ALL {
        let test = &data.domain(g).test;
        if test.is_empty() {
            return Err(AgedgError::EmptyDomain {
                domain: g.to_string(),
                split: "test".into(),
            });
        }
        let refs: Vec<&Sample> = test.iter().collect();
        let batch = batch_from_samples(g, &refs)?;
        let pred = forward(state, &batch.inputs)?;
        let truth_val = batch.labels.valence.as_slice().expect("contiguous");
        let truth_ar = batch.labels.arousal.as_slice().expect("contiguous");
        let pred_val = pred.valence.as_slice().expect("contiguous");
        let pred_ar = pred.arousal.as_slice().expect("contiguous");
        domains.push(DomainScores {
            arousal_ccc: ccc_or_zero(truth_ar, pred_ar)?,
            valence_ccc: ccc_or_zero(truth_val, pred_val)?,
            accuracy: accuracy(&pred, &batch.labels)?,
            loss: composite_loss(&pred, &batch.labels, &w)?,
        });
    }
    let domains: [DomainScores; DOMAIN_COUNT] = domains.try_into().expect("five domains");
    Ok(EvalReport { domains })
}

/// Entry-wise loss increase of `without` over `all`, one value per
/// age group in ordinal order. Antisymmetric in its arguments.
pub fn loss_difference(without: &EvalReport, all: &EvalReport) -> [f64; DOMAIN_COUNT] {
    let mut row = [0.0; DOMAIN_COUNT];
    for (i, slot) in row.iter_mut().enumerate() {
        *slot = without.domains[i].loss - all.domains[i].loss;
    }
    row
}

// ---------------------------------------------------------------------------
// Table emission

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TableLayout {
    /// Algorithms x (Ar, Val, Acc) against the held-out domain, plus Mean.
    LooComparison,
    /// Four-domain configs against the all-domain config, full metric rows.
    FourVsFive,
    /// Loss increase per test domain when each domain is left out.
    LossDiff,
    /// Training-set sizes in thousands, one row per configuration.
    Sizes,
    /// Metric rows per training-subset configuration.
    Subset,
}

impl TableLayout {
    pub const ALL: [TableLayout; 5] = [
        TableLayout::LooComparison,
        TableLayout::FourVsFive,
        TableLayout::LossDiff,
        TableLayout::Sizes,
        TableLayout::Subset,
    ];

    pub fn id(self) -> &'static str {
        match self {
            TableLayout::LooComparison => "loo-comparison",
            TableLayout::FourVsFive => "four-vs-five",
            TableLayout::LossDiff => "loss-diff",
            TableLayout::Sizes => "sizes",
            TableLayout::Subset => "subset",
        }
    }
}

impl std::fmt::Display for TableLayout {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.id())
    }
}

impl std::str::FromStr for TableLayout {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        let t = s.trim().to_ascii_lowercase();
        Self::ALL
            .iter()
            .find(|l| l.id() == t)
            .copied()
            .ok_or_else(|| {
                format!(
                    "unknown table layout {s:?}, expected one of loo-comparison, four-vs-five, loss-diff, sizes, subset"
                )
            })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TableFormat {
    Markdown,
    Csv,
}

impl std::fmt::Display for TableFormat {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            TableFormat::Markdown => "markdown",
            TableFormat::Csv => "csv",
        })
    }
}

impl std::str::FromStr for TableFormat {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "markdown" | "md" => Ok(TableFormat::Markdown),
            "csv" => Ok(TableFormat::Csv),
            other => Err(format!("unknown table format {other:?}, expected markdown or csv")),
        }
    }
}

/// Renders `records` in the named layout. Pure in its inputs: ordering is
/// by age-group ordinal and alphabetical algorithm id, never file order.
pub fn emit_table(records: &[RunRecord], layout: TableLayout, format: TableFormat) -> Result<String> {
    if records.is_empty() {
        return Err(AgedgError::Config(format!(
            "table {layout}: no records to tabulate"
        )));
    }
    let grid = match layout {
        TableLayout::LooComparison => loo_comparison_grid(records)?,
        TableLayout::FourVsFive => four_vs_five_grid(records)?,
        TableLayout::LossDiff => loss_diff_grid(records)?,
        TableLayout::Sizes => sizes_grid(records)?,
        TableLayout::Subset => subset_grid(records)?,
    };
    match format {
        TableFormat::Markdown => Ok(render_markdown(&grid)),
        TableFormat::Csv => render_csv(&grid),
    }
}

struct Grid {
    header: Vec<String>,
    rows: Vec<Vec<String>>,
}

fn fmt2(x: f64) -> String {
    let s = format!("{x:.2}");
    if s == "-0.00" {
        "0.00".into()
    } else {
        s
    }
}

fn fmt_thousands(count: usize) -> String {
    if count == 0 {
        "0".into()
    } else {
        format!("{:.1}", count as f64 / 1000.0)
    }
}

fn group_label(g: AgeGroup) -> String {
    format!("[{g}]")
}

fn algorithm_of(rec: &RunRecord) -> AlgorithmId {
    rec.config.algorithm.algorithm
}

/// Age groups absent from the record's active training set, ordinal order.
fn excluded_groups(rec: &RunRecord) -> Vec<AgeGroup> {
    AgeGroup::ALL
        .iter()
        .copied()
        .filter(|g| !rec.config.active_training_domains.contains(g))
        .collect()
}

fn config_label(rec: &RunRecord) -> String {
    let excluded = excluded_groups(rec);
    if excluded.is_empty() {
        "All".into()
    } else {
        let parts: Vec<String> = excluded.into_iter().map(group_label).collect();
        format!("Without {}", parts.join(" & "))
    }
}

fn domain_header(first: &str, second: &str, with_tail: Option<&str>) -> Vec<String> {
    let mut h = vec![first.to_string(), second.to_string()];
    h.extend(AgeGroup::ALL.iter().map(|g| g.to_string()));
    if let Some(tail) = with_tail {
        h.push(tail.to_string());
    }
    h
}

/// Clusters leave-one-out records by algorithm, requiring one record per
/// held-out domain for every algorithm present.
fn loo_cells(
    records: &[RunRecord],
    layout: TableLayout,
) -> Result<BTreeMap<AlgorithmId, Vec<&RunRecord>>> {
    let mut by_alg: BTreeMap<AlgorithmId, Vec<Option<&RunRecord>>> = BTreeMap::new();
    for rec in records {
        let excluded = excluded_groups(rec);
        if excluded.len() != 1 {
            return Err(AgedgError::Config(format!(
                "table {layout}: record for {} trains on {} domains, need exactly four",
                config_label(rec),
                rec.config.active_training_domains.len()
            )));
        }
        let held = excluded[0];
        let slot = &mut by_alg
            .entry(algorithm_of(rec))
            .or_insert_with(|| vec![None; DOMAIN_COUNT])[held.ordinal()];
        if slot.is_some() {
            return Err(AgedgError::Config(format!(
                "table {layout}: duplicate record for {}/{}",
                algorithm_of(rec),
                group_label(held)
            )));
        }
        *slot = Some(rec);
    }
    let mut missing = Vec::new();
    let mut out = BTreeMap::new();
    for (alg, slots) in by_alg {
        let mut full = Vec::with_capacity(DOMAIN_COUNT);
        for (i, slot) in slots.into_iter().enumerate() {
            match slot {
                Some(rec) => full.push(rec),
                None => missing.push(format!("{alg}/{}", group_label(AgeGroup::ALL[i]))),
            }
        }
        if full.len() == DOMAIN_COUNT {
            out.insert(alg, full);
        }
    }
    if !missing.is_empty() {
        return Err(AgedgError::Config(format!(
            "table {layout}: missing cells: {}",
            missing.join(", ")
        )));
    }
    Ok(out)
}

fn loo_comparison_grid(records: &[RunRecord]) -> Result<Grid> {
    let by_alg = loo_cells(records, TableLayout::LooComparison)?;
    let mut rows = Vec::new();
    for (alg, recs) in by_alg {
        let held_scores: Vec<&DomainScores> = recs
            .iter()
            .enumerate()
            .map(|(i, rec)| rec.report.scores(AgeGroup::ALL[i]))
            .collect();
        let metrics: [(&str, fn(&DomainScores) -> f64); 3] = [
            ("Ar", |d| d.arousal_ccc),
            ("Val", |d| d.valence_ccc),
            ("Acc", |d| d.accuracy),
        ];
        for (k, (label, pick)) in metrics.into_iter().enumerate() {
            let mut row = vec![
                if k == 0 { alg.name().to_string() } else { String::new() },
                label.to_string(),
            ];
            let values: Vec<f64> = held_scores.iter().map(|d| pick(d)).collect();
            row.extend(values.iter().map(|&v| fmt2(v)));
            row.push(fmt2(values.iter().sum::<f64>() / values.len() as f64));
            rows.push(row);
        }
    }
    Ok(Grid {
        header: domain_header("Algorithm", "Eval. on", Some("Mean")),
        rows,
    })
}

/// Splits records into the five four-domain configs plus the all-domain
/// config, single algorithm only.
fn four_plus_all(
    records: &[RunRecord],
    layout: TableLayout,
) -> Result<(Vec<&RunRecord>, &RunRecord)> {
    let algs: std::collections::BTreeSet<AlgorithmId> =
        records.iter().map(algorithm_of).collect();
    if algs.len() > 1 {
        let names: Vec<&str> = algs.iter().map(|a| a.id()).collect();
        return Err(AgedgError::Config(format!(
            "table {layout}: records mix algorithms ({}), expected one",
            names.join(", ")
        )));
    }
    let mut without: Vec<Option<&RunRecord>> = vec![None; DOMAIN_COUNT];
    let mut all: Option<&RunRecord> = None;
    for rec in records {
        let excluded = excluded_groups(rec);
        match excluded.len() {
            0 => {
                if all.is_some() {
                    return Err(AgedgError::Config(format!(
                        "table {layout}: duplicate record for All"
                    )));
                }
                all = Some(rec);
            }
            1 => {
                let slot = &mut without[excluded[0].ordinal()];
                if slot.is_some() {
                    return Err(AgedgError::Config(format!(
                        "table {layout}: duplicate record for {}",
                        config_label(rec)
                    )));
                }
                *slot = Some(rec);
            }
            _ => {
                return Err(AgedgError::Config(format!(
                    "table {layout}: record for {} fits neither a leave-one-out nor an all-domain run",
                    config_label(rec)
                )));
            }
        }
    }
    let mut missing: Vec<String> = without
        .iter()
        .enumerate()
        .filter(|(_, s)| s.is_none())
        .map(|(i, _)| format!("Without {}", group_label(AgeGroup::ALL[i])))
        .collect();
    if all.is_none() {
        missing.push("All".into());
    }
    if !missing.is_empty() {
        return Err(AgedgError::Config(format!(
            "table {layout}: missing cells: {}",
            missing.join(", ")
        )));
    }
    let without: Vec<&RunRecord> = without.into_iter().map(|s| s.expect("checked")).collect();
    Ok((without, all.expect("checked")))
}

fn metric_block(rows: &mut Vec<Vec<String>>, label: &str, report: &EvalReport, with_loss: bool) {
    let mut metrics: Vec<(&str, fn(&DomainScores) -> f64)> = vec![
        ("Arousal", |d| d.arousal_ccc),
        ("Valence", |d| d.valence_ccc),
        ("Accuracy", |d| d.accuracy),
    ];
    if with_loss {
        metrics.push(("Loss", |d| d.loss));
    }
    for (k, (name, pick)) in metrics.into_iter().enumerate() {
        let mut row = vec![
            if k == 0 { label.to_string() } else { String::new() },
            name.to_string(),
        ];
        row.extend(report.domains.iter().map(|d| fmt2(pick(d))));
        rows.push(row);
    }
}

fn four_vs_five_grid(records: &[RunRecord]) -> Result<Grid> {
    let (without, all) = four_plus_all(records, TableLayout::FourVsFive)?;
    let mut rows = Vec::new();
    for (i, rec) in without.iter().enumerate() {
        metric_block(
            &mut rows,
            &format!("Without {}", group_label(AgeGroup::ALL[i])),
            &rec.report,
            true,
        );
    }
    metric_block(&mut rows, "All", &all.report, true);
    Ok(Grid {
        header: domain_header("Training domains", "Eval. on", None),
        rows,
    })
}

fn loss_diff_grid(records: &[RunRecord]) -> Result<Grid> {
    let (without, all) = four_plus_all(records, TableLayout::LossDiff)?;
    let mut rows = Vec::new();
    for (i, rec) in without.iter().enumerate() {
        let diff = loss_difference(&rec.report, &all.report);
        let mut row = vec![
            format!("Without {}", group_label(AgeGroup::ALL[i])),
            "+Loss".to_string(),
        ];
        row.extend(diff.iter().map(|&v| fmt2(v)));
        rows.push(row);
    }
    Ok(Grid {
        header: domain_header("Training domains", "Eval. on", None),
        rows,
    })
}

/// Sort key: fewer exclusions first, then excluded ordinals ascending.
fn subset_order(rec: &RunRecord) -> (usize, Vec<usize>) {
    let ex = excluded_groups(rec);
    (ex.len(), ex.into_iter().map(|g| g.ordinal()).collect())
}

fn sizes_grid(records: &[RunRecord]) -> Result<Grid> {
    let mut ordered: Vec<&RunRecord> = records.iter().collect();
    ordered.sort_by_key(|r| subset_order(r));
    let mut rows: Vec<Vec<String>> = Vec::new();
    for rec in ordered {
        let mut row = vec![config_label(rec)];
        row.extend(rec.train_sizes.iter().map(|&n| fmt_thousands(n)));
        row.push(fmt_thousands(rec.train_sizes.iter().sum()));
        if rows.last() != Some(&row) {
            rows.push(row);
        }
    }
    let mut header = vec!["Configuration".to_string()];
    header.extend(AgeGroup::ALL.iter().map(|g| g.to_string()));
    header.push("Total".into());
    Ok(Grid { header, rows })
}

fn subset_grid(records: &[RunRecord]) -> Result<Grid> {
    let algs: std::collections::BTreeSet<AlgorithmId> =
        records.iter().map(algorithm_of).collect();
    if algs.len() > 1 {
        let names: Vec<&str> = algs.iter().map(|a| a.id()).collect();
        return Err(AgedgError::Config(format!(
            "table subset: records mix algorithms ({}), expected one",
            names.join(", ")
        )));
    }
    let mut ordered: Vec<&RunRecord> = records.iter().collect();
    ordered.sort_by_key(|r| subset_order(r));
    let mut rows = Vec::new();
    for rec in ordered {
        metric_block(&mut rows, &config_label(rec), &rec.report, false);
    }
    Ok(Grid {
        header: domain_header("Training domains", "Eval. on", None),
        rows,
    })
}

fn render_markdown(grid: &Grid) -> String {
    let mut out = String::new();
    out.push_str(&format!("| {} |\n", grid.header.join(" | ")));
    out.push_str(&format!(
        "|{}\n",
        " --- |".repeat(grid.header.len())
    ));
    for row in &grid.rows {
        out.push_str(&format!("| {} |\n", row.join(" | ")));
    }
    out
}

fn render_csv(grid: &Grid) -> Result<String> {
    let mut wtr = csv::Writer::from_writer(Vec::new());
    wtr.write_record(&grid.header)?;
    for row in &grid.rows {
        wtr.write_record(row)?;
    }
    let bytes = wtr
        .into_inner()
        .map_err(|e| AgedgError::Config(format!("csv buffer: {e}")))?;
    String::from_utf8(bytes).map_err(|e| AgedgError::Config(format!("csv utf8: {e}")))
}

// ---------------------------------------------------------------------------
// Results file

const RECORDS_SCHEMA: &str = "agedg-records";
const RECORDS_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct RecordsHeader {
    schema: String,
    version: u32,
}

/// Appends `records` to the line-delimited results file at `path`,
/// writing the schema header first when the file is new or empty. An
/// existing file must carry a matching header.
pub fn persist_records(records: &[RunRecord], path: &Path) -> Result<()> {
    let has_content = fs::metadata(path).map(|m| m.len() > 0).unwrap_or(false);
    if has_content {
        let text = fs::read_to_string(path)
            .map_err(|e| AgedgError::io(format!("reading {}", path.display()), e))?;
        let first = text.lines().next().unwrap_or("");
        check_header(first)?;
    }
    let mut file = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| AgedgError::io(format!("opening {}", path.display()), e))?;
    let mut buf = String::new();
    if !has_content {
        let header = RecordsHeader {
            schema: RECORDS_SCHEMA.into(),
            version: RECORDS_VERSION,
        };
        buf.push_str(&serde_json::to_string(&header)?);
        buf.push('\n');
    }
    for rec in records {
        buf.push_str(&serde_json::to_string(rec)?);
        buf.push('\n');
    }
    file.write_all(buf.as_bytes())
        .map_err(|e| AgedgError::io(format!("writing {}", path.display()), e))?;
    Ok(())
}

fn check_header(line: &str) -> Result<()> {
    let header: RecordsHeader = serde_json::from_str(line)
        .map_err(|e| AgedgError::Records(format!("line 1: bad header: {e}")))?;
    if header.schema != RECORDS_SCHEMA {
        return Err(AgedgError::Records(format!(
            "line 1: schema {:?}, expected {RECORDS_SCHEMA:?}",
            header.schema
        )));
    }
    if header.version != RECORDS_VERSION {
        return Err(AgedgError::Records(format!(
            "line 1: version mismatch: file has {}, this build reads {RECORDS_VERSION}",
            header.version
        )));
    }
    Ok(())
}

/// Loads every record from a results file written by [`persist_records`].
pub fn load_records(path: &Path) -> Result<Vec<RunRecord>> {
    let text = fs::read_to_string(path)
        .map_err(|e| AgedgError::io(format!("reading {}", path.display()), e))?;
    let mut lines = text.lines();
    let first = lines
        .next()
        .ok_or_else(|| AgedgError::Records("empty results file, expected a header line".into()))?;
    check_header(first)?;
    let mut records = Vec::new();
    for (idx, line) in lines.enumerate() {
        let lineno = idx + 2;
        if line.trim().is_empty() {
            return Err(AgedgError::Records(format!("line {lineno}: blank line")));
        }
        let rec: RunRecord = serde_json::from_str(line)
            .map_err(|e| AgedgError::Records(format!("line {lineno}: {e}")))?;
        records.push(rec);
    }
    Ok(records)
}
