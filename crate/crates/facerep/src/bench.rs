//! Benchmark orchestration: the per-attribute per-representation SVM
//! sweep, best-layer selection, held-out evaluation, and report emission
//! with fixture comparisons.
//!
//! Accuracies in reports and fixtures are percentages (0..100), matching
//! the published tables; the svm layer itself works in fractions.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use facerep_core::netdef::TapPoint;
use facerep_core::svm::{self, LabeledFeatures, SvmModel, TrainOptions};

use crate::data::{AttributeTable, Split};
use crate::error::{Error, Result};
use crate::formats::FeatureRecord;

/// Representation names in sweep order (C2 first — the tie-break order).
pub fn rep_names() -> Vec<&'static str> {
    TapPoint::ALL.iter().map(|t| t.rep_name()).collect()
}

// ---------------------------------------------------------------------
// feature bank

/// In-memory feature cache: representation id -> image id -> vector.
/// Image ids are attribute-table row indices.
#[derive(Clone, Debug, Default)]
pub struct FeatureBank {
    per_rep: BTreeMap<u8, BTreeMap<u32, Vec<f32>>>,
}

impl FeatureBank {
    pub fn insert(&mut self, rep_id: u8, image_id: u32, values: Vec<f32>) {
        self.per_rep.entry(rep_id).or_default().insert(image_id, values);
    }

    pub fn get(&self, rep_id: u8, image_id: u32) -> Option<&Vec<f32>> {
        self.per_rep.get(&rep_id)?.get(&image_id)
    }

    pub fn from_records(records: Vec<FeatureRecord>) -> Self {
        let mut bank = FeatureBank::default();
        for r in records {
            bank.insert(r.rep_id, r.image_id, r.values);
        }
        bank
    }

    pub fn to_records(&self) -> Vec<FeatureRecord> {
        let mut out = Vec::new();
        for (&rep_id, per_image) in &self.per_rep {
            for (&image_id, values) in per_image {
                out.push(FeatureRecord { image_id, rep_id, values: values.clone() });
            }
        }
        out
    }

    /// Features of `rows` under one representation, with positioned
    /// errors for cache gaps.
    fn gather(&self, rep_id: u8, rep_name: &str, rows: &[usize]) -> Result<Vec<Vec<f32>>> {
        rows.iter()
            .map(|&row| {
                self.get(rep_id, row as u32).cloned().ok_or_else(|| {
                    Error::Core(facerep_core::Error::Data(format!(
                        "feature cache has no entry for image {row} under representation {rep_name}"
                    )))
                })
            })
            .collect()
    }
}

// ---------------------------------------------------------------------
// sweep

#[derive(Clone, Debug, PartialEq)]
pub enum CPolicy {
    Fixed(f32),
    /// Per-(attribute, representation) grid, chosen on the validation
    /// split.
    Grid(Vec<f32>),
}

impl Default for CPolicy {
    fn default() -> Self {
        CPolicy::Fixed(1.0)
    }
}

#[derive(Clone, Debug)]
pub struct SweepOptions {
    /// Split whose accuracy drives best-layer selection; training always
    /// happens on the train split.
    pub selection_split: Split,
    pub c_policy: CPolicy,
    pub seed: u64,
}

impl Default for SweepOptions {
    fn default() -> Self {
        SweepOptions { selection_split: Split::Train, c_policy: CPolicy::default(), seed: 0 }
    }
}

/// Outcome of the 40 x 7 sweep, retaining every trained model so the
/// evaluation stage can compute layer-wise means.
#[derive(Debug)]
pub struct SweepResult {
    pub attributes: Vec<String>,
    pub reps: Vec<String>,
    /// Selection-split accuracy (fraction), `[attribute][rep]`.
    pub selection_grid: Vec<Vec<f64>>,
    /// Chosen representation index per attribute.
    pub chosen: Vec<usize>,
    /// Attributes whose selection row had a tie at the maximum; the tie
    /// broke toward the earliest representation.
    pub ties: Vec<Vec<usize>>,
    pub models: Vec<Vec<SvmModel>>,
    pub selection_split: Split,
}

fn labels_for(table: &AttributeTable, attr: usize, rows: &[usize]) -> Vec<i8> {
    rows.iter().map(|&r| table.rows[r].1[attr]).collect()
}

/// Trains the full attribute x representation grid and picks the best
/// layer per attribute on the selection split (ties -> earlier layer).
pub fn sweep(bank: &FeatureBank, table: &AttributeTable, options: &SweepOptions) -> Result<SweepResult> {
    let train_rows = table.split_rows(Split::Train);
    if train_rows.is_empty() {
        return Err(Error::Protocol("train split is empty".into()));
    }
    if options.selection_split == Split::Test {
        return Err(Error::Protocol("selection on the test split is not allowed".into()));
    }
    let selection_rows = table.split_rows(options.selection_split);
    if selection_rows.is_empty() {
        return Err(Error::Protocol(format!(
            "selection split {:?} is empty",
            options.selection_split.name()
        )));
    }
    let grid_cs: Option<(&[f32], Vec<usize>)> = match &options.c_policy {
        CPolicy::Fixed(_) => None,
        CPolicy::Grid(cs) => {
            if cs.is_empty() {
                return Err(Error::Protocol("empty C grid".into()));
            }
            let val_rows = table.split_rows(Split::Val);
            if val_rows.is_empty() {
                return Err(Error::Protocol("C grid selection needs a validation split".into()));
            }
            Some((cs, val_rows))
        }
    };

    let reps: Vec<String> = rep_names().iter().map(|s| s.to_string()).collect();
    let mut selection_grid = Vec::with_capacity(table.attributes.len());
    let mut chosen = Vec::with_capacity(table.attributes.len());
    let mut ties = Vec::new();
    let mut models = Vec::with_capacity(table.attributes.len());

    for (attr_idx, attr) in table.attributes.iter().enumerate() {
        let train_labels = labels_for(table, attr_idx, &train_rows);
        let selection_labels = labels_for(table, attr_idx, &selection_rows);
        let mut row_acc = Vec::with_capacity(reps.len());
        let mut row_models = Vec::with_capacity(reps.len());
        for (rep_idx, tap) in TapPoint::ALL.iter().enumerate() {
            let rep_name = &reps[rep_idx];
            let train_feats = bank.gather(tap.rep_id(), rep_name, &train_rows)?;
            let train_data = LabeledFeatures::new(train_feats, train_labels.clone())
                .map_err(Error::Core)?;
            let train_opts = TrainOptions {
                seed: options.seed ^ ((attr_idx as u64) << 8) ^ rep_idx as u64,
                attribute: attr.clone(),
                representation: rep_name.clone(),
                ..TrainOptions::default()
            };
            let model = match (&options.c_policy, &grid_cs) {
                (CPolicy::Fixed(c), _) => svm::train(&train_data, *c, &train_opts)?,
                (CPolicy::Grid(_), Some((cs, val_rows))) => {
                    let val_feats = bank.gather(tap.rep_id(), rep_name, val_rows)?;
                    let val_labels = labels_for(table, attr_idx, val_rows);
                    let val_data = LabeledFeatures::new(val_feats, val_labels)?;
                    let mut best: Option<(f64, SvmModel)> = None;
                    for &c in *cs {
                        let m = svm::train(&train_data, c, &train_opts)?;
                        let acc = svm::accuracy(&m, &val_data)?;
                        // ties keep the earlier (smaller) C
                        if best.as_ref().map(|(b, _)| acc > *b).unwrap_or(true) {
                            best = Some((acc, m));
                        }
                    }
                    best.expect("grid is non-empty").1
                }
                (CPolicy::Grid(_), None) => unreachable!("validated above"),
            };
            let selection_feats = bank.gather(tap.rep_id(), rep_name, &selection_rows)?;
            let selection_data =
                LabeledFeatures::new(selection_feats, selection_labels.clone())?;
            row_acc.push(svm::accuracy(&model, &selection_data)?);
            row_models.push(model);
        }

        let best = row_acc.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let winners: Vec<usize> = row_acc
            .iter()
            .enumerate()
            .filter(|(_, &a)| a == best)
            .map(|(i, _)| i)
            .collect();
        if winners.len() > 1 {
            ties.push(vec![attr_idx]);
        }
        chosen.push(winners[0]);
        selection_grid.push(row_acc);
        models.push(row_models);
    }

    Ok(SweepResult {
        attributes: table.attributes.clone(),
        reps,
        selection_grid,
        chosen,
        ties,
        models,
        selection_split: options.selection_split,
    })
}

// ---------------------------------------------------------------------
// report

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportMeta {
    pub dataset: String,
    pub weights_hash: String,
    pub seed: u64,
    pub selection_split: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub meta: ReportMeta,
    pub attributes: Vec<String>,
    /// Chosen representation name per attribute.
    pub chosen: Vec<String>,
    /// Test accuracy (percent) of the chosen representation.
    pub accuracy_pct: Vec<f64>,
    pub overall_mean_pct: f64,
    pub reps: Vec<String>,
    /// Per-representation mean test accuracy (percent) over all
    /// attributes.
    pub layer_means_pct: Vec<f64>,
    /// Full test grid (percent), `[attribute][rep]`.
    pub grid_pct: Vec<Vec<f64>>,
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

impl BenchmarkReport {
    /// Report carrying externally supplied per-attribute percentages
    /// (fixture-consistency path); grid and layer means are empty.
    pub fn from_values(meta: ReportMeta, attributes: Vec<String>, accuracy_pct: Vec<f64>) -> Result<Self> {
        if attributes.len() != accuracy_pct.len() || attributes.is_empty() {
            return Err(Error::Protocol(format!(
                "{} attributes vs {} values",
                attributes.len(),
                accuracy_pct.len()
            )));
        }
        let overall = mean(&accuracy_pct);
        Ok(BenchmarkReport {
            meta,
            chosen: vec!["-".to_string(); attributes.len()],
            attributes,
            accuracy_pct,
            overall_mean_pct: overall,
            reps: rep_names().iter().map(|s| s.to_string()).collect(),
            layer_means_pct: Vec::new(),
            grid_pct: Vec::new(),
        })
    }
}

/// Evaluates the sweep's models on a held-out split.
pub fn evaluate(
    sweep: &SweepResult,
    bank: &FeatureBank,
    table: &AttributeTable,
    test_split: Split,
    meta: ReportMeta,
) -> Result<BenchmarkReport> {
    if test_split == sweep.selection_split || test_split == Split::Train {
        return Err(Error::Protocol(format!(
            "test split {:?} overlaps the training/selection protocol",
            test_split.name()
        )));
    }
    let test_rows = table.split_rows(test_split);
    if test_rows.is_empty() {
        return Err(Error::Protocol(format!("test split {:?} is empty", test_split.name())));
    }

    let mut grid_pct = Vec::with_capacity(sweep.attributes.len());
    let mut accuracy_pct = Vec::with_capacity(sweep.attributes.len());
    let mut chosen_names = Vec::with_capacity(sweep.attributes.len());
    for (attr_idx, _) in sweep.attributes.iter().enumerate() {
        let labels = labels_for(table, attr_idx, &test_rows);
        let mut row = Vec::with_capacity(sweep.reps.len());
        for (rep_idx, tap) in TapPoint::ALL.iter().enumerate() {
            let feats = bank.gather(tap.rep_id(), &sweep.reps[rep_idx], &test_rows)?;
            let data = LabeledFeatures::new(feats, labels.clone())?;
            let acc = svm::accuracy(&sweep.models[attr_idx][rep_idx], &data)?;
            row.push(acc * 100.0);
        }
        let pick = sweep.chosen[attr_idx];
        accuracy_pct.push(row[pick]);
        chosen_names.push(sweep.reps[pick].clone());
        grid_pct.push(row);
    }

    let layer_means_pct: Vec<f64> = (0..sweep.reps.len())
        .map(|rep| mean(&grid_pct.iter().map(|row| row[rep]).collect::<Vec<_>>()))
        .collect();
    let overall_mean_pct = mean(&accuracy_pct);
    Ok(BenchmarkReport {
        meta,
        attributes: sweep.attributes.clone(),
        chosen: chosen_names,
        accuracy_pct,
        overall_mean_pct,
        reps: sweep.reps.clone(),
        layer_means_pct,
        grid_pct,
    })
}

// ---------------------------------------------------------------------
// fixtures

/// Parsed `attribute,celeba,lfwa` fixture (per-attribute layout).
#[derive(Clone, Debug, PartialEq)]
pub struct AttributeFixture {
    pub rows: Vec<(String, f64, f64)>,
}

/// Parsed `source,celeba,lfwa` fixture (overall layout).
#[derive(Clone, Debug, PartialEq)]
pub struct OverallFixture {
    pub rows: Vec<(String, f64, f64)>,
}

fn parse_two_column_csv(path: &Path, expect_header: &str) -> Result<Vec<(String, f64, f64)>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| Error::parse(path, 1, "empty fixture"))?;
    if header.trim() != expect_header {
        return Err(Error::parse(
            path,
            1,
            format!("expected header {expect_header:?}, got {:?}", header.trim()),
        ));
    }
    let mut rows = Vec::new();
    for (idx, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split(',').map(str::trim).collect();
        if parts.len() != 3 {
            return Err(Error::parse(path, idx + 1, format!("expected 3 cells, got {}", parts.len())));
        }
        let a: f64 = parts[1]
            .parse()
            .map_err(|_| Error::parse(path, idx + 1, format!("bad number {:?}", parts[1])))?;
        let b: f64 = parts[2]
            .parse()
            .map_err(|_| Error::parse(path, idx + 1, format!("bad number {:?}", parts[2])))?;
        rows.push((parts[0].to_string(), a, b));
    }
    Ok(rows)
}

pub fn parse_attribute_fixture(path: &Path) -> Result<AttributeFixture> {
    Ok(AttributeFixture { rows: parse_two_column_csv(path, "attribute,celeba,lfwa")? })
}

pub fn parse_overall_fixture(path: &Path) -> Result<OverallFixture> {
    Ok(OverallFixture { rows: parse_two_column_csv(path, "source,celeba,lfwa")? })
}

/// Parsed layer-means fixture:
/// `source,c2,c3,c4,c5,c6,f1,f2`.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerFixture {
    pub rows: Vec<(String, Vec<f64>)>,
}

pub fn parse_layer_fixture(path: &Path) -> Result<LayerFixture> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or_else(|| Error::parse(path, 1, "empty fixture"))?;
    if header.trim() != "source,c2,c3,c4,c5,c6,f1,f2" {
        return Err(Error::parse(path, 1, format!("unexpected header {:?}", header.trim())));
    }
    let mut rows = Vec::new();
    for (idx, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split(',').map(str::trim).collect();
        if parts.len() != 8 {
            return Err(Error::parse(path, idx + 1, format!("expected 8 cells, got {}", parts.len())));
        }
        let vals = parts[1..]
            .iter()
            .map(|p| {
                p.parse::<f64>()
                    .map_err(|_| Error::parse(path, idx + 1, format!("bad number {p:?}")))
            })
            .collect::<Result<Vec<f64>>>()?;
        rows.push((parts[0].to_string(), vals));
    }
    Ok(LayerFixture { rows })
}

#[derive(Clone, Debug, PartialEq)]
pub struct DiffRow {
    pub name: String,
    pub report_value: f64,
    pub fixture_value: f64,
    pub delta: f64,
    pub pass: bool,
}

/// Per-attribute deltas against a per-attribute fixture; the fixture
/// column is chosen by the report's dataset name.
pub fn compare_fixture(
    report: &BenchmarkReport,
    fixture_path: &Path,
    tolerance: f64,
) -> Result<Vec<DiffRow>> {
    let fixture = parse_attribute_fixture(fixture_path)?;
    let column = match report.meta.dataset.to_ascii_lowercase().as_str() {
        "celeba" => 0usize,
        "lfwa" => 1,
        other => {
            return Err(Error::Fixture(format!(
                "dataset {other:?} has no column in an attribute fixture"
            )))
        }
    };
    let by_name: BTreeMap<&str, (f64, f64)> =
        fixture.rows.iter().map(|(n, a, b)| (n.as_str(), (*a, *b))).collect();
    let mut out = Vec::with_capacity(report.attributes.len());
    for (attr, &rv) in report.attributes.iter().zip(&report.accuracy_pct) {
        let &(a, b) = by_name.get(attr.as_str()).ok_or_else(|| {
            Error::Fixture(format!("fixture is missing attribute {attr:?}"))
        })?;
        let fv = if column == 0 { a } else { b };
        let delta = rv - fv;
        out.push(DiffRow {
            name: attr.clone(),
            report_value: rv,
            fixture_value: fv,
            delta,
            pass: delta.abs() <= tolerance,
        });
    }
    Ok(out)
}

// ---------------------------------------------------------------------
// emission

fn fmt(v: f64) -> String {
    format!("{v:.4}")
}

/// Per-attribute CSV: name, chosen representation, test accuracy.
pub fn emit_csv(report: &BenchmarkReport) -> String {
    let mut out = String::from("attribute,representation,accuracy_pct\n");
    for i in 0..report.attributes.len() {
        out.push_str(&format!(
            "{},{},{}\n",
            report.attributes[i],
            report.chosen[i],
            fmt(report.accuracy_pct[i])
        ));
    }
    out.push_str(&format!("OVERALL,-,{}\n", fmt(report.overall_mean_pct)));
    out
}

/// Per-attribute x per-representation grid CSV for external plotting.
pub fn emit_grid_csv(report: &BenchmarkReport) -> String {
    let mut out = String::from("attribute");
    for r in &report.reps {
        out.push(',');
        out.push_str(r);
    }
    out.push('\n');
    for (attr, row) in report.attributes.iter().zip(&report.grid_pct) {
        out.push_str(attr);
        for &v in row {
            out.push(',');
            out.push_str(&fmt(v));
        }
        out.push('\n');
    }
    out
}

pub fn emit_json(report: &BenchmarkReport) -> String {
    serde_json::to_string_pretty(report).expect("report serializes")
}

pub fn parse_report_json(text: &str) -> Result<BenchmarkReport> {
    serde_json::from_str(text)
        .map_err(|e| Error::Protocol(format!("malformed report JSON: {e}")))
}

pub fn emit_markdown(report: &BenchmarkReport) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "# Attribute benchmark ({})\n\nseed {}, weights {}, selection split {}\n\n",
        report.meta.dataset, report.meta.seed, report.meta.weights_hash, report.meta.selection_split
    ));
    out.push_str("## Per-attribute accuracy\n\n| attribute | representation | accuracy % |\n|---|---|---|\n");
    for i in 0..report.attributes.len() {
        out.push_str(&format!(
            "| {} | {} | {} |\n",
            report.attributes[i],
            report.chosen[i],
            fmt(report.accuracy_pct[i])
        ));
    }
    out.push_str(&format!("\n## Overall\n\nmean accuracy: {} %\n", fmt(report.overall_mean_pct)));
    if !report.layer_means_pct.is_empty() {
        out.push_str("\n## Layer-wise mean accuracy\n\n|");
        for r in &report.reps {
            out.push_str(&format!(" {r} |"));
        }
        out.push_str("\n|");
        for _ in &report.reps {
            out.push_str("---|");
        }
        out.push_str("\n|");
        for &v in &report.layer_means_pct {
            out.push_str(&format!(" {} |", fmt(v)));
        }
        out.push('\n');
    }
    out
}

/// Writes the JSON, CSV, grid-CSV and markdown renderings next to each
/// other under `dir` with a shared `stem`.
pub fn write_report(report: &BenchmarkReport, dir: &Path, stem: &str) -> Result<()> {
    let write = |ext: &str, content: String| -> Result<()> {
        let path = dir.join(format!("{stem}.{ext}"));
        fs::write(&path, content).map_err(|e| Error::io(path, e))
    };
    write("json", emit_json(report))?;
    write("csv", emit_csv(report))?;
    write("grid.csv", emit_grid_csv(report))?;
    write("md", emit_markdown(report))
}
