use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::infer::{argmax_classes, encode_subject, subset_logits};
use super::metrics::{region_dice, RegionSpec};
use super::subsets::subset_order;
use crate::data::{modality_names, MultimodalVolume};
use crate::error::{Error, Result};
use crate::networks::{AvailabilityMask, DcSegModel};
use crate::par;

/// Mean Dice over subjects for one modality subset.
#[derive(Debug, Clone, PartialEq)]
pub struct SubsetRow {
    pub mask: AvailabilityMask,
    /// One entry per region, in report region order.
    pub dice: Vec<f64>,
}

/// Dice of every non-empty modality subset and region.
#[derive(Debug, Clone, PartialEq)]
pub struct SubsetReport {
    pub modality_names: Vec<String>,
    pub regions: Vec<String>,
    pub rows: Vec<SubsetRow>,
    /// Arithmetic mean of `rows` per region.
    pub average: Vec<f64>,
    pub subject_count: usize,
}

impl SubsetReport {
    pub fn row(&self, mask: &AvailabilityMask) -> Option<&SubsetRow> {
        self.rows.iter().find(|r| &r.mask == mask)
    }

    pub fn region_index(&self, name: &str) -> Option<usize> {
        self.regions.iter().position(|r| r == name)
    }

    /// Mean Dice of `region` over all subsets with exactly `k` modalities.
    pub fn size_average(&self, region: usize, k: usize) -> Option<f64> {
        let vals: Vec<f64> = self
            .rows
            .iter()
            .filter(|r| r.mask.count() == k)
            .map(|r| r.dice[region])
            .collect();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    }

    /// Long-format CSV: one line per subset and region, then the averages
    /// with `-` in the modality columns.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        let header: Vec<String> = self.modality_names.iter().map(|n| n.to_lowercase()).collect();
        writeln!(out, "{},region,dice", header.join(",")).unwrap();
        for row in &self.rows {
            let flags: Vec<&str> = row.mask.as_slice().iter().map(|&b| if b { "1" } else { "0" }).collect();
            for (region, d) in self.regions.iter().zip(&row.dice) {
                writeln!(out, "{},{region},{d:.6}", flags.join(",")).unwrap();
            }
        }
        let dashes = vec!["-"; self.modality_names.len()].join(",");
        for (region, d) in self.regions.iter().zip(&self.average) {
            writeln!(out, "{dashes},{region},{d:.6}").unwrap();
        }
        out
    }

    /// Wide table with one row per subset, Dice in percent.
    pub fn to_markdown(&self) -> String {
        let mut out = String::new();
        let cols: Vec<String> = self
            .modality_names
            .iter()
            .cloned()
            .chain(self.regions.iter().map(|r| capitalize(r)))
            .collect();
        writeln!(out, "| {} |", cols.join(" | ")).unwrap();
        writeln!(out, "|{}", vec![":---:|"; cols.len()].concat()).unwrap();
        for row in &self.rows {
            let cells: Vec<String> = row
                .mask
                .as_slice()
                .iter()
                .map(|&b| if b { "●" } else { "○" }.to_string())
                .chain(row.dice.iter().map(|d| format!("{:.2}", d * 100.0)))
                .collect();
            writeln!(out, "| {} |", cells.join(" | ")).unwrap();
        }
        let mut cells = vec!["Average".to_string()];
        cells.extend(std::iter::repeat_n(String::new(), self.modality_names.len() - 1));
        cells.extend(self.average.iter().map(|d| format!("{:.2}", d * 100.0)));
        writeln!(out, "| {} |", cells.join(" | ")).unwrap();
        out
    }

    /// Writes `subset_report.csv` and `subset_report.md` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (name, text) in [("subset_report.csv", self.to_csv()), ("subset_report.md", self.to_markdown())] {
            let path = dir.join(name);
            fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }
}

fn capitalize(s: &str) -> String {
    let mut c = s.chars();
    c.next()
        .map(|f| f.to_uppercase().chain(c).collect())
        .unwrap_or_default()
}

/// Ground-truth nesting of regions: every region whose classes are a subset of
/// another's must be spatially contained in it.
pub fn check_region_nesting(subject: &MultimodalVolume, regions: &[RegionSpec]) -> Result<()> {
    for inner in regions {
        for outer in regions {
            if inner == outer || !inner.class_ids.iter().all(|c| outer.contains(*c)) {
                continue;
            }
            if subject.label.iter().any(|&c| inner.contains(c) && !outer.contains(c)) {
                return Err(Error::contract(format!(
                    "subject {}: region {} escapes {}",
                    subject.subject_id, inner.name, outer.name
                )));
            }
        }
    }
    Ok(())
}

/// Per-subject Dice for every subset (outer) and region (inner).
pub fn subject_subset_dice(
    model: &DcSegModel,
    subject: &MultimodalVolume,
    subsets: &[AvailabilityMask],
    regions: &[RegionSpec],
) -> Result<Vec<Vec<f64>>> {
    let enc = encode_subject(model, subject)?;
    subsets
        .iter()
        .map(|mask| {
            let pred = argmax_classes(&subset_logits(model, &enc, mask)?);
            regions.iter().map(|r| region_dice(&pred, &subject.label, r)).collect()
        })
        .collect()
}

/// Evaluates every non-empty modality subset on every subject; Dice is
/// averaged over subjects.
pub fn evaluate_all_subsets(
    model: &DcSegModel,
    dataset: &[MultimodalVolume],
    regions: &[RegionSpec],
) -> Result<SubsetReport> {
    evaluate_subsets(model, dataset, regions, subset_order(model.config().modality_count))
}

/// [`evaluate_all_subsets`] restricted to `subsets`, kept in the given order.
pub fn evaluate_subsets(
    model: &DcSegModel,
    dataset: &[MultimodalVolume],
    regions: &[RegionSpec],
    subsets: Vec<AvailabilityMask>,
) -> Result<SubsetReport> {
    if subsets.is_empty() {
        return Err(Error::contract("evaluation needs at least one subset"));
    }
    for mask in &subsets {
        mask.check_nonempty()?;
    }
    if dataset.is_empty() {
        return Err(Error::contract("evaluation needs at least one subject"));
    }
    if regions.is_empty() {
        return Err(Error::contract("evaluation needs at least one region"));
    }
    for s in dataset {
        check_region_nesting(s, regions)?;
    }
    let m = model.config().modality_count;
    let per_subject = par::map_slice(dataset, |s| subject_subset_dice(model, s, &subsets, regions))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;

    let n = dataset.len() as f64;
    let rows: Vec<SubsetRow> = subsets
        .into_iter()
        .enumerate()
        .map(|(i, mask)| SubsetRow {
            mask,
            dice: (0..regions.len())
                .map(|r| per_subject.iter().map(|s| s[i][r]).sum::<f64>() / n)
                .collect(),
        })
        .collect();
    let average = (0..regions.len())
        .map(|r| rows.iter().map(|row| row.dice[r]).sum::<f64>() / rows.len() as f64)
        .collect();
    Ok(SubsetReport {
        modality_names: modality_names(m),
        regions: regions.iter().map(|r| r.name.clone()).collect(),
        rows,
        average,
        subject_count: dataset.len(),
    })
}
