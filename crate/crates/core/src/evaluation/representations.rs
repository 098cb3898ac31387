//! Pooled representations for external embedding plots, and the alignment
//! statistics computed from them.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use ndarray::{Array1, Array4, Axis, Ix4};

use super::infer::center_crop;
use crate::data::{modality_names, MultimodalVolume};
use crate::error::{Error, Result};
use crate::losses::{cosine_similarity, ssim_channel_mean, DEFAULT_C1, DEFAULT_C2};
use crate::networks::DcSegModel;
use crate::par;

/// Encodings of one modality of one subject, taken from the centre crop.
#[derive(Debug, Clone, PartialEq)]
pub struct RepresentationRecord {
    pub subject_id: String,
    pub modality: String,
    /// Anatomical map `(C, d, d, d)`.
    pub anatomical: Array4<f64>,
    /// Modality vector of length `C_mod`.
    pub modality_vector: Array1<f64>,
}

impl RepresentationRecord {
    /// Spatial mean of each anatomical channel.
    pub fn pooled_anatomical(&self) -> Array1<f64> {
        let c = self.anatomical.shape()[0];
        self.anatomical
            .to_shape((c, self.anatomical.len() / c))
            .expect("contiguous map")
            .mean_axis(Axis(1))
            .expect("non-empty map")
    }
}

/// One record per (subject, modality), subjects outer.
pub fn encode_representations(model: &DcSegModel, dataset: &[MultimodalVolume]) -> Result<Vec<RepresentationRecord>> {
    let cfg = model.config();
    let names = modality_names(cfg.modality_count);
    let per_subject = par::map_slice(dataset, |s| -> Result<Vec<RepresentationRecord>> {
        if s.modality_count() != cfg.modality_count {
            return Err(Error::contract(format!("subject {} has the wrong modality count", s.subject_id)));
        }
        (0..cfg.modality_count)
            .map(|j| {
                let x = center_crop(&s.volumes[j], cfg.patch_side)?;
                let a = model.encode_anatomical(j, &x)?;
                let m = model.encode_modality(j, &x)?;
                Ok(RepresentationRecord {
                    subject_id: s.subject_id.clone(),
                    modality: names[j].clone(),
                    anatomical: a
                        .index_axis(Axis(0), 0)
                        .mapv(|v| v as f64)
                        .into_dimensionality::<Ix4>()
                        .expect("rank-5 encoding"),
                    modality_vector: m.index_axis(Axis(0), 0).iter().map(|&v| v as f64).collect(),
                })
            })
            .collect()
    });
    Ok(per_subject
        .into_iter()
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .flatten()
        .collect())
}

/// Embedding table: an `anatomical` and a `modality` line per record, padded
/// to a common width.
pub fn representations_csv(records: &[RepresentationRecord]) -> String {
    let pooled: Vec<Array1<f64>> = records.iter().map(|r| r.pooled_anatomical()).collect();
    let width = records
        .iter()
        .zip(&pooled)
        .map(|(r, p)| p.len().max(r.modality_vector.len()))
        .max()
        .unwrap_or(0);
    let mut out = String::from("subject_id,modality,kind");
    for i in 0..width {
        write!(out, ",v{i}").unwrap();
    }
    out.push('\n');
    for (r, p) in records.iter().zip(&pooled) {
        for (kind, v) in [("anatomical", p), ("modality", &r.modality_vector)] {
            write!(out, "{},{},{kind}", r.subject_id, r.modality).unwrap();
            for i in 0..width {
                match v.get(i) {
                    Some(x) => write!(out, ",{x:.6}").unwrap(),
                    None => out.push(','),
                }
            }
            out.push('\n');
        }
    }
    out
}

/// Encodes `dataset` and writes the embedding table to `out_path`.
pub fn export_representations(
    model: &DcSegModel,
    dataset: &[MultimodalVolume],
    out_path: &Path,
) -> Result<Vec<RepresentationRecord>> {
    let records = encode_representations(model, dataset)?;
    if let Some(parent) = out_path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(out_path, representations_csv(&records)).map_err(|e| Error::io(out_path, e))?;
    Ok(records)
}

/// How well representations group by subject (anatomical) and by modality.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AlignmentReport {
    /// Mean SSIM between anatomical maps of the same subject.
    pub intra_subject_ssim: f64,
    /// Mean SSIM between anatomical maps of different subjects.
    pub inter_subject_ssim: f64,
    /// Mean cosine between modality vectors of the same modality.
    pub intra_modality_cosine: f64,
    /// Mean cosine between modality vectors of different modalities.
    pub inter_modality_cosine: f64,
}

impl AlignmentReport {
    pub fn anatomical_gap(&self) -> f64 {
        self.intra_subject_ssim - self.inter_subject_ssim
    }

    pub fn modality_gap(&self) -> f64 {
        self.intra_modality_cosine - self.inter_modality_cosine
    }
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        f64::NAN
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// Pairwise statistics over all unordered record pairs. Anatomical pairs are
/// split by subject; modality pairs by modality, across distinct subjects
/// only for the intra-modality mean.
pub fn alignment_metrics(records: &[RepresentationRecord]) -> Result<AlignmentReport> {
    let n = records.len();
    let pairs: Vec<(usize, usize)> = (0..n).flat_map(|a| (a + 1..n).map(move |b| (a, b))).collect();
    let scored = par::map_slice(&pairs, |&(a, b)| -> Result<(f64, f64)> {
        let (ra, rb) = (&records[a], &records[b]);
        Ok((
            ssim_channel_mean(ra.anatomical.view(), rb.anatomical.view(), DEFAULT_C1, DEFAULT_C2)?,
            cosine_similarity(ra.modality_vector.view(), rb.modality_vector.view())?,
        ))
    });
    let (mut intra_s, mut inter_s, mut intra_m, mut inter_m) = (vec![], vec![], vec![], vec![]);
    for (&(a, b), r) in pairs.iter().zip(scored) {
        let (ssim, cos) = r?;
        let (ra, rb) = (&records[a], &records[b]);
        let same_subject = ra.subject_id == rb.subject_id;
        if same_subject {
            intra_s.push(ssim);
        } else {
            inter_s.push(ssim);
        }
        if ra.modality != rb.modality {
            inter_m.push(cos);
        } else if !same_subject {
            intra_m.push(cos);
        }
    }
    Ok(AlignmentReport {
        intra_subject_ssim: mean(&intra_s),
        inter_subject_ssim: mean(&inter_s),
        intra_modality_cosine: mean(&intra_m),
        inter_modality_cosine: mean(&inter_m),
    })
}
