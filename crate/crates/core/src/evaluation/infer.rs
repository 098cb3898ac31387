//! Sliding-window inference with 50 % overlap and averaged logits.

use ndarray::{s, Array3, Array4, ArrayView3, Axis};

use crate::data::MultimodalVolume;
use crate::error::{Error, Result};
use crate::networks::{AvailabilityMask, DcSegModel};
use crate::params::Tensor;

/// Windows encoded together in one forward call.
const WINDOW_BATCH: usize = 8;

/// Window origins along an axis of length `n`: stride `side / 2`, the last
/// window flush with the end.
pub fn window_starts(n: usize, side: usize) -> Result<Vec<usize>> {
    if n < side {
        return Err(Error::CropTooLarge {
            crop: side,
            shape: [n, n, n],
        });
    }
    let step = (side / 2).max(1);
    let mut starts: Vec<usize> = (0..).map(|k| k * step).take_while(|&s| s + side < n).collect();
    starts.push(n - side);
    Ok(starts)
}

/// Anatomical encodings of every window of one subject, computed once and
/// shared by all modality subsets.
pub struct EncodedSubject {
    shape: [usize; 3],
    origins: Vec<[usize; 3]>,
    /// Per window chunk, per modality: `(b, C, d, d, d)`.
    chunks: Vec<Vec<Tensor>>,
}

impl EncodedSubject {
    pub fn window_count(&self) -> usize {
        self.origins.len()
    }
}

fn crop_batch(volume: &Array3<f32>, origins: &[[usize; 3]], side: usize) -> Tensor {
    let views: Vec<ArrayView3<f32>> = origins
        .iter()
        .map(|o| volume.slice(s![o[0]..o[0] + side, o[1]..o[1] + side, o[2]..o[2] + side]))
        .collect();
    ndarray::stack(Axis(0), &views)
        .expect("equal window shapes")
        .insert_axis(Axis(1))
        .into_dyn()
}

pub fn encode_subject(model: &DcSegModel, subject: &MultimodalVolume) -> Result<EncodedSubject> {
    let cfg = model.config();
    if subject.modality_count() != cfg.modality_count {
        return Err(Error::contract(format!(
            "subject {} has {} modalities, model expects {}",
            subject.subject_id,
            subject.modality_count(),
            cfg.modality_count
        )));
    }
    let shape = subject.shape();
    let side = cfg.patch_side;
    let starts: Vec<Vec<usize>> = shape.iter().map(|&n| window_starts(n, side)).collect::<Result<_>>()?;
    let mut origins = Vec::new();
    for &i in &starts[0] {
        for &j in &starts[1] {
            for &k in &starts[2] {
                origins.push([i, j, k]);
            }
        }
    }
    let chunks = origins
        .chunks(WINDOW_BATCH)
        .map(|chunk| {
            (0..cfg.modality_count)
                .map(|j| model.encode_anatomical(j, &crop_batch(&subject.volumes[j], chunk, side)))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;
    Ok(EncodedSubject { shape, origins, chunks })
}

/// Overlap-averaged class logits `(K, X, Y, Z)` for one subset.
pub fn subset_logits(model: &DcSegModel, enc: &EncodedSubject, mask: &AvailabilityMask) -> Result<Array4<f32>> {
    mask.check_nonempty()?;
    let side = model.config().patch_side;
    let k = model.config().class_count;
    let [x, y, z] = enc.shape;
    let mut sum = Array4::<f32>::zeros((k, x, y, z));
    let mut count = Array3::<u32>::zeros((x, y, z));
    for (chunk, anat) in enc.origins.chunks(WINDOW_BATCH).zip(&enc.chunks) {
        let logits = model.decode_fused(&model.fuse(anat, mask)?)?;
        for (b, o) in chunk.iter().enumerate() {
            let window = logits.index_axis(Axis(0), b);
            let mut dst = sum.slice_mut(s![.., o[0]..o[0] + side, o[1]..o[1] + side, o[2]..o[2] + side]);
            dst += &window.into_dimensionality::<ndarray::Ix4>().expect("rank-5 logits");
            count
                .slice_mut(s![o[0]..o[0] + side, o[1]..o[1] + side, o[2]..o[2] + side])
                .mapv_inplace(|c| c + 1);
        }
    }
    for mut class in sum.outer_iter_mut() {
        class.zip_mut_with(&count, |v, &c| *v /= c as f32);
    }
    Ok(sum)
}

/// Per-voxel argmax over classes; ties go to the lower class.
pub fn argmax_classes(logits: &Array4<f32>) -> Array3<u8> {
    let shape = &logits.shape()[1..];
    Array3::from_shape_fn((shape[0], shape[1], shape[2]), |(i, j, k)| {
        let mut best = 0;
        for c in 1..logits.shape()[0] {
            if logits[[c, i, j, k]] > logits[[best, i, j, k]] {
                best = c;
            }
        }
        best as u8
    })
}

/// Segments `subject` using only the modalities available in `mask`.
pub fn infer_subset(model: &DcSegModel, subject: &MultimodalVolume, mask: &AvailabilityMask) -> Result<Array3<u8>> {
    mask.check_nonempty()?;
    let enc = encode_subject(model, subject)?;
    Ok(argmax_classes(&subset_logits(model, &enc, mask)?))
}

/// Crop of side `model.patch_side` centred in `volume`, as `(1, 1, s, s, s)`.
pub(crate) fn center_crop(volume: &Array3<f32>, side: usize) -> Result<Tensor> {
    let sh = volume.shape();
    let origin: Vec<usize> = sh
        .iter()
        .map(|&n| {
            n.checked_sub(side).map(|r| r / 2).ok_or(Error::CropTooLarge {
                crop: side,
                shape: [sh[0], sh[1], sh[2]],
            })
        })
        .collect::<Result<_>>()?;
    Ok(crop_batch(volume, &[[origin[0], origin[1], origin[2]]], side))
}
