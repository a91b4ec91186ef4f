use ndarray::{Array3, Array4};

use super::{Result, TrainError};
use crate::baselines::quantize;
use crate::dataset::{collapse_time, expand_time, Clip, CollapsedSample, TARGET_FRAMES};
use crate::tensor_nn::{crop_spatial, pad_spatial, unet_forward, CropRecord, Real, Tensor, UNetParams};

/// Network-ready batch: collapsed, padded inputs and collapsed targets.
#[derive(Debug, Clone)]
pub struct Batch<T> {
    /// (n, 12 * c, H', W'), padded to the network's spatial multiple.
    pub input: Tensor<T>,
    /// (n, 3 * c, h, w), unpadded.
    pub target: Tensor<T>,
    pub crop: CropRecord,
}

fn collapsed_values<T: Real>(frames: &Array4<u8>) -> Vec<T> {
    collapse_time(frames.view())
        .data
        .iter()
        .map(|&v| T::from_u8(v).unwrap())
        .collect()
}

/// Stacks clips into a batch. All clips must share the same grid.
pub fn clips_to_batch<T: Real>(clips: &[&Clip], spatial_multiple: usize) -> Result<Batch<T>> {
    let first = clips.first().ok_or(TrainError::EmptyClips("batch"))?;
    let (ti, c, h, w) = first.input.dim();
    let (tt, _, _, _) = first.target.dim();
    let mut inputs = Vec::with_capacity(clips.len() * ti * c * h * w);
    let mut targets = Vec::with_capacity(clips.len() * tt * c * h * w);
    for clip in clips {
        if clip.input.dim() != (ti, c, h, w) || clip.target.dim() != (tt, c, h, w) {
            return Err(TrainError::Shape(format!(
                "clip {:?} has grid {:?}, batch uses {:?}",
                clip.spec,
                clip.input.dim(),
                (ti, c, h, w)
            )));
        }
        inputs.extend(collapsed_values::<T>(&clip.input));
        targets.extend(collapsed_values::<T>(&clip.target));
    }
    let n = clips.len();
    let input = Tensor::new(&[n, ti * c, h, w], inputs)?;
    let (input, crop) = pad_spatial(&input, spatial_multiple)?;
    Ok(Batch {
        input,
        target: Tensor::new(&[n, tt * c, h, w], targets)?,
        crop,
    })
}

fn to_frames<T: Real>(output: &Tensor<T>, index: usize, channels: usize) -> Result<Array4<u8>> {
    let (_, k, h, w) = output.dims4()?;
    let plane = k * h * w;
    let values: Vec<u8> = output.data()[index * plane..(index + 1) * plane]
        .iter()
        .map(|v| quantize(v.to_f64().unwrap_or(f64::NAN)))
        .collect();
    let sample = CollapsedSample {
        data: Array3::from_shape_vec((k, h, w), values).expect("plane sized"),
        t: TARGET_FRAMES,
        c: channels,
    };
    Ok(expand_time(sample)?)
}

/// Predicts the 3 target frames of each clip: collapse, pad, run the
/// network, crop, expand, then clamp to [0, 255] and round half-up.
pub fn predict_batch<T: Real>(params: &UNetParams<T>, clips: &[&Clip]) -> Result<Vec<Array4<u8>>> {
    let Some(first) = clips.first() else {
        return Ok(Vec::new());
    };
    let channels = first.channels();
    if params.config.out_channels != TARGET_FRAMES * channels {
        return Err(TrainError::Shape(format!(
            "network emits {} channels, {TARGET_FRAMES} frames x {channels} channels needed",
            params.config.out_channels
        )));
    }
    let batch = clips_to_batch::<T>(clips, params.config.spatial_multiple())?;
    let output = crop_spatial(&unet_forward(params, &batch.input)?, batch.crop)?;
    (0..clips.len()).map(|i| to_frames(&output, i, channels)).collect()
}

pub fn predict<T: Real>(params: &UNetParams<T>, clip: &Clip) -> Result<Array4<u8>> {
    Ok(predict_batch(params, &[clip])?.remove(0))
}
