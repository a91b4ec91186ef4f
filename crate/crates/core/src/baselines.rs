//! Statistical predictors: per-slot averages over training days, persistence
//! and the all-zero forecast.

use std::collections::BTreeSet;
use std::path::Path;

use ndarray::{s, Array3, Array4, ArrayView3, Axis};
use rayon::prelude::*;
use thiserror::Error;

use crate::dataset::{Clip, ClipSpec, TARGET_FRAMES};
use crate::movie_store::{ingest, Movie, MovieMeta, StoreError};

/// Date field used when a slot model is written as a TMM1 file.
pub const MODEL_DATE: &str = "MODEL";

#[derive(Debug, Error)]
pub enum BaselineError {
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("no training days")]
    NoTrainingDays,
    #[error("empty slot list")]
    NoSlots,
    #[error("slot {0} has no observations")]
    EmptySlot(usize),
    #[error("slot {0} is not covered by the model")]
    UncoveredSlot(usize),
    #[error("grid mismatch: expected {expected:?}, got {actual:?}")]
    ShapeMismatch {
        expected: (usize, usize, usize),
        actual: (usize, usize, usize),
    },
    #[error("only models over slots 0..n can be saved")]
    NonContiguousSlots,
}

pub type Result<T> = std::result::Result<T, BaselineError>;

/// Rounds half-up and clamps to the u8 range. NaN maps to 0.
pub fn quantize(value: f64) -> u8 {
    if value.is_nan() {
        return 0;
    }
    (value + 0.5).floor().clamp(0.0, 255.0) as u8
}

/// Per-slot mean frames, held as exact integer sums and day counts.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SlotAverageModel {
    slots: Vec<usize>,
    grid: (usize, usize, usize),
    sums: Vec<u64>,
    counts: Vec<u64>,
}

impl SlotAverageModel {
    fn empty(slots: Vec<usize>, grid: (usize, usize, usize)) -> Self {
        let len = grid.0 * grid.1 * grid.2;
        Self {
            sums: vec![0; slots.len() * len],
            counts: vec![0; slots.len()],
            slots,
            grid,
        }
    }

    fn frame_len(&self) -> usize {
        self.grid.0 * self.grid.1 * self.grid.2
    }

    /// Adds every covered slot of one day.
    fn accumulate(&mut self, movie: &Movie) -> Result<()> {
        let h = movie.header();
        let grid = (h.c, h.h, h.w);
        if grid != self.grid {
            return Err(BaselineError::ShapeMismatch {
                expected: self.grid,
                actual: grid,
            });
        }
        let len = self.frame_len();
        for (i, &slot) in self.slots.iter().enumerate() {
            if slot >= h.t {
                continue;
            }
            let block = movie.read_frames(slot, 1)?;
            let frame = block.frames.as_slice().expect("fresh read is contiguous");
            for (acc, &v) in self.sums[i * len..(i + 1) * len].iter_mut().zip(frame) {
                *acc += v as u64;
            }
            self.counts[i] += 1;
        }
        Ok(())
    }

    fn merge(mut self, other: &Self) -> Self {
        debug_assert_eq!(self.slots, other.slots);
        for (a, b) in self.sums.iter_mut().zip(&other.sums) {
            *a += b;
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        self
    }

    pub fn slots(&self) -> &[usize] {
        &self.slots
    }

    /// (c, h, w) of the modelled frames.
    pub fn grid(&self) -> (usize, usize, usize) {
        self.grid
    }

    pub fn count(&self, slot: usize) -> Option<u64> {
        self.slot_index(slot).map(|i| self.counts[i])
    }

    pub fn sums(&self, slot: usize) -> Option<&[u64]> {
        let len = self.frame_len();
        self.slot_index(slot).map(|i| &self.sums[i * len..(i + 1) * len])
    }

    fn slot_index(&self, slot: usize) -> Option<usize> {
        self.slots.binary_search(&slot).ok()
    }

    /// Mean frame (c, h, w) for `slot`.
    pub fn mean(&self, slot: usize) -> Result<Array3<f64>> {
        let i = self.slot_index(slot).ok_or(BaselineError::UncoveredSlot(slot))?;
        let count = self.counts[i];
        if count == 0 {
            return Err(BaselineError::EmptySlot(slot));
        }
        let len = self.frame_len();
        let means: Vec<f64> = self.sums[i * len..(i + 1) * len]
            .iter()
            .map(|&s| s as f64 / count as f64)
            .collect();
        Ok(Array3::from_shape_vec(self.grid, means).expect("grid sized"))
    }

    /// Writes rounded means as a TMM1 file with one frame per slot.
    pub fn save(&self, path: &Path, city: &str) -> Result<()> {
        if self.slots.iter().enumerate().any(|(i, &s)| i != s) {
            return Err(BaselineError::NonContiguousSlots);
        }
        let (c, h, w) = self.grid;
        let mut frames = Array4::<u8>::zeros((self.slots.len(), c, h, w));
        for (i, &slot) in self.slots.iter().enumerate() {
            let mean = self.mean(slot)?;
            frames
                .index_axis_mut(Axis(0), i)
                .zip_mut_with(&mean, |o, &m| *o = quantize(m));
        }
        ingest(frames.view(), &MovieMeta::new(city, MODEL_DATE), path)?;
        Ok(())
    }

    /// Loads a saved model; slot `i` is frame `i` with a day count of one.
    pub fn load(path: &Path) -> Result<Self> {
        let movie = Movie::open(path)?;
        let h = movie.header();
        let mut model = Self::empty((0..h.t).collect(), (h.c, h.h, h.w));
        model.accumulate(&movie)?;
        Ok(model)
    }
}

/// Averages the listed slots over all training days. Days are accumulated in
/// parallel and merged by integer addition, so the result does not depend on
/// day order or thread count.
pub fn time_slot_average(train_movies: &[&Movie], slots: &BTreeSet<usize>) -> Result<SlotAverageModel> {
    let first = train_movies.first().ok_or(BaselineError::NoTrainingDays)?;
    if slots.is_empty() {
        return Err(BaselineError::NoSlots);
    }
    let h = first.header();
    let grid = (h.c, h.h, h.w);
    let slot_list: Vec<usize> = slots.iter().copied().collect();
    let partials = train_movies
        .par_iter()
        .map(|movie| {
            let mut partial = SlotAverageModel::empty(slot_list.clone(), grid);
            partial.accumulate(movie)?;
            Ok(partial)
        })
        .collect::<Result<Vec<_>>>()?;
    let model = partials
        .iter()
        .fold(SlotAverageModel::empty(slot_list, grid), |acc, p| acc.merge(p));
    if let Some(i) = model.counts.iter().position(|&n| n == 0) {
        return Err(BaselineError::EmptySlot(model.slots[i]));
    }
    Ok(model)
}

fn crop(frame: ArrayView3<f64>, spec: &ClipSpec) -> Array3<f64> {
    match spec.region {
        Some(r) => frame
            .slice(s![.., r.row0..r.row0 + r.rows, r.col0..r.col0 + r.cols])
            .to_owned(),
        None => frame.to_owned(),
    }
}

/// Predicts the 3 target frames of `spec` from the slot means.
pub fn predict_slot_average(model: &SlotAverageModel, spec: &ClipSpec) -> Result<Array4<u8>> {
    let means = (0..TARGET_FRAMES)
        .map(|j| model.mean(spec.prediction_slot() + j).map(|m| crop(m.view(), spec)))
        .collect::<Result<Vec<_>>>()?;
    let (c, h, w) = means[0].dim();
    let mut out = Array4::<u8>::zeros((TARGET_FRAMES, c, h, w));
    for (mut frame, mean) in out.outer_iter_mut().zip(&means) {
        frame.zip_mut_with(mean, |o, &m| *o = quantize(m));
    }
    Ok(out)
}

/// Repeats the last input frame.
pub fn persistence(clip: &Clip) -> Array4<u8> {
    let last = clip.input.index_axis(Axis(0), clip.input.dim().0 - 1);
    let (c, h, w) = last.dim();
    let mut out = Array4::<u8>::zeros((TARGET_FRAMES, c, h, w));
    for mut frame in out.outer_iter_mut() {
        frame.assign(&last);
    }
    out
}

pub fn zero_baseline(clip: &Clip) -> Array4<u8> {
    Array4::zeros(clip.target.raw_dim())
}
