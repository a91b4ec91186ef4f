//! Activity masks: a pixel is active when any scanned value at it, in any
//! channel, is strictly greater than the threshold. Threshold 0 therefore
//! marks exactly the pixels that are not always zero.

use std::path::Path;

use ndarray::{Array2, Array4, ArrayView4, Axis, Zip};
use thiserror::Error;

use crate::movie_store::{ingest, Movie, MovieMeta, StoreError};

pub const MASK_DATE: &str = "MASK";

#[derive(Debug, Error)]
pub enum MaskError {
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("no movies to scan")]
    NoMovies,
    #[error("shape mismatch: mask is {mask:?}, frames are {frames:?}")]
    ShapeMismatch {
        mask: (usize, usize),
        frames: (usize, usize),
    },
    #[error("not a mask file: {0}")]
    NotAMask(String),
}

pub type Result<T> = std::result::Result<T, MaskError>;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    pub active: Array2<bool>,
    pub threshold: u8,
    /// Number of frames scanned.
    pub source_span: usize,
}

impl Mask {
    fn new(h: usize, w: usize, threshold: u8) -> Self {
        Self {
            active: Array2::from_elem((h, w), false),
            threshold,
            source_span: 0,
        }
    }

    /// Marks pixels of `frames` (t, c, h, w) above the threshold.
    pub fn scan(&mut self, frames: ArrayView4<u8>) -> Result<()> {
        let (t, _, h, w) = frames.dim();
        if (h, w) != self.active.dim() {
            return Err(MaskError::ShapeMismatch {
                mask: self.active.dim(),
                frames: (h, w),
            });
        }
        let threshold = self.threshold;
        for frame in frames.outer_iter() {
            for channel in frame.outer_iter() {
                Zip::from(&mut self.active)
                    .and(&channel)
                    .for_each(|a, &v| *a |= v > threshold);
            }
        }
        self.source_span += t;
        Ok(())
    }

    pub fn active_count(&self) -> usize {
        self.active.iter().filter(|&&a| a).count()
    }

    /// Writes the mask as a TMM1 file with t = c = 1 and values {0, 255}.
    pub fn save(&self, path: &Path, city: &str) -> Result<()> {
        let (h, w) = self.active.dim();
        let frames = Array4::from_shape_fn((1, 1, h, w), |(_, _, y, x)| {
            if self.active[[y, x]] {
                255u8
            } else {
                0
            }
        });
        ingest(frames.view(), &MovieMeta::new(city, MASK_DATE), path)?;
        Ok(())
    }

    /// Loads a mask file. Threshold and span are not stored; they come back
    /// as 0 and 1.
    pub fn load(path: &Path) -> Result<Self> {
        let movie = Movie::open(path)?;
        let h = movie.header();
        if h.t != 1 || h.c != 1 {
            return Err(MaskError::NotAMask(format!("t={} c={}", h.t, h.c)));
        }
        let frames = movie.read_all()?;
        if frames.iter().any(|&v| v != 0 && v != 255) {
            return Err(MaskError::NotAMask("values other than 0/255".into()));
        }
        Ok(Self {
            active: frames.index_axis(Axis(0), 0).index_axis(Axis(0), 0).mapv(|v| v == 255),
            threshold: 0,
            source_span: 1,
        })
    }
}

/// Scans all frames of all movies.
pub fn build_mask(movies: &[&Movie], threshold: u8) -> Result<Mask> {
    let first = movies.first().ok_or(MaskError::NoMovies)?;
    let mut mask = Mask::new(first.header().h, first.header().w, threshold);
    for movie in movies {
        // one frame at a time keeps memory flat for full-size days
        for t in 0..movie.header().t {
            mask.scan(movie.read_frames(t, 1)?.frames.view())?;
        }
    }
    Ok(mask)
}

/// Builds a mask from in-memory movies of shape (t, c, h, w).
pub fn build_mask_from_frames(movies: &[ArrayView4<u8>], threshold: u8) -> Result<Mask> {
    let first = movies.first().ok_or(MaskError::NoMovies)?;
    let (_, _, h, w) = first.dim();
    let mut mask = Mask::new(h, w, threshold);
    for movie in movies {
        mask.scan(movie.view())?;
    }
    Ok(mask)
}

/// Zeroes every channel of inactive pixels in `frames` (t, c, h, w).
pub fn apply_mask(frames: ArrayView4<u8>, mask: &Mask) -> Result<Array4<u8>> {
    let (_, _, h, w) = frames.dim();
    if (h, w) != mask.active.dim() {
        return Err(MaskError::ShapeMismatch {
            mask: mask.active.dim(),
            frames: (h, w),
        });
    }
    let mut out = frames.to_owned();
    for mut frame in out.outer_iter_mut() {
        for mut channel in frame.outer_iter_mut() {
            Zip::from(&mut channel).and(&mask.active).for_each(|v, &a| {
                if !a {
                    *v = 0;
                }
            });
        }
    }
    Ok(out)
}
