//! Clip enumeration, clip loading and the time-to-channel collapse.
//!
//! A clip is 15 consecutive frames of one day: 12 input frames followed by
//! 3 target frames. Clips never cross a day boundary.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use chrono::{Datelike, NaiveDate};
use ndarray::{s, Array, Array3, Array4, ArrayView4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::movie_store::{MovieHeader, MovieStore, StoreError};

pub const INPUT_FRAMES: usize = 12;
pub const TARGET_FRAMES: usize = 3;
pub const CLIP_FRAMES: usize = INPUT_FRAMES + TARGET_FRAMES;
pub const SLOTS_PER_DAY: usize = 288;

/// The four heading classes spread over the u8 range.
pub const HEADING_CLASSES: [u8; 4] = [0, 85, 170, 255];

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("no movies to enumerate")]
    EmptyMovieSet,
    #[error("stride must be at least 1")]
    InvalidStride,
    #[error("invalid clip: {0}")]
    InvalidSpec(String),
    #[error("no movie for city {city:?} on {day}")]
    MissingMovie { city: String, day: String },
    #[error("cannot parse date {0:?}")]
    BadDate(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("slot file: {0}")]
    SlotFile(String),
}

pub type Result<T> = std::result::Result<T, DatasetError>;

/// Rectangular crop (row0, col0, rows, cols) applied to every frame of a clip.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, serde::Serialize, serde::Deserialize)]
pub struct Region {
    pub row0: usize,
    pub col0: usize,
    pub rows: usize,
    pub cols: usize,
}

impl Region {
    pub fn new(row0: usize, col0: usize, rows: usize, cols: usize) -> Self {
        Self {
            row0,
            col0,
            rows,
            cols,
        }
    }

    fn check(&self, h: usize, w: usize) -> Result<()> {
        if self.rows == 0
            || self.cols == 0
            || self.row0 + self.rows > h
            || self.col0 + self.cols > w
        {
            return Err(DatasetError::InvalidSpec(format!(
                "region {self:?} outside {h}x{w} grid"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ClipSpec {
    pub city: String,
    /// ISO-8601 date of the day movie.
    pub day: String,
    /// Index of the first input frame.
    pub t_start: usize,
    pub region: Option<Region>,
}

impl ClipSpec {
    pub fn new(city: impl Into<String>, day: impl Into<String>, t_start: usize) -> Self {
        Self {
            city: city.into(),
            day: day.into(),
            t_start,
            region: None,
        }
    }

    pub fn with_region(mut self, region: Region) -> Self {
        self.region = Some(region);
        self
    }

    /// Slot of the first predicted frame.
    pub fn prediction_slot(&self) -> usize {
        self.t_start + INPUT_FRAMES
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Clip {
    /// (12, c, h, w)
    pub input: Array4<u8>,
    /// (3, c, h, w)
    pub target: Array4<u8>,
    pub spec: ClipSpec,
}

impl Clip {
    pub fn channels(&self) -> usize {
        self.input.dim().1
    }

    pub fn grid(&self) -> (usize, usize) {
        let (_, _, h, w) = self.input.dim();
        (h, w)
    }
}

/// Frames stacked along the channel axis: channel `k` holds source frame
/// `k / c`, channel `k % c`.
#[derive(Debug, Clone, PartialEq)]
pub struct CollapsedSample<A> {
    /// (t * c, h, w)
    pub data: Array3<A>,
    pub t: usize,
    pub c: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TemporalFeatures {
    /// Monday = 0 .. Sunday = 6.
    pub day_of_week: u32,
    pub slot_of_day: usize,
    pub slot_norm: f64,
}

/// Enumerates every clip of every movie, ordered by (city, day, t_start).
///
/// With `test_slots`, only clips whose first predicted slot is listed are kept.
pub fn enumerate_clips(
    movies: &[MovieHeader],
    stride: usize,
    test_slots: Option<&BTreeSet<usize>>,
    region: Option<Region>,
) -> Result<Vec<ClipSpec>> {
    if movies.is_empty() {
        return Err(DatasetError::EmptyMovieSet);
    }
    if stride == 0 {
        return Err(DatasetError::InvalidStride);
    }
    let mut sorted: Vec<&MovieHeader> = movies.iter().collect();
    sorted.sort_by(|a, b| (&a.city, &a.date).cmp(&(&b.city, &b.date)));
    let mut specs = Vec::new();
    for movie in sorted {
        if let Some(r) = region {
            r.check(movie.h, movie.w)?;
        }
        if movie.t < CLIP_FRAMES {
            continue;
        }
        for t_start in (0..=movie.t - CLIP_FRAMES).step_by(stride) {
            if let Some(slots) = test_slots {
                if !slots.contains(&(t_start + INPUT_FRAMES)) {
                    continue;
                }
            }
            specs.push(ClipSpec {
                city: movie.city.clone(),
                day: movie.date.clone(),
                t_start,
                region,
            });
        }
    }
    Ok(specs)
}

pub fn load_clip(spec: &ClipSpec, store: &MovieStore) -> Result<Clip> {
    let movie = store
        .get(&spec.city, &spec.day)
        .ok_or_else(|| DatasetError::MissingMovie {
            city: spec.city.clone(),
            day: spec.day.clone(),
        })?;
    let header = movie.header();
    if spec.t_start + CLIP_FRAMES > header.t {
        return Err(DatasetError::InvalidSpec(format!(
            "t_start {} + {CLIP_FRAMES} exceeds {} frames",
            spec.t_start, header.t
        )));
    }
    if let Some(r) = spec.region {
        r.check(header.h, header.w)?;
    }
    let block = movie.read_frames(spec.t_start, CLIP_FRAMES)?;
    let frames = match spec.region {
        Some(r) => block
            .frames
            .slice(s![.., .., r.row0..r.row0 + r.rows, r.col0..r.col0 + r.cols])
            .to_owned(),
        None => block.frames,
    };
    Ok(Clip {
        input: frames.slice(s![..INPUT_FRAMES, .., .., ..]).to_owned(),
        target: frames.slice(s![INPUT_FRAMES.., .., .., ..]).to_owned(),
        spec: spec.clone(),
    })
}

pub fn collapse_time<A: Clone>(frames: ArrayView4<A>) -> CollapsedSample<A> {
    let (t, c, h, w) = frames.dim();
    let data = frames
        .as_standard_layout()
        .into_owned()
        .into_shape_with_order((t * c, h, w))
        .expect("standard layout reshapes");
    CollapsedSample { data, t, c }
}

pub fn expand_time<A: Clone>(sample: CollapsedSample<A>) -> Result<Array4<A>> {
    let (k, h, w) = sample.data.dim();
    if sample.t * sample.c != k {
        return Err(DatasetError::Shape(format!(
            "{k} channels cannot be split as t={} x c={}",
            sample.t, sample.c
        )));
    }
    let data = sample.data.as_standard_layout().into_owned();
    Ok(data
        .into_shape_with_order((sample.t, sample.c, h, w))
        .expect("channel count checked"))
}

pub fn temporal_features(spec: &ClipSpec) -> Result<TemporalFeatures> {
    let date = NaiveDate::parse_from_str(&spec.day, "%Y-%m-%d")
        .map_err(|_| DatasetError::BadDate(spec.day.clone()))?;
    let slot = spec.prediction_slot();
    if slot >= SLOTS_PER_DAY {
        return Err(DatasetError::InvalidSpec(format!(
            "prediction slot {slot} beyond end of day"
        )));
    }
    Ok(TemporalFeatures {
        day_of_week: date.weekday().num_days_from_monday(),
        slot_of_day: slot,
        slot_norm: slot as f64 / SLOTS_PER_DAY as f64,
    })
}

/// Parses a test-slot file: one slot index (0..288) per line.
pub fn parse_slot_list(text: &str) -> Result<BTreeSet<usize>> {
    let mut slots = BTreeSet::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let slot: usize = line
            .parse()
            .map_err(|_| DatasetError::SlotFile(format!("line {}: {line:?}", lineno + 1)))?;
        if slot >= SLOTS_PER_DAY {
            return Err(DatasetError::SlotFile(format!(
                "line {}: slot {slot} out of range",
                lineno + 1
            )));
        }
        slots.insert(slot);
    }
    Ok(slots)
}

pub fn read_slot_file(path: &Path) -> Result<BTreeSet<usize>> {
    let text = fs::read_to_string(path)
        .map_err(|e| DatasetError::SlotFile(format!("{}: {e}", path.display())))?;
    parse_slot_list(&text)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SynthKind {
    Constant(u8),
    /// Frame `i` is constant `i mod 256`.
    TimeRamp,
    /// Every pixel is a function of the slot of day plus uniform integer
    /// noise in `[-noise, noise]` on the volume and speed channels.
    SlotPattern { noise: u8 },
    Random,
}

fn is_road(y: usize, x: usize) -> bool {
    y % 4 == 1 || x % 5 == 2
}

/// Smooth daily profile in [0, 1], peaking at midday.
fn daily_profile(slot: usize) -> f64 {
    let phase = (slot % SLOTS_PER_DAY) as f64 / SLOTS_PER_DAY as f64;
    0.5 * (1.0 - (2.0 * std::f64::consts::PI * phase).cos())
}

fn slot_pattern_value(slot: usize, channel: usize, y: usize, x: usize) -> f64 {
    if !is_road(y, x) {
        return 0.0;
    }
    let g = daily_profile(slot);
    match channel {
        1 => 200.0 - 70.0 * g,
        2 => HEADING_CLASSES[(y / 4 + x / 5) % 4] as f64,
        _ => 40.0 + (60.0 + 20.0 * ((y + x) % 3) as f64) * g,
    }
}

/// Deterministic synthetic movie of `shape` = (t, c, h, w). Frame `i` is
/// slot `i mod 288`. For the random and slot-pattern kinds, channel 2 is a
/// heading channel restricted to [`HEADING_CLASSES`].
pub fn synth_movie(kind: SynthKind, seed: u64, shape: [usize; 4]) -> Array4<u8> {
    let [t, c, h, w] = shape;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match kind {
        SynthKind::Constant(v) => Array4::from_elem((t, c, h, w), v),
        SynthKind::TimeRamp => Array::from_shape_fn((t, c, h, w), |(i, _, _, _)| (i % 256) as u8),
        SynthKind::Random => {
            let mut out = Array4::zeros((t, c, h, w));
            for ((_, ch, _, _), v) in out.indexed_iter_mut() {
                *v = if ch == 2 {
                    HEADING_CLASSES[rng.gen_range(0..4)]
                } else {
                    rng.gen()
                };
            }
            out
        }
        SynthKind::SlotPattern { noise } => {
            let noise = noise as i32;
            let mut out = Array4::zeros((t, c, h, w));
            for ((i, ch, y, x), v) in out.indexed_iter_mut() {
                let base = slot_pattern_value(i, ch, y, x).round() as i32;
                let jitter = if noise > 0 && ch != 2 && is_road(y, x) {
                    rng.gen_range(-noise..=noise)
                } else {
                    0
                };
                *v = (base + jitter).clamp(0, 255) as u8;
            }
            out
        }
    }
}
