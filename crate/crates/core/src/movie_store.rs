//! TMM1: a fixed-stride, uncompressed container for traffic map movies.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! 0..4    magic "TMM1"
//! 4..6    u16 version (= 1)
//! 6..8    u16 c
//! 8..12   u32 t
//! 12..16  u32 h
//! 16..20  u32 w
//!         u16 city_len, city bytes (UTF-8)
//!         u16 date_len, date bytes (UTF-8)
//!         t chunks of c*h*w u8, each chunk in (c, h, w) row-major order
//! ```
//!
//! Every frame is one chunk at a fixed offset, so reading a clip touches
//! exactly the bytes of the frames it needs.

use std::fs::{self, File};
use std::io::{self, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};

use ndarray::{Array4, ArrayView4};
use thiserror::Error;

pub const MAGIC: [u8; 4] = *b"TMM1";
pub const VERSION: u16 = 1;

/// Size of the fixed part of the header, before the two strings.
const FIXED_HEADER_LEN: usize = 20;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("bad magic {0:?}, expected \"TMM1\"")]
    BadMagic([u8; 4]),
    #[error("unsupported version {0}")]
    UnsupportedVersion(u16),
    #[error("invalid header: {0}")]
    InvalidHeader(String),
    #[error("file size {actual} does not match header (expected {expected} bytes)")]
    Truncated { expected: u64, actual: u64 },
    #[error("dimension mismatch: declared {declared:?}, got {actual:?}")]
    DimensionMismatch {
        declared: [usize; 4],
        actual: [usize; 4],
    },
    #[error("frame range {start}..{end} outside movie of {t} frames")]
    OutOfRange { start: usize, end: usize, t: usize },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

pub type Result<T> = std::result::Result<T, StoreError>;

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> StoreError + '_ {
    move |source| StoreError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// City and date carried in a movie header.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MovieMeta {
    pub city: String,
    pub date: String,
}

impl MovieMeta {
    pub fn new(city: impl Into<String>, date: impl Into<String>) -> Self {
        Self {
            city: city.into(),
            date: date.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MovieHeader {
    pub t: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub city: String,
    pub date: String,
}

impl MovieHeader {
    pub fn new(shape: [usize; 4], meta: &MovieMeta) -> Result<Self> {
        let [t, c, h, w] = shape;
        let header = Self {
            t,
            c,
            h,
            w,
            city: meta.city.clone(),
            date: meta.date.clone(),
        };
        header.validate()?;
        Ok(header)
    }

    fn validate(&self) -> Result<()> {
        if self.t == 0 || self.c == 0 || self.h == 0 || self.w == 0 {
            return Err(StoreError::InvalidHeader(format!(
                "zero dimension in {:?}",
                self.shape()
            )));
        }
        if self.c > u16::MAX as usize {
            return Err(StoreError::InvalidHeader(format!("c = {} exceeds u16", self.c)));
        }
        for (name, v) in [("t", self.t), ("h", self.h), ("w", self.w)] {
            if v > u32::MAX as usize {
                return Err(StoreError::InvalidHeader(format!("{name} = {v} exceeds u32")));
            }
        }
        for (name, s) in [("city", &self.city), ("date", &self.date)] {
            if s.len() > u16::MAX as usize {
                return Err(StoreError::InvalidHeader(format!("{name} longer than 65535 bytes")));
            }
        }
        Ok(())
    }

    pub fn shape(&self) -> [usize; 4] {
        [self.t, self.c, self.h, self.w]
    }

    pub fn meta(&self) -> MovieMeta {
        MovieMeta::new(self.city.clone(), self.date.clone())
    }

    /// Bytes in one frame chunk.
    pub fn frame_len(&self) -> usize {
        self.c * self.h * self.w
    }

    /// Encoded header length in bytes.
    pub fn encoded_len(&self) -> usize {
        FIXED_HEADER_LEN + 2 + self.city.len() + 2 + self.date.len()
    }

    /// Exact size a file with this header must have.
    pub fn file_len(&self) -> u64 {
        self.encoded_len() as u64 + self.t as u64 * self.frame_len() as u64
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.encoded_len());
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.c as u16).to_le_bytes());
        out.extend_from_slice(&(self.t as u32).to_le_bytes());
        out.extend_from_slice(&(self.h as u32).to_le_bytes());
        out.extend_from_slice(&(self.w as u32).to_le_bytes());
        for s in [&self.city, &self.date] {
            out.extend_from_slice(&(s.len() as u16).to_le_bytes());
            out.extend_from_slice(s.as_bytes());
        }
        out
    }

    /// Parses a header from the start of `reader`.
    pub fn decode(reader: &mut impl Read) -> io::Result<std::result::Result<Self, StoreError>> {
        let mut fixed = [0u8; FIXED_HEADER_LEN];
        reader.read_exact(&mut fixed)?;
        let magic: [u8; 4] = fixed[0..4].try_into().unwrap();
        if magic != MAGIC {
            return Ok(Err(StoreError::BadMagic(magic)));
        }
        let version = u16::from_le_bytes([fixed[4], fixed[5]]);
        if version != VERSION {
            return Ok(Err(StoreError::UnsupportedVersion(version)));
        }
        let u32_at = |i: usize| u32::from_le_bytes(fixed[i..i + 4].try_into().unwrap()) as usize;
        let c = u16::from_le_bytes([fixed[6], fixed[7]]) as usize;
        let (t, h, w) = (u32_at(8), u32_at(12), u32_at(16));
        let mut read_string = || -> io::Result<std::result::Result<String, StoreError>> {
            let mut len = [0u8; 2];
            reader.read_exact(&mut len)?;
            let mut buf = vec![0u8; u16::from_le_bytes(len) as usize];
            reader.read_exact(&mut buf)?;
            Ok(String::from_utf8(buf)
                .map_err(|_| StoreError::InvalidHeader("string is not UTF-8".into())))
        };
        let city = match read_string()? {
            Ok(s) => s,
            Err(e) => return Ok(Err(e)),
        };
        let date = match read_string()? {
            Ok(s) => s,
            Err(e) => return Ok(Err(e)),
        };
        let header = Self {
            t,
            c,
            h,
            w,
            city,
            date,
        };
        Ok(header.validate().map(|_| header))
    }
}

/// A contiguous run of decoded frames starting at `t_start`.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameBlock {
    pub t_start: usize,
    /// Shape (count, c, h, w).
    pub frames: Array4<u8>,
}

impl FrameBlock {
    pub fn len(&self) -> usize {
        self.frames.dim().0
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Writes `raw` (shape (t, c, h, w)) to `dest` as a TMM1 file.
pub fn ingest(raw: ArrayView4<u8>, meta: &MovieMeta, dest: &Path) -> Result<MovieHeader> {
    let (t, c, h, w) = raw.dim();
    let header = MovieHeader::new([t, c, h, w], meta)?;
    let file = File::create(dest).map_err(io_err(dest))?;
    let mut out = BufWriter::with_capacity(1 << 20, file);
    out.write_all(&header.encode()).map_err(io_err(dest))?;
    match raw.as_slice() {
        Some(bytes) => out.write_all(bytes).map_err(io_err(dest))?,
        None => {
            for frame in raw.outer_iter() {
                let bytes: Vec<u8> = frame.iter().copied().collect();
                out.write_all(&bytes).map_err(io_err(dest))?;
            }
        }
    }
    out.flush().map_err(io_err(dest))?;
    Ok(header)
}

/// Ingests a flat byte buffer declared to have `shape`.
pub fn ingest_bytes(
    bytes: &[u8],
    shape: [usize; 4],
    meta: &MovieMeta,
    dest: &Path,
) -> Result<MovieHeader> {
    let expected: usize = shape.iter().product();
    if bytes.len() != expected {
        return Err(StoreError::DimensionMismatch {
            declared: shape,
            actual: [bytes.len(), 1, 1, 1],
        });
    }
    let view = ArrayView4::from_shape(shape, bytes).expect("length checked above");
    ingest(view, meta, dest)
}

/// Ingests `raw` after checking it against a declared shape.
pub fn ingest_checked(
    raw: ArrayView4<u8>,
    declared: [usize; 4],
    meta: &MovieMeta,
    dest: &Path,
) -> Result<MovieHeader> {
    let (t, c, h, w) = raw.dim();
    if [t, c, h, w] != declared {
        return Err(StoreError::DimensionMismatch {
            declared,
            actual: [t, c, h, w],
        });
    }
    ingest(raw, meta, dest)
}

/// An open movie file. Frame data is read on demand with positioned reads, so
/// a handle can be shared between reader threads.
#[derive(Debug)]
pub struct Movie {
    path: PathBuf,
    header: MovieHeader,
    file: File,
    data_offset: u64,
    payload_bytes_read: AtomicU64,
    header_bytes_read: u64,
}

impl Movie {
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut file = File::open(path).map_err(io_err(path))?;
        let actual = file.metadata().map_err(io_err(path))?.len();
        let header = match MovieHeader::decode(&mut file) {
            Ok(parsed) => parsed?,
            Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => {
                return Err(StoreError::Truncated {
                    expected: FIXED_HEADER_LEN as u64,
                    actual,
                })
            }
            Err(e) => return Err(io_err(path)(e)),
        };
        let expected = header.file_len();
        if actual != expected {
            return Err(StoreError::Truncated { expected, actual });
        }
        let data_offset = header.encoded_len() as u64;
        Ok(Self {
            path: path.to_path_buf(),
            header,
            file,
            data_offset,
            payload_bytes_read: AtomicU64::new(0),
            header_bytes_read: data_offset,
        })
    }

    pub fn header(&self) -> &MovieHeader {
        &self.header
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    /// Frame payload bytes read through this handle so far.
    pub fn payload_bytes_read(&self) -> u64 {
        self.payload_bytes_read.load(Ordering::Relaxed)
    }

    /// Header bytes consumed by `open`.
    pub fn header_bytes_read(&self) -> u64 {
        self.header_bytes_read
    }

    pub fn read_frames(&self, t_start: usize, count: usize) -> Result<FrameBlock> {
        let h = &self.header;
        let end = t_start.checked_add(count).filter(|&e| e <= h.t);
        let Some(end) = end else {
            return Err(StoreError::OutOfRange {
                start: t_start,
                end: t_start.saturating_add(count),
                t: h.t,
            });
        };
        let frame_len = h.frame_len();
        let mut buf = vec![0u8; count * frame_len];
        let offset = self.data_offset + (t_start * frame_len) as u64;
        self.read_at(&mut buf, offset).map_err(io_err(&self.path))?;
        self.payload_bytes_read
            .fetch_add(buf.len() as u64, Ordering::Relaxed);
        let frames = Array4::from_shape_vec((end - t_start, h.c, h.h, h.w), buf)
            .expect("buffer sized from header");
        Ok(FrameBlock { t_start, frames })
    }

    pub fn read_all(&self) -> Result<Array4<u8>> {
        Ok(self.read_frames(0, self.header.t)?.frames)
    }

    #[cfg(unix)]
    fn read_at(&self, buf: &mut [u8], offset: u64) -> io::Result<()> {
        use std::os::unix::fs::FileExt;
        self.file.read_exact_at(buf, offset)
    }

    #[cfg(not(unix))]
    fn read_at(&self, buf: &mut [u8], offset: u64) -> io::Result<()> {
        use std::io::{Seek, SeekFrom};
        let mut file = self.file.try_clone()?;
        file.seek(SeekFrom::Start(offset))?;
        file.read_exact(buf)
    }
}

/// Lists `*.tmm` files in `dir`, sorted by file name.
pub fn list_movie_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    for entry in fs::read_dir(dir).map_err(io_err(dir))? {
        let path = entry.map_err(io_err(dir))?.path();
        if path.extension().is_some_and(|e| e == "tmm") && path.is_file() {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}

/// A set of open movies indexed by (city, date).
#[derive(Debug, Default)]
pub struct MovieStore {
    movies: std::collections::BTreeMap<(String, String), Movie>,
}

impl MovieStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Opens every `*.tmm` file in `dir`.
    pub fn open_dir(dir: &Path) -> Result<Self> {
        let mut store = Self::new();
        for path in list_movie_files(dir)? {
            store.insert(Movie::open(&path)?)?;
        }
        Ok(store)
    }

    pub fn insert(&mut self, movie: Movie) -> Result<()> {
        let h = movie.header();
        let key = (h.city.clone(), h.date.clone());
        if self.movies.contains_key(&key) {
            return Err(StoreError::InvalidHeader(format!(
                "duplicate movie for city {:?} date {:?}",
                key.0, key.1
            )));
        }
        self.movies.insert(key, movie);
        Ok(())
    }

    pub fn get(&self, city: &str, date: &str) -> Option<&Movie> {
        self.movies.get(&(city.to_string(), date.to_string()))
    }

    /// Movies in (city, date) order.
    pub fn movies(&self) -> impl Iterator<Item = &Movie> {
        self.movies.values()
    }

    pub fn headers(&self) -> Vec<MovieHeader> {
        self.movies.values().map(|m| m.header().clone()).collect()
    }

    pub fn cities(&self) -> Vec<String> {
        let mut cities: Vec<String> = self.movies.keys().map(|(c, _)| c.clone()).collect();
        cities.dedup();
        cities
    }

    pub fn len(&self) -> usize {
        self.movies.len()
    }

    pub fn is_empty(&self) -> bool {
        self.movies.is_empty()
    }
}
