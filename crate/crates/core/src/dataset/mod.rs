//! `(superblock, qp, partition tree)` samples: extraction from frames,
//! labelling with the RDO search, and a fixed-stride binary file format.
//!
//! File layout (little-endian):
//!
//! ```text
//! header  : "VP9PARTS" | version u16 = 1 | sample_count u64 | 6 zero bytes
//! record  : q u16 | 85 label bytes (levels 3, 2, 1, 0, row-major) | 4096 pixels
//! ```

mod format;
pub mod procedural;

pub use format::{
    read_dataset, write_dataset, DatasetReader, HEADER_LEN, MAGIC, RECORD_LEN, VERSION,
};

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::parttree::PartitionTree;
use crate::rdosim::{rdo_search, QpValue, Superblock, SB_SIZE};

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("frame {width}x{height} is smaller than one superblock")]
    FrameTooSmall { width: usize, height: usize },
    #[error("corrupt file: {0}")]
    CorruptFile(String),
    #[error("records {offset}..{} out of range for {count} samples", offset + n)]
    RangeError { offset: u64, n: u64, count: u64 },
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("bad PGM image: {0}")]
    BadImage(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

/// An 8-bit luma frame.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl Frame {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self, DatasetError> {
        if pixels.len() != width * height {
            return Err(DatasetError::InvalidArgument(format!(
                "{} samples for a {width}x{height} frame",
                pixels.len()
            )));
        }
        Ok(Frame {
            width,
            height,
            pixels,
        })
    }
}

/// One training sample.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleRecord {
    pub sb: Superblock,
    pub q: QpValue,
    pub labels: PartitionTree,
}

/// Non-overlapping 64x64 blocks in raster order; partial blocks at the
/// right and bottom edges are dropped.
pub fn extract_superblocks(frame: &Frame) -> Result<Vec<Superblock>, DatasetError> {
    if frame.width < SB_SIZE || frame.height < SB_SIZE {
        return Err(DatasetError::FrameTooSmall {
            width: frame.width,
            height: frame.height,
        });
    }
    let mut out = Vec::with_capacity((frame.width / SB_SIZE) * (frame.height / SB_SIZE));
    for by in 0..frame.height / SB_SIZE {
        for bx in 0..frame.width / SB_SIZE {
            out.push(Superblock::from_fn(|x, y| {
                frame.pixels[(by * SB_SIZE + y) * frame.width + bx * SB_SIZE + x]
            }));
        }
    }
    Ok(out)
}

/// How QP values are assigned to superblocks during generation.
#[derive(Debug, Clone, PartialEq)]
pub enum QpSampler {
    /// `count` independent uniform draws from `min..=max` per superblock.
    Uniform { min: u8, max: u8, count: usize },
    /// `count` draws from a fixed list per superblock.
    Choice { values: Vec<u8>, count: usize },
    /// Every listed value once per superblock.
    Each(Vec<u8>),
}

impl QpSampler {
    fn validate(&self) -> Result<(), DatasetError> {
        let in_range = |q: u8| (QpValue::DATASET_MIN..=QpValue::DATASET_MAX).contains(&q);
        let ok = match self {
            QpSampler::Uniform { min, max, count } => {
                *count > 0 && min <= max && in_range(*min) && in_range(*max)
            }
            QpSampler::Choice { values, count } => {
                *count > 0 && !values.is_empty() && values.iter().all(|&q| in_range(q))
            }
            QpSampler::Each(values) => !values.is_empty() && values.iter().all(|&q| in_range(q)),
        };
        if ok {
            Ok(())
        } else {
            Err(DatasetError::InvalidArgument(format!(
                "qp sampler {self:?} must draw at least once from {}..={}",
                QpValue::DATASET_MIN,
                QpValue::DATASET_MAX
            )))
        }
    }

    fn draw<R: Rng>(&self, rng: &mut R) -> Vec<u8> {
        match self {
            QpSampler::Uniform { min, max, count } => {
                (0..*count).map(|_| rng.random_range(*min..=*max)).collect()
            }
            QpSampler::Choice { values, count } => (0..*count)
                .map(|_| values[rng.random_range(0..values.len())])
                .collect(),
            QpSampler::Each(values) => values.clone(),
        }
    }
}

/// Labels every superblock of every source with the RDO search. Records
/// come out in source order, superblock raster order, then draw order.
pub fn generate_records(
    sources: &[Frame],
    sampler: &QpSampler,
    seed: u64,
) -> Result<Vec<SampleRecord>, DatasetError> {
    if sources.is_empty() {
        return Err(DatasetError::InvalidArgument("no source frames".into()));
    }
    sampler.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut jobs = Vec::new();
    for frame in sources {
        for sb in extract_superblocks(frame)? {
            for q in sampler.draw(&mut rng) {
                jobs.push((sb.clone(), QpValue(q)));
            }
        }
    }
    Ok(jobs
        .into_par_iter()
        .map(|(sb, q)| {
            let labels = rdo_search(&sb, q).tree;
            SampleRecord { sb, q, labels }
        })
        .collect())
}

/// [`generate_records`] followed by [`write_dataset`]. Returns the number of
/// records written.
pub fn generate(
    sources: &[Frame],
    sampler: &QpSampler,
    seed: u64,
    out: &Path,
) -> Result<usize, DatasetError> {
    let records = generate_records(sources, sampler, seed)?;
    write_dataset(out, &records)?;
    Ok(records.len())
}

/// Shuffles and splits; the first `floor(fraction * n)` records go to the
/// training side.
pub fn split_records(
    mut records: Vec<SampleRecord>,
    fraction: f64,
    seed: u64,
) -> Result<(Vec<SampleRecord>, Vec<SampleRecord>), DatasetError> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(DatasetError::InvalidArgument(format!(
            "split fraction {fraction} not in (0, 1)"
        )));
    }
    if records.is_empty() {
        return Err(DatasetError::EmptyDataset);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    records.shuffle(&mut rng);
    let n_train = (fraction * records.len() as f64).floor() as usize;
    let val = records.split_off(n_train);
    Ok((records, val))
}

/// File-level split. Returns `(train_count, val_count)`.
pub fn split(
    input: &Path,
    fraction: f64,
    seed: u64,
    train_out: &Path,
    val_out: &Path,
) -> Result<(usize, usize), DatasetError> {
    let records = read_dataset(input)?;
    let (train, val) = split_records(records, fraction, seed)?;
    write_dataset(train_out, &train)?;
    write_dataset(val_out, &val)?;
    Ok((train.len(), val.len()))
}

/// Reads a binary (P5) PGM with maxval 255.
pub fn read_pgm(path: &Path) -> Result<Frame, DatasetError> {
    let mut r = BufReader::new(std::fs::File::open(path)?);
    parse_pgm(&mut r)
}

pub fn parse_pgm<R: BufRead>(r: &mut R) -> Result<Frame, DatasetError> {
    let mut fields = Vec::new();
    let mut token = Vec::new();
    while fields.len() < 4 {
        let mut byte = [0u8; 1];
        if r.read(&mut byte)? == 0 {
            return Err(DatasetError::BadImage("truncated header".into()));
        }
        let b = byte[0];
        if b == b'#' && token.is_empty() {
            let mut comment = Vec::new();
            r.read_until(b'\n', &mut comment)?;
        } else if b.is_ascii_whitespace() {
            if !token.is_empty() {
                fields.push(String::from_utf8_lossy(&token).into_owned());
                token.clear();
            }
        } else {
            token.push(b);
        }
    }
    if fields[0] != "P5" {
        return Err(DatasetError::BadImage(format!("magic {:?}, expected P5", fields[0])));
    }
    let num = |s: &str| {
        s.parse::<usize>()
            .map_err(|_| DatasetError::BadImage(format!("bad number {s:?}")))
    };
    let (width, height, maxval) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
    if maxval != 255 {
        return Err(DatasetError::BadImage(format!("maxval {maxval}, expected 255")));
    }
    let mut pixels = vec![0u8; width * height];
    r.read_exact(&mut pixels)
        .map_err(|_| DatasetError::BadImage("truncated pixel data".into()))?;
    Frame::new(width, height, pixels)
}

pub fn write_pgm(path: &Path, frame: &Frame) -> Result<(), DatasetError> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write!(f, "P5\n{} {}\n255\n", frame.width, frame.height)?;
    f.write_all(&frame.pixels)?;
    f.flush()?;
    Ok(())
}
