use std::fs::File;
use std::io::{BufWriter, Read, Seek, SeekFrom, Write};
use std::path::Path;

use super::{DatasetError, SampleRecord};
use crate::parttree::{MergeCode, PartitionTree, TREE_OUTPUTS};
use crate::rdosim::{QpValue, Superblock, SB_PIXELS};

pub const MAGIC: &[u8; 8] = b"VP9PARTS";
pub const VERSION: u16 = 1;
pub const HEADER_LEN: usize = 8 + 2 + 8 + 6;
pub const RECORD_LEN: usize = 2 + TREE_OUTPUTS + SB_PIXELS;

fn encode_record(r: &SampleRecord, buf: &mut Vec<u8>) {
    buf.extend_from_slice(&(r.q.0 as u16).to_le_bytes());
    buf.extend(r.labels.codes().iter().map(|c| *c as u8));
    buf.extend_from_slice(r.sb.pixels());
}

fn decode_record(bytes: &[u8], index: u64) -> Result<SampleRecord, DatasetError> {
    debug_assert_eq!(bytes.len(), RECORD_LEN);
    let q = u16::from_le_bytes([bytes[0], bytes[1]]);
    let q = u8::try_from(q)
        .map_err(|_| DatasetError::CorruptFile(format!("record {index}: qp {q} out of range")))?;
    let mut codes = [MergeCode::NoMerge; TREE_OUTPUTS];
    for (c, &b) in codes.iter_mut().zip(&bytes[2..2 + TREE_OUTPUTS]) {
        *c = MergeCode::from_u8(b).ok_or_else(|| {
            DatasetError::CorruptFile(format!("record {index}: label byte {b}"))
        })?;
    }
    let labels = PartitionTree::from_codes(codes);
    if !labels.is_consistent() {
        return Err(DatasetError::CorruptFile(format!(
            "record {index}: inconsistent label tree"
        )));
    }
    let sb = Superblock::from_slice(&bytes[2 + TREE_OUTPUTS..])
        .map_err(|e| DatasetError::CorruptFile(e.to_string()))?;
    Ok(SampleRecord {
        sb,
        q: QpValue(q),
        labels,
    })
}

/// Writes `records` with a fresh header.
pub fn write_dataset(path: &Path, records: &[SampleRecord]) -> Result<(), DatasetError> {
    let mut w = BufWriter::new(File::create(path)?);
    let mut header = Vec::with_capacity(HEADER_LEN);
    header.extend_from_slice(MAGIC);
    header.extend_from_slice(&VERSION.to_le_bytes());
    header.extend_from_slice(&(records.len() as u64).to_le_bytes());
    header.extend_from_slice(&[0u8; 6]);
    w.write_all(&header)?;
    let mut buf = Vec::with_capacity(RECORD_LEN);
    for r in records {
        buf.clear();
        encode_record(r, &mut buf);
        w.write_all(&buf)?;
    }
    w.flush()?;
    Ok(())
}

/// Random-access reader over a dataset file.
#[derive(Debug)]
pub struct DatasetReader {
    file: File,
    count: u64,
}

impl DatasetReader {
    /// Validates the header and that the file length matches the record
    /// count exactly.
    pub fn open(path: &Path) -> Result<Self, DatasetError> {
        let mut file = File::open(path)?;
        let len = file.metadata()?.len();
        let mut header = [0u8; HEADER_LEN];
        if len < HEADER_LEN as u64 {
            return Err(DatasetError::CorruptFile(format!(
                "{len} bytes is shorter than the header"
            )));
        }
        file.read_exact(&mut header)?;
        if &header[..8] != MAGIC {
            return Err(DatasetError::CorruptFile("bad magic".into()));
        }
        let version = u16::from_le_bytes([header[8], header[9]]);
        if version != VERSION {
            return Err(DatasetError::CorruptFile(format!("unsupported version {version}")));
        }
        let count = u64::from_le_bytes(header[10..18].try_into().unwrap());
        if header[18..].iter().any(|&b| b != 0) {
            return Err(DatasetError::CorruptFile("reserved header bytes are not zero".into()));
        }
        let expected = count
            .checked_mul(RECORD_LEN as u64)
            .and_then(|b| b.checked_add(HEADER_LEN as u64));
        if expected != Some(len) {
            return Err(DatasetError::CorruptFile(format!(
                "{count} records need {expected:?} bytes, file has {len}"
            )));
        }
        Ok(DatasetReader { file, count })
    }

    pub fn len(&self) -> u64 {
        self.count
    }

    pub fn is_empty(&self) -> bool {
        self.count == 0
    }

    /// Reads records `offset..offset + n`.
    pub fn load_batch(&mut self, offset: u64, n: u64) -> Result<Vec<SampleRecord>, DatasetError> {
        if offset.checked_add(n).is_none_or(|end| end > self.count) {
            return Err(DatasetError::RangeError {
                offset,
                n,
                count: self.count,
            });
        }
        self.file
            .seek(SeekFrom::Start(HEADER_LEN as u64 + offset * RECORD_LEN as u64))?;
        let mut bytes = vec![0u8; n as usize * RECORD_LEN];
        self.file.read_exact(&mut bytes)?;
        bytes
            .chunks_exact(RECORD_LEN)
            .enumerate()
            .map(|(i, chunk)| decode_record(chunk, offset + i as u64))
            .collect()
    }
}

/// Loads every record of a dataset file.
pub fn read_dataset(path: &Path) -> Result<Vec<SampleRecord>, DatasetError> {
    let mut r = DatasetReader::open(path)?;
    let n = r.len();
    r.load_batch(0, n)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::parttree::random_tree;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_record(seed: u64) -> SampleRecord {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        SampleRecord {
            sb: Superblock::from_fn(|_, _| rng.random()),
            q: QpValue((seed % 256) as u8),
            labels: random_tree(seed, [0.25; 4]).unwrap().correct_top_down(),
        }
    }

    #[test]
    fn header_layout() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.bin");
        write_dataset(&p, &[random_record(1), random_record(2)]).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        assert_eq!(HEADER_LEN, 24);
        assert_eq!(RECORD_LEN, 4183);
        assert_eq!(bytes.len(), 24 + 2 * 4183);
        assert_eq!(&bytes[..8], b"VP9PARTS");
        assert_eq!(&bytes[8..10], &[1, 0]);
        assert_eq!(&bytes[10..18], &2u64.to_le_bytes());
        assert_eq!(&bytes[18..24], &[0; 6]);
        // First record: q then labels starting with level 3.
        let r = random_record(1);
        assert_eq!(&bytes[24..26], &(r.q.0 as u16).to_le_bytes());
        assert_eq!(bytes[26], r.labels.get(3, 0, 0) as u8);
        assert_eq!(bytes[27], r.labels.get(2, 0, 0) as u8);
        assert_eq!(bytes[26 + 85], r.sb.at(0, 0));
    }

    #[test]
    fn write_then_read_five() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.bin");
        let recs: Vec<_> = (0..5).map(random_record).collect();
        write_dataset(&p, &recs).unwrap();
        let mut r = DatasetReader::open(&p).unwrap();
        assert_eq!(r.len(), 5);
        assert_eq!(r.load_batch(0, 5).unwrap(), recs);
        assert_eq!(r.load_batch(2, 2).unwrap(), recs[2..4].to_vec());
        assert!(r.load_batch(5, 0).unwrap().is_empty());
        assert!(matches!(r.load_batch(5, 1), Err(DatasetError::RangeError { .. })));
        assert!(matches!(r.load_batch(4, 2), Err(DatasetError::RangeError { .. })));
        assert!(matches!(r.load_batch(u64::MAX, 2), Err(DatasetError::RangeError { .. })));
    }

    #[test]
    fn corrupt_files_are_typed_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.bin");
        write_dataset(&p, &[random_record(3), random_record(4)]).unwrap();
        let good = std::fs::read(&p).unwrap();
        let expect_corrupt = |bytes: &[u8]| {
            std::fs::write(&p, bytes).unwrap();
            match DatasetReader::open(&p).and_then(|mut r| {
                let n = r.len();
                r.load_batch(0, n)
            }) {
                Err(DatasetError::CorruptFile(_)) => {}
                other => panic!("expected CorruptFile, got {other:?}"),
            }
        };
        let mut bad = good.clone();
        bad[0] = b'X';
        expect_corrupt(&bad);
        let mut bad = good.clone();
        bad[8] = 2;
        expect_corrupt(&bad);
        let mut bad = good.clone();
        bad[20] = 1;
        expect_corrupt(&bad);
        let mut bad = good.clone();
        bad[26 + 10] = 9;
        expect_corrupt(&bad);
        let mut bad = good.clone();
        bad[25] = 1; // q high byte -> q >= 256
        expect_corrupt(&bad);
        // FullMerge at the top with a NoMerge below it.
        let mut bad = good.clone();
        bad[26] = 3;
        bad[27] = 0;
        expect_corrupt(&bad);
        for cut in [0, 5, 23, 24, 100, good.len() - 1] {
            expect_corrupt(&good[..cut]);
        }
        let mut longer = good.clone();
        longer.push(0);
        expect_corrupt(&longer);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn arbitrary_records_roundtrip(seeds in proptest::collection::vec(any::<u64>(), 0..6)) {
            let dir = tempfile::tempdir().unwrap();
            let p = dir.path().join("d.bin");
            let recs: Vec<_> = seeds.iter().map(|&s| random_record(s)).collect();
            write_dataset(&p, &recs).unwrap();
            prop_assert_eq!(read_dataset(&p).unwrap(), recs);
        }

        #[test]
        fn truncation_never_panics(seed in any::<u64>(), frac in 0.0f64..1.0) {
            let dir = tempfile::tempdir().unwrap();
            let p = dir.path().join("d.bin");
            write_dataset(&p, &[random_record(seed), random_record(seed ^ 1)]).unwrap();
            let bytes = std::fs::read(&p).unwrap();
            let cut = (frac * bytes.len() as f64) as usize;
            std::fs::write(&p, &bytes[..cut]).unwrap();
            prop_assert!(matches!(read_dataset(&p), Err(DatasetError::CorruptFile(_))));
        }
    }
}
