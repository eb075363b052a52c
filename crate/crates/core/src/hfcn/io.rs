//! Self-describing weight files.
//!
//! Little-endian layout: magic, endianness tag, version, the `ArchSpec`,
//! the init seed, a tensor count and length-prefixed `f64` tensors
//! (trainable tensors in canonical order, then the running mean and
//! variance of every batch-norm layer), followed by a CRC-32 of all
//! preceding bytes.

use std::path::Path;

use super::arch::{ArchSpec, TRUNK_CONVS};
use super::params::{init_params, ModelParams};
use super::HfcnError;
use crate::parttree::LEVELS;

pub const WEIGHTS_MAGIC: &[u8; 8] = b"HFCNWGT\0";
pub const WEIGHTS_VERSION: u16 = 1;
const ENDIAN_TAG: u32 = 0x0102_0304;

pub fn encode_weights(params: &ModelParams) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(WEIGHTS_MAGIC);
    out.extend_from_slice(&ENDIAN_TAG.to_le_bytes());
    out.extend_from_slice(&WEIGHTS_VERSION.to_le_bytes());
    let a = &params.arch;
    for &w in a
        .trunk_widths
        .iter()
        .chain(&a.branch_first_widths)
        .chain(&a.branch_mid_widths)
    {
        out.extend_from_slice(&(w as u32).to_le_bytes());
    }
    out.extend_from_slice(&a.qp_norm_divisor.to_le_bytes());
    out.extend_from_slice(&params.seed.to_le_bytes());
    let bns = params.batch_norms();
    let tensors: Vec<&Vec<f64>> = params
        .tensors()
        .into_iter()
        .chain(bns.iter().flat_map(|b| [&b.running_mean, &b.running_var]))
        .collect();
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for t in tensors {
        out.extend_from_slice(&(t.len() as u64).to_le_bytes());
        for v in t {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], HfcnError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| HfcnError::CorruptFile("unexpected end of weight data".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, HfcnError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, HfcnError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64, HfcnError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn decode_weights(bytes: &[u8]) -> Result<ModelParams, HfcnError> {
    let corrupt = |m: &str| HfcnError::CorruptFile(m.to_string());
    if bytes.len() < WEIGHTS_MAGIC.len() + 4 || &bytes[..8] != WEIGHTS_MAGIC {
        return Err(corrupt("bad magic"));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    if crc32fast::hash(body) != u32::from_le_bytes(tail.try_into().unwrap()) {
        return Err(corrupt("checksum mismatch"));
    }
    let mut c = Cursor { bytes: body, pos: 8 };
    if c.u32()? != ENDIAN_TAG {
        return Err(corrupt("endianness tag mismatch"));
    }
    let version = u16::from_le_bytes(c.take(2)?.try_into().unwrap());
    if version != WEIGHTS_VERSION {
        return Err(HfcnError::CorruptFile(format!("unsupported version {version}")));
    }
    let mut widths = [0usize; TRUNK_CONVS + 2 * LEVELS];
    for w in widths.iter_mut() {
        *w = c.u32()? as usize;
    }
    let arch = ArchSpec {
        trunk_widths: widths[..TRUNK_CONVS].try_into().unwrap(),
        branch_first_widths: widths[TRUNK_CONVS..TRUNK_CONVS + LEVELS].try_into().unwrap(),
        branch_mid_widths: widths[TRUNK_CONVS + LEVELS..].try_into().unwrap(),
        qp_norm_divisor: c.f64()?,
    };
    arch.validate()
        .map_err(|e| HfcnError::CorruptFile(format!("stored architecture: {e}")))?;
    let seed = c.u64()?;
    let mut params = init_params(&arch, seed)?;
    let count = c.u32()? as usize;
    let expected: Vec<usize> = params
        .tensors()
        .iter()
        .map(|t| t.len())
        .chain(params.batch_norms().iter().flat_map(|b| [b.running_mean.len(), b.running_var.len()]))
        .collect();
    if count != expected.len() {
        return Err(HfcnError::CorruptFile(format!(
            "{count} tensors stored, architecture needs {}",
            expected.len()
        )));
    }
    let mut stored = Vec::with_capacity(count);
    for (i, &want) in expected.iter().enumerate() {
        let len = c.u64()?;
        if len != want as u64 {
            return Err(HfcnError::CorruptFile(format!(
                "tensor {i} has {len} values, expected {want}"
            )));
        }
        stored.push((0..want).map(|_| c.f64()).collect::<Result<Vec<f64>, _>>()?);
    }
    let mut stored = stored.into_iter();
    for slot in params.tensors_mut() {
        *slot = stored.next().expect("count checked");
    }
    for bn in params.batch_norms_mut() {
        bn.running_mean = stored.next().expect("count checked");
        bn.running_var = stored.next().expect("count checked");
    }
    if c.pos != body.len() {
        return Err(corrupt("trailing bytes after tensors"));
    }
    if !params.all_finite() {
        return Err(corrupt("non-finite weight"));
    }
    Ok(params)
}

pub fn save_weights(params: &ModelParams, path: &Path) -> Result<(), HfcnError> {
    std::fs::write(path, encode_weights(params))?;
    Ok(())
}

pub fn load_weights(path: &Path) -> Result<ModelParams, HfcnError> {
    decode_weights(&std::fs::read(path)?)
}

/// Loads weights and checks they were built for `arch`.
pub fn load_weights_for(path: &Path, arch: &ArchSpec) -> Result<ModelParams, HfcnError> {
    let params = load_weights(path)?;
    if &params.arch != arch {
        return Err(HfcnError::ArchMismatch {
            expected: format!("{arch:?}"),
            found: format!("{:?}", params.arch),
        });
    }
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn small_arch() -> ArchSpec {
        ArchSpec {
            trunk_widths: [2, 2, 3, 3, 2, 2, 3, 3],
            branch_first_widths: [2, 2, 2, 2],
            branch_mid_widths: [3, 3, 3, 3],
            qp_norm_divisor: 255.0,
        }
    }

    fn perturbed(seed: u64) -> ModelParams {
        let mut p = init_params(&small_arch(), seed).unwrap();
        for bn in p.batch_norms_mut() {
            bn.running_mean.iter_mut().for_each(|m| *m += 0.25);
            bn.running_var.iter_mut().for_each(|v| *v *= 1.5);
        }
        p.branches[1].out.bias[2] = -0.125;
        p
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.bin");
        let p = perturbed(7);
        save_weights(&p, &path).unwrap();
        let q = load_weights(&path).unwrap();
        assert_eq!(p, q);
        assert_eq!(encode_weights(&q), std::fs::read(&path).unwrap());
    }

    #[test]
    fn arch_mismatch_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.bin");
        save_weights(&perturbed(1), &path).unwrap();
        assert!(load_weights_for(&path, &small_arch()).is_ok());
        assert!(matches!(
            load_weights_for(&path, &ArchSpec::default()),
            Err(HfcnError::ArchMismatch { .. })
        ));
    }

    #[test]
    fn corruption_is_typed() {
        let good = encode_weights(&perturbed(2));
        let mut bad = good.clone();
        bad[0] ^= 1;
        assert!(matches!(decode_weights(&bad), Err(HfcnError::CorruptFile(_))));
        let mut bad = good.clone();
        bad[40] ^= 0x10;
        assert!(matches!(decode_weights(&bad), Err(HfcnError::CorruptFile(_))));
        assert!(matches!(decode_weights(&[]), Err(HfcnError::CorruptFile(_))));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn truncation_is_corrupt(frac in 0.0f64..1.0, seed in 0u64..4) {
            let good = encode_weights(&perturbed(seed));
            let cut = (frac * good.len() as f64) as usize;
            prop_assert!(matches!(decode_weights(&good[..cut]), Err(HfcnError::CorruptFile(_))));
        }

        #[test]
        fn byte_flips_never_panic(pos in any::<prop::sample::Index>(), bit in 0u8..8) {
            let mut bytes = encode_weights(&perturbed(3));
            let i = pos.index(bytes.len());
            bytes[i] ^= 1 << bit;
            prop_assert!(decode_weights(&bytes).is_err());
        }
    }
}
