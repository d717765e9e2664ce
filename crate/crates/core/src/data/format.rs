//! VPFT, a little-endian feature container:
//!
//! ```text
//! "VPFT" | u32 version = 1 | u32 N | u32 M | u32 d_v | u32 K
//! N × (u32 clean_label, u32 observed_label)
//! N·M·d_v × f32   (sample-major, then token, then dimension)
//! ```

use std::io::Write;
use std::path::Path;

use super::{FeatureDataset, Provenance};
use crate::error::{Error, Result};

pub const VPFT_MAGIC: [u8; 4] = *b"VPFT";
pub const VPFT_VERSION: u32 = 1;
const HEADER_LEN: usize = 24;

fn to_u32(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::Config(format!("{what} = {v} does not fit in a u32")))
}

pub fn write_features<W: Write>(ds: &FeatureDataset, mut w: W) -> Result<()> {
    let mut buf = Vec::with_capacity(HEADER_LEN + ds.len() * 8 + ds.raw_tokens().len() * 4);
    buf.extend_from_slice(&VPFT_MAGIC);
    for (v, what) in [
        (VPFT_VERSION as usize, "version"),
        (ds.len(), "N"),
        (ds.tokens_per_sample(), "M"),
        (ds.token_dim(), "d_v"),
        (ds.classes(), "K"),
    ] {
        buf.extend_from_slice(&to_u32(v, what)?.to_le_bytes());
    }
    for (&c, &o) in ds.clean_labels().iter().zip(ds.observed_labels()) {
        buf.extend_from_slice(&to_u32(c, "label")?.to_le_bytes());
        buf.extend_from_slice(&to_u32(o, "label")?.to_le_bytes());
    }
    for v in ds.raw_tokens() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)?;
    w.flush()?;
    Ok(())
}

pub fn save_features(ds: &FeatureDataset, path: impl AsRef<Path>) -> Result<()> {
    let file = std::fs::File::create(path)?;
    write_features(ds, std::io::BufWriter::new(file))
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn fail(&self, offset: usize, reason: impl Into<String>) -> Error {
        Error::Format {
            offset: offset as u64,
            reason: reason.into(),
        }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let out = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(out)
            }
            None => Err(self.fail(
                self.bytes.len(),
                format!("truncated while reading {what}: need {n} bytes at offset {}", self.pos),
            )),
        }
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

/// Parses a complete VPFT image. `origin` is recorded as the provenance.
pub fn read_features(bytes: &[u8], origin: &str) -> Result<FeatureDataset> {
    let mut cur = Cursor { bytes, pos: 0 };
    let magic = cur.take(4, "magic")?;
    if magic != VPFT_MAGIC {
        return Err(cur.fail(0, format!("bad magic {magic:?}, expected \"VPFT\"")));
    }
    let version = cur.u32("version")?;
    if version != VPFT_VERSION {
        return Err(cur.fail(4, format!("unsupported version {version}")));
    }
    let n = cur.u32("N")? as usize;
    let m = cur.u32("M")? as usize;
    let d_v = cur.u32("d_v")? as usize;
    let k = cur.u32("K")? as usize;
    if n > 0 && k == 0 {
        return Err(cur.fail(20, "K = 0 with a non-empty dataset"));
    }

    let floats = n.checked_mul(m).and_then(|x| x.checked_mul(d_v));
    let expected = floats
        .and_then(|f| f.checked_mul(4))
        .and_then(|f| n.checked_mul(8).and_then(|l| l.checked_add(f)))
        .and_then(|body| body.checked_add(HEADER_LEN));
    let expected = match expected {
        Some(e) => e,
        None => return Err(cur.fail(8, "header sizes overflow")),
    };
    if bytes.len() < expected {
        return Err(cur.fail(
            bytes.len(),
            format!("truncated: header implies {expected} bytes, file has {}", bytes.len()),
        ));
    }
    if bytes.len() > expected {
        return Err(cur.fail(
            expected,
            format!("{} trailing bytes after the token block", bytes.len() - expected),
        ));
    }

    let mut clean = Vec::with_capacity(n);
    let mut observed = Vec::with_capacity(n);
    for _ in 0..n {
        for dst in [&mut clean, &mut observed] {
            let at = cur.pos;
            let y = cur.u32("label")? as usize;
            if y >= k {
                return Err(cur.fail(at, format!("label {y} not below K = {k}")));
            }
            dst.push(y);
        }
    }
    let count = floats.unwrap_or(0);
    let mut tokens = Vec::with_capacity(count);
    for _ in 0..count {
        let at = cur.pos;
        let b = cur.take(4, "token")?;
        let v = f32::from_le_bytes([b[0], b[1], b[2], b[3]]);
        if !v.is_finite() {
            return Err(cur.fail(at, "non-finite token value"));
        }
        tokens.push(v);
    }
    FeatureDataset::new(
        m,
        d_v,
        k,
        tokens,
        clean,
        observed,
        Provenance::Ingested {
            path: origin.to_string(),
        },
    )
}

pub fn load_features(path: impl AsRef<Path>) -> Result<FeatureDataset> {
    let path = path.as_ref();
    let bytes = std::fs::read(path)?;
    read_features(&bytes, &path.display().to_string())
}

#[cfg(test)]
mod tests {
    use super::super::{generate_synthetic, inject_symmetric_noise, SyntheticSpec};
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn sample() -> FeatureDataset {
        let ds = generate_synthetic(&SyntheticSpec {
            classes: 3,
            per_class: 4,
            tokens: 3,
            n_informative: 2,
            dim: 8,
            ..SyntheticSpec::default()
        })
        .unwrap();
        inject_symmetric_noise(&ds, 0.5, 1).unwrap()
    }

    fn bytes_of(ds: &FeatureDataset) -> Vec<u8> {
        let mut out = Vec::new();
        write_features(ds, &mut out).unwrap();
        out
    }

    fn same_content(a: &FeatureDataset, b: &FeatureDataset) {
        assert_eq!(a.len(), b.len());
        assert_eq!(a.tokens_per_sample(), b.tokens_per_sample());
        assert_eq!(a.token_dim(), b.token_dim());
        assert_eq!(a.classes(), b.classes());
        assert_eq!(a.clean_labels(), b.clean_labels());
        assert_eq!(a.observed_labels(), b.observed_labels());
        assert_eq!(a.noise_mask(), b.noise_mask());
        let bits = |d: &FeatureDataset| d.raw_tokens().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(a), bits(b));
    }

    #[test]
    fn round_trip_through_file() {
        let ds = sample();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.vpft");
        save_features(&ds, &path).unwrap();
        let back = load_features(&path).unwrap();
        same_content(&ds, &back);
        assert_eq!(bytes_of(&back), std::fs::read(&path).unwrap());
    }

    #[test]
    fn layout_is_as_documented() {
        let ds = sample();
        let b = bytes_of(&ds);
        assert_eq!(&b[..4], b"VPFT");
        assert_eq!(u32::from_le_bytes(b[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(b[8..12].try_into().unwrap()), 12);
        assert_eq!(b.len(), 24 + 12 * 8 + 12 * 3 * 8 * 4);
        let first = f32::from_le_bytes(b[24 + 96..24 + 100].try_into().unwrap());
        assert_eq!(first.to_bits(), ds.raw_tokens()[0].to_bits());
    }

    #[test]
    fn empty_dataset_is_valid() {
        let ds = sample().subset(&[]).unwrap();
        let back = read_features(&bytes_of(&ds), "mem").unwrap();
        assert!(back.is_empty());
        assert_eq!(back.classes(), 3);
    }

    #[test]
    fn truncation_reports_offset() {
        let b = bytes_of(&sample());
        for cut in [0, 3, 10, 24, 30, b.len() - 1] {
            match read_features(&b[..cut], "mem") {
                Err(Error::Format { offset, .. }) => assert!(offset as usize <= cut),
                other => panic!("cut {cut}: {other:?}"),
            }
        }
    }

    #[test]
    fn typed_header_errors() {
        let good = bytes_of(&sample());
        let mut b = good.clone();
        b[0] = b'X';
        assert!(matches!(read_features(&b, "m"), Err(Error::Format { offset: 0, .. })));
        let mut b = good.clone();
        b[4] = 2;
        assert!(matches!(read_features(&b, "m"), Err(Error::Format { offset: 4, .. })));
        let mut b = good.clone();
        b[24..28].copy_from_slice(&7u32.to_le_bytes());
        assert!(matches!(read_features(&b, "m"), Err(Error::Format { offset: 24, .. })));
        let mut b = good.clone();
        b[8..12].copy_from_slice(&u32::MAX.to_le_bytes());
        assert!(matches!(read_features(&b, "m"), Err(Error::Format { .. })));
        let mut b = good;
        b.push(0);
        assert!(matches!(read_features(&b, "m"), Err(Error::Format { .. })));
    }

    #[test]
    fn fuzzed_files_never_panic() {
        let good = bytes_of(&sample());
        let mut rng = ChaCha8Rng::seed_from_u64(1234);
        for _ in 0..300 {
            let mut b = good.clone();
            match rng.random_range(0..3) {
                0 => {
                    let i = rng.random_range(0..HEADER_LEN.min(b.len()));
                    b[i] = rng.random();
                }
                1 => {
                    let len = rng.random_range(0..b.len());
                    b.truncate(len);
                }
                _ => {
                    for _ in 0..rng.random_range(1..8) {
                        let i = rng.random_range(0..b.len());
                        b[i] ^= 1 << rng.random_range(0..8);
                    }
                }
            }
            let _ = read_features(&b, "fuzz");
        }
    }
}
