//! GMAB binary record format (little-endian):
//!
//! ```text
//! "GMAB" | version u32 | n_tokens u32 | a_tokens u32 | label u32
//! | id_len u32 | id bytes | aspect_position_count u32 | positions u32[]
//! | token_feats f32[n×768] | aspect_feats f32[a×768]
//! | image_grid f32[49×2048] | adjacency u8[n×n]
//! ```
//!
//! Features are narrowed to `f32` on write and widened back on read, so a
//! round trip is bit-exact for values representable in `f32`.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{validate_record, FeatureRecord, Polarity, IMAGE_DIM, IMAGE_REGIONS, TEXT_DIM};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const GMAB_MAGIC: [u8; 4] = *b"GMAB";
pub const GMAB_VERSION: u32 = 1;

/// Serializes a valid record, returning the number of bytes written.
pub fn write_record<W: Write>(r: &FeatureRecord, sink: &mut W) -> Result<u64> {
    let violations = validate_record(r);
    if !violations.is_empty() {
        return Err(Error::Validation(violations));
    }
    let mut out = Vec::with_capacity(
        32 + r.id.len()
            + 4 * r.aspect_positions.len()
            + 4 * (r.token_feats.len() + r.aspect_feats.len() + r.image_grid.len())
            + r.adjacency.len(),
    );
    let u32_of = |v: usize| v as u32;
    out.extend_from_slice(&GMAB_MAGIC);
    for v in [GMAB_VERSION, u32_of(r.n_tokens), u32_of(r.aspect_tokens()), r.label.index() as u32, u32_of(r.id.len())] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(r.id.as_bytes());
    out.extend_from_slice(&u32_of(r.aspect_positions.len()).to_le_bytes());
    for &p in &r.aspect_positions {
        out.extend_from_slice(&u32_of(p).to_le_bytes());
    }
    for t in [&r.token_feats, &r.aspect_feats, &r.image_grid] {
        for &v in t.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out.extend(r.adjacency.data().iter().map(|&v| v as u8));
    sink.write_all(&out)?;
    Ok(out.len() as u64)
}

struct CountingReader<R> {
    inner: R,
    offset: u64,
}

impl<R: Read> CountingReader<R> {
    fn bytes(&mut self, n: usize, what: &'static str) -> Result<Vec<u8>> {
        let mut buf = vec![0u8; n];
        match self.inner.read_exact(&mut buf) {
            Ok(()) => {
                self.offset += n as u64;
                Ok(buf)
            }
            Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => Err(Error::Truncated { offset: self.offset, what }),
            Err(e) => Err(e.into()),
        }
    }

    fn u32(&mut self, what: &'static str) -> Result<u32> {
        let b = self.bytes(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn f32s(&mut self, count: usize, what: &'static str) -> Result<Vec<f64>> {
        let b = self.bytes(4 * count, what)?;
        Ok(b.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64).collect())
    }
}

/// Decodes and validates one record.
pub fn read_record<R: Read>(source: &mut R) -> Result<FeatureRecord> {
    let mut rd = CountingReader { inner: source, offset: 0 };
    let magic = rd.bytes(4, "magic")?;
    if magic != GMAB_MAGIC {
        return Err(Error::BadMagic { expected: GMAB_MAGIC, found: [magic[0], magic[1], magic[2], magic[3]] });
    }
    let version = rd.u32("version")?;
    if version != GMAB_VERSION {
        return Err(Error::BadVersion(version));
    }
    let n = rd.u32("n_tokens")? as usize;
    let a = rd.u32("a_tokens")? as usize;
    let label_raw = rd.u32("label")?;
    let id_len = rd.u32("id_len")? as usize;
    let id_bytes = rd.bytes(id_len, "id")?;
    let n_pos = rd.u32("aspect_position_count")? as usize;
    let mut positions = Vec::with_capacity(n_pos.min(1 << 16));
    for _ in 0..n_pos {
        positions.push(rd.u32("positions")? as usize);
    }
    let token_feats = rd.f32s(n * TEXT_DIM, "token_feats")?;
    let aspect_feats = rd.f32s(a * TEXT_DIM, "aspect_feats")?;
    let image_grid = rd.f32s(IMAGE_REGIONS * IMAGE_DIM, "image_grid")?;
    let adjacency = rd.bytes(n * n, "adjacency")?;

    let mut problems = Vec::new();
    let label = Polarity::from_index(label_raw as usize).unwrap_or_else(|| {
        problems.push(format!("label {label_raw} is not a class index"));
        Polarity::Negative
    });
    let id = String::from_utf8(id_bytes).unwrap_or_else(|_| {
        problems.push("id is not valid UTF-8".into());
        String::new()
    });
    if !problems.is_empty() {
        return Err(Error::Validation(problems));
    }

    let record = FeatureRecord {
        id,
        n_tokens: n,
        token_feats: Tensor::from_vec(n, TEXT_DIM, token_feats)?,
        image_grid: Tensor::from_vec(IMAGE_REGIONS, IMAGE_DIM, image_grid)?,
        aspect_positions: positions,
        aspect_feats: Tensor::from_vec(a, TEXT_DIM, aspect_feats)?,
        adjacency: Tensor::from_vec(n, n, adjacency.into_iter().map(f64::from).collect())?,
        label,
    };
    let violations = validate_record(&record);
    if violations.is_empty() {
        Ok(record)
    } else {
        Err(Error::Validation(violations))
    }
}

pub fn write_record_file(r: &FeatureRecord, path: &Path) -> Result<u64> {
    let file = File::create(path).map_err(|e| Error::file(path, e))?;
    let mut w = BufWriter::new(file);
    let n = write_record(r, &mut w)?;
    w.flush().map_err(|e| Error::file(path, e))?;
    Ok(n)
}

pub fn read_record_file(path: &Path) -> Result<FeatureRecord> {
    let file = File::open(path).map_err(|e| Error::file(path, e))?;
    read_record(&mut BufReader::new(file))
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::feature_io::adjacency_from_edges;

    fn record(n: usize, a: usize, seed: u64) -> FeatureRecord {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut f32_tensor = |r: usize, c: usize| {
            Tensor::from_vec(r, c, (0..r * c).map(|_| rng.gen_range(-3.0f32..3.0) as f64).collect()).unwrap()
        };
        let token_feats = f32_tensor(n, TEXT_DIM);
        let aspect_feats = f32_tensor(a, TEXT_DIM);
        let image_grid = f32_tensor(IMAGE_REGIONS, IMAGE_DIM);
        let edges: Vec<_> = (1..n).map(|t| (t / 2, t)).collect();
        FeatureRecord {
            id: format!("rec-{seed}"),
            n_tokens: n,
            token_feats,
            image_grid,
            aspect_positions: if n > 1 { vec![0, n - 1] } else { vec![0] },
            aspect_feats,
            adjacency: adjacency_from_edges(n, &edges),
            label: Polarity::Positive,
        }
    }

    fn round_trip(r: &FeatureRecord) -> FeatureRecord {
        let mut buf = Vec::new();
        let written = write_record(r, &mut buf).unwrap();
        assert_eq!(written as usize, buf.len());
        read_record(&mut buf.as_slice()).unwrap()
    }

    #[test]
    fn minimal_and_max_length_round_trip() {
        for (n, a) in [(1, 1), (128, 3)] {
            let r = record(n, a, n as u64);
            assert_eq!(round_trip(&r), r);
        }
    }

    #[test]
    fn truncated_stream_reports_offset() {
        let r = record(3, 1, 9);
        let mut buf = Vec::new();
        write_record(&r, &mut buf).unwrap();
        let cut = &buf[..buf.len() - 5];
        match read_record(&mut &cut[..]) {
            Err(Error::Truncated { offset, what }) => {
                assert_eq!(what, "adjacency");
                assert_eq!(offset as usize, buf.len() - 9);
            }
            other => panic!("expected truncation, got {other:?}"),
        }
        assert!(matches!(read_record(&mut &buf[..2]), Err(Error::Truncated { offset: 0, what: "magic" })));
    }

    #[test]
    fn bad_magic_and_version_are_distinct() {
        let r = record(2, 1, 1);
        let mut buf = Vec::new();
        write_record(&r, &mut buf).unwrap();
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(read_record(&mut bad.as_slice()), Err(Error::BadMagic { .. })));
        let mut bad = buf.clone();
        bad[4] = 7;
        assert!(matches!(read_record(&mut bad.as_slice()), Err(Error::BadVersion(7))));
    }

    #[test]
    fn invalid_payload_is_a_validation_error() {
        let r = record(3, 1, 2);
        let mut buf = Vec::new();
        write_record(&r, &mut buf).unwrap();
        // Break adjacency symmetry: entry (0, 2) is the third adjacency byte.
        let adj_start = buf.len() - 9;
        buf[adj_start + 2] = 1;
        match read_record(&mut buf.as_slice()) {
            Err(Error::Validation(v)) => assert!(v.iter().any(|m| m == "adjacency not symmetric")),
            other => panic!("expected validation error, got {other:?}"),
        }
    }

    #[test]
    fn writing_an_invalid_record_fails() {
        let mut r = record(3, 1, 3);
        r.aspect_positions = vec![5];
        assert!(matches!(write_record(&r, &mut Vec::new()), Err(Error::Validation(_))));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn round_trip_is_bit_exact(n in 1usize..12, a in 1usize..4, seed in any::<u64>()) {
            let r = record(n, a, seed);
            let back = round_trip(&r);
            let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            prop_assert_eq!(bits(&back.token_feats), bits(&r.token_feats));
            prop_assert_eq!(bits(&back.image_grid), bits(&r.image_grid));
            prop_assert_eq!(back, r);
        }
    }
}
