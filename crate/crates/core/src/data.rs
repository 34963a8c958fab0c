//! `TPRLDATA` container for generated samples and demonstration labels.
//!
//! Layout (little-endian):
//!
//! ```text
//! "TPRLDATA" | u32 version | u32 N | u32 d_v | u32 d_q
//! u32 sample count
//!   per sample: u64 seed, u32 |R|, u32 relevant[|R|] (sorted),
//!               f64 tokens[N * d_v] (row-major), f64 query[d_q]
//! u32 section count
//!   per section: u32 name len, name, u64 payload len, payload
//!   "demos" payload: u32 trajectory count
//!     per trajectory: u64 seed, u32 step count
//!       per step: u32 K_t, u32 index_map[K_t], ceil(K_t / 8) label bytes, LSB first
//! u32 CRC32 of every preceding byte
//! ```
//!
//! Demonstration codes are not stored; they are recomputed from the sample
//! tokens with the frozen encoder when the demos are materialized.

use std::path::Path;

use crate::autoencoder::Autoencoder;
use crate::checkpoint::{open_container, write_atomic, Reader};
use crate::demos::{DemoStep, DemoTrajectory};
use crate::env::Sample;
use crate::error::{Error, Result};
use crate::tensor::Matrix;

pub const DATA_MAGIC: &[u8; 8] = b"TPRLDATA";
pub const DATA_VERSION: u32 = 1;
const DEMOS_SECTION: &str = "demos";

/// Labels of one demonstration step without the codes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DemoLabels {
    pub index_map: Vec<usize>,
    pub labels: Vec<bool>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DemoRecord {
    pub seed: u64,
    pub steps: Vec<DemoLabels>,
}

impl DemoRecord {
    pub fn from_trajectory(t: &DemoTrajectory) -> Self {
        Self {
            seed: t.seed,
            steps: t
                .steps
                .iter()
                .map(|s| DemoLabels {
                    index_map: s.index_map.clone(),
                    labels: s.labels.clone(),
                })
                .collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataFile {
    pub n_tokens: usize,
    pub token_dim: usize,
    pub query_dim: usize,
    pub samples: Vec<Sample>,
    pub demos: Option<Vec<DemoRecord>>,
}

impl DataFile {
    pub fn new(n_tokens: usize, token_dim: usize, query_dim: usize, samples: Vec<Sample>) -> Self {
        Self {
            n_tokens,
            token_dim,
            query_dim,
            samples,
            demos: None,
        }
    }

    /// Rebuilds full trajectories by encoding each sample's tokens.
    pub fn materialize_demos(&self, encoder: &Autoencoder) -> Result<Vec<DemoTrajectory>> {
        let records = self
            .demos
            .as_ref()
            .ok_or_else(|| Error::Format("data file has no demos section".into()))?;
        let mut out = Vec::with_capacity(records.len());
        for rec in records {
            let sample = self
                .samples
                .iter()
                .find(|s| s.seed == rec.seed)
                .ok_or_else(|| Error::Format(format!("demo seed {} has no sample", rec.seed)))?;
            let codes = encoder.encode(&sample.tokens)?;
            let steps = rec
                .steps
                .iter()
                .map(|s| DemoStep {
                    codes: codes.select_rows(&s.index_map),
                    index_map: s.index_map.clone(),
                    labels: s.labels.clone(),
                })
                .collect();
            out.push(DemoTrajectory {
                seed: rec.seed,
                query: sample.query.clone(),
                steps,
            });
        }
        Ok(out)
    }

    fn check(&self) -> Result<()> {
        for s in &self.samples {
            if s.tokens.shape() != (self.n_tokens, self.token_dim) || s.query.len() != self.query_dim {
                return Err(Error::dim("data", format!("sample {} disagrees with header dimensions", s.seed)));
            }
            if s.relevant.windows(2).any(|w| w[0] >= w[1]) || s.relevant.last().is_some_and(|&r| r >= self.n_tokens) {
                return Err(Error::Format(format!("sample {} relevant set not sorted within range", s.seed)));
            }
        }
        for rec in self.demos.iter().flatten() {
            for st in &rec.steps {
                if st.index_map.len() != st.labels.len() || st.index_map.iter().any(|&i| i >= self.n_tokens) {
                    return Err(Error::Format(format!("demo {} step is inconsistent", rec.seed)));
                }
            }
        }
        Ok(())
    }
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Format(format!("{v} exceeds u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn encode_demos(records: &[DemoRecord]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    put_u32(&mut out, records.len())?;
    for rec in records {
        out.extend_from_slice(&rec.seed.to_le_bytes());
        put_u32(&mut out, rec.steps.len())?;
        for st in &rec.steps {
            put_u32(&mut out, st.index_map.len())?;
            for &i in &st.index_map {
                put_u32(&mut out, i)?;
            }
            out.extend(pack_bits(&st.labels));
        }
    }
    Ok(out)
}

/// Packs bits eight per byte, bit `i` in byte `i / 8` at position `i % 8`.
pub fn pack_bits(bits: &[bool]) -> Vec<u8> {
    let mut out = vec![0u8; bits.len().div_ceil(8)];
    for (i, &b) in bits.iter().enumerate() {
        if b {
            out[i / 8] |= 1 << (i % 8);
        }
    }
    out
}

pub fn unpack_bits(bytes: &[u8], n: usize) -> Vec<bool> {
    (0..n).map(|i| bytes[i / 8] >> (i % 8) & 1 == 1).collect()
}

pub fn encode(file: &DataFile) -> Result<Vec<u8>> {
    file.check()?;
    let mut out = Vec::new();
    out.extend_from_slice(DATA_MAGIC);
    out.extend_from_slice(&DATA_VERSION.to_le_bytes());
    put_u32(&mut out, file.n_tokens)?;
    put_u32(&mut out, file.token_dim)?;
    put_u32(&mut out, file.query_dim)?;
    put_u32(&mut out, file.samples.len())?;
    for s in &file.samples {
        out.extend_from_slice(&s.seed.to_le_bytes());
        put_u32(&mut out, s.relevant.len())?;
        for &r in &s.relevant {
            put_u32(&mut out, r)?;
        }
        for v in s.tokens.data().iter().chain(&s.query) {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    match &file.demos {
        None => put_u32(&mut out, 0)?,
        Some(records) => {
            put_u32(&mut out, 1)?;
            put_u32(&mut out, DEMOS_SECTION.len())?;
            out.extend_from_slice(DEMOS_SECTION.as_bytes());
            let payload = encode_demos(records)?;
            out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
            out.extend(payload);
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

fn count(r: &mut Reader<'_>, what: &str, unit: usize) -> Result<usize> {
    let n = r.u32(what)? as usize;
    if n.saturating_mul(unit) > r.remaining() {
        return Err(Error::Truncated(format!("{what} {n} exceeds remaining bytes")));
    }
    Ok(n)
}

fn decode_demos(r: &mut Reader<'_>) -> Result<Vec<DemoRecord>> {
    let n = count(r, "trajectory count", 12)?;
    let mut records = Vec::with_capacity(n);
    for _ in 0..n {
        let seed = r.u64("demo seed")?;
        let n_steps = count(r, "step count", 4)?;
        let mut steps = Vec::with_capacity(n_steps);
        for _ in 0..n_steps {
            let k = count(r, "K_t", 4)?;
            let index_map = (0..k).map(|_| r.u32("index map").map(|v| v as usize)).collect::<Result<Vec<_>>>()?;
            let labels = unpack_bits(r.take(k.div_ceil(8), "labels")?, k);
            steps.push(DemoLabels { index_map, labels });
        }
        records.push(DemoRecord { seed, steps });
    }
    Ok(records)
}

pub fn decode(bytes: &[u8]) -> Result<DataFile> {
    let mut r = open_container(bytes, DATA_MAGIC, DATA_VERSION)?;
    let n_tokens = r.u32("N")? as usize;
    let token_dim = r.u32("d_v")? as usize;
    let query_dim = r.u32("d_q")? as usize;
    let per_sample = 12 + 8 * (n_tokens * token_dim + query_dim);
    let n_samples = count(&mut r, "sample count", per_sample)?;
    let mut samples = Vec::with_capacity(n_samples);
    for _ in 0..n_samples {
        let seed = r.u64("sample seed")?;
        let n_rel = count(&mut r, "relevant count", 4)?;
        let relevant = (0..n_rel).map(|_| r.u32("relevant").map(|v| v as usize)).collect::<Result<Vec<_>>>()?;
        let tokens = (0..n_tokens * token_dim).map(|_| r.f64("tokens")).collect::<Result<Vec<_>>>()?;
        let query = (0..query_dim).map(|_| r.f64("query")).collect::<Result<Vec<_>>>()?;
        samples.push(Sample {
            seed,
            tokens: Matrix::from_vec(n_tokens, token_dim, tokens)?,
            query,
            relevant,
        });
    }
    let mut demos = None;
    let n_sections = r.u32("section count")?;
    for _ in 0..n_sections {
        let name = r.string("section name")?;
        let len = r.u64("section length")? as usize;
        let payload = r.take(len, "section payload")?;
        if name == DEMOS_SECTION {
            if demos.is_some() {
                return Err(Error::Format("duplicate demos section".into()));
            }
            let mut pr = Reader::new(payload);
            demos = Some(decode_demos(&mut pr)?);
            if pr.remaining() != 0 {
                return Err(Error::Format("trailing bytes in demos section".into()));
            }
        }
    }
    if r.remaining() != 0 {
        return Err(Error::Format(format!("{} trailing bytes", r.remaining())));
    }
    let file = DataFile {
        n_tokens,
        token_dim,
        query_dim,
        samples,
        demos,
    };
    file.check()?;
    Ok(file)
}

pub fn save_data(file: &DataFile, path: &Path) -> Result<()> {
    write_atomic(path, &encode(file)?)
}

pub fn load_data(path: &Path) -> Result<DataFile> {
    decode(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{GeneratorConfig, SampleGenerator};

    fn small() -> DataFile {
        let g = SampleGenerator::new(GeneratorConfig {
            n_tokens: 12,
            token_dim: 6,
            query_dim: 3,
            n_relevant: 4,
            signal_rank: 2,
            ..GeneratorConfig::default()
        })
        .unwrap();
        let mut f = DataFile::new(12, 6, 3, g.generate_many(0..3));
        f.demos = Some(vec![DemoRecord {
            seed: 1,
            steps: vec![
                DemoLabels {
                    index_map: (0..12).collect(),
                    labels: (0..12).map(|i| i % 3 == 0).collect(),
                },
                DemoLabels {
                    index_map: vec![0, 3, 6, 9],
                    labels: vec![true, false, false, true],
                },
            ],
        }]);
        f
    }

    #[test]
    fn bit_packing_is_lsb_first() {
        let bits = [true, false, true, false, false, false, false, false, false, true];
        assert_eq!(pack_bits(&bits), vec![0b0000_0101, 0b0000_0010]);
        assert_eq!(unpack_bits(&pack_bits(&bits), bits.len()), bits);
    }

    #[test]
    fn round_trip() {
        let f = small();
        let bytes = encode(&f).unwrap();
        assert_eq!(&bytes[..8], b"TPRLDATA");
        assert_eq!(decode(&bytes).unwrap(), f);
        let mut plain = f.clone();
        plain.demos = None;
        assert_eq!(decode(&encode(&plain).unwrap()).unwrap(), plain);
    }

    #[test]
    fn corruption_rejected() {
        let bytes = encode(&small()).unwrap();
        assert!(matches!(decode(&bytes[..bytes.len() - 1]), Err(Error::Checksum { .. })));
        let mut bad = bytes.clone();
        bad[3] = b'x';
        assert!(matches!(decode(&bad), Err(Error::BadMagic { .. })));
        let mut flip = bytes.clone();
        flip[100] ^= 1;
        assert!(decode(&flip).is_err());
    }
}
