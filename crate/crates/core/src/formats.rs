//! Binary dataset and checkpoint files.
//!
//! Both are little-endian with a 4-byte magic, a `u32` format version and a
//! trailing CRC-64. A dataset file stores its pairs as `low` then `high`
//! samples for each pair; the checksum covers that payload. A checkpoint
//! stores a length-prefixed JSON header describing the architecture followed
//! by every parameter in network order; the checksum covers header and
//! parameters.

use std::fs;
use std::path::Path;

use crc::{Crc, CRC_64_XZ};
use serde::{Deserialize, Serialize};

use crate::calibnet::{AblationFlags, AutoEncoder, CalibArch, CalibModel, Ppn, Trunk};
use crate::error::{Error, Result};
use crate::nn::{DenseLayer, ParamSet};
use crate::signal::{ShockSignal, SignalPair};

pub const DATASET_MAGIC: [u8; 4] = *b"SHKD";
pub const CHECKPOINT_MAGIC: [u8; 4] = *b"SHKM";
pub const FORMAT_VERSION: u32 = 1;

const CRC64: Crc<u64> = Crc::<u64>::new(&CRC_64_XZ);
const DATASET_HEADER: usize = 4 + 4 + 8 + 4 + 4;

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| {
            Error::Format(format!("truncated file: need {n} bytes at offset {}", self.pos))
        })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_bits(self.u64()?))
    }
}

fn check_magic(r: &mut Reader<'_>, magic: [u8; 4]) -> Result<()> {
    let got = r.take(4)?;
    if got != magic {
        return Err(Error::Format(format!("bad magic {got:?}, expected {magic:?}")));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported format version {version}")));
    }
    Ok(())
}

fn verify_crc(covered: &[u8], stored: u64) -> Result<()> {
    let computed = CRC64.checksum(covered);
    if stored != computed {
        return Err(Error::ChecksumMismatch { stored, computed });
    }
    Ok(())
}

fn push_f64s(out: &mut Vec<u8>, v: &[f64]) {
    for x in v {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

fn read_f64s(bytes: &[u8]) -> Vec<f64> {
    bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect()
}

/// Pairs of equal length and sample rate. Drop ids are not stored; reading
/// numbers the pairs from zero in file order.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetFile {
    pub sample_rate: f64,
    pub signal_length: usize,
    pub pairs: Vec<SignalPair>,
}

impl DatasetFile {
    pub fn new(pairs: Vec<SignalPair>) -> Result<Self> {
        let first = pairs.first().ok_or(Error::EmptyDataset)?;
        let (sample_rate, signal_length) = (first.low.sample_rate, first.low.len());
        for p in &pairs {
            if p.low.len() != signal_length || p.high.len() != signal_length {
                return Err(Error::DimensionMismatch {
                    expected: signal_length,
                    actual: p.low.len().max(p.high.len()),
                });
            }
            if p.low.sample_rate != sample_rate || p.high.sample_rate != sample_rate {
                return Err(Error::InvalidConfig("pairs have different sample rates".into()));
            }
        }
        u32::try_from(pairs.len()).map_err(|_| Error::InvalidConfig("too many pairs".into()))?;
        u32::try_from(signal_length).map_err(|_| Error::InvalidConfig("signals too long".into()))?;
        Ok(Self {
            sample_rate,
            signal_length,
            pairs,
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let payload_len = self.pairs.len() * 2 * self.signal_length * 8;
        let mut out = Vec::with_capacity(DATASET_HEADER + payload_len + 8);
        out.extend_from_slice(&DATASET_MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&self.sample_rate.to_le_bytes());
        out.extend_from_slice(&(self.pairs.len() as u32).to_le_bytes());
        out.extend_from_slice(&(self.signal_length as u32).to_le_bytes());
        for p in &self.pairs {
            push_f64s(&mut out, &p.low.samples);
            push_f64s(&mut out, &p.high.samples);
        }
        let crc = CRC64.checksum(&out[DATASET_HEADER..]);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { buf: bytes, pos: 0 };
        check_magic(&mut r, DATASET_MAGIC)?;
        let sample_rate = r.f64()?;
        let count = r.u32()? as usize;
        let len = r.u32()? as usize;
        if !(sample_rate > 0.0 && sample_rate.is_finite()) {
            return Err(Error::Format(format!("bad sample rate {sample_rate}")));
        }
        let payload_len = count
            .checked_mul(2 * len * 8)
            .ok_or_else(|| Error::Format("payload size overflows".into()))?;
        if bytes.len() != DATASET_HEADER + payload_len + 8 {
            return Err(Error::Format(format!(
                "expected {} bytes for {count} pairs of length {len}, found {}",
                DATASET_HEADER + payload_len + 8,
                bytes.len()
            )));
        }
        let payload = r.take(payload_len)?;
        verify_crc(payload, r.u64()?)?;
        let values = read_f64s(payload);
        let pairs = values
            .chunks_exact((2 * len).max(1))
            .take(count)
            .enumerate()
            .map(|(i, c)| {
                SignalPair::new(
                    ShockSignal::new(c[..len].to_vec(), sample_rate),
                    ShockSignal::new(c[len..].to_vec(), sample_rate),
                    i as u64,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            sample_rate,
            signal_length: len,
            pairs,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Calibnet,
    Autoencoder,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct NetworkDesc {
    name: String,
    layers: Vec<DenseLayer>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CheckpointHeader {
    kind: ModelKind,
    arch: CalibArch,
    flags: AblationFlags,
    networks: Vec<NetworkDesc>,
}

/// A trained calibration network or autoencoder baseline.
#[derive(Debug, Clone, PartialEq)]
pub enum CheckpointFile {
    Calibnet(CalibModel),
    Autoencoder(AutoEncoder),
}

impl CheckpointFile {
    pub fn kind(&self) -> ModelKind {
        match self {
            CheckpointFile::Calibnet(_) => ModelKind::Calibnet,
            CheckpointFile::Autoencoder(_) => ModelKind::Autoencoder,
        }
    }

    fn parts(&self) -> (CalibArch, AblationFlags, Vec<(&'static str, &ParamSet)>) {
        match self {
            CheckpointFile::Calibnet(m) => (
                m.arch,
                m.flags,
                vec![
                    ("encoder", &m.trunk.encoder),
                    ("decoder", &m.trunk.decoder),
                    ("ppn_compress", &m.ppn.compress),
                    ("ppn_head", &m.ppn.head),
                ],
            ),
            CheckpointFile::Autoencoder(a) => (
                a.arch,
                AblationFlags {
                    use_linf_term: a.use_linf_term,
                    ..AblationFlags::default()
                },
                vec![("encoder", &a.trunk.encoder), ("decoder", &a.trunk.decoder)],
            ),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let (arch, flags, nets) = self.parts();
        let header = CheckpointHeader {
            kind: self.kind(),
            arch,
            flags,
            networks: nets
                .iter()
                .map(|(name, p)| NetworkDesc {
                    name: (*name).to_string(),
                    layers: p.layers().to_vec(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header).map_err(|e| Error::Format(e.to_string()))?;
        let mut out = Vec::new();
        out.extend_from_slice(&CHECKPOINT_MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, p) in &nets {
            push_f64s(&mut out, p.values());
        }
        let crc = CRC64.checksum(&out[12..]);
        out.extend_from_slice(&crc.to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { buf: bytes, pos: 0 };
        check_magic(&mut r, CHECKPOINT_MAGIC)?;
        let header_len = r.u32()? as usize;
        let json = r.take(header_len)?;
        if bytes.len() < r.pos + 8 {
            return Err(Error::Format("truncated checkpoint".into()));
        }
        let payload = r.take(bytes.len() - r.pos - 8)?;
        verify_crc(&bytes[12..r.pos], r.u64()?)?;
        let header: CheckpointHeader =
            serde_json::from_slice(json).map_err(|e| Error::Format(format!("bad checkpoint header: {e}")))?;
        header.arch.validate()?;

        let arch = header.arch;
        let expected: Vec<(&str, Vec<DenseLayer>)> = match header.kind {
            ModelKind::Calibnet => vec![
                ("encoder", arch.encoder_layers()),
                ("decoder", arch.decoder_layers()),
                ("ppn_compress", arch.compress_layers()),
                ("ppn_head", arch.head_layers()),
            ],
            ModelKind::Autoencoder => vec![("encoder", arch.encoder_layers()), ("decoder", arch.decoder_layers())],
        };
        let described: Vec<(&str, Vec<DenseLayer>)> =
            header.networks.iter().map(|n| (n.name.as_str(), n.layers.clone())).collect();
        if described != expected {
            return Err(Error::Format("network layout does not match the architecture".into()));
        }
        let total: usize = expected.iter().flat_map(|(_, ls)| ls.iter().map(|l| l.param_count())).sum();
        if payload.len() != total * 8 {
            return Err(Error::Format(format!(
                "payload holds {} bytes, architecture needs {}",
                payload.len(),
                total * 8
            )));
        }
        let values = read_f64s(payload);
        let mut offset = 0;
        let mut nets = Vec::new();
        for (_, layers) in &expected {
            let p = ParamSet::zeros(layers)?;
            let n = p.len();
            nets.push(ParamSet::unflatten(layers, values[offset..offset + n].to_vec())?);
            offset += n;
        }
        let mut nets = nets.into_iter();
        let mut next = || nets.next().expect("one set per network");
        let trunk = Trunk {
            encoder: next(),
            decoder: next(),
        };
        Ok(match header.kind {
            ModelKind::Calibnet => CheckpointFile::Calibnet(CalibModel {
                arch,
                flags: header.flags,
                trunk,
                ppn: Ppn {
                    compress: next(),
                    head: next(),
                },
            }),
            ModelKind::Autoencoder => CheckpointFile::Autoencoder(AutoEncoder {
                arch,
                use_linf_term: header.flags.use_linf_term,
                trunk,
            }),
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}
