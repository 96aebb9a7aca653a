//! Binary checkpoint container.
//!
//! Little-endian throughout:
//!
//! ```text
//! magic "NIHC" | version u32 | section_count u32
//! section_count x { kind u32 | reserved u32 | offset u64 | length u64 }
//! section payloads
//! ```
//!
//! Section kinds:
//!
//! | kind | payload |
//! |------|---------|
//! | 1, 2 | network (seg, reg): input, output, hidden, blocks, latent_dim, activation as u32; param count u64; params f64 |
//! | 3    | latent table: dim u32, count u64, `count` shape indices u64, `count * dim` codes f64 |
//! | 4    | latent statistics: dim u32, mean (`dim`), covariance and inverse (`dim * dim` each), f64 |
//! | 5    | optimizer states: count u32, each `step u64, lr, beta1, beta2, eps f64, len u64, m, v` |
//! | 6    | metadata: UTF-8 JSON |
//!
//! Unknown kinds are skipped on read.

use std::fs;
use std::io::Write;
use std::path::Path;

use super::adam::OptimizerState;
use super::mlp::{MlpShape, ResidualMlp};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"NIHC";
pub const FORMAT_VERSION: u32 = 1;

const KIND_SEG: u32 = 1;
const KIND_REG: u32 = 2;
const KIND_LATENTS: u32 = 3;
const KIND_STATS: u32 = 4;
const KIND_OPTIMIZER: u32 = 5;
const KIND_METADATA: u32 = 6;

/// Per-shape codes with the shape index each row belongs to.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LatentBlock {
    pub dim: usize,
    pub shape_indices: Vec<u64>,
    /// Row-major `shape_indices.len() x dim`.
    pub codes: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StatsBlock {
    pub mean: Vec<f64>,
    pub covariance: Vec<f64>,
    pub inverse: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub seg_net: ResidualMlp<f64>,
    pub reg_net: ResidualMlp<f64>,
    pub latent_dim: usize,
    pub latents: LatentBlock,
    pub stats: Option<StatsBlock>,
    pub optimizers: Vec<OptimizerState>,
    pub metadata: serde_json::Value,
}

struct Writer(Vec<u8>);

impl Writer {
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64s(&mut self, vs: &[f64]) {
        vs.iter().for_each(|&v| self.f64(v));
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    at: usize,
    what: &'static str,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8], what: &'static str) -> Self {
        Self { buf, at: 0, what }
    }
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| {
            Error::format(self.what, format!("truncated at byte {} (wanted {n} more)", self.at))
        })?;
        let s = &self.buf[self.at..end];
        self.at = end;
        Ok(s)
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn len(&mut self, v: u64) -> Result<usize> {
        let n = usize::try_from(v).map_err(|_| Error::format(self.what, "length overflow"))?;
        // Each element occupies at least one byte, so this bounds allocations.
        if n > self.buf.len() {
            return Err(Error::format(self.what, format!("implausible element count {n}")));
        }
        Ok(n)
    }
    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        if n.saturating_mul(8) > self.buf.len() - self.at {
            return Err(Error::format(self.what, "truncated real array"));
        }
        (0..n).map(|_| self.f64()).collect()
    }
}

fn encode_net(net: &ResidualMlp<f64>, latent_dim: usize) -> Vec<u8> {
    let s = net.shape();
    let mut w = Writer(Vec::new());
    for v in [s.input_dim, s.output_dim, s.hidden_dim, s.num_blocks, latent_dim] {
        w.u32(v as u32);
    }
    w.u32(0); // relu
    w.u64(net.params().len() as u64);
    w.f64s(net.params());
    w.0
}

fn decode_net(buf: &[u8]) -> Result<(ResidualMlp<f64>, usize)> {
    let mut r = Reader::new(buf, "network section");
    let dims: Vec<usize> = (0..5).map(|_| r.u32().map(|v| v as usize)).collect::<Result<_>>()?;
    let activation = r.u32()?;
    if activation != 0 {
        return Err(Error::format("network section", format!("unknown activation code {activation}")));
    }
    let count = r.u64()?;
    let count = r.len(count)?;
    let shape = MlpShape::new(dims[0], dims[1], dims[2], dims[3]);
    if count != shape.param_count() {
        return Err(Error::format(
            "network section",
            format!("{count} parameters stored, shape {shape:?} needs {}", shape.param_count()),
        ));
    }
    let params = r.f64s(count)?;
    Ok((ResidualMlp::from_params(shape, params)?, dims[4]))
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut sections: Vec<(u32, Vec<u8>)> = vec![
            (KIND_SEG, encode_net(&self.seg_net, self.latent_dim)),
            (KIND_REG, encode_net(&self.reg_net, self.latent_dim)),
        ];

        let lat = &self.latents;
        if lat.codes.len() != lat.shape_indices.len() * lat.dim {
            return Err(Error::shape("latent table codes do not match its index list"));
        }
        let mut w = Writer(Vec::new());
        w.u32(lat.dim as u32);
        w.u64(lat.shape_indices.len() as u64);
        lat.shape_indices.iter().for_each(|&i| w.u64(i));
        w.f64s(&lat.codes);
        sections.push((KIND_LATENTS, w.0));

        if let Some(stats) = &self.stats {
            let d = stats.mean.len();
            if stats.covariance.len() != d * d || stats.inverse.len() != d * d {
                return Err(Error::shape("latent statistics are not square"));
            }
            let mut w = Writer(Vec::new());
            w.u32(d as u32);
            w.f64s(&stats.mean);
            w.f64s(&stats.covariance);
            w.f64s(&stats.inverse);
            sections.push((KIND_STATS, w.0));
        }

        let mut w = Writer(Vec::new());
        w.u32(self.optimizers.len() as u32);
        for st in &self.optimizers {
            w.u64(st.step_count);
            w.f64s(&[st.lr, st.beta1, st.beta2, st.eps]);
            w.u64(st.len() as u64);
            w.f64s(&st.first_moment);
            w.f64s(&st.second_moment);
        }
        sections.push((KIND_OPTIMIZER, w.0));
        sections.push((KIND_METADATA, serde_json::to_vec(&self.metadata)?));

        let header_len = 12 + sections.len() * 24;
        let mut out = Writer(Vec::new());
        out.0.extend_from_slice(MAGIC);
        out.u32(FORMAT_VERSION);
        out.u32(sections.len() as u32);
        let mut offset = header_len as u64;
        for (kind, payload) in &sections {
            out.u32(*kind);
            out.u32(0);
            out.u64(offset);
            out.u64(payload.len() as u64);
            offset += payload.len() as u64;
        }
        for (_, payload) in sections {
            out.0.extend_from_slice(&payload);
        }
        Ok(out.0)
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader::new(buf, "checkpoint header");
        if r.take(4)? != MAGIC {
            return Err(Error::format("checkpoint header", "bad magic"));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::format("checkpoint header", format!("unsupported version {version}")));
        }
        let count = r.u32()? as usize;
        let mut table = Vec::with_capacity(count.min(64));
        for _ in 0..count {
            let kind = r.u32()?;
            let _reserved = r.u32()?;
            let offset = r.u64()? as usize;
            let length = r.u64()? as usize;
            let end = offset
                .checked_add(length)
                .filter(|&e| e <= buf.len())
                .ok_or_else(|| Error::format("checkpoint header", format!("section {kind} out of bounds")))?;
            table.push((kind, &buf[offset..end]));
        }
        let section = |kind: u32| table.iter().find(|(k, _)| *k == kind).map(|(_, s)| *s);

        let (seg_net, latent_dim) =
            decode_net(section(KIND_SEG).ok_or_else(|| Error::format("checkpoint", "missing seg network"))?)?;
        let (reg_net, reg_latent_dim) =
            decode_net(section(KIND_REG).ok_or_else(|| Error::format("checkpoint", "missing reg network"))?)?;
        if reg_latent_dim != latent_dim {
            return Err(Error::format("checkpoint", "networks disagree on latent dimension"));
        }

        let mut latents = LatentBlock { dim: latent_dim, ..Default::default() };
        if let Some(s) = section(KIND_LATENTS) {
            let mut r = Reader::new(s, "latent section");
            latents.dim = r.u32()? as usize;
            let n = r.u64()?;
            let n = r.len(n)?;
            latents.shape_indices = (0..n).map(|_| r.u64()).collect::<Result<_>>()?;
            latents.codes = r.f64s(n * latents.dim)?;
        }

        let stats = match section(KIND_STATS) {
            Some(s) => {
                let mut r = Reader::new(s, "statistics section");
                let d = r.u32()? as usize;
                Some(StatsBlock { mean: r.f64s(d)?, covariance: r.f64s(d * d)?, inverse: r.f64s(d * d)? })
            }
            None => None,
        };

        let mut optimizers = Vec::new();
        if let Some(s) = section(KIND_OPTIMIZER) {
            let mut r = Reader::new(s, "optimizer section");
            let n = r.u32()? as usize;
            for _ in 0..n {
                let step_count = r.u64()?;
                let (lr, beta1, beta2, eps) = (r.f64()?, r.f64()?, r.f64()?, r.f64()?);
                let len = r.u64()?;
                let len = r.len(len)?;
                optimizers.push(OptimizerState {
                    first_moment: r.f64s(len)?,
                    second_moment: r.f64s(len)?,
                    step_count,
                    lr,
                    beta1,
                    beta2,
                    eps,
                });
            }
        }

        let metadata = match section(KIND_METADATA) {
            Some(s) => serde_json::from_slice(s)?,
            None => serde_json::Value::Null,
        };

        Ok(Self { seg_net, reg_net, latent_dim, latents, stats, optimizers, metadata })
    }

    /// Writes to a sibling temporary file and renames it into place.
    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        Self::from_bytes(&fs::read(path)?)
    }
}

/// Write-temp-then-rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir)?;
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let tmp = dir.join(format!(".{name}.tmp{}", std::process::id()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}
