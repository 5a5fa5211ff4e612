use std::fs;
use std::io::Write;
use std::path::Path;

use super::Dataset;
use crate::autodiff::{ParamSet, Tensor};
use crate::error::{Error, Result};
use crate::real::Real;
use crate::tokenfield::{ChannelStats, TokenField};

pub const DATASET_VERSION: u32 = 1;
pub const CHECKPOINT_VERSION: u32 = 1;

const DATASET_MAGIC: [u8; 4] = *b"SFTK";
const CHECKPOINT_MAGIC: [u8; 4] = *b"SFCK";

/// Writes `bytes` to a sibling temp file, syncs it and renames it over
/// `path`.
fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let name = path.file_name().ok_or_else(|| Error::Malformed(format!("not a file path: {}", path.display())))?;
    let mut tmp_name = name.to_os_string();
    tmp_name.push(format!(".tmp{}", std::process::id()));
    let tmp = path.with_file_name(tmp_name);
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    Ok(result?)
}

pub fn write_text_atomic(path: &Path, text: &str) -> Result<()> {
    write_atomic(path, text.as_bytes())
}

/// Little-endian cursor that reports running off the end as truncation.
struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or(Error::TruncatedFile)?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f32s(&mut self, count: usize) -> Result<Vec<f32>> {
        let bytes = self.take(count.checked_mul(4).ok_or(Error::TruncatedFile)?)?;
        Ok(bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
    }

    fn header(&mut self, magic: [u8; 4], version: u32) -> Result<()> {
        let found = self.take(4)?;
        if found != magic {
            return Err(Error::BadMagic { expected: magic, found: found.try_into().unwrap() });
        }
        match self.u32()? {
            v if v == version => Ok(()),
            v => Err(Error::UnsupportedVersion(v)),
        }
    }

    fn finish(&self) -> Result<()> {
        if self.pos == self.buf.len() {
            Ok(())
        } else {
            Err(Error::Malformed(format!("{} trailing bytes", self.buf.len() - self.pos)))
        }
    }
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Malformed(format!("{v} does not fit in u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn encode_fields<T: Real>(fields: &[&TokenField<T>], labels: Option<&[u32]>, shape: (usize, usize)) -> Result<Vec<u8>> {
    let (n, c) = shape;
    let mut out = Vec::with_capacity(17 + fields.len() * (n * c + 1) * 4);
    out.extend_from_slice(&DATASET_MAGIC);
    out.extend_from_slice(&DATASET_VERSION.to_le_bytes());
    put_u32(&mut out, fields.len())?;
    put_u32(&mut out, n)?;
    put_u32(&mut out, c)?;
    out.push(labels.is_some() as u8);
    for f in fields {
        if f.shape() != shape {
            return Err(Error::shape(format!("dataset mixes {shape:?} and {:?}", f.shape())));
        }
        for v in f.as_slice() {
            out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
    }
    if let Some(labels) = labels {
        if labels.len() != fields.len() {
            return Err(Error::shape("one label per example required"));
        }
        for l in labels {
            out.extend_from_slice(&l.to_le_bytes());
        }
    }
    Ok(out)
}

/// `(N, c, fields, labels)`.
type Decoded = (usize, usize, Vec<TokenField<f32>>, Option<Vec<u32>>);

fn decode_fields(bytes: &[u8]) -> Result<Decoded> {
    let mut r = Reader { buf: bytes, pos: 0 };
    r.header(DATASET_MAGIC, DATASET_VERSION)?;
    let (count, n, c) = (r.u32()? as usize, r.u32()? as usize, r.u32()? as usize);
    let has_labels = match r.u8()? {
        0 => false,
        1 => true,
        b => return Err(Error::Malformed(format!("label flag {b}"))),
    };
    if n == 0 || c == 0 {
        return Err(Error::Malformed(format!("empty token shape {n}x{c}")));
    }
    let per = n.checked_mul(c).ok_or_else(|| Error::Malformed("shape overflow".into()))?;
    let mut fields = Vec::with_capacity(count.min(bytes.len() / (4 * per).max(1)));
    for _ in 0..count {
        let data = r.f32s(per)?;
        fields.push(TokenField::new(n, c, data).map_err(|e| Error::Malformed(e.to_string()))?);
    }
    let labels = if has_labels { Some((0..count).map(|_| r.u32()).collect::<Result<Vec<_>>>()?) } else { None };
    r.finish()?;
    Ok((n, c, fields, labels))
}

/// Writes an SFTK dataset. Values are stored as f32.
pub fn write_dataset<T: Real>(path: &Path, data: &Dataset<T>) -> Result<()> {
    let shape = data.shape().ok_or(Error::NoData)?;
    let refs: Vec<&TokenField<T>> = data.fields.iter().collect();
    write_atomic(path, &encode_fields(&refs, data.labels.as_deref(), shape)?)
}

pub fn read_dataset(path: &Path) -> Result<Dataset<f32>> {
    let (_, _, fields, labels) = decode_fields(&fs::read(path)?)?;
    if fields.is_empty() {
        return Err(Error::NoData);
    }
    Ok(Dataset { fields, labels })
}

/// Writes channel statistics as a two-example, one-token SFTK file.
pub fn write_stats<T: Real>(path: &Path, stats: &ChannelStats<T>) -> Result<()> {
    let c = stats.channels();
    let mu = TokenField::new(1, c, stats.mu().to_vec())?;
    let sigma = TokenField::new(1, c, stats.sigma().to_vec())?;
    write_atomic(path, &encode_fields(&[&mu, &sigma], None, (1, c))?)
}

pub fn read_stats(path: &Path) -> Result<ChannelStats<f32>> {
    let (n, _, fields, labels) = decode_fields(&fs::read(path)?)?;
    if fields.len() != 2 || n != 1 || labels.is_some() {
        return Err(Error::Malformed("stats file must hold two unlabeled one-token rows".into()));
    }
    ChannelStats::new(fields[0].as_slice().to_vec(), fields[1].as_slice().to_vec())
        .map_err(|e| Error::Malformed(e.to_string()))
}

/// One named tensor of a checkpoint.
#[derive(Clone, Debug, PartialEq)]
pub struct Section {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

/// Canonical config text plus named f32 tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub config: String,
    pub sections: Vec<Section>,
}

impl Checkpoint {
    pub fn new(config: impl Into<String>) -> Self {
        Self { config: config.into(), sections: Vec::new() }
    }

    pub fn push(&mut self, name: impl Into<String>, dims: Vec<usize>, data: Vec<f32>) {
        debug_assert_eq!(dims.iter().product::<usize>(), data.len());
        self.sections.push(Section { name: name.into(), dims, data });
    }

    pub fn section(&self, name: &str) -> Option<&Section> {
        self.sections.iter().find(|s| s.name == name)
    }

    /// Adds every tensor of `params` as a rank-2 section named
    /// `{prefix}{param name}`.
    pub fn push_params<T: Real>(&mut self, prefix: &str, params: &ParamSet<T>) {
        for (name, t) in params.iter() {
            self.push(
                format!("{prefix}{name}"),
                vec![t.rows, t.cols],
                t.data.iter().map(|v| v.as_f64() as f32).collect(),
            );
        }
    }

    /// Collects the matrix sections named `{strip}{family}...` as a
    /// parameter set with `strip` removed from every name.
    pub fn collect_params(&self, strip: &str, family: &str) -> Result<ParamSet<f32>> {
        let prefix = format!("{strip}{family}");
        let mut out = ParamSet::new();
        for s in self.sections.iter().filter(|s| s.name.starts_with(&prefix)) {
            let (rows, cols) = match s.dims[..] {
                [r, c] => (r, c),
                _ => return Err(Error::Malformed(format!("{} is not a matrix", s.name))),
            };
            out.add(&s.name[strip.len()..], Tensor::new(rows, cols, s.data.clone()));
        }
        if out.is_empty() {
            return Err(Error::Malformed(format!("no sections under {prefix:?}")));
        }
        Ok(out)
    }

    pub fn push_stats<T: Real>(&mut self, name: &str, stats: &ChannelStats<T>) {
        let c = stats.channels();
        let data = stats.mu().iter().chain(stats.sigma()).map(|v| v.as_f64() as f32).collect();
        self.push(name, vec![2, c], data);
    }

    pub fn stats(&self, name: &str) -> Result<ChannelStats<f32>> {
        let s = self.section(name).ok_or_else(|| Error::Malformed(format!("missing section {name}")))?;
        match s.dims[..] {
            [2, c] => ChannelStats::new(s.data[..c].to_vec(), s.data[c..].to_vec()),
            _ => Err(Error::Malformed(format!("{name} is not a stats section"))),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(&CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        put_u32(&mut out, self.config.len())?;
        out.extend_from_slice(self.config.as_bytes());
        put_u32(&mut out, self.sections.len())?;
        let mut seen = std::collections::HashSet::new();
        for s in &self.sections {
            if !seen.insert(&s.name) {
                return Err(Error::Malformed(format!("duplicate section {}", s.name)));
            }
            if s.dims.iter().product::<usize>() != s.data.len() {
                return Err(Error::Malformed(format!("section {} size mismatch", s.name)));
            }
            put_u32(&mut out, s.name.len())?;
            out.extend_from_slice(s.name.as_bytes());
            put_u32(&mut out, s.dims.len())?;
            for &d in &s.dims {
                put_u32(&mut out, d)?;
            }
            for v in &s.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { buf: bytes, pos: 0 };
        r.header(CHECKPOINT_MAGIC, CHECKPOINT_VERSION)?;
        let text = |b: &[u8]| String::from_utf8(b.to_vec()).map_err(|_| Error::Malformed("non UTF-8 text".into()));
        let len = r.u32()? as usize;
        let config = text(r.take(len)?)?;
        let count = r.u32()? as usize;
        let mut sections = Vec::new();
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = text(r.take(len)?)?;
            let rank = r.u32()? as usize;
            let dims = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let numel = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or(Error::TruncatedFile)?;
            let data = r.f32s(numel)?;
            sections.push(Section { name, dims, data });
        }
        let body = r.pos;
        let stored = r.u32()?;
        r.finish()?;
        let computed = crc32fast::hash(&bytes[..body]);
        if stored != computed {
            return Err(Error::ChecksumMismatch { stored, computed });
        }
        let mut seen = std::collections::HashSet::new();
        if let Some(s) = sections.iter().find(|s| !seen.insert(&s.name)) {
            return Err(Error::Malformed(format!("duplicate section {}", s.name)));
        }
        Ok(Self { config, sections })
    }
}

pub fn write_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    write_atomic(path, &ckpt.to_bytes()?)
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::from_bytes(&fs::read(path)?)
}
