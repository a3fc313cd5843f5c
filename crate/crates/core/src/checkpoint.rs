//! Binary model checkpoints.
//!
//! Layout, all integers little-endian:
//!   magic `DQPSA1`
//!   geometry: 12 u32 fields in `ModelGeometry` declaration order
//!   variant tag: u8
//!   parameter count: u32
//!   per parameter, in registry order:
//!     name length u16, name bytes (utf-8), rows u32, cols u32,
//!     group tag u8, rows*cols f64 values
//!
//! Every field a reader needs is checked against the freshly constructed
//! registry, so a checkpoint loads either exactly or not at all.

use std::path::Path;

use crate::model::{DqpsaModel, ModelGeometry, ParamGroup, Variant};
use crate::{write_atomic, Error, Result};

const MAGIC: &[u8; 6] = b"DQPSA1";

pub fn to_bytes(model: &DqpsaModel) -> Vec<u8> {
    let g = &model.geometry;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    for v in [
        g.d, g.heads, g.pdq_blocks, g.text_blocks, g.d_ff, g.d_img, g.d_raw, g.l_i, g.l_p,
        g.d_e, g.vocab_size, g.max_len,
    ] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    out.push(model.variant.tag());
    out.extend_from_slice(&(model.params().len() as u32).to_le_bytes());
    for var in model.params().vars() {
        out.extend_from_slice(&(var.name.len() as u16).to_le_bytes());
        out.extend_from_slice(var.name.as_bytes());
        out.extend_from_slice(&(var.rows as u32).to_le_bytes());
        out.extend_from_slice(&(var.cols as u32).to_le_bytes());
        out.push(var.group.tag());
        for v in &var.value {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.at < n {
            return Err(Error::Checkpoint(format!(
                "truncated: wanted {n} bytes at offset {}, have {}",
                self.at,
                self.bytes.len() - self.at
            )));
        }
        let s = &self.bytes[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n.checked_mul(8).ok_or_else(|| {
            Error::Checkpoint("parameter size overflows".into())
        })?)?;
        Ok(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    }
}

pub fn from_bytes(bytes: &[u8]) -> Result<DqpsaModel> {
    let mut r = Reader { bytes, at: 0 };
    if r.take(MAGIC.len())? != MAGIC {
        return Err(Error::Checkpoint("not a model checkpoint (bad magic)".into()));
    }
    let mut dims = [0usize; 12];
    for d in &mut dims {
        *d = r.u32()? as usize;
    }
    let [d, heads, pdq_blocks, text_blocks, d_ff, d_img, d_raw, l_i, l_p, d_e, vocab_size, max_len] =
        dims;
    let geometry = ModelGeometry {
        d,
        heads,
        pdq_blocks,
        text_blocks,
        d_ff,
        d_img,
        d_raw,
        l_i,
        l_p,
        d_e,
        vocab_size,
        max_len,
    };
    let tag = r.u8()?;
    let variant = Variant::from_tag(tag)
        .ok_or_else(|| Error::Checkpoint(format!("unknown variant tag {tag}")))?;
    let mut model = DqpsaModel::new(geometry, variant, 0)?;
    let count = r.u32()? as usize;
    let mut stored = Vec::with_capacity(count);
    let mut groups = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| Error::Checkpoint("parameter name is not utf-8".into()))?
            .to_string();
        let rows = r.u32()? as usize;
        let cols = r.u32()? as usize;
        let gtag = r.u8()?;
        let group = ParamGroup::from_tag(gtag).ok_or_else(|| {
            Error::Checkpoint(format!("unknown group tag {gtag} on `{name}`"))
        })?;
        let value = r.f64s(rows.checked_mul(cols).ok_or_else(|| {
            Error::Checkpoint(format!("parameter `{name}` shape overflows"))
        })?)?;
        groups.push((name.clone(), group));
        stored.push((name, rows, cols, value));
    }
    if r.at != bytes.len() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes after the last parameter",
            bytes.len() - r.at
        )));
    }
    model.load_values(stored)?;
    for ((name, group), var) in groups.iter().zip(model.params().vars()) {
        if *group != var.group {
            return Err(Error::Checkpoint(format!(
                "parameter `{name}` is tagged {} but belongs to {}",
                group.as_str(),
                var.group.as_str()
            )));
        }
    }
    Ok(model)
}

pub fn save(model: &DqpsaModel, path: &Path) -> Result<()> {
    write_atomic(path, &to_bytes(model))
}

pub fn load(path: &Path) -> Result<DqpsaModel> {
    if !path.is_file() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}
