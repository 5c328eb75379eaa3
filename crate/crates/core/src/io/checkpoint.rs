//! Binary checkpoints and embedding dumps, little-endian throughout.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::models::ParamStore;

pub const CHECKPOINT_MAGIC: &[u8; 9] = b"STARCKPT1";
pub const EMBEDDING_MAGIC: &[u8; 8] = b"STAREMB1";

/// Buffer entries are stored with this name prefix.
const BUFFER_PREFIX: &str = "buffer/";

/// Writes `bytes` to a sibling temp file, then renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = Path::new(&tmp);
    {
        let mut f = fs::File::create(tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(tmp, path)?;
    Ok(())
}

fn put_entry(out: &mut Vec<u8>, name: &str, shape: &[usize], data: impl Iterator<Item = f32>) -> Result<()> {
    let name_len = u16::try_from(name.len()).map_err(|_| Error::Format(format!("name too long: {name}")))?;
    out.extend_from_slice(&name_len.to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    let rank = u8::try_from(shape.len()).map_err(|_| Error::Format("rank exceeds 255".into()))?;
    out.push(rank);
    for &d in shape {
        let d = u32::try_from(d).map_err(|_| Error::Format("dimension exceeds u32".into()))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(())
}

/// Serializes parameters, then buffers, with a trailing CRC32.
pub fn encode_checkpoint(store: &ParamStore<f32>) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    let count =
        u32::try_from(store.len() + store.buffers().len()).map_err(|_| Error::Format("too many tensors".into()))?;
    out.extend_from_slice(&count.to_le_bytes());
    for (name, t) in store.names().iter().zip(store.params()) {
        put_entry(&mut out, name, t.shape(), t.data().iter().copied())?;
    }
    for (name, b) in store.buffer_names().iter().zip(store.buffers()) {
        put_entry(
            &mut out,
            &format!("{BUFFER_PREFIX}{name}"),
            &[b.len()],
            b.iter().map(|&v| v as f32),
        )?;
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Format("checkpoint truncated".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<ParamStore<f32>> {
    if bytes.len() < CHECKPOINT_MAGIC.len() + 8 {
        return Err(Error::Format("checkpoint truncated".into()));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes([tail[0], tail[1], tail[2], tail[3]]);
    if crc32fast::hash(body) != stored {
        return Err(Error::Format("checkpoint CRC mismatch".into()));
    }
    if &body[..CHECKPOINT_MAGIC.len()] != CHECKPOINT_MAGIC {
        return Err(Error::Format("not a checkpoint (bad magic)".into()));
    }
    let mut r = Reader {
        buf: body,
        pos: CHECKPOINT_MAGIC.len(),
    };
    let count = r.u32()? as usize;
    let (mut names, mut params, mut buffer_names, mut buffers) = (vec![], vec![], vec![], vec![]);
    for _ in 0..count {
        let len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = r.u8()? as usize;
        let shape = (0..rank)
            .map(|_| r.u32().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let raw = r.take(
            n.checked_mul(4)
                .ok_or_else(|| Error::Format("tensor too large".into()))?,
        )?;
        let data: Vec<f32> = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        match name.strip_prefix(BUFFER_PREFIX) {
            Some(b) => {
                buffer_names.push(b.to_string());
                buffers.push(data.into_iter().map(f64::from).collect());
            }
            None => {
                names.push(name);
                params.push(Tensor::new(&shape, data)?);
            }
        }
    }
    if r.pos != body.len() {
        return Err(Error::Format("trailing bytes after the last tensor".into()));
    }
    ParamStore::from_parts(names, params, buffer_names, buffers)
}

pub fn save_checkpoint(path: &Path, store: &ParamStore<f32>) -> Result<()> {
    write_atomic(path, &encode_checkpoint(store)?)
}

pub fn load_checkpoint(path: &Path) -> Result<ParamStore<f32>> {
    decode_checkpoint(&fs::read(path)?)
}

/// `n × d` matrix with magic, `u32 n`, `u32 d`, then `f32` rows.
pub fn encode_embeddings(rows: usize, cols: usize, data: &[f32]) -> Result<Vec<u8>> {
    if data.len() != rows * cols {
        return Err(Error::shape(
            "embedding dump",
            format!("{} values for {rows}x{cols}", data.len()),
        ));
    }
    let mut out = Vec::with_capacity(16 + 4 * data.len());
    out.extend_from_slice(EMBEDDING_MAGIC);
    out.extend_from_slice(&(rows as u32).to_le_bytes());
    out.extend_from_slice(&(cols as u32).to_le_bytes());
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_embeddings(bytes: &[u8]) -> Result<(usize, usize, Vec<f32>)> {
    if bytes.len() < 16 || &bytes[..8] != EMBEDDING_MAGIC {
        return Err(Error::Format("not an embedding dump".into()));
    }
    let n = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let d = u32::from_le_bytes(bytes[12..16].try_into().expect("4 bytes")) as usize;
    if bytes.len() != 16 + 4 * n * d {
        return Err(Error::Format(format!(
            "embedding dump length {} does not match {n}x{d}",
            bytes.len()
        )));
    }
    let data = bytes[16..]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    Ok((n, d, data))
}
