//! Named-parameter checkpoint files.
//!
//! Flat record stream, little-endian throughout:
//! `u32 name_len | name UTF-8 | u32 rank | u32 extents[rank] | f32 data[]`.
//! Records are written in sorted name order; round-trips are bit-exact.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::Tensor;
use crate::error::{Error, Result};

pub fn save_tensors<'a>(
    path: &Path,
    tensors: impl IntoIterator<Item = (&'a String, &'a Tensor<f32>)>,
) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for (name, t) in tensors {
        let nb = name.as_bytes();
        w.write_all(&(nb.len() as u32).to_le_bytes())?;
        w.write_all(nb)?;
        w.write_all(&(t.rank() as u32).to_le_bytes())?;
        for &d in t.shape() {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        for &v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load_tensors(path: &Path) -> Result<BTreeMap<String, Tensor<f32>>> {
    let mut r = BufReader::new(File::open(path)?);
    let mut out = BTreeMap::new();
    loop {
        let mut len4 = [0u8; 4];
        match r.read_exact(&mut len4) {
            Ok(()) => {}
            Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => break,
            Err(e) => return Err(e.into()),
        }
        let name_len = u32::from_le_bytes(len4) as usize;
        let mut name_bytes = vec![0u8; name_len];
        r.read_exact(&mut name_bytes)?;
        let name = String::from_utf8(name_bytes)
            .map_err(|_| Error::Parse("checkpoint name is not UTF-8".into()))?;
        let mut rank4 = [0u8; 4];
        r.read_exact(&mut rank4)?;
        let rank = u32::from_le_bytes(rank4) as usize;
        if rank > 8 {
            return Err(Error::Parse(format!("implausible rank {} for `{}`", rank, name)));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            let mut d4 = [0u8; 4];
            r.read_exact(&mut d4)?;
            shape.push(u32::from_le_bytes(d4) as usize);
        }
        let n: usize = shape.iter().product();
        let mut buf = vec![0u8; n * 4];
        r.read_exact(&mut buf)?;
        let data: Vec<f32> = buf
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        let t = Tensor::new(shape, data)
            .map_err(|e| Error::Parse(format!("checkpoint record `{}`: {}", name, e)))?;
        if out.insert(name.clone(), t).is_some() {
            return Err(Error::Parse(format!("duplicate checkpoint record `{}`", name)));
        }
    }
    Ok(out)
}
