//! Flat binary parameter checkpoints.
//!
//! Layout: magic "BRLB1", then per parameter: name length (u32 LE), name
//! bytes, rank (u32 LE), dims (u32 LE each), values (f64 LE). Round trips
//! are bit-exact.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensorcore::param::Parameter;
use crate::tensorcore::tensor::Tensor;

const MAGIC: &[u8; 5] = b"BRLB1";

pub fn save(path: &Path, params: &[&Parameter]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    for p in params {
        let name = p.name.as_bytes();
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name)?;
        let shape = p.tensor.shape();
        w.write_all(&(shape.len() as u32).to_le_bytes())?;
        for d in shape {
            w.write_all(&(*d as u32).to_le_bytes())?;
        }
        for v in p.tensor.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Vec<Parameter>> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 5];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Parse(format!("bad checkpoint magic in {}", path.display())));
    }
    let mut out = Vec::new();
    loop {
        let mut len4 = [0u8; 4];
        match r.read_exact(&mut len4) {
            Ok(()) => {}
            Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => break,
            Err(e) => return Err(e.into()),
        }
        let name_len = u32::from_le_bytes(len4) as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name)
            .map_err(|_| Error::Parse("non-utf8 parameter name".into()))?;
        r.read_exact(&mut len4)?;
        let rank = u32::from_le_bytes(len4) as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            r.read_exact(&mut len4)?;
            shape.push(u32::from_le_bytes(len4) as usize);
        }
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        let mut f8 = [0u8; 8];
        for _ in 0..n {
            r.read_exact(&mut f8)?;
            data.push(f64::from_le_bytes(f8));
        }
        out.push(Parameter::new(name, Tensor::new(shape, data)?));
    }
    Ok(out)
}
