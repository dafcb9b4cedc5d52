// SPDX-License-Identifier: MIT OR Apache-2.0

//! `.xcck` checkpoints.
//!
//! ```text
//! magic "XCCK" | version u32 | n_features u32 | d_model u32 | n_snapshots u32
//!   | steps u64 * n_snapshots
//!   | f32 arrays: W_enc[t] (each snapshot), b_enc, W_dec[t] (each snapshot),
//!     b_dec[t] (each snapshot), thresholds
//! ```
//!
//! All integers and floats are little endian; matrices are row major in the
//! shapes documented on [`CrosscoderModel`].

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::CrosscoderModel;
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"XCCK";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn write_checkpoint<W: Write>(mut w: W, model: &CrosscoderModel<f32>) -> std::io::Result<()> {
    w.write_all(&CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    w.write_all(&(model.n_features() as u32).to_le_bytes())?;
    w.write_all(&(model.d_model() as u32).to_le_bytes())?;
    w.write_all(&(model.n_snapshots() as u32).to_le_bytes())?;
    for s in &model.steps {
        w.write_all(&s.to_le_bytes())?;
    }
    let mut put = |vals: &mut dyn Iterator<Item = &f32>| -> std::io::Result<()> {
        for v in vals {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    };
    for m in &model.w_enc {
        put(&mut m.iter())?;
    }
    put(&mut model.b_enc.iter())?;
    for m in &model.w_dec {
        put(&mut m.iter())?;
    }
    for b in &model.b_dec {
        put(&mut b.iter())?;
    }
    put(&mut model.threshold.iter())?;
    Ok(())
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<CrosscoderModel<f32>> {
    let eof = |e: std::io::Error| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            Error::Format("truncated checkpoint".into())
        } else {
            Error::Format(format!("checkpoint read failed: {e}"))
        }
    };
    let mut b4 = [0u8; 4];
    r.read_exact(&mut b4).map_err(eof)?;
    if b4 != CHECKPOINT_MAGIC {
        return Err(Error::Format(format!("bad checkpoint magic {b4:02x?}")));
    }
    let mut u32s = [0u32; 4];
    for v in &mut u32s {
        r.read_exact(&mut b4).map_err(eof)?;
        *v = u32::from_le_bytes(b4);
    }
    let [version, n_features, d_model, n_snapshots] = u32s.map(|v| v as usize);
    if version != CHECKPOINT_VERSION as usize {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    if n_features == 0 || d_model == 0 || n_snapshots == 0 {
        return Err(Error::Format("checkpoint with empty dimension".into()));
    }
    let mut steps = Vec::with_capacity(n_snapshots);
    let mut b8 = [0u8; 8];
    for _ in 0..n_snapshots {
        r.read_exact(&mut b8).map_err(eof)?;
        steps.push(u64::from_le_bytes(b8));
    }
    let mut model = CrosscoderModel::<f32>::zeros(n_features, d_model, steps);
    for (_, block) in model.blocks_mut() {
        let mut bytes = vec![0u8; block.len() * 4];
        r.read_exact(&mut bytes).map_err(eof)?;
        for (dst, c) in block.iter_mut().zip(bytes.chunks_exact(4)) {
            *dst = f32::from_le_bytes(c.try_into().unwrap());
        }
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest).map_err(eof)? != 0 {
        return Err(Error::Format("trailing bytes after checkpoint".into()));
    }
    if !model.is_finite() {
        return Err(Error::Format("checkpoint contains non-finite parameters".into()));
    }
    Ok(model)
}

pub fn save_checkpoint(path: impl AsRef<Path>, model: &CrosscoderModel<f32>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_checkpoint(&mut w, model).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<CrosscoderModel<f32>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(BufReader::new(file)).map_err(|e| match e {
        Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
        other => other,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn header_layout() {
        let m = CrosscoderModel::<f32>::zeros(3, 2, vec![0, 1000]);
        let mut bytes = Vec::new();
        write_checkpoint(&mut bytes, &m).unwrap();
        assert_eq!(&bytes[0..4], b"XCCK");
        assert_eq!(bytes[8], 3);
        assert_eq!(bytes[12], 2);
        assert_eq!(bytes[16], 2);
        assert_eq!(u64::from_le_bytes(bytes[28..36].try_into().unwrap()), 1000);
        let n_params = 2 * 6 + 3 + 2 * 6 + 2 * 2 + 3;
        assert_eq!(bytes.len(), 20 + 16 + 4 * n_params);
    }

    #[test]
    fn truncated_and_trailing_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = CrosscoderModel::<f32>::random_init(4, 3, vec![0, 1], 0.1, &mut rng);
        let mut bytes = Vec::new();
        write_checkpoint(&mut bytes, &m).unwrap();
        assert_eq!(read_checkpoint(&bytes[..]).unwrap(), m);
        assert!(read_checkpoint(&bytes[..bytes.len() - 1]).is_err());
        bytes.push(0);
        assert!(read_checkpoint(&bytes[..]).is_err());
    }
}
