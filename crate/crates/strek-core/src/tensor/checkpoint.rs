//! Flat binary checkpoints.
//!
//! Layout: magic `"STRK"`, format version (u32 LE), parameter count (u32),
//! then per parameter: name length (u32), name bytes, rank (u32), shape
//! (u32 each), raw little-endian f64 payload.

use super::adam::ParamSet;
use crate::error::{Error, Result};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

const MAGIC: &[u8; 4] = b"STRK";
const VERSION: u32 = 1;

pub fn write_checkpoint(params: &ParamSet, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(params.len() as u32).to_le_bytes())?;
    for p in params.iter() {
        w.write_all(&(p.name.len() as u32).to_le_bytes())?;
        w.write_all(p.name.as_bytes())?;
        w.write_all(&(p.shape.len() as u32).to_le_bytes())?;
        for &d in &p.shape {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        for &v in &p.data {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

/// Raw contents of a checkpoint: `(name, shape, data)` records.
pub fn read_checkpoint(path: &Path) -> Result<Vec<(String, Vec<usize>, Vec<f64>)>> {
    let bad = |msg: &str| Error::FileFormat {
        path: path.display().to_string(),
        msg: msg.to_string(),
    };
    let mut r = BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(bad("bad magic (expected STRK)"));
    }
    let mut u32buf = [0u8; 4];
    r.read_exact(&mut u32buf)?;
    let version = u32::from_le_bytes(u32buf);
    if version != VERSION {
        return Err(bad(&format!("unsupported version {version} (expected {VERSION})")));
    }
    r.read_exact(&mut u32buf)?;
    let count = u32::from_le_bytes(u32buf) as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        r.read_exact(&mut u32buf)?;
        let name_len = u32::from_le_bytes(u32buf) as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|_| bad("parameter name is not UTF-8"))?;
        r.read_exact(&mut u32buf)?;
        let rank = u32::from_le_bytes(u32buf) as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            r.read_exact(&mut u32buf)?;
            shape.push(u32::from_le_bytes(u32buf) as usize);
        }
        let n: usize = shape.iter().product();
        let mut data = vec![0.0f64; n];
        let mut f64buf = [0u8; 8];
        for v in &mut data {
            r.read_exact(&mut f64buf)?;
            *v = f64::from_le_bytes(f64buf);
        }
        out.push((name, shape, data));
    }
    Ok(out)
}

/// Load a checkpoint into an already-built parameter set; names and
/// shapes must match exactly.
pub fn load_checkpoint_into(params: &mut ParamSet, path: &Path) -> Result<()> {
    let records = read_checkpoint(path)?;
    if records.len() != params.len() {
        return Err(Error::FileFormat {
            path: path.display().to_string(),
            msg: format!(
                "checkpoint has {} parameters, network expects {}",
                records.len(),
                params.len()
            ),
        });
    }
    for (name, shape, data) in records {
        let slot = params.slot_by_name(&name).ok_or_else(|| Error::FileFormat {
            path: path.display().to_string(),
            msg: format!("unexpected parameter '{name}'"),
        })?;
        let p = params.get_mut(slot);
        if p.shape != shape {
            return Err(Error::FileFormat {
                path: path.display().to_string(),
                msg: format!("parameter '{name}': shape {shape:?} != expected {:?}", p.shape),
            });
        }
        p.data = data;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn checkpoint_round_trips_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.strk");
        let mut ps = ParamSet::new();
        ps.register("a", &[2, 3], vec![1.5, -2.25, 0.0, 1e-300, 3.7, -0.125]);
        ps.register("b", &[1], vec![42.0]);
        write_checkpoint(&ps, &path).unwrap();

        let mut ps2 = ParamSet::new();
        ps2.register("b", &[1], vec![0.0]);
        ps2.register("a", &[2, 3], vec![0.0; 6]);
        load_checkpoint_into(&mut ps2, &path).unwrap();
        assert_eq!(ps2.get(ps2.slot_by_name("a").unwrap()).data, ps.get(0).data);
        assert_eq!(ps2.get(ps2.slot_by_name("b").unwrap()).data, vec![42.0]);
    }

    #[test]
    fn loader_rejects_bad_magic_and_version() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.strk");
        std::fs::write(&path, b"NOPE\x01\x00\x00\x00\x00\x00\x00\x00").unwrap();
        assert!(read_checkpoint(&path).is_err());
        let mut payload = b"STRK".to_vec();
        payload.extend_from_slice(&99u32.to_le_bytes());
        payload.extend_from_slice(&0u32.to_le_bytes());
        std::fs::write(&path, payload).unwrap();
        let err = read_checkpoint(&path).unwrap_err().to_string();
        assert!(err.contains("version"), "{err}");
    }
}
