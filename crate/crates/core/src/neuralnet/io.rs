//! Flat binary parameter container plus a text manifest.
//!
//! `<name>.bin`: magic `FCPARAMS`, `u32` version, `u32` tensor count, then per
//! tensor `u32 rows`, `u32 cols` and `rows·cols` little-endian `f64`s.
//! `<name>.manifest`: `key=value` metadata lines followed by one
//! `tensor=<name> <rows> <cols>` line per tensor.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use super::params::ParamSet;
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"FCPARAMS";
const VERSION: u32 = 1;

pub type Metadata = BTreeMap<String, String>;

pub fn save_params<P: ParamSet>(dir: &Path, name: &str, params: &P, meta: &Metadata) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let tensors = params.tensors();
    let mut bin = Vec::with_capacity(16 + params.num_params() * 8);
    bin.extend_from_slice(MAGIC);
    bin.extend_from_slice(&VERSION.to_le_bytes());
    bin.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    let mut manifest = String::new();
    for (k, v) in meta {
        manifest.push_str(&format!("{k}={v}\n"));
    }
    for t in &tensors {
        bin.extend_from_slice(&(t.rows as u32).to_le_bytes());
        bin.extend_from_slice(&(t.cols as u32).to_le_bytes());
        for v in t.data {
            bin.extend_from_slice(&v.to_le_bytes());
        }
        manifest.push_str(&format!("tensor={} {} {}\n", t.name, t.rows, t.cols));
    }
    let bin_path = dir.join(format!("{name}.bin"));
    fs::write(&bin_path, bin).map_err(|e| Error::io(&bin_path, e))?;
    let man_path = dir.join(format!("{name}.manifest"));
    fs::write(&man_path, manifest).map_err(|e| Error::io(&man_path, e))?;
    Ok(())
}

/// Metadata lines of a manifest (tensor lines excluded).
pub fn load_metadata(dir: &Path, name: &str) -> Result<Metadata> {
    let path = dir.join(format!("{name}.manifest"));
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut meta = Metadata::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() || line.starts_with("tensor=") {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
            path: path.clone(),
            line: i + 1,
            message: "expected key=value".into(),
        })?;
        meta.insert(k.to_string(), v.to_string());
    }
    Ok(meta)
}

/// Fills `template` (whose shapes must match the stored tensors) from `<name>.bin`.
pub fn load_params_into<P: ParamSet>(dir: &Path, name: &str, template: &mut P) -> Result<()> {
    let path = dir.join(format!("{name}.bin"));
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let bad = |message: &str| Error::Parse {
        path: path.clone(),
        line: 0,
        message: message.to_string(),
    };
    let mut cur = Cursor {
        bytes: &bytes,
        pos: 0,
    };
    if cur.take(8).ok_or_else(|| bad("truncated header"))? != MAGIC {
        return Err(bad("not a parameter container"));
    }
    let version = cur.u32().ok_or_else(|| bad("truncated header"))?;
    if version != VERSION {
        return Err(bad(&format!("unsupported version {version}")));
    }
    let count = cur.u32().ok_or_else(|| bad("truncated header"))? as usize;
    let shapes = template.shapes();
    if count != shapes.len() {
        return Err(Error::Dimension(format!(
            "{} holds {count} tensors, model expects {}",
            path.display(),
            shapes.len()
        )));
    }
    let mut values = Vec::with_capacity(count);
    for (rows, cols) in shapes {
        let r = cur.u32().ok_or_else(|| bad("truncated tensor header"))? as usize;
        let c = cur.u32().ok_or_else(|| bad("truncated tensor header"))? as usize;
        if (r, c) != (rows, cols) {
            return Err(Error::Dimension(format!(
                "stored tensor {r}x{c}, model expects {rows}x{cols}"
            )));
        }
        let mut data = Vec::with_capacity(r * c);
        for _ in 0..r * c {
            let raw = cur.take(8).ok_or_else(|| bad("truncated tensor data"))?;
            data.push(f64::from_le_bytes(raw.try_into().expect("8 bytes")));
        }
        values.push(data);
    }
    if cur.pos != bytes.len() {
        return Err(bad("trailing bytes after last tensor"));
    }
    for (dst, src) in template.tensors_mut().into_iter().zip(values) {
        dst.copy_from_slice(&src);
    }
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let out = self.bytes.get(self.pos..self.pos + n)?;
        self.pos += n;
        Some(out)
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4)
            .map(|b| u32::from_le_bytes(b.try_into().expect("4 bytes")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neuralnet::SequenceModelParams;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let p = SequenceModelParams::new(5, 3, 2, 4, &mut rng);
        let mut meta = Metadata::new();
        meta.insert("seed".into(), "9".into());
        save_params(dir.path(), "m", &p, &meta).unwrap();
        let mut q = p.zeros_like();
        load_params_into(dir.path(), "m", &mut q).unwrap();
        assert_eq!(p, q);
        assert_eq!(load_metadata(dir.path(), "m").unwrap(), meta);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = SequenceModelParams::zeros(5, 3, 2, 4);
        save_params(dir.path(), "m", &p, &Metadata::new()).unwrap();
        let mut q = SequenceModelParams::zeros(6, 3, 2, 4);
        assert!(load_params_into(dir.path(), "m", &mut q).is_err());
    }
}
