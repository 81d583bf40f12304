//! Binary model checkpoints.
//!
//! Layout, all integers and floats little-endian:
//!
//! | bytes | field |
//! |---|---|
//! | 8 | magic `EQFMCKPT` |
//! | 4 | format version (`u32`, currently 1) |
//! | 4 × 3 | `n_layers`, `hidden_dim`, `feature_dim` (`u32`) |
//! | 1 + k | element layout: length byte, then ASCII symbols (`HCNOF`) |
//! | 8 | model seed (`u64`) |
//! | 8 | training step (`u64`) |
//! | 8 | parameter count (`u64`) |
//! | 8 × n | parameters (`f64`) |

use std::io::{Read, Write};
use std::path::Path;

use crate::data::Element;
use crate::error::{Error, Result};
use crate::vectorfield::{ModelConfig, VectorFieldModel};

pub const MAGIC: &[u8; 8] = b"EQFMCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: VectorFieldModel,
    pub step: u64,
}

fn element_layout() -> String {
    Element::ALL.iter().map(|e| e.symbol()).collect()
}

pub fn write<W: Write>(mut w: W, model: &VectorFieldModel, step: u64) -> Result<()> {
    let cfg = model.config();
    w.write_all(MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    for dim in [cfg.n_layers, cfg.hidden_dim, cfg.feature_dim] {
        let dim = u32::try_from(dim).map_err(|_| Error::Checkpoint(format!("dimension {dim} exceeds u32")))?;
        w.write_all(&dim.to_le_bytes())?;
    }
    let layout = element_layout();
    w.write_all(&[layout.len() as u8])?;
    w.write_all(layout.as_bytes())?;
    w.write_all(&model.seed().to_le_bytes())?;
    w.write_all(&step.to_le_bytes())?;
    w.write_all(&(model.n_params() as u64).to_le_bytes())?;
    let mut buf = Vec::with_capacity(model.n_params() * 8);
    for p in model.params() {
        buf.extend_from_slice(&p.to_le_bytes());
    }
    w.write_all(&buf)?;
    w.flush()?;
    Ok(())
}

fn truncated(e: std::io::Error) -> Error {
    if e.kind() == std::io::ErrorKind::UnexpectedEof {
        Error::Checkpoint("file is truncated".into())
    } else {
        Error::Io(e)
    }
}

fn read_array<R: Read, const N: usize>(r: &mut R) -> Result<[u8; N]> {
    let mut b = [0u8; N];
    r.read_exact(&mut b).map_err(truncated)?;
    Ok(b)
}

pub fn read<R: Read>(mut r: R) -> Result<Checkpoint> {
    if &read_array::<_, 8>(&mut r)? != MAGIC {
        return Err(Error::Checkpoint("bad magic bytes; not a checkpoint".into()));
    }
    let version = u32::from_le_bytes(read_array(&mut r)?);
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported format version {version}")));
    }
    let mut dims = [0usize; 3];
    for d in &mut dims {
        *d = u32::from_le_bytes(read_array(&mut r)?) as usize;
    }
    let [len] = read_array::<_, 1>(&mut r)?;
    let mut layout = vec![0u8; len as usize];
    r.read_exact(&mut layout).map_err(truncated)?;
    if layout != element_layout().as_bytes() {
        return Err(Error::Checkpoint(format!(
            "element layout {:?} does not match {:?}",
            String::from_utf8_lossy(&layout),
            element_layout()
        )));
    }
    let seed = u64::from_le_bytes(read_array(&mut r)?);
    let step = u64::from_le_bytes(read_array(&mut r)?);
    let n = u64::from_le_bytes(read_array(&mut r)?) as usize;
    let config = ModelConfig { n_layers: dims[0], hidden_dim: dims[1], feature_dim: dims[2] };
    config.validate()?;
    if n != config.n_params() {
        return Err(Error::Checkpoint(format!(
            "header dims {config:?} imply {} parameters, file declares {n}",
            config.n_params()
        )));
    }
    let mut bytes = vec![0u8; n * 8];
    r.read_exact(&mut bytes).map_err(truncated)?;
    if r.read(&mut [0u8])? != 0 {
        return Err(Error::Checkpoint("trailing bytes after parameters".into()));
    }
    let params: Vec<f64> = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
    if params.iter().any(|p| !p.is_finite()) {
        return Err(Error::NonFinite("checkpoint parameters"));
    }
    Ok(Checkpoint { model: VectorFieldModel::from_params(config, params, seed)?, step })
}

pub fn save(path: impl AsRef<Path>, model: &VectorFieldModel, step: u64) -> Result<()> {
    let path = path.as_ref();
    // Write to a sibling and rename so a crash never leaves half a file.
    let tmp = path.with_extension("tmp");
    write(std::io::BufWriter::new(std::fs::File::create(&tmp)?), model, step)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<Checkpoint> {
    read(std::io::BufReader::new(std::fs::File::open(path)?))
}

/// Load and check the stored dimensions against an expected configuration.
pub fn load_matching(path: impl AsRef<Path>, expected: &ModelConfig) -> Result<Checkpoint> {
    let ck = load(path)?;
    if ck.model.config() != expected {
        return Err(Error::Checkpoint(format!(
            "checkpoint dims {:?} do not match config {expected:?}",
            ck.model.config()
        )));
    }
    Ok(ck)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> VectorFieldModel {
        let cfg = ModelConfig { n_layers: 2, hidden_dim: 8, feature_dim: 6 };
        let mut m = VectorFieldModel::new(cfg, 11).unwrap();
        // Zero-initialized blocks would hide byte-order bugs.
        for (i, p) in m.params_mut().iter_mut().enumerate() {
            *p += i as f64 * 1e-3;
        }
        m
    }

    fn bytes(m: &VectorFieldModel, step: u64) -> Vec<u8> {
        let mut v = Vec::new();
        write(&mut v, m, step).unwrap();
        v
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let m = small();
        let ck = read(bytes(&m, 42).as_slice()).unwrap();
        assert_eq!(ck.step, 42);
        assert_eq!(ck.model.config(), m.config());
        assert_eq!(ck.model.seed(), 11);
        assert!(ck.model.params().iter().zip(m.params()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn header_layout() {
        let m = small();
        let b = bytes(&m, 0);
        assert_eq!(&b[..8], MAGIC);
        assert_eq!(u32::from_le_bytes(b[8..12].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(b[16..20].try_into().unwrap()), 8);
        assert_eq!(&b[24..30], b"\x05HCNOF");
        assert_eq!(b.len(), 30 + 24 + 8 * m.n_params());
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let m = small();
        let good = bytes(&m, 0);
        let mut bad = good.clone();
        bad[0] = b'X';
        assert!(matches!(read(bad.as_slice()), Err(Error::Checkpoint(_))));
        assert!(matches!(read(&good[..good.len() - 3]), Err(Error::Checkpoint(_))));
        let mut longer = good.clone();
        longer.push(0);
        assert!(matches!(read(longer.as_slice()), Err(Error::Checkpoint(_))));
        let mut layout = good.clone();
        layout[25] = b'C';
        assert!(matches!(read(layout.as_slice()), Err(Error::Checkpoint(_))));
        let mut dims = good;
        dims[16] = 9;
        assert!(matches!(read(dims.as_slice()), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn save_load_matching() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let m = small();
        save(&path, &m, 5).unwrap();
        assert!(load_matching(&path, m.config()).is_ok());
        let other = ModelConfig { n_layers: 3, ..*m.config() };
        assert!(matches!(load_matching(&path, &other), Err(Error::Checkpoint(_))));
    }
}
