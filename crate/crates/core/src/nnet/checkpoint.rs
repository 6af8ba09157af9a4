//! Binary checkpoint format (all integers and reals little-endian):
//!
//! | offset | size | field                                   |
//! |--------|------|-----------------------------------------|
//! | 0      | 8    | magic `CGLSTM\0\0`                      |
//! | 8      | 4    | version (`u32`, currently 1)            |
//! | 12     | 4    | input_dim (`u32`)                       |
//! | 16     | 4    | hidden_dim (`u32`)                      |
//! | 20     | 4    | seq_len (`u32`)                         |
//! | 24     | 4    | gate order, ASCII `IFGO`                |
//! | 28     | 8    | threshold (`f64`)                       |
//! | 36     | 8    | init_seed (`u64`)                       |
//! | 44     | 8    | parameter count `P` (`u64`)             |
//! | 52     | 8·P  | parameters (`f64`)                      |
//! | 52+8P  | 4    | tag length `L` (`u32`)                  |
//! | 56+8P  | L    | tag, UTF-8 (free-form, usually JSON)    |
//!
//! Parameters are flattened as `w_in` (`4h × d`, row-major), `w_rec`
//! (`4h × h`, row-major), `bias` (`4h`), `w_out` (`h`), `b_out` (1), with
//! gate blocks stacked in IFGO order inside every gate-indexed block.

use std::io::{Read, Write};

use super::params::{parameter_count, DetectorModel, LstmParams, ModelConfig, GATE_ORDER};
use super::NnetError;

pub const MAGIC: [u8; 8] = *b"CGLSTM\0\0";
pub const VERSION: u32 = 1;

pub fn write_checkpoint<W: Write>(model: &DetectorModel, tag: &str, mut w: W) -> Result<(), NnetError> {
    let c = &model.config;
    let dim = |v: usize| u32::try_from(v).map_err(|_| NnetError::Checkpoint(format!("dimension {v} too large")));
    w.write_all(&MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&dim(c.input_dim)?.to_le_bytes())?;
    w.write_all(&dim(c.hidden_dim)?.to_le_bytes())?;
    w.write_all(&dim(c.seq_len)?.to_le_bytes())?;
    w.write_all(&GATE_ORDER)?;
    w.write_all(&c.threshold.to_le_bytes())?;
    w.write_all(&c.init_seed.to_le_bytes())?;
    w.write_all(&(model.params.len() as u64).to_le_bytes())?;
    for block in model.params.slices() {
        for v in block {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.write_all(&dim(tag.len())?.to_le_bytes())?;
    w.write_all(tag.as_bytes())?;
    Ok(())
}

fn read_array<const N: usize>(r: &mut impl Read) -> Result<[u8; N], NnetError> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf)?;
    Ok(buf)
}

/// Returns the model and its tag.
pub fn read_checkpoint<R: Read>(mut r: R) -> Result<(DetectorModel, String), NnetError> {
    if read_array::<8>(&mut r)? != MAGIC {
        return Err(NnetError::Checkpoint("bad magic".into()));
    }
    let version = u32::from_le_bytes(read_array(&mut r)?);
    if version != VERSION {
        return Err(NnetError::Checkpoint(format!("unsupported version {version}")));
    }
    let input_dim = u32::from_le_bytes(read_array(&mut r)?) as usize;
    let hidden_dim = u32::from_le_bytes(read_array(&mut r)?) as usize;
    let seq_len = u32::from_le_bytes(read_array(&mut r)?) as usize;
    if read_array::<4>(&mut r)? != GATE_ORDER {
        return Err(NnetError::Checkpoint("unsupported gate order".into()));
    }
    let threshold = f64::from_le_bytes(read_array(&mut r)?);
    let init_seed = u64::from_le_bytes(read_array(&mut r)?);
    let count = u64::from_le_bytes(read_array(&mut r)?) as usize;
    if count != parameter_count(input_dim, hidden_dim) {
        return Err(NnetError::Checkpoint(format!(
            "parameter count {count} does not match dims ({input_dim}, {hidden_dim})"
        )));
    }
    let config = ModelConfig { input_dim, hidden_dim, seq_len, init_seed, threshold };
    let problems = config.validate();
    if !problems.is_empty() {
        return Err(NnetError::Checkpoint(problems.join("; ")));
    }
    let mut params = LstmParams::zeros(input_dim, hidden_dim);
    for block in params.slices_mut() {
        for v in block.iter_mut() {
            *v = f64::from_le_bytes(read_array(&mut r)?);
        }
    }
    let tag_len = u32::from_le_bytes(read_array(&mut r)?) as usize;
    let mut tag = vec![0u8; tag_len];
    r.read_exact(&mut tag)?;
    let tag = String::from_utf8(tag).map_err(|_| NnetError::Checkpoint("tag is not UTF-8".into()))?;
    Ok((DetectorModel { config, params }, tag))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nnet::params::init_model;

    #[test]
    fn roundtrip_and_layout() {
        let model = init_model(&ModelConfig { input_dim: 2, hidden_dim: 3, seq_len: 7, init_seed: 9, threshold: 0.5 });
        let mut buf = Vec::new();
        write_checkpoint(&model, "{\"k\":1}", &mut buf).unwrap();
        assert_eq!(buf.len(), 52 + 8 * model.parameter_count() + 4 + 7);
        assert_eq!(&buf[24..28], b"IFGO");
        // first parameter is w_in[0][0]
        assert_eq!(f64::from_le_bytes(buf[52..60].try_into().unwrap()), model.params.w_in[[0, 0]]);
        let (back, tag) = read_checkpoint(buf.as_slice()).unwrap();
        assert_eq!(back, model);
        assert_eq!(tag, "{\"k\":1}");
    }

    #[test]
    fn rejects_corruption() {
        let model = init_model(&ModelConfig { input_dim: 1, hidden_dim: 1, seq_len: 1, ..Default::default() });
        let mut buf = Vec::new();
        write_checkpoint(&model, "", &mut buf).unwrap();
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(read_checkpoint(bad.as_slice()).is_err());
        let mut bad = buf.clone();
        bad[8] = 2;
        assert!(read_checkpoint(bad.as_slice()).is_err());
        assert!(read_checkpoint(&buf[..buf.len() - 10]).is_err());
    }
}
