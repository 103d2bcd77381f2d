//! Binary checkpoint files.
//!
//! Layout: the 8-byte magic `LEFOCKPT`, a little-endian `u32` format version,
//! a little-endian `u64` header length, a UTF-8 JSON header of that length,
//! then `param_count` little-endian `f64` values (row-major weights then bias,
//! layer by layer).

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::mlp::{Activation, MlpParams};
use super::model::{Normalizer, Predictor, TargetMode};
use super::sgd::SgdConfig;
use super::PredictorError;

const MAGIC: &[u8; 8] = b"LEFOCKPT";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub predictor: Predictor,
    pub seed: u64,
    pub sgd: SgdConfig,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    layer_dims: Vec<(usize, usize)>,
    hidden_activation: Activation,
    window: usize,
    target: TargetMode,
    normalizer: Normalizer,
    seed: u64,
    sgd: SgdConfig,
    param_count: usize,
}

pub fn write_checkpoint_to<W: Write>(ckpt: &Checkpoint, out: &mut W) -> Result<(), PredictorError> {
    let p = &ckpt.predictor;
    let header = Header {
        layer_dims: p.net().dims(),
        hidden_activation: p.net().hidden_activation(),
        window: p.window(),
        target: p.target(),
        normalizer: p.normalizer().clone(),
        seed: ckpt.seed,
        sgd: ckpt.sgd,
        param_count: p.net().param_count(),
    };
    let json = serde_json::to_vec(&header).map_err(|e| PredictorError::Format(e.to_string()))?;
    out.write_all(MAGIC)?;
    out.write_all(&VERSION.to_le_bytes())?;
    out.write_all(&(json.len() as u64).to_le_bytes())?;
    out.write_all(&json)?;
    for v in p.net().to_flat() {
        out.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_checkpoint_from<R: Read>(input: &mut R) -> Result<Checkpoint, PredictorError> {
    let mut magic = [0u8; 8];
    input.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(PredictorError::Format("not a checkpoint file".into()));
    }
    let mut word = [0u8; 4];
    input.read_exact(&mut word)?;
    let version = u32::from_le_bytes(word);
    if version != VERSION {
        return Err(PredictorError::Format(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let mut len = [0u8; 8];
    input.read_exact(&mut len)?;
    let len = u64::from_le_bytes(len) as usize;
    let mut json = vec![0u8; len];
    input.read_exact(&mut json)?;
    let header: Header =
        serde_json::from_slice(&json).map_err(|e| PredictorError::Format(e.to_string()))?;

    let mut dims: Vec<usize> = header.layer_dims.iter().map(|d| d.0).collect();
    if let Some(last) = header.layer_dims.last() {
        dims.push(last.1);
    }
    let shape = MlpParams::zeros(&dims, header.hidden_activation)?;
    if shape.dims() != header.layer_dims || shape.param_count() != header.param_count {
        return Err(PredictorError::Format("layer dims do not chain".into()));
    }
    let mut flat = Vec::with_capacity(header.param_count);
    let mut buf = [0u8; 8];
    for _ in 0..header.param_count {
        input.read_exact(&mut buf)?;
        flat.push(f64::from_le_bytes(buf));
    }
    let net = MlpParams::new(
        shape.with_flat(&flat)?.layers().to_vec(),
        header.hidden_activation,
    )?;
    let predictor = Predictor::with_parts(net, header.window, header.normalizer, header.target)?;
    Ok(Checkpoint {
        predictor,
        seed: header.seed,
        sgd: header.sgd,
    })
}

pub fn write_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<(), PredictorError> {
    let mut out = BufWriter::new(File::create(path)?);
    write_checkpoint_to(ckpt, &mut out)?;
    out.flush()?;
    Ok(())
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint, PredictorError> {
    read_checkpoint_from(&mut BufReader::new(File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::predictor::model::NetworkConfig;
    use crate::trace_io::{generate_synthetic_trace, MovementKind};

    #[test]
    fn bit_exact_round_trip() {
        let trace = generate_synthetic_trace(MovementKind::HorizontalSlow, 300, 1000.0, 2).unwrap();
        let net = NetworkConfig::default().leader_net(21).unwrap();
        let ckpt = Checkpoint {
            predictor: Predictor::fitted(net, 4, &trace).unwrap(),
            seed: 21,
            sgd: SgdConfig::default(),
        };
        let mut bytes = Vec::new();
        write_checkpoint_to(&ckpt, &mut bytes).unwrap();
        let back = read_checkpoint_from(&mut bytes.as_slice()).unwrap();
        assert_eq!(back, ckpt);
        let a: Vec<u64> = ckpt
            .predictor
            .net()
            .to_flat()
            .iter()
            .map(|x| x.to_bits())
            .collect();
        let b: Vec<u64> = back
            .predictor
            .net()
            .to_flat()
            .iter()
            .map(|x| x.to_bits())
            .collect();
        assert_eq!(a, b);
    }

    #[test]
    fn rejects_garbage() {
        let bytes = b"NOTACKPT\x01\x00\x00\x00".to_vec();
        assert!(matches!(
            read_checkpoint_from(&mut bytes.as_slice()),
            Err(PredictorError::Format(_))
        ));
    }
}
