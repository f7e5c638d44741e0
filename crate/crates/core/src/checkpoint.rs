//! Single-file checkpoints: `NTCKPT1\0`, a little-endian `u64` header length,
//! a JSON header, then every parameter and buffer as little-endian `f32`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{compute_arch_id, Layer, LayerSpec, Network};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"NTCKPT1\0";
const VERSION: u8 = b'1';

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub epoch: Option<usize>,
    #[serde(default)]
    pub metrics: BTreeMap<String, f32>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    arch: Vec<LayerSpec>,
    input_shape: Vec<usize>,
    arch_id: String,
    #[serde(flatten)]
    meta: CheckpointMeta,
}

pub fn encode_checkpoint(net: &Network, meta: &CheckpointMeta) -> Result<Vec<u8>> {
    let header = serde_json::to_vec(&Header {
        arch: net.specs(),
        input_shape: net.input_shape().to_vec(),
        arch_id: net.arch_id().to_string(),
        meta: meta.clone(),
    })?;
    let mut out = Vec::with_capacity(16 + header.len() + net.nbytes());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for layer in net.layers() {
        for t in layer.params.iter().chain(&layer.buffers) {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<(Network, CheckpointMeta)> {
    if bytes.len() < MAGIC.len() || bytes[..6] != MAGIC[..6] {
        return Err(Error::BadMagic("checkpoint".into()));
    }
    if bytes[6] != VERSION || bytes[7] != 0 {
        return Err(Error::VersionUnsupported(bytes[6]));
    }
    let len_bytes: [u8; 8] = bytes
        .get(8..16)
        .and_then(|b| b.try_into().ok())
        .ok_or_else(|| Error::TruncatedFile("checkpoint header length".into()))?;
    let header_len = u64::from_le_bytes(len_bytes) as usize;
    let header_end = 16usize
        .checked_add(header_len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| Error::TruncatedFile("checkpoint header".into()))?;
    let header: Header = serde_json::from_slice(&bytes[16..header_end])?;
    let payload = &bytes[header_end..];

    let shapes: Vec<(Vec<Vec<usize>>, Vec<Vec<usize>>)> =
        header.arch.iter().map(|s| (s.param_shapes(), s.buffer_shapes())).collect();
    let expected: usize = shapes
        .iter()
        .flat_map(|(p, b)| p.iter().chain(b))
        .map(|s| s.iter().product::<usize>() * 4)
        .sum();
    if payload.len() != expected {
        return Err(Error::PayloadLengthMismatch { expected, found: payload.len() });
    }
    let computed = compute_arch_id(&header.input_shape, &header.arch);
    if computed != header.arch_id {
        return Err(Error::ArchIdMismatch { stored: header.arch_id, computed });
    }

    let mut floats = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]));
    let mut take = |shape: &Vec<usize>| -> Result<Tensor> {
        let n = shape.iter().product();
        Tensor::new(shape.clone(), floats.by_ref().take(n).collect())
    };
    let mut layers = Vec::with_capacity(header.arch.len());
    for (spec, (ps, bs)) in header.arch.iter().zip(&shapes) {
        let params = ps.iter().map(&mut take).collect::<Result<Vec<_>>>()?;
        let buffers = bs.iter().map(&mut take).collect::<Result<Vec<_>>>()?;
        layers.push(Layer::new(*spec, params, buffers)?);
    }
    Ok((Network::new(header.input_shape, layers)?, header.meta))
}

pub fn save_checkpoint(net: &Network, path: impl AsRef<Path>, meta: &CheckpointMeta) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_checkpoint(net, meta)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Network> {
    Ok(load_checkpoint_with_meta(path)?.0)
}

pub fn load_checkpoint_with_meta(path: impl AsRef<Path>) -> Result<(Network, CheckpointMeta)> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{convnet_specs, mlp_specs};
    use crate::rng::RngStream;

    fn sample_net(seed: u64) -> Network {
        let specs = convnet_specs([1, 4, 4], &[2], &[3], 2).unwrap();
        Network::init(&[1, 4, 4], &specs, &mut RngStream::new(seed, "ckpt")).unwrap()
    }

    fn params_bit_eq(a: &Network, b: &Network) -> bool {
        a.layers().iter().zip(b.layers()).all(|(x, y)| {
            x.spec == y.spec
                && x.params.iter().chain(&x.buffers).zip(y.params.iter().chain(&y.buffers)).all(|(p, q)| p.bit_eq(q))
        })
    }

    #[test]
    fn round_trip_through_a_file() {
        let net = sample_net(1);
        let meta = CheckpointMeta { seed: Some(7), epoch: Some(3), metrics: [("acc".to_string(), 0.5)].into() };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&net, &path, &meta).unwrap();
        let (back, m) = load_checkpoint_with_meta(&path).unwrap();
        assert!(params_bit_eq(&net, &back));
        assert_eq!(back.arch_id(), net.arch_id());
        assert_eq!(m, meta);
    }

    #[test]
    fn rejects_corrupt_files() {
        let bytes = encode_checkpoint(&sample_net(2), &CheckpointMeta::default()).unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_checkpoint(&bad), Err(Error::BadMagic(_))));
        let mut v2 = bytes.clone();
        v2[6] = b'2';
        assert!(matches!(decode_checkpoint(&v2), Err(Error::VersionUnsupported(b'2'))));
        assert!(matches!(
            decode_checkpoint(&bytes[..bytes.len() - 4]),
            Err(Error::PayloadLengthMismatch { .. })
        ));
        assert!(matches!(decode_checkpoint(&bytes[..12]), Err(Error::TruncatedFile(_))));
    }

    fn rewrite_header(bytes: &[u8], edit: impl Fn(&mut serde_json::Value)) -> Vec<u8> {
        let len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let mut header: serde_json::Value = serde_json::from_slice(&bytes[16..16 + len]).unwrap();
        edit(&mut header);
        let h = serde_json::to_vec(&header).unwrap();
        let mut out = bytes[..8].to_vec();
        out.extend_from_slice(&(h.len() as u64).to_le_bytes());
        out.extend_from_slice(&h);
        out.extend_from_slice(&bytes[16 + len..]);
        out
    }

    #[test]
    fn header_edits_are_detected() {
        let net = Network::init(&[3], &mlp_specs(3, &[4], 2), &mut RngStream::new(0, "c")).unwrap();
        let bytes = encode_checkpoint(&net, &CheckpointMeta::default()).unwrap();
        let wider = rewrite_header(&bytes, |h| {
            h["arch"][0]["out_features"] = 5.into();
            h["arch"][2]["in_features"] = 5.into();
        });
        assert!(matches!(decode_checkpoint(&wider), Err(Error::PayloadLengthMismatch { .. })));
        let renamed = rewrite_header(&bytes, |h| h["arch_id"] = "00".into());
        assert!(matches!(decode_checkpoint(&renamed), Err(Error::ArchIdMismatch { .. })));
    }

    #[test]
    fn many_random_nets_round_trip() {
        for seed in 0..100u64 {
            let net = if seed % 2 == 0 {
                sample_net(seed)
            } else {
                let w = 1 + seed as usize % 7;
                Network::init(&[5], &mlp_specs(5, &[w, 3], 4), &mut RngStream::new(seed, "c")).unwrap()
            };
            let (back, _) = decode_checkpoint(&encode_checkpoint(&net, &CheckpointMeta::default()).unwrap()).unwrap();
            assert!(params_bit_eq(&net, &back));
        }
    }
}
