//! Binary tensor archives: a JSON header followed by little-endian f64 blobs.
//!
//! Layout: 8-byte magic, u64 header length, UTF-8 JSON header, then the
//! tensors back to back in header order.

use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{Activation, Adam, DenseNet, Layer, ParamSet};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"SDTENS01";

#[derive(Serialize, Deserialize)]
struct Header {
    meta: Value,
    tensors: Vec<(String, usize)>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TensorArchive {
    pub meta: Value,
    pub tensors: Vec<(String, Vec<f64>)>,
}

impl TensorArchive {
    pub fn new(meta: Value) -> Self {
        Self { meta, tensors: Vec::new() }
    }

    pub fn push(&mut self, name: impl Into<String>, data: Vec<f64>) {
        self.tensors.push((name.into(), data));
    }

    pub fn get(&self, name: &str) -> Result<&[f64]> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, d)| d.as_slice())
            .ok_or_else(|| Error::Format(format!("archive has no tensor `{name}`")))
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        let header = Header {
            meta: self.meta.clone(),
            tensors: self.tensors.iter().map(|(n, d)| (n.clone(), d.len())).collect(),
        };
        let json = serde_json::to_vec(&header)?;
        w.write_all(MAGIC)?;
        w.write_all(&(json.len() as u64).to_le_bytes())?;
        w.write_all(&json)?;
        let mut buf = Vec::new();
        for (_, d) in &self.tensors {
            buf.clear();
            buf.reserve(d.len() * 8);
            for v in d {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format("not a tensor archive".into()));
        }
        let mut len = [0u8; 8];
        r.read_exact(&mut len)?;
        let len = u64::from_le_bytes(len) as usize;
        let mut json = vec![0u8; len];
        r.read_exact(&mut json)?;
        let header: Header = serde_json::from_slice(&json)?;
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for (name, n) in header.tensors {
            let mut raw = vec![0u8; n * 8];
            r.read_exact(&mut raw)?;
            let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            tensors.push((name, data));
        }
        Ok(Self { meta: header.meta, tensors })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        self.write_to(&mut out)?;
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        Self::read_from(&mut &bytes[..])
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut f)?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        Self::read_from(&mut f)
    }
}

/// Shape of one layer as stored in an archive header.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerShape {
    pub input: usize,
    pub output: usize,
    pub activation: Activation,
}

impl DenseNet {
    pub fn shapes(&self) -> Vec<LayerShape> {
        self.layers()
            .iter()
            .map(|l| LayerShape { input: l.input_dim(), output: l.output_dim(), activation: l.activation })
            .collect()
    }

    /// Rebuild a network from its layer shapes and flat parameters.
    pub fn from_shapes(shapes: &[LayerShape], params: &[f64]) -> Result<Self> {
        let layers = shapes
            .iter()
            .map(|s| Layer {
                weight: Array2::zeros((s.input, s.output)),
                bias: Array1::zeros(s.output),
                activation: s.activation,
            })
            .collect();
        let mut net = DenseNet::from_layers(layers)?;
        net.set_flat(params)?;
        Ok(net)
    }

    /// Append this network to an archive under `name`; shapes go in the
    /// returned JSON value.
    pub fn archive_into(&self, archive: &mut TensorArchive, name: &str) -> Value {
        archive.push(name, self.flat());
        serde_json::to_value(self.shapes()).expect("layer shapes serialize")
    }

    pub fn from_archive(archive: &TensorArchive, name: &str, shapes: &Value) -> Result<Self> {
        let shapes: Vec<LayerShape> = serde_json::from_value(shapes.clone())?;
        Self::from_shapes(&shapes, archive.get(name)?)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut a = TensorArchive::default();
        a.meta = self.archive_into(&mut a, "net");
        a.to_bytes().expect("in-memory write")
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let a = TensorArchive::from_bytes(bytes)?;
        Self::from_archive(&a, "net", &a.meta)
    }
}

impl Adam {
    /// Append the moment buffers under `name`; hyperparameters and counters go in the returned value.
    pub fn archive_into(&self, archive: &mut TensorArchive, name: &str) -> Value {
        let (m, v) = self.moments();
        for (i, t) in m.iter().enumerate() {
            archive.push(format!("{name}/m{i}"), t.clone());
        }
        for (i, t) in v.iter().enumerate() {
            archive.push(format!("{name}/v{i}"), t.clone());
        }
        serde_json::json!({ "state": self, "n": m.len() })
    }

    pub fn from_archive(archive: &TensorArchive, name: &str, meta: &Value) -> Result<Self> {
        let mut opt: Adam = serde_json::from_value(meta["state"].clone())?;
        let n = meta["n"].as_u64().ok_or_else(|| Error::Format("optimizer metadata lacks n".into()))? as usize;
        let mut m = Vec::with_capacity(n);
        let mut v = Vec::with_capacity(n);
        for i in 0..n {
            m.push(archive.get(&format!("{name}/m{i}"))?.to_vec());
            v.push(archive.get(&format!("{name}/v{i}"))?.to_vec());
        }
        let (step, epoch) = (opt.steps(), opt.epoch());
        opt.restore(step, epoch, m, v)?;
        Ok(opt)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn network_round_trips_bit_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let net = DenseNet::mlp(5, &[7, 3], 2, Activation::Relu, Activation::LogSoftmax, &mut rng).unwrap();
        let bytes = net.to_bytes();
        let back = DenseNet::from_bytes(&bytes).unwrap();
        assert_eq!(net, back);
        assert_eq!(&bytes[..8], MAGIC);
    }

    #[test]
    fn optimizer_state_round_trips() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut net = DenseNet::mlp(3, &[4], 2, Activation::Relu, Activation::Identity, &mut rng).unwrap();
        let mut opt = Adam::new(1e-3, 0.99);
        let mut g = net.clone();
        g.set_flat(&(0..net.num_params()).map(|i| (i as f64).sin()).collect::<Vec<_>>()).unwrap();
        opt.step(&mut net, &g).unwrap();
        opt.advance_epoch();
        let mut a = TensorArchive::default();
        a.meta = opt.archive_into(&mut a, "opt");
        let a = TensorArchive::from_bytes(&a.to_bytes().unwrap()).unwrap();
        let back = Adam::from_archive(&a, "opt", &a.meta).unwrap();
        assert_eq!(back, opt);
        assert_eq!(back.moments(), opt.moments());
    }

    #[test]
    fn truncated_archive_is_rejected() {
        let mut a = TensorArchive::new(serde_json::json!({"k": 1}));
        a.push("x", vec![1.0, 2.0, f64::MIN_POSITIVE]);
        let bytes = a.to_bytes().unwrap();
        assert_eq!(TensorArchive::from_bytes(&bytes).unwrap(), a);
        assert!(TensorArchive::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        assert!(TensorArchive::from_bytes(b"garbage!garbage!").is_err());
    }
}
