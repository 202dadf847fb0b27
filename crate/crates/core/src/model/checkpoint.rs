//! Binary checkpoint format.
//!
//! ```text
//! "OFITCKPT"  u32 version=1
//! config      8 × u32: d_model n_layers n_heads n_kv_heads window d_ff vocab max_seq
//! u32 count
//! count × { u16 name_len, name (UTF-8), u8 rank, rank × u64 dim, f32 LE data }
//! ```
//!
//! All integers little-endian. LoRA tensors are named `lora.layers.{i}.{proj}.{a|b}`
//! and the scaling numerator is stored as the rank-0 tensor `lora.alpha`.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use super::config::ModelConfig;
use super::params::{LayerParams, ModelParams, Proj};
use crate::error::{Error, Result};
use crate::lora::{LoraAdapters, LoraPair};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"OFITCKPT";
pub const VERSION: u32 = 1;
const ALPHA_NAME: &str = "lora.alpha";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub base: ModelParams<f32>,
    pub lora: Option<LoraAdapters<f32>>,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

impl Checkpoint {
    pub fn config(&self) -> ModelConfig {
        self.base.config
    }

    pub fn network(&self) -> super::Network<'_, f32> {
        super::Network::new(&self.base, self.lora.as_ref())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let c = &self.base.config;
        for v in [
            c.d_model,
            c.n_layers,
            c.n_heads,
            c.n_kv_heads,
            c.window,
            c.d_ff,
            c.vocab,
            c.max_seq,
        ] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        let mut tensors = self.base.named();
        let alpha;
        if let Some(l) = &self.lora {
            tensors.extend(l.named());
            alpha = Tensor::from_vec(&[], vec![l.alpha as f32]);
            tensors.push((ALPHA_NAME.to_string(), &alpha));
        }
        out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
        for (name, t) in tensors {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(t.rank() as u8);
            for &dim in t.shape() {
                out.extend_from_slice(&(dim as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)
            .map_err(|_| bad("truncated header"))?;
        if &magic != MAGIC {
            return Err(bad("bad magic bytes"));
        }
        let version = read_u32(&mut r)?;
        if version != VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        let mut dims = [0usize; 8];
        for d in &mut dims {
            *d = read_u32(&mut r)? as usize;
        }
        let config = ModelConfig {
            d_model: dims[0],
            n_layers: dims[1],
            n_heads: dims[2],
            n_kv_heads: dims[3],
            window: dims[4],
            d_ff: dims[5],
            vocab: dims[6],
            max_seq: dims[7],
        };
        config.validate()?;
        let count = read_u32(&mut r)?;
        let mut tensors = BTreeMap::new();
        for _ in 0..count {
            let mut len = [0u8; 2];
            r.read_exact(&mut len)
                .map_err(|_| bad("truncated tensor name"))?;
            let mut name = vec![0u8; u16::from_le_bytes(len) as usize];
            r.read_exact(&mut name)
                .map_err(|_| bad("truncated tensor name"))?;
            let name = String::from_utf8(name).map_err(|_| bad("tensor name is not UTF-8"))?;
            let mut rank = [0u8; 1];
            r.read_exact(&mut rank).map_err(|_| bad("truncated rank"))?;
            let mut shape = Vec::with_capacity(rank[0] as usize);
            for _ in 0..rank[0] {
                let mut d = [0u8; 8];
                r.read_exact(&mut d).map_err(|_| bad("truncated dims"))?;
                shape.push(u64::from_le_bytes(d) as usize);
            }
            let n: usize = shape.iter().product();
            if r.len() < n * 4 {
                return Err(bad(format!("truncated data for {name}")));
            }
            let (data, rest) = r.split_at(n * 4);
            r = rest;
            let data = data
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            if tensors
                .insert(name.clone(), Tensor::from_vec(&shape, data))
                .is_some()
            {
                return Err(bad(format!("duplicate tensor {name}")));
            }
        }
        if !r.is_empty() {
            return Err(bad("trailing bytes after last tensor"));
        }
        Self::assemble(config, tensors)
    }

    fn assemble(config: ModelConfig, mut tensors: BTreeMap<String, Tensor<f32>>) -> Result<Self> {
        let template = ModelParams::<f32>::init(config, 0)?;
        let mut take = |name: &str, shape: &[usize]| -> Result<Tensor<f32>> {
            let t = tensors
                .remove(name)
                .ok_or_else(|| bad(format!("missing tensor {name}")))?;
            if t.shape() != shape {
                return Err(bad(format!(
                    "tensor {name} has shape {:?}, expected {shape:?}",
                    t.shape()
                )));
            }
            Ok(t)
        };
        let mut layers = Vec::with_capacity(config.n_layers);
        for (i, tl) in template.layers.iter().enumerate() {
            let mut f = |n: &str, t: &Tensor<f32>| take(&format!("layers.{i}.{n}"), t.shape());
            layers.push(LayerParams {
                attn_norm: f("attn_norm", &tl.attn_norm)?,
                wq: f("wq", &tl.wq)?,
                wk: f("wk", &tl.wk)?,
                wv: f("wv", &tl.wv)?,
                wo: f("wo", &tl.wo)?,
                mlp_norm: f("mlp_norm", &tl.mlp_norm)?,
                w_gate: f("w_gate", &tl.w_gate)?,
                w_up: f("w_up", &tl.w_up)?,
                w_down: f("w_down", &tl.w_down)?,
            });
        }
        let base = ModelParams {
            config,
            tok_emb: take("tok_emb", template.tok_emb.shape())?,
            pos_emb: take("pos_emb", template.pos_emb.shape())?,
            layers,
            final_norm: take("final_norm", template.final_norm.shape())?,
            lm_head: take("lm_head", template.lm_head.shape())?,
        };

        let lora = match tensors.remove(ALPHA_NAME) {
            None => None,
            Some(alpha) => {
                let alpha = *alpha
                    .data()
                    .first()
                    .ok_or_else(|| bad("empty lora.alpha"))? as f64;
                let mut layers: Vec<BTreeMap<Proj, LoraPair<f32>>> =
                    vec![BTreeMap::new(); config.n_layers];
                let mut rank = None;
                for (l, layer) in layers.iter_mut().enumerate() {
                    for p in Proj::ALL {
                        let an = LoraAdapters::<f32>::tensor_name(l, p, "a");
                        let bn = LoraAdapters::<f32>::tensor_name(l, p, "b");
                        match (tensors.remove(&an), tensors.remove(&bn)) {
                            (None, None) => {}
                            (Some(a), Some(b)) => {
                                let w = base.layers[l].proj(p).shape();
                                let r = a.shape().get(1).copied().unwrap_or(0);
                                if a.shape() != [w[0], r] || b.shape() != [r, w[1]] {
                                    return Err(bad(format!(
                                        "adapter {an} has inconsistent shapes"
                                    )));
                                }
                                if *rank.get_or_insert(r) != r {
                                    return Err(bad("adapters disagree on rank"));
                                }
                                layer.insert(p, LoraPair { a, b });
                            }
                            _ => {
                                return Err(bad(format!(
                                    "unpaired adapter tensors for layer {l} {}",
                                    p.name()
                                )))
                            }
                        }
                    }
                }
                let rank = rank.ok_or_else(|| bad("lora.alpha present without adapters"))?;
                Some(LoraAdapters {
                    rank,
                    alpha,
                    layers,
                })
            }
        };
        if let Some(extra) = tensors.keys().next() {
            return Err(bad(format!("unexpected tensor {extra}")));
        }
        Ok(Self { base, lora })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes())
            .map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn read_u32(r: &mut &[u8]) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(|_| bad("truncated header"))?;
    Ok(u32::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lora::{attach, LoraConfig};

    fn cfg() -> ModelConfig {
        ModelConfig {
            d_model: 8,
            n_heads: 2,
            n_kv_heads: 1,
            d_ff: 8,
            max_seq: 16,
            window: 3,
            ..ModelConfig::tiny()
        }
    }

    #[test]
    fn header_layout_is_fixed() {
        let ck = Checkpoint {
            base: ModelParams::init(cfg(), 1).unwrap(),
            lora: None,
        };
        let bytes = ck.to_bytes();
        assert_eq!(&bytes[..8], b"OFITCKPT");
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(bytes[12..16].try_into().unwrap()), 8);
        let count = u32::from_le_bytes(bytes[44..48].try_into().unwrap());
        assert_eq!(count as usize, 4 + 9 * cfg().n_layers);
        // first tensor record
        assert_eq!(u16::from_le_bytes(bytes[48..50].try_into().unwrap()), 7);
        assert_eq!(&bytes[50..57], b"tok_emb");
        assert_eq!(bytes[57], 2);
        assert_eq!(u64::from_le_bytes(bytes[58..66].try_into().unwrap()), 260);
    }

    #[test]
    fn roundtrip_with_adapters_is_bit_exact() {
        let mut m = attach(
            ModelParams::init(cfg(), 1).unwrap(),
            &LoraConfig::with_rank(2),
            5,
        )
        .unwrap();
        m.adapters.named_mut()[1].1.data_mut()[0] = -1.25e-7;
        let ck = Checkpoint {
            base: m.base,
            lora: Some(m.adapters),
        };
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn corrupt_input_is_rejected() {
        let ck = Checkpoint {
            base: ModelParams::init(cfg(), 1).unwrap(),
            lora: None,
        };
        let bytes = ck.to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut b = bytes.clone();
        b[0] = b'X';
        assert!(Checkpoint::from_bytes(&b).is_err());
        let mut b = bytes.clone();
        b.push(0);
        assert!(Checkpoint::from_bytes(&b).is_err());
    }
}
