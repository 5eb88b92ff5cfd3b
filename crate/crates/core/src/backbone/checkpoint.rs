//! Little-endian binary container shared by backbone and router checkpoints.
//!
//! Layout: 8-byte magic, six u32 header fields (version, layers, dim, heads,
//! ffn, vocab), then blocks of `u32 name_len, name, u32 rank, rank x u32 dims,
//! f32 data` until end of file.

use std::fs;
use std::path::Path;

use super::counter::{CounterModel, Role};
use super::transformer::{TinyTransformer, TransformerConfig};
use super::vocab::{self, Token};
use super::Backbone;
use crate::error::{Error, Result};
use crate::numerics::{Real, Tensor};

pub const MAGIC: &[u8; 8] = b"DRLLMCK1";
pub const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Header {
    pub version: u32,
    pub layers: u32,
    pub dim: u32,
    pub heads: u32,
    pub ffn: u32,
    pub vocab: u32,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Block {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

impl Block {
    /// Stores a tensor, casting to 32 bits.
    pub fn from_tensor<F: Real>(name: impl Into<String>, t: &Tensor<F>) -> Self {
        Block {
            name: name.into(),
            dims: t.shape().to_vec(),
            data: t.data().iter().map(|v| v.as_f64() as f32).collect(),
        }
    }

    pub fn to_tensor<F: Real>(&self) -> Result<Tensor<F>> {
        Tensor::new(
            self.dims.clone(),
            self.data.iter().map(|&v| F::from_f64(v as f64)).collect(),
        )
        .map_err(|e| Error::Format(format!("block {}: {e}", self.name)))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Container {
    pub header: Header,
    pub blocks: Vec<Block>,
}

impl Container {
    pub fn block(&self, name: &str) -> Result<&Block> {
        self.blocks
            .iter()
            .find(|b| b.name == name)
            .ok_or_else(|| Error::Format(format!("missing block {name}")))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        let h = &self.header;
        for v in [h.version, h.layers, h.dim, h.heads, h.ffn, h.vocab] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for b in &self.blocks {
            out.extend_from_slice(&(b.name.len() as u32).to_le_bytes());
            out.extend_from_slice(b.name.as_bytes());
            out.extend_from_slice(&(b.dims.len() as u32).to_le_bytes());
            for &d in &b.dims {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in &b.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Format("bad magic bytes".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported version {version}")));
        }
        let header = Header {
            version,
            layers: r.u32()?,
            dim: r.u32()?,
            heads: r.u32()?,
            ffn: r.u32()?,
            vocab: r.u32()?,
        };
        let mut blocks = Vec::new();
        while r.pos < bytes.len() {
            let len = r.u32()? as usize;
            let name = String::from_utf8(r.take(len)?.to_vec())
                .map_err(|_| Error::Format("block name is not UTF-8".into()))?;
            let rank = r.u32()? as usize;
            if rank > 8 {
                return Err(Error::Format(format!("block {name}: rank {rank}")));
            }
            let dims = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = dims.iter().product();
            let raw = r.take(n.checked_mul(4).ok_or_else(|| Error::Format("block too large".into()))?)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            blocks.push(Block { name, dims, data });
        }
        Ok(Container { header, blocks })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Format(format!(
                "truncated: need {n} bytes at offset {}",
                self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

pub fn write_container(path: &Path, c: &Container) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, c.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn read_container(path: &Path) -> Result<Container> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Container::from_bytes(&bytes)
}

/// Either backbone kind, as stored in a checkpoint.
#[derive(Clone, Debug, PartialEq)]
pub enum AnyBackbone {
    Counter(CounterModel),
    Transformer(TinyTransformer<f32>),
}

impl AnyBackbone {
    pub fn header(&self) -> Header {
        match self {
            AnyBackbone::Counter(m) => Header {
                version: VERSION,
                layers: m.roles().len() as u32,
                dim: Backbone::<f32>::hidden_dim(m) as u32,
                heads: 0,
                ffn: 0,
                vocab: vocab::VOCAB_SIZE as u32,
            },
            AnyBackbone::Transformer(t) => transformer_header(t.config()),
        }
    }

    pub fn blocks(&self) -> Vec<Block> {
        match self {
            AnyBackbone::Counter(m) => {
                let l = m.roles().len();
                let d = Backbone::<f32>::hidden_dim(m);
                vec![
                    Block {
                        name: "counter.roles".into(),
                        dims: vec![l],
                        data: m.roles().iter().map(|r| r.id() as f32).collect(),
                    },
                    Block {
                        name: "counter.embed".into(),
                        dims: vec![vocab::VOCAB_SIZE, d],
                        data: m.table().iter().map(|&v| v as f32).collect(),
                    },
                    Block {
                        name: "counter.penalty".into(),
                        dims: vec![1],
                        data: vec![m.penalty() as f32],
                    },
                ]
            }
            AnyBackbone::Transformer(t) => transformer_blocks(t),
        }
    }

    pub fn to_container(&self) -> Container {
        Container {
            header: self.header(),
            blocks: self.blocks(),
        }
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let h = c.header;
        if h.heads == 0 {
            let roles = c
                .block("counter.roles")?
                .data
                .iter()
                .map(|&v| Role::from_id(v as u8).ok_or_else(|| Error::Format(format!("role id {v}"))))
                .collect::<Result<Vec<_>>>()?;
            if roles.len() != h.layers as usize {
                return Err(Error::Format("role count disagrees with header".into()));
            }
            let embed = c.block("counter.embed")?;
            if embed.dims != [vocab::VOCAB_SIZE, h.dim as usize] {
                return Err(Error::Format(format!("counter.embed dims {:?}", embed.dims)));
            }
            let table = embed.data.iter().map(|&v| v as f64).collect();
            let m = CounterModel::from_parts(roles, h.dim as usize, table)
                .map_err(|e| Error::Format(e.to_string()))?;
            if c.block("counter.penalty")?.data != [m.penalty() as f32] {
                return Err(Error::Format("counter.penalty disagrees with layer count".into()));
            }
            Ok(AnyBackbone::Counter(m))
        } else {
            Ok(AnyBackbone::Transformer(transformer_from_container(c)?))
        }
    }
}

fn transformer_header(cfg: &TransformerConfig) -> Header {
    Header {
        version: VERSION,
        layers: cfg.layers as u32,
        dim: cfg.dim as u32,
        heads: cfg.heads as u32,
        ffn: cfg.ffn as u32,
        vocab: cfg.vocab as u32,
    }
}

/// Parameter blocks of a transformer of any precision (written as 32-bit).
pub fn transformer_blocks<F: Real>(t: &TinyTransformer<F>) -> Vec<Block> {
    t.names()
        .into_iter()
        .zip(t.params())
        .map(|(n, p)| Block::from_tensor(n, p))
        .collect()
}

pub fn transformer_from_container<F: Real>(c: &Container) -> Result<TinyTransformer<F>> {
    let h = c.header;
    let max_seq = c
        .block("pos_embed")?
        .dims
        .first()
        .copied()
        .ok_or_else(|| Error::Format("pos_embed has rank 0".into()))?;
    let cfg = TransformerConfig {
        layers: h.layers as usize,
        dim: h.dim as usize,
        heads: h.heads as usize,
        ffn: h.ffn as usize,
        vocab: h.vocab as usize,
        max_seq,
    };
    cfg.validate().map_err(|e| Error::Format(e.to_string()))?;
    let params = TinyTransformer::<F>::shapes(&cfg)
        .iter()
        .map(|(name, _)| c.block(name)?.to_tensor())
        .collect::<Result<Vec<_>>>()?;
    TinyTransformer::from_params(cfg, params)
}

pub fn save_checkpoint(path: &Path, backbone: &AnyBackbone) -> Result<()> {
    write_container(path, &backbone.to_container())
}

pub fn load_checkpoint(path: &Path) -> Result<AnyBackbone> {
    AnyBackbone::from_container(&read_container(path)?)
}

impl Backbone<f32> for AnyBackbone {
    fn num_layers(&self) -> usize {
        match self {
            AnyBackbone::Counter(m) => Backbone::<f32>::num_layers(m),
            AnyBackbone::Transformer(t) => t.num_layers(),
        }
    }

    fn hidden_dim(&self) -> usize {
        match self {
            AnyBackbone::Counter(m) => Backbone::<f32>::hidden_dim(m),
            AnyBackbone::Transformer(t) => t.hidden_dim(),
        }
    }

    fn vocab_size(&self) -> usize {
        match self {
            AnyBackbone::Counter(m) => Backbone::<f32>::vocab_size(m),
            AnyBackbone::Transformer(t) => t.vocab_size(),
        }
    }

    fn max_seq(&self) -> usize {
        match self {
            AnyBackbone::Counter(m) => Backbone::<f32>::max_seq(m),
            AnyBackbone::Transformer(t) => t.max_seq(),
        }
    }

    fn embed(&self, tokens: &[Token]) -> Result<Tensor<f32>> {
        match self {
            AnyBackbone::Counter(m) => m.embed(tokens),
            AnyBackbone::Transformer(t) => t.embed(tokens),
        }
    }

    fn apply_layer(&self, layer: usize, state: &Tensor<f32>) -> Result<Tensor<f32>> {
        match self {
            AnyBackbone::Counter(m) => m.apply_layer(layer, state),
            AnyBackbone::Transformer(t) => t.apply_layer(layer, state),
        }
    }

    fn head(&self, state: &Tensor<f32>) -> Result<Tensor<f32>> {
        match self {
            AnyBackbone::Counter(m) => m.head(state),
            AnyBackbone::Transformer(t) => t.head(state),
        }
    }

    fn render_answer(&self, tokens: &[Token], logits: &Tensor<f32>) -> String {
        match self {
            AnyBackbone::Counter(m) => Backbone::<f32>::render_answer(m, tokens, logits),
            AnyBackbone::Transformer(t) => t.render_answer(tokens, logits),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::forward_default;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cfg() -> TransformerConfig {
        TransformerConfig {
            layers: 2,
            dim: 8,
            heads: 2,
            ffn: 16,
            vocab: 64,
            max_seq: 12,
        }
    }

    fn inputs() -> Vec<Vec<Token>> {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        (0..10)
            .map(|_| {
                let n = rng.gen_range(1..12);
                (0..n).map(|_| rng.gen_range(0..64)).collect()
            })
            .collect()
    }

    #[test]
    fn transformer_roundtrip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.ckpt");
        let m = AnyBackbone::Transformer(TinyTransformer::new(cfg(), 4).unwrap());
        save_checkpoint(&path, &m).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back, m);
        for t in inputs() {
            assert_eq!(forward_default(&m, &t).unwrap().logits, forward_default(&back, &t).unwrap().logits);
        }
    }

    #[test]
    fn counter_roundtrip_is_exact() {
        let m = AnyBackbone::Counter(CounterModel::new(6, 20, 9).unwrap());
        let back = AnyBackbone::from_container(&Container::from_bytes(&m.to_container().to_bytes()).unwrap()).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn wide_checkpoint_casts_to_narrow() {
        let wide = TinyTransformer::<f64>::new(cfg(), 8).unwrap();
        let c = Container {
            header: transformer_header(wide.config()),
            blocks: transformer_blocks(&wide),
        };
        let narrow: TinyTransformer<f32> = transformer_from_container(&c).unwrap();
        let recast = narrow.cast::<f64>();
        for t in inputs() {
            let a = forward_default(&wide, &t).unwrap().logits;
            let b = forward_default(&recast, &t).unwrap().logits;
            assert!(a.max_abs_diff(&b) < 1e-6);
        }
    }

    #[test]
    fn corrupt_files_are_format_errors() {
        let m = AnyBackbone::Transformer(TinyTransformer::new(cfg(), 4).unwrap());
        let mut bytes = m.to_container().to_bytes();
        let truncated = Container::from_bytes(&bytes[..bytes.len() - 3]);
        assert!(matches!(truncated, Err(Error::Format(_))));
        bytes[0] = b'X';
        assert!(matches!(Container::from_bytes(&bytes), Err(Error::Format(_))));
        let mut v = m.to_container().to_bytes();
        v[8] = 9;
        assert!(matches!(Container::from_bytes(&v), Err(Error::Format(_))));
    }
}
