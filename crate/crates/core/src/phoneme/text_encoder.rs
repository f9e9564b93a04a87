//! Self-attention phoneme encoder with windowed relative position
//! embeddings, projected to per-phoneme Gaussian prior statistics.

use candle_core::{DType, Tensor};

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::nn::{masked_softmax, ChannelNorm, Conv1d, ConvSpec, Embedding, Init, ParamPath};
use crate::vae::check_mask;

#[derive(Debug, Clone)]
struct RelativeAttention {
    q: Conv1d,
    k: Conv1d,
    v: Conv1d,
    o: Conv1d,
    rel_k: Tensor,
    rel_v: Tensor,
    heads: usize,
    window: usize,
}

impl RelativeAttention {
    fn new(p: &mut ParamPath<'_>, hidden: usize, heads: usize, window: usize) -> Result<Self> {
        let dk = hidden / heads;
        let std = (dk as f64).powf(-0.5);
        Ok(Self {
            q: Conv1d::new(&mut p.sub("q"), hidden, hidden, ConvSpec::pointwise())?,
            k: Conv1d::new(&mut p.sub("k"), hidden, hidden, ConvSpec::pointwise())?,
            v: Conv1d::new(&mut p.sub("v"), hidden, hidden, ConvSpec::pointwise())?,
            o: Conv1d::new(&mut p.sub("o"), hidden, hidden, ConvSpec::pointwise())?,
            rel_k: p.get("rel_k", &[2 * window + 1, dk], Init::Normal(std))?,
            rel_v: p.get("rel_v", &[2 * window + 1, dk], Init::Normal(std))?,
            heads,
            window,
        })
    }

    /// `[n, n, dk]` table of relative embeddings for offsets `j - i`.
    fn relative(&self, table: &Tensor, n: usize) -> Result<Tensor> {
        let w = self.window as isize;
        let idx: Vec<u32> = (0..n as isize)
            .flat_map(|i| (0..n as isize).map(move |j| ((j - i).clamp(-w, w) + w) as u32))
            .collect();
        let idx = Tensor::from_vec(idx, n * n, table.device())?;
        let dk = table.dims()[1];
        Ok(table.index_select(&idx, 0)?.reshape((n, n, dk))?)
    }

    fn split_heads(&self, x: &Tensor) -> Result<Tensor> {
        let (b, c, n) = x.dims3()?;
        Ok(x.reshape((b, self.heads, c / self.heads, n))?.transpose(2, 3)?.contiguous()?)
    }

    fn forward(&self, x: &Tensor, mask: &Tensor) -> Result<Tensor> {
        let (b, c, n) = x.dims3()?;
        let dk = c / self.heads;
        let scale = (dk as f64).powf(-0.5);
        let q = (self.split_heads(&self.q.forward(x)?)? * scale)?; // [B,H,N,dk]
        let k = self.split_heads(&self.k.forward(x)?)?;
        let v = self.split_heads(&self.v.forward(x)?)?;
        let rk = self.relative(&self.rel_k, n)?.unsqueeze(0)?.unsqueeze(0)?; // [1,1,N,N,dk]
        let rv = self.relative(&self.rel_v, n)?.unsqueeze(0)?.unsqueeze(0)?;
        let content = q.matmul(&k.t()?)?;
        let positional = q.unsqueeze(3)?.broadcast_mul(&rk)?.sum(4)?;
        let key_mask = mask.unsqueeze(1)?; // [B,1,1,N]
        let attn = masked_softmax(&(content + positional)?, &key_mask)?;
        let out = (attn.matmul(&v)? + attn.unsqueeze(4)?.broadcast_mul(&rv)?.sum(3)?)?; // [B,H,N,dk]
        let out = out.transpose(2, 3)?.contiguous()?.reshape((b, c, n))?;
        self.o.forward(&out)
    }
}

#[derive(Debug, Clone)]
struct FeedForward {
    up: Conv1d,
    down: Conv1d,
}

impl FeedForward {
    fn forward(&self, x: &Tensor, mask: &Tensor) -> Result<Tensor> {
        let h = self.up.forward(&x.broadcast_mul(mask)?)?.relu()?;
        Ok(self.down.forward(&h.broadcast_mul(mask)?)?.broadcast_mul(mask)?)
    }
}

#[derive(Debug, Clone)]
struct EncoderLayer {
    attn: RelativeAttention,
    norm1: ChannelNorm,
    ffn: FeedForward,
    norm2: ChannelNorm,
}

/// Output of [`TextEncoder::forward`]; all `[B, ·, N]`.
#[derive(Debug, Clone)]
pub struct PhonemeStats {
    pub hidden: Tensor,
    pub mu: Tensor,
    pub log_sigma: Tensor,
    pub mask: Tensor,
}

#[derive(Debug, Clone)]
pub struct TextEncoder {
    embedding: Embedding,
    layers: Vec<EncoderLayer>,
    proj: Conv1d,
    hidden: usize,
    d_latent: usize,
}

impl TextEncoder {
    pub fn new(p: &mut ParamPath<'_>, cfg: &ModelConfig) -> Result<Self> {
        let h = cfg.text_hidden;
        let embedding = Embedding::new(&mut p.sub("embedding"), cfg.vocab_size, h)?;
        let layers = (0..cfg.text_layers)
            .map(|i| {
                let mut lp = p.sub(format!("layer.{i}"));
                Ok(EncoderLayer {
                    attn: RelativeAttention::new(&mut lp.sub("attn"), h, cfg.text_heads, cfg.text_window)?,
                    norm1: ChannelNorm::new(&mut lp.sub("norm1"), h)?,
                    ffn: FeedForward {
                        up: Conv1d::new(&mut lp.sub("ffn.up"), h, cfg.text_ffn, ConvSpec::same(cfg.text_kernel, 1))?,
                        down: Conv1d::new(&mut lp.sub("ffn.down"), cfg.text_ffn, h, ConvSpec::same(cfg.text_kernel, 1))?,
                    },
                    norm2: ChannelNorm::new(&mut lp.sub("norm2"), h)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let proj = Conv1d::new(&mut p.sub("proj"), h, 2 * cfg.d_latent, ConvSpec::pointwise())?;
        Ok(Self { embedding, layers, proj, hidden: h, d_latent: cfg.d_latent })
    }

    /// `ids [B, N]` (u32), `mask [B, 1, N]`.
    pub fn forward(&self, ids: &Tensor, mask: &Tensor) -> Result<PhonemeStats> {
        let (b, n) = ids.dims2()?;
        if mask.dims() != [b, 1, n] {
            return Err(Error::Shape(format!("phoneme ids {:?} vs mask {:?}", ids.dims(), mask.dims())));
        }
        let max_id = ids.max_all()?.to_dtype(DType::U32)?.to_scalar::<u32>()? as usize;
        if max_id >= self.embedding.vocab_size() {
            return Err(Error::InvalidArgument(format!("phoneme id {max_id} outside vocabulary")));
        }
        let x = (self.embedding.forward(ids)? * (self.hidden as f64).sqrt())?;
        let mut x = x.transpose(1, 2)?.contiguous()?.broadcast_mul(mask)?;
        for layer in &self.layers {
            let y = layer.attn.forward(&x, mask)?;
            x = layer.norm1.forward(&(x + y)?)?;
            let y = layer.ffn.forward(&x, mask)?;
            x = layer.norm2.forward(&(x + y)?)?;
        }
        let hidden = x.broadcast_mul(mask)?;
        check_mask(&hidden, mask, "phoneme hidden")?;
        let stats = self.proj.forward(&hidden)?.broadcast_mul(mask)?;
        Ok(PhonemeStats {
            mu: stats.narrow(1, 0, self.d_latent)?,
            log_sigma: stats.narrow(1, self.d_latent, self.d_latent)?,
            hidden,
            mask: mask.clone(),
        })
    }
}
