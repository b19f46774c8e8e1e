//! Variate-token transformer shared by both towers.
//!
//! Each variable's whole lookback window becomes one token. A batch is laid
//! out as `(B·P)×·` row blocks, one `P`-row block per sample; attention never
//! crosses blocks.
//!
//! Block wiring (pre-norm):
//!
//! ```text
//! h  = x + Attn(LN1(x))
//! y  = h + W2·gelu(W1·LN2(h) + b1) + b2
//! ```
//!
//! The encoder output is `LN_final(y_last)`; the layer trace records the
//! per-sample token mean of every block output `y_m` before the final norm.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{ConfigError, TensorError};
use crate::tensor::{Graph, Tensor, Var};

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct BackboneConfig {
    /// Model width `M`.
    pub width: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn_mult: usize,
    /// Lookback length `L`.
    pub lookback: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            width: 32,
            layers: 3,
            heads: 4,
            ffn_mult: 4,
            lookback: 96,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        for (key, v) in [
            ("width", self.width),
            ("layers", self.layers),
            ("heads", self.heads),
            ("ffn_mult", self.ffn_mult),
            ("lookback", self.lookback),
        ] {
            if v == 0 {
                return Err(ConfigError::Invalid {
                    key: key.into(),
                    detail: "must be >= 1".into(),
                });
            }
        }
        if !self.width.is_multiple_of(self.heads) {
            return Err(ConfigError::Invalid {
                key: "heads".into(),
                detail: format!("width {} is not divisible by {} heads", self.width, self.heads),
            });
        }
        Ok(())
    }

    /// Per-head width `d_k`.
    pub fn head_dim(&self) -> usize {
        self.width / self.heads
    }

    pub fn hidden(&self) -> usize {
        self.width * self.ffn_mult
    }
}

/// Weights of one encoder block. Generic so the same layout holds tensors,
/// parameter ids or graph handles.
#[derive(Clone, Debug, PartialEq)]
pub struct Block<T> {
    pub ln1_gamma: T,
    pub ln1_beta: T,
    pub wq: T,
    pub wk: T,
    pub wv: T,
    pub wo: T,
    pub ln2_gamma: T,
    pub ln2_beta: T,
    pub w1: T,
    pub b1: T,
    pub w2: T,
    pub b2: T,
}

impl<T> Block<T> {
    pub fn map<U>(&self, mut f: impl FnMut(&str, &T) -> U) -> Block<U> {
        Block {
            ln1_gamma: f("ln1_gamma", &self.ln1_gamma),
            ln1_beta: f("ln1_beta", &self.ln1_beta),
            wq: f("wq", &self.wq),
            wk: f("wk", &self.wk),
            wv: f("wv", &self.wv),
            wo: f("wo", &self.wo),
            ln2_gamma: f("ln2_gamma", &self.ln2_gamma),
            ln2_beta: f("ln2_beta", &self.ln2_beta),
            w1: f("w1", &self.w1),
            b1: f("b1", &self.b1),
            w2: f("w2", &self.w2),
            b2: f("b2", &self.b2),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Encoder<T> {
    pub blocks: Vec<Block<T>>,
    pub final_gamma: T,
    pub final_beta: T,
}

impl<T> Encoder<T> {
    /// Maps every weight, passing its dotted name (`block0.wq`, `final_gamma`).
    pub fn map<U>(&self, mut f: impl FnMut(&str, &T) -> U) -> Encoder<U> {
        Encoder {
            blocks: self
                .blocks
                .iter()
                .enumerate()
                .map(|(l, b)| b.map(|n, t| f(&format!("block{l}.{n}"), t)))
                .collect(),
            final_gamma: f("final_gamma", &self.final_gamma),
            final_beta: f("final_beta", &self.final_beta),
        }
    }
}

/// Low-rank update `scale·B·A` for an `M×M` projection; `a` is `r×M`, `b` is `M×r`.
#[derive(Clone, Debug, PartialEq)]
pub struct Lora<T> {
    pub a: T,
    pub b: T,
}

/// Adapters on the four attention projections of one block.
#[derive(Clone, Debug, PartialEq)]
pub struct AttnLora<T> {
    pub q: Lora<T>,
    pub k: Lora<T>,
    pub v: Lora<T>,
    pub o: Lora<T>,
}

impl<T> AttnLora<T> {
    pub fn map<U>(&self, mut f: impl FnMut(&str, &T) -> U) -> AttnLora<U> {
        let mut one = |p: &str, l: &Lora<T>| Lora {
            a: f(&format!("{p}.a"), &l.a),
            b: f(&format!("{p}.b"), &l.b),
        };
        AttnLora {
            q: one("q", &self.q),
            k: one("k", &self.k),
            v: one("v", &self.v),
            o: one("o", &self.o),
        }
    }
}

/// Adapters for every block plus their shared scale.
#[derive(Clone, Debug, PartialEq)]
pub struct Adapters<T> {
    pub blocks: Vec<AttnLora<T>>,
    pub scale: f64,
}

/// Linear variate embedding followed by one residual self-attention pass.
#[derive(Clone, Debug, PartialEq)]
pub struct Embedding<T> {
    /// `L×M`
    pub w: T,
    /// `1×M`
    pub b: T,
    pub wq: T,
    pub wk: T,
    pub wv: T,
    pub wo: T,
}

impl<T> Embedding<T> {
    pub fn map<U>(&self, mut f: impl FnMut(&str, &T) -> U) -> Embedding<U> {
        Embedding {
            w: f("w", &self.w),
            b: f("b", &self.b),
            wq: f("wq", &self.wq),
            wk: f("wk", &self.wk),
            wv: f("wv", &self.wv),
            wo: f("wo", &self.wo),
        }
    }
}

/// Per-token linear map `M → H`.
#[derive(Clone, Debug, PartialEq)]
pub struct Head<T> {
    /// `M×H`
    pub w: T,
    /// `1×H`
    pub b: T,
}

impl<T> Head<T> {
    pub fn map<U>(&self, mut f: impl FnMut(&str, &T) -> U) -> Head<U> {
        Head {
            w: f("w", &self.w),
            b: f("b", &self.b),
        }
    }
}

/// Draws `rows×cols` entries from `N(0, std²)` truncated to `±3·std`.
pub fn truncated_normal(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Tensor {
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let data = (0..rows * cols)
        .map(|_| loop {
            let z: f64 = normal.sample(rng);
            if z.abs() <= 3.0 {
                break z * std;
            }
        })
        .collect();
    Tensor::matrix(rows, cols, data)
}

/// Scaled initialization for a `fan_in×fan_out` matrix: std `1/sqrt(fan_in)`.
pub fn init_matrix(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Tensor {
    truncated_normal(rng, fan_in, fan_out, 1.0 / (fan_in as f64).sqrt())
}

/// Deterministic stand-in for pretrained encoder weights.
///
/// Matrices are truncated Gaussians with std `1/sqrt(fan_in)` clipped at
/// three standard deviations; layer-norm gains are one; all shifts and
/// biases are zero.
pub fn init_pretrained(seed: u64, cfg: &BackboneConfig) -> Encoder<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = cfg.width;
    let hidden = cfg.hidden();
    let blocks = (0..cfg.layers)
        .map(|_| Block {
            ln1_gamma: Tensor::filled(&[1, m], 1.0),
            ln1_beta: Tensor::zeros(&[1, m]),
            wq: init_matrix(&mut rng, m, m),
            wk: init_matrix(&mut rng, m, m),
            wv: init_matrix(&mut rng, m, m),
            wo: init_matrix(&mut rng, m, m),
            ln2_gamma: Tensor::filled(&[1, m], 1.0),
            ln2_beta: Tensor::zeros(&[1, m]),
            w1: init_matrix(&mut rng, m, hidden),
            b1: Tensor::zeros(&[1, hidden]),
            w2: init_matrix(&mut rng, hidden, m),
            b2: Tensor::zeros(&[1, m]),
        })
        .collect();
    Encoder {
        blocks,
        final_gamma: Tensor::filled(&[1, m], 1.0),
        final_beta: Tensor::zeros(&[1, m]),
    }
}

/// Input embedding: `w` and the attention projections use the scaled
/// Gaussian scheme, the bias starts at zero.
pub fn init_embedding(rng: &mut ChaCha8Rng, cfg: &BackboneConfig) -> Embedding<Tensor> {
    let m = cfg.width;
    Embedding {
        w: init_matrix(rng, cfg.lookback, m),
        b: Tensor::zeros(&[1, m]),
        wq: init_matrix(rng, m, m),
        wk: init_matrix(rng, m, m),
        wv: init_matrix(rng, m, m),
        wo: init_matrix(rng, m, m),
    }
}

/// LoRA factors: `A` small Gaussian (std `1/sqrt(M)`), `B` zero, so the
/// adapted projection starts equal to the frozen one.
pub fn init_adapters(
    rng: &mut ChaCha8Rng,
    cfg: &BackboneConfig,
    rank: usize,
    scale: f64,
) -> Result<Adapters<Tensor>, ConfigError> {
    if rank > cfg.width {
        return Err(ConfigError::Invalid {
            key: "lora_rank".into(),
            detail: format!("rank {rank} exceeds width {}", cfg.width),
        });
    }
    let m = cfg.width;
    let mut one = || Lora {
        a: truncated_normal(rng, rank, m, 1.0 / (m as f64).sqrt()),
        b: Tensor::zeros(&[m, rank]),
    };
    let blocks = (0..cfg.layers)
        .map(|_| AttnLora {
            q: one(),
            k: one(),
            v: one(),
            o: one(),
        })
        .collect();
    Ok(Adapters { blocks, scale })
}

pub fn init_head(rng: &mut ChaCha8Rng, width: usize, horizon: usize) -> Head<Tensor> {
    Head {
        w: init_matrix(rng, width, horizon),
        b: Tensor::zeros(&[1, horizon]),
    }
}

/// Rearranges flat `[B, L, P]` windows into `(B·P)×L` variate rows.
pub fn variate_rows(inputs: &[f64], batch: usize, lookback: usize, variates: usize) -> Tensor {
    assert_eq!(inputs.len(), batch * lookback * variates, "window buffer size");
    let mut out = vec![0.0; inputs.len()];
    for s in 0..batch {
        let src = &inputs[s * lookback * variates..(s + 1) * lookback * variates];
        for t in 0..lookback {
            for p in 0..variates {
                out[(s * variates + p) * lookback + t] = src[t * variates + p];
            }
        }
    }
    Tensor::matrix(batch * variates, lookback, out)
}

/// Inverse layout of [`variate_rows`]: `(B·P)×H` rows back to flat `[B, H, P]`.
pub fn horizon_major(rows: &Tensor, variates: usize) -> Vec<f64> {
    let horizon = rows.cols();
    let batch = rows.rows() / variates;
    let mut out = vec![0.0; rows.len()];
    for s in 0..batch {
        for p in 0..variates {
            let r = rows.row(s * variates + p);
            for (t, &v) in r.iter().enumerate() {
                out[(s * horizon + t) * variates + p] = v;
            }
        }
    }
    out
}

fn projection(g: &mut Graph, w: Var, lora: Option<(&Lora<Var>, f64)>) -> Result<Var, TensorError> {
    match lora {
        None => Ok(w),
        Some((l, scale)) => {
            let ba = g.matmul(l.b, l.a)?;
            let ba = g.scale(ba, scale);
            g.add(w, ba)
        }
    }
}

/// Multi-head self-attention within `block`-row groups, with output projection.
#[allow(clippy::too_many_arguments)]
pub fn self_attention(
    g: &mut Graph,
    x: Var,
    wq: Var,
    wk: Var,
    wv: Var,
    wo: Var,
    heads: usize,
    block: usize,
    lora: Option<(&AttnLora<Var>, f64)>,
) -> Result<Var, TensorError> {
    let pick = |f: fn(&AttnLora<Var>) -> &Lora<Var>| lora.map(|(l, s)| (f(l), s));
    let wq = projection(g, wq, pick(|l| &l.q))?;
    let wk = projection(g, wk, pick(|l| &l.k))?;
    let wv = projection(g, wv, pick(|l| &l.v))?;
    let wo = projection(g, wo, pick(|l| &l.o))?;
    let q = g.matmul(x, wq)?;
    let k = g.matmul(x, wk)?;
    let v = g.matmul(x, wv)?;
    let a = g.attention(q, k, v, heads, block, block)?;
    g.matmul(a, wo)
}

/// Linear part of the embedding: `(B·P)×L` variate rows to `(B·P)×M` tokens.
pub fn embed_linear(g: &mut Graph, rows: Var, emb: &Embedding<Var>) -> Result<Var, TensorError> {
    let e = g.matmul(rows, emb.w)?;
    g.add_row(e, emb.b)
}

/// Variate tokens `E + MHSA(E)` with `E` from [`embed_linear`].
pub fn embed_variates(
    g: &mut Graph,
    rows: Var,
    emb: &Embedding<Var>,
    cfg: &BackboneConfig,
    variates: usize,
) -> Result<Var, TensorError> {
    let t = g.value(rows);
    if t.cols() != cfg.lookback || variates == 0 || !t.rows().is_multiple_of(variates) {
        return Err(TensorError::Shape {
            op: "embed_variates",
            lhs: t.shape().to_vec(),
            rhs: vec![variates, cfg.lookback],
        });
    }
    let e = embed_linear(g, rows, emb)?;
    let a = self_attention(g, e, emb.wq, emb.wk, emb.wv, emb.wo, cfg.heads, variates, None)?;
    g.add(e, a)
}

/// One pre-norm block.
pub fn block_forward(
    g: &mut Graph,
    x: Var,
    w: &Block<Var>,
    heads: usize,
    tokens: usize,
    lora: Option<(&AttnLora<Var>, f64)>,
) -> Result<Var, TensorError> {
    let h = g.layer_norm(x, w.ln1_gamma, w.ln1_beta, LAYER_NORM_EPS)?;
    let a = self_attention(g, h, w.wq, w.wk, w.wv, w.wo, heads, tokens, lora)?;
    let x1 = g.add(x, a)?;
    let h2 = g.layer_norm(x1, w.ln2_gamma, w.ln2_beta, LAYER_NORM_EPS)?;
    let f = g.matmul(h2, w.w1)?;
    let f = g.add_row(f, w.b1)?;
    let f = g.gelu(f);
    let f = g.matmul(f, w.w2)?;
    let f = g.add_row(f, w.b2)?;
    g.add(x1, f)
}

/// Encoder output and per-layer pooled features (`B×M` each, input-first).
pub struct EncoderOutput {
    pub tokens: Var,
    pub trace: Vec<Var>,
}

/// Runs every block, then the final norm. `tokens` is the row count of one
/// sample (the number of variates).
pub fn encoder_forward(
    g: &mut Graph,
    x: Var,
    enc: &Encoder<Var>,
    cfg: &BackboneConfig,
    tokens: usize,
    adapters: Option<&Adapters<Var>>,
) -> Result<EncoderOutput, TensorError> {
    if g.value(x).cols() != cfg.width {
        return Err(TensorError::Shape {
            op: "encoder_forward",
            lhs: g.value(x).shape().to_vec(),
            rhs: vec![tokens, cfg.width],
        });
    }
    if let Some(a) = adapters {
        if a.blocks.len() != enc.blocks.len() {
            return Err(TensorError::Domain {
                op: "encoder_forward",
                detail: format!("{} adapter sets for {} blocks", a.blocks.len(), enc.blocks.len()),
            });
        }
    }
    let mut h = x;
    let mut trace = Vec::with_capacity(enc.blocks.len());
    for (l, block) in enc.blocks.iter().enumerate() {
        let lora = adapters.map(|a| (&a.blocks[l], a.scale));
        h = block_forward(g, h, block, cfg.heads, tokens, lora)?;
        trace.push(g.mean_pool_blocks(h, tokens)?);
    }
    let out = g.layer_norm(h, enc.final_gamma, enc.final_beta, LAYER_NORM_EPS)?;
    Ok(EncoderOutput { tokens: out, trace })
}

/// Per-token forecast `(B·P)×H` from `(B·P)×M` tokens.
pub fn head_forward(g: &mut Graph, tokens: Var, head: &Head<Var>) -> Result<Var, TensorError> {
    let y = g.matmul(tokens, head.w)?;
    g.add_row(y, head.b)
}

/// Single-sample forecast: `P×M` tokens to an `H×P` prediction.
pub fn forecast_head(g: &mut Graph, tokens: Var, head: &Head<Var>) -> Result<Var, TensorError> {
    let y = head_forward(g, tokens, head)?;
    Ok(g.transpose(y))
}
