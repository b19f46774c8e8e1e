//! Virtual text tokens from time-series tokens.
//!
//! A self-attention branch over the time tokens and a cross-attention branch
//! whose keys/values are learnable prompts stacked on projected anchor
//! directions run in parallel from one shared query projection. A sigmoid
//! gate mixes them per token and per feature:
//!
//! ```text
//! g      = sigmoid([X_cross, X_self]·W_gate + b_gate)
//! X_text = X_cross ⊙ g + X_self ⊙ (1 − g)
//! ```

use rand_chacha::ChaCha8Rng;

use crate::backbone::{init_matrix, truncated_normal};
use crate::error::TensorError;
use crate::tensor::{Graph, Tensor, Var};

/// Prompt rows are drawn with this standard deviation.
pub const PROMPT_INIT_STD: f64 = 0.1;

#[derive(Clone, Debug, PartialEq)]
pub struct DagParams<T> {
    /// Shared query projection, `M×M`.
    pub wq: T,
    pub wk_self: T,
    pub wv_self: T,
    pub wk_cross: T,
    pub wv_cross: T,
    /// `L_p×M`; columns `h·d_k..(h+1)·d_k` are head `h`'s prompt keys.
    pub prompt_k: T,
    /// `L_p×M`
    pub prompt_v: T,
    /// `2M×M`
    pub w_gate: T,
    /// `1×M`
    pub b_gate: T,
}

impl<T> DagParams<T> {
    pub fn map<U>(&self, mut f: impl FnMut(&str, &T) -> U) -> DagParams<U> {
        DagParams {
            wq: f("wq", &self.wq),
            wk_self: f("wk_self", &self.wk_self),
            wv_self: f("wv_self", &self.wv_self),
            wk_cross: f("wk_cross", &self.wk_cross),
            wv_cross: f("wv_cross", &self.wv_cross),
            prompt_k: f("prompt_k", &self.prompt_k),
            prompt_v: f("prompt_v", &self.prompt_v),
            w_gate: f("w_gate", &self.w_gate),
            b_gate: f("b_gate", &self.b_gate),
        }
    }
}

/// Projections use the scaled Gaussian scheme; prompts are small Gaussians;
/// the gate starts at zero (an even mix).
pub fn init_dag(rng: &mut ChaCha8Rng, width: usize, prompt_len: usize) -> DagParams<Tensor> {
    DagParams {
        wq: init_matrix(rng, width, width),
        wk_self: init_matrix(rng, width, width),
        wv_self: init_matrix(rng, width, width),
        wk_cross: init_matrix(rng, width, width),
        wv_cross: init_matrix(rng, width, width),
        prompt_k: truncated_normal(rng, prompt_len, width, PROMPT_INIT_STD),
        prompt_v: truncated_normal(rng, prompt_len, width, PROMPT_INIT_STD),
        w_gate: Tensor::zeros(&[2 * width, width]),
        b_gate: Tensor::zeros(&[1, width]),
    }
}

/// Multi-head self-attention over the time tokens of each sample.
pub fn self_branch(
    g: &mut Graph,
    x_time: Var,
    p: &DagParams<Var>,
    heads: usize,
    tokens: usize,
) -> Result<Var, TensorError> {
    let q = g.matmul(x_time, p.wq)?;
    let k = g.matmul(x_time, p.wk_self)?;
    let v = g.matmul(x_time, p.wv_self)?;
    g.attention(q, k, v, heads, tokens, tokens)
}

/// Cross-attention from time tokens to `[prompts; anchors·W]`.
///
/// `anchors` is `d×M` (possibly zero rows). Every sample attends to the same
/// `L_p + d` key positions.
pub fn cross_branch(
    g: &mut Graph,
    x_time: Var,
    anchors: Var,
    p: &DagParams<Var>,
    heads: usize,
    tokens: usize,
) -> Result<Var, TensorError> {
    let n_prompt = g.value(p.prompt_k).rows();
    let n_anchor = g.value(anchors).rows();
    if n_prompt + n_anchor == 0 {
        return Err(TensorError::Domain {
            op: "cross_branch",
            detail: "no keys available".into(),
        });
    }
    let q = g.matmul(x_time, p.wq)?;
    let (k, v) = if n_anchor == 0 {
        (p.prompt_k, p.prompt_v)
    } else {
        let ka = g.matmul(anchors, p.wk_cross)?;
        let va = g.matmul(anchors, p.wv_cross)?;
        if n_prompt == 0 {
            (ka, va)
        } else {
            (g.concat_rows(&[p.prompt_k, ka])?, g.concat_rows(&[p.prompt_v, va])?)
        }
    };
    g.attention(q, k, v, heads, tokens, n_prompt + n_anchor)
}

/// Gated convex mix. Returns `(X_text, g)`.
pub fn gate_fuse(
    g: &mut Graph,
    x_cross: Var,
    x_self: Var,
    w_gate: Var,
    b_gate: Var,
) -> Result<(Var, Var), TensorError> {
    let (a, b) = (g.value(x_cross), g.value(x_self));
    if a.shape() != b.shape() {
        return Err(TensorError::Shape {
            op: "gate_fuse",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let both = g.concat_cols(&[x_cross, x_self])?;
    let z = g.matmul(both, w_gate)?;
    let z = g.add_row(z, b_gate)?;
    let gate = g.sigmoid(z);
    let keep = g.one_minus(gate);
    let c = g.mul(x_cross, gate)?;
    let s = g.mul(x_self, keep)?;
    Ok((g.add(c, s)?, gate))
}

/// Virtual text tokens. With `enabled == false` the gate is forced to the
/// self path, so the result is exactly the self branch.
pub fn dag_forward(
    g: &mut Graph,
    x_time: Var,
    anchors: Var,
    p: &DagParams<Var>,
    heads: usize,
    tokens: usize,
    enabled: bool,
) -> Result<Var, TensorError> {
    let x_self = self_branch(g, x_time, p, heads, tokens)?;
    if !enabled {
        return Ok(x_self);
    }
    let x_cross = cross_branch(g, x_time, anchors, p, heads, tokens)?;
    Ok(gate_fuse(g, x_cross, x_self, p.w_gate, p.b_gate)?.0)
}
