use crate::error::TensorError;
use crate::tensor::{Graph, Tensor, Var};

/// In-batch InfoNCE with cosine similarity.
///
/// Row `i` of `f_time` is the anchor, row `i` of `f_text` its positive, and
/// every other row of `f_text` a negative. Returns the mean over anchors of
/// `-log softmax_j(cos(f_time_i, f_text_j) / τ)[i]`.
pub fn info_nce(g: &mut Graph, f_time: Var, f_text: Var, tau: f64) -> Result<Var, TensorError> {
    if !(tau > 0.0) {
        return Err(TensorError::Domain {
            op: "info_nce",
            detail: format!("temperature must be positive, got {tau}"),
        });
    }
    let (a, b) = (g.value(f_time), g.value(f_text));
    if a.shape() != b.shape() || a.rows() == 0 {
        return Err(TensorError::Shape {
            op: "info_nce",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let n = a.rows();
    let za = g.l2_normalize_rows(f_time).map_err(|e| named("time", e))?;
    let zb = g.l2_normalize_rows(f_text).map_err(|e| named("text", e))?;
    let zbt = g.transpose(zb);
    let sim = g.matmul(za, zbt)?;
    let logits = g.scale(sim, 1.0 / tau);
    let log_p = g.log_softmax_rows(logits);
    let eye = g.constant(Tensor::identity(n));
    let diag = g.mul(log_p, eye)?;
    let total = g.sum(diag);
    Ok(g.scale(total, -1.0 / n as f64))
}

fn named(side: &str, e: TensorError) -> TensorError {
    match e {
        TensorError::Domain { op, detail } => TensorError::Domain {
            op,
            detail: format!("{side} features: {detail}"),
        },
        other => other,
    }
}

/// `Σ_{m=1..n} γ^(n-m) · loss_m` over per-layer losses ordered input-first.
pub fn decay_weighted_sum(g: &mut Graph, per_layer: &[Var], gamma: f64) -> Result<Var, TensorError> {
    if per_layer.is_empty() {
        return Err(TensorError::Domain {
            op: "feature_loss",
            detail: "no layers".into(),
        });
    }
    if !(gamma > 0.0) {
        return Err(TensorError::Domain {
            op: "feature_loss",
            detail: format!("decay must be positive, got {gamma}"),
        });
    }
    let n = per_layer.len();
    let mut acc: Option<Var> = None;
    for (idx, &l) in per_layer.iter().enumerate() {
        let w = gamma.powi((n - 1 - idx) as i32);
        let term = g.scale(l, w);
        acc = Some(match acc {
            None => term,
            Some(a) => g.add(a, term)?,
        });
    }
    Ok(acc.expect("non-empty"))
}

/// Per-layer InfoNCE between paired pooled traces, then the decay-weighted sum.
///
/// `time_layers[m]` and `text_layers[m]` are `B×M` pooled features of layer
/// `m` (input-first). Returns the feature loss and the per-layer terms.
pub fn feature_loss(
    g: &mut Graph,
    time_layers: &[Var],
    text_layers: &[Var],
    gamma: f64,
    tau: f64,
) -> Result<(Var, Vec<Var>), TensorError> {
    if time_layers.len() != text_layers.len() {
        return Err(TensorError::Domain {
            op: "feature_loss",
            detail: format!(
                "layer count mismatch: {} vs {}",
                time_layers.len(),
                text_layers.len()
            ),
        });
    }
    let per_layer = time_layers
        .iter()
        .zip(text_layers)
        .map(|(&a, &b)| info_nce(g, a, b, tau))
        .collect::<Result<Vec<_>, _>>()?;
    let total = decay_weighted_sum(g, &per_layer, gamma)?;
    Ok((total, per_layer))
}
