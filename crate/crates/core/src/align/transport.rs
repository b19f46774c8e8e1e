//! Entropic optimal transport between forecast point clouds.

use crate::error::TensorError;
use crate::tensor::{Graph, PairwiseCost, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct SinkhornOptions {
    /// Entropic regularization weight.
    pub mu: f64,
    pub max_iters: usize,
    /// Stop once the L1 marginal violation drops below this.
    pub tol: f64,
}

impl Default for SinkhornOptions {
    fn default() -> Self {
        Self {
            mu: 0.1,
            max_iters: 100,
            tol: 1e-10,
        }
    }
}

/// Coupling returned by [`sinkhorn`].
#[derive(Clone, Debug)]
pub struct TransportPlan {
    /// `n×m`, nonnegative.
    pub plan: Tensor,
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// L1 row plus column marginal violation after each iteration.
    pub violations: Vec<f64>,
    /// `⟨P, W⟩`
    pub cost: f64,
}

impl TransportPlan {
    pub fn marginal_violation(&self) -> f64 {
        self.violations.last().copied().unwrap_or(f64::INFINITY)
    }

    /// `-Σ P ln P`, with `0 ln 0 = 0`.
    pub fn entropy(&self) -> f64 {
        -self
            .plan
            .data()
            .iter()
            .filter(|&&p| p > 0.0)
            .map(|p| p * p.ln())
            .sum::<f64>()
    }
}

fn lse(it: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = it.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + it.map(|v| (v - max).exp()).sum::<f64>().ln()
}

fn check_marginal(name: &str, m: &[f64]) -> Result<(), TensorError> {
    if m.iter().any(|&v| !(v > 0.0) || !v.is_finite()) {
        return Err(TensorError::Domain {
            op: "sinkhorn",
            detail: format!("marginal {name} must be strictly positive"),
        });
    }
    let s: f64 = m.iter().sum();
    if (s - 1.0).abs() > 1e-9 {
        return Err(TensorError::Domain {
            op: "sinkhorn",
            detail: format!("marginal {name} sums to {s}, expected 1"),
        });
    }
    Ok(())
}

/// Log-domain Sinkhorn for `min_P ⟨P, W⟩ - μ·H(P)` subject to `P1 = a`, `Pᵀ1 = b`.
///
/// Each iteration updates the row potential then the column potential, so
/// column sums are exact after every step and the recorded violation is
/// dominated by the rows.
pub fn sinkhorn(
    cost: &Tensor,
    a: &[f64],
    b: &[f64],
    opts: &SinkhornOptions,
) -> Result<TransportPlan, TensorError> {
    if !(opts.mu > 0.0) {
        return Err(TensorError::Domain {
            op: "sinkhorn",
            detail: format!("mu must be positive, got {}", opts.mu),
        });
    }
    let (n, m) = (cost.rows(), cost.cols());
    if a.len() != n || b.len() != m {
        return Err(TensorError::Shape {
            op: "sinkhorn",
            lhs: cost.shape().to_vec(),
            rhs: vec![a.len(), b.len()],
        });
    }
    if !cost.is_finite() {
        return Err(TensorError::NonFinite("sinkhorn cost".into()));
    }
    check_marginal("a", a)?;
    check_marginal("b", b)?;

    let mu = opts.mu;
    let w = cost.data();
    let log_a: Vec<f64> = a.iter().map(|v| v.ln()).collect();
    let log_b: Vec<f64> = b.iter().map(|v| v.ln()).collect();
    let mut f = vec![0.0; n];
    let mut g = vec![0.0; m];
    let mut violations = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    let mut plan = vec![0.0; n * m];

    for _ in 0..opts.max_iters {
        iterations += 1;
        for i in 0..n {
            let row = (0..m).map(|j| (g[j] - w[i * m + j]) / mu);
            f[i] = mu * log_a[i] - mu * lse(row);
        }
        for j in 0..m {
            let col = (0..n).map(|i| (f[i] - w[i * m + j]) / mu);
            g[j] = mu * log_b[j] - mu * lse(col);
        }
        for i in 0..n {
            for j in 0..m {
                plan[i * m + j] = ((f[i] + g[j] - w[i * m + j]) / mu).exp();
            }
        }
        let viol = marginal_l1(&plan, n, m, a, b);
        if !viol.is_finite() {
            return Err(TensorError::NonFinite("sinkhorn kernel".into()));
        }
        violations.push(viol);
        if viol < opts.tol {
            converged = true;
            break;
        }
    }
    let plan = Tensor::matrix(n, m, plan);
    if !plan.is_finite() {
        return Err(TensorError::NonFinite("sinkhorn plan".into()));
    }
    let total: f64 = plan.data().iter().zip(w).map(|(p, c)| p * c).sum();
    Ok(TransportPlan {
        plan,
        a: a.to_vec(),
        b: b.to_vec(),
        iterations,
        converged,
        violations,
        cost: total,
    })
}

fn marginal_l1(plan: &[f64], n: usize, m: usize, a: &[f64], b: &[f64]) -> f64 {
    let rows: f64 = (0..n)
        .map(|i| (plan[i * m..(i + 1) * m].iter().sum::<f64>() - a[i]).abs())
        .sum();
    let cols: f64 = (0..m)
        .map(|j| ((0..n).map(|i| plan[i * m + j]).sum::<f64>() - b[j]).abs())
        .sum();
    rows + cols
}

/// Which rows of the forecast are treated as transport support points.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OtAxis {
    /// One point per variate (its horizon trajectory).
    Variates,
    /// One point per horizon step (its cross-variate vector).
    Horizon,
}

/// How gradients reach the forecasts through the transport loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OtGradient {
    /// Plan frozen at the solver output.
    Envelope,
    /// Differentiate through every Sinkhorn iteration.
    Unrolled,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OtConfig {
    pub sinkhorn: SinkhornOptions,
    pub cost: PairwiseCost,
    pub axis: OtAxis,
    pub gradient: OtGradient,
}

impl Default for OtConfig {
    fn default() -> Self {
        Self {
            sinkhorn: SinkhornOptions::default(),
            cost: PairwiseCost::SquaredEuclidean,
            axis: OtAxis::Variates,
            gradient: OtGradient::Envelope,
        }
    }
}

/// Output of [`ot_loss`]: the scalar plus the per-sample plans used.
pub struct OtLoss {
    pub loss: Var,
    pub plans: Vec<TransportPlan>,
}

/// Batch-mean entropic transport loss between two stacked forecasts.
///
/// `y_time` and `y_text` are `(B·P)×H`, one `P×H` block per sample (row `i`
/// of a block is variate `i`'s horizon trajectory). Per sample the value is
/// `⟨P, W⟩ - μ·H(P) + μ·(H(a) + H(b))`, i.e. the transport cost plus `μ` times
/// the KL divergence of the plan from the product of the uniform marginals,
/// which is zero for coincident point clouds with an all-zero cost.
pub fn ot_loss(
    g: &mut Graph,
    y_time: Var,
    y_text: Var,
    variates: usize,
    cfg: &OtConfig,
) -> Result<OtLoss, TensorError> {
    let (t_time, t_text) = (g.value(y_time), g.value(y_text));
    if t_time.shape() != t_text.shape() {
        return Err(TensorError::Shape {
            op: "ot_loss",
            lhs: t_time.shape().to_vec(),
            rhs: t_text.shape().to_vec(),
        });
    }
    if variates == 0 || t_time.rows() % variates != 0 {
        return Err(TensorError::Domain {
            op: "ot_loss",
            detail: format!("{} rows not divisible by {variates} variates", t_time.rows()),
        });
    }
    let batches = t_time.rows() / variates;
    let (a_pts, b_pts, block) = match cfg.axis {
        OtAxis::Variates => (y_time, y_text, variates),
        OtAxis::Horizon => {
            let horizon = t_time.cols();
            let a = per_sample_transpose(g, y_time, batches, variates)?;
            let b = per_sample_transpose(g, y_text, batches, variates)?;
            (a, b, horizon)
        }
    };
    let w = g.pairwise_cost(a_pts, b_pts, block, cfg.cost)?;
    let uniform = vec![1.0 / block as f64; block];
    let marg_entropy = 2.0 * (block as f64).ln();

    let mut plans = Vec::with_capacity(batches);
    for s in 0..batches {
        let ws = g.value(w).slice_rows(s * block, block);
        plans.push(sinkhorn(&ws, &uniform, &uniform, &cfg.sinkhorn)?);
    }
    let mu = cfg.sinkhorn.mu;

    let loss = match cfg.gradient {
        OtGradient::Envelope => {
            let mut stacked = Vec::with_capacity(batches * block * block);
            let mut constant = 0.0;
            for p in &plans {
                stacked.extend_from_slice(p.plan.data());
                constant += -mu * p.entropy() + mu * marg_entropy;
            }
            let plan = g.constant(Tensor::matrix(batches * block, block, stacked));
            let weighted = g.mul(plan, w)?;
            let transport = g.sum(weighted);
            let total = g.add_scalar(transport, constant);
            g.scale(total, 1.0 / batches as f64)
        }
        OtGradient::Unrolled => {
            let mut terms = Vec::with_capacity(batches);
            for (s, p) in plans.iter().enumerate() {
                let ws = g.slice_rows(w, s * block, block)?;
                terms.push(unrolled_objective(g, ws, &uniform, mu, p.iterations)?);
            }
            let all = g.concat_rows(&terms)?;
            let total = g.sum(all);
            let total = g.add_scalar(total, batches as f64 * mu * marg_entropy);
            g.scale(total, 1.0 / batches as f64)
        }
    };
    Ok(OtLoss { loss, plans })
}

fn per_sample_transpose(
    g: &mut Graph,
    y: Var,
    batches: usize,
    variates: usize,
) -> Result<Var, TensorError> {
    let mut parts = Vec::with_capacity(batches);
    for s in 0..batches {
        let block = g.slice_rows(y, s * variates, variates)?;
        parts.push(g.transpose(block));
    }
    g.concat_rows(&parts)
}

/// `⟨P, W⟩ + μ Σ P ln P` with `P` produced by `iters` differentiable
/// log-domain Sinkhorn steps on square uniform marginals.
fn unrolled_objective(
    g: &mut Graph,
    w: Var,
    marginal: &[f64],
    mu: f64,
    iters: usize,
) -> Result<Var, TensorError> {
    let n = marginal.len();
    let log_k = g.scale(w, -1.0 / mu);
    let log_m: Vec<f64> = marginal.iter().map(|v| v.ln()).collect();
    let log_a = g.constant(Tensor::matrix(n, 1, log_m.clone()));
    let log_b = g.constant(Tensor::matrix(1, n, log_m));
    // Scaled potentials f/μ (n×1) and g/μ (1×n).
    let mut u = g.constant(Tensor::zeros(&[n, 1]));
    let mut v = g.constant(Tensor::zeros(&[1, n]));
    for _ in 0..iters {
        let shifted = g.add_row(log_k, v)?;
        let lse = g.log_sum_exp_rows(shifted);
        u = g.sub(log_a, lse)?;
        let shifted = g.add_col(log_k, u)?;
        let shifted_t = g.transpose(shifted);
        let lse = g.log_sum_exp_rows(shifted_t);
        let lse = g.transpose(lse);
        v = g.sub(log_b, lse)?;
    }
    let log_p = g.add_col(log_k, u)?;
    let log_p = g.add_row(log_p, v)?;
    let p = g.exp(log_p);
    let cost = g.mul(p, w)?;
    let plogp = g.mul(p, log_p)?;
    let plogp = g.scale(plogp, mu);
    let obj = g.add(cost, plogp)?;
    Ok(g.sum(obj))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_cost_gives_outer_product() {
        let a = [0.2, 0.3, 0.5];
        let b = [0.6, 0.4];
        let p = sinkhorn(&Tensor::zeros(&[3, 2]), &a, &b, &SinkhornOptions::default()).unwrap();
        for i in 0..3 {
            for j in 0..2 {
                assert!((p.plan.get(i, j) - a[i] * b[j]).abs() < 1e-12);
            }
        }
        assert!(p.converged);
    }

    #[test]
    fn large_mu_approaches_independence() {
        let w = Tensor::matrix(2, 3, vec![0.0, 1.0, 0.4, 0.9, 0.2, 0.7]);
        let a = [0.5, 0.5];
        let b = [0.2, 0.3, 0.5];
        let opts = SinkhornOptions {
            mu: 1e3,
            ..SinkhornOptions::default()
        };
        let p = sinkhorn(&w, &a, &b, &opts).unwrap();
        for i in 0..2 {
            for j in 0..3 {
                assert!((p.plan.get(i, j) - a[i] * b[j]).abs() < 1e-4);
            }
        }
    }

    #[test]
    fn swap_cost_prefers_diagonal() {
        let w = Tensor::matrix(2, 2, vec![0.0, 1.0, 1.0, 0.0]);
        let opts = SinkhornOptions {
            mu: 0.05,
            ..SinkhornOptions::default()
        };
        let p = sinkhorn(&w, &[0.5, 0.5], &[0.5, 0.5], &opts).unwrap();
        assert!(p.plan.get(0, 1) < 1e-4 && p.plan.get(1, 0) < 1e-4);
        assert!((p.plan.get(0, 0) - 0.5).abs() < 1e-4);
        // Exact LP optimum is 0.
        assert!(p.cost >= 0.0 && p.cost <= 0.05 * 4f64.ln());
    }

    #[test]
    fn rejects_bad_inputs() {
        let w = Tensor::zeros(&[2, 2]);
        let bad_mu = SinkhornOptions {
            mu: 0.0,
            ..SinkhornOptions::default()
        };
        assert!(sinkhorn(&w, &[0.5, 0.5], &[0.5, 0.5], &bad_mu).is_err());
        assert!(sinkhorn(&w, &[1.0, 0.0], &[0.5, 0.5], &SinkhornOptions::default()).is_err());
        assert!(sinkhorn(&w, &[0.6, 0.6], &[0.5, 0.5], &SinkhornOptions::default()).is_err());
    }

    #[test]
    fn zero_forecasts_have_zero_loss() {
        let mut g = Graph::new();
        let y = g.constant(Tensor::zeros(&[6, 4]));
        let out = ot_loss(&mut g, y, y, 3, &OtConfig::default()).unwrap();
        assert!(g.value(out.loss).item().abs() < 1e-12);
    }
}
