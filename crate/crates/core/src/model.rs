//! Dual-tower distillation model.
//!
//! Student path: window → variate tokens → LoRA-adapted backbone → student
//! head → `Y_time`. Teacher path: the same tokens → gated virtual text →
//! frozen backbone → frozen head → `Y_text`. Training combines the task loss
//! on `Y_time` with per-layer InfoNCE between the two towers' pooled traces
//! and entropic transport between `Y_time` and `Y_text`. Inference runs the
//! student path only.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::align::{
    combine_losses, feature_loss, ot_loss, task_loss, LossBreakdown, OtConfig, TaskLoss,
};
use crate::backbone::{
    self, embed_variates, encoder_forward, head_forward, init_adapters, init_embedding, init_head,
    init_pretrained, variate_rows, Adapters, BackboneConfig, Embedding, Encoder, Head,
};
use crate::data::{Batch, NormStats};
use crate::error::{ConfigError, Error, Result};
use crate::gating::{dag_forward, init_dag, DagParams};
use crate::optim::Adam;
use crate::params::{Binder, ParamId, ParamStore, Role};
use crate::tensor::{grad_check, GradCheckOptions, GradCheckReport, Graph, Tensor, Var};
use crate::vocab::{qr_reduce, QrOptions, VocabEmbedding};

// Independent RNG streams derived from the model seed.
const STREAM_EMBEDDING: u64 = 1;
const STREAM_ADAPTERS: u64 = 2;
const STREAM_DAG: u64 = 3;
const STREAM_HEAD: u64 = 4;
const VOCAB_SEED_SALT: u64 = 0x7ab1_e5ee_d000_0001;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub horizon: usize,
    pub variates: usize,
    pub lora_rank: usize,
    pub lora_scale: f64,
    /// Prompt rows `L_p` in the cross-attention branch.
    pub prompt_len: usize,
    /// Rows of the synthetic vocabulary dictionary.
    pub vocab_size: usize,
    /// Explicit anchor count; numerical rank when `None`.
    pub anchor_dim: Option<usize>,
    pub max_anchors: usize,
    pub rank_tol: f64,
    pub qr_pivoting: bool,
    pub task: TaskLoss,
    /// Extra task term on the teacher forecast, folded into the task loss.
    pub teacher_task_weight: f64,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub tau: f64,
    pub ot: OtConfig,
    /// When false the gate is forced to the self branch.
    pub dag: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            backbone: BackboneConfig::default(),
            horizon: 96,
            variates: 1,
            lora_rank: 4,
            lora_scale: 1.0,
            prompt_len: 8,
            vocab_size: 512,
            anchor_dim: None,
            max_anchors: 64,
            rank_tol: 1e-10,
            qr_pivoting: false,
            task: TaskLoss::SmoothL1,
            teacher_task_weight: 0.0,
            alpha: 0.1,
            beta: 0.01,
            gamma: 0.8,
            tau: 0.1,
            ot: OtConfig::default(),
            dag: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        self.backbone.validate()?;
        let invalid = |key: &str, detail: String| ConfigError::Invalid {
            key: key.into(),
            detail,
        };
        if self.horizon == 0 {
            return Err(invalid("horizon", "must be >= 1".into()));
        }
        if self.variates == 0 {
            return Err(invalid("variates", "must be >= 1".into()));
        }
        if self.lora_rank > self.backbone.width {
            return Err(invalid(
                "lora_rank",
                format!("rank {} exceeds width {}", self.lora_rank, self.backbone.width),
            ));
        }
        for (key, v) in [
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("teacher_task_weight", self.teacher_task_weight),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(invalid(key, format!("must be finite and >= 0, got {v}")));
            }
        }
        for (key, v) in [
            ("gamma", self.gamma),
            ("tau", self.tau),
            ("mu", self.ot.sinkhorn.mu),
            ("rank_tol", self.rank_tol),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(invalid(key, format!("must be finite and > 0, got {v}")));
            }
        }
        if self.vocab_size == 0 {
            return Err(invalid("vocab_size", "must be >= 1".into()));
        }
        if self.prompt_len == 0 && self.max_anchors == 0 {
            return Err(invalid("prompt_len", "no keys available for cross-attention".into()));
        }
        Ok(())
    }
}

/// Named parameter layout of the model.
#[derive(Clone, Debug)]
struct Layout {
    embedding: Embedding<ParamId>,
    encoder: Encoder<ParamId>,
    adapters: Adapters<ParamId>,
    dag: DagParams<ParamId>,
    student_head: Head<ParamId>,
    teacher_head: Head<ParamId>,
    anchors: ParamId,
}

#[derive(Clone, Debug)]
pub struct DistillModel {
    pub cfg: ModelConfig,
    pub store: ParamStore,
    /// De-normalization statistics applied to inference outputs.
    pub norm: NormStats,
    layout: Layout,
    anchor_rank: usize,
}

/// Losses and tensors of one training forward pass.
#[derive(Clone, Debug)]
pub struct StepOutput {
    pub breakdown: LossBreakdown,
    /// `(B·P)×H`
    pub y_time: Tensor,
    /// `(B·P)×H`
    pub y_text: Tensor,
    /// Per layer, `B×M`.
    pub student_trace: Vec<Tensor>,
    pub teacher_trace: Vec<Tensor>,
}

/// De-normalized student forecasts with matching ground truth, flat `[B, H, P]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ForecastBatch {
    pub size: usize,
    pub horizon: usize,
    pub variates: usize,
    pub predictions: Vec<f64>,
    pub targets: Vec<f64>,
    pub norm: NormStats,
}

/// Nodes of a training graph.
pub struct TrainGraph {
    pub total: Var,
    pub task: Var,
    pub feature: Var,
    pub feature_per_layer: Vec<Var>,
    pub ot: Var,
    pub y_time: Var,
    pub y_text: Var,
    pub student_trace: Vec<Var>,
    pub teacher_trace: Vec<Var>,
}

/// Gradient status of one parameter after a backward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientAudit {
    pub name: String,
    pub trainable: bool,
    /// `None` when no gradient reached the parameter.
    pub finite: Option<bool>,
}

impl DistillModel {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let bb = &cfg.backbone;
        let rng = |stream| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            r.set_stream(stream);
            r
        };
        let mut store = ParamStore::new();

        let emb = init_embedding(&mut rng(STREAM_EMBEDDING), bb);
        let embedding = emb.map(|n, t| store.add(format!("embed.{n}"), t.clone(), true, Role::Shared));

        let pretrained = init_pretrained(seed, bb);
        let encoder =
            pretrained.map(|n, t| store.add(format!("backbone.{n}"), t.clone(), false, Role::Shared));

        let lora = init_adapters(&mut rng(STREAM_ADAPTERS), bb, cfg.lora_rank, cfg.lora_scale)?;
        let adapters = Adapters {
            blocks: lora
                .blocks
                .iter()
                .enumerate()
                .map(|(l, b)| {
                    b.map(|n, t| store.add(format!("lora.block{l}.{n}"), t.clone(), true, Role::Student))
                })
                .collect(),
            scale: lora.scale,
        };

        let dag_init = init_dag(&mut rng(STREAM_DAG), bb.width, cfg.prompt_len);
        let dag = dag_init.map(|n, t| store.add(format!("dag.{n}"), t.clone(), true, Role::Teacher));

        let head = init_head(&mut rng(STREAM_HEAD), bb.width, cfg.horizon);
        let student_head =
            head.map(|n, t| store.add(format!("student_head.{n}"), t.clone(), true, Role::Student));
        let teacher_head =
            head.map(|n, t| store.add(format!("teacher_head.{n}"), t.clone(), false, Role::Teacher));

        let vocab = VocabEmbedding::synthetic(seed ^ VOCAB_SEED_SALT, cfg.vocab_size, bb.width);
        let principal = qr_reduce(
            &vocab,
            &QrOptions {
                rank: cfg.anchor_dim,
                rank_tol: cfg.rank_tol,
                pivoting: cfg.qr_pivoting,
                max_anchors: Some(cfg.max_anchors),
            },
        )?;
        let anchor_rank = principal.detected_rank;
        let anchors = store.add("anchors", principal.rows, false, Role::Teacher);

        let norm = NormStats::identity(cfg.variates);
        Ok(Self {
            cfg,
            store,
            norm,
            layout: Layout {
                embedding,
                encoder,
                adapters,
                dag,
                student_head,
                teacher_head,
                anchors,
            },
            anchor_rank,
        })
    }

    /// Numerical rank of the synthetic vocabulary before capping.
    pub fn anchor_rank(&self) -> usize {
        self.anchor_rank
    }

    /// Number of anchor rows in use.
    pub fn anchor_count(&self) -> usize {
        self.store.value(self.layout.anchors).rows()
    }

    /// Parameters used only to build the teacher path.
    pub fn teacher_only(&self) -> Vec<ParamId> {
        self.store
            .iter()
            .filter(|(_, p)| p.role == Role::Teacher)
            .map(|(i, _)| i)
            .collect()
    }

    fn check_batch(&self, batch: &Batch) -> Result<()> {
        let c = &self.cfg;
        if batch.lookback != c.backbone.lookback || batch.variates != c.variates || batch.horizon != c.horizon {
            return Err(Error::Model(format!(
                "batch has lookback {}, horizon {}, {} variates; model expects {}, {}, {}",
                batch.lookback, batch.horizon, batch.variates, c.backbone.lookback, c.horizon, c.variates
            )));
        }
        if batch.size == 0 {
            return Err(Error::Model("empty batch".into()));
        }
        Ok(())
    }

    fn student_tokens(&self, g: &mut Graph, b: &mut Binder, batch: &Batch) -> Result<Var> {
        let rows = variate_rows(&batch.inputs, batch.size, batch.lookback, batch.variates);
        let rows = g.constant(rows);
        let emb = self.layout.embedding.map(|_, &id| b.bind(g, id));
        Ok(embed_variates(g, rows, &emb, &self.cfg.backbone, self.cfg.variates)?)
    }

    /// Student path only; returns `(B·P)×H` forecasts in normalized units.
    pub fn build_infer(&self, g: &mut Graph, b: &mut Binder, batch: &Batch) -> Result<Var> {
        self.check_batch(batch)?;
        let x_time = self.student_tokens(g, b, batch)?;
        let enc = self.layout.encoder.map(|_, &id| b.bind(g, id));
        let adapters = self.bind_adapters(g, b);
        let out = encoder_forward(g, x_time, &enc, &self.cfg.backbone, self.cfg.variates, Some(&adapters))?;
        let head = self.layout.student_head.map(|_, &id| b.bind(g, id));
        Ok(head_forward(g, out.tokens, &head)?)
    }

    fn bind_adapters(&self, g: &mut Graph, b: &mut Binder) -> Adapters<Var> {
        Adapters {
            blocks: self
                .layout
                .adapters
                .blocks
                .iter()
                .map(|blk| blk.map(|_, &id| b.bind(g, id)))
                .collect(),
            scale: self.layout.adapters.scale,
        }
    }

    /// Full training graph.
    pub fn build_train(&self, g: &mut Graph, b: &mut Binder, batch: &Batch) -> Result<TrainGraph> {
        self.check_batch(batch)?;
        let c = &self.cfg;
        let p = c.variates;
        let x_time = self.student_tokens(g, b, batch)?;

        let enc = self.layout.encoder.map(|_, &id| b.bind(g, id));
        let adapters = self.bind_adapters(g, b);
        let student = encoder_forward(g, x_time, &enc, &c.backbone, p, Some(&adapters))?;
        let s_head = self.layout.student_head.map(|_, &id| b.bind(g, id));
        let y_time = head_forward(g, student.tokens, &s_head)?;

        let dag = self.layout.dag.map(|_, &id| b.bind(g, id));
        let anchors = b.bind(g, self.layout.anchors);
        let x_text = dag_forward(g, x_time, anchors, &dag, c.backbone.heads, p, c.dag)?;
        let teacher = encoder_forward(g, x_text, &enc, &c.backbone, p, None)?;
        let t_head = self.layout.teacher_head.map(|_, &id| b.bind(g, id));
        let y_text = head_forward(g, teacher.tokens, &t_head)?;

        let target = g.constant(variate_rows(&batch.targets, batch.size, batch.horizon, p));
        let mut task = task_loss(g, y_time, target, c.task)?;
        if c.teacher_task_weight > 0.0 {
            let t = task_loss(g, y_text, target, c.task)?;
            let t = g.scale(t, c.teacher_task_weight);
            task = g.add(task, t)?;
        }
        let (feature, feature_per_layer) =
            feature_loss(g, &student.trace, &teacher.trace, c.gamma, c.tau)?;
        let ot = ot_loss(g, y_time, y_text, p, &c.ot)?.loss;
        let total = combine_losses(g, task, feature, ot, c.alpha, c.beta)?;
        Ok(TrainGraph {
            total,
            task,
            feature,
            feature_per_layer,
            ot,
            y_time,
            y_text,
            student_trace: student.trace,
            teacher_trace: teacher.trace,
        })
    }

    fn breakdown(&self, g: &Graph, t: &TrainGraph) -> Result<LossBreakdown> {
        let v = |x: Var| g.value(x).item();
        let c = &self.cfg;
        let (task, feature, ot) = (v(t.task), v(t.feature), v(t.ot));
        let total = crate::align::total_loss(task, feature, ot, c.alpha, c.beta)?;
        debug_assert_eq!(total.to_bits(), v(t.total).to_bits());
        Ok(LossBreakdown {
            task,
            feature_per_layer: t.feature_per_layer.iter().map(|&x| v(x)).collect(),
            feature,
            ot,
            total,
            alpha: c.alpha,
            beta: c.beta,
            gamma: c.gamma,
            tau: c.tau,
            mu: c.ot.sinkhorn.mu,
        })
    }

    pub fn forward_train(&self, batch: &Batch) -> Result<StepOutput> {
        let mut g = Graph::new();
        let mut b = Binder::new(&self.store);
        let t = self.build_train(&mut g, &mut b, batch)?;
        let breakdown = self.breakdown(&g, &t)?;
        let vals = |xs: &[Var]| xs.iter().map(|&x| g.value(x).clone()).collect::<Vec<_>>();
        Ok(StepOutput {
            breakdown,
            y_time: g.value(t.y_time).clone(),
            y_text: g.value(t.y_text).clone(),
            student_trace: vals(&t.student_trace),
            teacher_trace: vals(&t.teacher_trace),
        })
    }

    pub fn forward_infer(&self, batch: &Batch) -> Result<ForecastBatch> {
        let mut g = Graph::new();
        let mut b = Binder::new(&self.store);
        let y = self.build_infer(&mut g, &mut b, batch)?;
        let mut predictions = backbone::horizon_major(g.value(y), self.cfg.variates);
        self.norm.invert_in_place(&mut predictions);
        let mut targets = batch.targets.clone();
        self.norm.invert_in_place(&mut targets);
        Ok(ForecastBatch {
            size: batch.size,
            horizon: batch.horizon,
            variates: batch.variates,
            predictions,
            targets,
            norm: self.norm.clone(),
        })
    }

    /// Node counts of the training and inference graphs for `batch`.
    pub fn graph_sizes(&self, batch: &Batch) -> Result<(usize, usize)> {
        let mut g = Graph::new();
        self.build_train(&mut g, &mut Binder::new(&self.store), batch)?;
        let mut h = Graph::new();
        self.build_infer(&mut h, &mut Binder::new(&self.store), batch)?;
        Ok((g.len(), h.len()))
    }

    /// Loss breakdown and gradients of every trainable parameter, in
    /// [`ParamStore::trainable`] order.
    pub fn gradients(&self, batch: &Batch) -> Result<(LossBreakdown, Vec<Option<Tensor>>)> {
        let mut g = Graph::new();
        let mut b = Binder::new(&self.store);
        let t = self.build_train(&mut g, &mut b, batch)?;
        let breakdown = self.breakdown(&g, &t)?;
        let mut grads = g.backward(t.total)?;
        let out = self
            .store
            .trainable()
            .into_iter()
            .map(|id| b.var(id).and_then(|v| grads.take(v)))
            .collect();
        Ok((breakdown, out))
    }

    /// Finite-difference check of the total-loss gradient over the trainable set.
    pub fn check_gradients(&self, batch: &Batch, opts: &GradCheckOptions) -> Result<GradCheckReport> {
        let ids = self.store.trainable();
        let params: Vec<Tensor> = ids.iter().map(|&i| self.store.value(i).clone()).collect();
        grad_check(
            |g, vars| {
                let mut b = Binder::new(&self.store);
                for (&id, &v) in ids.iter().zip(vars) {
                    b.preset(id, v);
                }
                Ok::<_, Error>(self.build_train(g, &mut b, batch)?.total)
            },
            &params,
            opts,
        )
    }

    /// Which parameters received a gradient, and whether it was finite.
    pub fn gradient_audit(&self, batch: &Batch) -> Result<Vec<GradientAudit>> {
        let mut g = Graph::new();
        let mut b = Binder::new(&self.store);
        let t = self.build_train(&mut g, &mut b, batch)?;
        let grads = g.backward(t.total)?;
        Ok(self
            .store
            .iter()
            .map(|(id, p)| GradientAudit {
                name: p.name.clone(),
                trainable: p.trainable,
                finite: b.var(id).and_then(|v| grads.get(v)).map(Tensor::is_finite),
            })
            .collect())
    }

    /// One forward/backward pass and an Adam update of the trainable set.
    pub fn train_step(&mut self, batch: &Batch, opt: &mut Adam) -> Result<LossBreakdown> {
        let (breakdown, grads) = self.gradients(batch)?;
        let ids = self.store.trainable();
        if ids != opt.params() {
            return Err(Error::Model("optimizer state does not match the trainable set".into()));
        }
        for (id, g) in ids.iter().zip(&grads) {
            if let Some(g) = g {
                if !g.is_finite() {
                    return Err(Error::NonFiniteGradient(self.store.get(*id).name.clone()));
                }
            }
        }
        opt.update(&mut self.store, &grads);
        Ok(breakdown)
    }

    /// Named tensors for persistence: every parameter plus normalization stats.
    pub fn named_tensors(&self) -> Vec<(String, Tensor)> {
        let mut out: Vec<(String, Tensor)> = self
            .store
            .iter()
            .map(|(_, p)| (p.name.clone(), p.value.clone()))
            .collect();
        let p = self.norm.variates();
        out.push(("norm.mean".into(), Tensor::matrix(1, p, self.norm.mean.clone())));
        out.push(("norm.std".into(), Tensor::matrix(1, p, self.norm.std.clone())));
        out
    }

    /// Restores every parameter and the normalization stats by name.
    pub fn load_named_tensors(&mut self, tensors: &[(String, Tensor)]) -> Result<()> {
        use crate::error::CheckpointError;
        let find = |name: &str| {
            tensors
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, t)| t)
                .ok_or_else(|| CheckpointError::MissingParam(name.to_string()))
        };
        let names: Vec<String> = self.store.iter().map(|(_, p)| p.name.clone()).collect();
        let mut staged = self.store.clone();
        for name in &names {
            staged.assign(name, find(name)?.clone())?;
        }
        let p = self.cfg.variates;
        let mut stats = Vec::with_capacity(2);
        for name in ["norm.mean", "norm.std"] {
            let t = find(name)?;
            if t.shape() != [1, p] {
                return Err(CheckpointError::ParamShape {
                    name: name.into(),
                    expected: vec![1, p],
                    found: t.shape().to_vec(),
                }
                .into());
            }
            stats.push(t.data().to_vec());
        }
        let std = stats.pop().expect("std");
        let mean = stats.pop().expect("mean");
        self.store = staged;
        self.norm = NormStats { mean, std };
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tiny_config() -> ModelConfig {
        ModelConfig {
            backbone: BackboneConfig {
                width: 8,
                layers: 2,
                heads: 2,
                ffn_mult: 2,
                lookback: 6,
            },
            horizon: 3,
            variates: 2,
            lora_rank: 2,
            prompt_len: 2,
            vocab_size: 32,
            ..ModelConfig::default()
        }
    }

    fn batch(cfg: &ModelConfig, size: usize) -> Batch {
        let (l, h, p) = (cfg.backbone.lookback, cfg.horizon, cfg.variates);
        let f = |i: usize| ((i as f64) * 0.37).sin();
        Batch {
            size,
            lookback: l,
            horizon: h,
            variates: p,
            inputs: (0..size * l * p).map(f).collect(),
            targets: (0..size * h * p).map(|i| f(i + 1000)).collect(),
        }
    }

    #[test]
    fn parameters_partition_into_trainable_and_frozen() {
        let m = DistillModel::new(tiny_config(), 1).unwrap();
        let (t, f) = (m.store.trainable(), m.store.frozen());
        assert_eq!(t.len() + f.len(), m.store.len());
        assert!(t.iter().all(|i| !f.contains(i)));
    }

    #[test]
    fn frozen_parameters_get_no_gradient() {
        let cfg = tiny_config();
        let m = DistillModel::new(cfg.clone(), 1).unwrap();
        for a in m.gradient_audit(&batch(&cfg, 3)).unwrap() {
            if a.trainable {
                assert_eq!(a.finite, Some(true), "{}", a.name);
            } else {
                assert_eq!(a.finite, None, "{}", a.name);
            }
        }
    }

    #[test]
    fn inference_graph_is_smaller() {
        let cfg = tiny_config();
        let m = DistillModel::new(cfg.clone(), 1).unwrap();
        let (train, infer) = m.graph_sizes(&batch(&cfg, 2)).unwrap();
        assert!(infer < train);
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let cfg = tiny_config();
        let m = DistillModel::new(cfg.clone(), 1).unwrap();
        let mut b = batch(&cfg, 2);
        b.lookback = 5;
        assert!(m.forward_infer(&b).is_err());
    }
}
