//! Decoder-only causal transformer mapping a context and a query state to
//! action logits.
//!
//! Sequence layout: the query token comes first, followed by one token per
//! context transition. Row `j` of the output therefore conditions on the
//! query and the first `j` transitions only, and a single forward pass
//! yields predictions for every context prefix.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use sad_autodiff::{checkpoint, AutodiffError, Real, Segment, Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::env::{sample_categorical, ActionId, EnvFamily, EnvSpec, StateVec, Transition};
use crate::hash::bytes_hash;
use crate::rng::{domain, RngStream};

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("context of length {len} exceeds the model maximum {max}")]
    ContextTooLong { len: usize, max: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid model configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint manifest: {0}")]
    Manifest(#[from] serde_json::Error),
}

type Result<T, E = ModelError> = std::result::Result<T, E>;

fn default_eps() -> f64 {
    1e-5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_embed: usize,
    pub max_context: usize,
    pub state_dim: usize,
    pub num_actions: usize,
    /// Per-coordinate divisors mapping states into `[0, 1]`.
    pub state_scale: Vec<f64>,
    #[serde(default = "default_eps")]
    pub layer_norm_eps: f64,
}

impl ModelConfig {
    /// Three layers, three heads, 32-dimensional embeddings.
    pub fn standard(spec: &EnvSpec, max_context: usize) -> Self {
        let state_scale = match EnvFamily::from_id(&spec.env_family).ok().and_then(EnvFamily::default_grid) {
            Some(g) => vec![(g.width.max(2) - 1) as f64, (g.height.max(2) - 1) as f64],
            None => vec![1.0; spec.state_dim],
        };
        Self {
            n_layers: 3,
            n_heads: 3,
            d_embed: 32,
            max_context,
            state_dim: spec.state_dim,
            num_actions: spec.num_actions,
            state_scale,
            layer_norm_eps: default_eps(),
        }
    }

    /// Per-head width: `d_embed / n_heads`, rounded down. The concatenated
    /// heads are projected back to `d_embed`.
    pub fn head_dim(&self) -> usize {
        self.d_embed / self.n_heads.max(1)
    }

    pub fn attn_dim(&self) -> usize {
        self.head_dim() * self.n_heads
    }

    /// Width of a transition token before projection: `[s, onehot(a), r, s']`.
    pub fn token_dim(&self) -> usize {
        2 * self.state_dim + self.num_actions + 1
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(ModelError::InvalidConfig(m));
        if self.n_layers == 0 || self.n_heads == 0 || self.d_embed == 0 {
            return bad("layers, heads and embedding size must be positive".into());
        }
        if self.head_dim() == 0 {
            return bad(format!("{} heads do not fit in {} dimensions", self.n_heads, self.d_embed));
        }
        if self.state_dim == 0 || self.num_actions == 0 {
            return bad("state_dim and num_actions must be positive".into());
        }
        if self.state_scale.len() != self.state_dim || self.state_scale.iter().any(|&s| s.is_nan() || s <= 0.0) {
            return bad(format!("state_scale must hold {} positive values", self.state_dim));
        }
        Ok(())
    }

    /// Parameter names and shapes, in a fixed order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let d = self.d_embed;
        let a = self.attn_dim();
        let mut out = vec![
            ("embed.w".to_string(), vec![self.token_dim(), d]),
            ("embed.b".to_string(), vec![d]),
            ("embed.pos".to_string(), vec![self.max_context + 1, d]),
        ];
        for l in 0..self.n_layers {
            let p = |n: &str| format!("layer{l}.{n}");
            out.extend([
                (p("ln1.g"), vec![d]),
                (p("ln1.b"), vec![d]),
                (p("attn.qkv.w"), vec![d, 3 * a]),
                (p("attn.qkv.b"), vec![3 * a]),
                (p("attn.proj.w"), vec![a, d]),
                (p("attn.proj.b"), vec![d]),
                (p("ln2.g"), vec![d]),
                (p("ln2.b"), vec![d]),
                (p("mlp.fc.w"), vec![d, 4 * d]),
                (p("mlp.fc.b"), vec![4 * d]),
                (p("mlp.out.w"), vec![4 * d, d]),
                (p("mlp.out.b"), vec![d]),
            ]);
        }
        out.extend([
            ("lnf.g".to_string(), vec![d]),
            ("lnf.b".to_string(), vec![d]),
            ("head.w".to_string(), vec![d, self.num_actions]),
            ("head.b".to_string(), vec![self.num_actions]),
        ]);
        out
    }

    /// Token rows for one sequence: the query padded with zeros, then the
    /// transitions. States are divided by `state_scale`; rewards enter raw.
    pub fn tokenize(&self, context: &[Transition], query: &StateVec) -> Vec<f64> {
        let w = self.token_dim();
        let sd = self.state_dim;
        let mut out = vec![0.0; (context.len() + 1) * w];
        for (k, v) in query.0.iter().enumerate().take(sd) {
            out[k] = v / self.state_scale[k];
        }
        for (i, t) in context.iter().enumerate() {
            let row = &mut out[(i + 1) * w..(i + 2) * w];
            for k in 0..sd {
                row[k] = t.state.0[k] / self.state_scale[k];
                row[sd + self.num_actions + 1 + k] = t.next_state.0[k] / self.state_scale[k];
            }
            row[sd + t.action.0] = 1.0;
            row[sd + self.num_actions] = t.reward;
        }
        out
    }
}

/// Parameter gradients keyed by tensor name.
pub type Grads<T> = BTreeMap<String, Tensor<T>>;

/// Decision rule applied to the last row of logits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PredictMode {
    Greedy,
    Sample,
}

/// One sequence of a packed batch.
#[derive(Debug, Clone, Copy)]
pub struct Sequence<'a> {
    pub context: &'a [Transition],
    pub query: &'a StateVec,
}

/// Model weights as a named tensor table.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T> {
    pub config: ModelConfig,
    pub tensors: BTreeMap<String, Tensor<T>>,
}

struct Graph {
    logits: Var,
    params: Vec<(String, Var)>,
    segments: Vec<Segment>,
}

impl<T: Real> ModelParams<T> {
    /// Weights ~ N(0, 0.02²), residual output projections scaled by
    /// `1/sqrt(2 * n_layers)`, biases and the action head zero, layer-norm
    /// gains one.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = RngStream::in_domain(seed, domain::INIT, 0);
        let normal = Normal::new(0.0, 0.02).expect("valid normal");
        let resid = 1.0 / ((2 * config.n_layers) as f64).sqrt();
        let mut tensors = BTreeMap::new();
        for (name, shape) in config.param_shapes() {
            let n: usize = shape.iter().product();
            let data: Vec<T> = if name.ends_with(".g") {
                vec![T::one(); n]
            } else if name.ends_with(".b") || name.starts_with("head.") {
                vec![T::zero(); n]
            } else {
                let s = if name.ends_with("proj.w") || name.ends_with("mlp.out.w") { resid } else { 1.0 };
                (0..n).map(|_| T::from_f64(s * normal.sample(&mut rng))).collect()
            };
            tensors.insert(name, Tensor::new(shape, data)?);
        }
        Ok(Self { config: config.clone(), tensors })
    }

    pub fn get(&self, name: &str) -> &Tensor<T> {
        &self.tensors[name]
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    pub fn cast<U: Real>(&self) -> ModelParams<U> {
        ModelParams {
            config: self.config.clone(),
            tensors: self.tensors.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.values().all(Tensor::is_finite)
    }

    /// SHA-256 of the encoded tensor table.
    pub fn checksum(&self) -> String {
        bytes_hash(&checkpoint::encode(&self.tensors))
    }

    fn check_shapes(&self) -> Result<()> {
        for (name, shape) in self.config.param_shapes() {
            match self.tensors.get(&name) {
                Some(t) if t.shape() == shape.as_slice() => {}
                Some(t) => return Err(ModelError::ShapeMismatch(format!("{name}: {:?} vs {shape:?}", t.shape()))),
                None => return Err(ModelError::ShapeMismatch(format!("missing tensor {name}"))),
            }
        }
        Ok(())
    }

    fn graph(&self, tape: &mut Tape<T>, seqs: &[Sequence<'_>]) -> Result<Graph> {
        let cfg = &self.config;
        let mut rows = Vec::new();
        let mut positions = Vec::new();
        let mut segments = Vec::with_capacity(seqs.len());
        for s in seqs {
            if s.context.len() > cfg.max_context {
                return Err(ModelError::ContextTooLong { len: s.context.len(), max: cfg.max_context });
            }
            if s.query.0.len() != cfg.state_dim {
                return Err(ModelError::ShapeMismatch(format!("query of dim {} for state_dim {}", s.query.0.len(), cfg.state_dim)));
            }
            segments.push(Segment { start: positions.len(), len: s.context.len() + 1 });
            rows.extend(cfg.tokenize(s.context, s.query).into_iter().map(T::from_f64));
            positions.extend(0..=s.context.len());
        }
        let mut params = Vec::with_capacity(self.tensors.len());
        let mut var = BTreeMap::new();
        for (name, t) in &self.tensors {
            let v = tape.leaf(t.clone());
            params.push((name.clone(), v));
            var.insert(name.as_str(), v);
        }
        let p = |n: &str| var[n];
        let eps = T::from_f64(cfg.layer_norm_eps);
        let x = tape.leaf(Tensor::new(vec![positions.len(), cfg.token_dim()], rows)?);
        let x = tape.matmul(x, p("embed.w"))?;
        let x = tape.add_row(x, p("embed.b"))?;
        let pos = tape.gather_rows(p("embed.pos"), &positions)?;
        let mut h = tape.add(x, pos)?;
        for l in 0..cfg.n_layers {
            let q = |n: &str| var[format!("layer{l}.{n}").as_str()];
            let a = tape.layer_norm(h, q("ln1.g"), q("ln1.b"), eps)?;
            let qkv = tape.matmul(a, q("attn.qkv.w"))?;
            let qkv = tape.add_row(qkv, q("attn.qkv.b"))?;
            let att = tape.causal_attention(qkv, &segments, cfg.n_heads, cfg.head_dim())?;
            let o = tape.matmul(att, q("attn.proj.w"))?;
            let o = tape.add_row(o, q("attn.proj.b"))?;
            h = tape.add(h, o)?;
            let m = tape.layer_norm(h, q("ln2.g"), q("ln2.b"), eps)?;
            let f = tape.matmul(m, q("mlp.fc.w"))?;
            let f = tape.add_row(f, q("mlp.fc.b"))?;
            let f = tape.gelu(f);
            let f = tape.matmul(f, q("mlp.out.w"))?;
            let f = tape.add_row(f, q("mlp.out.b"))?;
            h = tape.add(h, f)?;
        }
        let h = tape.layer_norm(h, p("lnf.g"), p("lnf.b"), eps)?;
        let logits = tape.matmul(h, p("head.w"))?;
        let logits = tape.add_row(logits, p("head.b"))?;
        Ok(Graph { logits, params, segments })
    }

    /// Logits for every sequence: `[context_len + 1, num_actions]` each.
    pub fn forward_batch(&self, seqs: &[Sequence<'_>]) -> Result<Vec<Tensor<T>>> {
        if seqs.is_empty() {
            return Ok(Vec::new());
        }
        self.check_shapes()?;
        let mut tape = Tape::new();
        let g = self.graph(&mut tape, seqs)?;
        let all = tape.value(g.logits);
        let a = self.config.num_actions;
        g.segments
            .iter()
            .map(|s| Ok(Tensor::new(vec![s.len, a], all.data()[s.start * a..(s.start + s.len) * a].to_vec())?))
            .collect()
    }

    /// Logits of shape `[context.len() + 1, num_actions]`; row `j` sees the
    /// query and the first `j` transitions.
    pub fn forward(&self, context: &[Transition], query: &StateVec) -> Result<Tensor<T>> {
        Ok(self.forward_batch(&[Sequence { context, query }])?.remove(0))
    }

    /// Batch loss (mean over items of `weight * mean_j NLL_j`) and its gradient
    /// for every parameter.
    pub fn loss_and_grad(&self, items: &[LabeledSequence<'_>]) -> Result<(f64, Grads<T>)> {
        let (loss, grads) = self.loss_graph(items, true)?;
        Ok((loss, grads.expect("gradients requested")))
    }

    /// Batch loss without gradients.
    pub fn batch_loss(&self, items: &[LabeledSequence<'_>]) -> Result<f64> {
        Ok(self.loss_graph(items, false)?.0)
    }

    fn loss_graph(&self, items: &[LabeledSequence<'_>], grad: bool) -> Result<(f64, Option<Grads<T>>)> {
        if items.is_empty() {
            return Err(ModelError::ShapeMismatch("empty batch".into()));
        }
        self.check_shapes()?;
        let seqs: Vec<Sequence<'_>> = items.iter().map(|i| i.seq).collect();
        let mut tape = Tape::new();
        let g = self.graph(&mut tape, &seqs)?;
        let mut labels = Vec::new();
        let mut weights = Vec::new();
        let b = items.len() as f64;
        for (item, seg) in items.iter().zip(&g.segments) {
            if item.label.0 >= self.config.num_actions {
                return Err(ModelError::ShapeMismatch(format!("label {} of {} actions", item.label.0, self.config.num_actions)));
            }
            labels.extend(std::iter::repeat_n(item.label.0, seg.len));
            weights.extend(std::iter::repeat_n(T::from_f64(item.weight / seg.len as f64 / b), seg.len));
        }
        let loss = tape.cross_entropy(g.logits, &labels, &weights)?;
        let value = tape.value(loss).data()[0].as_f64();
        if !grad {
            return Ok((value, None));
        }
        let mut grads = tape.backward(loss)?;
        let out = g
            .params
            .into_iter()
            .map(|(name, v)| {
                let t = grads.take(v).unwrap_or_else(|| Tensor::zeros(self.tensors[&name].shape()));
                (name, t)
            })
            .collect();
        Ok((value, Some(out)))
    }

    /// Action from the last logits row.
    pub fn predict<R: Rng + ?Sized>(
        &self,
        context: &[Transition],
        query: &StateVec,
        mode: PredictMode,
        rng: &mut R,
    ) -> Result<ActionId> {
        let logits = self.forward(context, query)?;
        let last: Vec<f64> = logits.row(logits.rows() - 1).iter().map(|v| v.as_f64()).collect();
        Ok(choose(&last, mode, rng))
    }

    /// Writes `model.bin` (tensor table) and `manifest.json` into `dir`.
    pub fn save(&self, dir: &Path, metadata: serde_json::Value) -> Result<()> {
        fs::create_dir_all(dir)?;
        let bytes = checkpoint::encode(&self.tensors);
        let manifest = Manifest {
            model: self.config.clone(),
            element_width: T::WIDTH,
            checksum: bytes_hash(&bytes),
            metadata,
        };
        fs::write(dir.join("model.bin"), bytes)?;
        fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)? + "\n")?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<(Self, Manifest)> {
        let manifest: Manifest = serde_json::from_str(&fs::read_to_string(dir.join("manifest.json"))?)?;
        let bytes = fs::read(dir.join("model.bin"))?;
        if bytes_hash(&bytes) != manifest.checksum {
            return Err(AutodiffError::Corrupt("tensor table does not match the manifest checksum".into()).into());
        }
        let params = Self { config: manifest.model.clone(), tensors: checkpoint::decode(&bytes)? };
        params.check_shapes()?;
        Ok((params, manifest))
    }
}

/// A sequence with its supervised target.
#[derive(Debug, Clone, Copy)]
pub struct LabeledSequence<'a> {
    pub seq: Sequence<'a>,
    pub label: ActionId,
    pub weight: f64,
}

impl<'a> From<&'a crate::datagen::PretrainSample> for LabeledSequence<'a> {
    fn from(s: &'a crate::datagen::PretrainSample) -> Self {
        Self {
            seq: Sequence { context: &s.context.transitions, query: &s.query_state },
            label: s.action_label,
            weight: s.weight,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub model: ModelConfig,
    pub element_width: u8,
    pub checksum: String,
    #[serde(default)]
    pub metadata: serde_json::Value,
}

/// `weight * mean_j (-log softmax(logits_j)[label])` for one sequence.
pub fn sequence_loss<T: Real>(logits: &Tensor<T>, label: ActionId, weight: f64) -> f64 {
    let n = logits.cols();
    let total: f64 = logits
        .data()
        .chunks(n)
        .map(|row| {
            let row: Vec<f64> = row.iter().map(|v| v.as_f64()).collect();
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            lse - row[label.0]
        })
        .sum();
    weight * total / logits.rows() as f64
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = e.iter().sum();
    e.into_iter().map(|v| v / total).collect()
}

/// First index of the maximum.
pub fn argmax(logits: &[f64]) -> ActionId {
    let mut best = 0;
    for (i, &v) in logits.iter().enumerate() {
        if v > logits[best] {
            best = i;
        }
    }
    ActionId(best)
}

/// Greedy: [`argmax`]. Sample: a draw from the softmax.
pub fn choose<R: Rng + ?Sized>(logits: &[f64], mode: PredictMode, rng: &mut R) -> ActionId {
    match mode {
        PredictMode::Greedy => argmax(logits),
        PredictMode::Sample => ActionId(sample_categorical(&softmax(logits), rng)),
    }
}

/// Largest relative error between analytic gradients and central finite
/// differences of the batch loss, over `probes` parameter coordinates drawn
/// uniformly from the whole table.
pub fn gradient_check(
    params: &ModelParams<f64>,
    items: &[LabeledSequence<'_>],
    probes: usize,
    eps: f64,
    seed: u64,
) -> Result<f64> {
    let (_, grads) = params.loss_and_grad(items)?;
    let names: Vec<&String> = params.tensors.keys().collect();
    let sizes: Vec<usize> = names.iter().map(|n| params.tensors[*n].len()).collect();
    let total: usize = sizes.iter().sum();
    let mut rng = RngStream::in_domain(seed, domain::ORACLE, 0);
    let mut worst: f64 = 0.0;
    for _ in 0..probes {
        let mut k = rng.random_range(0..total);
        let mut t = 0;
        while k >= sizes[t] {
            k -= sizes[t];
            t += 1;
        }
        let name = names[t];
        let analytic = grads[name].data()[k];
        let mut probe = params.clone();
        let mut coords = params.tensors[name].data().to_vec();
        let numeric = sad_autodiff::gradcheck::central_difference(&mut coords, k, eps, |x| {
            probe.tensors.get_mut(name).expect("known tensor").data_mut().copy_from_slice(x);
            probe.batch_loss(items).expect("valid batch")
        });
        worst = worst.max(sad_autodiff::gradcheck::relative_error(analytic, numeric, 1e-6));
    }
    Ok(worst)
}
