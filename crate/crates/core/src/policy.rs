//! Transformer policy: frozen perception/instruction encoders, a trainable
//! state encoder, FiLM instruction fusion, a causal temporal decoder, and a
//! Gaussian-mixture action head.
//!
//! Observations arrive as a short history; perception and state tokens are
//! interleaved per timestep, position-embedded, optionally prefixed with
//! virtual tokens from an adapter bundle, and decoded causally. The head
//! reads the final token and emits mixture logits, means, and stds with
//! `sigma = min_std + softplus(raw)`.
//!
//! All forward passes run through [`ForwardCtx`], which resolves parameters
//! by name — bundle copies shadow base parameters, and adapter weights hook
//! in wherever the bundle carries a matching `#`-suffixed entry.

use std::collections::{BTreeSet, HashMap};

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adapters::{self, AdapterBundle, AdapterError};
use crate::checkpoint::{Group, ParamStore};
use crate::rng::{rng_from, DropoutStream};
use crate::tensor::{NodeId, Tape, Tensor, TensorError};

pub const LAYER_NORM_EPS: f64 = 1e-5;
const NEG_INF_FILL: f64 = -1e30;
const LOG_2PI: f64 = 1.8378770664093453;

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Adapter(#[from] AdapterError),
    #[error("invalid policy spec: {0}")]
    Spec(String),
    #[error("invalid input: {0}")]
    Input(String),
    #[error("missing parameter {0}")]
    MissingParam(String),
    #[error("non-finite values in {0}")]
    NonFinite(String),
}

type Result<T> = std::result::Result<T, PolicyError>;

/// Architecture hyperparameters. Two stock profiles exist: `desk` (the
/// default experiment scale) and `paper` (parameter-accounting scale).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicySpec {
    pub embed_dim: usize,
    pub decoder_layers: usize,
    pub decoder_heads: usize,
    pub mlp_ratio: usize,
    pub perception_layers: usize,
    pub percep_dim: usize,
    pub state_dim: usize,
    pub action_dim: usize,
    /// History length in timesteps; the decoder sees two tokens per step.
    pub max_seq_len: usize,
    pub gmm_modes: usize,
    pub gmm_min_std: f64,
    pub dropout: f64,
    pub film_layers: usize,
    /// Hidden width of the FiLM generator MLP.
    pub fusion_hidden: usize,
    /// Rank of the permanent low-rank pairs baked into the perception
    /// encoder during pretraining; 0 disables them.
    pub pretrain_adapter_rank: usize,
}

impl PolicySpec {
    pub fn desk() -> Self {
        PolicySpec {
            embed_dim: 64,
            decoder_layers: 2,
            decoder_heads: 4,
            mlp_ratio: 4,
            perception_layers: 2,
            percep_dim: 16,
            state_dim: 3,
            action_dim: 3,
            max_seq_len: 4,
            // desk scale keeps a single mixture component with a wide
            // noise floor: at 64 dims the 5-mode head latches onto the
            // marginal action clusters and never learns to condition
            gmm_modes: 1,
            gmm_min_std: 0.05,
            dropout: 0.1,
            film_layers: 2,
            fusion_hidden: 16,
            pretrain_adapter_rank: 8,
        }
    }

    /// Paper-scale shapes (d=768 class, 12-layer perception encoder,
    /// 6-layer decoder). Used for parameter accounting, not training.
    pub fn paper() -> Self {
        PolicySpec {
            embed_dim: 768,
            decoder_layers: 6,
            decoder_heads: 8,
            mlp_ratio: 4,
            perception_layers: 12,
            percep_dim: 768,
            state_dim: 9,
            action_dim: 7,
            max_seq_len: 10,
            gmm_modes: 5,
            gmm_min_std: 1e-4,
            dropout: 0.15,
            film_layers: 2,
            fusion_hidden: 192,
            pretrain_adapter_rank: 8,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.embed_dim % self.decoder_heads != 0 {
            return Err(PolicyError::Spec(format!(
                "embed_dim {} must be a positive multiple of decoder_heads {}",
                self.embed_dim, self.decoder_heads
            )));
        }
        for (name, v) in [
            ("decoder_layers", self.decoder_layers),
            ("decoder_heads", self.decoder_heads),
            ("mlp_ratio", self.mlp_ratio),
            ("perception_layers", self.perception_layers),
            ("percep_dim", self.percep_dim),
            ("state_dim", self.state_dim),
            ("action_dim", self.action_dim),
            ("max_seq_len", self.max_seq_len),
            ("gmm_modes", self.gmm_modes),
            ("film_layers", self.film_layers),
            ("fusion_hidden", self.fusion_hidden),
        ] {
            if v == 0 {
                return Err(PolicyError::Spec(format!("{name} must be >= 1")));
            }
        }
        if !(self.gmm_min_std > 0.0) {
            return Err(PolicyError::Spec("gmm_min_std must be > 0".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(PolicyError::Spec("dropout must be in [0, 1)".into()));
        }
        Ok(())
    }

    pub fn head_width(&self) -> usize {
        self.gmm_modes * (1 + 2 * self.action_dim)
    }
}

/// One timestep of input: perception features and proprioceptive state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub perception: Vec<f64>,
    pub state: Vec<f64>,
}

// ── weights ──────────────────────────────────────────────────────────

/// The base model: a parameter store plus the set of groups frozen by
/// construction (the "pretrained" perception and instruction encoders).
#[derive(Debug, Clone)]
pub struct PolicyWeights {
    pub spec: PolicySpec,
    pub store: ParamStore,
    pub frozen_groups: BTreeSet<Group>,
}

impl PolicyWeights {
    /// Builds a fresh model. The perception/instruction encoders get
    /// variance-preserving init (they stay frozen and must transport
    /// information through depth); trainable parts use N(0, 0.02^2),
    /// biases and layer-norm offsets zero, gains one. The final FiLM
    /// generator layer is zero so fusion starts as identity.
    pub fn init(spec: &PolicySpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let d = spec.embed_dim;
        let mut store = ParamStore::new();

        let randn = |name: &str, shape: &[usize], std: f64| -> Tensor {
            let mut rng = rng_from(seed, name, &[]);
            let dist = Normal::new(0.0, std).unwrap();
            let n: usize = shape.iter().product();
            Tensor::new(shape.to_vec(), (0..n).map(|_| dist.sample(&mut rng)).collect())
        };
        // variance-preserving scale for the frozen stacks
        let he = |fan_in: usize| 1.0 / (fan_in as f64).sqrt();

        let lin = |store: &mut ParamStore,
                       group: Group,
                       w: String,
                       b: Option<String>,
                       din: usize,
                       dout: usize,
                       std: f64| {
            store.insert(w.clone(), group, randn(&w, &[din, dout], std));
            if let Some(b) = b {
                store.insert(b, group, Tensor::zeros(&[dout]));
            }
        };

        // perception encoder: input projection + blocks of a d×d mixing
        // matrix and a widening MLP
        let pg = Group::PerceptionEncoder;
        lin(
            &mut store,
            pg,
            "perception.proj.w".into(),
            Some("perception.proj.b".into()),
            spec.percep_dim,
            d,
            he(spec.percep_dim),
        );
        for i in 0..spec.perception_layers {
            lin(
                &mut store,
                pg,
                format!("perception.l{i}.wa"),
                Some(format!("perception.l{i}.ba")),
                d,
                d,
                he(d),
            );
            lin(
                &mut store,
                pg,
                format!("perception.l{i}.w1"),
                Some(format!("perception.l{i}.b1")),
                d,
                d * spec.mlp_ratio,
                he(d),
            );
            lin(
                &mut store,
                pg,
                format!("perception.l{i}.w2"),
                Some(format!("perception.l{i}.b2")),
                d * spec.mlp_ratio,
                d,
                he(d * spec.mlp_ratio),
            );
            if spec.pretrain_adapter_rank > 0 {
                // permanent low-rank pair learned during pretraining
                let r = spec.pretrain_adapter_rank;
                let a = format!("perception.l{i}.wa#pt_a");
                store.insert(a.clone(), Group::Adapter, randn(&a, &[d, r], 0.02));
                store.insert(
                    format!("perception.l{i}.wa#pt_b"),
                    Group::Adapter,
                    Tensor::zeros(&[r, d]),
                );
            }
        }

        lin(
            &mut store,
            Group::InstructionEncoder,
            "instruction.proj.w".into(),
            None,
            d,
            d,
            he(d),
        );

        let sg = Group::StateEncoder;
        lin(
            &mut store,
            sg,
            "state.l0.w".into(),
            Some("state.l0.b".into()),
            spec.state_dim,
            d,
            0.02,
        );
        lin(
            &mut store,
            sg,
            "state.l1.w".into(),
            Some("state.l1.b".into()),
            d,
            d,
            0.02,
        );

        // FiLM generator: d -> fusion_hidden -> ... -> 2d, last layer zero
        let widths = film_widths(spec);
        for (i, win) in widths.windows(2).enumerate() {
            let last = i + 1 == widths.len() - 1;
            let w = format!("fusion.l{i}.w");
            let std = if last { 0.0 } else { 0.02 };
            store.insert(
                w.clone(),
                Group::Fusion,
                if last {
                    Tensor::zeros(&[win[0], win[1]])
                } else {
                    randn(&w, &[win[0], win[1]], std)
                },
            );
            store.insert(format!("fusion.l{i}.b"), Group::Fusion, Tensor::zeros(&[win[1]]));
        }

        let dg = Group::Decoder;
        store.insert(
            "decoder.pos".to_string(),
            dg,
            randn("decoder.pos", &[2 * spec.max_seq_len, d], 0.02),
        );
        for i in 0..spec.decoder_layers {
            for ln in ["ln1", "ln2"] {
                store.insert(
                    format!("decoder.l{i}.{ln}.g"),
                    dg,
                    Tensor::new(vec![d], vec![1.0; d]),
                );
                store.insert(format!("decoder.l{i}.{ln}.b"), dg, Tensor::zeros(&[d]));
            }
            for w in ["wq", "wk", "wv", "wo"] {
                lin(
                    &mut store,
                    dg,
                    format!("decoder.l{i}.attn.{w}"),
                    Some(format!("decoder.l{i}.attn.{}", w.replace('w', "b"))),
                    d,
                    d,
                    0.02,
                );
            }
            lin(
                &mut store,
                dg,
                format!("decoder.l{i}.mlp.w1"),
                Some(format!("decoder.l{i}.mlp.b1")),
                d,
                d * spec.mlp_ratio,
                0.02,
            );
            lin(
                &mut store,
                dg,
                format!("decoder.l{i}.mlp.w2"),
                Some(format!("decoder.l{i}.mlp.b2")),
                d * spec.mlp_ratio,
                d,
                0.02,
            );
        }
        store.insert("decoder.lnf.g".to_string(), dg, Tensor::new(vec![d], vec![1.0; d]));
        store.insert("decoder.lnf.b".to_string(), dg, Tensor::zeros(&[d]));

        lin(
            &mut store,
            Group::PolicyHead,
            "head.w".into(),
            Some("head.b".into()),
            d,
            spec.head_width(),
            0.02,
        );

        Ok(PolicyWeights {
            spec: spec.clone(),
            store,
            frozen_groups: [Group::PerceptionEncoder, Group::InstructionEncoder]
                .into_iter()
                .collect(),
        })
    }

    pub fn digest(&self) -> String {
        self.store.digest()
    }

    pub fn frozen_digest(&self) -> String {
        self.store.digest_groups(&self.frozen_groups)
    }
}

fn film_widths(spec: &PolicySpec) -> Vec<usize> {
    let d = spec.embed_dim;
    let mut w = vec![d];
    for _ in 0..spec.film_layers.saturating_sub(1) {
        w.push(spec.fusion_hidden);
    }
    w.push(2 * d);
    w
}

// ── forward context ──────────────────────────────────────────────────

/// Binds a tape to a parameter source. Bundle parameters shadow base
/// parameters of the same name (fusion/head copies); `#`-suffixed adapter
/// entries hook in by presence. `trainable` marks which names become
/// differentiable leaves; everything else enters the tape detached.
pub struct ForwardCtx<'a> {
    pub tape: &'a mut Tape,
    pub spec: &'a PolicySpec,
    base: &'a ParamStore,
    bundle: Option<&'a AdapterBundle>,
    trainable: Option<&'a BTreeSet<String>>,
    leaves: HashMap<String, NodeId>,
    dropout: DropoutStream,
}

impl<'a> ForwardCtx<'a> {
    pub fn new(
        tape: &'a mut Tape,
        spec: &'a PolicySpec,
        base: &'a ParamStore,
        bundle: Option<&'a AdapterBundle>,
        trainable: Option<&'a BTreeSet<String>>,
        dropout: DropoutStream,
    ) -> Self {
        ForwardCtx {
            tape,
            spec,
            base,
            bundle,
            trainable,
            leaves: HashMap::new(),
            dropout,
        }
    }

    /// Evaluation-mode context: no gradients, no dropout.
    pub fn eval(
        tape: &'a mut Tape,
        weights: &'a PolicyWeights,
        bundle: Option<&'a AdapterBundle>,
    ) -> Self {
        ForwardCtx::new(
            tape,
            &weights.spec,
            &weights.store,
            bundle,
            None,
            DropoutStream::disabled(),
        )
    }

    /// Binds a name to an existing tape node, overriding store lookup.
    /// Used by gradient checks to route a probe leaf into the model.
    pub fn bind(&mut self, name: &str, node: NodeId) {
        self.leaves.insert(name.to_string(), node);
    }

    /// Tape node a parameter was materialized as, if it was touched.
    pub fn leaf_id(&self, name: &str) -> Option<NodeId> {
        self.leaves.get(name).copied()
    }

    pub fn param(&mut self, name: &str) -> Result<NodeId> {
        self.maybe(name)
            .ok_or_else(|| PolicyError::MissingParam(name.to_string()))
    }

    pub fn maybe(&mut self, name: &str) -> Option<NodeId> {
        if let Some(&id) = self.leaves.get(name) {
            return Some(id);
        }
        let param = self
            .bundle
            .and_then(|b| b.params.get(name))
            .or_else(|| self.base.get(name))?;
        let rg = self.trainable.map(|t| t.contains(name)).unwrap_or(false);
        let id = self.tape.leaf_shared(param.value.clone(), rg);
        self.leaves.insert(name.to_string(), id);
        Some(id)
    }

    fn drop_site(&mut self, x: NodeId) -> Result<NodeId> {
        let p = self.spec.dropout;
        if p <= 0.0 || self.dropout.is_disabled() {
            return Ok(x);
        }
        let n = self.tape.value(x).numel();
        let mask = self.dropout.next_mask(n, p);
        Ok(self.tape.dropout(x, p, mask)?)
    }

    /// `x·W + b`, plus the permanent pretrain low-rank pair (`#pt_a/b`,
    /// unit scale) and the bundle's low-rank pair (`#lora_a/b`, scaled by
    /// alpha) when present.
    fn linear_adapted(&mut self, x: NodeId, w: &str, b: Option<&str>) -> Result<NodeId> {
        let wid = self.param(w)?;
        let mut y = self.tape.matmul(x, wid)?;
        let pt = (self.maybe(&format!("{w}#pt_a")), self.maybe(&format!("{w}#pt_b")));
        if let (Some(a), Some(up)) = pt {
            let delta = adapters::lora_delta(self.tape, x, a, up, 1.0)?;
            y = self.tape.add(y, delta)?;
        }
        let lo = (self.maybe(&format!("{w}#lora_a")), self.maybe(&format!("{w}#lora_b")));
        if let (Some(a), Some(up)) = lo {
            let alpha = self.bundle.map(|b| b.spec.lora_alpha).unwrap_or(1.0);
            let delta = adapters::lora_delta(self.tape, x, a, up, alpha)?;
            y = self.tape.add(y, delta)?;
        }
        if let Some(b) = b {
            let bid = self.param(b)?;
            y = self.tape.add(y, bid)?;
        }
        Ok(y)
    }

    /// Residual bottleneck hooks at a named sublayer-output site.
    fn adapter_site(&mut self, y: NodeId, site: &str) -> Result<NodeId> {
        let mut y = y;
        for role in ["#btl", "#robo"] {
            let pair = (
                self.maybe(&format!("{site}{role}_a")),
                self.maybe(&format!("{site}{role}_b")),
            );
            if let (Some(a), Some(b)) = pair {
                y = adapters::bottleneck_forward(self.tape, y, a, b, Tape::gelu)?;
            }
        }
        Ok(y)
    }

    fn layer_norm_affine(&mut self, x: NodeId, g: &str, b: &str) -> Result<NodeId> {
        let n = self.tape.layer_norm(x, LAYER_NORM_EPS)?;
        let gid = self.param(g)?;
        let bid = self.param(b)?;
        let scaled = self.tape.mul(n, gid)?;
        Ok(self.tape.add(scaled, bid)?)
    }
}

// ── forward pieces ───────────────────────────────────────────────────

pub fn perception_encode(ctx: &mut ForwardCtx, p: NodeId) -> Result<NodeId> {
    let mut x = ctx.linear_adapted(p, "perception.proj.w", Some("perception.proj.b"))?;
    for i in 0..ctx.spec.perception_layers {
        // residual blocks: the identity path keeps the projected scene
        // features linearly recoverable downstream
        let a = ctx.linear_adapted(
            x,
            &format!("perception.l{i}.wa"),
            Some(&format!("perception.l{i}.ba")),
        )?;
        let a = ctx.tape.gelu(a)?;
        let a = ctx.adapter_site(a, &format!("perception.l{i}.attn_out"))?;
        x = ctx.tape.add(x, a)?;
        let h1 = ctx.linear_adapted(
            x,
            &format!("perception.l{i}.w1"),
            Some(&format!("perception.l{i}.b1")),
        )?;
        let h1 = ctx.tape.gelu(h1)?;
        let m = ctx.linear_adapted(
            h1,
            &format!("perception.l{i}.w2"),
            Some(&format!("perception.l{i}.b2")),
        )?;
        let m = ctx.adapter_site(m, &format!("perception.l{i}.mlp_out"))?;
        x = ctx.tape.add(x, m)?;
    }
    Ok(x)
}

pub fn state_encode(ctx: &mut ForwardCtx, s: NodeId) -> Result<NodeId> {
    let h = ctx.linear_adapted(s, "state.l0.w", Some("state.l0.b"))?;
    let h = ctx.tape.gelu(h)?;
    ctx.linear_adapted(h, "state.l1.w", Some("state.l1.b"))
}

/// Feature-wise modulation `x' = (1 + gamma) ⊙ x + beta` with
/// `(gamma, beta) = g(z)` from the fusion MLP. At init the generator's
/// last layer is zero, so this is the identity.
pub fn film_modulate(ctx: &mut ForwardCtx, x: NodeId, z: NodeId) -> Result<NodeId> {
    let d = ctx.spec.embed_dim;
    let mut h = z;
    let layers = film_widths(ctx.spec).len() - 1;
    for i in 0..layers {
        h = ctx.linear_adapted(h, &format!("fusion.l{i}.w"), Some(&format!("fusion.l{i}.b")))?;
        if i + 1 < layers {
            h = ctx.tape.gelu(h)?;
        }
    }
    let gamma2 = ctx.tape.slice(h, 1, 0, d)?;
    let beta2 = ctx.tape.slice(h, 1, d, d)?;
    let gamma = ctx.tape.reshape(gamma2, vec![d])?;
    let beta = ctx.tape.reshape(beta2, vec![d])?;
    let gx = ctx.tape.mul(x, gamma)?;
    let xg = ctx.tape.add(x, gx)?;
    Ok(ctx.tape.add(xg, beta)?)
}

fn causal_mask(n: usize) -> std::sync::Arc<Vec<bool>> {
    let mut m = vec![false; n * n];
    for i in 0..n {
        for j in (i + 1)..n {
            m[i * n + j] = true;
        }
    }
    std::sync::Arc::new(m)
}

/// Multi-head causal self-attention over `a` `[n, d]`; low-rank pairs on
/// query/value hook in via `linear_adapted`.
pub fn attention(ctx: &mut ForwardCtx, a: NodeId, layer: usize, n: usize) -> Result<NodeId> {
    let d = ctx.spec.embed_dim;
    let heads = ctx.spec.decoder_heads;
    let dh = d / heads;
    let p = format!("decoder.l{layer}.attn");
    let q = ctx.linear_adapted(a, &format!("{p}.wq"), Some(&format!("{p}.bq")))?;
    let k = ctx.linear_adapted(a, &format!("{p}.wk"), Some(&format!("{p}.bk")))?;
    let v = ctx.linear_adapted(a, &format!("{p}.wv"), Some(&format!("{p}.bv")))?;
    let mask = causal_mask(n);
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = ctx.tape.slice(q, 1, h * dh, dh)?;
        let kh = ctx.tape.slice(k, 1, h * dh, dh)?;
        let vh = ctx.tape.slice(v, 1, h * dh, dh)?;
        let kt = ctx.tape.transpose(kh)?;
        let s = ctx.tape.matmul(qh, kt)?;
        let s = ctx.tape.scale(s, 1.0 / (dh as f64).sqrt())?;
        let s = ctx.tape.masked_fill(s, mask.clone(), NEG_INF_FILL)?;
        let probs = ctx.tape.softmax(s, 1)?;
        outs.push(ctx.tape.matmul(probs, vh)?);
    }
    let cat = ctx.tape.concat(1, &outs)?;
    let o = ctx.linear_adapted(cat, &format!("{p}.wo"), Some(&format!("{p}.bo")))?;
    let o = ctx.adapter_site(o, &format!("decoder.l{layer}.attn_out"))?;
    ctx.drop_site(o)
}

/// Pre-norm transformer block: `x + attn(ln1(x))`, then `x + mlp(ln2(x))`.
pub fn decoder_block(ctx: &mut ForwardCtx, x: NodeId, layer: usize, n: usize) -> Result<NodeId> {
    let a = ctx.layer_norm_affine(
        x,
        &format!("decoder.l{layer}.ln1.g"),
        &format!("decoder.l{layer}.ln1.b"),
    )?;
    let attn = attention(ctx, a, layer, n)?;
    let x = ctx.tape.add(x, attn)?;

    let h = ctx.layer_norm_affine(
        x,
        &format!("decoder.l{layer}.ln2.g"),
        &format!("decoder.l{layer}.ln2.b"),
    )?;
    let h1 = ctx.linear_adapted(
        h,
        &format!("decoder.l{layer}.mlp.w1"),
        Some(&format!("decoder.l{layer}.mlp.b1")),
    )?;
    let h1 = ctx.tape.gelu(h1)?;
    let h2 = ctx.linear_adapted(
        h1,
        &format!("decoder.l{layer}.mlp.w2"),
        Some(&format!("decoder.l{layer}.mlp.b2")),
    )?;
    let h2 = ctx.adapter_site(h2, &format!("decoder.l{layer}.mlp_out"))?;
    let h2 = ctx.drop_site(h2)?;
    Ok(ctx.tape.add(x, h2)?)
}

// ── GMM head ─────────────────────────────────────────────────────────

/// Differentiable head outputs for one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct GmmHead {
    /// `[modes]` unnormalized mixture logits.
    pub logits: NodeId,
    /// `[modes, action_dim]`.
    pub means: NodeId,
    /// `[modes, action_dim]`, already clamped to `>= min_std`.
    pub stds: NodeId,
}

/// Concrete mixture parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GmmParams {
    pub logits: Vec<f64>,
    /// Row-major `[modes, action_dim]`.
    pub means: Tensor,
    pub stds: Tensor,
}

impl GmmHead {
    pub fn concrete(&self, tape: &Tape) -> GmmParams {
        GmmParams {
            logits: tape.value(self.logits).data.clone(),
            means: tape.value(self.means).clone(),
            stds: tape.value(self.stds).clone(),
        }
    }
}

impl GmmParams {
    pub fn modes(&self) -> usize {
        self.logits.len()
    }

    pub fn log_weights(&self) -> Vec<f64> {
        let lse = log_sum_exp_scalar(&self.logits);
        self.logits.iter().map(|l| l - lse).collect()
    }
}

fn log_sum_exp_scalar(x: &[f64]) -> f64 {
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + x.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// Stabilized log-sum-exp over a 1-D node. The row max enters as a
/// constant leaf; the gradient of LSE is softmax either way, so detaching
/// the max is exact.
fn lse_node(tape: &mut Tape, x: NodeId) -> std::result::Result<NodeId, TensorError> {
    let v = tape.value(x);
    let n = v.numel();
    let m = v.data.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let m = if m.is_finite() { m } else { 0.0 };
    let m_full = tape.leaf(Tensor::new(vec![n], vec![m; n]), false);
    let shifted = tape.sub(x, m_full)?;
    let e = tape.exp(shifted)?;
    let s = tape.sum_all(e)?;
    let l = tape.log(s)?;
    let m_scalar = tape.leaf(Tensor::scalar(m), false);
    tape.add(l, m_scalar)
}

/// Negative log-likelihood of `action` under the mixture, as a scalar
/// node: `-lse_k(logits_k + log N_k) + lse_k(logits_k)` — equivalent to
/// using normalized log-weights but with no broadcast subtraction.
pub fn gmm_nll(tape: &mut Tape, head: &GmmHead, action: &[f64]) -> Result<NodeId> {
    let (modes, ad) = {
        let m = tape.value(head.means);
        (m.shape[0], m.shape[1])
    };
    if action.len() != ad {
        return Err(PolicyError::Input(format!(
            "action has {} dims, head expects {ad}",
            action.len()
        )));
    }
    let act = tape.leaf(Tensor::new(vec![ad], action.to_vec()), false);
    let diff = tape.sub(head.means, act)?;
    let log_std = tape.log(head.stds)?;
    let neg_ls = tape.scale(log_std, -1.0)?;
    let inv_std = tape.exp(neg_ls)?;
    let z = tape.mul(diff, inv_std)?;
    let z2 = tape.mul(z, z)?;
    let s_z2 = tape.sum_axis(z2, 1)?;
    let s_ls = tape.sum_axis(log_std, 1)?;
    let half_z2 = tape.scale(s_z2, -0.5)?;
    let comp = tape.sub(half_z2, s_ls)?;
    let norm = tape.leaf(
        Tensor::new(vec![modes], vec![0.5 * ad as f64 * LOG_2PI; modes]),
        false,
    );
    let comp = tape.sub(comp, norm)?;
    let total = tape.add(head.logits, comp)?;
    let lse_total = lse_node(tape, total)?;
    let lse_logits = lse_node(tape, head.logits)?;
    Ok(tape.sub(lse_logits, lse_total)?)
}

/// Deterministic action selection: the mean of the mode with the highest
/// density at its own mean, `w_k · prod_j (2π σ_kj²)^(-1/2)`; ties go to
/// the lowest index.
pub fn select_action(params: &GmmParams) -> Vec<f64> {
    let ad = params.means.shape[1];
    let log_w = params.log_weights();
    let mut best = 0usize;
    let mut best_score = f64::NEG_INFINITY;
    for k in 0..params.modes() {
        let sum_log_std: f64 = params.stds.data[k * ad..(k + 1) * ad]
            .iter()
            .map(|s| s.ln())
            .sum();
        let score = log_w[k] - sum_log_std - 0.5 * ad as f64 * LOG_2PI;
        if score > best_score {
            best_score = score;
            best = k;
        }
    }
    params.means.data[best * ad..(best + 1) * ad].to_vec()
}

// ── full forward ─────────────────────────────────────────────────────

/// Runs the policy on an observation history (most recent last) and a task
/// embedding. Perception and state tokens interleave per timestep; the
/// head reads the final state token.
pub fn policy_forward(
    ctx: &mut ForwardCtx,
    obs: &[Observation],
    task_emb: &[f64],
) -> Result<GmmHead> {
    let spec = ctx.spec;
    let t = obs.len();
    if t == 0 || t > spec.max_seq_len {
        return Err(PolicyError::Input(format!(
            "history length {t} outside 1..={}",
            spec.max_seq_len
        )));
    }
    if task_emb.len() != spec.embed_dim {
        return Err(PolicyError::Input(format!(
            "task embedding has {} dims, expected {}",
            task_emb.len(),
            spec.embed_dim
        )));
    }
    let mut pdata = Vec::with_capacity(t * spec.percep_dim);
    let mut sdata = Vec::with_capacity(t * spec.state_dim);
    for (i, o) in obs.iter().enumerate() {
        if o.perception.len() != spec.percep_dim || o.state.len() != spec.state_dim {
            return Err(PolicyError::Input(format!(
                "observation {i} has dims ({}, {}), expected ({}, {})",
                o.perception.len(),
                o.state.len(),
                spec.percep_dim,
                spec.state_dim
            )));
        }
        pdata.extend_from_slice(&o.perception);
        sdata.extend_from_slice(&o.state);
    }
    let p = ctx.tape.leaf(Tensor::new(vec![t, spec.percep_dim], pdata), false);
    let s = ctx.tape.leaf(Tensor::new(vec![t, spec.state_dim], sdata), false);

    let per = perception_encode(ctx, p)?;
    let st = state_encode(ctx, s)?;

    let z0 = ctx.tape.leaf(
        Tensor::new(vec![1, spec.embed_dim], task_emb.to_vec()),
        false,
    );
    let wz = ctx.param("instruction.proj.w")?;
    let z = ctx.tape.matmul(z0, wz)?;
    let per = film_modulate(ctx, per, z)?;
    let st = film_modulate(ctx, st, z)?;

    // interleave: row 2t is the perception token, 2t+1 the state token
    let pair = ctx.tape.concat(1, &[per, st])?;
    let mut x = ctx.tape.reshape(pair, vec![2 * t, spec.embed_dim])?;
    let pos_table = ctx.param("decoder.pos")?;
    let pos = ctx.tape.embedding(pos_table, (0..2 * t).collect())?;
    x = ctx.tape.add(x, pos)?;

    let mut n_tok = 2 * t;
    let prefix = (ctx.maybe("prefix#a"), ctx.maybe("prefix#b"));
    if let (Some(a), Some(b)) = prefix {
        x = adapters::prefix_extend(ctx.tape, x, a, b)?;
        n_tok = ctx.tape.value(x).shape[0];
    }

    for layer in 0..spec.decoder_layers {
        x = decoder_block(ctx, x, layer, n_tok)?;
    }
    let y = ctx.layer_norm_affine(x, "decoder.lnf.g", "decoder.lnf.b")?;
    let last = ctx.tape.slice(y, 0, n_tok - 1, 1)?;
    let out = ctx.linear_adapted(last, "head.w", Some("head.b"))?;

    let k = spec.gmm_modes;
    let ad = spec.action_dim;
    let logits2 = ctx.tape.slice(out, 1, 0, k)?;
    let logits = ctx.tape.reshape(logits2, vec![k])?;
    let means2 = ctx.tape.slice(out, 1, k, k * ad)?;
    let means = ctx.tape.reshape(means2, vec![k, ad])?;
    let raw2 = ctx.tape.slice(out, 1, k + k * ad, k * ad)?;
    let raw = ctx.tape.reshape(raw2, vec![k, ad])?;
    let sp = ctx.tape.softplus(raw)?;
    let floor = ctx.tape.leaf(
        Tensor::new(vec![k, ad], vec![spec.gmm_min_std; k * ad]),
        false,
    );
    let stds = ctx.tape.add(sp, floor)?;

    for (name, id) in [("logits", logits), ("means", means), ("stds", stds)] {
        if !ctx.tape.value(id).is_finite() {
            return Err(PolicyError::NonFinite(format!("policy head {name}")));
        }
    }
    Ok(GmmHead { logits, means, stds })
}
