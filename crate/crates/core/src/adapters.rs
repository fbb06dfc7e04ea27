//! Parameter-efficient adapter integration: parallel (low-rank), sequential
//! (bottleneck, including the feedforward-only variant), and prefix tokens.
//!
//! An [`AdapterBundle`] is the whole trainable payload for one task suite:
//! adapter weights keyed by host parameter name, plus copies of the fusion
//! module and policy head. The frozen base is never written; swapping
//! bundles switches tasks.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checkpoint::{self, CheckpointError, Group, ParamStore};
use crate::policy::PolicySpec;
use crate::rng::rng_from;
use crate::tensor::{NodeId, Tape, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum AdapterError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("invalid adapter configuration: {0}")]
    Config(String),
    #[error("bundle spec mismatch: {0}")]
    SpecMismatch(String),
    #[error("layer {layer} out of range for host with {depth} layers")]
    LayerOutOfRange { layer: usize, depth: usize },
}

type Result<T> = std::result::Result<T, AdapterError>;

/// Integration styles. A spec may enable several at once; they compose
/// without interaction terms.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Lora,
    Bottleneck,
    Prefix,
    Roboadapter,
}

impl Method {
    pub fn parse(s: &str) -> Option<Method> {
        match s {
            "lora" => Some(Method::Lora),
            "bottleneck" => Some(Method::Bottleneck),
            "prefix" => Some(Method::Prefix),
            "roboadapter" => Some(Method::Roboadapter),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdapterSpec {
    pub methods: BTreeSet<Method>,
    pub lora_rank: usize,
    pub lora_alpha: f64,
    /// Extend low-rank targets from attention query/value to the decoder
    /// feedforward matrices as well.
    pub lora_targets_feedforward: bool,
    pub bottleneck_size: usize,
    pub roboadapter_size: usize,
    /// Perception-encoder layers receiving feedforward-only adapters.
    pub roboadapter_layer_mask: BTreeSet<usize>,
    /// Decoder layers for the same; `None` means every decoder layer.
    pub roboadapter_decoder_mask: Option<BTreeSet<usize>>,
    pub prefix_len: usize,
    pub prefix_rank: usize,
    /// Rank multiplier for decoder-side low-rank pairs, compensating the
    /// decoder's lower depth relative to the encoders.
    pub decoder_rank_multiplier: usize,
    /// Noise added when re-initializing from the previous stage's bundle.
    pub init_noise_std: f64,
}

impl AdapterSpec {
    pub fn lora(rank: usize, alpha: f64) -> Self {
        AdapterSpec {
            methods: [Method::Lora].into_iter().collect(),
            lora_rank: rank,
            lora_alpha: alpha,
            ..AdapterSpec::defaults()
        }
    }

    /// Paper defaults: LoRA r=8 / alpha=8 on query+value, bottleneck 32,
    /// prefix length 30 at rank 16, feedforward-only bottleneck 64 on
    /// layers {0,1,5,6,10,11}, decoder rank doubled, re-init noise 1e-3.
    pub fn defaults() -> Self {
        AdapterSpec {
            methods: [Method::Lora].into_iter().collect(),
            lora_rank: 8,
            lora_alpha: 8.0,
            lora_targets_feedforward: false,
            bottleneck_size: 32,
            roboadapter_size: 64,
            roboadapter_layer_mask: [0, 1, 5, 6, 10, 11].into_iter().collect(),
            roboadapter_decoder_mask: None,
            prefix_len: 30,
            prefix_rank: 16,
            decoder_rank_multiplier: 2,
            init_noise_std: 0.001,
        }
    }

    pub fn with_methods(mut self, methods: &[Method]) -> Self {
        self.methods = methods.iter().copied().collect();
        self
    }

    pub fn validate(&self, policy: &PolicySpec) -> Result<()> {
        if self.methods.is_empty() {
            return Err(AdapterError::Config("no integration method enabled".into()));
        }
        if self.methods.contains(&Method::Lora) {
            if self.lora_rank == 0 {
                return Err(AdapterError::Config("lora_rank must be >= 1".into()));
            }
            let max_r = self.lora_rank.max(self.lora_rank * self.decoder_rank_multiplier);
            if max_r > policy.embed_dim {
                return Err(AdapterError::Config(format!(
                    "lora rank {} exceeds min matrix dimension {}",
                    max_r, policy.embed_dim
                )));
            }
        }
        if self.methods.contains(&Method::Bottleneck) && self.bottleneck_size > policy.embed_dim {
            return Err(AdapterError::Config(format!(
                "bottleneck size {} wider than hidden width {}",
                self.bottleneck_size, policy.embed_dim
            )));
        }
        if self.methods.contains(&Method::Roboadapter) {
            roboadapter_placement(&self.roboadapter_layer_mask, policy.perception_layers)?;
            roboadapter_placement(&self.decoder_robo_mask(policy), policy.decoder_layers)?;
            if self.roboadapter_size > policy.embed_dim {
                return Err(AdapterError::Config(format!(
                    "roboadapter size {} wider than hidden width {}",
                    self.roboadapter_size, policy.embed_dim
                )));
            }
        }
        if self.methods.contains(&Method::Prefix) && self.prefix_len > 0 && self.prefix_rank == 0 {
            return Err(AdapterError::Config("prefix_rank must be >= 1".into()));
        }
        Ok(())
    }

    pub fn decoder_lora_rank(&self) -> usize {
        self.lora_rank * self.decoder_rank_multiplier.max(1)
    }

    fn decoder_robo_mask(&self, policy: &PolicySpec) -> BTreeSet<usize> {
        self.roboadapter_decoder_mask
            .clone()
            .unwrap_or_else(|| (0..policy.decoder_layers).collect())
    }
}

/// Validated insertion plan for feedforward-only sequential adapters:
/// the masked layer indices, sorted.
pub fn roboadapter_placement(mask: &BTreeSet<usize>, host_depth: usize) -> Result<Vec<usize>> {
    for &layer in mask {
        if layer >= host_depth {
            return Err(AdapterError::LayerOutOfRange {
                layer,
                depth: host_depth,
            });
        }
    }
    Ok(mask.iter().copied().collect())
}

// ── site enumeration ─────────────────────────────────────────────────
//
// Adapter parameters are keyed by the host parameter or sublayer they
// attach to, with a `#` suffix naming the role:
//   <weight>#lora_a / #lora_b      low-rank pair parallel to <weight>
//   <site>#btl_a / #btl_b          bottleneck after sublayer <site>
//   <site>#robo_a / #robo_b        feedforward-only bottleneck
//   prefix#a / prefix#b            factorized prefix tokens

#[derive(Debug, Clone)]
pub struct LoraSite {
    pub target: String,
    pub d_in: usize,
    pub d_out: usize,
    pub rank: usize,
}

#[derive(Debug, Clone)]
pub struct BottleneckSite {
    pub site: String,
    pub width: usize,
    pub size: usize,
    /// `#btl` or `#robo`
    pub role: &'static str,
}

pub fn lora_sites(policy: &PolicySpec, spec: &AdapterSpec) -> Vec<LoraSite> {
    let d = policy.embed_dim;
    let mut out = Vec::new();
    for i in 0..policy.perception_layers {
        out.push(LoraSite {
            target: format!("perception.l{i}.wa"),
            d_in: d,
            d_out: d,
            rank: spec.lora_rank,
        });
    }
    let dr = spec.decoder_lora_rank();
    for i in 0..policy.decoder_layers {
        for w in ["wq", "wv"] {
            out.push(LoraSite {
                target: format!("decoder.l{i}.attn.{w}"),
                d_in: d,
                d_out: d,
                rank: dr,
            });
        }
        if spec.lora_targets_feedforward {
            out.push(LoraSite {
                target: format!("decoder.l{i}.mlp.w1"),
                d_in: d,
                d_out: d * policy.mlp_ratio,
                rank: dr,
            });
            out.push(LoraSite {
                target: format!("decoder.l{i}.mlp.w2"),
                d_in: d * policy.mlp_ratio,
                d_out: d,
                rank: dr,
            });
        }
    }
    out
}

pub fn bottleneck_sites(policy: &PolicySpec, spec: &AdapterSpec) -> Result<Vec<BottleneckSite>> {
    let d = policy.embed_dim;
    let mut out = Vec::new();
    if spec.methods.contains(&Method::Bottleneck) {
        for i in 0..policy.perception_layers {
            for site in ["attn_out", "mlp_out"] {
                out.push(BottleneckSite {
                    site: format!("perception.l{i}.{site}"),
                    width: d,
                    size: spec.bottleneck_size,
                    role: "#btl",
                });
            }
        }
        for i in 0..policy.decoder_layers {
            for site in ["attn_out", "mlp_out"] {
                out.push(BottleneckSite {
                    site: format!("decoder.l{i}.{site}"),
                    width: d,
                    size: spec.bottleneck_size,
                    role: "#btl",
                });
            }
        }
    }
    if spec.methods.contains(&Method::Roboadapter) {
        for i in roboadapter_placement(&spec.roboadapter_layer_mask, policy.perception_layers)? {
            out.push(BottleneckSite {
                site: format!("perception.l{i}.mlp_out"),
                width: d,
                size: spec.roboadapter_size,
                role: "#robo",
            });
        }
        for i in roboadapter_placement(&spec.decoder_robo_mask(policy), policy.decoder_layers)? {
            out.push(BottleneckSite {
                site: format!("decoder.l{i}.mlp_out"),
                width: d,
                size: spec.roboadapter_size,
                role: "#robo",
            });
        }
    }
    Ok(out)
}

// ── bundle lifecycle ─────────────────────────────────────────────────

/// Per-task-suite trainable payload: adapter weights, fusion-module copy,
/// policy-head copy, and the digest of the frozen base it belongs to.
#[derive(Debug, Clone)]
pub struct AdapterBundle {
    pub suite_id: String,
    pub spec: AdapterSpec,
    pub params: ParamStore,
    pub base_digest: String,
}

/// Fresh or carried-over bundle for one task suite.
///
/// With no predecessor: low-rank down-projections draw from N(0, 0.02^2)
/// and up-projections start at zero, so every adapted forward pass equals
/// the base model bit-exactly (prefix excepted when its length is > 0).
/// With a predecessor, adapter weights carry over plus elementwise
/// N(0, init_noise_std^2) noise; fusion/head copies carry over unchanged.
pub fn init_adapter(
    policy: &PolicySpec,
    spec: &AdapterSpec,
    base: &ParamStore,
    base_digest: &str,
    suite_id: &str,
    prev: Option<&AdapterBundle>,
    seed: u64,
) -> Result<AdapterBundle> {
    spec.validate(policy)?;
    if let Some(prev) = prev {
        if prev.spec != *spec {
            return Err(AdapterError::SpecMismatch(format!(
                "previous bundle {} was built with a different adapter spec",
                prev.suite_id
            )));
        }
        if prev.base_digest != base_digest {
            return Err(AdapterError::SpecMismatch(format!(
                "previous bundle {} was trained against base {}, current base is {}",
                prev.suite_id, prev.base_digest, base_digest
            )));
        }
    }

    let mut params = ParamStore::new();
    let init = |name: &str, shape: Vec<usize>, std: f64| -> Tensor {
        if std == 0.0 {
            return Tensor::zeros(&shape);
        }
        let mut rng = rng_from(seed, name, &[]);
        let dist = Normal::new(0.0, std).unwrap();
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| dist.sample(&mut rng)).collect())
    };

    if spec.methods.contains(&Method::Lora) {
        for s in lora_sites(policy, spec) {
            params.insert(
                format!("{}#lora_a", s.target),
                Group::Adapter,
                init(&format!("{}#lora_a", s.target), vec![s.d_in, s.rank], 0.02),
            );
            params.insert(
                format!("{}#lora_b", s.target),
                Group::Adapter,
                Tensor::zeros(&[s.rank, s.d_out]),
            );
        }
    }
    for s in bottleneck_sites(policy, spec)? {
        params.insert(
            format!("{}{}_a", s.site, s.role),
            Group::Adapter,
            init(&format!("{}{}_a", s.site, s.role), vec![s.width, s.size], 0.02),
        );
        params.insert(
            format!("{}{}_b", s.site, s.role),
            Group::Adapter,
            Tensor::zeros(&[s.size, s.width]),
        );
    }
    if spec.methods.contains(&Method::Prefix) && spec.prefix_len > 0 {
        params.insert(
            "prefix#a",
            Group::Adapter,
            init("prefix#a", vec![spec.prefix_len, spec.prefix_rank], 0.02),
        );
        params.insert(
            "prefix#b",
            Group::Adapter,
            init("prefix#b", vec![spec.prefix_rank, policy.embed_dim], 0.02),
        );
    }

    match prev {
        Some(prev) => {
            // carry adapter weights forward with re-init noise
            let noise = Normal::new(0.0, spec.init_noise_std.max(f64::MIN_POSITIVE)).unwrap();
            let names: Vec<String> = params.names().cloned().collect();
            for name in names {
                let prev_val = prev
                    .params
                    .get(&name)
                    .ok_or_else(|| {
                        AdapterError::SpecMismatch(format!(
                            "previous bundle lacks adapter parameter {name}"
                        ))
                    })?
                    .value
                    .clone();
                let carried = if spec.init_noise_std == 0.0 {
                    (*prev_val).clone()
                } else {
                    let mut rng = rng_from(seed, &format!("carry:{name}"), &[]);
                    Tensor::new(
                        prev_val.shape.clone(),
                        prev_val
                            .data
                            .iter()
                            .map(|v| v + noise.sample(&mut rng))
                            .collect(),
                    )
                };
                params.set_value(&name, carried);
            }
            for (name, p) in prev.params.iter() {
                if matches!(p.group, Group::Fusion | Group::PolicyHead) {
                    params.insert(name.clone(), p.group, (*p.value).clone());
                }
            }
        }
        None => {
            // fusion-module and policy-head copies start from the pretrained values
            for (name, p) in base.iter() {
                if matches!(p.group, Group::Fusion | Group::PolicyHead) {
                    params.insert(name.clone(), p.group, (*p.value).clone());
                }
            }
        }
    }

    Ok(AdapterBundle {
        suite_id: suite_id.to_string(),
        spec: spec.clone(),
        params,
        base_digest: base_digest.to_string(),
    })
}

// ── tape primitives ──────────────────────────────────────────────────

/// Parallel low-rank integration: `x·W (+ already-computed) + alpha·(x·A)·B`.
/// Returns the additive delta to the base matmul output.
pub fn lora_delta(
    tape: &mut Tape,
    h_in: NodeId,
    a: NodeId,
    b: NodeId,
    alpha: f64,
) -> std::result::Result<NodeId, TensorError> {
    let down = tape.matmul(h_in, a)?;
    let up = tape.matmul(down, b)?;
    tape.scale(up, alpha)
}

/// Full parallel-integration output `Wᵀh + alpha·W_upᵀ W_downᵀ h` for a
/// single input vector; used directly by tests and small call sites.
pub fn lora_forward(
    tape: &mut Tape,
    w: NodeId,
    h_in: NodeId,
    a: NodeId,
    b: NodeId,
    alpha: f64,
) -> std::result::Result<NodeId, TensorError> {
    let base = tape.matmul(h_in, w)?;
    let delta = lora_delta(tape, h_in, a, b, alpha)?;
    tape.add(base, delta)
}

/// Sequential integration in residual form:
/// `base_out + W_upᵀ φ(W_downᵀ base_out)`, φ applied elementwise.
pub fn bottleneck_forward(
    tape: &mut Tape,
    base_out: NodeId,
    a: NodeId,
    b: NodeId,
    phi: fn(&mut Tape, NodeId) -> std::result::Result<NodeId, TensorError>,
) -> std::result::Result<NodeId, TensorError> {
    let down = tape.matmul(base_out, a)?;
    let act = phi(tape, down)?;
    let up = tape.matmul(act, b)?;
    tape.add(base_out, up)
}

/// Materializes the prefix token block `p = A·B` and prepends it to the
/// token sequence. Decoder outputs at prefix rows are discarded by the
/// caller (the head reads the final real token).
pub fn prefix_extend(
    tape: &mut Tape,
    seq: NodeId,
    a: NodeId,
    b: NodeId,
) -> std::result::Result<NodeId, TensorError> {
    let p = tape.matmul(a, b)?;
    tape.concat(0, &[p, seq])
}

// ── accounting ───────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamCounts {
    pub per_group: BTreeMap<String, usize>,
    pub trainable: usize,
    pub total: usize,
    pub fraction: f64,
}

/// Exact trainable-parameter accounting under a freeze mask.
///
/// `total` is the full base model (the full-fine-tuning size); bundle
/// parameters count toward `trainable` only.
pub fn count_trainable(
    base: &ParamStore,
    trainable: &BTreeSet<String>,
    bundle: Option<&AdapterBundle>,
) -> ParamCounts {
    let mut per_group: BTreeMap<String, usize> = BTreeMap::new();
    let mut trainable_n = 0usize;
    let mut count = |store: &ParamStore, name: &str| {
        if let Some(p) = store.get(name) {
            let n = p.value.numel();
            *per_group.entry(p.group.as_str().to_string()).or_insert(0) += n;
            trainable_n += n;
            true
        } else {
            false
        }
    };
    for name in trainable {
        // bundle parameters shadow base parameters of the same name
        let in_bundle = bundle.map(|b| count(&b.params, name)).unwrap_or(false);
        if !in_bundle {
            count(base, name);
        }
    }
    let total = base.scalar_count();
    ParamCounts {
        per_group,
        trainable: trainable_n,
        total,
        fraction: trainable_n as f64 / total as f64,
    }
}

// ── persistence ──────────────────────────────────────────────────────

#[derive(Serialize, Deserialize)]
struct BundleMeta {
    suite_id: String,
    spec: AdapterSpec,
    base_digest: String,
}

pub fn save_bundle(bundle: &AdapterBundle, prefix: &Path) -> Result<()> {
    let meta = serde_json::to_value(BundleMeta {
        suite_id: bundle.suite_id.clone(),
        spec: bundle.spec.clone(),
        base_digest: bundle.base_digest.clone(),
    })
    .map_err(CheckpointError::from)?;
    checkpoint::save(prefix, "bundle", &bundle.params, &BTreeSet::new(), meta)?;
    Ok(())
}

/// Loads a bundle and verifies it was trained against `base_digest`.
pub fn load_bundle(prefix: &Path, base_digest: &str) -> Result<AdapterBundle> {
    let (params, manifest) = checkpoint::load(prefix)?;
    if manifest.kind != "bundle" {
        return Err(AdapterError::Checkpoint(CheckpointError::Corrupt(format!(
            "expected a bundle file, found kind {:?}",
            manifest.kind
        ))));
    }
    let meta: BundleMeta =
        serde_json::from_value(manifest.meta).map_err(CheckpointError::from)?;
    if meta.base_digest != base_digest {
        return Err(AdapterError::Checkpoint(CheckpointError::DigestMismatch {
            expected: meta.base_digest,
            found: base_digest.to_string(),
        }));
    }
    Ok(AdapterBundle {
        suite_id: meta.suite_id,
        spec: meta.spec,
        params,
        base_digest: meta.base_digest,
    })
}

// freeze-mask construction lives here too; strategies reference both the
// base weight groups and the bundle payload

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskStrategy {
    /// Pretraining: frozen "pretrained" encoders plus their permanent
    /// adapters; everything else learns.
    Pretrain,
    /// Adapter weights, fusion copy and head copy only (bundle-side).
    Tail,
    /// Full fine-tuning: every base parameter.
    Fft,
    /// Frozen pretrained features: fusion module and policy head only.
    Fpf,
}

impl MaskStrategy {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "pretrain" => Some(MaskStrategy::Pretrain),
            "tail" => Some(MaskStrategy::Tail),
            "fft" => Some(MaskStrategy::Fft),
            "fpf" => Some(MaskStrategy::Fpf),
            _ => None,
        }
    }
}

/// Set of parameter names that receive gradients. TAIL masks name bundle
/// parameters; the others name base parameters.
pub fn build_freeze_mask(
    base: &ParamStore,
    strategy: MaskStrategy,
    bundle: Option<&AdapterBundle>,
) -> Result<BTreeSet<String>> {
    match strategy {
        MaskStrategy::Tail => {
            let bundle = bundle.ok_or_else(|| {
                AdapterError::Config("tail strategy requires an adapter bundle".into())
            })?;
            Ok(bundle.params.names().cloned().collect())
        }
        MaskStrategy::Fft => Ok(base.names().cloned().collect()),
        MaskStrategy::Fpf => Ok(base
            .iter()
            .filter(|(_, p)| matches!(p.group, Group::Fusion | Group::PolicyHead))
            .map(|(n, _)| n.clone())
            .collect()),
        MaskStrategy::Pretrain => Ok(base
            .iter()
            .filter(|(_, p)| {
                matches!(
                    p.group,
                    Group::StateEncoder
                        | Group::Fusion
                        | Group::Decoder
                        | Group::PolicyHead
                        | Group::Adapter
                )
            })
            .map(|(n, _)| n.clone())
            .collect()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::{
        gmm_nll, policy_forward, ForwardCtx, Observation, PolicySpec, PolicyWeights,
    };
    use crate::rng::DropoutStream;
    use rand::Rng;

    fn tiny_policy() -> PolicySpec {
        PolicySpec {
            embed_dim: 8,
            decoder_layers: 2,
            decoder_heads: 2,
            mlp_ratio: 2,
            perception_layers: 2,
            percep_dim: 4,
            state_dim: 3,
            action_dim: 2,
            max_seq_len: 3,
            gmm_modes: 2,
            gmm_min_std: 1e-4,
            dropout: 0.0,
            film_layers: 2,
            fusion_hidden: 4,
            pretrain_adapter_rank: 2,
        }
    }

    fn tiny_adapter(methods: &[Method]) -> AdapterSpec {
        AdapterSpec {
            lora_rank: 2,
            lora_alpha: 2.0,
            roboadapter_layer_mask: [0, 1].into_iter().collect(),
            roboadapter_decoder_mask: Some([0, 1].into_iter().collect()),
            bottleneck_size: 3,
            roboadapter_size: 3,
            prefix_len: 4,
            prefix_rank: 2,
            decoder_rank_multiplier: 2,
            ..AdapterSpec::defaults()
        }
        .with_methods(methods)
    }

    fn sample_inputs(spec: &PolicySpec) -> (Vec<Observation>, Vec<f64>) {
        let mut rng = crate::rng::rng_from(5, "adapter-test", &[]);
        let obs = (0..2)
            .map(|_| Observation {
                perception: (0..spec.percep_dim).map(|_| rng.gen::<f64>() - 0.5).collect(),
                state: (0..spec.state_dim).map(|_| rng.gen::<f64>() - 0.5).collect(),
            })
            .collect();
        let emb = (0..spec.embed_dim).map(|_| rng.gen::<f64>() - 0.5).collect();
        (obs, emb)
    }

    fn forward_params(
        w: &PolicyWeights,
        bundle: Option<&AdapterBundle>,
        obs: &[Observation],
        emb: &[f64],
    ) -> crate::policy::GmmParams {
        let mut tape = Tape::new();
        let mut ctx = ForwardCtx::eval(&mut tape, w, bundle);
        let head = policy_forward(&mut ctx, obs, emb).unwrap();
        head.concrete(&tape)
    }

    #[test]
    fn zero_init_bundles_are_transparent() {
        let spec = tiny_policy();
        let w = PolicyWeights::init(&spec, 42).unwrap();
        let digest = w.digest();
        let (obs, emb) = sample_inputs(&spec);
        let base_out = forward_params(&w, None, &obs, &emb);
        for methods in [
            vec![Method::Lora],
            vec![Method::Bottleneck],
            vec![Method::Roboadapter],
            vec![Method::Lora, Method::Bottleneck, Method::Roboadapter],
        ] {
            let aspec = tiny_adapter(&methods);
            let bundle =
                init_adapter(&spec, &aspec, &w.store, &digest, "suite0", None, 9).unwrap();
            let out = forward_params(&w, Some(&bundle), &obs, &emb);
            assert_eq!(out, base_out, "methods {methods:?} not transparent at init");
        }
        // prefix tokens are real inputs from step one; output must move
        let aspec = tiny_adapter(&[Method::Prefix]);
        let bundle = init_adapter(&spec, &aspec, &w.store, &digest, "suite0", None, 9).unwrap();
        let out = forward_params(&w, Some(&bundle), &obs, &emb);
        assert_ne!(out, base_out);
    }

    #[test]
    fn lora_additive_matches_merged_weight() {
        let mut rng = crate::rng::rng_from(3, "lora-merge", &[]);
        let mut rand_t = |shape: &[usize]| {
            let n: usize = shape.iter().product();
            Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen::<f64>() - 0.5).collect())
        };
        let (w, a, b) = (rand_t(&[6, 5]), rand_t(&[6, 2]), rand_t(&[2, 5]));
        let h = rand_t(&[3, 6]);
        let alpha = 1.75;

        let mut tape = Tape::new();
        let wid = tape.leaf(w.clone(), false);
        let aid = tape.leaf(a.clone(), false);
        let bid = tape.leaf(b.clone(), false);
        let hid = tape.leaf(h.clone(), false);
        let additive = lora_forward(&mut tape, wid, hid, aid, bid, alpha).unwrap();

        // merged: h · (W + alpha·A·B)
        let mut merged = w.clone();
        for i in 0..6 {
            for j in 0..5 {
                let mut dot = 0.0;
                for r in 0..2 {
                    dot += a.data[i * 2 + r] * b.data[r * 5 + j];
                }
                merged.data[i * 5 + j] += alpha * dot;
            }
        }
        let mid = tape.leaf(merged, false);
        let merged_out = tape.matmul(hid, mid).unwrap();
        for (x, y) in tape
            .value(additive)
            .data
            .iter()
            .zip(&tape.value(merged_out).data)
        {
            assert!((x - y).abs() < 1e-10);
        }
    }

    #[test]
    fn bottleneck_hand_values() {
        // identity down-projection, diagonal up-projection, tanh
        let mut tape = Tape::new();
        let h = tape.leaf(Tensor::new(vec![1, 2], vec![0.5, -1.0]), false);
        let a = tape.leaf(Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]), false);
        let b = tape.leaf(Tensor::new(vec![2, 2], vec![2.0, 0.0, 0.0, 3.0]), false);
        let out = bottleneck_forward(&mut tape, h, a, b, Tape::tanh).unwrap();
        let got = &tape.value(out).data;
        let want = [0.5 + 2.0 * 0.5f64.tanh(), -1.0 + 3.0 * (-1.0f64).tanh()];
        assert!((got[0] - want[0]).abs() < 1e-12);
        assert!((got[1] - want[1]).abs() < 1e-12);
    }

    #[test]
    fn roboadapter_mask_validation() {
        let spec = tiny_policy();
        let mask: BTreeSet<usize> = [0, 1, 5, 6, 10, 11].into_iter().collect();
        assert!(matches!(
            roboadapter_placement(&mask, spec.perception_layers),
            Err(AdapterError::LayerOutOfRange { layer: 5, depth: 2 })
        ));
        let ok: BTreeSet<usize> = [0, 1].into_iter().collect();
        assert_eq!(roboadapter_placement(&ok, 2).unwrap(), vec![0, 1]);
        assert_eq!(
            roboadapter_placement(&BTreeSet::new(), 2).unwrap(),
            Vec::<usize>::new()
        );
        // a paper-style mask must fail validation against a shallow host
        let mut aspec = tiny_adapter(&[Method::Roboadapter]);
        aspec.roboadapter_layer_mask = mask;
        assert!(aspec.validate(&spec).is_err());
    }

    #[test]
    fn count_trainable_closed_form() {
        let spec = tiny_policy();
        let w = PolicyWeights::init(&spec, 1).unwrap();
        let aspec = tiny_adapter(&[Method::Lora]);
        let bundle =
            init_adapter(&spec, &aspec, &w.store, &w.digest(), "s", None, 0).unwrap();
        let mask = build_freeze_mask(&w.store, MaskStrategy::Tail, Some(&bundle)).unwrap();
        let counts = count_trainable(&w.store, &mask, Some(&bundle));

        let d = spec.embed_dim;
        // low-rank pairs: r(d_in + d_out) per site
        let lora: usize = lora_sites(&spec, &aspec)
            .iter()
            .map(|s| s.rank * (s.d_in + s.d_out))
            .sum();
        let perception = spec.perception_layers * aspec.lora_rank * 2 * d;
        let decoder = spec.decoder_layers * 2 * aspec.decoder_lora_rank() * 2 * d;
        assert_eq!(lora, perception + decoder);
        let fusion = d * spec.fusion_hidden + spec.fusion_hidden
            + spec.fusion_hidden * 2 * d + 2 * d;
        let head = d * spec.head_width() + spec.head_width();
        assert_eq!(counts.trainable, lora + fusion + head);
        assert_eq!(counts.total, w.store.scalar_count());
        assert!((counts.fraction - counts.trainable as f64 / counts.total as f64).abs() < 1e-15);
        assert_eq!(counts.per_group["adapter"], lora);
        assert_eq!(counts.per_group["fusion"], fusion);
        assert_eq!(counts.per_group["policy_head"], head);
    }

    #[test]
    fn prefix_parameter_count_is_factorized() {
        let spec = tiny_policy();
        let w = PolicyWeights::init(&spec, 1).unwrap();
        let aspec = tiny_adapter(&[Method::Prefix]);
        let bundle =
            init_adapter(&spec, &aspec, &w.store, &w.digest(), "s", None, 0).unwrap();
        let expected = aspec.prefix_len * aspec.prefix_rank + aspec.prefix_rank * spec.embed_dim;
        let got: usize = bundle
            .params
            .iter()
            .filter(|(n, _)| n.starts_with("prefix#"))
            .map(|(_, p)| p.value.numel())
            .sum();
        assert_eq!(got, expected);
    }

    #[test]
    fn paper_scale_lora_fraction_in_band() {
        let spec = PolicySpec::paper();
        let w = PolicyWeights::init(&spec, 0).unwrap();
        let aspec = AdapterSpec::defaults();
        let bundle =
            init_adapter(&spec, &aspec, &w.store, &w.digest(), "s", None, 0).unwrap();
        let mask = build_freeze_mask(&w.store, MaskStrategy::Tail, Some(&bundle)).unwrap();
        let counts = count_trainable(&w.store, &mask, Some(&bundle));
        assert!(
            (0.008..=0.025).contains(&counts.fraction),
            "paper-scale fraction {} outside band",
            counts.fraction
        );
    }

    #[test]
    fn freeze_masks_by_strategy() {
        let spec = tiny_policy();
        let w = PolicyWeights::init(&spec, 2).unwrap();
        let aspec = tiny_adapter(&[Method::Lora]);
        let bundle =
            init_adapter(&spec, &aspec, &w.store, &w.digest(), "s", None, 0).unwrap();

        let tail = build_freeze_mask(&w.store, MaskStrategy::Tail, Some(&bundle)).unwrap();
        assert_eq!(tail, bundle.params.names().cloned().collect::<BTreeSet<_>>());
        assert!(tail.iter().any(|n| n.contains("#lora_a")));
        assert!(tail.contains("head.w") && tail.contains("fusion.l0.w"));

        let fft = build_freeze_mask(&w.store, MaskStrategy::Fft, None).unwrap();
        assert_eq!(fft.len(), w.store.len());

        let fpf = build_freeze_mask(&w.store, MaskStrategy::Fpf, None).unwrap();
        assert!(fpf.contains("head.w") && fpf.contains("fusion.l1.b"));
        assert!(!fpf.iter().any(|n| n.starts_with("decoder.") || n.starts_with("state.")));

        let pre = build_freeze_mask(&w.store, MaskStrategy::Pretrain, None).unwrap();
        assert!(pre.contains("decoder.l0.attn.wq") && pre.contains("state.l0.w"));
        assert!(pre.contains("perception.l0.wa#pt_a"));
        assert!(!pre.contains("perception.l0.wa") && !pre.contains("instruction.proj.w"));

        assert!(build_freeze_mask(&w.store, MaskStrategy::Tail, None).is_err());
    }

    #[test]
    fn tail_gradients_reach_only_bundle_parameters() {
        let spec = tiny_policy();
        let w = PolicyWeights::init(&spec, 8).unwrap();
        let aspec = tiny_adapter(&[Method::Lora]);
        let bundle =
            init_adapter(&spec, &aspec, &w.store, &w.digest(), "s", None, 3).unwrap();
        let mask = build_freeze_mask(&w.store, MaskStrategy::Tail, Some(&bundle)).unwrap();
        let (obs, emb) = sample_inputs(&spec);

        let mut tape = Tape::new();
        let mut ctx = ForwardCtx::new(
            &mut tape,
            &spec,
            &w.store,
            Some(&bundle),
            Some(&mask),
            DropoutStream::disabled(),
        );
        let head = policy_forward(&mut ctx, &obs, &emb).unwrap();
        let nll = gmm_nll(ctx.tape, &head, &[0.1, -0.3]).unwrap();
        let lora_b = ctx.leaf_id("decoder.l0.attn.wq#lora_b").unwrap();
        let fusion_w = ctx.leaf_id("fusion.l1.w").unwrap();
        let base_wq = ctx.leaf_id("decoder.l0.attn.wq").unwrap();
        let grads = tape.backward(nll).unwrap();
        assert!(grads.get(lora_b).is_some());
        assert!(grads.get(fusion_w).is_some());
        assert!(grads.get(base_wq).is_none(), "frozen base got a gradient");
    }

    #[test]
    fn bundle_roundtrip_and_digest_gate() {
        let dir = tempfile::tempdir().unwrap();
        let spec = tiny_policy();
        let w = PolicyWeights::init(&spec, 4).unwrap();
        let aspec = tiny_adapter(&[Method::Lora, Method::Prefix]);
        let bundle =
            init_adapter(&spec, &aspec, &w.store, &w.digest(), "suite3", None, 1).unwrap();
        let prefix = dir.path().join("suite3");
        save_bundle(&bundle, &prefix).unwrap();
        let loaded = load_bundle(&prefix, &w.digest()).unwrap();
        assert_eq!(loaded.suite_id, "suite3");
        assert_eq!(loaded.spec, aspec);
        assert_eq!(loaded.params.digest(), bundle.params.digest());
        // wrong base refuses to load
        assert!(matches!(
            load_bundle(&prefix, "deadbeef"),
            Err(AdapterError::Checkpoint(CheckpointError::DigestMismatch { .. }))
        ));
    }

    #[test]
    fn carry_over_adds_small_noise_to_adapters_only() {
        let spec = tiny_policy();
        let w = PolicyWeights::init(&spec, 6).unwrap();
        let aspec = tiny_adapter(&[Method::Lora]);
        let digest = w.digest();
        let mut prev =
            init_adapter(&spec, &aspec, &w.store, &digest, "s0", None, 1).unwrap();
        // pretend s0 trained: move a fusion copy and an adapter weight
        let mut fusion: Tensor = (**prev.params.value("fusion.l0.w")).clone();
        for v in &mut fusion.data {
            *v += 0.5;
        }
        prev.params.set_value("fusion.l0.w", fusion);

        let next =
            init_adapter(&spec, &aspec, &w.store, &digest, "s1", Some(&prev), 2).unwrap();
        let (mut sum_abs, mut n) = (0.0, 0usize);
        for (name, p) in next.params.iter() {
            let prev_p = prev.params.value(name);
            if p.group == Group::Adapter {
                for (a, b) in p.value.data.iter().zip(&prev_p.data) {
                    sum_abs += (a - b).abs();
                    n += 1;
                }
            } else {
                // fusion/head copies carry over unchanged
                assert_eq!(p.value.data, prev_p.data, "{name} should carry exactly");
            }
        }
        // E|N(0, 0.001^2)| = 0.001·sqrt(2/π) ≈ 0.0008
        let mean_abs = sum_abs / n as f64;
        assert!(
            (0.0005..0.0015).contains(&mean_abs),
            "mean |Δ| = {mean_abs}"
        );
        // digest gate on mismatched base
        assert!(init_adapter(&spec, &aspec, &w.store, "other", "s1", Some(&prev), 2).is_err());
    }
}
