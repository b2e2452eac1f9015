//! Prompt encoding with one-shot profiling, then token generation over the
//! per-head compressed caches.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attention::{attend, causal_attention, AttentionMap};
use crate::error::{Error, Result};
use crate::matrix::{dot, DenseMatrix};
use crate::model::{Model, ModelConfig};
use crate::policy::{
    cache_memory_cost, ratio_budget, retained_indices, retained_raw, Atom, CompressionPolicy,
    PolicyContext, RetainedSet,
};
use crate::profiler::{
    policy_recovery, profile_model, HeadChoice, HeadInput, HeadProfile, ProfilerConfig, RowScope,
};
use crate::tokens::{TokenAnnotation, TokenClass};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Sampling {
    Greedy,
    Nucleus { temperature: f64, top_p: f64, seed: u64 },
}

impl Sampling {
    pub fn validate(&self) -> Result<()> {
        if let Sampling::Nucleus { temperature, top_p, .. } = *self {
            if !(temperature > 0.0 && temperature.is_finite()) {
                return Err(Error::InvalidParameter(format!("temperature {temperature} must be > 0")));
            }
            if !(top_p > 0.0 && top_p <= 1.0) {
                return Err(Error::InvalidParameter(format!("top_p {top_p} not in (0, 1]")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GenerationConfig {
    pub max_new_tokens: usize,
    pub sampling: Sampling,
    /// Keep uncompressed keys on the side to measure how much of the full
    /// attention mass each decoding step's cache covers.
    pub track_recovery: bool,
}

impl GenerationConfig {
    pub fn greedy(max_new_tokens: usize) -> Self {
        Self {
            max_new_tokens,
            sampling: Sampling::Greedy,
            track_recovery: true,
        }
    }
}

/// Draws next tokens from logits.
#[derive(Debug, Clone)]
pub struct Sampler {
    sampling: Sampling,
    rng: ChaCha8Rng,
}

impl Sampler {
    pub fn new(sampling: Sampling) -> Result<Self> {
        sampling.validate()?;
        let seed = match sampling {
            Sampling::Nucleus { seed, .. } => seed,
            Sampling::Greedy => 0,
        };
        Ok(Self {
            sampling,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    pub fn sample(&mut self, logits: &[f64]) -> Result<u32> {
        if logits.is_empty() {
            return Err(Error::EmptyInput);
        }
        match self.sampling {
            Sampling::Greedy => Ok(argmax(logits) as u32),
            Sampling::Nucleus { temperature, top_p, .. } => {
                let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                if !max.is_finite() {
                    return Err(Error::NonFinite("logits"));
                }
                let mut probs: Vec<(usize, f64)> = logits
                    .iter()
                    .map(|&l| ((l - max) / temperature).exp())
                    .enumerate()
                    .collect();
                let total: f64 = probs.iter().map(|p| p.1).sum();
                probs.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
                let mut kept = 0.0;
                let mut cut = probs.len();
                for (i, p) in probs.iter().enumerate() {
                    kept += p.1 / total;
                    if kept >= top_p {
                        cut = i + 1;
                        break;
                    }
                }
                let probs = &probs[..cut];
                let mass: f64 = probs.iter().map(|p| p.1).sum();
                let mut u = self.rng.gen::<f64>() * mass;
                for &(id, p) in probs {
                    if u < p {
                        return Ok(id as u32);
                    }
                    u -= p;
                }
                Ok(probs[cut - 1].0 as u32)
            }
        }
    }
}

/// Index of the largest value; the first one wins ties.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// One head's compressed cache.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadCache {
    layer: usize,
    head: usize,
    policy: CompressionPolicy,
    positions: Vec<usize>,
    keys: DenseMatrix,
    values: DenseMatrix,
    /// Cumulative attention score of each retained position; only kept for
    /// policies containing Frequent.
    sidecar: Option<Vec<f64>>,
}

impl HeadCache {
    pub fn layer(&self) -> usize {
        self.layer
    }

    pub fn head(&self) -> usize {
        self.head
    }

    pub fn policy(&self) -> &CompressionPolicy {
        &self.policy
    }

    pub fn positions(&self) -> &[usize] {
        &self.positions
    }

    pub fn keys(&self) -> &DenseMatrix {
        &self.keys
    }

    pub fn values(&self) -> &DenseMatrix {
        &self.values
    }

    pub fn sidecar(&self) -> Option<&[f64]> {
        self.sidecar.as_deref()
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    fn check(&self) -> Result<()> {
        let n = self.positions.len();
        if self.positions.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::CacheMismatch(format!(
                "layer {} head {}: positions not strictly increasing",
                self.layer, self.head
            )));
        }
        if self.keys.rows() != n || self.values.rows() != n {
            return Err(Error::CacheMismatch(format!(
                "layer {} head {}: {} positions but {}/{} K/V rows",
                self.layer,
                self.head,
                n,
                self.keys.rows(),
                self.values.rows()
            )));
        }
        match (&self.sidecar, self.policy.contains(Atom::Frequent)) {
            (Some(s), true) if s.len() == n => Ok(()),
            (None, false) => Ok(()),
            _ => Err(Error::CacheMismatch(format!(
                "layer {} head {}: score sidecar does not match policy {}",
                self.layer, self.head, self.policy
            ))),
        }
    }

    fn keep(&mut self, retained: &RetainedSet) -> Result<()> {
        let rows: Vec<usize> = self
            .positions
            .iter()
            .enumerate()
            .filter(|(_, p)| retained.contains(**p))
            .map(|(i, _)| i)
            .collect();
        self.keys = self.keys.select_rows(&rows)?;
        self.values = self.values.select_rows(&rows)?;
        if let Some(s) = &mut self.sidecar {
            *s = rows.iter().map(|&i| s[i]).collect();
        }
        self.positions = rows.iter().map(|&i| self.positions[i]).collect();
        Ok(())
    }
}

/// Compressed caches of every head plus the token annotations seen so far.
#[derive(Debug, Clone, PartialEq)]
pub struct CompressedCache {
    config: ModelConfig,
    prompt_len: usize,
    annotations: Vec<TokenAnnotation>,
    heads: Vec<HeadCache>,
}

impl CompressedCache {
    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn prompt_len(&self) -> usize {
        self.prompt_len
    }

    /// Number of positions seen, retained or not.
    pub fn context_len(&self) -> usize {
        self.annotations.len()
    }

    pub fn annotations(&self) -> &[TokenAnnotation] {
        &self.annotations
    }

    pub fn heads(&self) -> &[HeadCache] {
        &self.heads
    }

    pub fn head(&self, layer: usize, head: usize) -> Option<&HeadCache> {
        self.heads.get(layer * self.config.num_heads + head)
    }

    pub fn retained_counts(&self) -> Vec<usize> {
        self.heads.iter().map(HeadCache::len).collect()
    }

    pub fn total_tokens(&self) -> usize {
        self.heads.iter().map(HeadCache::len).sum()
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads.len() != self.config.total_heads() {
            return Err(Error::CacheMismatch(format!(
                "{} head caches for a model with {} heads",
                self.heads.len(),
                self.config.total_heads()
            )));
        }
        for (h, (l, hh)) in self.heads.iter().zip(self.config.head_ids()) {
            if (h.layer, h.head) != (l, hh) {
                return Err(Error::CacheMismatch(format!(
                    "cache slot for layer {l} head {hh} holds layer {} head {}",
                    h.layer, h.head
                )));
            }
            h.check()?;
            if h.positions.last().is_some_and(|&p| p >= self.context_len()) {
                return Err(Error::CacheMismatch(format!(
                    "layer {l} head {hh} retains a position beyond the context"
                )));
            }
        }
        Ok(())
    }
}

/// Full-prompt projections and attention for one head.
#[derive(Debug, Clone)]
pub struct HeadEncoding {
    pub layer: usize,
    pub head: usize,
    pub keys: DenseMatrix,
    pub values: DenseMatrix,
    pub attention: AttentionMap,
    /// Attention output of the last prompt position.
    pub last_output: Vec<f64>,
}

/// Projects `tokens` through every head and runs causal attention over them.
pub fn encode_heads<M: Model + ?Sized>(model: &M, tokens: &[u32]) -> Result<Vec<HeadEncoding>> {
    if tokens.is_empty() {
        return Err(Error::EmptyInput);
    }
    let config = *model.config();
    config.validate()?;
    let d = config.head_dim;
    let ids: Vec<_> = config.head_ids().collect();
    ids.par_iter()
        .map(|&(layer, head)| {
            let (mut q, mut k, mut v) = (DenseMatrix::with_cols(d), DenseMatrix::with_cols(d), DenseMatrix::with_cols(d));
            for (p, &t) in tokens.iter().enumerate() {
                let proj = model.project(layer, head, p, t)?;
                q.push_row(&proj.q)?;
                k.push_row(&proj.k)?;
                v.push_row(&proj.v)?;
            }
            let (attention, out) = causal_attention(&q, &k, &v, d)?;
            Ok(HeadEncoding {
                layer,
                head,
                keys: k,
                values: v,
                attention,
                last_output: out.row(tokens.len() - 1).to_vec(),
            })
        })
        .collect()
}

pub fn annotate<M: Model + ?Sized>(model: &M, tokens: &[u32]) -> Vec<TokenAnnotation> {
    tokens
        .iter()
        .enumerate()
        .map(|(position, &token_id)| TokenAnnotation {
            position,
            token_id,
            class: model.token_class(position, token_id),
        })
        .collect()
}

/// Profiling inputs for every head: its prompt attention map and a context
/// scored by the map's column sums.
pub fn head_inputs(encodings: &[HeadEncoding], annotations: &[TokenAnnotation]) -> Result<Vec<HeadInput>> {
    encodings
        .iter()
        .map(|e| {
            Ok(HeadInput {
                layer: e.layer,
                head: e.head,
                ctx: PolicyContext::new(annotations.to_vec(), annotations.len(), e.attention.column_sums())?,
                attention: e.attention.clone(),
            })
        })
        .collect()
}

/// Result of prompt encoding: the frozen per-head policies, the compressed
/// cache, and the logits for the first generated token.
#[derive(Debug, Clone)]
pub struct PromptEncoding {
    pub profile: HeadProfile,
    pub cache: CompressedCache,
    pub logits: Vec<f64>,
}

fn build_cache<M: Model + ?Sized>(
    model: &M,
    encodings: Vec<HeadEncoding>,
    inputs: &[HeadInput],
    profile: HeadProfile,
    annotations: Vec<TokenAnnotation>,
) -> Result<PromptEncoding> {
    let config = *model.config();
    let mut outputs = Vec::with_capacity(config.total_heads() * config.head_dim);
    let mut heads = Vec::with_capacity(encodings.len());
    for (e, input) in encodings.into_iter().zip(inputs) {
        outputs.extend_from_slice(&e.last_output);
        let choice = profile
            .get(e.layer, e.head)
            .ok_or(Error::MissingHead { layer: e.layer, head: e.head })?;
        let retained = retained_indices(&choice.policy, &input.ctx);
        let scores = input.ctx.cumulative_scores();
        let mut cache = HeadCache {
            layer: e.layer,
            head: e.head,
            policy: choice.policy.clone(),
            positions: (0..annotations.len()).collect(),
            keys: e.keys,
            values: e.values,
            sidecar: choice.policy.contains(Atom::Frequent).then(|| scores.to_vec()),
        };
        cache.keep(&retained)?;
        heads.push(cache);
    }
    let cache = CompressedCache {
        config,
        prompt_len: annotations.len(),
        annotations,
        heads,
    };
    cache.validate()?;
    Ok(PromptEncoding {
        profile,
        cache,
        logits: model.logits(&outputs),
    })
}

/// Encodes the prompt, profiles every head and compresses its cache with
/// the selected policy.
pub fn encode_prompt<M: Model + ?Sized>(model: &M, prompt: &[u32], cfg: &ProfilerConfig) -> Result<PromptEncoding> {
    let encodings = encode_heads(model, prompt)?;
    let annotations = annotate(model, prompt);
    let inputs = head_inputs(&encodings, &annotations)?;
    let c = model.config();
    let profile = profile_model(c.num_layers, c.num_heads, &inputs, cfg)?;
    build_cache(model, encodings, &inputs, profile, annotations)
}

/// Encodes the prompt and imposes `policy` on every head without profiling.
pub fn encode_prompt_fixed<M: Model + ?Sized>(
    model: &M,
    prompt: &[u32],
    policy: &CompressionPolicy,
) -> Result<PromptEncoding> {
    let encodings = encode_heads(model, prompt)?;
    let annotations = annotate(model, prompt);
    let inputs = head_inputs(&encodings, &annotations)?;
    let choices = inputs
        .iter()
        .map(|x| {
            Ok(HeadChoice {
                layer: x.layer,
                head: x.head,
                policy: policy.clone(),
                recovery: policy_recovery(&x.attention, policy, &x.ctx, RowScope::Causal)?,
                cost_tokens: cache_memory_cost(policy, &x.ctx),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let c = model.config();
    let profile = HeadProfile::new(c.num_layers, c.num_heads, choices)?;
    build_cache(model, encodings, &inputs, profile, annotations)
}

/// Uncompressed keys kept beside the cache to measure per-step recovery.
#[derive(Debug, Clone)]
pub struct ShadowKeys {
    keys: Vec<DenseMatrix>,
}

impl ShadowKeys {
    pub fn from_encodings(encodings: &[HeadEncoding]) -> Self {
        Self {
            keys: encodings.iter().map(|e| e.keys.clone()).collect(),
        }
    }
}

/// What one decoding step did, per head.
#[derive(Debug, Clone, PartialEq)]
pub struct DecodeOutput {
    pub logits: Vec<f64>,
    /// Positions each head attended over (retained plus the new one).
    pub attended: Vec<Vec<usize>>,
    /// The renormalized attention row of each head over `attended`.
    pub rows: Vec<Vec<f64>>,
    /// Mean over heads of the full-attention mass on `attended`.
    pub recovery: Option<f64>,
}

/// Feeds `last_token` at the next position: appends its K/V row to every
/// head, attends over the retained rows plus the new one, updates the score
/// sidecar, re-applies each head's frozen policy and evicts what it drops.
pub fn decode_step<M: Model + ?Sized>(
    model: &M,
    cache: &mut CompressedCache,
    last_token: u32,
    shadow: Option<&mut ShadowKeys>,
) -> Result<DecodeOutput> {
    if cache.config != *model.config() {
        return Err(Error::CacheMismatch("cache was built for a different model".into()));
    }
    cache.validate()?;
    if let Some(s) = &shadow {
        if s.keys.len() != cache.heads.len() {
            return Err(Error::CacheMismatch("shadow keys do not match the cache".into()));
        }
    }
    let pos = cache.context_len();
    let class = model.token_class(pos, last_token);
    cache.annotations.push(TokenAnnotation {
        position: pos,
        token_id: last_token,
        class,
    });
    let classes: Vec<TokenClass> = cache.annotations.iter().map(|a| a.class).collect();
    let prompt_len = cache.prompt_len;
    let d = cache.config.head_dim;

    let mut shadow_keys: Vec<Option<&mut DenseMatrix>> = match shadow {
        Some(s) => s.keys.iter_mut().map(Some).collect(),
        None => cache.heads.iter().map(|_| None).collect(),
    };
    let per_head = cache
        .heads
        .par_iter_mut()
        .zip(shadow_keys.par_iter_mut())
        .map(|(h, full_keys)| {
            let proj = model.project(h.layer, h.head, pos, last_token)?;
            h.keys.push_row(&proj.k)?;
            h.values.push_row(&proj.v)?;
            h.positions.push(pos);
            let (row, out) = attend(&proj.q, &h.keys, &h.values, d)?;
            let attended = h.positions.clone();

            let recovery = match full_keys {
                Some(k) => {
                    k.push_row(&proj.k)?;
                    Some(retained_mass(&proj.q, k, &attended, d))
                }
                None => None,
            };

            if let Some(s) = &mut h.sidecar {
                s.push(0.0);
                for (acc, w) in s.iter_mut().zip(&row) {
                    *acc += w;
                }
            }
            let mut scores = vec![0.0; pos + 1];
            if let Some(s) = &h.sidecar {
                for (&p, &v) in h.positions.iter().zip(s) {
                    scores[p] = v;
                }
            }
            let available = RetainedSet::new(h.positions.clone());
            let local = ratio_budget(h.policy.params().r_l, prompt_len);
            let retained = retained_raw(&h.policy, &classes, &scores, local, Some(&available));
            h.keep(&retained)?;
            Ok((out, attended, row, recovery))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut outputs = Vec::with_capacity(per_head.len() * d);
    let mut attended = Vec::with_capacity(per_head.len());
    let mut rows = Vec::with_capacity(per_head.len());
    let mut recoveries = Vec::new();
    for (out, att, row, rec) in per_head {
        outputs.extend(out);
        attended.push(att);
        rows.push(row);
        recoveries.extend(rec);
    }
    let recovery = (!recoveries.is_empty()).then(|| recoveries.iter().sum::<f64>() / recoveries.len() as f64);
    Ok(DecodeOutput {
        logits: model.logits(&outputs),
        attended,
        rows,
        recovery,
    })
}

/// Full-attention mass of query `q` over all `keys` that falls on `positions`.
fn retained_mass(q: &[f64], keys: &DenseMatrix, positions: &[usize], d: usize) -> f64 {
    let scale = (d as f64).sqrt();
    let logits: Vec<f64> = keys.row_iter().map(|k| dot(q, k) / scale).collect();
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = w.iter().sum();
    positions.iter().map(|&p| w[p]).sum::<f64>() / total
}

/// `decode_step` followed by choosing the next token: the model's forced
/// token if it dictates one, otherwise a sample from the logits.
pub fn generate_step<M: Model + ?Sized>(
    model: &M,
    cache: &mut CompressedCache,
    last_token: u32,
    sampler: &mut Sampler,
    shadow: Option<&mut ShadowKeys>,
) -> Result<(u32, DecodeOutput)> {
    let out = decode_step(model, cache, last_token, shadow)?;
    let next = match model.forced_token(cache.context_len()) {
        Some(t) => t,
        None => sampler.sample(&out.logits)?,
    };
    Ok((next, out))
}

/// Diagnostics for one generated token.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    /// 1-based index of the generated token.
    pub step: usize,
    /// Positions in the context when the token was chosen.
    pub context_len: usize,
    /// Retained positions per head (layer-major) after eviction.
    pub retained: Vec<usize>,
    pub total_tokens: usize,
    pub token: u32,
    /// Mean full-attention mass covered by the caches; absent for the token
    /// chosen from prompt encoding.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub recovery: Option<f64>,
}

pub fn write_steps_ndjson<W: Write>(steps: &[StepRecord], mut w: W) -> Result<()> {
    for s in steps {
        serde_json::to_writer(&mut w, s)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_steps_ndjson<R: std::io::BufRead>(r: R) -> Result<Vec<StepRecord>> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct Generation {
    pub prompt: Vec<u32>,
    /// Newly generated tokens.
    pub tokens: Vec<u32>,
    pub profile: HeadProfile,
    pub steps: Vec<StepRecord>,
    pub cache: CompressedCache,
}

impl Generation {
    pub fn mean_recovery(&self) -> Option<f64> {
        let r: Vec<f64> = self.steps.iter().filter_map(|s| s.recovery).collect();
        (!r.is_empty()).then(|| r.iter().sum::<f64>() / r.len() as f64)
    }
}

fn run<M: Model + ?Sized>(
    model: &M,
    prompt: &[u32],
    gen: &GenerationConfig,
    encode: impl FnOnce() -> Result<PromptEncoding>,
) -> Result<Generation> {
    let mut sampler = Sampler::new(gen.sampling)?;
    let PromptEncoding {
        profile,
        mut cache,
        logits,
    } = encode()?;
    let mut shadow = if gen.track_recovery && gen.max_new_tokens > 1 {
        Some(ShadowKeys::from_encodings(&encode_heads(model, prompt)?))
    } else {
        None
    };
    let mut tokens = Vec::with_capacity(gen.max_new_tokens);
    let mut steps = Vec::with_capacity(gen.max_new_tokens);
    if gen.max_new_tokens > 0 {
        let first = match model.forced_token(prompt.len()) {
            Some(t) => t,
            None => sampler.sample(&logits)?,
        };
        steps.push(StepRecord {
            step: 1,
            context_len: cache.context_len(),
            retained: cache.retained_counts(),
            total_tokens: cache.total_tokens(),
            token: first,
            recovery: None,
        });
        tokens.push(first);
    }
    for step in 2..=gen.max_new_tokens {
        let last = *tokens.last().expect("one token per earlier step");
        let (next, out) = generate_step(model, &mut cache, last, &mut sampler, shadow.as_mut())?;
        log::debug!("step {step}: token {next}, cache {} tokens", cache.total_tokens());
        steps.push(StepRecord {
            step,
            context_len: cache.context_len(),
            retained: cache.retained_counts(),
            total_tokens: cache.total_tokens(),
            token: next,
            recovery: out.recovery,
        });
        tokens.push(next);
    }
    Ok(Generation {
        prompt: prompt.to_vec(),
        tokens,
        profile,
        steps,
        cache,
    })
}

/// Adaptive generation: profile once on the prompt, then decode
/// `max_new_tokens` tokens with the frozen per-head policies.
pub fn generate<M: Model + ?Sized>(
    model: &M,
    prompt: &[u32],
    profiler: &ProfilerConfig,
    gen: &GenerationConfig,
) -> Result<Generation> {
    run(model, prompt, gen, || encode_prompt(model, prompt, profiler))
}

/// Non-adaptive baseline: the same policy on every head.
pub fn generate_fixed_baseline<M: Model + ?Sized>(
    model: &M,
    prompt: &[u32],
    policy: &CompressionPolicy,
    gen: &GenerationConfig,
) -> Result<Generation> {
    run(model, prompt, gen, || encode_prompt_fixed(model, prompt, policy))
}
