//! Memory accounting and analysis reports over profiles and generation runs.

use std::collections::BTreeMap;
use std::io::Write;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::engine::{
    annotate, encode_heads, generate, generate_fixed_baseline, head_inputs, GenerationConfig,
    Generation, StepRecord,
};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::policy::{feasible_set, CompressionPolicy, FeasibleSpec, PolicyParams};
use crate::profiler::{profile_model, HeadProfile, ProfilerConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemoryModel {
    pub num_layers: u64,
    pub num_heads: u64,
    pub head_dim: u64,
    pub batch_size: u64,
    pub seq_len: u64,
    pub bytes_per_scalar: u64,
}

impl MemoryModel {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("num_layers", self.num_layers),
            ("num_heads", self.num_heads),
            ("head_dim", self.head_dim),
            ("batch_size", self.batch_size),
            ("seq_len", self.seq_len),
            ("bytes_per_scalar", self.bytes_per_scalar),
        ] {
            if v == 0 {
                return Err(Error::InvalidParameter(format!("{name} must be >= 1")));
            }
        }
        Ok(())
    }

    /// Llama-family shapes at batch 16, sequence 512, fp16.
    pub fn llama(shape: &str) -> Result<Self> {
        let (num_layers, num_heads) = match shape.to_ascii_lowercase().as_str() {
            "7b" => (32, 32),
            "13b" => (40, 40),
            "30b" | "33b" => (60, 52),
            "65b" => (80, 64),
            other => return Err(Error::InvalidParameter(format!("unknown model shape `{other}`"))),
        };
        Ok(Self {
            num_layers,
            num_heads,
            head_dim: 128,
            batch_size: 16,
            seq_len: 512,
            bytes_per_scalar: 2,
        })
    }
}

/// Bytes for keys and values of every layer, batch row and position.
pub fn full_cache_bytes(m: &MemoryModel) -> u64 {
    2 * m.num_layers * m.batch_size * m.seq_len * (m.num_heads * m.head_dim) * m.bytes_per_scalar
}

/// Size of the cumulative-score sidecar relative to the cache it annotates:
/// one score per cached position instead of `head_dim` values.
pub fn sidecar_overhead_fraction(m: &MemoryModel) -> f64 {
    1.0 / m.head_dim as f64
}

pub fn pruned_ratio(full_tokens: usize, retained_tokens: usize) -> Result<f64> {
    if full_tokens == 0 {
        return Err(Error::InvalidParameter("full token count must be > 0".into()));
    }
    if retained_tokens > full_tokens {
        return Err(Error::InvalidParameter(format!(
            "retained {retained_tokens} exceeds full {full_tokens}"
        )));
    }
    Ok(1.0 - retained_tokens as f64 / full_tokens as f64)
}

/// Aggregates of a generation run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub steps: usize,
    /// Mean over steps of the pruned ratio, every head weighted equally.
    pub pruned_ratio: f64,
    /// Mean over decode steps of the covered full-attention mass.
    pub mean_recovery: Option<f64>,
    pub mean_cache_tokens: f64,
    pub mean_full_tokens: f64,
}

/// Summary computed from each step's reported cache total.
pub fn summarize(steps: &[StepRecord], total_heads: usize) -> Result<RunSummary> {
    summarize_with(steps, total_heads, |s| s.total_tokens)
}

/// The same summary recounted from the per-head retained counts.
pub fn recount(steps: &[StepRecord], total_heads: usize) -> Result<RunSummary> {
    for s in steps {
        if s.retained.len() != total_heads {
            return Err(Error::mismatch("step record", format!("{total_heads} heads"), s.retained.len()));
        }
    }
    summarize_with(steps, total_heads, |s| s.retained.iter().sum())
}

fn summarize_with(
    steps: &[StepRecord],
    total_heads: usize,
    cached: impl Fn(&StepRecord) -> usize,
) -> Result<RunSummary> {
    if steps.is_empty() {
        return Err(Error::EmptyInput);
    }
    let n = steps.len() as f64;
    let mut pruned = 0.0;
    let (mut cache, mut full) = (0usize, 0usize);
    for s in steps {
        let f = total_heads * s.context_len;
        let c = cached(s);
        pruned += pruned_ratio(f, c)?;
        cache += c;
        full += f;
    }
    let rec: Vec<f64> = steps.iter().filter_map(|s| s.recovery).collect();
    Ok(RunSummary {
        steps: steps.len(),
        pruned_ratio: pruned / n,
        mean_recovery: (!rec.is_empty()).then(|| rec.iter().sum::<f64>() / rec.len() as f64),
        mean_cache_tokens: cache as f64 / n,
        mean_full_tokens: full as f64 / n,
    })
}

pub fn summarize_generation(g: &Generation) -> Result<RunSummary> {
    summarize(&g.steps, g.cache.config().total_heads())
}

/// Share of heads per chosen policy, for one layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerDistribution {
    pub layer: usize,
    pub fractions: BTreeMap<String, f64>,
}

pub fn layer_distribution_report(profile: &HeadProfile) -> Vec<LayerDistribution> {
    (0..profile.num_layers())
        .map(|layer| {
            let mut counts: BTreeMap<String, usize> = BTreeMap::new();
            for c in profile.choices().iter().filter(|c| c.layer == layer) {
                *counts.entry(c.policy.to_string()).or_default() += 1;
            }
            let h = profile.num_heads() as f64;
            LayerDistribution {
                layer,
                fractions: counts.into_iter().map(|(p, c)| (p, c as f64 / h)).collect(),
            }
        })
        .collect()
}

/// Per-head policies re-selected at several decoding steps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadStability {
    pub layer: usize,
    pub head: usize,
    pub policies: Vec<String>,
    pub stable: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyReport {
    pub steps: Vec<usize>,
    pub heads: Vec<HeadStability>,
    /// Per listed step, the fraction of heads whose policy matches step 1.
    pub stable_fraction: Vec<f64>,
}

impl ConsistencyReport {
    pub fn all_stable(&self) -> bool {
        self.heads.iter().all(|h| h.stable)
    }
}

/// Re-profiles at each listed decoding step. Step `s` treats the first
/// `prompt_len + s - 1` tokens of `tokens` as the prompt; step 1 is the
/// original prompt.
pub fn consistency_report<M: Model + ?Sized>(
    model: &M,
    tokens: &[u32],
    prompt_len: usize,
    steps: &[usize],
    cfg: &ProfilerConfig,
) -> Result<ConsistencyReport> {
    if steps.first() != Some(&1) {
        return Err(Error::InvalidParameter("steps must start at 1".into()));
    }
    if steps.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidParameter("steps must be strictly increasing".into()));
    }
    if prompt_len == 0 {
        return Err(Error::EmptyInput);
    }
    let last = *steps.last().expect("nonempty");
    if prompt_len + last - 1 > tokens.len() {
        return Err(Error::InvalidParameter(format!(
            "step {last} is beyond the generation length {}",
            tokens.len().saturating_sub(prompt_len) + 1
        )));
    }
    let c = model.config();
    let profiles = steps
        .iter()
        .map(|&s| {
            let prefix = &tokens[..prompt_len + s - 1];
            let inputs = head_inputs(&encode_heads(model, prefix)?, &annotate(model, prefix))?;
            profile_model(c.num_layers, c.num_heads, &inputs, cfg)
        })
        .collect::<Result<Vec<_>>>()?;
    let heads: Vec<HeadStability> = profiles[0]
        .choices()
        .iter()
        .enumerate()
        .map(|(i, first)| {
            let policies: Vec<String> = profiles.iter().map(|p| p.choices()[i].policy.to_string()).collect();
            HeadStability {
                layer: first.layer,
                head: first.head,
                stable: policies.iter().all(|p| *p == policies[0]),
                policies,
            }
        })
        .collect();
    let stable_fraction = (0..steps.len())
        .map(|k| heads.iter().filter(|h| h.policies[k] == h.policies[0]).count() as f64 / heads.len() as f64)
        .collect();
    Ok(ConsistencyReport {
        steps: steps.to_vec(),
        heads,
        stable_fraction,
    })
}

/// Greedy full-cache continuation of `prompt` by `extra` tokens, prompt
/// included.
pub fn greedy_continuation<M: Model + ?Sized>(model: &M, prompt: &[u32], extra: usize) -> Result<Vec<u32>> {
    let gen = GenerationConfig {
        track_recovery: false,
        ..GenerationConfig::greedy(extra)
    };
    let g = generate_fixed_baseline(model, prompt, &CompressionPolicy::full(), &gen)?;
    Ok(prompt.iter().chain(&g.tokens).copied().collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TradeoffPoint {
    pub threshold: f64,
    pub pruned_ratio: f64,
    pub mean_recovery: f64,
}

/// Profiling-time pruned ratio and recovery for each recovery threshold;
/// every other profiler setting comes from `base`.
pub fn tradeoff_curve<M: Model + ?Sized>(
    model: &M,
    prompt: &[u32],
    thresholds: &[f64],
    base: &ProfilerConfig,
) -> Result<Vec<TradeoffPoint>> {
    let inputs = head_inputs(&encode_heads(model, prompt)?, &annotate(model, prompt))?;
    let c = model.config();
    let full = c.total_heads() * prompt.len();
    thresholds
        .iter()
        .map(|&t| {
            let cfg = base.clone().with_threshold_value(t)?;
            let profile = profile_model(c.num_layers, c.num_heads, &inputs, &cfg)?;
            Ok(TradeoffPoint {
                threshold: t,
                pruned_ratio: pruned_ratio(full, profile.total_cost())?,
                mean_recovery: profile.mean_recovery(),
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub method: String,
    pub pruned_ratio: f64,
    pub mean_recovery: Option<f64>,
}

/// Adaptive generation against fixed policies imposed on every head.
pub fn compare_adaptive_vs_fixed<M: Model + ?Sized>(
    model: &M,
    prompt: &[u32],
    cfg: &ProfilerConfig,
    fixed: &[CompressionPolicy],
    gen: &GenerationConfig,
) -> Result<Vec<ComparisonRow>> {
    let mut rows = vec![row("adaptive".into(), &generate(model, prompt, cfg, gen)?)?];
    for p in fixed {
        rows.push(row(format!("fixed:{p}"), &generate_fixed_baseline(model, prompt, p, gen)?)?);
    }
    Ok(rows)
}

/// Adaptive generation under alternative feasible families at one threshold.
pub fn compare_feasible_variants<M: Model + ?Sized>(
    model: &M,
    prompt: &[u32],
    base: &ProfilerConfig,
    params: PolicyParams,
    variants: &[FeasibleSpec],
    gen: &GenerationConfig,
) -> Result<Vec<ComparisonRow>> {
    variants
        .iter()
        .map(|v| {
            let cfg = ProfilerConfig::new(base.threshold(), feasible_set(params, v), base.criterion(), base.scope())?;
            row(format!("adaptive:{v}"), &generate(model, prompt, &cfg, gen)?)
        })
        .collect()
}

fn row(method: String, g: &Generation) -> Result<ComparisonRow> {
    let s = summarize_generation(g)?;
    Ok(ComparisonRow {
        method,
        pruned_ratio: s.pruned_ratio,
        mean_recovery: s.mean_recovery,
    })
}

/// Atom combinations whose ratios are tuned when searching fixed baselines.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FixedFamily {
    Local,
    Frequent,
    LocalFrequent,
    SpecialPunctLocal,
    SpecialPunctFrequent,
    SpecialPunctLocalFrequent,
}

impl FixedFamily {
    pub const ALL: [FixedFamily; 6] = [
        FixedFamily::Local,
        FixedFamily::Frequent,
        FixedFamily::LocalFrequent,
        FixedFamily::SpecialPunctLocal,
        FixedFamily::SpecialPunctFrequent,
        FixedFamily::SpecialPunctLocalFrequent,
    ];

    fn spec(self) -> &'static str {
        match self {
            FixedFamily::Local => "local",
            FixedFamily::Frequent => "frequent",
            FixedFamily::LocalFrequent => "local+frequent",
            FixedFamily::SpecialPunctLocal => "special+punct+local",
            FixedFamily::SpecialPunctFrequent => "special+punct+frequent",
            FixedFamily::SpecialPunctLocalFrequent => "special+punct+local+frequent",
        }
    }

    /// Every member of the family over `grid`, both ratios varied
    /// independently when the family uses both.
    pub fn candidates(self, grid: &[f64]) -> Result<Vec<CompressionPolicy>> {
        let s = self.spec();
        let (uses_l, uses_f) = (s.contains("local"), s.contains("frequent"));
        let mut out = Vec::new();
        for &rl in if uses_l { grid } else { &[0.3][..] } {
            for &rf in if uses_f { grid } else { &[0.3][..] } {
                out.push(CompressionPolicy::parse_with(s, PolicyParams::new(rl, rf)?)?);
            }
        }
        Ok(out)
    }
}

impl FromStr for FixedFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        FixedFamily::ALL
            .into_iter()
            .find(|f| f.spec() == s.trim())
            .ok_or_else(|| Error::InvalidParameter(format!("unknown fixed family `{s}`")))
    }
}

/// The member of `family` with the highest pruned ratio among those whose
/// mean per-step recovery reaches `floor`; `None` when none does.
pub fn tune_fixed<M: Model + ?Sized>(
    model: &M,
    prompt: &[u32],
    family: FixedFamily,
    grid: &[f64],
    floor: f64,
    gen: &GenerationConfig,
) -> Result<Option<(CompressionPolicy, RunSummary)>> {
    let gen = GenerationConfig {
        track_recovery: true,
        ..*gen
    };
    let mut best: Option<(CompressionPolicy, RunSummary)> = None;
    for p in family.candidates(grid)? {
        let s = summarize_generation(&generate_fixed_baseline(model, prompt, &p, &gen)?)?;
        if s.mean_recovery.is_some_and(|r| r >= floor)
            && best.as_ref().map_or(true, |(_, b)| s.pruned_ratio > b.pruned_ratio)
        {
            best = Some((p, s));
        }
    }
    Ok(best)
}

/// A header row plus string cells, rendered as CSV or a JSON array of
/// objects.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub header: Vec<&'static str>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "{}", self.header.join(","))?;
        for r in &self.rows {
            let cells: Vec<String> = r.iter().map(|c| csv_cell(c)).collect();
            writeln!(w, "{}", cells.join(","))?;
        }
        Ok(())
    }

    pub fn to_json(&self) -> serde_json::Value {
        let rows = self
            .rows
            .iter()
            .map(|r| {
                let obj = self
                    .header
                    .iter()
                    .zip(r)
                    .map(|(h, cell)| {
                        let v = match (cell.parse::<i64>(), cell.parse::<f64>()) {
                            (Ok(i), _) => serde_json::json!(i),
                            (_, Ok(x)) if x.is_finite() => serde_json::json!(x),
                            _ if cell.is_empty() => serde_json::Value::Null,
                            _ => serde_json::Value::String(cell.clone()),
                        };
                        (h.to_string(), v)
                    })
                    .collect();
                serde_json::Value::Object(obj)
            })
            .collect();
        serde_json::Value::Array(rows)
    }
}

fn csv_cell(c: &str) -> String {
    if c.contains([',', '"', '\n']) {
        format!("\"{}\"", c.replace('"', "\"\""))
    } else {
        c.to_string()
    }
}

fn opt(x: Option<f64>) -> String {
    x.map(|v| v.to_string()).unwrap_or_default()
}

pub fn distribution_table(d: &[LayerDistribution]) -> Table {
    Table {
        header: vec!["layer", "policy", "fraction"],
        rows: d
            .iter()
            .flat_map(|l| {
                l.fractions
                    .iter()
                    .map(move |(p, f)| vec![l.layer.to_string(), p.clone(), f.to_string()])
            })
            .collect(),
    }
}

pub fn consistency_table(r: &ConsistencyReport) -> Table {
    Table {
        header: vec!["layer", "head", "step", "policy", "matches_first"],
        rows: r
            .heads
            .iter()
            .flat_map(|h| {
                r.steps.iter().zip(&h.policies).map(move |(s, p)| {
                    vec![
                        h.layer.to_string(),
                        h.head.to_string(),
                        s.to_string(),
                        p.clone(),
                        (*p == h.policies[0]).to_string(),
                    ]
                })
            })
            .collect(),
    }
}

pub fn tradeoff_table(points: &[TradeoffPoint]) -> Table {
    Table {
        header: vec!["threshold", "pruned_ratio", "mean_recovery"],
        rows: points
            .iter()
            .map(|p| vec![p.threshold.to_string(), p.pruned_ratio.to_string(), p.mean_recovery.to_string()])
            .collect(),
    }
}

pub fn comparison_table(rows: &[ComparisonRow]) -> Table {
    Table {
        header: vec!["method", "pruned_ratio", "mean_recovery"],
        rows: rows
            .iter()
            .map(|r| vec![r.method.clone(), r.pruned_ratio.to_string(), opt(r.mean_recovery)])
            .collect(),
    }
}

pub fn summary_table(s: &RunSummary) -> Table {
    Table {
        header: vec!["steps", "pruned_ratio", "mean_recovery", "mean_cache_tokens", "mean_full_tokens"],
        rows: vec![vec![
            s.steps.to_string(),
            s.pruned_ratio.to_string(),
            opt(s.mean_recovery),
            s.mean_cache_tokens.to_string(),
            s.mean_full_tokens.to_string(),
        ]],
    }
}

pub fn memory_table(m: &MemoryModel) -> Table {
    Table {
        header: vec![
            "num_layers",
            "num_heads",
            "head_dim",
            "batch_size",
            "seq_len",
            "bytes_per_scalar",
            "full_cache_bytes",
            "sidecar_overhead_fraction",
        ],
        rows: vec![vec![
            m.num_layers.to_string(),
            m.num_heads.to_string(),
            m.head_dim.to_string(),
            m.batch_size.to_string(),
            m.seq_len.to_string(),
            m.bytes_per_scalar.to_string(),
            full_cache_bytes(m).to_string(),
            sidecar_overhead_fraction(m).to_string(),
        ]],
    }
}
