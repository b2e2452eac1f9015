//! One-shot per-head profiling: recovery of attention mass under a candidate
//! policy, selection of the cheapest policy meeting the recovery threshold,
//! and the cosine-similarity alternate selector.

use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attention::AttentionMap;
use crate::error::{Error, Result};
use crate::policy::{
    cache_memory_cost, feasible_set, ratio_budget, retained_indices, retained_raw,
    CompressionPolicy, FeasibleSpec, PolicyContext, PolicyParams, RetainedSet,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Criterion {
    /// Cheapest policy whose recovered attention mass reaches the threshold.
    #[default]
    RecoveryMass,
    /// Policy whose masked attention map is most cosine-similar to the original.
    CosineSimilarity,
}

impl FromStr for Criterion {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "recovery" | "mass" => Ok(Criterion::RecoveryMass),
            "cosine" | "similarity" => Ok(Criterion::CosineSimilarity),
            other => Err(Error::InvalidParameter(format!("unknown criterion `{other}`"))),
        }
    }
}

impl fmt::Display for Criterion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Criterion::RecoveryMass => "recovery",
            Criterion::CosineSimilarity => "cosine",
        })
    }
}

/// Which retained set each query row of the profiled map is measured against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum RowScope {
    /// Every row, each against the policy as it stands at that row: Local
    /// relative to the row's own position, Frequent over the column sums of
    /// rows up to and including it.
    #[default]
    Causal,
    /// Every row against the single retained set of the whole context.
    FixedSet,
    /// Only the last row, against the retained set of the whole context.
    LastRow,
}

impl FromStr for RowScope {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "causal" | "all" => Ok(RowScope::Causal),
            "fixed" => Ok(RowScope::FixedSet),
            "last" => Ok(RowScope::LastRow),
            other => Err(Error::InvalidParameter(format!("unknown row scope `{other}`"))),
        }
    }
}

impl fmt::Display for RowScope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RowScope::Causal => "causal",
            RowScope::FixedSet => "fixed",
            RowScope::LastRow => "last",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfilerConfig {
    threshold: f64,
    feasible: Vec<CompressionPolicy>,
    criterion: Criterion,
    scope: RowScope,
}

impl ProfilerConfig {
    pub fn new(
        threshold: f64,
        feasible: Vec<CompressionPolicy>,
        criterion: Criterion,
        scope: RowScope,
    ) -> Result<Self> {
        if !(0.0..=1.0).contains(&threshold) {
            return Err(Error::InvalidParameter(format!("threshold {threshold} not in [0, 1]")));
        }
        match feasible.last() {
            None => return Err(Error::InvalidParameter("feasible set is empty".into())),
            Some(p) if !p.is_full() => {
                return Err(Error::InvalidParameter(
                    "feasible set must end with the full cache".into(),
                ))
            }
            _ => {}
        }
        Ok(Self {
            threshold,
            feasible,
            criterion,
            scope,
        })
    }

    /// Default nested family, recovery criterion, causal rows.
    pub fn with_threshold(threshold: f64, params: PolicyParams) -> Result<Self> {
        Self::new(
            threshold,
            feasible_set(params, &FeasibleSpec::default()),
            Criterion::RecoveryMass,
            RowScope::Causal,
        )
    }

    pub fn threshold(&self) -> f64 {
        self.threshold
    }

    pub fn feasible(&self) -> &[CompressionPolicy] {
        &self.feasible
    }

    pub fn criterion(&self) -> Criterion {
        self.criterion
    }

    pub fn scope(&self) -> RowScope {
        self.scope
    }

    pub fn with_threshold_value(mut self, threshold: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&threshold) {
            return Err(Error::InvalidParameter(format!("threshold {threshold} not in [0, 1]")));
        }
        self.threshold = threshold;
        Ok(self)
    }
}

/// Mean over query rows of the attention mass falling on `retained`.
pub fn recovery_ratio(a: &AttentionMap, retained: &RetainedSet) -> f64 {
    let n = a.len();
    let total: f64 = (0..n)
        .map(|i| retained.iter().take_while(|&j| j <= i).map(|j| a.get(i, j)).sum::<f64>())
        .sum();
    total / n as f64
}

/// Total-variation distance between `p` and `p` renormalized over `retained`
/// (zero elsewhere). A retained set with no mass is at distance 1.
pub fn tv_distance_row(p: &[f64], retained: &RetainedSet) -> f64 {
    let mass: f64 = retained.iter().filter(|&j| j < p.len()).map(|j| p[j]).sum();
    if mass <= 0.0 {
        return 1.0;
    }
    let half_l1: f64 = p
        .iter()
        .enumerate()
        .map(|(j, &pj)| {
            let compressed = if retained.contains(j) { pj / mass } else { 0.0 };
            (pj - compressed).abs()
        })
        .sum();
    0.5 * half_l1
}

/// `(row, retained set)` pairs a policy is evaluated on.
pub fn row_masks(
    a: &AttentionMap,
    policy: &CompressionPolicy,
    ctx: &PolicyContext,
    scope: RowScope,
) -> Result<Vec<(usize, RetainedSet)>> {
    let n = a.len();
    if ctx.current_len() != n {
        return Err(Error::mismatch("policy context", format!("{n} positions"), ctx.current_len()));
    }
    Ok(match scope {
        RowScope::FixedSet => {
            let r = retained_indices(policy, ctx);
            (0..n).map(|i| (i, r.clone())).collect()
        }
        RowScope::LastRow => vec![(n - 1, retained_indices(policy, ctx))],
        RowScope::Causal => {
            let classes = ctx.classes();
            let local = ratio_budget(policy.params().r_l, ctx.prompt_len());
            let mut prefix = vec![0.0; n];
            (0..n)
                .map(|i| {
                    for (s, v) in prefix.iter_mut().zip(a.row(i)) {
                        *s += v;
                    }
                    let r = retained_raw(policy, &classes[..=i], &prefix[..=i], local, None);
                    (i, r)
                })
                .collect()
        }
    })
}

fn masked_mass(a: &AttentionMap, masks: &[(usize, RetainedSet)]) -> f64 {
    let total: f64 = masks
        .iter()
        .map(|(i, r)| r.iter().filter(|&j| j <= *i).map(|j| a.get(*i, j)).sum::<f64>())
        .sum();
    total / masks.len() as f64
}

/// Recovered attention mass of `policy` on `a` under the given row scope.
/// The full cache recovers exactly 1.
pub fn policy_recovery(
    a: &AttentionMap,
    policy: &CompressionPolicy,
    ctx: &PolicyContext,
    scope: RowScope,
) -> Result<f64> {
    if policy.is_full() {
        return Ok(1.0);
    }
    Ok(masked_mass(a, &row_masks(a, policy, ctx, scope)?))
}

/// Cosine similarity between the rows of `a` named in `masks` and the same
/// rows with every entry outside the row's retained set zeroed.
pub fn masked_cosine(a: &AttentionMap, masks: &[(usize, RetainedSet)]) -> f64 {
    let (mut full, mut kept) = (0.0, 0.0);
    for (i, r) in masks {
        for (j, &v) in a.row(*i).iter().enumerate() {
            full += v * v;
            if r.contains(j) {
                kept += v * v;
            }
        }
    }
    if kept == 0.0 {
        return 0.0;
    }
    // <A, M> = |M|² since M agrees with A wherever it is nonzero.
    (kept / full).sqrt()
}

pub fn policy_similarity(
    a: &AttentionMap,
    policy: &CompressionPolicy,
    ctx: &PolicyContext,
    scope: RowScope,
) -> Result<f64> {
    if policy.is_full() {
        return Ok(1.0);
    }
    Ok(masked_cosine(a, &row_masks(a, policy, ctx, scope)?))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    pub policy: CompressionPolicy,
    pub recovery: f64,
    pub cost_tokens: usize,
}

/// Cheapest feasible policy meeting the recovery threshold.
///
/// The feasible family is nested, so costs are nondecreasing along it and the
/// first policy that reaches the threshold is the constrained argmin. The
/// trailing full cache always qualifies.
pub fn select_policy(a: &AttentionMap, ctx: &PolicyContext, cfg: &ProfilerConfig) -> Result<Selection> {
    for policy in cfg.feasible() {
        let recovery = policy_recovery(a, policy, ctx, cfg.scope())?;
        if recovery >= cfg.threshold() {
            return Ok(Selection {
                policy: policy.clone(),
                recovery,
                cost_tokens: cache_memory_cost(policy, ctx),
            });
        }
    }
    unreachable!("feasible set ends with the full cache")
}

/// Argmax of masked-map cosine similarity; ties go to the earlier scheme.
pub fn select_policy_by_similarity(
    a: &AttentionMap,
    schemes: &[CompressionPolicy],
    ctx: &PolicyContext,
    scope: RowScope,
) -> Result<(CompressionPolicy, f64)> {
    let mut best: Option<(&CompressionPolicy, f64)> = None;
    for policy in schemes {
        let sim = policy_similarity(a, policy, ctx, scope)?;
        if best.map_or(true, |(_, b)| sim > b) {
            best = Some((policy, sim));
        }
    }
    best.map(|(p, s)| (p.clone(), s))
        .ok_or_else(|| Error::InvalidParameter("no schemes to choose from".into()))
}

fn select(a: &AttentionMap, ctx: &PolicyContext, cfg: &ProfilerConfig) -> Result<Selection> {
    match cfg.criterion() {
        Criterion::RecoveryMass => select_policy(a, ctx, cfg),
        Criterion::CosineSimilarity => {
            let (policy, _) = select_policy_by_similarity(a, cfg.feasible(), ctx, cfg.scope())?;
            Ok(Selection {
                recovery: policy_recovery(a, &policy, ctx, cfg.scope())?,
                cost_tokens: cache_memory_cost(&policy, ctx),
                policy,
            })
        }
    }
}

/// Prompt-encoding data for one head.
#[derive(Debug, Clone)]
pub struct HeadInput {
    pub layer: usize,
    pub head: usize,
    pub attention: AttentionMap,
    pub ctx: PolicyContext,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadChoice {
    pub layer: usize,
    pub head: usize,
    pub policy: CompressionPolicy,
    pub recovery: f64,
    pub cost_tokens: usize,
}

/// The policy chosen for every head, sorted by `(layer, head)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadProfile {
    num_layers: usize,
    num_heads: usize,
    choices: Vec<HeadChoice>,
}

impl HeadProfile {
    pub fn new(num_layers: usize, num_heads: usize, mut choices: Vec<HeadChoice>) -> Result<Self> {
        choices.sort_by_key(|c| (c.layer, c.head));
        for w in choices.windows(2) {
            if (w[0].layer, w[0].head) == (w[1].layer, w[1].head) {
                return Err(Error::InvalidParameter(format!(
                    "layer {} head {} profiled twice",
                    w[0].layer, w[0].head
                )));
            }
        }
        for l in 0..num_layers {
            for h in 0..num_heads {
                if choices
                    .binary_search_by_key(&(l, h), |c| (c.layer, c.head))
                    .is_err()
                {
                    return Err(Error::MissingHead { layer: l, head: h });
                }
            }
        }
        if choices.len() != num_layers * num_heads {
            let extra = choices
                .iter()
                .find(|c| c.layer >= num_layers || c.head >= num_heads)
                .expect("extra entries lie outside the grid");
            return Err(Error::InvalidParameter(format!(
                "layer {} head {} outside {num_layers}x{num_heads} model",
                extra.layer, extra.head
            )));
        }
        Ok(Self {
            num_layers,
            num_heads,
            choices,
        })
    }

    pub fn num_layers(&self) -> usize {
        self.num_layers
    }

    pub fn num_heads(&self) -> usize {
        self.num_heads
    }

    pub fn choices(&self) -> &[HeadChoice] {
        &self.choices
    }

    pub fn get(&self, layer: usize, head: usize) -> Option<&HeadChoice> {
        self.choices.get(layer * self.num_heads + head)
    }

    pub fn policies(&self) -> impl Iterator<Item = &CompressionPolicy> {
        self.choices.iter().map(|c| &c.policy)
    }

    pub fn mean_recovery(&self) -> f64 {
        self.choices.iter().map(|c| c.recovery).sum::<f64>() / self.choices.len() as f64
    }

    pub fn total_cost(&self) -> usize {
        self.choices.iter().map(|c| c.cost_tokens).sum()
    }

    pub const CSV_HEADER: &'static str = "layer,head,policy,recovery,cost_tokens";

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "{}", Self::CSV_HEADER)?;
        for c in &self.choices {
            writeln!(w, "{},{},{},{},{}", c.layer, c.head, c.policy, c.recovery, c.cost_tokens)?;
        }
        Ok(())
    }

    pub fn read_csv<R: BufRead>(r: R) -> Result<Self> {
        let mut choices = Vec::new();
        let mut lines = r.lines();
        match lines.next().transpose()? {
            Some(h) if h.trim() == Self::CSV_HEADER => {}
            _ => {
                return Err(Error::Parse {
                    line: 1,
                    message: format!("expected header `{}`", Self::CSV_HEADER),
                })
            }
        }
        for (i, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let bad = |m: String| Error::Parse { line: i + 2, message: m };
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 5 {
                return Err(bad(format!("expected 5 fields, found {}", f.len())));
            }
            choices.push(HeadChoice {
                layer: f[0].parse().map_err(|_| bad(format!("bad layer `{}`", f[0])))?,
                head: f[1].parse().map_err(|_| bad(format!("bad head `{}`", f[1])))?,
                policy: f[2].parse().map_err(|e: Error| bad(e.to_string()))?,
                recovery: f[3].parse().map_err(|_| bad(format!("bad recovery `{}`", f[3])))?,
                cost_tokens: f[4].parse().map_err(|_| bad(format!("bad cost `{}`", f[4])))?,
            });
        }
        let layers = choices.iter().map(|c| c.layer + 1).max().unwrap_or(0);
        let heads = choices.iter().map(|c| c.head + 1).max().unwrap_or(0);
        Self::new(layers, heads, choices)
    }
}

/// Profiles every head independently and assembles the result in
/// `(layer, head)` order.
pub fn profile_model(
    num_layers: usize,
    num_heads: usize,
    inputs: &[HeadInput],
    cfg: &ProfilerConfig,
) -> Result<HeadProfile> {
    for l in 0..num_layers {
        for h in 0..num_heads {
            if !inputs.iter().any(|x| x.layer == l && x.head == h) {
                return Err(Error::MissingHead { layer: l, head: h });
            }
        }
    }
    let choices = inputs
        .par_iter()
        .map(|x| {
            let s = select(&x.attention, &x.ctx, cfg)?;
            Ok(HeadChoice {
                layer: x.layer,
                head: x.head,
                policy: s.policy,
                recovery: s.recovery,
                cost_tokens: s.cost_tokens,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    HeadProfile::new(num_layers, num_heads, choices)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokens::{TokenAnnotation, TokenClass};

    fn ann(classes: &[TokenClass]) -> Vec<TokenAnnotation> {
        classes
            .iter()
            .enumerate()
            .map(|(position, &class)| TokenAnnotation {
                position,
                token_id: 0,
                class,
            })
            .collect()
    }

    fn ctx_for(a: &AttentionMap, classes: &[TokenClass]) -> PolicyContext {
        PolicyContext::new(ann(classes), a.len(), a.column_sums()).unwrap()
    }

    #[test]
    fn recovery_examples() {
        let a = AttentionMap::uniform_causal(4).unwrap();
        assert_eq!(recovery_ratio(&a, &RetainedSet::all(4)), 1.0);
        assert_eq!(recovery_ratio(&a, &RetainedSet::empty()), 0.0);
        let r = recovery_ratio(&a, &RetainedSet::new(vec![0]));
        let expect = (1.0 + 0.5 + 1.0 / 3.0 + 0.25) / 4.0;
        assert!((r - expect).abs() < 1e-15);
        assert!((r - 0.5208).abs() < 1e-4);
    }

    #[test]
    fn tv_examples() {
        let p = [0.6, 0.3, 0.1];
        let d = tv_distance_row(&p, &RetainedSet::new(vec![0, 1]));
        // renormalized [2/3, 1/3, 0]: ½(|0.6-2/3| + |0.3-1/3| + 0.1) = 0.1
        assert!((d - 0.1).abs() < 1e-15);
        assert!(tv_distance_row(&p, &RetainedSet::all(3)).abs() < 1e-15);
        assert_eq!(tv_distance_row(&p, &RetainedSet::empty()), 1.0);
    }

    #[test]
    fn selection_examples() {
        let params = PolicyParams::default();
        // all mass on column 0, position 0 special
        let a = AttentionMap::from_rows(&[[1.0, 0.0, 0.0], [1.0, 0.0, 0.0], [1.0, 0.0, 0.0]]).unwrap();
        let ctx = ctx_for(&a, &[TokenClass::Special, TokenClass::Other, TokenClass::Other]);
        let cfg = ProfilerConfig::with_threshold(0.99, params).unwrap();
        let s = select_policy(&a, &ctx, &cfg).unwrap();
        assert_eq!(s.policy.to_string(), "special");
        assert_eq!(s.recovery, 1.0);
        assert_eq!(s.cost_tokens, 1);

        // T = 0 always takes the first policy
        let u = AttentionMap::uniform_causal(10).unwrap();
        let mut classes = vec![TokenClass::Other; 10];
        classes[0] = TokenClass::Special;
        let ctx = ctx_for(&u, &classes);
        let cfg0 = ProfilerConfig::with_threshold(0.0, params).unwrap();
        assert_eq!(select_policy(&u, &ctx, &cfg0).unwrap().policy.to_string(), "special");

        // Diffuse uniform head, T = 0.95: no partial policy suffices under any scope
        for scope in [RowScope::Causal, RowScope::FixedSet, RowScope::LastRow] {
            let cfg = ProfilerConfig::new(
                0.95,
                feasible_set(params, &FeasibleSpec::default()),
                Criterion::RecoveryMass,
                scope,
            )
            .unwrap();
            let s = select_policy(&u, &ctx, &cfg).unwrap();
            assert!(s.policy.is_full(), "{scope}: {}", s.policy);
            assert_eq!(s.cost_tokens, 10);
        }
    }

    #[test]
    fn cosine_examples() {
        let a = AttentionMap::from_rows(&[[1.0, 0.0], [0.5, 0.5]]).unwrap();
        let masks = vec![(0, RetainedSet::new(vec![0])), (1, RetainedSet::new(vec![0]))];
        let c = masked_cosine(&a, &masks);
        assert!((c - 1.25 / (1.5f64.sqrt() * 1.25f64.sqrt())).abs() < 1e-15);
        assert!((c - 0.9129).abs() < 1e-4);
        let all = vec![(0, RetainedSet::all(2)), (1, RetainedSet::all(2))];
        assert!((masked_cosine(&a, &all) - 1.0).abs() < 1e-15);

        let ctx = ctx_for(&a, &[TokenClass::Special, TokenClass::Other]);
        let schemes = vec!["special".parse().unwrap(), CompressionPolicy::full()];
        let (p, s) = select_policy_by_similarity(&a, &schemes, &ctx, RowScope::FixedSet).unwrap();
        assert!(p.is_full());
        assert_eq!(s, 1.0);

        // all mass on the special column: special ties full and wins by order
        let a = AttentionMap::from_rows(&[[1.0, 0.0], [1.0, 0.0]]).unwrap();
        let (p, s) = select_policy_by_similarity(&a, &schemes, &ctx, RowScope::FixedSet).unwrap();
        assert_eq!(p.to_string(), "special");
        assert!((s - 1.0).abs() < 1e-15);
    }

    #[test]
    fn threshold_one_forces_full() {
        let a = AttentionMap::from_rows(&[[1.0, 0.0], [0.9, 0.1]]).unwrap();
        let ctx = ctx_for(&a, &[TokenClass::Special, TokenClass::Punctuation]);
        let cfg = ProfilerConfig::with_threshold(1.0, PolicyParams::new(0.3, 0.3).unwrap()).unwrap();
        // special+punct covers everything and recovers 1.0 exactly
        assert_eq!(select_policy(&a, &ctx, &cfg).unwrap().policy.to_string(), "special+punct");
        let ctx = ctx_for(&a, &[TokenClass::Special, TokenClass::Other]);
        let cfg = ProfilerConfig::new(
            1.0,
            feasible_set(PolicyParams::default(), &FeasibleSpec::dropping(crate::policy::Atom::Local).unwrap()),
            Criterion::RecoveryMass,
            RowScope::Causal,
        )
        .unwrap();
        assert!(select_policy(&a, &ctx, &cfg).unwrap().policy.is_full());
    }

    #[test]
    fn config_validation() {
        let p = PolicyParams::default();
        assert!(ProfilerConfig::with_threshold(1.5, p).is_err());
        assert!(ProfilerConfig::new(0.5, vec![], Criterion::RecoveryMass, RowScope::Causal).is_err());
        assert!(ProfilerConfig::new(
            0.5,
            vec!["special".parse().unwrap()],
            Criterion::RecoveryMass,
            RowScope::Causal
        )
        .is_err());
    }

    #[test]
    fn missing_head_named() {
        let a = AttentionMap::uniform_causal(2).unwrap();
        let ctx = ctx_for(&a, &[TokenClass::Special, TokenClass::Other]);
        let input = HeadInput { layer: 0, head: 0, attention: a, ctx };
        let cfg = ProfilerConfig::with_threshold(0.9, PolicyParams::default()).unwrap();
        let err = profile_model(1, 2, &[input], &cfg).unwrap_err();
        assert!(matches!(err, Error::MissingHead { layer: 0, head: 1 }));
    }

    #[test]
    fn csv_round_trip() {
        let a = AttentionMap::uniform_causal(3).unwrap();
        let ctx = ctx_for(&a, &[TokenClass::Special, TokenClass::Other, TokenClass::Other]);
        let inputs: Vec<_> = (0..2)
            .flat_map(|l| (0..2).map(move |h| (l, h)))
            .map(|(l, h)| HeadInput { layer: l, head: h, attention: a.clone(), ctx: ctx.clone() })
            .collect();
        let cfg = ProfilerConfig::with_threshold(0.6, PolicyParams::default()).unwrap();
        let prof = profile_model(2, 2, &inputs, &cfg).unwrap();
        let mut buf = Vec::new();
        prof.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert_eq!(text.lines().count(), 5);
        assert!(text.starts_with(HeadProfile::CSV_HEADER));
        let back = HeadProfile::read_csv(&buf[..]).unwrap();
        assert_eq!(back, prof);
    }
}
