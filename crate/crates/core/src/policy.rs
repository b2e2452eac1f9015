//! Eviction policies: the four atomic rules, the full cache, hybrid unions,
//! retained-index computation and cache application.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::DenseMatrix;
use crate::tokens::{TokenAnnotation, TokenClass};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Atom {
    Special,
    Punct,
    Frequent,
    Local,
    Full,
}

impl Atom {
    pub fn name(self) -> &'static str {
        match self {
            Atom::Special => "special",
            Atom::Punct => "punct",
            Atom::Frequent => "frequent",
            Atom::Local => "local",
            Atom::Full => "full",
        }
    }
}

impl FromStr for Atom {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "special" => Ok(Atom::Special),
            "punct" | "punct." | "punctuation" => Ok(Atom::Punct),
            "frequent" | "frequency" => Ok(Atom::Frequent),
            "local" | "locality" => Ok(Atom::Local),
            "full" => Ok(Atom::Full),
            other => Err(Error::PolicySyntax(format!("unknown policy atom `{other}`"))),
        }
    }
}

/// Budget ratios for the Local (`r_l`) and Frequent (`r_f`) atoms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PolicyParams {
    pub r_l: f64,
    pub r_f: f64,
}

impl Default for PolicyParams {
    fn default() -> Self {
        Self { r_l: 0.3, r_f: 0.3 }
    }
}

impl PolicyParams {
    pub fn new(r_l: f64, r_f: f64) -> Result<Self> {
        let p = Self { r_l, r_f };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, r) in [("r_l", self.r_l), ("r_f", self.r_f)] {
            if !(r > 0.0 && r <= 1.0) {
                return Err(Error::InvalidParameter(format!("{name}={r} not in (0, 1]")));
            }
        }
        Ok(())
    }
}

/// `⌈ratio · n⌉`, at least one for `n > 0`, at most `n`.
///
/// Products within 1e-9 above an integer count as that integer, so that
/// `0.3 · 10` yields 3 despite binary rounding.
pub fn ratio_budget(ratio: f64, n: usize) -> usize {
    if n == 0 {
        return 0;
    }
    let b = (ratio * n as f64 - 1e-9).ceil();
    (b.max(1.0) as usize).min(n)
}

/// An atomic eviction rule or a union of atomic rules.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompressionPolicy {
    atoms: BTreeSet<Atom>,
    params: PolicyParams,
}

impl CompressionPolicy {
    pub fn new(atoms: impl IntoIterator<Item = Atom>, params: PolicyParams) -> Result<Self> {
        let atoms: BTreeSet<Atom> = atoms.into_iter().collect();
        if atoms.is_empty() {
            return Err(Error::PolicySyntax("policy needs at least one atom".into()));
        }
        if atoms.contains(&Atom::Full) && atoms.len() > 1 {
            return Err(Error::PolicySyntax("`full` cannot be combined with other atoms".into()));
        }
        params.validate()?;
        Ok(Self { atoms, params })
    }

    pub fn full() -> Self {
        Self {
            atoms: BTreeSet::from([Atom::Full]),
            params: PolicyParams::default(),
        }
    }

    pub fn atomic(atom: Atom, params: PolicyParams) -> Self {
        Self {
            atoms: BTreeSet::from([atom]),
            params,
        }
    }

    pub fn atoms(&self) -> impl Iterator<Item = Atom> + '_ {
        self.atoms.iter().copied()
    }

    pub fn contains(&self, atom: Atom) -> bool {
        self.atoms.contains(&atom)
    }

    pub fn is_full(&self) -> bool {
        self.contains(Atom::Full)
    }

    pub fn params(&self) -> PolicyParams {
        self.params
    }

    /// Hybrid union. `full` absorbs everything; ratios of `self` win for atoms
    /// both sides carry.
    pub fn union(&self, other: &CompressionPolicy) -> CompressionPolicy {
        if self.is_full() || other.is_full() {
            return CompressionPolicy::full();
        }
        let mut params = self.params;
        if !self.contains(Atom::Local) && other.contains(Atom::Local) {
            params.r_l = other.params.r_l;
        }
        if !self.contains(Atom::Frequent) && other.contains(Atom::Frequent) {
            params.r_f = other.params.r_f;
        }
        CompressionPolicy {
            atoms: self.atoms.union(&other.atoms).copied().collect(),
            params,
        }
    }

    /// Parses the canonical grammar; bare `local`/`frequent` take `defaults`.
    pub fn parse_with(s: &str, defaults: PolicyParams) -> Result<Self> {
        let mut atoms = Vec::new();
        let mut params = defaults;
        for part in s.split('+') {
            let part = part.trim();
            let (name, arg) = match part.split_once('(') {
                Some((name, rest)) => {
                    let arg = rest.strip_suffix(')').ok_or_else(|| {
                        Error::PolicySyntax(format!("unclosed parameter list in `{part}`"))
                    })?;
                    (name, Some(arg))
                }
                None => (part, None),
            };
            let atom: Atom = name.parse()?;
            if let Some(arg) = arg {
                let (k, v) = arg.split_once('=').ok_or_else(|| {
                    Error::PolicySyntax(format!("expected `key=value` in `{part}`"))
                })?;
                let v: f64 = v.trim().parse().map_err(|_| {
                    Error::PolicySyntax(format!("bad ratio `{}` in `{part}`", v.trim()))
                })?;
                match (atom, k.trim()) {
                    (Atom::Local, "r_l") => params.r_l = v,
                    (Atom::Frequent, "r_f") => params.r_f = v,
                    _ => {
                        return Err(Error::PolicySyntax(format!(
                            "parameter `{}` does not apply to `{}`",
                            k.trim(),
                            atom.name()
                        )))
                    }
                }
            }
            atoms.push(atom);
        }
        Self::new(atoms, params)
    }
}

impl fmt::Display for CompressionPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut first = true;
        for atom in &self.atoms {
            if !first {
                f.write_str("+")?;
            }
            first = false;
            match atom {
                Atom::Frequent => write!(f, "frequent(r_f={})", self.params.r_f)?,
                Atom::Local => write!(f, "local(r_l={})", self.params.r_l)?,
                other => f.write_str(other.name())?,
            }
        }
        Ok(())
    }
}

impl FromStr for CompressionPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::parse_with(s, PolicyParams::default())
    }
}

/// Sorted, deduplicated token positions kept in a compressed cache.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RetainedSet(Vec<usize>);

impl RetainedSet {
    pub fn new(mut indices: Vec<usize>) -> Self {
        indices.sort_unstable();
        indices.dedup();
        Self(indices)
    }

    pub fn all(n: usize) -> Self {
        Self((0..n).collect())
    }

    pub fn empty() -> Self {
        Self(Vec::new())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn contains(&self, i: usize) -> bool {
        self.0.binary_search(&i).is_ok()
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }

    pub fn iter(&self) -> impl Iterator<Item = usize> + '_ {
        self.0.iter().copied()
    }

    pub fn last(&self) -> Option<usize> {
        self.0.last().copied()
    }

    pub fn union(&self, other: &RetainedSet) -> RetainedSet {
        let mut v = Vec::with_capacity(self.len() + other.len());
        let (mut a, mut b) = (self.0.iter().peekable(), other.0.iter().peekable());
        loop {
            match (a.peek(), b.peek()) {
                (Some(&&x), Some(&&y)) => {
                    if x <= y {
                        a.next();
                    }
                    if y <= x {
                        b.next();
                    }
                    v.push(x.min(y));
                }
                (Some(&&x), None) => {
                    v.push(x);
                    a.next();
                }
                (None, Some(&&y)) => {
                    v.push(y);
                    b.next();
                }
                (None, None) => break,
            }
        }
        RetainedSet(v)
    }

    pub fn is_subset(&self, other: &RetainedSet) -> bool {
        self.0.iter().all(|&i| other.contains(i))
    }
}

impl FromIterator<usize> for RetainedSet {
    fn from_iter<T: IntoIterator<Item = usize>>(iter: T) -> Self {
        Self::new(iter.into_iter().collect())
    }
}

/// Everything a policy looks at to decide which positions to keep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyContext {
    annotations: Vec<TokenAnnotation>,
    prompt_len: usize,
    cumulative_scores: Vec<f64>,
    /// Positions whose rows still exist; `None` means every position.
    available: Option<RetainedSet>,
}

impl PolicyContext {
    /// `current_len` is the number of annotations; `cumulative_scores` must
    /// hold one nonnegative score per position.
    pub fn new(
        annotations: Vec<TokenAnnotation>,
        prompt_len: usize,
        cumulative_scores: Vec<f64>,
    ) -> Result<Self> {
        let current_len = annotations.len();
        if prompt_len == 0 || current_len < prompt_len {
            return Err(Error::InvalidParameter(format!(
                "need current_len ({current_len}) >= prompt_len ({prompt_len}) >= 1"
            )));
        }
        if cumulative_scores.len() != current_len {
            return Err(Error::mismatch("cumulative scores", current_len, cumulative_scores.len()));
        }
        if cumulative_scores.iter().any(|s| !(s.is_finite() && *s >= 0.0)) {
            return Err(Error::InvalidParameter(
                "cumulative scores must be finite and >= 0".into(),
            ));
        }
        Ok(Self {
            annotations,
            prompt_len,
            cumulative_scores,
            available: None,
        })
    }

    /// A context with all-zero scores.
    pub fn unscored(annotations: Vec<TokenAnnotation>, prompt_len: usize) -> Result<Self> {
        let n = annotations.len();
        Self::new(annotations, prompt_len, vec![0.0; n])
    }

    /// Restricts every policy to positions in `available` (the rows a cache
    /// still holds). Evicted positions can never come back.
    pub fn with_available(mut self, available: RetainedSet) -> Result<Self> {
        if let Some(last) = available.last() {
            if last >= self.current_len() {
                return Err(Error::IndexOutOfRange {
                    index: last,
                    len: self.current_len(),
                });
            }
        }
        self.available = Some(available);
        Ok(self)
    }

    pub fn annotations(&self) -> &[TokenAnnotation] {
        &self.annotations
    }

    pub fn prompt_len(&self) -> usize {
        self.prompt_len
    }

    pub fn current_len(&self) -> usize {
        self.annotations.len()
    }

    pub fn cumulative_scores(&self) -> &[f64] {
        &self.cumulative_scores
    }

    pub fn available(&self) -> Option<&RetainedSet> {
        self.available.as_ref()
    }

    pub fn classes(&self) -> Vec<TokenClass> {
        self.annotations.iter().map(|a| a.class).collect()
    }
}

/// Positions a policy keeps, evaluated on raw pieces of a context.
///
/// `classes` and `scores` cover positions `0..len`; `local_budget` is the
/// absolute Local window.
pub(crate) fn retained_raw(
    policy: &CompressionPolicy,
    classes: &[TokenClass],
    scores: &[f64],
    local_budget: usize,
    available: Option<&RetainedSet>,
) -> RetainedSet {
    let len = classes.len();
    debug_assert_eq!(scores.len(), len);
    let avail = |i: usize| available.map_or(true, |a| a.contains(i));
    let mut keep = vec![false; len];
    for atom in policy.atoms() {
        match atom {
            Atom::Full => keep.fill(true),
            Atom::Special | Atom::Punct => {
                let class = if atom == Atom::Special {
                    TokenClass::Special
                } else {
                    TokenClass::Punctuation
                };
                for (k, c) in keep.iter_mut().zip(classes) {
                    *k |= *c == class;
                }
            }
            Atom::Local => {
                let start = len - local_budget.min(len);
                keep[start..].fill(true);
            }
            Atom::Frequent => {
                let budget = ratio_budget(policy.params.r_f, len);
                let mut candidates: Vec<usize> = (0..len).filter(|&i| avail(i)).collect();
                candidates.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
                for &i in candidates.iter().take(budget) {
                    keep[i] = true;
                }
            }
        }
    }
    RetainedSet(
        keep.iter()
            .enumerate()
            .filter(|&(i, &k)| k && avail(i))
            .map(|(i, _)| i)
            .collect(),
    )
}

/// The positions `policy` keeps under `ctx`.
///
/// Local keeps the last `⌈r_l · prompt_len⌉` positions; Frequent keeps the
/// `⌈r_f · current_len⌉` highest cumulative scores, ties toward the lower
/// position; hybrids take the union.
pub fn retained_indices(policy: &CompressionPolicy, ctx: &PolicyContext) -> RetainedSet {
    retained_raw(
        policy,
        &ctx.classes(),
        &ctx.cumulative_scores,
        ratio_budget(policy.params.r_l, ctx.prompt_len),
        ctx.available.as_ref(),
    )
}

pub fn cache_memory_cost(policy: &CompressionPolicy, ctx: &PolicyContext) -> usize {
    retained_indices(policy, ctx).len()
}

/// Compressed key/value rows with the original position of each row.
#[derive(Debug, Clone, PartialEq)]
pub struct CompressedKv {
    pub positions: Vec<usize>,
    pub keys: DenseMatrix,
    pub values: DenseMatrix,
}

pub fn apply_policy(k: &DenseMatrix, v: &DenseMatrix, retained: &RetainedSet) -> Result<CompressedKv> {
    if k.rows() != v.rows() {
        return Err(Error::mismatch("V", format!("{} rows", k.rows()), v.rows()));
    }
    Ok(CompressedKv {
        positions: retained.as_slice().to_vec(),
        keys: k.select_rows(retained.as_slice())?,
        values: v.select_rows(retained.as_slice())?,
    })
}

/// Credits one decoding-step attention row to the positions it covered and
/// appends a zero score slot for `next_token`.
///
/// `row[i]` is the score of `retained`'s `i`-th position. Positions outside
/// `retained` keep their scores unchanged.
pub fn update_cumulative_scores(
    ctx: &PolicyContext,
    row: &[f64],
    retained: &RetainedSet,
    next_token: TokenAnnotation,
) -> Result<PolicyContext> {
    if row.len() != retained.len() {
        return Err(Error::mismatch("attention row", retained.len(), row.len()));
    }
    if let Some(last) = retained.last() {
        if last >= ctx.current_len() {
            return Err(Error::IndexOutOfRange {
                index: last,
                len: ctx.current_len(),
            });
        }
    }
    if row.iter().any(|s| !(s.is_finite() && *s >= 0.0)) {
        return Err(Error::InvalidParameter("attention row must be finite and >= 0".into()));
    }
    let mut next = ctx.clone();
    for (pos, s) in retained.iter().zip(row) {
        next.cumulative_scores[pos] += s;
    }
    next.annotations.push(TokenAnnotation {
        position: ctx.current_len(),
        ..next_token
    });
    next.cumulative_scores.push(0.0);
    if let Some(avail) = &next.available {
        next.available = Some(avail.union(&RetainedSet(vec![ctx.current_len()])));
    }
    Ok(next)
}

/// Order in which atoms are appended after one another to build the nested
/// feasible family; the family always ends with the full cache.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeasibleSpec {
    order: Vec<Atom>,
}

impl Default for FeasibleSpec {
    fn default() -> Self {
        Self {
            order: vec![Atom::Special, Atom::Punct, Atom::Frequent, Atom::Local],
        }
    }
}

impl FeasibleSpec {
    pub fn with_order(order: Vec<Atom>) -> Result<Self> {
        if order.is_empty() {
            return Err(Error::InvalidParameter("feasible order is empty".into()));
        }
        let distinct: BTreeSet<_> = order.iter().collect();
        if distinct.len() != order.len() || order.contains(&Atom::Full) {
            return Err(Error::InvalidParameter(
                "feasible order must list distinct non-full atoms".into(),
            ));
        }
        Ok(Self { order })
    }

    /// The default order with `atom` removed from every combination.
    pub fn dropping(atom: Atom) -> Result<Self> {
        let order = Self::default().order.into_iter().filter(|&a| a != atom).collect();
        Self::with_order(order)
    }

    pub fn order(&self) -> &[Atom] {
        &self.order
    }
}

impl fmt::Display for FeasibleSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if *self == Self::default() {
            return f.write_str("default");
        }
        let names: Vec<_> = self.order.iter().map(|a| a.name()).collect();
        write!(f, "order:{}", names.join(","))
    }
}

impl FromStr for FeasibleSpec {
    type Err = Error;

    /// `default`, `drop:<atom>` or `order:<atom>,<atom>,...`.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s == "default" {
            return Ok(Self::default());
        }
        if let Some(atom) = s.strip_prefix("drop:") {
            return Self::dropping(atom.parse()?);
        }
        if let Some(list) = s.strip_prefix("order:") {
            let order = list.split(',').map(str::parse).collect::<Result<Vec<Atom>>>()?;
            return Self::with_order(order);
        }
        Err(Error::InvalidParameter(format!(
            "feasible set `{s}`: expected default, drop:<atom> or order:<atoms>"
        )))
    }
}

/// The nested family: cumulative unions of `spec`'s atoms, then the full cache.
pub fn feasible_set(params: PolicyParams, spec: &FeasibleSpec) -> Vec<CompressionPolicy> {
    let mut out = Vec::with_capacity(spec.order.len() + 1);
    for n in 1..=spec.order.len() {
        out.push(CompressionPolicy {
            atoms: spec.order[..n].iter().copied().collect(),
            params,
        });
    }
    out.push(CompressionPolicy::full());
    out
}
