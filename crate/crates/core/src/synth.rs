//! Deterministic synthetic models whose heads carry planted attention structure.
//!
//! Every key row carries the same feature layout:
//!
//! | dim  | feature                              |
//! |------|--------------------------------------|
//! | 0    | token is special                     |
//! | 1    | token is punctuation                 |
//! | 2    | position is in the head's column set |
//! | 3..6 | `1`, `j`, `j²` (position polynomial) |
//! | 6..  | bounded pseudo-random noise          |
//!
//! A head's archetype only shapes its query rows. SpecialDominant and
//! ColumnSparse queries put a position-dependent logit boost on their target
//! feature, large enough that the target mass of every row is at least the
//! configured dominance whatever the noise does. LocalDominant queries produce
//! `-α (i - j)²`, with `α` chosen so the mass beyond the local window is at most
//! `1 - dominance`. Diffuse queries carry only noise.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig, Projection};
use crate::tokens::{TokenClass, VocabMetadata};

const FEATURES: usize = 6;
const MIN_NOISE_DIMS: usize = 2;
/// Smallest head dimension a synthetic head can be built with.
pub const MIN_SYNTH_HEAD_DIM: usize = FEATURES + MIN_NOISE_DIMS;
/// Smallest vocabulary: three special ids, four punctuation ids, one word.
pub const MIN_SYNTH_VOCAB: usize = 8;

pub const BOS_ID: u32 = 0;
pub const INST_ID: u32 = 1;
pub const INST_END_ID: u32 = 2;
pub const SPECIAL_IDS: [u32; 3] = [BOS_ID, INST_ID, INST_END_ID];
pub const PUNCT_IDS: [u32; 4] = [3, 4, 5, 6];
const FIRST_WORD_ID: u32 = 7;

const BOOST_MARGIN: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Archetype {
    SpecialDominant,
    LocalDominant,
    ColumnSparse,
    Diffuse,
}

impl fmt::Display for Archetype {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Archetype::SpecialDominant => "special",
            Archetype::LocalDominant => "local",
            Archetype::ColumnSparse => "column",
            Archetype::Diffuse => "diffuse",
        })
    }
}

impl FromStr for Archetype {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "special" | "specialdominant" | "special_dominant" => Ok(Archetype::SpecialDominant),
            "local" | "localdominant" | "local_dominant" => Ok(Archetype::LocalDominant),
            "column" | "columnsparse" | "column_sparse" => Ok(Archetype::ColumnSparse),
            "diffuse" => Ok(Archetype::Diffuse),
            other => Err(Error::InvalidParameter(format!("unknown archetype `{other}`"))),
        }
    }
}

/// Query rows at positions `>= at_position` follow `to` instead.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhaseSwitch {
    pub at_position: usize,
    pub to: Archetype,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadPlan {
    pub archetype: Archetype,
    pub switch: Option<PhaseSwitch>,
}

impl HeadPlan {
    pub fn stationary(archetype: Archetype) -> Self {
        Self {
            archetype,
            switch: None,
        }
    }

    pub fn archetype_at(&self, position: usize) -> Archetype {
        match self.switch {
            Some(s) if position >= s.at_position => s.to,
            _ => self.archetype,
        }
    }
}

impl fmt::Display for HeadPlan {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.archetype)?;
        if let Some(s) = self.switch {
            write!(f, ">{}@{}", s.to, s.at_position)?;
        }
        Ok(())
    }
}

impl FromStr for HeadPlan {
    type Err = Error;

    /// `special`, or `special>diffuse@78` for a phase switch at position 78.
    fn from_str(s: &str) -> Result<Self> {
        match s.split_once('>') {
            None => Ok(HeadPlan::stationary(s.parse()?)),
            Some((from, rest)) => {
                let (to, at) = rest.split_once('@').ok_or_else(|| {
                    Error::InvalidParameter(format!("phase switch `{s}` needs `@position`"))
                })?;
                let at_position = at.trim().parse().map_err(|_| {
                    Error::InvalidParameter(format!("bad switch position `{at}`"))
                })?;
                Ok(HeadPlan {
                    archetype: from.parse()?,
                    switch: Some(PhaseSwitch {
                        at_position,
                        to: to.parse()?,
                    }),
                })
            }
        }
    }
}

/// Per-head plan, layer-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchetypePlan {
    pub heads: Vec<HeadPlan>,
}

impl ArchetypePlan {
    pub fn uniform(config: &ModelConfig, archetype: Archetype) -> Self {
        Self {
            heads: vec![HeadPlan::stationary(archetype); config.total_heads()],
        }
    }

    /// Cycles through `archetypes` head by head, layer-major.
    pub fn cycle(config: &ModelConfig, archetypes: &[Archetype]) -> Self {
        Self {
            heads: (0..config.total_heads())
                .map(|i| HeadPlan::stationary(archetypes[i % archetypes.len()]))
                .collect(),
        }
    }

    pub fn head(&self, config: &ModelConfig, layer: usize, head: usize) -> HeadPlan {
        self.heads[layer * config.num_heads + head]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthOptions {
    /// Positions a LocalDominant head concentrates on (including itself).
    pub local_window: usize,
    /// ColumnSparse columns are drawn from `[0, column_span)`.
    pub column_span: usize,
    /// Size of each ColumnSparse column set, position 0 included.
    pub column_count: usize,
    /// Bound on the absolute noise logit.
    pub noise: f64,
}

impl Default for SynthOptions {
    fn default() -> Self {
        Self {
            local_window: 8,
            column_span: 16,
            column_count: 4,
            noise: 0.1,
        }
    }
}

/// Deterministic synthetic model; a pure function of its inputs.
#[derive(Debug, Clone)]
pub struct SynthModel {
    config: ModelConfig,
    plan: ArchetypePlan,
    dominance: f64,
    options: SynthOptions,
    local_alpha: f64,
    column_sets: Vec<BTreeSet<usize>>,
    lm_head: Vec<f64>,
    vocab: VocabMetadata,
}

pub fn synth_model(config: ModelConfig, plan: ArchetypePlan, dominance: f64) -> Result<SynthModel> {
    SynthModel::new(config, plan, dominance, SynthOptions::default())
}

impl SynthModel {
    pub fn new(
        config: ModelConfig,
        plan: ArchetypePlan,
        dominance: f64,
        options: SynthOptions,
    ) -> Result<Self> {
        config.validate()?;
        if !(dominance > 0.5 && dominance < 1.0) {
            return Err(Error::InvalidParameter(format!(
                "dominance {dominance} must lie in (0.5, 1.0)"
            )));
        }
        if config.head_dim < MIN_SYNTH_HEAD_DIM {
            return Err(Error::InvalidParameter(format!(
                "synthetic heads need head_dim >= {MIN_SYNTH_HEAD_DIM}, got {}",
                config.head_dim
            )));
        }
        if config.vocab_size < MIN_SYNTH_VOCAB {
            return Err(Error::InvalidParameter(format!(
                "synthetic vocabulary needs >= {MIN_SYNTH_VOCAB} ids, got {}",
                config.vocab_size
            )));
        }
        if plan.heads.len() != config.total_heads() {
            return Err(Error::mismatch(
                "archetype plan",
                format!("{} heads", config.total_heads()),
                plan.heads.len(),
            ));
        }
        if options.local_window == 0 || options.column_count == 0 || options.column_span == 0 {
            return Err(Error::InvalidParameter(
                "local_window, column_span and column_count must be >= 1".into(),
            ));
        }
        if !(options.noise >= 0.0 && options.noise.is_finite()) {
            return Err(Error::InvalidParameter("noise must be finite and >= 0".into()));
        }

        let local_alpha = solve_local_alpha(options.local_window, dominance, options.noise);

        let column_sets = config
            .head_ids()
            .map(|(l, h)| {
                let mut rng = ChaCha8Rng::seed_from_u64(mix(config.seed ^ 0xC01 ^ key(&[l as u64, h as u64])));
                let pool = options.column_span.saturating_sub(1);
                let take = (options.column_count - 1).min(pool);
                let mut set: BTreeSet<usize> = sample(&mut rng, pool, take).into_iter().map(|p| p + 1).collect();
                set.insert(0);
                set
            })
            .collect();

        let width = config.total_heads() * config.head_dim;
        let mut rng = ChaCha8Rng::seed_from_u64(mix(config.seed ^ 0x1A4E_AD));
        let lm_head = (0..config.vocab_size * width)
            .map(|_| rng.gen_range(-1.0..1.0))
            .collect();

        Ok(Self {
            config,
            plan,
            dominance,
            options,
            local_alpha,
            column_sets,
            lm_head,
            vocab: VocabMetadata::new(SPECIAL_IDS, PUNCT_IDS),
        })
    }

    pub fn plan(&self) -> &ArchetypePlan {
        &self.plan
    }

    pub fn dominance(&self) -> f64 {
        self.dominance
    }

    pub fn options(&self) -> &SynthOptions {
        &self.options
    }

    pub fn vocab(&self) -> &VocabMetadata {
        &self.vocab
    }

    pub fn local_alpha(&self) -> f64 {
        self.local_alpha
    }

    pub fn column_set(&self, layer: usize, head: usize) -> &BTreeSet<usize> {
        &self.column_sets[layer * self.config.num_heads + head]
    }

    /// The deterministic prompt of length `len`: `<s>` at 0, an instruction
    /// opener at 1 and closer at `len - 1`, punctuation at the eighths of the
    /// prompt, and seeded word ids elsewhere.
    pub fn prompt(&self, len: usize) -> Vec<u32> {
        let mut ids: Vec<u32> = (0..len)
            .map(|p| {
                let words = self.config.vocab_size as u64 - FIRST_WORD_ID as u64;
                FIRST_WORD_ID + (mix(key(&[self.config.seed, 0x9A09, p as u64])) % words) as u32
            })
            .collect();
        for k in 1..8 {
            let p = len * k / 8;
            if p > 0 && p < len {
                let pick = mix(key(&[self.config.seed, 0x9C7, p as u64])) % PUNCT_IDS.len() as u64;
                ids[p] = PUNCT_IDS[pick as usize];
            }
        }
        if len >= 3 {
            ids[1] = INST_ID;
            ids[len - 1] = INST_END_ID;
        }
        if len >= 1 {
            ids[0] = BOS_ID;
        }
        ids
    }

    fn boost(&self, position: usize) -> f64 {
        let d = self.dominance;
        (d / (1.0 - d) * position.max(1) as f64).ln() + 2.0 * self.options.noise + BOOST_MARGIN
    }
}

/// Smallest `α` (to bisection precision, then padded) such that the Gaussian
/// tail beyond `window` carries at most `1 - dominance` after noise.
fn solve_local_alpha(window: usize, dominance: f64, noise: f64) -> f64 {
    let w = window as f64;
    let budget = (1.0 - dominance) * (-2.0 * noise).exp();
    let tail = |a: f64| (-a * w * w).exp() / (1.0 - (-2.0 * a * w).exp());
    let (mut lo, mut hi) = (1e-9, 1.0);
    while tail(hi) > budget {
        hi *= 2.0;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if tail(mid) > budget {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    hi * 1.001
}

impl Model for SynthModel {
    fn config(&self) -> &ModelConfig {
        &self.config
    }

    fn token_class(&self, position: usize, token_id: u32) -> TokenClass {
        if position == 0 {
            TokenClass::Special
        } else {
            self.vocab.class_of(token_id)
        }
    }

    fn project(&self, layer: usize, head: usize, position: usize, token_id: u32) -> Result<Projection> {
        let c = &self.config;
        if layer >= c.num_layers || head >= c.num_heads {
            return Err(Error::MissingHead { layer, head });
        }
        let d = c.head_dim;
        let noise_dims = d - FEATURES;
        let j = position as f64;
        let class = self.token_class(position, token_id);
        let base = key(&[c.seed, layer as u64, head as u64, position as u64, token_id as u64]);

        let mut k = vec![0.0; d];
        k[0] = (class == TokenClass::Special) as u8 as f64;
        k[1] = (class == TokenClass::Punctuation) as u8 as f64;
        k[2] = self.column_set(layer, head).contains(&position) as u8 as f64;
        k[3] = 1.0;
        k[4] = j;
        k[5] = j * j;

        let mut q = vec![0.0; d];
        match self.plan.head(c, layer, head).archetype_at(position) {
            Archetype::SpecialDominant => q[0] = self.boost(position),
            Archetype::ColumnSparse => q[2] = self.boost(position),
            Archetype::LocalDominant => {
                let a = self.local_alpha;
                q[3] = -a * j * j;
                q[4] = 2.0 * a * j;
                q[5] = -a;
            }
            Archetype::Diffuse => {}
        }
        let q_noise = self.options.noise / noise_dims as f64;
        for m in 0..noise_dims {
            k[FEATURES + m] = unit(mix(base ^ key(&[0x4B, m as u64])));
            q[FEATURES + m] = q_noise * unit(mix(base ^ key(&[0x51, m as u64])));
        }
        let scale = (d as f64).sqrt();
        for x in &mut q {
            *x *= scale;
        }

        let v_base = key(&[c.seed, 0x56, layer as u64, head as u64, token_id as u64]);
        let v = (0..d).map(|m| unit(mix(v_base ^ m as u64))).collect();
        Ok(Projection { q, k, v })
    }

    fn logits(&self, attention_outputs: &[f64]) -> Vec<f64> {
        let width = attention_outputs.len();
        let mut logits: Vec<f64> = self
            .lm_head
            .chunks_exact(width.max(1))
            .map(|w| crate::matrix::dot(w, attention_outputs))
            .collect();
        for &s in &SPECIAL_IDS {
            if let Some(l) = logits.get_mut(s as usize) {
                *l = f64::NEG_INFINITY;
            }
        }
        logits
    }
}

/// SplitMix64 finalizer.
fn mix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

fn key(parts: &[u64]) -> u64 {
    parts.iter().fold(0x243F_6A88_85A3_08D3, |acc, &p| mix(acc ^ p))
}

/// Maps a hash to `[-1, 1)`.
fn unit(h: u64) -> f64 {
    (h >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::{causal_attention, AttentionMap};
    use crate::matrix::DenseMatrix;

    fn cfg(layers: usize, heads: usize) -> ModelConfig {
        ModelConfig {
            num_layers: layers,
            num_heads: heads,
            head_dim: 12,
            vocab_size: 48,
            seed: 11,
        }
    }

    fn full_map(m: &SynthModel, l: usize, h: usize, tokens: &[u32]) -> AttentionMap {
        let d = m.config().head_dim;
        let (mut q, mut k, mut v) = (
            DenseMatrix::with_cols(d),
            DenseMatrix::with_cols(d),
            DenseMatrix::with_cols(d),
        );
        for (p, &t) in tokens.iter().enumerate() {
            let pr = m.project(l, h, p, t).unwrap();
            q.push_row(&pr.q).unwrap();
            k.push_row(&pr.k).unwrap();
            v.push_row(&pr.v).unwrap();
        }
        causal_attention(&q, &k, &v, d).unwrap().0
    }

    #[test]
    fn dominance_range_checked() {
        let c = cfg(1, 1);
        let plan = ArchetypePlan::uniform(&c, Archetype::Diffuse);
        assert!(synth_model(c, plan.clone(), 0.5).is_err());
        assert!(synth_model(c, plan.clone(), 1.0).is_err());
        assert!(synth_model(c, plan, 0.9).is_ok());
    }

    #[test]
    fn small_heads_rejected() {
        let mut c = cfg(1, 1);
        c.head_dim = 4;
        assert!(synth_model(c, ArchetypePlan::uniform(&c, Archetype::Diffuse), 0.9).is_err());
    }

    #[test]
    fn planted_rows_meet_dominance() {
        let c = cfg(1, 3);
        let plan = ArchetypePlan {
            heads: vec![
                HeadPlan::stationary(Archetype::SpecialDominant),
                HeadPlan::stationary(Archetype::LocalDominant),
                HeadPlan::stationary(Archetype::ColumnSparse),
            ],
        };
        let m = synth_model(c, plan, 0.9).unwrap();
        let tokens = m.prompt(96);
        let n = tokens.len();
        let specials: Vec<usize> = (0..n)
            .filter(|&p| m.token_class(p, tokens[p]) == TokenClass::Special)
            .collect();
        let a = full_map(&m, 0, 0, &tokens);
        for i in 0..n {
            let mass: f64 = specials.iter().filter(|&&j| j <= i).map(|&j| a.get(i, j)).sum();
            assert!(mass >= 0.9, "special row {i}: {mass}");
        }
        let a = full_map(&m, 0, 1, &tokens);
        for i in 0..n {
            let lo = i.saturating_sub(7);
            let mass: f64 = (lo..=i).map(|j| a.get(i, j)).sum();
            assert!(mass >= 0.9, "local row {i}: {mass}");
        }
        let a = full_map(&m, 0, 2, &tokens);
        let set = m.column_set(0, 2).clone();
        assert!(set.contains(&0) && set.len() == 4);
        for i in 0..n {
            let mass: f64 = set.iter().filter(|&&j| j <= i).map(|&j| a.get(i, j)).sum();
            assert!(mass >= 0.9, "column row {i}: {mass}");
        }
    }

    #[test]
    fn diffuse_rows_are_flat() {
        let c = cfg(1, 1);
        let m = synth_model(c, ArchetypePlan::uniform(&c, Archetype::Diffuse), 0.9).unwrap();
        let tokens = m.prompt(10);
        let a = full_map(&m, 0, 0, &tokens);
        assert!(a.row(9).iter().all(|&x| x <= 0.2));
        // the best 7 of 10 positions (under 80%) stay below dominance
        let mut row = a.row(9).to_vec();
        row.sort_by(|x, y| y.total_cmp(x));
        assert!(row[..7].iter().sum::<f64>() < 0.9);
    }

    #[test]
    fn deterministic() {
        let c = cfg(2, 2);
        let plan = ArchetypePlan::cycle(&c, &[Archetype::LocalDominant, Archetype::ColumnSparse]);
        let a = synth_model(c, plan.clone(), 0.95).unwrap();
        let b = synth_model(c, plan, 0.95).unwrap();
        assert_eq!(a.prompt(20), b.prompt(20));
        for (l, h) in c.head_ids() {
            assert_eq!(a.project(l, h, 5, 17).unwrap(), b.project(l, h, 5, 17).unwrap());
        }
        assert_eq!(a.lm_head, b.lm_head);
    }

    #[test]
    fn prompt_layout() {
        let c = cfg(1, 1);
        let m = synth_model(c, ArchetypePlan::uniform(&c, Archetype::Diffuse), 0.9).unwrap();
        let p = m.prompt(16);
        assert_eq!(p[0], BOS_ID);
        assert_eq!(p[1], INST_ID);
        assert_eq!(p[15], INST_END_ID);
        for k in 1..8 {
            let pos = 16 * k / 8;
            if pos != 1 && pos != 15 {
                assert!(PUNCT_IDS.contains(&p[pos]));
            }
        }
        assert_eq!(m.prompt(1), vec![BOS_ID]);
    }

    #[test]
    fn head_plan_syntax() {
        let p: HeadPlan = "special>diffuse@78".parse().unwrap();
        assert_eq!(p.archetype_at(77), Archetype::SpecialDominant);
        assert_eq!(p.archetype_at(78), Archetype::Diffuse);
        assert_eq!(p.to_string(), "special>diffuse@78");
        let err = "specail".parse::<HeadPlan>().unwrap_err().to_string();
        assert!(err.contains("specail"));
    }
}
