//! Synthetic model plan files.
//!
//! ```text
//! [model]
//! head_dim = 16
//! vocab = 64
//! seed = 7
//! dominance = 0.97
//!
//! [synth]          # optional
//! local_window = 8
//! column_span = 16
//! column_count = 4
//! noise = 0.1
//!
//! [heads]
//! layer0 = special, local, column, diffuse
//! layer1 = special>diffuse@78, local, local, column
//! ```

use anyhow::{anyhow, bail, Result};

use akv_core::synth::{ArchetypePlan, HeadPlan, SynthModel, SynthOptions};
use akv_core::ModelConfig;

use crate::ini::Ini;

#[derive(Debug, Clone)]
pub struct Plan {
    pub config: ModelConfig,
    pub dominance: f64,
    pub options: SynthOptions,
    pub heads: ArchetypePlan,
}

impl Plan {
    pub fn parse(ini: &Ini) -> Result<Self> {
        let src = ini.source();
        let rows = ini.section("heads");
        if rows.is_empty() {
            bail!("{src}: no heads defined");
        }
        let mut layers: Vec<Option<(Vec<HeadPlan>, usize)>> = Vec::new();
        for (key, value, line) in rows {
            let index: usize = key
                .strip_prefix("layer")
                .and_then(|n| n.parse().ok())
                .ok_or_else(|| anyhow!("{src}:{line}: expected `layerN`, found `{key}`"))?;
            let heads = value
                .split(',')
                .map(|tok| tok.trim().parse::<HeadPlan>().map_err(|e| anyhow!("{src}:{line}: {e}")))
                .collect::<Result<Vec<_>>>()?;
            if index >= layers.len() {
                layers.resize(index + 1, None);
            }
            layers[index] = Some((heads, line));
        }
        let mut plan = Vec::new();
        let mut width = None;
        for (l, entry) in layers.into_iter().enumerate() {
            let (heads, line) = entry.ok_or_else(|| anyhow!("{src}: layer{l} missing from [heads]"))?;
            match width {
                None => width = Some(heads.len()),
                Some(w) if w != heads.len() => {
                    bail!("{src}:{line}: layer{l} lists {} heads, earlier layers {w}", heads.len())
                }
                _ => {}
            }
            plan.extend(heads);
        }
        let num_heads = width.expect("at least one layer");
        let config = ModelConfig {
            num_layers: plan.len() / num_heads,
            num_heads,
            head_dim: ini.get("model.head_dim")?.unwrap_or(16),
            vocab_size: ini.get("model.vocab")?.unwrap_or(64),
            seed: ini.get("model.seed")?.unwrap_or(0),
        };
        for (key, want) in [("model.layers", config.num_layers), ("model.heads", config.num_heads)] {
            if let Some(v) = ini.get::<usize>(key)? {
                if v != want {
                    let line = ini.raw(key).map(|r| r.1).unwrap_or(0);
                    bail!("{src}:{line}: `{key} = {v}` but [heads] defines {want}");
                }
            }
        }
        let d = SynthOptions::default();
        let options = SynthOptions {
            local_window: ini.get("synth.local_window")?.unwrap_or(d.local_window),
            column_span: ini.get("synth.column_span")?.unwrap_or(d.column_span),
            column_count: ini.get("synth.column_count")?.unwrap_or(d.column_count),
            noise: ini.get("synth.noise")?.unwrap_or(d.noise),
        };
        Ok(Self {
            config,
            dominance: ini.get("model.dominance")?.unwrap_or(0.97),
            options,
            heads: ArchetypePlan { heads: plan },
        })
    }

    pub fn build(&self, seed: Option<u64>) -> Result<SynthModel> {
        let config = ModelConfig {
            seed: seed.unwrap_or(self.config.seed),
            ..self.config
        };
        Ok(SynthModel::new(config, self.heads.clone(), self.dominance, self.options)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<Plan> {
        Plan::parse(&Ini::parse(text, "plan").unwrap())
    }

    #[test]
    fn layers_and_defaults() {
        let p = parse("[model]\nseed = 3\n[heads]\nlayer1 = diffuse, column\nlayer0 = special, local>diffuse@9\n").unwrap();
        assert_eq!((p.config.num_layers, p.config.num_heads, p.config.seed), (2, 2, 3));
        assert_eq!(p.heads.heads[1].to_string(), "local>diffuse@9");
        assert_eq!(p.heads.heads[2].to_string(), "diffuse");
        assert!(p.build(Some(9)).is_ok());
    }

    #[test]
    fn errors_name_the_problem() {
        let e = parse("[model]\nseed = 1\n").unwrap_err().to_string();
        assert!(e.contains("no heads defined"), "{e}");
        let e = parse("[heads]\nlayer0 = special, sparkly\n").unwrap_err().to_string();
        assert!(e.starts_with("plan:2:") && e.contains("sparkly"), "{e}");
        let e = parse("[heads]\nlayer0 = special\nlayer2 = local\n").unwrap_err().to_string();
        assert!(e.contains("layer1 missing"), "{e}");
        let e = parse("[heads]\nlayer0 = special\nlayer1 = local, local\n").unwrap_err().to_string();
        assert!(e.starts_with("plan:3:"), "{e}");
    }
}
