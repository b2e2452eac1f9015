//! Merges the config file with command-line flags; flags win.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{anyhow, bail, Context, Result};

use akv_core::policy::{feasible_set, FeasibleSpec, PolicyParams};
use akv_core::profiler::{Criterion, ProfilerConfig, RowScope};
use akv_core::trace::{read_trace_auto, TraceModel};
use akv_core::{GenerationConfig, Model, Sampling};

use crate::ini::Ini;
use crate::plan::Plan;
use crate::{Cli, Format, GenArgs, ProfilerArgs, SourceArgs};

pub const DEFAULT_THRESHOLD: f64 = 0.95;
pub const DEFAULT_PROMPT_LEN: usize = 64;
pub const DEFAULT_MAX_NEW_TOKENS: usize = 32;

pub struct Settings {
    ini: Ini,
    base: PathBuf,
    pub seed: Option<u64>,
    pub threads: Option<usize>,
    pub out: Option<PathBuf>,
    pub format: Format,
}

impl Settings {
    pub fn load(cli: &Cli) -> Result<Self> {
        let (ini, base) = match &cli.config {
            Some(path) => {
                let ini = Ini::load(path)?;
                let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
                (ini, base)
            }
            None => (Ini::default(), PathBuf::new()),
        };
        let mut s = Settings {
            seed: None,
            threads: None,
            out: None,
            format: Format::Csv,
            ini,
            base,
        };
        s.seed = s.pick(cli.seed, "run.seed")?;
        s.threads = s.pick(cli.threads, "run.threads")?;
        s.out = cli.out.clone().or(s.path("run.out"));
        s.format = match cli.format {
            Some(f) => f,
            None => match s.ini.raw("run.format") {
                None | Some(("csv", _)) => Format::Csv,
                Some(("json", _)) => Format::Json,
                Some((other, line)) => bail!("{}:{line}: unknown format `{other}`", s.ini.source()),
            },
        };
        Ok(s)
    }

    pub fn pick<T: FromStr>(&self, flag: Option<T>, key: &str) -> Result<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        match flag {
            Some(v) => Ok(Some(v)),
            None => self.ini.get(key),
        }
    }

    /// A path from the config file, relative to the file's directory.
    fn path(&self, key: &str) -> Option<PathBuf> {
        self.ini.raw(key).map(|(v, _)| self.base.join(v))
    }

    fn pick_str(&self, flag: &Option<String>, key: &str) -> Option<String> {
        flag.clone().or_else(|| self.ini.raw(key).map(|(v, _)| v.to_string()))
    }

    pub fn params(&self, p: &ProfilerArgs) -> Result<PolicyParams> {
        let d = PolicyParams::default();
        let r_l = self.pick(p.r_l, "policy.r_l")?.unwrap_or(d.r_l);
        let r_f = self.pick(p.r_f, "policy.r_f")?.unwrap_or(d.r_f);
        Ok(PolicyParams::new(r_l, r_f)?)
    }

    pub fn profiler(&self, p: &ProfilerArgs) -> Result<ProfilerConfig> {
        let threshold = self.pick(p.threshold, "profiler.threshold")?.unwrap_or(DEFAULT_THRESHOLD);
        let criterion: Criterion = match self.pick_str(&p.criterion, "profiler.criterion") {
            Some(s) => s.parse()?,
            None => Criterion::RecoveryMass,
        };
        let scope: RowScope = match self.pick_str(&p.scope, "profiler.scope") {
            Some(s) => s.parse()?,
            None => RowScope::Causal,
        };
        let spec = self.feasible(p)?;
        Ok(ProfilerConfig::new(threshold, feasible_set(self.params(p)?, &spec), criterion, scope)?)
    }

    pub fn feasible(&self, p: &ProfilerArgs) -> Result<FeasibleSpec> {
        match self.pick_str(&p.feasible, "profiler.feasible") {
            Some(s) => Ok(s.parse()?),
            None => Ok(FeasibleSpec::default()),
        }
    }

    pub fn generation(&self, g: &GenArgs) -> Result<GenerationConfig> {
        let max_new_tokens = self
            .pick(g.max_new_tokens, "generate.max_new_tokens")?
            .unwrap_or(DEFAULT_MAX_NEW_TOKENS);
        let sampling = match self.pick_str(&g.sampling, "generate.sampling").as_deref() {
            None | Some("greedy") => Sampling::Greedy,
            Some("nucleus") => Sampling::Nucleus {
                temperature: self.pick(g.temperature, "generate.temperature")?.unwrap_or(1.0),
                top_p: self.pick(g.top_p, "generate.top_p")?.unwrap_or(0.9),
                seed: self.seed.unwrap_or(0),
            },
            Some(other) => bail!("unknown sampling `{other}` (expected greedy or nucleus)"),
        };
        sampling.validate()?;
        Ok(GenerationConfig {
            max_new_tokens,
            sampling,
            track_recovery: true,
        })
    }

    pub fn policy_string(&self, flag: &Option<String>) -> Option<String> {
        self.pick_str(flag, "generate.policy")
    }

    pub fn plan_path(&self, s: &SourceArgs) -> Option<PathBuf> {
        s.plan.clone().or_else(|| self.path("model.plan"))
    }

    pub fn prompt_len(&self, s: &SourceArgs) -> Result<usize> {
        let n = self.pick(s.prompt_len, "model.prompt_len")?.unwrap_or(DEFAULT_PROMPT_LEN);
        if n == 0 {
            bail!("prompt length must be >= 1");
        }
        Ok(n)
    }

    pub fn plan(&self, s: &SourceArgs) -> Result<Plan> {
        let path = self
            .plan_path(s)
            .ok_or_else(|| anyhow!("missing input: no plan given (--plan or model.plan)"))?;
        Plan::parse(&Ini::load(&path)?)
    }

    /// Loads the model source named by flags or config: a synthetic plan or
    /// a recorded trace, never both.
    pub fn source(&self, s: &SourceArgs) -> Result<Source> {
        let plan = self.plan_path(s);
        let trace = s.trace.clone().or_else(|| self.path("model.trace"));
        match (plan, trace) {
            (Some(_), Some(_)) => bail!("give either a plan or a trace, not both"),
            (None, None) => bail!("missing input: no model source (--plan or --trace)"),
            (Some(_), None) => {
                let model = self.plan(s)?.build(self.seed)?;
                let prompt = model.prompt(self.prompt_len(s)?);
                Ok(Source {
                    model: Box::new(model),
                    prompt,
                    max_decode: None,
                })
            }
            (None, Some(path)) => {
                let file = std::fs::File::open(&path).with_context(|| format!("cannot open trace {}", path.display()))?;
                let trace = read_trace_auto(std::io::BufReader::new(file))
                    .with_context(|| format!("trace {}", path.display()))?;
                if s.prompt_len.is_some() {
                    log::warn!("--prompt-len ignored: the trace fixes the prompt");
                }
                let max_decode = trace.decode_steps() + 1;
                let model = TraceModel::new(trace)?;
                let prompt = model.prompt();
                Ok(Source {
                    model: Box::new(model),
                    prompt,
                    max_decode: Some(max_decode),
                })
            }
        }
    }
}

pub struct Source {
    pub model: Box<dyn Model>,
    pub prompt: Vec<u32>,
    /// Decoding steps a trace can replay.
    pub max_decode: Option<usize>,
}

impl Source {
    pub fn cap(&self, mut gen: GenerationConfig) -> GenerationConfig {
        if let Some(limit) = self.max_decode {
            if gen.max_new_tokens > limit {
                log::warn!("max_new_tokens capped at {limit} by the trace length");
                gen.max_new_tokens = limit;
            }
        }
        gen
    }
}
