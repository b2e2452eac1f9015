use std::fs::File;
use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use serde_json::json;

use akv_core::engine::{read_steps_ndjson, write_steps_ndjson};
use akv_core::metrics::{
    comparison_table, compare_adaptive_vs_fixed, compare_feasible_variants, consistency_report, consistency_table,
    distribution_table, greedy_continuation, memory_table, recount, summarize_generation, summary_table,
    tradeoff_curve, tradeoff_table, Table,
};
use akv_core::policy::{CompressionPolicy, FeasibleSpec};
use akv_core::profiler::HeadProfile;
use akv_core::trace::{record_trace, write_trace, write_trace_ndjson};
use akv_core::{
    full_cache_bytes, generate, generate_fixed_baseline, layer_distribution_report, sidecar_overhead_fraction,
    MemoryModel,
};

use crate::output::{create, run_dir, write_json, write_table};
use crate::settings::Settings;
use crate::{Cli, Command};

pub fn run(cli: Cli) -> Result<()> {
    let s = Settings::load(&cli)?;
    if let Some(n) = s.threads {
        if n == 0 {
            bail!("--threads must be >= 1");
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("cannot configure the thread pool")?;
    }
    match &cli.command {
        Command::Synth {
            source,
            decode_steps,
            trace_out,
            ndjson,
        } => {
            let model = s.plan(source)?.build(s.seed)?;
            let prompt_len = s.prompt_len(source)?;
            let steps = s.pick(*decode_steps, "synth.decode_steps")?.unwrap_or(32);
            let tokens = greedy_continuation(&model, &model.prompt(prompt_len), steps)?;
            let trace = record_trace(&model, &tokens, prompt_len)?;
            let path = match trace_out {
                Some(p) => p.clone(),
                None => {
                    let dir = run_dir(s.out.as_deref(), "synth")?;
                    dir.join(if *ndjson { "trace.ndjson" } else { "trace.akvt" })
                }
            };
            let mut w = create(&path)?;
            if *ndjson {
                write_trace_ndjson(&trace, &mut w)?;
            } else {
                write_trace(&trace, &mut w)?;
            }
            w.flush()?;
            println!(
                "trace {} ({} prompt tokens, {} decode steps)",
                path.display(),
                prompt_len,
                trace.decode_steps()
            );
        }
        Command::Profile { source, profiler } => {
            let cfg = s.profiler(profiler)?;
            let src = s.source(source)?;
            let enc = akv_core::encode_prompt(&*src.model, &src.prompt, &cfg)?;
            let dir = run_dir(s.out.as_deref(), "profile")?;
            let p = write_table(&dir, "profile", &profile_table(&enc.profile), s.format)?;
            write_table(&dir, "layers", &distribution_table(&layer_distribution_report(&enc.profile)), s.format)?;
            println!(
                "profiled {} heads: mean recovery {:.6}, {} cached tokens; {}",
                enc.profile.choices().len(),
                enc.profile.mean_recovery(),
                enc.profile.total_cost(),
                p.display()
            );
        }
        Command::Generate {
            source,
            profiler,
            gen,
            policy,
            baseline,
        } => {
            let params = s.params(profiler)?;
            let fixed = s
                .policy_string(&policy.clone().or_else(|| baseline.clone()))
                .map(|p| CompressionPolicy::parse_with(&p, params))
                .transpose()?;
            let cfg = s.profiler(profiler)?;
            let src = s.source(source)?;
            let gcfg = src.cap(s.generation(gen)?);
            let g = match &fixed {
                Some(p) => generate_fixed_baseline(&*src.model, &src.prompt, p, &gcfg)?,
                None => generate(&*src.model, &src.prompt, &cfg, &gcfg)?,
            };
            let summary = summarize_generation(&g)?;
            let dir = run_dir(s.out.as_deref(), "generate")?;
            write_json(
                &dir.join("tokens.json"),
                &json!({ "prompt": g.prompt, "tokens": g.tokens }),
            )?;
            let mut w = create(&dir.join("diagnostics.ndjson"))?;
            write_steps_ndjson(&g.steps, &mut w)?;
            w.flush()?;
            write_table(&dir, "summary", &summary_table(&summary), s.format)?;
            write_table(&dir, "profile", &profile_table(&g.profile), s.format)?;
            println!(
                "generated {} tokens: pruned ratio {:.6}, mean recovery {}; {}",
                g.tokens.len(),
                summary.pruned_ratio,
                summary
                    .mean_recovery
                    .map(|r| format!("{r:.6}"))
                    .unwrap_or_else(|| "n/a".into()),
                dir.display()
            );
        }
        Command::Report {
            source,
            profiler,
            gen,
            tradeoff,
            consistency,
            compare,
            variant,
            memory,
            diagnostics,
            profile,
        } => {
            let needs_model = tradeoff.is_some() || consistency.is_some() || compare.is_some() || !variant.is_empty();
            if !needs_model && memory.is_none() && diagnostics.is_none() && profile.is_none() {
                bail!("nothing to report: pass --tradeoff, --consistency, --compare, --variant, --memory, --diagnostics or --profile");
            }
            let src = if needs_model { Some(s.source(source)?) } else { None };
            let dir = run_dir(s.out.as_deref(), "report")?;
            let mut written: Vec<PathBuf> = Vec::new();
            if let Some(list) = tradeoff {
                let src = src.as_ref().expect("loaded");
                let thresholds = parse_list::<f64>(list, "--tradeoff")?;
                let points = tradeoff_curve(&*src.model, &src.prompt, &thresholds, &s.profiler(profiler)?)?;
                written.push(write_table(&dir, "tradeoff", &tradeoff_table(&points), s.format)?);
            }
            if let Some(list) = consistency {
                let src = src.as_ref().expect("loaded");
                let steps = parse_list::<usize>(list, "--consistency")?;
                let last = steps.iter().copied().max().unwrap_or(1);
                let extra = src.max_decode.map_or(last - 1, |m| (last - 1).min(m));
                let tokens = greedy_continuation(&*src.model, &src.prompt, extra)?;
                let r = consistency_report(&*src.model, &tokens, src.prompt.len(), &steps, &s.profiler(profiler)?)?;
                written.push(write_table(&dir, "consistency", &consistency_table(&r), s.format)?);
                let fractions: Vec<String> = r.stable_fraction.iter().map(|f| format!("{f:.4}")).collect();
                println!("consistency: stable fraction per step [{}]", fractions.join(", "));
            }
            if compare.is_some() || !variant.is_empty() {
                let src = src.as_ref().expect("loaded");
                let params = s.params(profiler)?;
                let cfg = s.profiler(profiler)?;
                let gcfg = src.cap(s.generation(gen)?);
                let fixed = match compare {
                    Some(list) => list
                        .split(',')
                        .map(|p| CompressionPolicy::parse_with(p.trim(), params))
                        .collect::<akv_core::Result<Vec<_>>>()?,
                    None => Vec::new(),
                };
                let mut rows = compare_adaptive_vs_fixed(&*src.model, &src.prompt, &cfg, &fixed, &gcfg)?;
                let variants = variant
                    .iter()
                    .map(|v| v.parse::<FeasibleSpec>())
                    .collect::<akv_core::Result<Vec<_>>>()?;
                rows.extend(compare_feasible_variants(&*src.model, &src.prompt, &cfg, params, &variants, &gcfg)?);
                written.push(write_table(&dir, "comparison", &comparison_table(&rows), s.format)?);
            }
            if let Some(shape) = memory {
                let m = MemoryModel::llama(shape)?;
                print_memory(&m);
                written.push(write_table(&dir, "memory", &memory_table(&m), s.format)?);
            }
            if let Some(path) = diagnostics {
                let steps = read_steps_ndjson(BufReader::new(open(path)?))
                    .with_context(|| format!("diagnostics {}", path.display()))?;
                let heads = steps
                    .first()
                    .map(|r| r.retained.len())
                    .ok_or_else(|| anyhow!("diagnostics {} has no steps", path.display()))?;
                let summary = recount(&steps, heads)?;
                written.push(write_table(&dir, "summary", &summary_table(&summary), s.format)?);
            }
            if let Some(path) = profile {
                let p = HeadProfile::read_csv(BufReader::new(open(path)?))
                    .with_context(|| format!("profile {}", path.display()))?;
                written.push(write_table(&dir, "layers", &distribution_table(&layer_distribution_report(&p)), s.format)?);
            }
            for p in written {
                println!("wrote {}", p.display());
            }
        }
        Command::Memory {
            shape,
            layers,
            heads,
            head_dim,
            batch,
            seq_len,
            bytes,
        } => {
            let base = match shape {
                Some(name) => Some(MemoryModel::llama(name)?),
                None => None,
            };
            let need = |v: Option<u64>, from: Option<u64>, flag: &str| {
                v.or(from)
                    .ok_or_else(|| anyhow!("missing input: --{flag} (or --shape)"))
            };
            let m = MemoryModel {
                num_layers: need(*layers, base.map(|b| b.num_layers), "layers")?,
                num_heads: need(*heads, base.map(|b| b.num_heads), "heads")?,
                head_dim: need(*head_dim, base.map(|b| b.head_dim), "head-dim")?,
                batch_size: batch.or(base.map(|b| b.batch_size)).unwrap_or(16),
                seq_len: seq_len.or(base.map(|b| b.seq_len)).unwrap_or(512),
                bytes_per_scalar: bytes.or(base.map(|b| b.bytes_per_scalar)).unwrap_or(2),
            };
            m.validate()?;
            print_memory(&m);
            if let Some(out) = &s.out {
                let dir = run_dir(Some(out), "memory")?;
                write_table(&dir, "memory", &memory_table(&m), s.format)?;
            }
        }
    }
    Ok(())
}

fn print_memory(m: &MemoryModel) {
    let bytes = full_cache_bytes(m);
    println!(
        "full_cache_bytes {bytes} ({:.3e}) sidecar_overhead_fraction {}",
        bytes as f64,
        sidecar_overhead_fraction(m)
    );
}

fn profile_table(p: &HeadProfile) -> Table {
    Table {
        header: HeadProfile::CSV_HEADER.split(',').collect(),
        rows: p
            .choices()
            .iter()
            .map(|c| {
                vec![
                    c.layer.to_string(),
                    c.head.to_string(),
                    c.policy.to_string(),
                    c.recovery.to_string(),
                    c.cost_tokens.to_string(),
                ]
            })
            .collect(),
    }
}

fn open(path: &Path) -> Result<File> {
    File::open(path).with_context(|| format!("missing input: cannot open {}", path.display()))
}

fn parse_list<T: std::str::FromStr>(list: &str, flag: &str) -> Result<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    let items = list
        .split(',')
        .map(|x| {
            x.trim()
                .parse::<T>()
                .map_err(|e| anyhow!("{flag}: bad value `{}`: {e}", x.trim()))
        })
        .collect::<Result<Vec<_>>>()?;
    if items.is_empty() {
        bail!("{flag}: empty list");
    }
    Ok(items)
}
