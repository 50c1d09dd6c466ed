use std::fmt::Write as _;

use lazyprune::bench::{self, AttentionProfile, BenchOptions, GenerationReport, SweepOptions};
use lazyprune::engine::{detokenize, Session, VerifyReport};
use lazyprune::{generate_random_model, load_model, Model, ModelConfig, Policy};
use serde::Serialize;

use crate::args::{BenchArgs, GenModelArgs, ProfileArgs, RunArgs, SweepArgs, VerifyArgs};
use crate::io::{load_prompts, write_atomic, write_json, Prompt};
use crate::{parse_force_keep, parse_policy_spec, policy_from_args, CliError};

fn open_model(path: &std::path::Path) -> Result<Model, CliError> {
    load_model(path).map_err(|e| match e {
        lazyprune::Error::Io(io) => CliError::Io(format!("{}: {io}", path.display())),
        other => CliError::from(other),
    })
}

pub fn gen_model(a: &GenModelArgs) -> Result<(), CliError> {
    let config = ModelConfig {
        num_layers: a.layers,
        num_heads: a.heads,
        d_model: a.dim,
        d_ff: a.ff,
        vocab_size: a.vocab,
        max_position: a.max_position,
        tied_embeddings: !a.untied,
    };
    let model = generate_random_model(config, a.seed)?;
    let bytes = model.to_lzwt_bytes()?;
    write_atomic(&a.out, &bytes)?;
    eprintln!(
        "wrote {} ({} layers, {} heads, dim {}, ff {}, vocab {}, {} bytes)",
        a.out.display(),
        a.layers,
        a.heads,
        a.dim,
        a.ff,
        a.vocab,
        bytes.len()
    );
    Ok(())
}

pub fn run(a: &RunArgs) -> Result<(), CliError> {
    let model = open_model(&a.model)?;
    let policy = policy_from_args(&a.policy)?;
    policy.validate(model.config())?;
    let prompts = load_prompts(&a.source, model.config().max_position, a.generation.max_new)?;
    let mut reports = Vec::with_capacity(prompts.len());
    for p in &prompts {
        let report = Session::new(&model, policy.clone())?.generate(&p.ids, a.generation.max_new, &a.generation.stop_ids)?;
        let text = detokenize(&report.generated_ids)?;
        println!("{}", String::from_utf8_lossy(&text));
        eprintln!(
            "{}: {} prompt tokens, {} generated, ttft {:.4}s, total {:.4}s, {:.2}% prompt compute",
            p.name,
            report.prompt_len,
            report.generated_ids.len(),
            report.ttft_seconds,
            report.total_seconds,
            report.percent_prompt_tokens_computed
        );
        reports.push(report);
    }
    if let Some(out) = &a.out {
        if a.source.corpus.is_some() {
            write_json(out, &reports)?;
        } else {
            write_json(out, &reports[0])?;
        }
    }
    Ok(())
}

pub fn bench(a: &BenchArgs) -> Result<(), CliError> {
    let model = open_model(&a.model)?;
    let policies = a
        .policies
        .iter()
        .map(|s| parse_policy_spec(s))
        .collect::<Result<Vec<Policy>, _>>()?;
    for p in &policies {
        p.validate(model.config())?;
    }
    let source = crate::args::PromptSource {
        prompt: None,
        prompt_file: None,
        corpus: Some(a.corpus.clone()),
    };
    let corpus = ids_of(load_prompts(&source, model.config().max_position, a.max_new)?);
    let opts = BenchOptions {
        max_new_tokens: a.max_new,
        repeats: a.repeats,
        warmup: a.warmup,
    };
    let summary = bench::run_bench(&model, &corpus, &policies, &opts)?;
    let csv = summary.to_csv();
    write_json(&a.out_json, &summary)?;
    if let Some(path) = &a.out_csv {
        write_atomic(path, csv.as_bytes())?;
    }
    print!("{csv}");
    Ok(())
}

fn ids_of(prompts: Vec<Prompt>) -> Vec<Vec<u32>> {
    prompts.into_iter().map(|p| p.ids).collect()
}

pub fn sweep(a: &SweepArgs) -> Result<(), CliError> {
    let model = open_model(&a.model)?;
    let corpus = ids_of(load_prompts(&a.source, model.config().max_position, a.max_new)?);
    let opts = SweepOptions {
        max_new_tokens: a.max_new,
        repeats: a.repeats,
        warmup: a.warmup,
    };
    let grid = bench::run_sweep(&model, &corpus, &a.layers, &a.fractions, &opts)?;
    let csv = grid.to_csv();
    write_atomic(&a.out, csv.as_bytes())?;
    if let Some(path) = &a.out_json {
        write_json(path, &grid)?;
    }
    print!("{csv}");
    Ok(())
}

#[derive(Serialize)]
struct NamedProfile<'a> {
    name: &'a str,
    profile: AttentionProfile,
}

pub fn profile(a: &ProfileArgs) -> Result<(), CliError> {
    let model = open_model(&a.model)?;
    let prompts = load_prompts(&a.source, model.config().max_position, 0)?;
    let mut profiles = Vec::with_capacity(prompts.len());
    for p in &prompts {
        profiles.push(NamedProfile {
            name: &p.name,
            profile: bench::attention_profile(&model, &p.ids, a.bins, &a.thresholds)?,
        });
    }
    // One block per layer; counts are summed over prompts.
    let csv = if profiles.len() == 1 {
        profiles[0].profile.histogram_csv()
    } else {
        let mut out = String::from("layer,bin_low,bin_high,count\n");
        for layer in 0..model.config().num_layers {
            for bin in 0..a.bins {
                let count: usize = profiles.iter().map(|p| p.profile.layers[layer].histogram[bin]).sum();
                let low = bin as f64 / a.bins as f64;
                let high = (bin + 1) as f64 / a.bins as f64;
                let _ = writeln!(out, "{layer},{low},{high},{count}");
            }
        }
        out
    };
    write_atomic(&a.out, csv.as_bytes())?;
    if let Some(path) = &a.out_json {
        write_json(path, &profiles)?;
    }
    for p in &profiles {
        for lp in &p.profile.layers {
            println!(
                "{} layer {:>2}: {:.1}% of tokens below uniform attention",
                p.name,
                lp.layer,
                100.0 * lp.below_uniform
            );
        }
    }
    Ok(())
}

#[derive(Debug, Serialize)]
struct PromptVerification {
    name: String,
    prompt_len: usize,
    num_layers: usize,
    generated: usize,
    steps: Vec<VerifyReport>,
    violations: usize,
    max_event_count: u32,
    prompt_events: usize,
    event_bound: usize,
    revival_events: usize,
    revived_tokens: Vec<usize>,
    percent_prompt_tokens_computed: f64,
}

#[derive(Debug, Serialize)]
struct VerifySummary {
    policy: Policy,
    prompts: Vec<PromptVerification>,
    total_violations: usize,
}

pub fn verify(a: &VerifyArgs) -> Result<(), CliError> {
    let model = open_model(&a.model)?;
    let policy = policy_from_args(&a.policy)?;
    policy.validate(model.config())?;
    let forced = a
        .force_keep
        .iter()
        .map(|s| parse_force_keep(s))
        .collect::<Result<Vec<_>, _>>()?;
    let prompts = load_prompts(&a.source, model.config().max_position, a.generation.max_new)?;
    let num_layers = model.config().num_layers;

    let mut results = Vec::with_capacity(prompts.len());
    for p in &prompts {
        let mut session = Session::new(&model, policy.clone())?;
        for (step, layer, tokens) in &forced {
            session.force_keep(*step, *layer, tokens.iter().copied());
        }
        let mut steps = Vec::new();
        let report: GenerationReport =
            session.generate_with(&p.ids, a.generation.max_new, &a.generation.stop_ids, |s| {
                steps.push(s.verify());
                Ok(())
            })?;
        let ledger = session.ledger();
        let violations = steps.iter().map(VerifyReport::violation_count).sum();
        let mut revived_tokens: Vec<usize> = session.revivals().iter().map(|r| r.token).collect();
        revived_tokens.sort_unstable();
        revived_tokens.dedup();
        results.push(PromptVerification {
            name: p.name.clone(),
            prompt_len: p.ids.len(),
            num_layers,
            generated: report.generated_ids.len(),
            violations,
            max_event_count: ledger.max_count(),
            prompt_events: ledger.prompt_events(),
            event_bound: p.ids.len() * num_layers,
            revival_events: ledger.revival_events(),
            revived_tokens,
            percent_prompt_tokens_computed: report.percent_prompt_tokens_computed,
            steps,
        });
    }
    let total_violations = results.iter().map(|r| r.violations).sum();
    let summary = VerifySummary {
        policy,
        prompts: results,
        total_violations,
    };
    if let Some(out) = &a.out {
        write_json(out, &summary)?;
    }
    for r in &summary.prompts {
        println!(
            "{}: {} steps checked, {} violations, max event count {}, {} / {} prompt events, {} revival events",
            r.name,
            r.steps.len(),
            r.violations,
            r.max_event_count,
            r.prompt_events,
            r.event_bound,
            r.revival_events
        );
    }
    if total_violations > 0 {
        return Err(CliError::Invariant(format!("{total_violations} invariant violations")));
    }
    Ok(())
}
