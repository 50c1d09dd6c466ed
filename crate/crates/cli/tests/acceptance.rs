//! Acceptance suite. Runs every primary criterion at its stated tolerance
//! and prints one PASS/FAIL line per criterion; exits non-zero if any fail.
//!
//! Run alone with `cargo test -p lazyprune-cli --test acceptance`.
//! Criterion 6 (N = 4096 TTFT with 5 warmup runs and 10 repeats per
//! policy) dominates the runtime.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use lazyprune::bench::{self, GenerationReport};
use lazyprune::engine::{tokenize, Session};
use lazyprune::reference;
use lazyprune::tensor::{self, Matrix};
use lazyprune::{generate_random_model, Model, ModelConfig, Policy, PruningSchedule};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;

type Outcome = Result<String, String>;

const BIN: &str = env!("CARGO_BIN_EXE_lazyprune");
const LAYERS: usize = 12;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn cli(args: &[&str]) -> (i32, String, String) {
    let out = Command::new(BIN).args(args).output().expect("spawn lazyprune");
    (
        out.status.code().unwrap_or(-1),
        String::from_utf8_lossy(&out.stdout).into_owned(),
        String::from_utf8_lossy(&out.stderr).into_owned(),
    )
}

fn cli_ok(args: &[&str]) -> Result<String, String> {
    let (code, stdout, stderr) = cli(args);
    if code == 0 {
        Ok(stdout)
    } else {
        Err(format!("lazyprune {} exited {code}: {stderr}", args.join(" ")))
    }
}

fn random_bytes(rng: &mut ChaCha8Rng, len: usize) -> Vec<u8> {
    // Printable ASCII keeps corpus files readable.
    (0..len).map(|_| rng.random_range(32u8..127)).collect()
}

fn write_corpus(dir: &Path, prompts: &[Vec<u8>]) {
    fs::create_dir_all(dir).unwrap();
    for (i, p) in prompts.iter().enumerate() {
        fs::write(dir.join(format!("prompt_{i:03}.txt")), p).unwrap();
    }
}

fn read_json(path: &Path) -> Value {
    serde_json::from_slice(&fs::read(path).unwrap()).unwrap()
}

/// Prefill events for one boundary `(lb, pct/100)` over `n` tokens, in
/// integer arithmetic: `lb·n + (L − lb)·(⌈pct·(n−1)/100⌉ + 1)`.
fn closed_form_events(lb: usize, pct: usize, n: usize) -> usize {
    lb * n + (LAYERS - lb) * ((pct * (n - 1)).div_ceil(100) + 1)
}

struct Ctx {
    dir: tempfile::TempDir,
    model: Model,
    model_path: PathBuf,
}

impl Ctx {
    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn p(&self, name: &str) -> String {
        self.path(name).display().to_string()
    }
}

fn c1_baseline_equivalence(ctx: &Ctx) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let prompt = tokenize(&random_bytes(&mut rng, 512));

    let start = Instant::now();
    let mut lazy = Session::new(&ctx.model, Policy::lazy(PruningSchedule::empty())).map_err(|e| e.to_string())?;
    let lazy_report = lazy.generate(&prompt, 32, &[]).map_err(|e| e.to_string())?;
    let lazy_secs = start.elapsed().as_secs_f64();

    let mut base = Session::new(&ctx.model, Policy::Baseline).map_err(|e| e.to_string())?;
    let base_report = base.generate(&prompt, 32, &[]).map_err(|e| e.to_string())?;
    let (ref_ids, ref_hidden) = reference::dense_generate(&ctx.model, &prompt, 32).map_err(|e| e.to_string())?;

    ensure(lazy_report.generated_ids.len() == 32, || "fewer than 32 tokens".into())?;
    ensure(lazy_report.generated_ids == base_report.generated_ids, || {
        "empty-schedule ids differ from baseline policy".into()
    })?;
    ensure(lazy_report.generated_ids == ref_ids, || "ids differ from the dense no-cache reference".into())?;
    let mut worst = 0.0f32;
    for (a, b) in lazy.final_hidden().iter().zip(&ref_hidden) {
        for (x, y) in a.iter().zip(b) {
            worst = worst.max((x - y).abs());
        }
    }
    for (a, b) in lazy.final_hidden().iter().zip(base.final_hidden()) {
        for (x, y) in a.iter().zip(b) {
            worst = worst.max((x - y).abs());
        }
    }
    ensure(worst <= 1e-5, || format!("final hidden drift {worst:e} > 1e-5"))?;
    ensure(lazy_secs < 60.0, || format!("lazy run took {lazy_secs:.1}s"))?;
    Ok(format!(
        "32 ids identical to baseline and dense reference; max hidden diff {worst:e}; run {lazy_secs:.2}s"
    ))
}

fn c2_c3_ledger_and_caches(ctx: &Ctx) -> (Outcome, Outcome) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    // BOS brings token counts to 128..=1024.
    let prompts: Vec<Vec<u8>> = (0..50)
        .map(|_| {
            let len = rng.random_range(127..=1023);
            random_bytes(&mut rng, len)
        })
        .collect();
    let corpus = ctx.path("c2_corpus");
    write_corpus(&corpus, &prompts);
    let out = ctx.path("c2_verify.json");
    let run = cli(&[
        "verify",
        "--model",
        &ctx.model_path.display().to_string(),
        "--corpus",
        &corpus.display().to_string(),
        "--policy",
        "lazy",
        "--schedule",
        "4:0.7,8:0.4",
        "--max-new",
        "8",
        "--out",
        &out.display().to_string(),
    ]);
    if !out.exists() {
        let msg = format!("verify exited {} without a report: {}", run.0, run.2);
        return (Err(msg.clone()), Err(msg));
    }
    let v = read_json(&out);
    let prompts_v = v["prompts"].as_array().cloned().unwrap_or_default();

    let c2 = (|| {
        ensure(prompts_v.len() == 50, || format!("{} prompts verified", prompts_v.len()))?;
        let mut repeats = 0;
        let mut over = 0;
        let mut revivals = 0;
        for (i, p) in prompts_v.iter().enumerate() {
            let n = p["prompt_len"].as_u64().unwrap() as usize;
            ensure((128..=1024).contains(&n), || format!("prompt {i} has {n} tokens"))?;
            if p["max_event_count"].as_u64() != Some(1) {
                repeats += 1;
            }
            let events = p["prompt_events"].as_u64().unwrap() as usize;
            if events > n * LAYERS {
                over += 1;
            }
            revivals += p["revival_events"].as_u64().unwrap();
        }
        ensure(repeats == 0 && over == 0, || {
            format!("{repeats} prompts with repeated events, {over} over the N×L bound")
        })?;
        Ok(format!(
            "50 prompts, every (token, layer) computed at most once, all within N×L; {revivals} revival events"
        ))
    })();

    let c3 = (|| {
        ensure(run.0 == 0, || format!("verify exited {}: {}", run.0, run.2))?;
        let total = v["total_violations"].as_u64().unwrap();
        let mut checks = 0;
        for p in &prompts_v {
            let steps = p["steps"].as_array().unwrap();
            ensure(steps.len() == p["generated"].as_u64().unwrap() as usize, || {
                "verification skipped a step".into()
            })?;
            for s in steps {
                for key in ["cache", "ledger", "frontier"] {
                    ensure(s[key].as_array().unwrap().is_empty(), || format!("{key} violation: {}", s[key]))?;
                }
                checks += 1;
            }
        }
        ensure(total == 0, || format!("{total} violations"))?;
        Ok(format!("verify exit 0; {checks} step checks, zero violations"))
    })();
    (c2, c3)
}

fn c4_event_arithmetic(ctx: &Ctx) -> Outcome {
    let combos = [
        (1, 50, 64),
        (2, 70, 128),
        (3, 10, 100),
        (4, 40, 257),
        (5, 33, 300),
        (6, 90, 77),
        (8, 25, 512),
        (10, 60, 200),
        (11, 5, 1000),
        (7, 100, 150),
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut lines = Vec::new();
    for (lb, pct, n) in combos {
        let prompt = tokenize(&random_bytes(&mut rng, n - 1));
        let policy = Policy::lazy(PruningSchedule::single(lb, pct as f64 / 100.0));
        let mut s = Session::new(&ctx.model, policy).map_err(|e| e.to_string())?;
        s.prefill(&prompt).map_err(|e| e.to_string())?;
        let got = s.ledger().prompt_events();
        let want = closed_form_events(lb, pct, n);
        ensure(got == want, || format!("(l_b={lb}, f=0.{pct:02}, N={n}): {got} events, closed form {want}"))?;
        lines.push(format!("{lb}/{pct}%/{n}={got}"));
    }
    Ok(format!("10 combinations exact: {}", lines.join(" ")))
}

fn c5_revival(ctx: &Ctx) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let prompt = tokenize(&random_bytes(&mut rng, 95));
    let n = prompt.len();
    let victim = 10;
    let layer = 4;
    let mut s = Session::new(&ctx.model, Policy::lazy("4:0.5".parse().unwrap())).map_err(|e| e.to_string())?;
    s.force_keep(1, layer, (0..n).filter(|&t| t != victim));
    s.force_keep(2, layer, 0..=n);
    s.prefill(&prompt).map_err(|e| e.to_string())?;
    let before = s.caches().frontier(victim);
    ensure(before == layer, || format!("victim frontier {before} after prefill"))?;
    let parked = s.caches().aux_take(layer, victim).map_err(|e| e.to_string())?.to_vec();
    ensure(s.verify().is_clean(), || "violations after prefill".into())?;
    s.decode_step().map_err(|e| e.to_string())?;
    ensure(s.verify().is_clean(), || "violations after decode".into())?;

    let after = s.caches().frontier(victim);
    ensure(after > before, || format!("frontier {before} -> {after}"))?;
    let step = s.ledger().step_of(victim, layer);
    ensure(step == Some(2), || format!("event at layer {layer} recorded in step {step:?}"))?;
    let revival = s
        .revivals()
        .iter()
        .find(|r| r.token == victim)
        .ok_or("no revival recorded")?;
    let exact = revival.hidden.len() == parked.len()
        && revival.hidden.iter().zip(&parked).all(|(a, b)| a.to_bits() == b.to_bits());
    ensure(exact, || "revived hidden state differs from the aux row".into())?;

    // The same script through the CLI.
    let others: Vec<String> = (0..n).filter(|&t| t != victim).map(|t| t.to_string()).collect();
    let prompt_file = ctx.path("c5_prompt.txt");
    fs::write(&prompt_file, prompt[1..].iter().map(|&t| t as u8).collect::<Vec<_>>()).unwrap();
    let out = ctx.path("c5_verify.json");
    let first = format!("1@{layer}={}", others.join(","));
    let all: Vec<String> = (0..=n).map(|t| t.to_string()).collect();
    let second = format!("2@{layer}={}", all.join(","));
    cli_ok(&[
        "verify",
        "--model",
        &ctx.model_path.display().to_string(),
        "--prompt-file",
        &prompt_file.display().to_string(),
        "--policy",
        "lazy",
        "--schedule",
        "4:0.5",
        "--max-new",
        "2",
        "--force-keep",
        &first,
        "--force-keep",
        &second,
        "--out",
        &out.display().to_string(),
    ])?;
    let v = read_json(&out);
    let revived = v["prompts"][0]["revived_tokens"].as_array().cloned().unwrap_or_default();
    ensure(revived.iter().any(|t| t.as_u64() == Some(victim as u64)), || {
        "CLI verify did not revive the victim".into()
    })?;
    Ok(format!(
        "token {victim} parked at layer {layer} in prefill, computed there in step 2, frontier {before} -> {after}, aux row bit-exact"
    ))
}

fn c6_c7_ttft(ctx: &Ctx) -> (Outcome, Outcome) {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let prompt = tokenize(&random_bytes(&mut rng, 4095));
    let n = prompt.len();
    let lazy = Policy::lazy("2:0.6,6:0.35".parse().unwrap());

    let c6 = (|| {
        let base = bench::measure_ttft(&ctx.model, &prompt, &Policy::Baseline, 10, 5).map_err(|e| e.to_string())?;
        let pruned = bench::measure_ttft(&ctx.model, &prompt, &lazy, 10, 5).map_err(|e| e.to_string())?;
        let speedup = base.mean / pruned.mean;
        let detail = format!(
            "N={n}: baseline {:.3}s ± {:.3}, lazy {:.3}s ± {:.3}, speedup {speedup:.2}x (5 warmup, 10 repeats)",
            base.mean, base.stdev, pruned.mean, pruned.stdev
        );
        ensure(speedup >= 1.2, || detail.clone())?;
        Ok(detail)
    })();

    let c7 = (|| {
        let mut s = Session::new(&ctx.model, lazy.clone()).map_err(|e| e.to_string())?;
        let report: GenerationReport = s.generate(&prompt, 8, &[]).map_err(|e| e.to_string())?;
        let prompt_events = s.ledger().events().iter().filter(|e| e.token < n).count();
        let expected = 100.0 * prompt_events as f64 / (n * LAYERS) as f64;
        let pct = report.percent_prompt_tokens_computed;
        ensure(pct < 100.0, || format!("percent computed {pct}"))?;
        ensure((pct - expected).abs() <= f64::EPSILON * 100.0, || {
            format!("reported {pct}, ledger gives {expected}")
        })?;
        let usage = &report.cumulative_usage;
        ensure(usage.len() == report.generated_ids.len(), || "usage series length".into())?;
        for (step, row) in usage.iter().enumerate() {
            ensure(row.windows(2).all(|w| w[1] <= w[0]), || format!("usage rises with depth at step {}", step + 1))?;
        }
        for l in 0..LAYERS {
            ensure(usage.windows(2).all(|w| w[1][l] >= w[0][l]), || format!("usage falls over steps at layer {l}"))?;
        }
        ensure(report.ttft_seconds <= report.total_seconds, || "ttft exceeds total".into())?;
        Ok(format!(
            "{pct:.4}% computed = {prompt_events} events / (N×L); usage monotone over {} steps, non-increasing over depth",
            usage.len()
        ))
    })();
    (c6, c7)
}

fn c8_sweep(ctx: &Ctx) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let prompts: Vec<Vec<u8>> = (0..20)
        .map(|_| {
            let len = rng.random_range(48..=192);
            random_bytes(&mut rng, len)
        })
        .collect();
    let corpus = ctx.path("c8_corpus");
    write_corpus(&corpus, &prompts);
    let out = ctx.p("c8_sweep.csv");
    cli_ok(&[
        "sweep",
        "--model",
        &ctx.model_path.display().to_string(),
        "--corpus",
        &corpus.display().to_string(),
        "--layers",
        "2,4,6,8,10",
        "--fractions",
        "1.0,0.7,0.4,0.1",
        "--max-new",
        "1",
        "--out",
        &out,
    ])?;
    let text = fs::read_to_string(&out).map_err(|e| e.to_string())?;
    let mut lines = text.lines();
    ensure(
        lines.next() == Some("prune_layer,keep_fraction,fidelity,ttft_speedup,percent_computed"),
        || "sweep CSV header".into(),
    )?;
    let rows: Vec<Vec<f64>> = lines
        .map(|l| l.split(',').map(|v| v.parse::<f64>().unwrap()).collect())
        .collect();
    ensure(rows.len() == 20, || format!("{} cells", rows.len()))?;
    let lens: Vec<usize> = prompts.iter().map(|p| p.len() + 1).collect();
    let mut cells = std::collections::BTreeSet::new();
    let mut by_layer = std::collections::BTreeMap::<usize, Vec<f64>>::new();
    for r in &rows {
        let (lb, f) = (r[0] as usize, r[1]);
        cells.insert((lb, (f * 100.0).round() as usize));
        let pct = (f * 100.0).round() as usize;
        let want: f64 = lens
            .iter()
            .map(|&n| 100.0 * closed_form_events(lb, pct, n) as f64 / (n * LAYERS) as f64)
            .sum::<f64>()
            / lens.len() as f64;
        ensure((r[4] - want).abs() <= 1e-9, || format!("cell ({lb}, {f}): percent {} vs closed form {want}", r[4]))?;
        if pct == 100 {
            ensure(r[2] == 1.0, || format!("cell ({lb}, 1.0) fidelity {}", r[2]))?;
        }
        by_layer.entry(lb).or_default().push(r[2]);
    }
    ensure(cells.len() == 20, || "duplicate cells".into())?;
    let trend: Vec<String> = by_layer
        .iter()
        .map(|(l, f)| format!("L{l}:{:.2}", f.iter().sum::<f64>() / f.len() as f64))
        .collect();
    Ok(format!(
        "20 cells, f=1.0 fidelity 1.0, percent matches closed form; mean fidelity by layer (informational) {}",
        trend.join(" ")
    ))
}

fn strip_timings(mut v: Value) -> Value {
    match &mut v {
        Value::Object(map) => {
            map.remove("ttft_seconds");
            map.remove("total_seconds");
        }
        Value::Array(items) => {
            for item in items.iter_mut() {
                *item = strip_timings(item.take());
            }
        }
        _ => {}
    }
    v
}

fn c9_determinism(ctx: &Ctx) -> Outcome {
    let a = ctx.p("c9_a.lzwt");
    let b = ctx.p("c9_b.lzwt");
    for path in [&a, &b] {
        cli_ok(&["gen-model", "--seed", "0", "--out", path])?;
    }
    let bytes_a = fs::read(&a).map_err(|e| e.to_string())?;
    ensure(bytes_a == fs::read(&b).map_err(|e| e.to_string())?, || "gen-model output differs".into())?;
    ensure(bytes_a == ctx.model.to_lzwt_bytes().unwrap(), || {
        "CLI model differs from the in-process model".into()
    })?;

    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let prompt_file = ctx.path("c9_prompt.txt");
    fs::write(&prompt_file, random_bytes(&mut rng, 300)).unwrap();
    let flag_sets: [&[&str]; 4] = [
        &["--policy", "lazy", "--schedule", "4:0.7,8:0.4"],
        &["--policy", "random", "--drop-ratio", "0.4", "--seed", "7"],
        &["--policy", "static", "--static-layer", "3", "--static-fraction", "0.5"],
        &["--policy", "baseline"],
    ];
    for (i, flags) in flag_sets.iter().enumerate() {
        let mut reports = Vec::new();
        for run in 0..2 {
            let out = ctx.p(&format!("c9_run_{i}_{run}.json"));
            let mut args = vec!["run", "--model", &a, "--prompt-file"];
            let pf = prompt_file.display().to_string();
            args.push(&pf);
            args.extend_from_slice(flags);
            args.extend_from_slice(&["--max-new", "12", "--out", &out]);
            cli_ok(&args)?;
            reports.push(strip_timings(read_json(Path::new(&out))));
        }
        ensure(reports[0] == reports[1], || format!("{} reports differ", flags[1]))?;
    }
    Ok("gen-model byte-identical; run reports identical (timings excluded) for lazy, random, static, baseline".into())
}

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f32) -> Matrix {
    Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.random_range(-scale..scale)).collect()).unwrap()
}

fn softmax64(xs: &[f64]) -> Vec<f64> {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = xs.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

fn c10_kernels() -> Outcome {
    let mut worst = [0.0f64; 4];
    for seed in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(10_000 + seed);

        // matmul: exact against the naive triple loop.
        let (m, k, n) = (rng.random_range(1..24), rng.random_range(1..24), rng.random_range(1..90));
        let a = random_matrix(&mut rng, m, k, 2.0);
        let b = random_matrix(&mut rng, k, n, 2.0);
        let c = tensor::matmul(&a, &b).map_err(|e| e.to_string())?;
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0f32;
                for kk in 0..k {
                    s += a.get(i, kk) * b.get(kk, j);
                }
                ensure(s.to_bits() == c.get(i, j).to_bits(), || format!("matmul seed {seed} ({i},{j})"))?;
            }
        }

        // softmax: within 1e-7 of the exp-normalize formula.
        let cols = rng.random_range(1..20);
        let x = random_matrix(&mut rng, 3, cols, 5.0);
        let p = tensor::softmax_rows(&x, None).map_err(|e| e.to_string())?;
        for r in 0..3 {
            let want = softmax64(&x.row(r).iter().map(|&v| v as f64).collect::<Vec<_>>());
            for (g, w) in p.row(r).iter().zip(&want) {
                worst[0] = worst[0].max((*g as f64 - w).abs());
            }
        }

        // attention: within 1e-6 of a dense-mask reference.
        let heads = rng.random_range(1..4);
        let hd = 2 * rng.random_range(1..5);
        let len = rng.random_range(1..17);
        let pos: Vec<usize> = (0..len).collect();
        let q = random_matrix(&mut rng, len, heads * hd, 1.5);
        let kk = random_matrix(&mut rng, len, heads * hd, 1.5);
        let v = random_matrix(&mut rng, len, heads * hd, 1.5);
        let (out, probs) = tensor::attention(&q, &kk, &v, &pos, &pos, heads).map_err(|e| e.to_string())?;
        for h in 0..heads {
            for i in 0..len {
                let logits: Vec<f64> = (0..len)
                    .map(|j| {
                        if j > i {
                            f64::NEG_INFINITY
                        } else {
                            (0..hd).map(|c| q.get(i, h * hd + c) as f64 * kk.get(j, h * hd + c) as f64).sum::<f64>()
                                / (hd as f64).sqrt()
                        }
                    })
                    .collect();
                let pr = softmax64(&logits);
                let row = probs.row(h, i).unwrap();
                for j in 0..len {
                    worst[1] = worst[1].max((row[j] as f64 - pr[j]).abs());
                    if j > i {
                        ensure(row[j] == 0.0, || format!("attention seed {seed}: masked prob nonzero"))?;
                    }
                }
                for c in 0..hd {
                    let want: f64 = (0..len).map(|j| pr[j] * v.get(j, h * hd + c) as f64).sum();
                    worst[1] = worst[1].max((out.get(i, h * hd + c) as f64 - want).abs());
                }
            }
        }

        // gated MLP: within 1e-6 of the formula.
        let (rows, d, ff) = (rng.random_range(1..4), rng.random_range(1..20), rng.random_range(1..30));
        let xm = random_matrix(&mut rng, rows, d, 1.0);
        let wg = random_matrix(&mut rng, d, ff, 0.5);
        let wu = random_matrix(&mut rng, d, ff, 0.5);
        let wd = random_matrix(&mut rng, ff, d, 0.5);
        let y = tensor::gated_mlp(&xm, &wg, &wu, &wd).map_err(|e| e.to_string())?;
        for r in 0..rows {
            let hidden: Vec<f64> = (0..ff)
                .map(|f| {
                    let g: f64 = (0..d).map(|c| xm.get(r, c) as f64 * wg.get(c, f) as f64).sum();
                    let u: f64 = (0..d).map(|c| xm.get(r, c) as f64 * wu.get(c, f) as f64).sum();
                    g / (1.0 + (-g).exp()) * u
                })
                .collect();
            for c in 0..d {
                let want: f64 = (0..ff).map(|f| hidden[f] * wd.get(f, c) as f64).sum();
                worst[2] = worst[2].max((y.get(r, c) as f64 - want).abs());
            }
        }

        // rms_norm: within 1e-6 of the formula.
        let width = rng.random_range(1..40);
        let xr = random_matrix(&mut rng, 2, width, 3.0);
        let gain: Vec<f32> = (0..width).map(|_| rng.random_range(0.5..1.5)).collect();
        let nr = tensor::rms_norm(&xr, &gain).map_err(|e| e.to_string())?;
        for r in 0..2 {
            let ms = xr.row(r).iter().map(|&v| (v as f64).powi(2)).sum::<f64>() / width as f64;
            for c in 0..width {
                let want = xr.get(r, c) as f64 / (ms + 1e-5).sqrt() * gain[c] as f64;
                worst[3] = worst[3].max((nr.get(r, c) as f64 - want).abs());
            }
        }
    }
    let [sm, att, mlp, rms] = worst;
    ensure(sm <= 1e-7, || format!("softmax max error {sm:e}"))?;
    ensure(att <= 1e-6, || format!("attention max error {att:e}"))?;
    ensure(mlp <= 1e-6, || format!("MLP max error {mlp:e}"))?;
    ensure(rms <= 1e-6, || format!("rms_norm max error {rms:e}"))?;
    Ok(format!(
        "100 instances each: matmul exact; max error softmax {sm:.1e}, attention {att:.1e}, MLP {mlp:.1e}, rms_norm {rms:.1e}"
    ))
}

fn main() {
    // `cargo test` passes harness flags such as `--nocapture`; a name filter
    // that does not mention this suite skips it.
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    if !filters.is_empty() && !filters.iter().any(|f| "acceptance".contains(f.as_str())) {
        return;
    }

    let dir = tempfile::tempdir().expect("temp dir");
    let model = generate_random_model(ModelConfig::default(), 0).expect("default model");
    let model_path = dir.path().join("model.lzwt");
    cli_ok(&["gen-model", "--out", &model_path.display().to_string()]).expect("gen-model");
    let ctx = Ctx { dir, model, model_path };

    let mut results: Vec<(&str, Outcome)> = vec![("C1 baseline equivalence", c1_baseline_equivalence(&ctx))];
    let (c2, c3) = c2_c3_ledger_and_caches(&ctx);
    results.push(("C2 at-most-once ledger", c2));
    results.push(("C3 cache invariants", c3));
    results.push(("C4 event arithmetic", c4_event_arithmetic(&ctx)));
    results.push(("C5 revival", c5_revival(&ctx)));
    let (c6, c7) = c6_c7_ttft(&ctx);
    results.push(("C6 TTFT speedup", c6));
    results.push(("C7 percent computed", c7));
    results.push(("C8 sweep integrity", c8_sweep(&ctx)));
    results.push(("C9 determinism", c9_determinism(&ctx)));
    results.push(("C10 kernel oracles", c10_kernels()));

    let mut failed = 0;
    for (name, outcome) in &results {
        match outcome {
            Ok(detail) => println!("PASS {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL {name}: {detail}");
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", results.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
