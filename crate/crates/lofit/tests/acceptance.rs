// SPDX-License-Identifier: MIT OR Apache-2.0

//! Acceptance suite: one PASS/FAIL line per criterion, exit status 1 if any
//! criterion fails. Trains three small base models, so it takes minutes.

#[path = "../../core/tests/support/gradcases.rs"]
mod gradcases;
#[path = "../../core/tests/support/oracles.rs"]
mod oracles;

use std::collections::BTreeMap;
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use lofit::checkpoint;
use lofit::experiment::{eval_parallel, gate, generate_tasks, pretrain_base, tune_offsets, TaskObjective};
use lofit::formats::sha256_hex;
use lofit::ExperimentConfig;
use lofit_core::localize::{
    jaccard, k_from_percent, norm_scores, param_count, random_heads, select_top_k, train_scaling_factors, SelectionConfig,
};
use lofit_core::tasks::headline;
use lofit_core::train::dpo_loss;
use lofit_core::{HeadId, InterventionSet, Model, NoHooks, ScalingParams, SelectionMethod, TaskData, TaskKind};

struct Verdict {
    id: u32,
    name: &'static str,
    passed: bool,
    detail: String,
}

fn verdict(id: u32, name: &'static str, passed: bool, detail: String) -> Verdict {
    let v = Verdict { id, name, passed, detail };
    println!("{} [{}] {}: {}", if v.passed { "PASS" } else { "FAIL" }, v.id, v.name, v.detail);
    v
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn heads_str(hs: &[HeadId]) -> String {
    hs.iter().map(ToString::to_string).collect::<Vec<_>>().join(" ")
}

fn fmt(xs: &[f64]) -> String {
    let parts: Vec<String> = xs.iter().map(|x| format!("{x:.3}")).collect();
    format!("[{}]", parts.join(", "))
}

fn autodiff() -> Verdict {
    let start = Instant::now();
    let (mut n, mut failed, mut worst) = (0, Vec::new(), 0.0f32);
    for seed in 0..10 {
        for c in gradcases::primitive_cases(seed).into_iter().chain(gradcases::transformer_cases(seed)) {
            n += 1;
            worst = worst.max(c.report.max_rel_err);
            if !c.report.passed {
                failed.push(format!("{} seed {}", c.name, c.seed));
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    verdict(
        1,
        "autodiff vs central differences",
        failed.is_empty() && secs < 120.0,
        format!("{n} cases over 10 seeds, max rel err {worst:.2e} (tol {:.0e}), {secs:.1}s, failures {failed:?}", gradcases::TOL),
    )
}

fn identity(model: &Model, data: &TaskData) -> Verdict {
    let bits = |h: &dyn lofit_core::HookSource, t: &[usize]| -> Vec<u32> {
        model.forward(t, h, false).unwrap().logits.data().iter().map(|x| x.to_bits()).collect()
    };
    let zeros: BTreeMap<HeadId, Vec<f32>> = model.config.all_heads().map(|h| (h, vec![0.0; model.config.d_head])).collect();
    let zero_set = InterventionSet::new(zeros, 1.0).unwrap();
    let empty = InterventionSet::empty(1.0);
    let unit = ScalingParams::zeros(&model.config).unwrap();
    let mut ok = [true; 3];
    for e in data.splits.test.iter().take(20) {
        let base = bits(&NoHooks, &e.prompt);
        ok[0] &= bits(&empty, &e.prompt) == base;
        ok[1] &= bits(&zero_set, &e.prompt) == base;
        ok[2] &= bits(&unit, &e.prompt) == base;
    }
    verdict(
        2,
        "identity interventions bitwise equal",
        ok.iter().all(|&x| x),
        format!("20 prompts on the trained base: empty {}, zero offsets {}, zero scaling {}", ok[0], ok[1], ok[2]),
    )
}

fn accounting() -> Verdict {
    let got = [param_count(96, 128), param_count(160, 128), param_count(48, 256)];
    verdict(3, "parameter accounting", got == [12_288, 20_480, 12_288], format!("{got:?} vs [12288, 20480, 12288]"))
}

fn metric_oracles() -> Verdict {
    let mut bad = Vec::new();
    let mut details = BTreeMap::new();
    for seed in 0..5 {
        for c in oracles::metric_checks(seed) {
            if !c.passed {
                bad.push(format!("{} seed {seed}: {}", c.metric, c.detail));
            }
            details.entry(c.metric).or_insert(c.detail);
        }
    }
    verdict(4, "metric oracles", bad.is_empty(), format!("5 seeds; {details:?}; failures {bad:?}"))
}

/// Step 1 on the task's training data at `lambda`, returning the scaling factors.
fn step_one(model: &Model, data: &TaskData, cfg: &ExperimentConfig, lambda: f32, seed: u64) -> ScalingParams {
    let obj = TaskObjective::for_task(data);
    let s = &cfg.selection;
    let sel = SelectionConfig { k: 1, lambda, sigma_a: s.sigma_a, seed, lr: s.lr };
    train_scaling_factors(model, obj.as_objective(), &sel, &cfg.train_config(data.kind, seed), &mut |_| {}).unwrap()
}

fn headline_with(model: &Model, data: &TaskData, iv: &InterventionSet) -> f64 {
    headline(&eval_parallel(model, iv, data.kind, &data.splits.test, 1).unwrap())
}

/// Everything measured for one task and seed.
struct SeedRun {
    lofit: f64,
    lofit_1: f64,
    random: f64,
    heads: Vec<HeadId>,
    a: ScalingParams,
}

struct TaskRun {
    kind: TaskKind,
    zero_shot: f64,
    probe_em: f64,
    gate_passed: bool,
    secs: f64,
    seeds: Vec<SeedRun>,
    model: Model,
    data: TaskData,
    cfg: ExperimentConfig,
    checkpoint_hash: String,
}

fn run_task(kind: TaskKind) -> TaskRun {
    let start = Instant::now();
    let cfg = ExperimentConfig { task: kind.name().into(), ..ExperimentConfig::default() }.resolve().unwrap();
    let tasks = generate_tasks(&[kind], &cfg).unwrap();
    let data = tasks[&kind].clone();
    let (model, _) = pretrain_base(&cfg, &tasks, &mut |_| {}).unwrap();
    let checkpoint_hash = sha256_hex(&checkpoint::encode(&model));
    let g = gate(&model, &data, 1).unwrap();
    let k10 = k_from_percent(&model.config, 10.0).unwrap();
    let k1 = k_from_percent(&model.config, 1.0).unwrap();
    let mut seeds = Vec::new();
    for &seed in &cfg.seeds {
        let a = step_one(&model, &data, &cfg, cfg.selection.lambda, seed);
        let table = norm_scores(&a.a, SelectionMethod::LofitNorm).unwrap();
        let heads = select_top_k(&table, k10).unwrap();
        let run = |h: &[HeadId]| headline_with(&model, &data, &tune_offsets(&model, &data, &cfg, h, seed, &mut |_| {}).unwrap());
        let lofit = run(&heads);
        let lofit_1 = run(&select_top_k(&table, k1).unwrap());
        let random = run(&random_heads(&model.config, k10, seed).unwrap());
        println!("  {kind} seed {seed}: heads {} lofit {lofit:.3} (K=1: {lofit_1:.3}) random {random:.3}", heads_str(&heads));
        seeds.push(SeedRun { lofit, lofit_1, random, heads, a });
    }
    TaskRun {
        kind,
        zero_shot: g.zero_shot,
        probe_em: g.probe_em,
        gate_passed: g.passed,
        secs: start.elapsed().as_secs_f64(),
        seeds,
        model,
        data,
        cfg,
        checkpoint_hash,
    }
}

fn table_one(runs: &[&TaskRun]) -> Verdict {
    let mut ok = true;
    let mut parts = Vec::new();
    for r in runs {
        let lofit: Vec<f64> = r.seeds.iter().map(|s| s.lofit).collect();
        let gain = mean(&lofit) - r.zero_shot;
        ok &= gain >= 0.20 && r.gate_passed && r.secs < 1800.0;
        parts.push(format!(
            "{}: gate probe EM {:.3} ({}), 0-shot {:.3}, LoFiT {} mean {:.3}, gain {:+.3}, {:.0}s",
            r.kind,
            r.probe_em,
            if r.gate_passed { "passed" } else { "failed" },
            r.zero_shot,
            fmt(&lofit),
            mean(&lofit),
            gain,
            r.secs
        ));
    }
    verdict(5, "LoFiT 10% beats 0-shot by 20 EM points", ok, parts.join("; "))
}

fn table_two(runs: &[&TaskRun]) -> Verdict {
    let (mut lofit, mut random) = (Vec::new(), Vec::new());
    let mut parts = Vec::new();
    for r in runs {
        let l: Vec<f64> = r.seeds.iter().map(|s| s.lofit).collect();
        let x: Vec<f64> = r.seeds.iter().map(|s| s.random).collect();
        parts.push(format!("{}: LoFiT heads {} random heads {}", r.kind, fmt(&l), fmt(&x)));
        lofit.extend(l);
        random.extend(x);
    }
    let (l, x) = (mean(&lofit), mean(&random));
    verdict(6, "LoFiT heads vs random heads", l >= x, format!("mean {l:.3} vs {x:.3}; {}", parts.join("; ")))
}

fn sparsity(run: &TaskRun) -> Verdict {
    let grid = [0.0f32, 5e-4, 5e-3, 5e-2];
    let mut ok = true;
    let mut parts = Vec::new();
    for (i, &seed) in run.cfg.seeds.iter().enumerate() {
        let mut counts = Vec::new();
        let mut norms = Vec::new();
        for &lambda in &grid {
            let a = if lambda == run.cfg.selection.lambda {
                run.seeds[i].a.clone()
            } else {
                step_one(&run.model, &run.data, &run.cfg, lambda, seed)
            };
            let ns: Vec<f64> = a.a.values().map(|t| t.l2_norm() as f64).collect();
            counts.push(ns.iter().filter(|&&n| n > 1e-3).count());
            norms.push(mean(&ns));
        }
        ok &= counts.windows(2).all(|w| w[1] <= w[0]);
        parts.push(format!("seed {seed}: counts {counts:?} mean norm {}", fmt(&norms)));
    }
    verdict(7, "active heads non-increasing in lambda", ok, format!("{} lambda {grid:?}; {}", run.kind, parts.join("; ")))
}

fn stability(runs: &[&TaskRun]) -> Verdict {
    let mut ok = true;
    let mut parts = Vec::new();
    for r in runs {
        let j = jaccard(&r.seeds[0].heads, &r.seeds[1].heads).unwrap();
        ok &= j >= 0.5;
        parts.push(format!("{}: {} vs {} -> {j:.3}", r.kind, heads_str(&r.seeds[0].heads), heads_str(&r.seeds[1].heads)));
    }
    verdict(8, "top-10% heads stable across seeds", ok, parts.join("; "))
}

fn k_curve(runs: &[&TaskRun]) -> Verdict {
    let (mut k10, mut k1) = (Vec::new(), Vec::new());
    for r in runs {
        k10.extend(r.seeds.iter().map(|s| s.lofit));
        k1.extend(r.seeds.iter().map(|s| s.lofit_1));
    }
    let (a, b) = (mean(&k10), mean(&k1));
    verdict(9, "EM at K=10% >= EM at K=1%", a >= b, format!("K=10% {} mean {a:.3}; K=1% {} mean {b:.3}", fmt(&k10), fmt(&k1)))
}

fn preference(run: &TaskRun) -> Verdict {
    let lofit: Vec<f64> = run.seeds.iter().map(|s| s.lofit).collect();
    let gain = mean(&lofit) - run.zero_shot;
    let lp = [-1.25f32, -0.5, -3.0];
    let lr = [-2.0f32, -4.5, -0.75];
    let at_ref = dpo_loss(&lp, &lr, &lp, &lr, run.cfg.training.beta).unwrap() as f64;
    let ln2_err = (at_ref - std::f64::consts::LN_2).abs();
    verdict(
        10,
        "DPO bias tuning lifts MC1 by 10 points",
        gain >= 0.10 && ln2_err <= 1e-6 && run.gate_passed,
        format!(
            "base MC1 {:.3} (probe EM {:.3}), tuned {} mean {:.3}, gain {gain:+.3}; loss at reference {at_ref:.7} (|diff from ln 2| {ln2_err:.1e})",
            run.zero_shot,
            run.probe_em,
            fmt(&lofit),
            mean(&lofit)
        ),
    )
}

const TINY_CONFIG: &str = r#"{
  "task": "relations",
  "model": {"n_layers": 2, "n_heads": 4, "d_model": 16, "mlp_hidden": 32},
  "data": {
    "relations": {"n": 40, "pretrain_one_hop": 40, "pretrain_compose": 40, "pretrain_shortcut": 40, "probes": 10},
    "counterfactual": {"n": 40, "pretrain_fact_edits": 40, "pretrain_ignored_edits": 20, "probes": 10, "fact_repeats": 1}
  },
  "pretrain": {"tasks": ["relations", "counterfactual"], "epochs": 2},
  "training": {"epochs": 1},
  "sweep": {"percents": [10, 20]},
  "transfer": {"source": "relations", "target": "counterfactual"},
  "seeds": [0, 1]
}"#;

fn run_cli(out: &Path, args: &[&str]) -> Result<(), String> {
    let status = Command::new(env!("CARGO_BIN_EXE_lofit"))
        .args(args)
        .arg("--config")
        .arg(out.join("config.json"))
        .arg("--out")
        .arg(out)
        .output()
        .map_err(|e| e.to_string())?;
    if status.status.success() {
        Ok(())
    } else {
        Err(format!("lofit {args:?} failed: {}", String::from_utf8_lossy(&status.stderr)))
    }
}

/// Runs every command from scratch in `out` and hashes every output file
/// except the wall-clock sidecars.
fn cli_session(out: &Path) -> Result<BTreeMap<String, String>, String> {
    if out.exists() {
        std::fs::remove_dir_all(out).map_err(|e| e.to_string())?;
    }
    std::fs::create_dir_all(out).map_err(|e| e.to_string())?;
    std::fs::write(out.join("config.json"), TINY_CONFIG).map_err(|e| e.to_string())?;
    let heads = out.join("heads.json");
    let iv = out.join("intervention.json");
    let (heads, iv) = (heads.to_str().unwrap(), iv.to_str().unwrap());
    run_cli(out, &["pretrain"])?;
    run_cli(out, &["select"])?;
    run_cli(out, &["tune", "--heads", heads])?;
    run_cli(out, &["eval", "--intervention", iv])?;
    run_cli(out, &["sweep-k"])?;
    run_cli(out, &["transfer"])?;
    run_cli(out, &["analyze", "--intervention", iv, "--heads", heads])?;
    let mut hashes = BTreeMap::new();
    let mut stack = vec![out.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).map_err(|e| e.to_string())? {
            let p = entry.map_err(|e| e.to_string())?.path();
            let name = p.strip_prefix(out).unwrap().to_string_lossy().into_owned();
            if p.is_dir() {
                stack.push(p);
            } else if !name.starts_with("timing_") {
                hashes.insert(name, sha256_hex(&std::fs::read(&p).map_err(|e| e.to_string())?));
            }
        }
    }
    Ok(hashes)
}

fn freezing_and_determinism(runs: &[&TaskRun]) -> Verdict {
    let frozen: Vec<bool> = runs.iter().map(|r| sha256_hex(&checkpoint::encode(&r.model)) == r.checkpoint_hash).collect();
    let dir = tempfile::tempdir().unwrap();
    // Reports echo their paths, so the rerun uses the same directory.
    let first = cli_session(&dir.path().join("run"));
    let second = cli_session(&dir.path().join("run"));
    let (cli_ok, cli_detail) = match (first, second) {
        (Ok(a), Ok(b)) => {
            let differing: Vec<&String> = a.keys().filter(|k| b.get(*k) != a.get(*k)).collect();
            (differing.is_empty() && a.len() == b.len(), format!("{} output files compared, differing {differing:?}", a.len()))
        }
        (Err(e), _) | (_, Err(e)) => (false, e),
    };
    verdict(
        11,
        "frozen base and deterministic reruns",
        frozen.iter().all(|&x| x) && cli_ok,
        format!("checkpoint hashes unchanged after all tuning {frozen:?}; CLI rerun: {cli_detail}"),
    )
}

fn main() {
    let start = Instant::now();
    let mut verdicts = vec![autodiff(), accounting(), metric_oracles()];
    let rel = run_task(TaskKind::Relations);
    let cf = run_task(TaskKind::Counterfactual);
    let tr = run_task(TaskKind::Truthfulness);
    let gen = [&rel, &cf];
    verdicts.push(identity(&rel.model, &rel.data));
    verdicts.push(table_one(&gen));
    verdicts.push(table_two(&gen));
    verdicts.push(sparsity(&rel));
    verdicts.push(stability(&gen));
    verdicts.push(k_curve(&gen));
    verdicts.push(preference(&tr));
    verdicts.push(freezing_and_determinism(&[&rel, &cf, &tr]));
    verdicts.sort_by_key(|v| v.id);
    let failed: Vec<u32> = verdicts.iter().filter(|v| !v.passed).map(|v| v.id).collect();
    println!(
        "acceptance: {}/{} criteria passed in {:.0}s{}",
        verdicts.len() - failed.len(),
        verdicts.len(),
        start.elapsed().as_secs_f64(),
        if failed.is_empty() { String::new() } else { format!("; failed {failed:?}") }
    );
    for v in &verdicts {
        println!("{} [{}] {}", if v.passed { "PASS" } else { "FAIL" }, v.id, v.name);
    }
    if !failed.is_empty() {
        std::process::exit(1);
    }
}
