//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each,
//! and exits nonzero if any failed.

#[path = "../../core/tests/common/fd.rs"]
mod fd;
#[path = "../../core/tests/common/hand.rs"]
mod hand;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use refproto::data::{dirichlet_partition, gen_blobs};
use refproto::model::NetworkShape;
use refproto::orchestrator::{run_ablation, run_experiment, ExperimentConfig, Federation, KBudget};
use refproto::trace::privacy_scan;
use refproto::Mode;
use refproto_cli::{cmd_run, parse_config, Invocation};
use serde_json::Value;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome, Duration);

fn ablation_config_path() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/ablation.cfg")
}

fn ablation_config() -> ExperimentConfig {
    parse_config(&ablation_config_path()).expect("configs/ablation.cfg parses")
}

fn dense_equivalence() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut rounds_checked = 0;
    for case in 0..20u64 {
        let shape = NetworkShape::new(
            rng.random_range(2..7),
            rng.random_range(2..7),
            rng.random_range(1..5),
            rng.random_range(2..6),
        )
        .unwrap();
        let config = ExperimentConfig {
            shape,
            num_clients: [1, 2, 5][case as usize % 3],
            rounds: 3,
            local_epochs: rng.random_range(1..3),
            batch_size: rng.random_range(4..17),
            lr: 0.01,
            train_per_class: rng.random_range(10..30),
            test_per_class: 5,
            public_per_class: 4,
            k_budget: KBudget::Count(shape.adapter_len()),
            mode: Mode::Neither,
            seed: rng.random(),
            ..ExperimentConfig::default()
        };
        if shape.adapter_len() > 100 {
            return Err(format!("case {case}: d = {} exceeds 100", shape.adapter_len()));
        }
        let mut fed = Federation::build(&config).map_err(|e| format!("case {case}: {e}"))?;
        for t in 0..config.rounds {
            let sizes: Vec<u64> = fed.clients.iter().map(|c| c.data.len() as u64).collect();
            let round = fed.step().map_err(|e| format!("case {case}: {e}"))?;
            let total: u64 = round.local_adapters.iter().map(|(k, _)| sizes[*k]).sum();
            let mut expected = vec![0.0; shape.adapter_len()];
            for (k, local) in &round.local_adapters {
                let w = sizes[*k] as f64 / total as f64;
                for (e, v) in expected.iter_mut().zip(local) {
                    *e += w * v;
                }
            }
            if fed.server.adapter != expected {
                return Err(format!("case {case} round {t}: aggregate differs from weighted average"));
            }
            rounds_checked += 1;
        }
    }
    Ok(format!("20 configs, {rounds_checked} rounds bit-exact"))
}

fn gradient_check() -> Outcome {
    let mut worst: f64 = 0.0;
    let mut instances = 0;
    for seed in 0..30 {
        for with_anchors in [false, true] {
            let inst = fd::random_instance(1000 + seed, with_anchors);
            for lambda in [0.0, 0.5, 1.0, 5.0] {
                worst = worst.max(fd::worst_gradient_error(&inst, lambda));
                instances += 1;
            }
        }
    }
    let line = format!("{instances} instances, worst relative error {worst:.2e}");
    if worst < 1e-4 {
        Ok(line)
    } else {
        Err(line)
    }
}

fn hand_trace() -> Outcome {
    let sc = hand::replay();
    hand::check(&sc)?;
    Ok("d = 23, K = 5, two clients, one round reproduced".into())
}

fn communication_ledger() -> Outcome {
    let config = ExperimentConfig {
        num_clients: 10,
        rounds: 10,
        k_budget: KBudget::Fraction(0.1),
        mode: Mode::Full,
        ..ablation_config()
    };
    let d = config.adapter_len();
    let k = d.div_ceil(10);
    let (t, n) = (config.rounds as u64, config.num_clients as u64);
    let sparse = run_experiment(&config).map_err(|e| e.to_string())?;
    let dense = run_experiment(&ExperimentConfig { mode: Mode::NoApud, ..config.clone() }).map_err(|e| e.to_string())?;
    let totals = sparse.trace.header.totals;
    if sparse.trace.recomputed_totals() != totals {
        return Err("recomputed totals differ from header".into());
    }
    if totals.uplink_values != t * n * k as u64 || totals.uplink_indices != t * n * k as u64 {
        return Err(format!("uplink values {} != T*N*K = {}", totals.uplink_values, t * n * k as u64));
    }
    let dense_values = dense.trace.header.totals.uplink_values;
    if dense_values != t * n * d as u64 || dense.trace.recomputed_totals() != dense.trace.header.totals {
        return Err(format!("dense uplink values {dense_values} != T*N*d = {}", t * n * d as u64));
    }
    let reduction = 1.0 - totals.uplink_values as f64 / dense_values as f64;
    let line = format!(
        "d = {d}, K = {k}: {} vs {dense_values} values, {:.2}% fewer",
        totals.uplink_values,
        100.0 * reduction
    );
    if reduction >= 0.89 {
        Ok(line)
    } else {
        Err(line)
    }
}

fn ablation_ordering() -> Outcome {
    let base = ablation_config();
    let seeds: Vec<u64> = (0..10).collect();
    let per_seed = seeds
        .par_iter()
        .map(|&seed| {
            let rows = run_ablation(&ExperimentConfig { seed, ..base.clone() })?;
            let acc = |m: Mode| rows.iter().find(|(r, _)| r.mode == m).unwrap().0.final_mean_acc;
            Ok([acc(Mode::Full), acc(Mode::NoErpa), acc(Mode::NoApud), acc(Mode::Neither)])
        })
        .collect::<refproto::Result<Vec<_>>>()
        .map_err(|e| e.to_string())?;
    println!("    seed     full  no_erpa  no_apud  neither   full-no_erpa  full-neither");
    let (mut d_erpa, mut d_neither) = (0.0, 0.0);
    let mut means = [0.0; 4];
    for (seed, a) in seeds.iter().zip(&per_seed) {
        println!(
            "    {seed:>4}   {:.4}   {:.4}   {:.4}   {:.4}        {:+.4}       {:+.4}",
            a[0],
            a[1],
            a[2],
            a[3],
            a[0] - a[1],
            a[0] - a[3]
        );
        d_erpa += (a[0] - a[1]) / 10.0;
        d_neither += (a[0] - a[3]) / 10.0;
        for i in 0..4 {
            means[i] += a[i] / 10.0;
        }
    }
    println!(
        "    mean   {:.4}   {:.4}   {:.4}   {:.4}        {d_erpa:+.4}       {d_neither:+.4}",
        means[0], means[1], means[2], means[3]
    );
    let line = format!("paired mean full-no_erpa {d_erpa:+.4}, full-neither {d_neither:+.4}");
    if d_erpa > 0.0 && d_neither > 0.0 {
        Ok(line)
    } else {
        Err(line)
    }
}

fn heterogeneity() -> Outcome {
    let ds = gen_blobs(10, 600, 16, 3.0, 1.0, 0).map_err(|e| e.to_string())?;
    let mean_share = |alpha: f64| -> Result<f64, String> {
        let mut total = 0.0;
        for seed in 0..50 {
            total += dirichlet_partition(&ds, 10, alpha, seed).map_err(|e| e.to_string())?.mean_max_share(&ds);
        }
        Ok(total / 50.0)
    };
    let (skewed, flat) = (mean_share(0.5)?, mean_share(100.0)?);
    let line = format!("mean max-client share {skewed:.4} at alpha 0.5, {flat:.4} at alpha 100");
    if skewed > flat {
        Ok(line)
    } else {
        Err(line)
    }
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let inv = |name: &str| Invocation {
        config: Some(ablation_config_path()),
        out: dir.path().join(name),
        ..Invocation::default()
    };
    cmd_run(&inv("a")).map_err(|e| e.to_string())?;
    cmd_run(&inv("b")).map_err(|e| e.to_string())?;
    for name in ["metrics.csv", "trace.jsonl"] {
        let a = std::fs::read(dir.path().join("a").join(name)).map_err(|e| e.to_string())?;
        let b = std::fs::read(dir.path().join("b").join(name)).map_err(|e| e.to_string())?;
        if a != b {
            return Err(format!("{name} differs between runs"));
        }
    }
    Ok("metrics.csv and trace.jsonl byte-identical".into())
}

fn privacy() -> Outcome {
    let config = ExperimentConfig { mode: Mode::Full, ..ablation_config() };
    let result = run_experiment(&config).map_err(|e| e.to_string())?;
    let mut buf = Vec::new();
    result.trace.write_jsonl(&mut buf).map_err(|e| e.to_string())?;
    let lines: Vec<Value> = buf
        .split(|b| *b == b'\n')
        .filter(|l| !l.is_empty())
        .map(serde_json::from_slice)
        .collect::<Result<_, _>>()
        .map_err(|e| e.to_string())?;
    let findings = privacy_scan(&lines);
    match findings.first() {
        None => Ok(format!("{} records scanned, no backbone or sample fields", lines.len())),
        Some(f) => Err(format!("{} findings, first: {f}", findings.len())),
    }
}

fn main() -> ExitCode {
    let criteria: [Criterion; 8] = [
        ("1 dense equivalence", dense_equivalence, Duration::from_secs(10)),
        ("2 gradient correctness", gradient_check, Duration::from_secs(30)),
        ("3 hand trace", hand_trace, Duration::from_secs(1)),
        ("4 communication ledger", communication_ledger, Duration::from_secs(60)),
        ("5 ablation ordering", ablation_ordering, Duration::from_secs(600)),
        ("6 heterogeneity", heterogeneity, Duration::from_secs(5)),
        ("7 determinism", determinism, Duration::from_secs(60)),
        ("8 privacy structure", privacy, Duration::from_secs(5)),
    ];
    let mut failed = 0;
    for (name, run, limit) in criteria {
        let start = Instant::now();
        let outcome = std::panic::catch_unwind(run).unwrap_or_else(|_| Err("panicked".into()));
        let elapsed = start.elapsed();
        let outcome = match outcome {
            Ok(detail) if elapsed > limit => Err(format!("{detail}; took {elapsed:.1?}, limit {limit:?}")),
            other => other,
        };
        match outcome {
            Ok(detail) => println!("PASS criterion {name}: {detail} ({elapsed:.2?})"),
            Err(detail) => {
                failed += 1;
                println!("FAIL criterion {name}: {detail} ({elapsed:.2?})");
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} acceptance criteria failed");
        ExitCode::FAILURE
    }
}
