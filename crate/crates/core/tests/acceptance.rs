//! Acceptance criteria 1-10, one PASS/FAIL line each.
//!
//! Run with `cargo test --release -p altermoma --test acceptance`. The
//! process exits with status 1 when any criterion fails.

use std::collections::BTreeMap;
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use altermoma::altermoma::run_altermoma;
use altermoma::baselines::Method;
use altermoma::compact::{compact, mac_report};
use altermoma::config::{ExperimentConfig, VerifyConfig};
use altermoma::experiment::{ablate_seed, compare, prepare, prune, prune_config};
use altermoma::model::{ModalityMasks, Partition};
use altermoma::oracle::{
    deci_fidelity_seed, fd_check_seed, kept_count_check, normalization_seed, prop1_error,
    prop1_sweep_seed, random_batches, snip_deci_gap, Quadratic, KEPT_COUNT_RATIOS,
};
use altermoma::stats::mean;
use altermoma::Result;

const SEEDS5: [u64; 5] = [0, 1, 2, 3, 4];

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Result<Outcome> {
    Ok(Outcome { pass, detail })
}

fn c1_gradients() -> Result<Outcome> {
    let v = VerifyConfig::default();
    let errs = v
        .seeds
        .iter()
        .map(|&s| fd_check_seed(s, v.fd_step))
        .collect::<Result<Vec<_>>>()?;
    let worst = errs.iter().copied().fold(0.0, f64::max);
    outcome(
        worst < 1e-5,
        format!(
            "max rel error {worst:.2e} over {} graphs (< 1e-5)",
            errs.len()
        ),
    )
}

fn c2_taylor() -> Result<Outcome> {
    let rs = (0..10)
        .map(deci_fidelity_seed)
        .collect::<Result<Vec<_>>>()?;
    let worst = rs.iter().copied().fold(f64::INFINITY, f64::min);
    outcome(
        worst >= 0.8,
        format!("min Spearman {worst:.3} over 10 seeds (>= 0.8)"),
    )
}

fn c3_prop1() -> Result<Outcome> {
    let lrs = [1e-2, 1e-3, 1e-4];
    let mut monotone = 0;
    for s in 0..10 {
        let e = prop1_sweep_seed(s, &lrs, 4)?;
        monotone += (e[1] < e[0] && e[2] < e[1]) as usize;
    }
    let q = Quadratic { theta0: 1.3 };
    let gap = (prop1_error(&q, 1, 0.1)? - q.one_step_error(0.1)).abs();
    outcome(
        monotone >= 9 && gap <= 1e-10,
        format!("monotone in {monotone}/10 seeds (>= 9), quadratic closed-form gap {gap:.1e} (<= 1e-10)"),
    )
}

fn c4_bookkeeping() -> Result<Outcome> {
    let mut worst: f64 = 0.0;
    let mut mismatches = Vec::new();
    for seed in 0..3 {
        for structured in [false, true] {
            worst = worst.max(normalization_seed(seed, structured)?);
            for rho in KEPT_COUNT_RATIOS {
                let (kept, k) = kept_count_check(seed, rho, structured)?;
                if kept != k {
                    mismatches.push(format!(
                        "seed {seed} rho {rho} structured {structured}: {kept} != {k}"
                    ));
                }
            }
        }
    }
    outcome(
        worst <= 1e-9 && mismatches.is_empty(),
        format!("max |sum - 1| {worst:.1e} (<= 1e-9), kept-count mismatches {mismatches:?}"),
    )
}

fn c5_snip() -> Result<Outcome> {
    let gaps = (0..3).map(snip_deci_gap).collect::<Result<Vec<_>>>()?;
    let worst = gaps.iter().copied().fold(0.0, f64::max);
    outcome(
        worst <= 1e-12,
        format!("max |snip - deci| {worst:.1e} (<= 1e-12)"),
    )
}

fn planted_config() -> ExperimentConfig {
    ExperimentConfig::from_toml("[model]\nkind = \"planted\"\n").expect("planted config")
}

fn c6_planted() -> Result<Outcome> {
    let mut wins = 0;
    let mut lines = Vec::new();
    for seed in SEEDS5 {
        let mut cfg = planted_config();
        cfg.seed = seed;
        cfg.prune.structured = true;
        let p = prepare(&cfg)?;
        let layout = p.layout.clone().expect("planted layout");
        let mut pcfg = prune_config(&cfg);

        let mut probe = p.model.clone();
        let (ledger, _) = run_altermoma(&mut probe, &p.splits.train, &pcfg)?;
        let reri = |ids: &[String]| {
            mean(
                &ids.iter()
                    .map(|i| ledger.get(i).unwrap().reri_mu_l0.unwrap())
                    .collect::<Vec<_>>(),
            )
        };
        let (dup, own) = (reri(&layout.duplicate), reri(&layout.camera_only));

        // Removal order: lowest score first, ties removed from the larger id.
        let mut order: Vec<_> = ledger.entries.iter().collect();
        order.sort_by(|a, b| {
            a.score
                .unwrap()
                .total_cmp(&b.score.unwrap())
                .then(b.id.cmp(&a.id))
        });
        let first_cam = order
            .iter()
            .position(|e| e.partition == Partition::Camera)
            .expect("camera units");
        pcfg.rho = (first_cam + 1) as f64 / order.len() as f64;

        let mut model = p.model.clone();
        let (pruned, _) = run_altermoma(&mut model, &p.splits.train, &pcfg)?;
        let removed: Vec<_> = pruned
            .entries
            .iter()
            .filter(|e| e.partition == Partition::Camera && e.kept == Some(false))
            .map(|e| e.id.clone())
            .collect();
        let dup_first = removed.len() == 1 && layout.duplicate.contains(&removed[0]);
        let ok = dup > own && dup_first;
        wins += ok as usize;
        lines.push(format!(
            "seed {seed}: reri dup {dup:.3e} own {own:.3e}, removed {removed:?}"
        ));
    }
    outcome(
        wins >= 4,
        format!("{wins}/5 seeds (>= 4); {}", lines.join("; ")),
    )
}

fn c7_compare() -> Result<Outcome> {
    let methods = [Method::AlterMoma, Method::Snip, Method::Magnitude];
    let rhos = [0.8, 0.9];
    let mut wins = 0;
    let mut gaps: BTreeMap<u64, Vec<f64>> = BTreeMap::new();
    for seed in SEEDS5 {
        let cfg = ExperimentConfig {
            seed,
            ..ExperimentConfig::default()
        };
        let p = prepare(&cfg)?;
        let rows = compare(&cfg, &p, &methods, &rhos)?;
        let loss = |m: Method, rho: f64| {
            rows.iter()
                .find(|r| r.method == m && r.rho == rho)
                .unwrap()
                .val_loss
        };
        for rho in rhos {
            let (a, s, m) = (
                loss(Method::AlterMoma, rho),
                loss(Method::Snip, rho),
                loss(Method::Magnitude, rho),
            );
            if rho == 0.8 && a <= s && a <= m {
                wins += 1;
            }
            gaps.entry((rho * 100.0) as u64)
                .or_default()
                .push(s.min(m) - a);
        }
    }
    let (g8, g9) = (mean(&gaps[&80]), mean(&gaps[&90]));
    outcome(
        wins >= 4 && g9 >= g8,
        format!("rho 0.8: AlterMOMA best in {wins}/5 seeds (>= 4); mean gap rho 0.8 {g8:.4}, rho 0.9 {g9:.4} (0.9 >= 0.8)"),
    )
}

fn c8_ablation() -> Result<Outcome> {
    let cfg = planted_config();
    let mut by_ratio: BTreeMap<usize, (f64, Vec<f64>)> = BTreeMap::new();
    for &seed in &cfg.ablation.seeds {
        let c = ExperimentConfig {
            seed,
            ..cfg.clone()
        };
        let p = prepare(&c)?;
        for (i, r) in ablate_seed(&c, &p)?.into_iter().enumerate() {
            by_ratio
                .entry(i)
                .or_insert((r.beta_over_alpha, Vec::new()))
                .1
                .push(r.val_loss);
        }
    }
    let means: Vec<(f64, f64)> = by_ratio
        .values()
        .map(|(ratio, v)| (*ratio, mean(v)))
        .collect();
    let best = means.iter().min_by(|a, b| a.1.total_cmp(&b.1)).unwrap().0;
    let shown: Vec<String> = means.iter().map(|(r, l)| format!("{r}:{l:.4}")).collect();
    outcome(
        best != 0.0,
        format!(
            "argmin beta/alpha = {best} (must not be 0); mean loss [{}]",
            shown.join(", ")
        ),
    )
}

fn c9_structured() -> Result<Outcome> {
    let mut lines = Vec::new();
    let mut ok = true;
    for (seed, rho) in [(0, 0.8), (1, 0.5)] {
        let mut cfg = ExperimentConfig {
            seed,
            ..ExperimentConfig::default()
        };
        cfg.prune.structured = true;
        cfg.prune.rho = rho;
        let p = prepare(&cfg)?;
        let out = prune(
            &cfg,
            &p.model,
            &p.splits.train,
            &p.splits.val,
            Method::AlterMoma,
        )?;
        let c = compact(&out.model)?;
        let b = &random_batches(out.model.arch(), 1, 100, 0xacce + seed)?[0];
        let full = out
            .model
            .predict(&b.x_lidar, &b.x_camera, ModalityMasks::UNMASKED)?;
        let same = c.predict(&b.x_lidar, &b.x_camera)? == full;
        let r = mac_report(&out.model, &c);
        let agree = (r.reduction - r.reduction_from_masks).abs() <= 0.01;
        ok &= same && agree;
        lines.push(format!(
            "seed {seed} rho {rho}: bit-exact {same}, MAC reduction compact {:.4} vs masks {:.4}, removed channels {:.4}",
            r.reduction, r.reduction_from_masks, r.removed_channel_fraction
        ));
    }
    outcome(ok, lines.join("; "))
}

const CLI_CONFIG: &str = r#"
seed = 5
[data]
n_train = 384
n_val = 128
[pretrain]
epochs = 2
[train]
epochs = 2
[finetune]
epochs = 1
[prune]
reactivation_batches = 4
eval_batches = 2
[imp]
rounds = 2
[synflow]
iterations = 5
[compare]
rhos = [0.8, 0.9]
seeds = [0, 1]
[ablation]
grid = [0.0, 1.0]
seeds = [0]
[verify]
seeds = [0, 1]
prop1_min_monotone = 2
"#;

fn run_cli(dir: &Path, args: &[&str], stdout_name: &str) -> std::result::Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_altermoma"))
        .current_dir(dir)
        .arg("--config")
        .arg("cfg.toml")
        .args(args)
        .output()
        .expect("run altermoma");
    if !out.status.success() {
        return Err(format!(
            "{args:?} exited with {}: {}",
            out.status,
            String::from_utf8_lossy(&out.stderr).trim()
        ));
    }
    std::fs::write(dir.join(stdout_name), out.stdout).map_err(|e| e.to_string())
}

fn cli_pass(dir: &Path) -> std::result::Result<(), String> {
    std::fs::write(dir.join("cfg.toml"), CLI_CONFIG).unwrap();
    run_cli(dir, &["gen-data", "--out", "data.bin"], "gen.csv")?;
    run_cli(
        dir,
        &["pretrain", "--data", "data.bin", "--out", "pre.bin"],
        "pretrain.csv",
    )?;
    run_cli(
        dir,
        &[
            "train-fusion",
            "--model",
            "pre.bin",
            "--data",
            "data.bin",
            "--out",
            "fused.bin",
        ],
        "train.csv",
    )?;
    for m in Method::ALL {
        let name = m.to_string();
        let out = format!("pruned-{name}.bin");
        run_cli(
            dir,
            &[
                "prune",
                "--model",
                "fused.bin",
                "--data",
                "data.bin",
                "--method",
                &name,
                "--out",
                &out,
            ],
            &format!("prune-{name}.csv"),
        )?;
    }
    run_cli(
        dir,
        &[
            "--structured",
            "prune",
            "--model",
            "fused.bin",
            "--method",
            "altermoma",
            "--out",
            "pruned-structured.bin",
        ],
        "prune-structured.csv",
    )?;
    run_cli(dir, &["compare", "--out", "compare.csv"], "compare.stdout")?;
    run_cli(dir, &["ablate", "--out", "ablate.csv"], "ablate.stdout")?;
    run_cli(
        dir,
        &[
            "graddiff-report",
            "--model",
            "fused.bin",
            "--data",
            "data.bin",
            "--out",
            "graddiff.csv",
        ],
        "graddiff.stdout",
    )?;
    run_cli(dir, &["verify", "--out", "verify.csv"], "verify.stdout")
}

fn c10_reproducible() -> Result<Outcome> {
    let (a, b) = (tempfile::tempdir()?, tempfile::tempdir()?);
    if let Err(e) = cli_pass(a.path()).and_then(|_| cli_pass(b.path())) {
        return outcome(false, e);
    }
    let mut names: Vec<_> = std::fs::read_dir(a.path())?
        .map(|e| e.unwrap().file_name())
        .collect();
    names.sort();
    let mut differ = Vec::new();
    for n in &names {
        if std::fs::read(a.path().join(n))? != std::fs::read(b.path().join(n))? {
            differ.push(n.to_string_lossy().into_owned());
        }
    }
    let csvs = names
        .iter()
        .filter(|n| n.to_string_lossy().ends_with(".csv"))
        .count();
    outcome(
        differ.is_empty(),
        format!(
            "{} files ({csvs} CSV) compared across two runs; differing: {differ:?}",
            names.len()
        ),
    )
}

fn main() {
    let criteria: [(&str, fn() -> Result<Outcome>); 10] = [
        ("gradient substrate", c1_gradients),
        ("Taylor fidelity", c2_taylor),
        ("step-size scaling", c3_prop1),
        ("score bookkeeping", c4_bookkeeping),
        ("single-shot saliency identity", c5_snip),
        ("planted redundancy", c6_planted),
        ("method comparison", c7_compare),
        ("ablation shape", c8_ablation),
        ("structured equivalence", c9_structured),
        ("CLI reproducibility", c10_reproducible),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let t = Instant::now();
        let (pass, detail) = match f() {
            Ok(o) => (o.pass, o.detail),
            Err(e) => (false, format!("error: {e}")),
        };
        failed += !pass as usize;
        println!(
            "criterion {:>2} {} {name} ({:.1}s): {detail}",
            i + 1,
            if pass { "PASS" } else { "FAIL" },
            t.elapsed().as_secs_f64()
        );
    }
    println!("acceptance: {}/10 criteria pass", 10 - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
