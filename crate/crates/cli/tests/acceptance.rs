//! Acceptance checks, one PASS/FAIL line per criterion.
//!
//! Runs without the libtest harness so that every criterion is reported
//! even when an earlier one fails. Exits nonzero if any criterion fails.

use std::collections::BTreeMap;
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use hetfx::binary::{amplify_point, compatible_bracket, mcnemar_upper_p, CompletionTable};
use hetfx::confirm::sweep;
use hetfx::discovery::Method;
use hetfx::joint::{assemble, CriticalValues};
use hetfx::mvn::{mvn_equicoordinate_quantile, QmcSettings};
use hetfx::normal;
use hetfx::scan::HypothesisSpec;
use hetfx::signed_rank::{clamped_deviate, signed_rank_moments, GroupMoments};
use hetfx::simlab::{generate, run_power, Scenario, SimConfig, TableCell};
use hetfx::{assign_pairs, build_conversion_matrix, MatchedPair, ObservationRecord, OutcomeKind, SplitRule, TreeBuilder};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn threshold(name: &str) -> SplitRule {
    SplitRule::Threshold {
        covariate: name.into(),
        threshold: 0.5,
    }
}

fn conversion_matrix() -> Outcome {
    let t = Instant::now();
    let mut b = TreeBuilder::new();
    let (_, male) = b.split(TreeBuilder::ROOT, threshold("male"));
    b.split(male, threshold("young"));
    let c = build_conversion_matrix(&b.finish()).map_err(|e| e.to_string())?;
    let want: Vec<Vec<u8>> = vec![vec![0, 1, 1], vec![1, 0, 0], vec![0, 1, 0], vec![0, 0, 1]];
    let secs = t.elapsed().as_secs_f64();
    check(c.entries == want && secs < 1.0, format!("C = {:?} in {secs:.3}s", c.entries))
}

fn signed_rank() -> Outcome {
    for n in 1..=200usize {
        let diffs: Vec<f64> = (1..=n).map(|r| if r % 3 == 0 { -(r as f64) } else { r as f64 }).collect();
        let m = signed_rank_moments(&diffs, 0.0, 1.0).map_err(|e| e.to_string())?;
        let i = n as f64;
        if m.mean_upper != i * (i + 1.0) / 4.0 || m.variance != i * (i + 1.0) * (2.0 * i + 1.0) / 24.0 {
            return Err(format!("I = {n}: {m:?}"));
        }
    }
    // Γ = 2 on three pairs against all 2³ sign patterns.
    let diffs = [0.3, -1.2, 2.0];
    let gamma = 2.0;
    let m = signed_rank_moments(&diffs, 0.0, gamma).unwrap();
    let enumerate = |p: f64| {
        let (mut mean, mut second) = (0.0, 0.0);
        for code in 0..8u32 {
            let (mut t, mut prob) = (0.0, 1.0);
            for rank in 1..=3u32 {
                if code >> (rank - 1) & 1 == 1 {
                    t += rank as f64;
                    prob *= p;
                } else {
                    prob *= 1.0 - p;
                }
            }
            mean += prob * t;
            second += prob * t * t;
        }
        (mean, second - mean * mean)
    };
    let (hi_mean, hi_var) = enumerate(gamma / (1.0 + gamma));
    let (lo_mean, lo_var) = enumerate(1.0 / (1.0 + gamma));
    let err = [m.mean_upper - hi_mean, m.mean_lower - lo_mean, m.variance - hi_var, m.variance - lo_var]
        .iter()
        .fold(0.0f64, |a, b| a.max(b.abs()));
    check(err < 1e-12, format!("Γ=1 exact for I ≤ 200; Γ=2 max error {err:.1e}"))
}

fn mvn_quantile() -> Outcome {
    let t = Instant::now();
    let s = QmcSettings::default();
    let q1 = mvn_equicoordinate_quantile(&[vec![1.0]], 0.95, &s).map_err(|e| e.to_string())?;
    let q2 = mvn_equicoordinate_quantile(&[vec![1.0, 0.0], vec![0.0, 1.0]], 0.95, &s).map_err(|e| e.to_string())?;
    let rho = vec![vec![1.0, 0.5, 0.5], vec![0.5, 1.0, 0.5], vec![0.5, 0.5, 1.0]];
    let q3 = mvn_equicoordinate_quantile(&rho, 0.95, &s).map_err(|e| e.to_string())?;
    let secs = t.elapsed().as_secs_f64();

    // 10⁷ draws of X_k = √ρ Z_0 + √(1−ρ) Z_k.
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    let n = 10_000_000usize;
    let h = 0.5f64.sqrt();
    let mut maxima: Vec<f64> = (0..n)
        .map(|_| {
            let z0: f64 = rng.sample(StandardNormal);
            (0..3).fold(0.0f64, |m, _| {
                let zk: f64 = rng.sample(StandardNormal);
                m.max((h * z0 + h * zk).abs())
            })
        })
        .collect();
    let k = (0.95 * n as f64) as usize;
    let (_, &mut mc, _) = maxima.select_nth_unstable_by(k, |a, b| a.total_cmp(b));

    let ok = (q1 - 1.960).abs() <= 1e-3 && (q2 - 2.236).abs() <= 2e-3 && (q3 - mc).abs() <= 3e-3 && secs < 10.0;
    check(ok, format!("1-D {q1:.4}, 2-D {q2:.4}, 3-D {q3:.4} vs Monte Carlo {mc:.4}, {secs:.2}s"))
}

fn subgroup_critical_values() -> Outcome {
    let critical = CriticalValues::new(QmcSettings::default());
    let single = critical.kappa(&[vec![1.0]], 0.04).map_err(|e| e.to_string())?;
    // Seven leaves: x1, then x2 on both sides, then x3 on three of the four.
    let mut b = TreeBuilder::new();
    let (l, r) = b.split(TreeBuilder::ROOT, threshold("x1"));
    let (ll, lr) = b.split(l, threshold("x2"));
    let (rl, _) = b.split(r, threshold("x2"));
    for id in [ll, lr, rl] {
        b.split(id, threshold("x3"));
    }
    let c = build_conversion_matrix(&b.finish()).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let leaves: Vec<GroupMoments> = (0..c.cols())
        .map(|_| {
            let size = rng.random_range(60..400);
            let d: Vec<f64> = (0..size).map(|_| 0.5 + rng.sample::<f64, _>(StandardNormal)).collect();
            signed_rank_moments(&d, 0.5, 1.0).unwrap()
        })
        .collect();
    let joint = assemble(&c, &leaves).map_err(|e| e.to_string())?;
    let kappa = critical.kappa(&joint.correlation, 0.04).map_err(|e| e.to_string())?;
    let ok = (single - 2.054).abs() <= 1e-3 && joint.node_ids.len() == 12 && (2.054..=2.94).contains(&kappa);
    check(ok, format!("singleton {single:.4}; {} nodes κ = {kappa:.4}", joint.node_ids.len()))
}

struct Cell {
    outcome: OutcomeKind,
    situation: usize,
    method: Method,
    fraction: f64,
    power: Option<f64>,
    x1: Option<f64>,
}

fn simulation_cells() -> Vec<Cell> {
    use Method::{Cart, Ct};
    use OutcomeKind::{Binary, Continuous};
    let cell = |outcome, situation, method, fraction, power, x1| Cell {
        outcome,
        situation,
        method,
        fraction,
        power,
        x1,
    };
    vec![
        cell(Continuous, 2, Ct, 0.25, Some(0.85), Some(0.90)),
        cell(Continuous, 2, Cart, 0.5, Some(0.84), None),
        cell(Continuous, 1, Cart, 0.1, Some(0.04), None),
        cell(Continuous, 5, Ct, 0.25, Some(0.73), None),
        cell(Binary, 4, Ct, 0.25, Some(0.90), Some(0.94)),
        cell(Binary, 2, Cart, 0.1, Some(0.33), None),
        cell(Continuous, 1, Ct, 0.5, None, Some(0.54)),
        cell(Continuous, 1, Cart, 0.5, None, Some(0.40)),
    ]
}

fn label(c: &Cell) -> String {
    let kind = match c.outcome {
        OutcomeKind::Continuous => "continuous",
        OutcomeKind::Binary => "binary",
    };
    let method = match c.method {
        Method::Cart => "CART",
        Method::Ct => "CT",
    };
    let d = (c.fraction * 100.0).round() as i64;
    format!("{kind} s{} {method} {d}/{}", c.situation, 100 - d)
}

/// Runs every simulation cell once; criteria 5 and 6 read from the same runs.
fn simulate_table() -> Vec<(Cell, TableCell, f64)> {
    simulation_cells()
        .into_iter()
        .map(|c| {
            let t = Instant::now();
            let s = Scenario::situation(c.outcome, c.situation).expect("situation");
            let r = TableCell::run(&s, &SimConfig::new(c.fraction, c.method)).expect("simulation");
            (c, r, t.elapsed().as_secs_f64())
        })
        .collect()
}

fn power_table(table: &[(Cell, TableCell, f64)]) -> Outcome {
    let mut lines = Vec::new();
    let mut ok = true;
    let mut secs = 0.0;
    for (c, r, t) in table {
        secs += t;
        if let Some(target) = c.power {
            let got = r.power.power;
            let pass = (got - target).abs() <= 0.05;
            ok &= pass;
            lines.push(format!("{} {got:.3} vs {target:.2}{}", label(c), if pass { "" } else { " (out)" }));
        }
    }
    lines.push(format!("{secs:.0}s for all cells"));
    check(ok && secs < 7200.0, lines.join("; "))
}

fn discovery_table(table: &[(Cell, TableCell, f64)]) -> Outcome {
    let mut lines = Vec::new();
    let mut ok = true;
    for (c, r, _) in table {
        if let Some(target) = c.x1 {
            let got = r.discovery.rate("x1").unwrap_or(f64::NAN);
            let pass = (got - target).abs() <= 0.07;
            ok &= pass;
            lines.push(format!("{} x1 {got:.3} vs {target:.2}{}", label(c), if pass { "" } else { " (out)" }));
        }
    }
    check(ok, lines.join("; "))
}

fn level_control() -> Outcome {
    let config = SimConfig::new(0.25, Method::Ct);
    let nominal = config.hypothesis.alpha + config.hypothesis.gamma_ci;
    let mut lines = Vec::new();
    let mut ok = true;
    for outcome in [OutcomeKind::Continuous, OutcomeKind::Binary] {
        let mut s = Scenario::constant(outcome, 0.5);
        s.replications = 2000;
        s.seed = 7;
        let p = run_power(&s, &config).map_err(|e| e.to_string())?;
        let limit = nominal + 2.0 * (nominal * (1.0 - nominal) / p.replications as f64).sqrt();
        ok &= p.power <= limit;
        lines.push(format!("{} rejects {:.4} (limit {limit:.4})", s.name, p.power));
    }
    check(ok, lines.join("; "))
}

fn deviate(m: &GroupMoments) -> f64 {
    clamped_deviate(m.statistic, m.mean_upper, m.mean_lower, m.variance.sqrt())
}

fn bracketing() -> Outcome {
    let example = compatible_bracket(15, 100, 10).map_err(|e| e.to_string())?;
    let mut gaps = Vec::new();
    for size in [10usize, 100, 1000] {
        // 30% treated-only events, 10% control-only, the rest concordant.
        let a: Vec<i64> = (0..size)
            .map(|i| match i % 10 {
                0..=2 => 1,
                3 => -1,
                _ => 0,
            })
            .collect();
        let t = CompletionTable::from_differences(&a);
        let (lo, hi) = compatible_bracket(1234, 10_000, t.units()).map_err(|e| e.to_string())?;
        let p = |total: i64| 2.0 * normal::sf(deviate(&t.moments(total, 1.0).unwrap()).abs());
        gaps.push((p(lo) - p(hi)).abs());
    }
    let ok = example == (1, 2) && gaps[0] > gaps[1] && gaps[1] > gaps[2];
    check(ok, format!("δ = 0.15 on 10 units brackets to {}/10, {}/10; P gaps {gaps:.4?}", example.0, example.1))
}

/// Every completion of the unobserved potential outcomes, keyed by the null
/// total, with the largest variance and mean shift over assignment
/// probabilities containing one half.
fn enumerate_completions(obs: &[(i64, i64)]) -> BTreeMap<i64, (i64, i64)> {
    let n = obs.len();
    let mut best: BTreeMap<i64, (i64, i64)> = BTreeMap::new();
    for code in 0..(1usize << (2 * n)) {
        let (mut total, mut var_num, mut shift) = (0i64, 0.0f64, 0i64);
        for (i, &(rt1, rc2)) in obs.iter().enumerate() {
            let rc1 = (code >> (2 * i) & 1) as i64;
            let rt2 = (code >> (2 * i + 1) & 1) as i64;
            total += (rt1 - rc1) + (rt2 - rc2);
            let (x1, x2) = (2 * (rt1 - rc2), 2 * (rt2 - rc1));
            var_num += [0.25, 0.4, 0.5, 0.6, 0.75]
                .iter()
                .map(|p| p * (1.0 - p) * ((x1 - x2) * (x1 - x2)) as f64)
                .fold(0.0, f64::max);
            shift += (x1 - x2).abs() / 2;
        }
        let e = best.entry(total).or_insert((i64::MIN, i64::MIN));
        e.0 = e.0.max(var_num.round() as i64);
        e.1 = e.1.max(shift);
    }
    best
}

fn dp_enumeration() -> Outcome {
    let mut checked = 0usize;
    for n in 1..=6usize {
        for code in 0..(1usize << (2 * n)) {
            let obs: Vec<(i64, i64)> =
                (0..n).map(|i| ((code >> (2 * i) & 1) as i64, (code >> (2 * i + 1) & 1) as i64)).collect();
            let a: Vec<i64> = obs.iter().map(|(t, c)| t - c).collect();
            let table = CompletionTable::from_differences(&a);
            let truth = enumerate_completions(&obs);
            for total in -(2 * n as i64)..=(2 * n as i64) {
                if table.bounds(total) != truth.get(&total).copied() {
                    return Err(format!("observations {obs:?}, total {total}"));
                }
                checked += 1;
            }
        }
    }
    check(true, format!("{checked} instance-target combinations agree"))
}

fn amplification() -> Outcome {
    let a = amplify_point(2.11, 2.0).map_err(|e| e.to_string())?;
    let b = amplify_point(1.5, 1.434).map_err(|e| e.to_string())?;
    check(
        (a - 1.270).abs() <= 1e-3 && (b - 1.074).abs() <= 1e-3,
        format!("(2.11, 2) → {a:.4}; (1.5, 1.434) → {b:.4}"),
    )
}

fn binary_pair(id: usize, t: u8, c: u8) -> MatchedPair {
    let unit = |prefix: &str, treated, y: u8| ObservationRecord {
        unit_id: format!("{prefix}{id}"),
        treated,
        outcome: y as f64,
        covariates: Vec::new(),
    };
    MatchedPair {
        pair_id: format!("p{id}"),
        treated: unit("t", true, t),
        control: unit("c", false, c),
    }
}

fn monotone(values: &[f64], increasing: bool) -> bool {
    values.windows(2).all(|w| if increasing { w[1] >= w[0] - 1e-12 } else { w[1] <= w[0] + 1e-12 })
}

fn monotonicity() -> Outcome {
    let grid: Vec<f64> = (0..=20).map(|k| 1.0 + 0.1 * k as f64).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut datasets = 0;
    for _ in 0..20 {
        let n = rng.random_range(5..300);
        let pairs: Vec<MatchedPair> = (0..n)
            .map(|i| binary_pair(i, rng.random_bool(0.6) as u8, rng.random_bool(0.4) as u8))
            .collect();
        let group: Vec<&MatchedPair> = pairs.iter().collect();
        let p: Vec<f64> = grid.iter().map(|&g| mcnemar_upper_p(&group, g).unwrap().p_upper).collect();
        let d: Vec<f64> = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal) + 0.3).collect();
        let mu: Vec<f64> = grid.iter().map(|&g| signed_rank_moments(&d, 0.0, g).unwrap().mean_upper).collect();
        if !monotone(&p, true) || !monotone(&mu, true) {
            return Err(format!("McNemar or μ⁺ not monotone on a dataset of {n} pairs"));
        }
        datasets += 1;
    }
    let mut b = TreeBuilder::new();
    let (l, r) = b.split(TreeBuilder::ROOT, threshold("x1"));
    b.split(l, threshold("x2"));
    b.split(r, threshold("x2"));
    let tree = b.finish();
    let c = build_conversion_matrix(&tree).map_err(|e| e.to_string())?;
    let spec = HypothesisSpec {
        alpha: 0.04,
        gamma_ci: 0.01,
    };
    let critical = CriticalValues::new(QmcSettings::default());
    let sweep_grid: Vec<f64> = (0..=10).map(|k| 1.0 + 0.05 * k as f64).collect();
    for (outcome, situation) in [(OutcomeKind::Continuous, 2), (OutcomeKind::Continuous, 5), (OutcomeKind::Binary, 4)] {
        let mut s = Scenario::situation(outcome, situation).unwrap();
        s.n_pairs = 600;
        for rep in 0..3 {
            let routed = assign_pairs(&tree, &generate(&s, rep).unwrap()).map_err(|e| e.to_string())?.data;
            let report = sweep(&routed, &c, &sweep_grid, &spec, &critical).map_err(|e| e.to_string())?;
            let d: Vec<f64> = report.rows.iter().map(|r| r.d_min).collect();
            if !monotone(&d, false) {
                return Err(format!("{} rep {rep}: d_min {d:?}", s.name));
            }
            datasets += 1;
        }
    }
    check(true, format!("{datasets} datasets monotone in Γ"))
}

fn hetfx(dir: &Path, args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_hetfx"))
        .args(args)
        .current_dir(dir)
        .env_remove("HETFX_SEED")
        .output()
        .map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(())
    } else {
        Err(format!("{args:?}: {}", String::from_utf8_lossy(&out.stderr)))
    }
}

/// Every file under `dir`, with manifests stripped of their wall-clock field.
fn snapshot(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
                continue;
            }
            let key = p.strip_prefix(dir).unwrap().display().to_string();
            let mut bytes = fs::read(&p).unwrap();
            if key.rsplit('/').next().unwrap().starts_with("manifest-") {
                let mut v: serde_json::Value = serde_json::from_slice(&bytes).unwrap();
                v.as_object_mut().unwrap().remove("wall_clock_ms");
                bytes = serde_json::to_vec(&v).unwrap();
            }
            out.insert(key, bytes);
        }
    }
    out
}

fn determinism() -> Outcome {
    let confirm = [
        "--input",
        "data/cohort.csv",
        "--pairs",
        "s/confirmation_pairs.csv",
        "--split",
        "s/split.json",
        "--tree",
        "d/tree-ct.json",
    ];
    let mut runs = Vec::new();
    for _ in 0..2 {
        let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
        let dir = tmp.path();
        hetfx(dir, &["simulate", "--situation", "2", "--emit-data", "--out-dir", "data"])?;
        hetfx(dir, &["split", "--input", "data/cohort.csv", "--pairs", "data/pairs.csv", "--seed", "3", "--out-dir", "s"])?;
        hetfx(dir, &["discover", "--input", "data/cohort.csv", "--pairs", "s/discovery_pairs.csv", "--out-dir", "d"])?;
        let with = |head: &[&'static str], tail: &[&'static str]| -> Vec<&'static str> {
            head.iter().chain(confirm.iter()).chain(tail).copied().collect()
        };
        hetfx(dir, &with(&["test"], &["--out-dir", "t"]))?;
        hetfx(dir, &with(&["sensitivity"], &["--gamma-grid", "1:1.3:0.05", "--out-dir", "v"]))?;
        hetfx(dir, &with(&["report"], &["--out-dir", "r"]))?;
        runs.push(snapshot(dir));
    }
    let same = runs[0] == runs[1];
    let differing: Vec<&String> = runs[0].keys().filter(|k| runs[0].get(*k) != runs[1].get(*k)).collect();
    check(
        same && runs[0].len() >= 20,
        if same {
            format!("{} artifacts byte-identical across two runs", runs[0].len())
        } else {
            format!("differing artifacts {differing:?}")
        },
    )
}

fn main() {
    let started = Instant::now();
    let mut failures = 0;
    let mut report = |n: usize, name: &str, f: &dyn Fn() -> Outcome| {
        let t = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let (verdict, detail) = match outcome {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failures += 1;
                ("FAIL", d)
            }
        };
        println!("criterion {n:2} {verdict} {name}: {detail} [{:.1}s]", t.elapsed().as_secs_f64());
    };
    report(1, "conversion matrix", &conversion_matrix);
    report(2, "signed-rank moments", &signed_rank);
    report(3, "multivariate normal quantile", &mvn_quantile);
    report(4, "subgroup critical values", &subgroup_critical_values);
    let table = catch_unwind(simulate_table).map_err(|_| "simulation panicked".to_string());
    report(5, "power table", &|| power_table(table.as_ref()?));
    report(6, "discovery rates", &|| discovery_table(table.as_ref()?));
    report(7, "level control", &level_control);
    report(8, "binary bracketing", &bracketing);
    report(9, "variance maximizer", &dp_enumeration);
    report(10, "amplification", &amplification);
    report(11, "monotonicity", &monotonicity);
    report(12, "determinism", &determinism);
    println!("acceptance: {failures} of 12 criteria failed in {:.0}s", started.elapsed().as_secs_f64());
    if failures > 0 {
        std::process::exit(1);
    }
}
