//! Subcommand bodies.

use std::fs;
use std::path::Path;

use hetfx::balance::balance;
use hetfx::binary::{amplify, mcnemar_upper_p, truncated_product};
use hetfx::confirm::{deviate_table, joint_test, subgroup_joint_test, sweep};
use hetfx::discovery::{grow, split_sample, GrowthConfig, Method, SplitPlan};
use hetfx::ingest::{cohort_from_pairs, load_cohort, load_pairs, write_cohort, write_pairs, CohortTable, FormatConfig};
use hetfx::joint::CriticalValues;
use hetfx::matching::greedy_match;
use hetfx::mvn::QmcSettings;
use hetfx::scan::{CiMethodResult, HypothesisSpec, SensitivitySpec};
use hetfx::simlab::{discovery_table_csv, generate, power_table_csv, Scenario, SimConfig, TableCell};
use hetfx::{assign_pairs, build_conversion_matrix, ConversionMatrix, EffectTree, Error, MatchedPairSet, OutcomeKind, Result};
use serde::Serialize;
use serde_json::json;

use crate::manifest::Run;
use crate::{parse_grid, Cli, CohortArgs, Command, ConfirmArgs, LevelArgs, MethodArg, OutcomeArg, PairArgs, RunManifest};

const TRUNCATED_PRODUCT_DRAWS: usize = 100_000;

pub(crate) fn dispatch(cli: &Cli) -> Result<RunManifest> {
    let config = serde_json::to_value(&cli.command)?;
    let seed = cli.seed.unwrap_or(0);
    let mut run = Run::new(cli.command.name(), Some(seed), config, &cli.out_dir)?;
    match &cli.command {
        Command::Match {
            cohort,
            exact,
            distance,
            caliper,
        } => cmd_match(&mut run, cohort, exact, distance, *caliper)?,
        Command::Balance { pairs } => {
            let (cohort, data) = pairs_of(&mut run, pairs)?;
            let report = balance(&cohort, &data)?;
            run.write("balance.csv", &report.to_csv()?)?;
            run.write_json("balance.json", &report)?;
            println!("balance over {} covariate rows written", report.rows.len());
        }
        Command::Split { pairs, ratio } => {
            let (_, data) = pairs_of(&mut run, pairs)?;
            let plan = split_sample(&data, *ratio, seed)?;
            run.write_json("split.json", &plan)?;
            run.write("discovery_pairs.csv", &pairs_csv(&plan.discovery(&data))?)?;
            run.write("confirmation_pairs.csv", &pairs_csv(&plan.confirmation(&data))?)?;
            println!(
                "discovery {} pairs, confirmation {} pairs (discovery size = floor(ratio * pairs))",
                plan.discovery_ids.len(),
                plan.confirmation_ids.len()
            );
        }
        Command::Discover {
            pairs,
            method,
            config,
            ratio,
        } => cmd_discover(&mut run, pairs, *method, config.as_deref(), *ratio, cli.seed)?,
        Command::Test {
            confirm,
            gamma,
            delta_grid,
        } => {
            let (data, _, c) = confirmation(&mut run, confirm)?;
            let r = joint_test(&data, &c, &hypothesis(&confirm.level), SensitivitySpec::new(*gamma)?, &critical())?;
            run.write_json("test.json", &r)?;
            run.write("scan.csv", &scan_csv(&r))?;
            if let Some(grid) = delta_grid {
                run.write("deviates.csv", &deviate_table(&data, &c, &parse_grid(grid)?, *gamma)?)?;
            }
            println!("{}", verdict("global", &r));
        }
        Command::Subgroup { confirm, gamma, nodes } => {
            if !(confirm.level.gamma_ci > 0.0) {
                return Err(Error::Config("subgroup tests need --gamma-ci > 0".into()));
            }
            let (data, _, c) = confirmation(&mut run, confirm)?;
            let r = subgroup_joint_test(
                &data,
                &c,
                nodes,
                &hypothesis(&confirm.level),
                SensitivitySpec::new(*gamma)?,
                &critical(),
            )?;
            run.write_json("subgroup.json", &json!({ "nodes": nodes, "result": r }))?;
            run.write("subgroup_scan.csv", &scan_csv(&r))?;
            println!("{}", verdict("subgroup", &r));
        }
        Command::Sensitivity {
            confirm,
            gamma_grid,
            delta_grid,
            truncation,
        } => cmd_sensitivity(&mut run, confirm, gamma_grid, delta_grid.as_deref(), *truncation, seed)?,
        Command::Simulate {
            scenario,
            situation,
            outcome,
            ratio,
            method,
            replications,
            emit_data,
        } => {
            let mut s = match (scenario, situation) {
                (Some(path), _) => {
                    run.input(path)?;
                    let text = read(path)?;
                    if is_toml(path) {
                        Scenario::from_toml_str(&text)?
                    } else {
                        Scenario::from_json_str(&text)?
                    }
                }
                (None, k) => Scenario::situation(outcome_kind(*outcome), k.unwrap_or(1))?,
            };
            if let Some(seed) = cli.seed {
                s.seed = seed;
            }
            if let Some(r) = replications {
                s.replications = *r;
            }
            s.validate()?;
            run.set_seed(s.seed);
            cmd_simulate(&mut run, &s, *ratio, *method, *emit_data)?;
        }
        Command::Report { confirm, gamma } => cmd_report(&mut run, confirm, *gamma)?,
    }
    run.finish()
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::Data(format!("cannot read {}: {e}", path.display())))
}

fn is_toml(path: &Path) -> bool {
    path.extension().is_some_and(|e| e.eq_ignore_ascii_case("toml"))
}

fn outcome_kind(o: OutcomeArg) -> OutcomeKind {
    match o {
        OutcomeArg::Continuous => OutcomeKind::Continuous,
        OutcomeArg::Binary => OutcomeKind::Binary,
    }
}

fn methods(m: MethodArg) -> Vec<Method> {
    match m {
        MethodArg::Cart => vec![Method::Cart],
        MethodArg::Ct => vec![Method::Ct],
        MethodArg::Both => vec![Method::Cart, Method::Ct],
    }
}

fn method_name(m: Method) -> &'static str {
    match m {
        Method::Cart => "cart",
        Method::Ct => "ct",
    }
}

fn hypothesis(level: &LevelArgs) -> HypothesisSpec {
    HypothesisSpec {
        alpha: level.alpha,
        gamma_ci: level.gamma_ci,
    }
}

fn critical() -> CriticalValues {
    CriticalValues::new(QmcSettings::default())
}

fn cohort_of(run: &mut Run, args: &CohortArgs) -> Result<CohortTable> {
    let format = match &args.format {
        Some(path) => {
            run.input(path)?;
            let text = read(path)?;
            if is_toml(path) {
                FormatConfig::from_toml_str(&text)?
            } else {
                FormatConfig::from_json_str(&text)?
            }
        }
        None => FormatConfig::default(),
    };
    run.input(&args.input)?;
    load_cohort(&args.input, &format)
}

fn pairs_of(run: &mut Run, args: &PairArgs) -> Result<(CohortTable, MatchedPairSet)> {
    let cohort = cohort_of(run, &args.cohort)?;
    run.input(&args.pairs)?;
    let pairs = load_pairs(&args.pairs, &cohort)?;
    Ok((cohort, pairs))
}

fn pairs_csv(pairs: &MatchedPairSet) -> Result<String> {
    let mut buf = Vec::new();
    write_pairs(pairs, &mut buf)?;
    String::from_utf8(buf).map_err(|e| Error::Data(e.to_string()))
}

fn cmd_match(
    run: &mut Run,
    args: &CohortArgs,
    exact: &[String],
    distance: &[String],
    caliper: Option<f64>,
) -> Result<()> {
    let cohort = cohort_of(run, args)?;
    let exact: Vec<&str> = exact.iter().map(String::as_str).collect();
    let distance: Vec<&str> = distance.iter().map(String::as_str).collect();
    let m = greedy_match(&cohort, &exact, &distance, caliper)?;
    run.write("pairs.csv", &pairs_csv(&m.pairs)?)?;
    let max = m.distances.iter().copied().fold(0.0f64, f64::max);
    let mean = m.distances.iter().sum::<f64>() / m.distances.len() as f64;
    run.write_json(
        "match.json",
        &json!({
            "pairs": m.pairs.len(),
            "mean_distance": mean,
            "max_distance": max,
            "unmatched_treated": m.unmatched_treated,
            "warnings": m.warnings,
        }),
    )?;
    for w in &m.warnings {
        eprintln!("warning: {w}");
    }
    println!("matched {} pairs; {} treated units unmatched", m.pairs.len(), m.unmatched_treated.len());
    Ok(())
}

#[derive(Serialize)]
struct TreeSummary {
    method: Method,
    leaves: usize,
    chosen_cp: f64,
    split_covariates: Vec<String>,
    notes: Vec<String>,
}

fn cmd_discover(
    run: &mut Run,
    args: &PairArgs,
    method: MethodArg,
    config: Option<&Path>,
    ratio: Option<f64>,
    seed: Option<u64>,
) -> Result<()> {
    let (_, data) = pairs_of(run, args)?;
    let mut base = match config {
        Some(path) => {
            run.input(path)?;
            let text = read(path)?;
            if is_toml(path) {
                GrowthConfig::from_toml_str(&text)?
            } else {
                GrowthConfig::from_json_str(&text)?
            }
        }
        None => GrowthConfig::default(),
    };
    if let Some(r) = ratio {
        if !(r > 0.0 && r < 1.0) {
            return Err(Error::Config(format!("ratio {r} must lie in (0,1)")));
        }
        base.honest_fraction_hint = 1.0 - r;
    }
    if let Some(s) = seed {
        base.seed = s;
    }
    let mut summaries = Vec::new();
    for m in methods(method) {
        let grown = grow(&data, &GrowthConfig { method: m, ..base.clone() })?;
        let name = method_name(m);
        run.write(&format!("tree-{name}.json"), &(grown.tree.to_json() + "\n"))?;
        let mut cv = String::from("cp,error,se\n");
        for row in &grown.cv {
            cv.push_str(&format!("{},{},{}\n", row.cp, row.error, row.se));
        }
        run.write(&format!("cv-{name}.csv"), &cv)?;
        run.write(&format!("tree-{name}.dot"), &grown.tree.to_dot(Some(&data.schema)))?;
        println!("{name}: {} leaves at cp {}", grown.tree.leaf_count(), grown.chosen_cp);
        for n in &grown.notes {
            println!("{name}: {n}");
        }
        summaries.push(TreeSummary {
            method: m,
            leaves: grown.tree.leaf_count(),
            chosen_cp: grown.chosen_cp,
            split_covariates: grown.tree.split_covariates().into_iter().collect(),
            notes: grown.notes,
        });
    }
    let comparison = (summaries.len() == 2).then(|| {
        let (a, b) = (&summaries[0], &summaries[1]);
        if a.leaves == b.leaves {
            format!("both trees have {} leaves; either may be carried forward", a.leaves)
        } else {
            let big = if a.leaves > b.leaves { a } else { b };
            format!(
                "cart has {} leaves and ct has {}; the larger tree ({}) is recommended for confirmation",
                a.leaves,
                b.leaves,
                method_name(big.method)
            )
        }
    });
    if let Some(note) = &comparison {
        println!("{note}");
    }
    run.write_json("discover.json", &json!({ "trees": summaries, "comparison": comparison }))?;
    Ok(())
}

/// Loads confirmation pairs, enforcing the honesty guard, and routes them.
fn confirmation(run: &mut Run, args: &ConfirmArgs) -> Result<(MatchedPairSet, EffectTree, ConversionMatrix)> {
    let (_, data) = pairs_of(run, &args.pairs)?;
    match &args.split {
        Some(path) => {
            run.input(path)?;
            let plan: SplitPlan = serde_json::from_str(&read(path)?)?;
            let reused = data.pairs.iter().filter(|p| plan.discovery_ids.contains(&p.pair_id)).count();
            if reused > 0 && !args.unsafe_full_sample {
                return Err(Error::Config(format!(
                    "{reused} pairs belong to the discovery subsample; pass the confirmation pairs \
                     or --unsafe-full-sample"
                )));
            }
        }
        None if !args.unsafe_full_sample => {
            return Err(Error::Config(
                "no split plan given; pass --split to check honesty or --unsafe-full-sample".into(),
            ))
        }
        None => {}
    }
    run.input(&args.tree)?;
    let tree = EffectTree::from_json(&read(&args.tree)?)?;
    let c = build_conversion_matrix(&tree)?;
    let routed = assign_pairs(&tree, &data)?;
    for g in &routed.empty_leaves {
        eprintln!("warning: leaf l{} received no confirmation pairs", g + 1);
    }
    Ok((routed.data, tree, c))
}

fn scan_csv(r: &CiMethodResult) -> String {
    let mut s = String::from("effect,d_max\n");
    for p in &r.scan {
        s.push_str(&format!("{},{}\n", p.tau, p.d_max));
    }
    s
}

fn verdict(what: &str, r: &CiMethodResult) -> String {
    format!(
        "{what} null at gamma {}: {} (min D {:.4} at effect {:.4}, kappa {:.4})",
        r.gamma,
        if r.reject { "rejected" } else { "not rejected" },
        r.d_min,
        r.tau_at_min,
        r.kappa
    )
}

fn cmd_sensitivity(
    run: &mut Run,
    args: &ConfirmArgs,
    gamma_grid: &str,
    delta_grid: Option<&str>,
    truncation: f64,
    seed: u64,
) -> Result<()> {
    let grid = parse_grid(gamma_grid)?;
    let (data, _, c) = confirmation(run, args)?;
    let report = sweep(&data, &c, &grid, &hypothesis(&args.level), &critical())?;
    run.write("sensitivity.csv", &report.summary_csv()?)?;
    run.write("sensitivity_traces.csv", &report.traces_csv()?)?;
    run.write_json(
        "sensitivity.json",
        &json!({
            "alpha": report.alpha,
            "gamma_ci": report.gamma_ci,
            "rows": report.rows,
            "breaking_gamma": report.breaking_gamma,
            "unbroken": report.unbroken,
            "warnings": report.warnings,
        }),
    )?;
    match (report.breaking_gamma, report.unbroken) {
        (None, _) => println!("breaking gamma: none (not rejected at gamma 1)"),
        (Some(g), true) => println!("breaking gamma: > {g} (rejected at every gamma on the grid)"),
        (Some(g), false) => println!("breaking gamma: {g}"),
    }

    if data.schema.outcome == OutcomeKind::Binary {
        let groups = data.grouped_pairs(c.cols())?;
        let mut s = String::from("gamma,leaf,discordant,treated_events,p_upper\n");
        for (k, &g) in grid.iter().enumerate() {
            let mut ps = Vec::with_capacity(groups.len());
            for (leaf, group) in groups.iter().enumerate() {
                let b = mcnemar_upper_p(group, g)?;
                s.push_str(&format!("{g},l{},{},{},{}\n", leaf + 1, b.discordant, b.treated_events, b.p_upper));
                ps.push(b.p_upper);
            }
            let combined = truncated_product(&ps, truncation, TRUNCATED_PRODUCT_DRAWS, seed.wrapping_add(k as u64))?;
            s.push_str(&format!("{g},combined,,,{combined}\n"));
        }
        run.write("mcnemar.csv", &s)?;
    }

    if let (Some(deltas), Some(g)) = (delta_grid, report.breaking_gamma) {
        let mut s = String::from("lambda,delta\n");
        for (l, d) in amplify(g, &parse_grid(deltas)?)? {
            s.push_str(&format!("{l},{d}\n"));
        }
        run.write("amplification.csv", &s)?;
    }
    Ok(())
}

fn cmd_simulate(run: &mut Run, s: &Scenario, ratio: f64, method: MethodArg, emit: bool) -> Result<()> {
    if emit {
        let data = generate(s, 0)?;
        let cohort = cohort_from_pairs(&data)?;
        let mut buf = Vec::new();
        write_cohort(&cohort, &mut buf)?;
        run.write("cohort.csv", &String::from_utf8(buf).map_err(|e| Error::Data(e.to_string()))?)?;
        run.write("pairs.csv", &pairs_csv(&data)?)?;
        println!("wrote {} simulated pairs", data.len());
        return Ok(());
    }
    let mut cells = Vec::new();
    for m in methods(method) {
        let cell = TableCell::run(s, &SimConfig::new(ratio, m))?;
        println!(
            "{} {}: power {:.3} (se {:.3})",
            s.name,
            method_name(m),
            cell.power.power,
            cell.power.mc_se
        );
        cells.push(cell);
    }
    run.write("power.csv", &power_table_csv(&cells)?)?;
    run.write("discovery.csv", &discovery_table_csv(&cells)?)?;
    run.write_json("simulate.json", &json!({ "scenario": s, "cells": cells }))?;
    Ok(())
}

#[derive(Serialize)]
struct NodeReport {
    id: usize,
    label: String,
    path: Vec<String>,
    pairs: usize,
    /// Mean treated-minus-control difference.
    estimate: f64,
    d_min: f64,
    kappa: f64,
    reject: bool,
}

fn cmd_report(run: &mut Run, args: &ConfirmArgs, gamma: f64) -> Result<()> {
    if !(args.level.gamma_ci > 0.0) {
        return Err(Error::Config("subgroup tests need --gamma-ci > 0".into()));
    }
    let (data, tree, c) = confirmation(run, args)?;
    let spec = hypothesis(&args.level);
    let sens = SensitivitySpec::new(gamma)?;
    let cv = critical();
    let groups = data.group_of_pair.as_ref().expect("routed");
    let mut nodes = Vec::new();
    for node in tree.nodes() {
        let id = node.id;
        let (leaves, r) = if id == tree.root() {
            ((0..c.cols()).collect::<Vec<_>>(), joint_test(&data, &c, &spec, sens, &cv)?)
        } else {
            let leaves = c.members(c.row_of(id)?);
            (leaves, subgroup_joint_test(&data, &c, &[id], &spec, sens, &cv)?)
        };
        let diffs: Vec<f64> = data
            .pairs
            .iter()
            .zip(groups)
            .filter(|(_, g)| leaves.contains(g))
            .map(|(p, _)| p.difference())
            .collect();
        nodes.push(NodeReport {
            id,
            label: tree.label(id)?,
            path: tree.path_description(id, Some(&data.schema))?,
            pairs: diffs.len(),
            estimate: if diffs.is_empty() { f64::NAN } else { diffs.iter().sum::<f64>() / diffs.len() as f64 },
            d_min: r.d_min,
            kappa: r.kappa,
            reject: r.reject,
        });
    }
    let dot = tree.to_dot_with(Some(&data.schema), |id| {
        nodes.iter().find(|n| n.id == id).map(|n| {
            (
                format!("n={} est={:.3}\\nD={:.2} k={:.2}", n.pairs, n.estimate, n.d_min, n.kappa),
                n.reject,
            )
        })
    });
    run.write("report.dot", &dot)?;
    run.write_json("report.json", &json!({ "gamma": gamma, "alpha": spec.alpha, "gamma_ci": spec.gamma_ci, "nodes": nodes }))?;
    let rejected: Vec<&str> = nodes.iter().filter(|n| n.reject).map(|n| n.label.as_str()).collect();
    println!("rejected nodes: {}", if rejected.is_empty() { "none".into() } else { rejected.join(", ") });
    Ok(())
}
