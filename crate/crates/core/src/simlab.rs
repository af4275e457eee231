//! Simulation designs with two true effect modifiers among five binary
//! covariates, run end to end through discovery and confirmation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::binary::BinaryFamily;
use crate::conversion::build_conversion_matrix;
use crate::discovery::{grow, split_sample, GrowthConfig, Method};
use crate::error::{Error, Result};
use crate::joint::CriticalValues;
use crate::model::{CovariateKind, CovariateSpec, MatchedPair, MatchedPairSet, ObservationRecord, OutcomeKind, Schema};
use crate::mvn::QmcSettings;
use crate::scan::{ci_method_test, HypothesisSpec, SensitivitySpec, SignedRankFamily};
use crate::tree::assign_pairs;

/// Unit-level noise. The pair difference of a continuous outcome has
/// variance `effect_sd² + 2·unit_sd²`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseModel {
    /// Spread of individual effects around the stratum mean.
    pub effect_sd: f64,
    /// Spread of each unit's baseline response, independent across units.
    pub unit_sd: f64,
    /// Binary: chance a unit without an effect has the event anyway.
    pub baseline_rate: f64,
}

impl Default for NoiseModel {
    fn default() -> Self {
        NoiseModel {
            effect_sd: 1.0,
            unit_sd: DEFAULT_UNIT_SD,
            baseline_rate: DEFAULT_BASELINE_RATE,
        }
    }
}

/// Calibrated so that simulated power matches the reference design.
pub const DEFAULT_UNIT_SD: f64 = 0.71;
pub const DEFAULT_BASELINE_RATE: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    #[serde(default)]
    pub name: String,
    pub outcome: OutcomeKind,
    /// Mean effect (continuous) or effect probability (binary) in the
    /// strata (x1, x2) = (0,0), (0,1), (1,0), (1,1).
    pub effects: [f64; 4],
    #[serde(default = "default_pairs")]
    pub n_pairs: usize,
    #[serde(default = "default_covariates")]
    pub n_covariates: usize,
    #[serde(default)]
    pub noise: NoiseModel,
    #[serde(default = "default_replications")]
    pub replications: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_pairs() -> usize {
    2000
}
fn default_covariates() -> usize {
    5
}
fn default_replications() -> usize {
    1000
}

const CONTINUOUS_SITUATIONS: [[f64; 4]; 5] = [
    [0.4, 0.4, 0.6, 0.6],
    [0.3, 0.3, 0.7, 0.7],
    [0.4, 0.4, 0.5, 0.7],
    [0.3, 0.3, 0.6, 0.8],
    [0.2, 0.5, 0.5, 0.8],
];

const BINARY_SITUATIONS: [[f64; 4]; 5] = [
    [0.45, 0.45, 0.55, 0.55],
    [0.4, 0.4, 0.6, 0.6],
    [0.45, 0.45, 0.5, 0.6],
    [0.4, 0.4, 0.5, 0.7],
    [0.35, 0.5, 0.5, 0.65],
];

impl Scenario {
    /// One of the five standard situations (1-based).
    pub fn situation(outcome: OutcomeKind, index: usize) -> Result<Self> {
        let table = match outcome {
            OutcomeKind::Continuous => &CONTINUOUS_SITUATIONS,
            OutcomeKind::Binary => &BINARY_SITUATIONS,
        };
        let effects = *table
            .get(index.wrapping_sub(1))
            .ok_or_else(|| Error::Config(format!("situation {index} is not in 1..=5")))?;
        Ok(Scenario {
            name: format!("{}-{index}", outcome_name(outcome)),
            outcome,
            effects,
            n_pairs: default_pairs(),
            n_covariates: default_covariates(),
            noise: NoiseModel::default(),
            replications: default_replications(),
            seed: 0,
        })
    }

    /// A design with the same effect in every stratum.
    pub fn constant(outcome: OutcomeKind, effect: f64) -> Self {
        Scenario {
            name: format!("{}-constant", outcome_name(outcome)),
            effects: [effect; 4],
            ..Scenario::situation(outcome, 1).expect("valid index")
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let s: Scenario = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        s.validate()?;
        Ok(s)
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        let s: Scenario = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.effects.iter().any(|e| !e.is_finite()) {
            return Err(Error::Config("effects must be finite".into()));
        }
        if self.outcome == OutcomeKind::Binary && self.effects.iter().any(|e| !(0.0..=1.0).contains(e)) {
            return Err(Error::Config("binary effects are probabilities in [0,1]".into()));
        }
        if self.n_covariates < 2 {
            return Err(Error::Config("at least the two modifiers x1, x2 are required".into()));
        }
        if self.n_pairs < 4 {
            return Err(Error::Config("n_pairs must be at least 4".into()));
        }
        let n = &self.noise;
        if !(n.effect_sd >= 0.0 && n.unit_sd >= 0.0 && n.effect_sd.is_finite() && n.unit_sd.is_finite()) {
            return Err(Error::Config("noise spreads must be finite and nonnegative".into()));
        }
        if !(0.0..=1.0).contains(&n.baseline_rate) {
            return Err(Error::Config("baseline_rate must lie in [0,1]".into()));
        }
        Ok(())
    }

    pub fn schema(&self) -> Schema {
        Schema {
            covariates: (1..=self.n_covariates)
                .map(|i| CovariateSpec {
                    name: format!("x{i}"),
                    kind: CovariateKind::Binary,
                })
                .collect(),
            outcome: self.outcome,
        }
    }

    /// Population average effect over the four equally likely strata.
    pub fn mean_effect(&self) -> f64 {
        self.effects.iter().sum::<f64>() / 4.0
    }
}

fn outcome_name(o: OutcomeKind) -> &'static str {
    match o {
        OutcomeKind::Continuous => "continuous",
        OutcomeKind::Binary => "binary",
    }
}

/// Independent stream for replication `rep` under `seed`.
pub fn replication_rng(seed: u64, rep: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(rep);
    rng
}

/// Draws one synthetic study. Covariates are shared within each pair.
pub fn generate(scenario: &Scenario, rep: u64) -> Result<MatchedPairSet> {
    scenario.validate()?;
    let mut rng = replication_rng(scenario.seed, rep);
    let noise = &scenario.noise;
    let unit = Normal::new(0.0, noise.unit_sd).map_err(|e| Error::Config(e.to_string()))?;
    let effect = Normal::new(0.0, noise.effect_sd).map_err(|e| Error::Config(e.to_string()))?;
    let width = (scenario.n_pairs - 1).to_string().len();
    let pairs = (0..scenario.n_pairs)
        .map(|i| {
            let x: Vec<f64> = (0..scenario.n_covariates).map(|_| rng.random_range(0..2u8) as f64).collect();
            let mean = scenario.effects[2 * x[0] as usize + x[1] as usize];
            let (treated_y, control_y) = match scenario.outcome {
                OutcomeKind::Continuous => {
                    let base_t = unit.sample(&mut rng);
                    let base_c = unit.sample(&mut rng);
                    (base_t + mean + effect.sample(&mut rng), base_c)
                }
                OutcomeKind::Binary => {
                    // The effect is an event caused by treatment; otherwise
                    // each unit has its own background chance of the event.
                    let caused = rng.random_bool(mean);
                    let base_t = rng.random_bool(noise.baseline_rate);
                    let base_c = rng.random_bool(noise.baseline_rate);
                    if caused {
                        (1.0, 0.0)
                    } else {
                        (base_t as u8 as f64, base_c as u8 as f64)
                    }
                }
            };
            let id = format!("{i:0width$}");
            MatchedPair {
                pair_id: format!("p{id}"),
                treated: ObservationRecord {
                    unit_id: format!("t{id}"),
                    treated: true,
                    outcome: treated_y,
                    covariates: x.clone(),
                },
                control: ObservationRecord {
                    unit_id: format!("c{id}"),
                    treated: false,
                    outcome: control_y,
                    covariates: x,
                },
            }
        })
        .collect();
    MatchedPairSet::new(scenario.schema(), pairs)
}

/// Analysis settings shared by every replication.
#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    pub discovery_fraction: f64,
    pub growth: GrowthConfig,
    pub hypothesis: HypothesisSpec,
    pub qmc: QmcSettings,
}

impl SimConfig {
    pub fn new(discovery_fraction: f64, method: Method) -> Self {
        SimConfig {
            discovery_fraction,
            growth: GrowthConfig::for_method(method),
            hypothesis: HypothesisSpec {
                alpha: 0.04,
                gamma_ci: 0.01,
            },
            qmc: QmcSettings {
                target_se: 1e-3,
                max_points: 1 << 13,
                ..QmcSettings::default()
            },
        }
    }
}

/// What one replication produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Replication {
    pub rep: u64,
    pub leaves: usize,
    pub split_covariates: Vec<String>,
    pub reject: bool,
}

/// Split, grow on the first half, test on the second.
pub fn run_replication(scenario: &Scenario, config: &SimConfig, rep: u64) -> Result<Replication> {
    let data = generate(scenario, rep)?;
    let seed = scenario.seed ^ rep.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    let plan = split_sample(&data, config.discovery_fraction, seed)?;
    let growth = GrowthConfig {
        seed,
        ..config.growth.clone()
    };
    let grown = grow(&plan.discovery(&data), &growth)?;
    let tree = grown.tree;
    let mut out = Replication {
        rep,
        leaves: tree.leaf_count(),
        split_covariates: tree.split_covariates().into_iter().collect(),
        reject: false,
    };
    if tree.is_root_only() {
        return Ok(out);
    }
    let confirmation = assign_pairs(&tree, &plan.confirmation(&data))?.data;
    let c = build_conversion_matrix(&tree)?;
    let critical = CriticalValues::new(config.qmc);
    let gamma = SensitivitySpec::new(1.0)?;
    let result = match scenario.outcome {
        OutcomeKind::Continuous => {
            let family = SignedRankFamily::new(confirmation.grouped_differences(tree.leaf_count())?)?;
            ci_method_test(&family, &c, &config.hypothesis, gamma, &critical)?
        }
        OutcomeKind::Binary => {
            let family = BinaryFamily::new(&confirmation.grouped_pairs(tree.leaf_count())?)?;
            ci_method_test(&family, &c, &config.hypothesis, gamma, &critical)?
        }
    };
    out.reject = result.reject;
    Ok(out)
}

/// Runs every replication, in parallel, returning them in index order.
pub fn run_replications(scenario: &Scenario, config: &SimConfig) -> Result<Vec<Replication>> {
    scenario.validate()?;
    config.growth.validate()?;
    config.hypothesis.validate()?;
    (0..scenario.replications as u64)
        .into_par_iter()
        .map(|rep| run_replication(scenario, config, rep))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PowerEstimate {
    pub power: f64,
    pub mc_se: f64,
    pub rejections: usize,
    pub replications: usize,
}

impl PowerEstimate {
    pub fn from_replications(reps: &[Replication]) -> Self {
        let n = reps.len();
        let r = reps.iter().filter(|x| x.reject).count();
        let p = if n > 0 { r as f64 / n as f64 } else { 0.0 };
        PowerEstimate {
            power: p,
            mc_se: if n > 0 { (p * (1.0 - p) / n as f64).sqrt() } else { 0.0 },
            rejections: r,
            replications: n,
        }
    }
}

/// Share of replications in which each covariate appears in a split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscoveryRates {
    pub covariates: Vec<String>,
    pub rates: Vec<f64>,
    pub replications: usize,
}

impl DiscoveryRates {
    pub fn from_replications(names: &[String], reps: &[Replication]) -> Self {
        let n = reps.len().max(1) as f64;
        DiscoveryRates {
            covariates: names.to_vec(),
            rates: names
                .iter()
                .map(|name| reps.iter().filter(|r| r.split_covariates.contains(name)).count() as f64 / n)
                .collect(),
            replications: reps.len(),
        }
    }

    pub fn rate(&self, covariate: &str) -> Option<f64> {
        self.covariates.iter().position(|c| c == covariate).map(|i| self.rates[i])
    }
}

pub fn run_power(scenario: &Scenario, config: &SimConfig) -> Result<PowerEstimate> {
    Ok(PowerEstimate::from_replications(&run_replications(scenario, config)?))
}

pub fn run_discovery_rates(scenario: &Scenario, config: &SimConfig) -> Result<DiscoveryRates> {
    let names: Vec<String> = scenario.schema().names().iter().map(|s| s.to_string()).collect();
    Ok(DiscoveryRates::from_replications(&names, &run_replications(scenario, config)?))
}

/// One cell of a power or discovery table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableCell {
    pub scenario: String,
    pub method: Method,
    pub discovery_fraction: f64,
    pub power: PowerEstimate,
    pub discovery: DiscoveryRates,
}

impl TableCell {
    pub fn run(scenario: &Scenario, config: &SimConfig) -> Result<Self> {
        let reps = run_replications(scenario, config)?;
        let names: Vec<String> = scenario.schema().names().iter().map(|s| s.to_string()).collect();
        Ok(TableCell {
            scenario: scenario.name.clone(),
            method: config.growth.method,
            discovery_fraction: config.discovery_fraction,
            power: PowerEstimate::from_replications(&reps),
            discovery: DiscoveryRates::from_replications(&names, &reps),
        })
    }
}

fn method_name(m: Method) -> &'static str {
    match m {
        Method::Cart => "cart",
        Method::Ct => "ct",
    }
}

fn split_label(f: f64) -> String {
    let d = (f * 100.0).round() as i64;
    format!("{d}/{}", 100 - d)
}

/// Power table, one row per cell.
pub fn power_table_csv(cells: &[TableCell]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["scenario", "method", "split", "power", "mc_se", "replications"])?;
    for c in cells {
        w.write_record([
            c.scenario.clone(),
            method_name(c.method).to_string(),
            split_label(c.discovery_fraction),
            format!("{:.4}", c.power.power),
            format!("{:.4}", c.power.mc_se),
            c.power.replications.to_string(),
        ])?;
    }
    crate::scan::finish_csv(w)
}

/// Discovery-rate table, one row per cell and one column per covariate.
pub fn discovery_table_csv(cells: &[TableCell]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let names = cells.first().map(|c| c.discovery.covariates.clone()).unwrap_or_default();
    let mut header = vec!["scenario".to_string(), "method".into(), "split".into()];
    header.extend(names.iter().cloned());
    w.write_record(&header)?;
    for c in cells {
        let mut row = vec![c.scenario.clone(), method_name(c.method).to_string(), split_label(c.discovery_fraction)];
        row.extend(c.discovery.rates.iter().map(|r| format!("{r:.4}")));
        w.write_record(&row)?;
    }
    crate::scan::finish_csv(w)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_situation_averages_one_half() {
        let s = Scenario::situation(OutcomeKind::Continuous, 1).unwrap();
        assert!((s.mean_effect() - 0.5).abs() < 1e-12);
        let b = Scenario::situation(OutcomeKind::Binary, 4).unwrap();
        assert!((b.mean_effect() - 0.5).abs() < 1e-12);
        assert!(Scenario::situation(OutcomeKind::Binary, 6).is_err());
    }

    #[test]
    fn generation_is_deterministic_per_replication() {
        let s = Scenario::situation(OutcomeKind::Continuous, 2).unwrap();
        assert_eq!(generate(&s, 3).unwrap(), generate(&s, 3).unwrap());
        assert_ne!(generate(&s, 3).unwrap(), generate(&s, 4).unwrap());
    }

    // Oracle: stratum means of a large sample recover the effect vector.
    #[test]
    fn stratum_means_match_effects() {
        for outcome in [OutcomeKind::Continuous, OutcomeKind::Binary] {
            let s = Scenario {
                n_pairs: 100_000,
                ..Scenario::situation(outcome, 5).unwrap()
            };
            let d = generate(&s, 0).unwrap();
            let mut sum = [0.0; 4];
            let mut n = [0.0; 4];
            for p in &d.pairs {
                let x = &p.treated.covariates;
                let g = 2 * x[0] as usize + x[1] as usize;
                sum[g] += p.difference();
                n[g] += 1.0;
            }
            for g in 0..4 {
                assert!((sum[g] / n[g] - s.effects[g]).abs() < 0.02, "{outcome:?} {g}");
            }
        }
    }

    #[test]
    fn binary_outcomes_are_zero_or_one() {
        let s = Scenario::situation(OutcomeKind::Binary, 2).unwrap();
        let d = generate(&s, 1).unwrap();
        assert!(d
            .pairs
            .iter()
            .all(|p| [0.0, 1.0].contains(&p.treated.outcome) && [0.0, 1.0].contains(&p.control.outcome)));
    }

    #[test]
    fn scenario_files_parse() {
        let s = Scenario::from_toml_str(
            "outcome = \"binary\"\neffects = [0.4, 0.4, 0.6, 0.6]\nreplications = 10\n[noise]\nbaseline_rate = 0.2\n",
        )
        .unwrap();
        assert_eq!(s.n_pairs, 2000);
        assert_eq!(s.noise.baseline_rate, 0.2);
        assert!(Scenario::from_toml_str("outcome = \"binary\"\neffects = [1.5, 0, 0, 0]\n").is_err());
        assert!(Scenario::from_json_str("{\"outcome\":\"continuous\",\"effects\":[0,0,0]}").is_err());
    }

    #[test]
    fn small_run_is_reproducible() {
        let s = Scenario {
            n_pairs: 400,
            replications: 4,
            ..Scenario::situation(OutcomeKind::Continuous, 2).unwrap()
        };
        let cfg = SimConfig::new(0.5, Method::Cart);
        let a = run_replications(&s, &cfg).unwrap();
        assert_eq!(a, run_replications(&s, &cfg).unwrap());
        assert_eq!(a.len(), 4);
    }
}
