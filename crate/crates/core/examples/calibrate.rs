//! Runs selected simulation cells and prints power and discovery rates.
//!
//! usage: calibrate <reps> <unit_sd> <baseline_rate> [cell ...]
//! where a cell is `c|b:situation:cart|ct:fraction[:selection[:cp[:hint]]]`, e.g.
//! `c:2:ct:0.25` or `c:1:cart:0.5:fixed:0.01`.

use std::time::Instant;

use hetfx::discovery::{Method, Selection};
use hetfx::simlab::{Scenario, SimConfig, TableCell};
use hetfx::OutcomeKind;

fn main() {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let reps: usize = args.first().and_then(|a| a.parse().ok()).unwrap_or(100);
    let unit_sd: f64 = args.get(1).and_then(|a| a.parse().ok()).unwrap_or(hetfx::simlab::DEFAULT_UNIT_SD);
    let rate: f64 = args.get(2).and_then(|a| a.parse().ok()).unwrap_or(hetfx::simlab::DEFAULT_BASELINE_RATE);
    let default_cells = [
        "c:2:ct:0.25",
        "c:2:cart:0.5",
        "c:1:cart:0.1",
        "c:5:ct:0.25",
        "b:4:ct:0.25",
        "b:2:cart:0.1",
        "c:1:ct:0.5",
        "c:1:cart:0.5",
    ];
    let cells: Vec<String> = if args.len() > 3 {
        args[3..].to_vec()
    } else {
        default_cells.iter().map(|s| s.to_string()).collect()
    };
    for cell in cells {
        let f: Vec<&str> = cell.split(':').collect();
        let outcome = if f[0] == "b" { OutcomeKind::Binary } else { OutcomeKind::Continuous };
        let mut s = Scenario::situation(outcome, f[1].parse().unwrap()).unwrap();
        s.replications = reps;
        s.noise.unit_sd = unit_sd;
        s.noise.baseline_rate = rate;
        let method = if f[2] == "ct" { Method::Ct } else { Method::Cart };
        let mut cfg = SimConfig::new(f[3].parse().unwrap(), method);
        match f.get(4).copied() {
            Some("fixed") => cfg.growth.selection = Some(Selection::Fixed),
            Some("one-se") => cfg.growth.selection = Some(Selection::OneSe),
            _ => {}
        }
        if let Some(cp) = f.get(5) {
            cfg.growth.fixed_cp = cp.parse().unwrap();
        }
        if let Some(h) = f.get(6) {
            cfg.growth.honest_fraction_hint = h.parse().unwrap();
        }
        let t = Instant::now();
        let r = TableCell::run(&s, &cfg).unwrap();
        println!(
            "{cell:14} power {:.3} (se {:.3})  rates {:?}  {:.1}s",
            r.power.power,
            r.power.mc_se,
            r.discovery.rates.iter().map(|v| (v * 100.0).round() / 100.0).collect::<Vec<_>>(),
            t.elapsed().as_secs_f64()
        );
    }
}
