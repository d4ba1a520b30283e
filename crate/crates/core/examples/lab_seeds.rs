//! Runs the forgetting lab over a range of seeds and prints the recovery
//! margins for each, optionally with a scenario loaded from JSON.
//!
//! cargo run --release --example lab_seeds -- [first_seed] [n_seeds] [scenario.json]

use cocktail::lab::{max_weight_delta, run_forgetting_experiment, LabConfig, Scenario};
use cocktail::merge::MergeMode;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let first: u64 = args.first().map(|s| s.parse()).transpose()?.unwrap_or(0);
    let count: u64 = args.get(1).map(|s| s.parse()).transpose()?.unwrap_or(10);
    let scenario = match args.get(2) {
        Some(path) => serde_json::from_str(&std::fs::read_to_string(path)?)?,
        None => Scenario::default(),
    };
    let mut passed = 0;
    for seed in first..first + count {
        let mut config = LabConfig::new(seed);
        config.example_counts = vec![5, scenario.geometry.n_dev];
        config.scenario = scenario.clone();
        config.alpha_grid = vec![0.0, 0.5, 1.0];
        let report = run_forgetting_experiment(&config)?;
        let (base, ft) = (report.base(), report.fine_tuned());
        let mid = report.merged(MergeMode::MonoSpecialist, Some(0.5), None).expect("mono row");
        let drop = base.other_acc - ft.other_acc;
        let gain = ft.target_acc - base.target_acc;
        let recovered = (mid.other_acc - ft.other_acc) / drop;
        let retained = (mid.target_acc - base.target_acc) / gain;
        let dw = max_weight_delta(
            report.weights_for(5).expect("n=5"),
            report.weights_for(scenario.geometry.n_dev).expect("all"),
        );
        let ok = drop >= 0.05 && recovered >= 0.5 && retained >= 0.8 && dw < 0.2;
        passed += ok as u32;
        println!(
            "seed {seed}: base {:.3}/{:.3} ft {:.3}/{:.3} mid {:.3}/{:.3} drop {drop:.3} recovered {recovered:.2} retained {retained:.2} dw {dw:.3} {}",
            base.target_acc, base.other_acc, ft.target_acc, ft.other_acc, mid.target_acc, mid.other_acc,
            if ok { "ok" } else { "FAIL" }
        );
    }
    println!("{passed}/{count} seeds pass");
    Ok(())
}
