use pdmp_core::config::{load_config, RunConfig};
use pdmp_core::experiments::{lln_experiment, trace_convergence_experiment};

fn desk_neural_field() -> RunConfig {
    let path = format!("{}/../../configs/desk_neural_field.json", env!("CARGO_MANIFEST_DIR"));
    load_config(std::path::Path::new(&path)).unwrap().0
}

#[test]
fn batch_means_errors_bracket_seed_to_seed_spread() {
    let mut cfg = desk_neural_field();
    cfg.experiment.replicas = 200;
    let runs: Vec<_> = [11u64, 12, 13, 14, 15]
        .into_iter()
        .map(|seed| {
            cfg.seed = seed;
            let a = trace_convergence_experiment(&cfg).unwrap().report;
            let b = lln_experiment(&cfg).unwrap().report;
            (a, b)
        })
        .collect();
    let stats = [("trace", "scaled_trace"), ("lln", "sup_error"), ("lln", "projection_mean")];
    for (exp, stat) in stats {
        for level in 0..3 {
            let est: Vec<_> = runs
                .iter()
                .map(|(a, b)| {
                    let rep = if exp == "trace" { a } else { b };
                    rep.levels[level].stats[stat]
                })
                .collect();
            let pooled = est.iter().map(|e| e.value).sum::<f64>() / est.len() as f64;
            for e in &est {
                assert!(
                    (e.value - pooled).abs() <= 3.0 * e.se,
                    "{exp}/{stat} level {level}: {} ± {} vs pooled {pooled}",
                    e.value,
                    e.se
                );
            }
        }
    }
}

#[test]
fn reports_flag_ladders_outside_the_hypothesis() {
    let mut cfg = desk_neural_field();
    cfg.experiment.replicas = 40;
    let report = trace_convergence_experiment(&cfg).unwrap().report;
    assert!(report.notes.iter().any(|n| n.contains("outside the ℓ·δ₊ → 0 regime")));
    assert_eq!(report.levels.len(), 3);
    assert_eq!(report.levels[2].alpha_n, 256.0 * 32.0);
}
