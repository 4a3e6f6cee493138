//! Distributional checks of the jump sampler against independent oracles.

use pdmp_core::engine::{HybridState, RecordOptions, RngStream, Simulator};
use pdmp_core::models::{CompartmentalSpec, Kernel, ModelSpec, NeuralFieldSpec, ScalarFn};
use pdmp_core::spatial::{build_partition, ChannelRule, Grid};
use pdmp_core::stats::{ks_accepts, ks_two_sample_accepts, mean_var};

fn compartmental(a: ScalarFn, b: ScalarFn, p: usize, channels: u32, m: usize) -> ModelSpec {
    let part = build_partition(1.0, p, &ChannelRule::Uniform(channels), None).unwrap();
    ModelSpec::Compartmental(CompartmentalSpec::new(a, b, 1.0, part, Grid::new(1.0, m).unwrap()).unwrap())
}

#[test]
fn neural_field_waiting_time_is_exponential() {
    // w ≡ 0: up = l f(0), down = θ, constant between jumps
    let part = build_partition(1.0, 1, &ChannelRule::Uniform(5), None).unwrap();
    let f = ScalarFn::constant(0.8);
    let spec = ModelSpec::NeuralField(
        NeuralFieldSpec::new(f, Kernel::Constant { value: 0.0 }, part, Grid::new(1.0, 15).unwrap()).unwrap(),
    );
    let sim = Simulator::new(&spec, None).unwrap();
    let rate = 5.0 * 0.8 + 2.0;
    let waits: Vec<f64> = (0..2000)
        .map(|r| {
            let mut state = HybridState { t: 0.0, u: Vec::new(), theta: vec![2] };
            let mut rng = RngStream::for_replica(11, 0, r);
            sim.next_jump(&mut state, &mut rng, 100.0).unwrap().unwrap().0
        })
        .collect();
    assert!(ks_accepts(&waits, |x| 1.0 - (-rate * x.max(0.0)).exp()));
}

#[test]
fn integrated_hazard_agrees_with_thinning() {
    let spec = compartmental(ScalarFn::logistic(2.0, 3.0, 0.0), ScalarFn::logistic(2.0, -3.0, 0.0), 1, 4, 15);
    let sim = Simulator::new(&spec, Some(1e-3)).unwrap();
    let g = *spec.grid();
    let u0: Vec<f64> = g.sine_mode(1).iter().map(|v| v * 0.7).collect();
    let start = HybridState { t: 0.0, u: u0, theta: vec![1] };
    let draw = |thinning: bool, r: u32| {
        let mut state = start.clone();
        let mut rng = RngStream::for_replica(if thinning { 5 } else { 6 }, 0, r);
        let jump = if thinning {
            sim.next_jump_thinning(&mut state, &mut rng, 50.0)
        } else {
            sim.next_jump(&mut state, &mut rng, 50.0)
        };
        jump.unwrap().unwrap()
    };
    let a: Vec<(f64, usize)> = (0..2000).map(|r| draw(false, r)).collect();
    let b: Vec<(f64, usize)> = (0..2000).map(|r| draw(true, r)).collect();
    let ta: Vec<f64> = a.iter().map(|x| x.0).collect();
    let tb: Vec<f64> = b.iter().map(|x| x.0).collect();
    assert!(ks_two_sample_accepts(&ta, &tb));
    // opening fraction
    let fa = a.iter().filter(|x| x.1 == 0).count() as f64 / 2000.0;
    let fb = b.iter().filter(|x| x.1 == 0).count() as f64 / 2000.0;
    let se = (fa * (1.0 - fa) / 1000.0).sqrt();
    assert!((fa - fb).abs() < 4.0 * se, "{fa} vs {fb}");
}

#[test]
fn birth_death_mean_relaxation() {
    let spec = compartmental(ScalarFn::constant(1.0), ScalarFn::constant(2.0), 1, 30, 3);
    let sim = Simulator::new(&spec, None).unwrap();
    let t = 0.5;
    let xs: Vec<f64> = (0..2000)
        .map(|r| {
            let init = HybridState { t: 0.0, u: vec![0.0; 3], theta: vec![0] };
            let rec = sim.simulate(init, t, t, RngStream::for_replica(7, 0, r)).unwrap();
            f64::from(rec.theta[1][0])
        })
        .collect();
    let (m, v) = mean_var(&xs);
    let exact = 10.0 * (1.0 - (-3.0 * t).exp());
    assert!((m - exact).abs() < 4.0 * (v / 2000.0).sqrt(), "{m} vs {exact}");
}

#[test]
fn martingale_part_has_zero_mean() {
    let spec = compartmental(ScalarFn::logistic(1.0, 2.0, 0.0), ScalarFn::logistic(1.0, -2.0, 0.0), 4, 20, 15);
    let sim = Simulator::new(&spec, None)
        .unwrap()
        .with_options(RecordOptions { store_u: false, log_jumps: false, track_residual: false });
    let g = *spec.grid();
    let u0 = g.sine_mode(1);
    let ms: Vec<Vec<f64>> = (0..1000)
        .map(|r| {
            let init = HybridState { t: 0.0, u: u0.clone(), theta: vec![5; 4] };
            let rec = sim.simulate(init, 1.0, 0.5, RngStream::for_replica(8, 0, r)).unwrap();
            rec.martingale_part().pop().unwrap()
        })
        .collect();
    for k in 0..4 {
        let xs: Vec<f64> = ms.iter().map(|m| m[k]).collect();
        let (m, v) = mean_var(&xs);
        assert!(m.abs() < 4.0 * (v / 1000.0).sqrt(), "compartment {k}: {m}");
    }
}
