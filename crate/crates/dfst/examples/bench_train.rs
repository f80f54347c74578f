use dfst::lbfgs::LbfgsOptions;
use dfst::physics::*;
use dfst::train::*;
use std::time::Instant;

fn main() {
    // Euler: 4x32 net, 500 interior + 200 bc/ic (acceptance criterion 6 shape)
    let setup = ProblemSetup::new(
        ProblemSpec::EulerVortex(EulerVortexConfig::default()), &[32, 32, 32, 32], true).unwrap();
    let colloc = sample_collocation(&setup.spec,
        CollocationCounts { interior: 500, boundary: 130, initial: 70 }, 1).unwrap();
    let points = collocation_points(&colloc);
    let theta0 = setup.init_params(0);
    println!("euler params: {}", theta0.len());
    let trainer = Trainer::new(setup, LossWeights::default(), points);
    let mut grad = vec![0.0; theta0.len()];
    let t0 = Instant::now();
    let n = 20;
    let mut loss = 0.0;
    for _ in 0..n { loss = trainer.loss_and_grad(&theta0, &mut grad); }
    println!("euler loss {:.6e}; per eval: {:.1} ms", loss, t0.elapsed().as_secs_f64()*1000.0/n as f64);

    // Beltrami: 4x32, 2000 interior + 800 bc/ic
    let setup = ProblemSetup::new(
        ProblemSpec::Beltrami(BeltramiConfig::default()), &[32, 32, 32, 32], true).unwrap();
    let colloc = sample_collocation(&setup.spec,
        CollocationCounts { interior: 2000, boundary: 600, initial: 200 }, 1).unwrap();
    let points = collocation_points(&colloc);
    let theta0 = setup.init_params(0);
    println!("beltrami params: {}", theta0.len());
    let trainer = Trainer::new(setup, LossWeights::default(), points);
    let mut grad = vec![0.0; theta0.len()];
    let t0 = Instant::now();
    let n = 5;
    for _ in 0..n { loss = trainer.loss_and_grad(&theta0, &mut grad); }
    println!("beltrami loss {:.6e}; per eval: {:.1} ms", loss, t0.elapsed().as_secs_f64()*1000.0/n as f64);

    // quick 100-iter LBFGS timing on euler
    let setup = ProblemSetup::new(
        ProblemSpec::EulerVortex(EulerVortexConfig::default()), &[32, 32, 32, 32], true).unwrap();
    let colloc = sample_collocation(&setup.spec,
        CollocationCounts { interior: 500, boundary: 130, initial: 70 }, 1).unwrap();
    let trainer = Trainer::new(setup, LossWeights::default(), collocation_points(&colloc));
    let theta0 = trainer.setup.init_params(0);
    let validation = sample_validation(&trainer.setup.spec, 1000, 77);
    let opts = LbfgsOptions { max_iters: 100, ..Default::default() };
    let t0 = Instant::now();
    let out = train(&trainer, &theta0, &opts, &validation, None);
    println!("euler 100 iters: {:.1}s, loss {:.3e} -> {:.3e}, rel-l2 {:.3e}, wolfe_failures {}",
        t0.elapsed().as_secs_f64(), out.initial_loss, out.result.loss, out.metrics.mean, out.result.wolfe_failures);
}
