use dfst::lbfgs::LbfgsOptions;
use dfst::physics::*;
use dfst::train::*;
use std::time::Instant;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let memory: usize = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(10);
    let bc_w: f64 = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(1.0);
    let iters: usize = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(1500);

    let setup = ProblemSetup::new(
        ProblemSpec::Beltrami(BeltramiConfig::default()), &[32, 32, 32, 32], true).unwrap();
    let colloc = sample_collocation(&setup.spec,
        CollocationCounts { interior: 2000, boundary: 600, initial: 200 }, 1).unwrap();
    let weights = LossWeights { bc: bc_w, ic: bc_w, ..Default::default() };
    let trainer = Trainer::new(setup, weights, collocation_points(&colloc)).with_block_size(8);
    let theta0 = trainer.setup.init_params(0);
    let validation = sample_validation(&trainer.setup.spec, 2000, 77);
    let t0 = Instant::now();
    let mut cb = |rec: &dfst::lbfgs::IterRecord, theta: &[f64]| -> bool {
        if rec.iter % 250 == 0 {
            let rel = trainer.validate(theta, &validation.0, &validation.1).unwrap();
            let (_, terms) = trainer.loss_terms(theta).unwrap();
            println!("M={memory} bcw={bc_w} it {:5} loss {:.2e} [visc {:.1e} bc {:.1e} ic {:.1e}] rel: u {:.2e} v {:.2e} w {:.2e} p {:.2e} mean {:.2e} ({:.0}s)",
                rec.iter, rec.loss, terms[0], terms[2], terms[3],
                rel.per_field[0], rel.per_field[1], rel.per_field[2], rel.per_field[3], rel.mean,
                t0.elapsed().as_secs_f64());
        }
        false
    };
    let opts = LbfgsOptions { max_iters: iters, memory, ..Default::default() };
    let res = dfst::lbfgs::minimize(|p, g| trainer.loss_and_grad(p, g), &theta0, &opts, Some(&mut cb));
    let rel = trainer.validate(&res.theta, &validation.0, &validation.1).unwrap();
    println!("FINAL M={memory} bcw={bc_w}: iters {} loss {:.3e} rel-mean {:.3e} stop {:?} wolfe_fail {} ({:.0}s)",
        res.iterations, res.loss, rel.mean, res.stop, res.wolfe_failures, t0.elapsed().as_secs_f64());
}
