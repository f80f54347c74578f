use dfst::lbfgs::LbfgsOptions;
use dfst::physics::*;
use dfst::train::*;
use std::time::Instant;

fn main() {
    for (nb, ni) in [(360usize, 140usize)] {
        let setup = ProblemSetup::new(
            ProblemSpec::Beltrami(BeltramiConfig::default()), &[32, 32, 32, 32], true).unwrap();
        let colloc = sample_collocation(&setup.spec,
            CollocationCounts { interior: 2000, boundary: nb, initial: ni }, 1).unwrap();
        let trainer = Trainer::new(setup, LossWeights::default(), collocation_points(&colloc));
        let theta0 = trainer.setup.init_params(0);
        let validation = sample_validation(&trainer.setup.spec, 2000, 77);
        let t0 = Instant::now();
        let mut last_print = Instant::now();
        let mut cb = |rec: &dfst::lbfgs::IterRecord, theta: &[f64]| -> bool {
            if rec.iter % 100 == 0 {
                let rel = trainer.validate(theta, &validation.0, &validation.1).unwrap();
                println!("bc={nb} iter {:5}  loss {:.3e}  rel-l2 {:.3e}  ({:.0}s, {:.1}s since)",
                    rec.iter, rec.loss, rel.mean, t0.elapsed().as_secs_f64(), last_print.elapsed().as_secs_f64());
                last_print = Instant::now();
                return rel.mean <= 5e-2 && rec.iter >= 200;
            }
            false
        };
        let opts = LbfgsOptions { max_iters: 3000, ..Default::default() };
        let mut grad = vec![0.0; theta0.len()];
        let l0 = trainer.loss_and_grad(&theta0, &mut grad);
        let res = dfst::lbfgs::minimize(|p, g| trainer.loss_and_grad(p, g), &theta0, &opts,
            Some(&mut cb));
        let rel = trainer.validate(&res.theta, &validation.0, &validation.1).unwrap();
        println!("FINAL bc={nb}: iters {}, loss {:.3e} -> {:.3e} (drop {:.0}x), rel-l2 {:.3e}, stop {:?}, {:.0}s",
            res.iterations, l0, res.loss, l0/res.loss, rel.mean, res.stop, t0.elapsed().as_secs_f64());
    }
}
