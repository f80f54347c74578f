use dfst::physics::*;
use dfst::train::*;
use std::time::Instant;

fn main() {
    for bs in [2usize, 4, 8, 16, 32] {
        let setup = ProblemSetup::new(
            ProblemSpec::Beltrami(BeltramiConfig::default()), &[32, 32, 32, 32], true).unwrap();
        let colloc = sample_collocation(&setup.spec,
            CollocationCounts { interior: 2000, boundary: 360, initial: 140 }, 1).unwrap();
        let trainer = Trainer::new(setup, LossWeights::default(), collocation_points(&colloc))
            .with_block_size(bs);
        let theta0 = trainer.setup.init_params(0);
        let mut grad = vec![0.0; theta0.len()];
        let t0 = Instant::now();
        let n = 5;
        let mut loss = 0.0;
        for _ in 0..n { loss = trainer.loss_and_grad(&theta0, &mut grad); }
        println!("block {bs:3}: {:.1} ms/eval (loss {:.6e})", t0.elapsed().as_secs_f64()*1000.0/n as f64, loss);
    }
}
