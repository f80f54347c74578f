use dfst::field::*;
use dfst::jet::*;
use dfst::physics::*;
use dfst::train::*;
use std::time::Instant;

fn main() {
    // Isolate: (a) batched MLP forward, (b) f64 assembly, (c) tape head+backward, (d) MLP backward.
    let setup = ProblemSetup::new(
        ProblemSpec::Beltrami(BeltramiConfig::default()), &[32, 32, 32, 32], true).unwrap();
    let widths = setup.stress_widths.clone();
    let n_out = *widths.last().unwrap();
    let theta = setup.init_params(0);
    let npts = 2500usize;
    let pts: Vec<Vec<f64>> = (0..npts).map(|i| {
        let f = i as f64 / npts as f64;
        vec![f, 2.0*f - 1.0, 0.3 - f, f*0.7]
    }).collect();

    let mut ws = MlpWorkspace::new(&widths, 4, 8);
    // (a) forward only
    let t0 = Instant::now();
    for chunk in pts.chunks(8) {
        let entries: Vec<&[f64]> = chunk.iter().map(|p| p.as_slice()).collect();
        ws.forward_batch(&theta[..], &entries);
    }
    println!("forward_batch: {:.1} ms", t0.elapsed().as_secs_f64()*1000.0);

    // (b) forward + jets + assembly
    let t0 = Instant::now();
    let mut sink = 0.0;
    for chunk in pts.chunks(8) {
        let entries: Vec<&[f64]> = chunk.iter().map(|p| p.as_slice()).collect();
        ws.forward_batch(&theta[..], &entries);
        for e in 0..entries.len() {
            let coeffs: Vec<Jet3<f64>> = (0..n_out).map(|o| ws.output_jet(e, o)).collect();
            let s = assemble_from_jets(&setup.tables, &coeffs, true).unwrap();
            sink += s.s[0].v;
        }
    }
    println!("forward + assemble: {:.1} ms (sink {sink:.3})", t0.elapsed().as_secs_f64()*1000.0);

    // (d) forward + backward (no head: seed output adjoints directly)
    let mut grad = vec![0.0; theta.len()];
    let t0 = Instant::now();
    for chunk in pts.chunks(8) {
        let entries: Vec<&[f64]> = chunk.iter().map(|p| p.as_slice()).collect();
        ws.forward_batch(&theta[..], &entries);
        ws.clear_output_adjoint();
        ws.backward_batch(&theta[..], &mut grad);
    }
    println!("forward + backward(zero adj): {:.1} ms", t0.elapsed().as_secs_f64()*1000.0);
}
