use styleseg::{Padding, ParamStore, Rng, Tape, Tensor};
use std::time::Instant;

fn main() {
    let mut rng = Rng::new(1);
    let mut store = ParamStore::new();
    // representative mid-network layer: 16->16 at 32x32, batch 8
    let w = store.register("w", Tensor::from_fn(&[16, 16, 3, 3], |_| rng.normal_scaled(0.0, 0.1)));
    let b = store.register("b", Tensor::zeros(&[16]));
    let x = Tensor::from_fn(&[8, 16, 32, 32], |_| rng.normal());
    let t = Tensor::from_fn(&[8, 16, 32, 32], |i| (i % 2) as f64);

    let reps = 30;
    let start = Instant::now();
    for _ in 0..reps {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let wv = tape.param(&store, w);
        let bv = tape.param(&store, b);
        let c1 = tape.conv2d(xv, wv, bv, 1, Padding::Same).unwrap();
        let loss = tape.bce_with_logits(c1, t.clone()).unwrap();
        tape.backward(loss, &mut store).unwrap();
    }
    let dt = start.elapsed().as_secs_f64();
    // fwd MACs: N*K*C*OH*OW*9; bwd ~2x
    let macs = 8.0 * 16.0 * 16.0 * 1024.0 * 9.0 * 3.0 * reps as f64;
    println!("fwd+bwd conv: {:.1} ms/iter, {:.2} GMAC/s", dt * 1000.0 / reps as f64, macs / dt / 1e9);
}
