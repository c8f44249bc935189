use omnet_core::tensor::{Graph, Tensor};
use std::time::Instant;

fn main() {
    let threads: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(2);
    rayon::ThreadPoolBuilder::new().num_threads(threads).build_global().unwrap();
    let x = Tensor::new(&[32,32,16,8,20], vec![0.1; 32*32*16*8*20]).unwrap();
    let w = Tensor::new(&[3,3,3,8,8], vec![0.01; 27*64]).unwrap();
    let b = Tensor::new(&[8], vec![0.0; 8]).unwrap();
    let flop = 2.0 * 20.0 * (32.0*32.0*16.0) * 27.0 * 64.0;

    let reps = 20;
    let t0 = Instant::now();
    for _ in 0..reps {
        let mut g = Graph::new();
        let xv = g.input(x.clone());
        let wv = g.input(w.clone());
        let bv = g.input(b.clone());
        let _y = g.conv3d(xv, wv, bv, [1;3], [1;3]).unwrap();
    }
    let fwd = t0.elapsed().as_secs_f64() / reps as f64;
    println!("fwd ({threads}t): {:.1} ms/batch, {:.2} GFLOP/s", fwd*1e3, flop/fwd/1e9);

    let t0 = Instant::now();
    for _ in 0..reps {
        let mut g = Graph::new();
        let xv = g.param(&x.clone().with_grad());
        let wv = g.param(&w.clone().with_grad());
        let bv = g.param(&b.clone().with_grad());
        let y = g.conv3d(xv, wv, bv, [1;3], [1;3]).unwrap();
        let n = g.value(y).len();
        let loss = g.weighted_sum(y, &vec![1e-6; n]).unwrap();
        g.backward(loss).unwrap();
    }
    let both = t0.elapsed().as_secs_f64() / reps as f64;
    println!("fwd+bwd ({threads}t): {:.1} ms/batch, {:.2} GFLOP/s effective", both*1e3, 3.0*flop/both/1e9);
}
