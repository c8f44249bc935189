use omnet_core::backbone::{NetworkConfig, OmNet};
use omnet_core::tensor::{Graph, Tensor};
use std::time::Instant;

fn main() {
    let cfg = NetworkConfig::default();
    let model = OmNet::build(&cfg).unwrap();
    let n = 60;
    let x = Tensor::new(&[32,32,16,4,n], vec![0.1; 32*32*16*4*n]).unwrap();
    let labels = vec![1u8; 32*32*16*n];

    // timed phases
    for rep in 0..2 {
        let t0 = Instant::now();
        let mut g = Graph::new();
        let bind = model.params.bind(&mut g);
        let xv = g.input(x.clone());
        let t_setup = t0.elapsed();

        let t1 = Instant::now();
        let feats = model.forward_features(&mut g, &bind, xv).unwrap();
        let t_backbone = t1.elapsed();

        let t2 = Instant::now();
        let mut losses = Vec::new();
        for task in 0..3 {
            let logits = model.forward_task(&mut g, &bind, feats, task, None).unwrap();
            let lab: Vec<u8> = if task == 2 { vec![0u8; labels.len()] } else { labels.clone() };
            losses.push(g.softmax_with_loss(logits, &lab).unwrap());
        }
        let mut total = losses[0];
        for l in &losses[1..] { total = g.residual_add(total, *l).unwrap(); }
        let t_heads = t2.elapsed();

        let t3 = Instant::now();
        g.backward(total).unwrap();
        let t_back = t3.elapsed();
        if rep == 1 {
            println!("setup {:.0} ms | backbone fwd {:.0} ms | heads+loss {:.0} ms | backward {:.0} ms",
                t_setup.as_secs_f64()*1e3, t_backbone.as_secs_f64()*1e3,
                t_heads.as_secs_f64()*1e3, t_back.as_secs_f64()*1e3);
        }
    }
}
