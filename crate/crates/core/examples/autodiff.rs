//! Fits a 3x3 convolution to a fixed target kernel with the tape and Adam.

use demc::tensor::{Graph, ParamStore, Shape, Tensor};
use demc::train::{adam_step, AdamConfig, AdamState};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let x = Tensor::from_fn(Shape::new(4, 1, 16, 16), |_| rng.random_range(-1.0..1.0));
    let target_w = Tensor::from_vec(Shape::new(1, 1, 3, 3), vec![0.0, -1.0, 0.0, -1.0, 4.0, -1.0, 0.0, -1.0, 0.0f64]).unwrap();

    let mut g = Graph::new();
    let mut store = ParamStore::new();
    store.insert_param("w", target_w.clone());
    store.insert_param("b", Tensor::zeros(Shape::vector(1)));
    let xi = g.input(x.clone());
    let (w, b) = (g.param(&store, "w").unwrap(), g.param(&store, "b").unwrap());
    let y = g.conv2d(xi, w, b, 1, 1).unwrap();
    let target = g.value(y).clone();

    store.insert_param("w", Tensor::zeros(Shape::new(1, 1, 3, 3)));
    let mut state = AdamState::new();
    for step in 0..=600 {
        let mut g = Graph::new();
        let xi = g.input(x.clone());
        let (w, b) = (g.param(&store, "w").unwrap(), g.param(&store, "b").unwrap());
        let y = g.conv2d(xi, w, b, 1, 1).unwrap();
        let t = g.input(target.clone());
        let neg = g.scale(t, -1.0);
        let d = g.add(y, neg).unwrap();
        let sq = g.mul(d, d).unwrap();
        let loss = g.sum(sq);
        let value = g.value(loss).data()[0];
        let grads = g.backward(loss).unwrap();
        adam_step(&mut store, &grads, &mut state, 0.05, AdamConfig::default()).unwrap();
        if step % 100 == 0 {
            println!("step {step:4}  loss {value:.3e}");
        }
    }
    let w = store.param("w").unwrap().data();
    for row in w.chunks(3) {
        println!("{:+.3} {:+.3} {:+.3}", row[0], row[1], row[2]);
    }
}
