//! Wall-clock probe for one training-shaped pass. Ignored by default; run
//! with `cargo test -p semarflow-core --release bench -- --ignored --nocapture`.

use ndarray::{Array2, ArrayD};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use semarflow_autograd::{backward, Tensor};
use semarflow_core::model::{one_hot_batch, FlowNet, ModelConfig};
use semarflow_core::types::SemanticMap;
use std::time::Instant;

#[test]
#[ignore = "benchmark"]
fn bench_forward_backward_pass() {
    let net = FlowNet::<f32>::new(ModelConfig::default()).unwrap();
    println!("parameters: {}", net.num_params());

    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let n = 2;
    let (h, w) = (64usize, 128usize);
    let img = |rng: &mut ChaCha8Rng| {
        Tensor::<f32>::constant(ArrayD::from_shape_fn(vec![n, 3, h, w], |_| {
            rng.random_range(0.0..1.0)
        }))
    };
    let i1 = img(&mut rng);
    let i2 = img(&mut rng);
    let maps: Vec<SemanticMap> = (0..n)
        .map(|_| SemanticMap::from_raw(Array2::from_elem((h, w), 13u8)))
        .collect();
    let refs: Vec<&SemanticMap> = maps.iter().collect();
    let s = one_hot_batch::<f32>(&refs);

    // warmup
    let leaves = net.bind_leaves();
    let out = net.forward(&leaves, &i1, &i2, &s, &s).unwrap();
    let loss = out.finest_fw().abs().sum_all();
    let _ = backward(&loss);

    let reps = 10;
    let t0 = Instant::now();
    for _ in 0..reps {
        let leaves = net.bind_leaves();
        let out = net.forward(&leaves, &i1, &i2, &s, &s).unwrap();
        let mut loss = out.finest_fw().abs().sum_all();
        loss = loss.add(&out.finest_bw().abs().sum_all());
        let _ = backward(&loss);
    }
    let per = t0.elapsed().as_secs_f64() / reps as f64;
    println!("batch-{n} {h}x{w} forward+backward: {:.1} ms", per * 1e3);

    let t0 = Instant::now();
    for _ in 0..reps {
        let _ = net.infer(&i1, &i2, &s, &s).unwrap();
    }
    println!(
        "batch-{n} {h}x{w} inference: {:.1} ms",
        t0.elapsed().as_secs_f64() / reps as f64 * 1e3
    );
}
