use ndarray::Array2;
use prunecast_core::gradcheck::check_gradients;
use prunecast_core::model::{BlockChannels, ModelConfig, ModelParams};
use prunecast_core::pruning::normalize_adjacency;
use prunecast_core::Tensor3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tiny() -> ModelConfig {
    ModelConfig {
        blocks: vec![BlockChannels { c_in: 1, c_hidden: 3, c_out: 3 }],
        kernel_time: 2,
        history: 8,
        horizon_steps: 2,
        head_channels: 3,
        n_nodes: 4,
    }
}

#[test]
fn full_model_gradient_matches_central_differences() {
    let cfg = tiny();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut params = ModelParams::init(&cfg, 11).unwrap();
    // Zero biases on dead channels would put ReLU inputs exactly on the kink.
    let jittered: Vec<f64> = params.flatten().iter().map(|v| v + rng.random_range(-0.1..0.1)).collect();
    params.assign_flat(&jittered).unwrap();
    let a = ndarray::array![
        [0.0, 1.0, 0.0, 0.5],
        [1.0, 0.0, 2.0, 0.0],
        [0.0, 2.0, 0.0, 1.0],
        [0.5, 0.0, 1.0, 0.0]
    ];
    let a_hat = normalize_adjacency(&a);
    let inputs: Vec<Tensor3> = (0..3)
        .map(|_| Tensor3::from_vec((1, 4, 8), (0..32).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap())
        .collect();
    let targets: Vec<Array2<f64>> = (0..3)
        .map(|_| Array2::from_shape_fn((4, 2), |_| rng.random_range(-1.0..1.0)))
        .collect();
    let batch: Vec<_> = inputs.iter().zip(&targets).collect();
    let entries = check_gradients(&params, &a_hat, &batch, 20, 1e-5, 7).unwrap();
    let tensors = params.tensors().len();
    assert!(entries.len() >= tensors);
    let worst = entries.iter().max_by(|a, b| a.rel_error.total_cmp(&b.rel_error)).unwrap();
    assert!(worst.rel_error < 1e-4, "{worst:?}");
}
