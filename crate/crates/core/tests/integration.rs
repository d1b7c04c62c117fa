use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use resformer::model::{self, Model, ModelConfig};
use resformer::nn::RunOptions;
use resformer::tensor::Tensor;
use resformer::training::{train, SyntheticSpec, TrainConfig};
use resformer::verification::{gradcheck_model, theorem1_mc, Transform};

fn nano(seed: u64) -> Model {
    Model::build(&ModelConfig::registry("Nano").unwrap(), seed).unwrap()
}

fn images(seed: u64, n: usize) -> Tensor {
    Tensor::randn(&[n, 3, 32, 32], 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

#[test]
fn checkpoint_round_trip_preserves_outputs() {
    let spec = SyntheticSpec { train: 20, test: 10, ..SyntheticSpec::default() };
    let data = resformer::training::generate_synthetic(&spec).unwrap();
    let mut m = nano(5);
    let cfg = TrainConfig { epochs: 1, batch_size: 5, ..TrainConfig::default() };
    train(&mut m, &data, &cfg, None, |_| Ok(())).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    model::save(&m, &path).unwrap();
    let back = model::load(&path, Some(&m.config)).unwrap();
    assert_eq!(model::checkpoint_bytes(&back), model::checkpoint_bytes(&m));

    let x = images(9, 2);
    let a = m.forward(&x, RunOptions::eval(), None).unwrap();
    let b = back.forward(&x, RunOptions::eval(), None).unwrap();
    assert_eq!(a.logits.value().data(), b.logits.value().data());
}

#[test]
fn checkpoint_rejects_other_architecture_and_corruption() {
    let m = nano(1);
    let bytes = model::checkpoint_bytes(&m);
    let ti = ModelConfig::registry("Ti").unwrap();
    assert!(model::checkpoint_from_bytes(&bytes, Some(&ti)).is_err());

    let mut bad = bytes.clone();
    let mid = bad.len() / 2;
    bad[mid] ^= 0x40;
    assert!(model::checkpoint_from_bytes(&bad, None).is_err());
    assert!(model::checkpoint_from_bytes(&bytes[..bytes.len() - 3], None).is_err());
}

#[test]
fn monte_carlo_is_independent_of_job_count() {
    let a = theorem1_mc(Transform::DstT, 0.3, 64, 100_000, 4, 1).unwrap();
    let b = theorem1_mc(Transform::DstT, 0.3, 64, 100_000, 4, 4).unwrap();
    assert_eq!(a, b);
}

#[test]
fn end_to_end_gradients_match_finite_differences() {
    let mut m = nano(0);
    let r = gradcheck_model(&mut m, 2, 100, 77).unwrap();
    assert!(r.pass, "{:?}", r.failures);
    assert!(r.coordinates >= 100);
}

#[test]
fn eval_forward_does_not_depend_on_batch_composition() {
    let mut m = nano(3);
    let x = images(2, 3);
    let warm = m.forward(&x, RunOptions::train(Default::default()), None).unwrap();
    m.apply(&warm.updates).unwrap();
    let full = m.forward(&x, RunOptions::eval(), None).unwrap();
    let per = x.shape()[1..].iter().product::<usize>();
    let first = Tensor::new(&[1, 3, 32, 32], x.data()[..per].to_vec()).unwrap();
    let one = m.forward(&first, RunOptions::eval(), None).unwrap();
    let classes = one.logits.value().shape()[1];
    for (a, b) in one.logits.value().data().iter().zip(&full.logits.value().data()[..classes]) {
        assert!((a - b).abs() < 1e-9);
    }
}
