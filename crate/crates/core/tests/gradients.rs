mod support;

use support::{check_model, check_op, op_cases, random, TOLERANCE};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn every_op_matches_central_differences() {
    let cases = op_cases();
    for (name, err) in &cases {
        assert!(*err < TOLERANCE, "{name}: relative error {err:e}");
    }
    assert!(cases.len() >= 25);
}

#[test]
fn tiny_model_matches_central_differences() {
    let (err, checked) = check_model(3);
    assert!(err < TOLERANCE, "relative error {err:e}");
    assert!(checked > 1000, "{checked}");
}

#[test]
fn strided_padded_conv_with_odd_sizes() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = random(&[1, 3, 9, 7], &mut rng);
    let w = random(&[2, 3, 7, 7], &mut rng);
    let err = check_op(&[x, w], 9, |g, v| g.conv2d(v[0], v[1], None, (2, 2), (3, 3)).unwrap());
    assert!(err < TOLERANCE, "{err:e}");
}

#[test]
fn softmax_of_large_logits_is_stable() {
    let t = hmer::Tensor::new(vec![4], vec![800.0, 799.0, -5.0, 801.0]).unwrap();
    let err = check_op(&[t], 1, |g, v| g.softmax(v[0], 0).unwrap());
    assert!(err < TOLERANCE, "{err:e}");
}
