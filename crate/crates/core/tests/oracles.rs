//! Full-size oracle suites.

use betaprune::verify::{self, FD_OPS};

#[test]
fn every_op_matches_central_differences() {
    for op in FD_OPS {
        let r = verify::fd_suite(op, 100, 11).unwrap();
        println!("{r}");
        assert!(r.passed(), "{r}");
    }
}

#[test]
fn conv2d_matches_naive_loops() {
    let r = verify::conv2d_suite(300, 12).unwrap();
    assert!(r.passed(), "{r}");
}

#[test]
fn conv2d_transpose_matches_explicit_matrix() {
    let r = verify::conv2d_transpose_suite(150, 13).unwrap();
    assert!(r.passed(), "{r}");
}

#[test]
fn affine_matches_naive_matmul() {
    let r = verify::affine_suite(300, 14).unwrap();
    assert!(r.passed(), "{r}");
}

#[test]
fn kl_matches_quadrature() {
    let r = verify::kl_suite(300, 15).unwrap();
    assert!(r.passed(), "{r}");
}

#[test]
fn masks_match_full_sort() {
    let r = verify::mask_suite(1000, 16).unwrap();
    assert!(r.passed(), "{r}");
}

#[test]
fn strided_padded_two_channel_conv() {
    use betaprune::rng::{self, Stream};
    use betaprune::tensor::{Graph, Tensor};
    use rand::Rng;

    let mut rng = rng::stream(3, Stream::Fixture);
    let x = Tensor::<f64>::from_fn(vec![1, 2, 5, 5], |_| rng.gen_range(-1.0..1.0));
    let k = Tensor::<f64>::from_fn(vec![3, 2, 3, 3], |_| rng.gen_range(-1.0..1.0));
    let b = Tensor::<f64>::zeros(vec![3]);
    let mut g = Graph::new();
    let (xv, kv, bv) = (g.constant(&x), g.constant(&k), g.constant(&b));
    let y = g.conv2d(xv, kv, bv, 2, 1).unwrap();
    let (want, shape) = verify::naive_conv2d(x.data(), [1, 2, 5, 5], k.data(), [3, 2, 3, 3], None, 2, 1);
    assert_eq!(g.shape(y), shape);
    assert_eq!(shape, [1, 3, 3, 3]);
    for (a, w) in g.value(y).iter().zip(&want) {
        assert!((a - w).abs() <= 1e-12 * w.abs().max(1.0), "{a} vs {w}");
    }
}
