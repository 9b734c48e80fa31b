//! Checks tape gradients against central differences, first for a small
//! hand-written function and then for every op via the built-in suites.
//!
//!     cargo run --release --example gradient_check

use betaprune::tensor::{finite_difference_check, Tensor};
use betaprune::verify;

fn main() -> betaprune::Result<()> {
    // f(x) = Σ softplus(x) · sigmoid(x)
    let at = Tensor::from_fn(vec![2, 3], |i| i as f64 * 0.4 - 1.0);
    let err = finite_difference_check(
        |g, x| {
            let a = g.softplus(x);
            let b = g.sigmoid(x);
            let ab = g.mul(a, b)?;
            Ok(g.sum(ab))
        },
        &at,
        1e-5,
    )?;
    println!("hand-written function: worst relative error {err:.2e}");

    for op in verify::FD_OPS {
        println!("{}", verify::fd_suite(op, 100, 0)?);
    }
    Ok(())
}
