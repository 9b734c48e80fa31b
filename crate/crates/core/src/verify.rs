//! Independent oracles for the numerical core.
//!
//! Each suite draws random cases from a fixed seed and compares the engine
//! against a computation that shares no code with it: naive loops for the
//! convolutions and matrix products, an explicit matrix for the transposed
//! convolution, numerical quadrature for the KL term, central differences
//! for gradients and a full sort for pruning masks.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::betavae::kl_divergence;
use crate::nn::ModelParams;
use crate::pruning::compute_masks;
use crate::rng::{self, Stream};
use crate::tensor::{finite_difference_check, Graph, Tensor, Var};
use crate::Result;

pub const FD_TOLERANCE: f64 = 1e-3;
pub const FD_STEP: f64 = 1e-5;
pub const KL_TOLERANCE: f64 = 1e-4;
/// Allowed drift from summing the same products in a different order.
pub const ACCUMULATION_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckReport {
    pub name: String,
    pub cases: usize,
    pub worst: f64,
    pub tolerance: f64,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.worst <= self.tolerance
    }
}

impl std::fmt::Display for CheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{} {:<28} cases={:<5} worst={:.3e} tol={:.0e}",
            if self.passed() { "PASS" } else { "FAIL" },
            self.name,
            self.cases,
            self.worst,
            self.tolerance
        )
    }
}

fn uniform(rng: &mut ChaCha8Rng, shape: Vec<usize>, lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

// ------------------------------------------------------------ plain oracles

/// Direct seven-loop cross-correlation; returns the output and its shape.
#[allow(clippy::too_many_arguments)]
pub fn naive_conv2d(
    x: &[f64],
    xs: [usize; 4],
    k: &[f64],
    ks: [usize; 4],
    bias: Option<&[f64]>,
    stride: usize,
    pad: usize,
) -> (Vec<f64>, [usize; 4]) {
    let [n, c, h, w] = xs;
    let [o, _, kh, kw] = ks;
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0; n * o * oh * ow];
    for b in 0..n {
        for oc in 0..o {
            for y in 0..oh {
                for xx in 0..ow {
                    let mut acc = bias.map_or(0.0, |bv| bv[oc]);
                    for ic in 0..c {
                        for i in 0..kh {
                            for j in 0..kw {
                                let iy = (y * stride + i) as isize - pad as isize;
                                let ix = (xx * stride + j) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                let xv = x[((b * c + ic) * h + iy as usize) * w + ix as usize];
                                acc += xv * k[((oc * c + ic) * kh + i) * kw + j];
                            }
                        }
                    }
                    out[((b * o + oc) * oh + y) * ow + xx] = acc;
                }
            }
        }
    }
    (out, [n, o, oh, ow])
}

/// `a (m×k) · b (k×n)` by the textbook triple loop.
pub fn naive_matmul(m: usize, k: usize, n: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[i * n + j] = (0..k).map(|p| a[i * k + p] * b[p * n + j]).sum();
        }
    }
    out
}

/// `KL(N(mu, e^logvar) ‖ N(0, 1))` by composite Simpson's rule over ±12σ.
pub fn kl_quadrature(mu: f64, logvar: f64) -> f64 {
    let sigma = (0.5 * logvar).exp();
    let (lo, hi) = (mu - 12.0 * sigma, mu + 12.0 * sigma);
    let intervals = 4000;
    let step = (hi - lo) / intervals as f64;
    let integrand = |z: f64| {
        let log_q = -0.5 * ((z - mu) / sigma).powi(2) - sigma.ln() - 0.5 * std::f64::consts::TAU.ln();
        let log_p = -0.5 * z * z - 0.5 * std::f64::consts::TAU.ln();
        log_q.exp() * (log_q - log_p)
    };
    let mut s = integrand(lo) + integrand(hi);
    for i in 1..intervals {
        s += integrand(lo + i as f64 * step) * if i % 2 == 1 { 4.0 } else { 2.0 };
    }
    s * step / 3.0
}

/// Keep-mask by fully sorting `(|w|, index)` and dropping the first `⌊n·s⌋`.
pub fn sorted_mask(values: &[f64], sparsity: f64) -> Vec<bool> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].abs().total_cmp(&values[b].abs()).then(a.cmp(&b)));
    let k = (values.len() as f64 * sparsity).floor() as usize;
    let mut keep = vec![true; values.len()];
    for &i in &order[..k] {
        keep[i] = false;
    }
    keep
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / y.abs().max(1.0))
        .fold(if a.len() == b.len() { 0.0 } else { f64::INFINITY }, f64::max)
}

// ------------------------------------------------------------ comparisons

struct ConvCase {
    xs: [usize; 4],
    ks: [usize; 4],
    stride: usize,
    pad: usize,
}

fn conv_case(rng: &mut ChaCha8Rng) -> ConvCase {
    loop {
        let k = rng.gen_range(1..=3);
        let pad = rng.gen_range(0..k);
        let (h, w) = (rng.gen_range(2..=6), rng.gen_range(2..=6));
        if h + 2 * pad < k || w + 2 * pad < k {
            continue;
        }
        let c = rng.gen_range(1..=3);
        return ConvCase {
            xs: [rng.gen_range(1..=2), c, h, w],
            ks: [rng.gen_range(1..=3), c, k, k],
            stride: rng.gen_range(1..=2),
            pad,
        };
    }
}

/// `conv2d` against [`naive_conv2d`].
pub fn conv2d_suite(cases: usize, seed: u64) -> Result<CheckReport> {
    let mut rng = rng::stream(seed, Stream::Fixture);
    let mut worst = 0.0f64;
    for _ in 0..cases {
        let case = conv_case(&mut rng);
        let x = uniform(&mut rng, case.xs.to_vec(), -1.0, 1.0);
        let k = uniform(&mut rng, case.ks.to_vec(), -1.0, 1.0);
        let b = uniform(&mut rng, vec![case.ks[0]], -1.0, 1.0);
        let mut g = Graph::<f64>::new();
        let (xv, kv, bv) = (g.constant(&x), g.constant(&k), g.constant(&b));
        let y = g.conv2d(xv, kv, bv, case.stride, case.pad)?;
        let (want, shape) = naive_conv2d(x.data(), case.xs, k.data(), case.ks, Some(b.data()), case.stride, case.pad);
        worst = worst.max(if g.shape(y) == shape { rel_err(g.value(y), &want) } else { f64::INFINITY });
    }
    Ok(CheckReport {
        name: "conv2d vs naive loops".into(),
        cases,
        worst,
        tolerance: ACCUMULATION_TOLERANCE,
    })
}

/// `conv2d_transpose` against the transpose of the explicit matrix of the
/// corresponding convolution.
pub fn conv2d_transpose_suite(cases: usize, seed: u64) -> Result<CheckReport> {
    let mut rng = rng::stream(seed ^ 0x7A, Stream::Fixture);
    let mut worst = 0.0f64;
    let mut done = 0;
    while done < cases {
        let (cin, cout) = (rng.gen_range(1..=3), rng.gen_range(1..=3));
        let k = rng.gen_range(1..=4);
        let stride = rng.gen_range(1..=2);
        let pad = rng.gen_range(0..k);
        let (h, w) = (rng.gen_range(1..=4), rng.gen_range(1..=4));
        let (oh, ow) = ((h - 1) * stride + k, (w - 1) * stride + k);
        if oh <= 2 * pad || ow <= 2 * pad {
            continue;
        }
        let (oh, ow) = (oh - 2 * pad, ow - 2 * pad);
        let n = rng.gen_range(1..=2);
        let x = uniform(&mut rng, vec![n, cin, h, w], -1.0, 1.0);
        let kt = uniform(&mut rng, vec![cin, cout, k, k], -1.0, 1.0);
        let b = uniform(&mut rng, vec![cout], -1.0, 1.0);

        // Column j of the conv matrix is the conv of the j-th basis image.
        let (rows, cols) = (cin * h * w, cout * oh * ow);
        let mut matrix = vec![0.0; rows * cols];
        let mut basis = vec![0.0; cols];
        for j in 0..cols {
            basis[j] = 1.0;
            let (col, shape) = naive_conv2d(&basis, [1, cout, oh, ow], kt.data(), [cin, cout, k, k], None, stride, pad);
            basis[j] = 0.0;
            if shape != [1, cin, h, w] {
                return Ok(CheckReport {
                    name: "conv2d_transpose vs matrix".into(),
                    cases: done,
                    worst: f64::INFINITY,
                    tolerance: ACCUMULATION_TOLERANCE,
                });
            }
            for (i, v) in col.into_iter().enumerate() {
                matrix[i * cols + j] = v;
            }
        }
        let mut want = Vec::with_capacity(n * cols);
        for img in x.data().chunks(rows) {
            for j in 0..cols {
                let s: f64 = (0..rows).map(|i| matrix[i * cols + j] * img[i]).sum();
                want.push(s + b.data()[j / (oh * ow)]);
            }
        }
        let mut g = Graph::<f64>::new();
        let (xv, kv, bv) = (g.constant(&x), g.constant(&kt), g.constant(&b));
        let y = g.conv2d_transpose(xv, kv, bv, stride, pad)?;
        worst = worst.max(if g.shape(y) == [n, cout, oh, ow] { rel_err(g.value(y), &want) } else { f64::INFINITY });
        done += 1;
    }
    Ok(CheckReport {
        name: "conv2d_transpose vs matrix".into(),
        cases,
        worst,
        tolerance: ACCUMULATION_TOLERANCE,
    })
}

/// `affine` against [`naive_matmul`] plus bias.
pub fn affine_suite(cases: usize, seed: u64) -> Result<CheckReport> {
    let mut rng = rng::stream(seed ^ 0xAF, Stream::Fixture);
    let mut worst = 0.0f64;
    for _ in 0..cases {
        let (n, d, k) = (rng.gen_range(1..=8), rng.gen_range(1..=40), rng.gen_range(1..=12));
        let x = uniform(&mut rng, vec![n, d], -1.0, 1.0);
        let w = uniform(&mut rng, vec![d, k], -1.0, 1.0);
        let b = uniform(&mut rng, vec![k], -1.0, 1.0);
        let mut want = naive_matmul(n, d, k, x.data(), w.data());
        for (i, v) in want.iter_mut().enumerate() {
            *v += b.data()[i % k];
        }
        let mut g = Graph::<f64>::new();
        let (xv, wv, bv) = (g.constant(&x), g.constant(&w), g.constant(&b));
        let y = g.affine(xv, wv, bv)?;
        worst = worst.max(rel_err(g.value(y), &want));
    }
    Ok(CheckReport {
        name: "affine vs naive matmul".into(),
        cases,
        worst,
        tolerance: ACCUMULATION_TOLERANCE,
    })
}

/// `kl_divergence` on random batches against per-entry quadrature.
pub fn kl_suite(cases: usize, seed: u64) -> Result<CheckReport> {
    let mut rng = rng::stream(seed ^ 0x4B, Stream::Fixture);
    let mut worst = 0.0f64;
    for _ in 0..cases {
        let (n, l) = (rng.gen_range(1..=3), rng.gen_range(1..=4));
        let mu = uniform(&mut rng, vec![n, l], -3.0, 3.0);
        let lv = uniform(&mut rng, vec![n, l], -4.0, 2.5);
        let want: f64 = mu
            .data()
            .iter()
            .zip(lv.data())
            .map(|(&m, &v)| kl_quadrature(m, v))
            .sum::<f64>()
            / n as f64;
        let mut g = Graph::<f64>::new();
        let (m, v) = (g.constant(&mu), g.constant(&lv));
        let kl = kl_divergence(&mut g, m, v)?;
        worst = worst.max((g.scalar(kl.kl) - want).abs());
    }
    Ok(CheckReport {
        name: "kl_divergence vs quadrature".into(),
        cases,
        worst,
        tolerance: KL_TOLERANCE,
    })
}

/// `compute_masks` against [`sorted_mask`] on tensors with forced ties.
pub fn mask_suite(cases: usize, seed: u64) -> Result<CheckReport> {
    let mut rng = rng::stream(seed ^ 0x3A, Stream::Fixture);
    let mut mismatches = 0usize;
    for _ in 0..cases {
        let len = rng.gen_range(1..=300);
        let coarse = rng.gen_bool(0.5);
        let values: Vec<f64> = (0..len)
            .map(|_| {
                let v: f64 = rng.gen_range(-1.0..1.0);
                if coarse {
                    (v * 8.0).round() / 8.0
                } else {
                    v
                }
            })
            .collect();
        let sparsity = rng.gen_range(0.0..0.99);
        let mut params = ModelParams::<f64>::new();
        params.insert("t.kernel", Tensor::new(vec![len], values.clone())?, true)?;
        let masks = compute_masks(&params, sparsity)?;
        let got = masks.get("t.kernel").map(|m| m.keep().to_vec()).unwrap_or_default();
        if got != sorted_mask(&values, sparsity) {
            mismatches += 1;
        }
    }
    Ok(CheckReport {
        name: "compute_masks vs full sort".into(),
        cases,
        worst: mismatches as f64,
        tolerance: 0.0,
    })
}

// ------------------------------------------------------- gradient checks

/// Random probe `Σ out ∘ w`, turning any tensor output into a scalar whose
/// gradient exercises the full Jacobian.
fn probe(g: &mut Graph<f64>, out: Var, seed: u64) -> Result<Var> {
    let mut rng = rng::stream(seed, Stream::Fixture);
    let shape = g.shape(out).to_vec();
    let w = uniform(&mut rng, shape, -1.0, 1.0);
    let w = g.constant(&w);
    let prod = g.mul(out, w)?;
    Ok(g.sum(prod))
}

/// Values in `[lo, hi)` kept at least `gap` away from zero.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: Vec<usize>, lo: f64, hi: f64, gap: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let v: f64 = rng.gen_range(lo..hi);
        if v.abs() < gap {
            v.signum() * gap + v
        } else {
            v
        }
    })
}

type Case = Box<dyn Fn(&mut Graph<f64>, Var) -> Result<Var>>;

/// One random differentiable case for `op`: the point to check at and the
/// function of it.
fn fd_case(op: &str, rng: &mut ChaCha8Rng, case: usize) -> Result<(Tensor<f64>, Case)> {
    let ps = rng.gen::<u64>();
    let which = case % 3;
    let small = |rng: &mut ChaCha8Rng| vec![rng.gen_range(1..=3), rng.gen_range(1..=4)];
    Ok(match op {
        "conv2d" => {
            let c = conv_case(rng);
            let x = uniform(rng, c.xs.to_vec(), -1.0, 1.0);
            let k = uniform(rng, c.ks.to_vec(), -1.0, 1.0);
            let b = uniform(rng, vec![c.ks[0]], -1.0, 1.0);
            let at = [&x, &k, &b][which].clone();
            let f: Case = Box::new(move |g, v| {
                let mut args = [None, None, None];
                args[which] = Some(v);
                let xv = args[0].unwrap_or_else(|| g.constant(&x));
                let kv = args[1].unwrap_or_else(|| g.constant(&k));
                let bv = args[2].unwrap_or_else(|| g.constant(&b));
                let y = g.conv2d(xv, kv, bv, c.stride, c.pad)?;
                probe(g, y, ps)
            });
            (at, f)
        }
        "conv2d_transpose" => {
            let (cin, cout, k) = (rng.gen_range(1..=3), rng.gen_range(1..=3), rng.gen_range(2..=4));
            let stride = rng.gen_range(1..=2);
            let pad = rng.gen_range(0..k / 2 + 1);
            let (h, w) = (rng.gen_range(2..=3), rng.gen_range(2..=3));
            let n = rng.gen_range(1..=2);
            let x = uniform(rng, vec![n, cin, h, w], -1.0, 1.0);
            let kt = uniform(rng, vec![cin, cout, k, k], -1.0, 1.0);
            let b = uniform(rng, vec![cout], -1.0, 1.0);
            let at = [&x, &kt, &b][which].clone();
            let f: Case = Box::new(move |g, v| {
                let mut args = [None, None, None];
                args[which] = Some(v);
                let xv = args[0].unwrap_or_else(|| g.constant(&x));
                let kv = args[1].unwrap_or_else(|| g.constant(&kt));
                let bv = args[2].unwrap_or_else(|| g.constant(&b));
                let y = g.conv2d_transpose(xv, kv, bv, stride, pad)?;
                probe(g, y, ps)
            });
            (at, f)
        }
        "affine" => {
            let (n, d, k) = (rng.gen_range(1..=4), rng.gen_range(1..=6), rng.gen_range(1..=5));
            let x = uniform(rng, vec![n, d], -1.0, 1.0);
            let w = uniform(rng, vec![d, k], -1.0, 1.0);
            let b = uniform(rng, vec![k], -1.0, 1.0);
            let at = [&x, &w, &b][which].clone();
            let f: Case = Box::new(move |g, v| {
                let mut args = [None, None, None];
                args[which] = Some(v);
                let xv = args[0].unwrap_or_else(|| g.constant(&x));
                let wv = args[1].unwrap_or_else(|| g.constant(&w));
                let bv = args[2].unwrap_or_else(|| g.constant(&b));
                let y = g.affine(xv, wv, bv)?;
                probe(g, y, ps)
            });
            (at, f)
        }
        "relu" | "sigmoid" | "exp" | "ln" | "softplus" | "scale" | "add_scalar" | "reshape" => {
            let shape = small(rng);
            let at = match op {
                "relu" => away_from_zero(rng, shape, -2.0, 2.0, 1e-2),
                "ln" => uniform(rng, shape, 0.1, 3.0),
                _ => uniform(rng, shape, -2.5, 2.5),
            };
            let c = rng.gen_range(-2.0..2.0);
            let name = op.to_string();
            let f: Case = Box::new(move |g, v| {
                let y = match name.as_str() {
                    "relu" => g.relu(v),
                    "sigmoid" => g.sigmoid(v),
                    "exp" => g.exp(v),
                    "ln" => g.ln(v),
                    "softplus" => g.softplus(v),
                    "scale" => g.scale(v, c),
                    "add_scalar" => g.add_scalar(v, c),
                    _ => {
                        let n: usize = g.shape(v).iter().product();
                        g.reshape(v, vec![n])?
                    }
                };
                probe(g, y, ps)
            });
            (at, f)
        }
        "add" | "sub" | "mul" => {
            let shape = small(rng);
            let scalar_other = case % 4 == 3;
            let other_shape = if scalar_other { vec![1] } else { shape.clone() };
            let other = uniform(rng, other_shape, -2.0, 2.0);
            let at = uniform(rng, shape, -2.0, 2.0);
            let swap = case % 2 == 1;
            let name = op.to_string();
            let f: Case = Box::new(move |g, v| {
                let o = g.constant(&other);
                let (a, b) = if swap { (o, v) } else { (v, o) };
                let y = match name.as_str() {
                    "add" => g.add(a, b)?,
                    "sub" => g.sub(a, b)?,
                    _ => g.mul(a, b)?,
                };
                probe(g, y, ps)
            });
            (at, f)
        }
        "sum" | "mean" => {
            let shape = small(rng);
            let at = uniform(rng, shape, -2.0, 2.0);
            let c = rng.gen_range(0.5..2.0);
            let is_sum = op == "sum";
            // Squaring makes the check sensitive to the reduction's scale.
            let f: Case = Box::new(move |g, v| {
                let r = if is_sum { g.sum(v) } else { g.mean(v) };
                let r2 = g.mul(r, r)?;
                Ok(g.scale(r2, c))
            });
            (at, f)
        }
        "log_softmax" => {
            let shape = vec![rng.gen_range(1..=3), rng.gen_range(2..=5), rng.gen_range(1..=3)];
            let axis = rng.gen_range(0..3);
            let at = uniform(rng, shape, -3.0, 3.0);
            let f: Case = Box::new(move |g, v| {
                let y = g.log_softmax(v, axis)?;
                probe(g, y, ps)
            });
            (at, f)
        }
        "gather" => {
            let (n, k) = (rng.gen_range(1..=5), rng.gen_range(1..=6));
            let index: Vec<usize> = (0..n).map(|_| rng.gen_range(0..k)).collect();
            let at = uniform(rng, vec![n, k], -2.0, 2.0);
            let f: Case = Box::new(move |g, v| {
                let y = g.gather(v, &index)?;
                probe(g, y, ps)
            });
            (at, f)
        }
        other => return Err(crate::Error::invalid("fd_case", format!("unknown op {other}"))),
    })
}

/// Every differentiable op on the tape.
pub const FD_OPS: [&str; 18] = [
    "conv2d",
    "conv2d_transpose",
    "affine",
    "relu",
    "sigmoid",
    "exp",
    "ln",
    "softplus",
    "add",
    "sub",
    "mul",
    "scale",
    "add_scalar",
    "sum",
    "mean",
    "log_softmax",
    "gather",
    "reshape",
];

/// Central-difference check of one op over `cases` random inputs.
pub fn fd_suite(op: &str, cases: usize, seed: u64) -> Result<CheckReport> {
    let mut rng = rng::stream(rng::mix(seed, op.len() as u64 * 131 + op.as_bytes()[0] as u64), Stream::Fixture);
    let mut worst = 0.0f64;
    for case in 0..cases {
        let (at, f) = fd_case(op, &mut rng, case)?;
        worst = worst.max(finite_difference_check(f, &at, FD_STEP)?);
    }
    Ok(CheckReport {
        name: format!("grad {op}"),
        cases,
        worst,
        tolerance: FD_TOLERANCE,
    })
}

/// All suites at the sizes the acceptance criteria ask for.
pub fn run_all(seed: u64) -> Result<Vec<CheckReport>> {
    let mut out = Vec::new();
    for op in FD_OPS {
        out.push(fd_suite(op, 100, seed)?);
    }
    out.push(conv2d_suite(200, seed)?);
    out.push(conv2d_transpose_suite(100, seed)?);
    out.push(affine_suite(200, seed)?);
    out.push(kl_suite(200, seed)?);
    out.push(mask_suite(1000, seed)?);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadrature_closed_form() {
        assert!((kl_quadrature(1.0, 0.0) - 0.5).abs() < 1e-9);
        assert!(kl_quadrature(0.0, 0.0).abs() < 1e-9);
        let (m, lv) = (0.3f64, -1.2f64);
        let closed = 0.5 * (m * m + lv.exp() - 1.0 - lv);
        assert!((kl_quadrature(m, lv) - closed).abs() < 1e-8);
    }

    #[test]
    fn naive_conv_identity_kernel() {
        let x: Vec<f64> = (0..9).map(f64::from).collect();
        let (y, s) = naive_conv2d(&x, [1, 1, 3, 3], &[1.0], [1, 1, 1, 1], None, 1, 0);
        assert_eq!(s, [1, 1, 3, 3]);
        assert_eq!(y, x);
    }

    #[test]
    fn sorted_mask_ties() {
        assert_eq!(sorted_mask(&[0.2, -0.2, 0.2, 0.9], 0.5), vec![false, false, true, true]);
    }

    #[test]
    fn suites_pass_small() {
        for r in [
            conv2d_suite(10, 1).unwrap(),
            conv2d_transpose_suite(10, 1).unwrap(),
            affine_suite(10, 1).unwrap(),
            kl_suite(10, 1).unwrap(),
            mask_suite(20, 1).unwrap(),
            fd_suite("conv2d", 5, 1).unwrap(),
        ] {
            assert!(r.passed(), "{r}");
        }
    }
}
