//! Dense kernels shared by the forward and backward rules.

/// `c = a · b (+ beta · c)` for row/column-strided `m×k` and `k×n` operands.
///
/// `c` is dense row-major `m×n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
) {
    debug_assert!(c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k > 0 {
        debug_assert!(a.len() > (m - 1) * rsa + (k - 1) * csa);
        debug_assert!(b.len() > (k - 1) * rsb + (n - 1) * csb);
    }
    // SAFETY: the debug assertions above spell out the bounds every caller
    // upholds: the highest element touched in each operand lies inside its slice.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Copies `src` (with `shape`) into a new buffer with axes `a` and `b` swapped.
pub(crate) fn swap_axes(src: &[f64], shape: &[usize], a: usize, b: usize) -> Vec<f64> {
    if a == b {
        return src.to_vec();
    }
    let (a, b) = (a.min(b), a.max(b));
    // View the tensor as [outer, len_a, mid, len_b, inner].
    let outer: usize = shape[..a].iter().product();
    let len_a = shape[a];
    let mid: usize = shape[a + 1..b].iter().product();
    let len_b = shape[b];
    let inner: usize = shape[b + 1..].iter().product();
    let mut out = vec![0.0; src.len()];
    // Output layout is [outer, len_b, mid, len_a, inner].
    for o in 0..outer {
        for i in 0..len_a {
            for m in 0..mid {
                for j in 0..len_b {
                    let s = (((o * len_a + i) * mid + m) * len_b + j) * inner;
                    let d = (((o * len_b + j) * mid + m) * len_a + i) * inner;
                    out[d..d + inner].copy_from_slice(&src[s..s + inner]);
                }
            }
        }
    }
    out
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// `tanh` from a single `exp`; absolute error stays within a few ulps of 1.
fn tanh(u: f64) -> f64 {
    let e = (-2.0 * u.abs()).exp();
    ((1.0 - e) / (1.0 + e)).copysign(u)
}

pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + tanh(GELU_C * (x + GELU_A * x * x * x)))
}

pub(crate) fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = tanh(u);
    let du = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
