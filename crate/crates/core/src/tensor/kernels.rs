// Scalar activations and the dense loops behind the tape ops. Every reduction
// runs left to right over the contracted index so results are reproducible
// bit for bit.

/// ELU (alpha = 1) plus one: `x + 1` for `x >= 0`, `exp(x)` otherwise.
#[inline]
pub fn elu_plus_one(x: f64) -> f64 {
    if x >= 0.0 {
        x + 1.0
    } else {
        x.exp()
    }
}

/// Derivative of [`elu_plus_one`]; the right branch (slope 1) is used at 0.
#[inline]
pub fn elu_plus_one_slope(x: f64) -> f64 {
    if x >= 0.0 {
        1.0
    } else {
        x.exp()
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// Tanh approximation of GELU.
#[inline]
pub fn gelu(x: f64) -> f64 {
    let inner = GELU_C * (x + 0.044715 * x * x * x);
    0.5 * x * (1.0 + inner.tanh())
}

#[inline]
pub fn gelu_slope(x: f64) -> f64 {
    let inner = GELU_C * (x + 0.044715 * x * x * x);
    let t = inner.tanh();
    let d_inner = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * d_inner
}

/// `out += a[m×k] · b[k×n]`.
pub(crate) fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        let a_row = &a[i * k..(i + 1) * k];
        for (p, &aip) in a_row.iter().enumerate() {
            if aip == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += aip * bv;
            }
        }
    }
}

pub(crate) fn transpose(a: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut t = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            t[j * m + i] = a[i * n + j];
        }
    }
    t
}

/// `out += a[m×k] · b[n×k]ᵀ`.
pub(crate) fn matmul_bt_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    let bt = transpose(b, n, k);
    matmul_into(a, &bt, out, m, k, n);
}

/// `out += a[k×m]ᵀ · b[k×n]`.
pub(crate) fn matmul_at_into(a: &[f64], b: &[f64], out: &mut [f64], k: usize, m: usize, n: usize) {
    let at = transpose(a, k, m);
    matmul_into(&at, b, out, m, k, n);
}

/// Numerically stable softmax of one row, in place. With `limit`, entries at
/// index > `limit` are forced to exactly zero.
pub(crate) fn softmax_row(row: &mut [f64], limit: Option<usize>) {
    let live = limit.map_or(row.len(), |l| (l + 1).min(row.len()));
    let max = row[..live].iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in &mut row[..live] {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in &mut row[..live] {
        *v /= sum;
    }
    for v in &mut row[live..] {
        *v = 0.0;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn elu_plus_one_examples() {
        assert_eq!(elu_plus_one(0.0), 1.0);
        assert_eq!(elu_plus_one(1.0), 2.0);
        assert!((elu_plus_one(-1.0) - 0.367_879_441_171_442_3).abs() < 1e-15);
        assert_eq!(elu_plus_one_slope(0.0), 1.0);
    }

    #[test]
    fn sigmoid_examples() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert_eq!(sigmoid(800.0), 1.0);
        assert!((sigmoid(3f64.ln()) - 0.75).abs() < 1e-15);
        assert!(sigmoid(-800.0) >= 0.0);
    }

    #[test]
    fn softmax_examples() {
        let mut r = [0.0, 0.0, 0.0];
        softmax_row(&mut r, None);
        for v in r {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let mut r = [0.0, 2f64.ln()];
        softmax_row(&mut r, None);
        assert!((r[0] - 1.0 / 3.0).abs() < 1e-15);
        assert!((r[1] - 2.0 / 3.0).abs() < 1e-15);
        let mut r = [5.0, 1.0, 9.0];
        softmax_row(&mut r, Some(0));
        assert_eq!(r, [1.0, 0.0, 0.0]);
    }

    #[test]
    fn gelu_slope_matches_difference() {
        for &x in &[-3.0, -0.5, 0.0, 0.7, 2.5] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_slope(x)).abs() < 1e-8);
        }
    }
}
