// Plain slice kernels. Summation is always row-major, left to right, so that
// identical inputs give bit-identical outputs regardless of caller.

/// `out[p×q] = a[p×k] · b[k×q]`
pub(crate) fn matmul(a: &[f64], b: &[f64], p: usize, k: usize, q: usize) -> Vec<f64> {
    let mut out = vec![0.0; p * q];
    for i in 0..p {
        let row = &mut out[i * q..(i + 1) * q];
        for (l, &av) in a[i * k..(i + 1) * k].iter().enumerate() {
            let brow = &b[l * q..(l + 1) * q];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `out[p×q] = a[p×k] · b[q×k]ᵀ`
pub(crate) fn matmul_bt(a: &[f64], b: &[f64], p: usize, k: usize, q: usize) -> Vec<f64> {
    let mut out = vec![0.0; p * q];
    for i in 0..p {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..q {
            out[i * q + j] = dot(arow, &b[j * k..(j + 1) * k]);
        }
    }
    out
}

/// `out[k×q] += a[p×k]ᵀ · b[p×q]`
pub(crate) fn matmul_at_acc(out: &mut [f64], a: &[f64], b: &[f64], p: usize, k: usize, q: usize) {
    for i in 0..p {
        let brow = &b[i * q..(i + 1) * q];
        for (l, &av) in a[i * k..(i + 1) * k].iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[l * q..(l + 1) * q];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out[p×k] += a[p×q] · b[k×q]ᵀ`
pub(crate) fn matmul_bt_acc(out: &mut [f64], a: &[f64], b: &[f64], p: usize, q: usize, k: usize) {
    for i in 0..p {
        let arow = &a[i * q..(i + 1) * q];
        for j in 0..k {
            out[i * k + j] += dot(arow, &b[j * q..(j + 1) * q]);
        }
    }
}

/// `out[p×q] += a[p×k] · b[k×q]`
pub(crate) fn matmul_acc(out: &mut [f64], a: &[f64], b: &[f64], p: usize, k: usize, q: usize) {
    for i in 0..p {
        let row = &mut out[i * q..(i + 1) * q];
        for (l, &av) in a[i * k..(i + 1) * k].iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[l * q..(l + 1) * q];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0, |acc, (x, y)| acc + x * y)
}

/// Max-shifted softmax of one row. With `valid < row.len()` the trailing
/// entries are masked to exactly zero.
pub(crate) fn softmax_row(row: &[f64], valid: usize, out: &mut [f64]) {
    let max = row[..valid]
        .iter()
        .copied()
        .fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &x) in out[..valid].iter_mut().zip(&row[..valid]) {
        *o = (x - max).exp();
        sum += *o;
    }
    for o in &mut out[..valid] {
        *o /= sum;
    }
    for o in &mut out[valid..] {
        *o = 0.0;
    }
}

pub(crate) const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
pub(crate) const GELU_K: f64 = 0.044_715;

pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_K * x * x * x)).tanh())
}

pub(crate) fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_K * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * x * x)
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
