//! Slice-level dense kernels shared by the tape's forward and backward passes.

/// `a[n x k] · b[k x m]`
pub fn matmul(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let out_row = &mut out[i * m..(i + 1) * m];
        for p in 0..k {
            let x = a[i * k + p];
            if x == 0.0 {
                continue;
            }
            let b_row = &b[p * m..(p + 1) * m];
            for (o, &y) in out_row.iter_mut().zip(b_row) {
                *o += x * y;
            }
        }
    }
    out
}

/// `a[n x k] · b[m x k]ᵀ`
pub fn matmul_tb(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..m {
            out[i * m + j] = dot(a_row, &b[j * k..(j + 1) * k]);
        }
    }
    out
}

/// `a[k x n]ᵀ · b[k x m]`
pub fn matmul_ta(a: &[f64], b: &[f64], k: usize, n: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for p in 0..k {
        let b_row = &b[p * m..(p + 1) * m];
        for i in 0..n {
            let x = a[p * n + i];
            if x == 0.0 {
                continue;
            }
            let out_row = &mut out[i * m..(i + 1) * m];
            for (o, &y) in out_row.iter_mut().zip(b_row) {
                *o += x * y;
            }
        }
    }
    out
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable log-sum-exp via max subtraction.
pub fn logsumexp(xs: &[f64]) -> f64 {
    match argmax(xs) {
        Some(a) if xs[a] != f64::NEG_INFINITY => xs[a] + tail_log1p(xs, a),
        _ => f64::NEG_INFINITY,
    }
}

/// `logsumexp(xs) - xs[target]`, accurate even when the result is tiny.
pub fn cross_entropy(xs: &[f64], target: usize) -> f64 {
    let a = argmax(xs).expect("cross-entropy over an empty row");
    (xs[a] - xs[target]) + tail_log1p(xs, a)
}

fn argmax(xs: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &x) in xs.iter().enumerate() {
        if best.is_none_or(|b| x > xs[b]) {
            best = Some(i);
        }
    }
    best
}

/// `ln(Σ exp(x - max))` computed as `ln_1p` of the non-maximal terms.
fn tail_log1p(xs: &[f64], max_at: usize) -> f64 {
    let max = xs[max_at];
    let rest: f64 = xs
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != max_at)
        .map(|(_, &x)| (x - max).exp())
        .sum();
    rest.ln_1p()
}

/// Softmax written into `out`, stable under constant shifts of `xs`.
pub fn softmax_into(xs: &[f64], out: &mut [f64]) {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (o, &x) in out.iter_mut().zip(xs) {
        *o = (x - max).exp();
        total += *o;
    }
    for o in out.iter_mut() {
        *o /= total;
    }
}

/// Two-way softmax whose result is exactly mirrored when the inputs are
/// swapped: `softmax2(x, y) == (softmax2(y, x).1, softmax2(y, x).0)` bitwise.
pub fn softmax2(x: f64, y: f64) -> (f64, f64) {
    let max = x.max(y);
    let ex = (x - max).exp();
    let ey = (y - max).exp();
    let total = ex + ey;
    (ex / total, ey / total)
}
