//! Independent reference implementations used to verify the main code paths.
//!
//! Nothing here shares code with the modules it checks: the forward pass is
//! written per-sample with explicit indexing, gradients come from central
//! differences, the dual QP is solved by enumerating active sets, and top-ρ
//! selection uses a full sort.

use crate::nn::Activation;

/// Softmax probabilities of one sample, computed directly from the layout.
pub fn forward_one(sizes: &[usize], activation: Activation, params: &[f64], x: &[f64]) -> Vec<f64> {
    let mut a = x.to_vec();
    let mut offset = 0;
    let layers = sizes.len() - 1;
    for l in 0..layers {
        let (fi, fo) = (sizes[l], sizes[l + 1]);
        let mut z = vec![0.0; fo];
        for (o, zo) in z.iter_mut().enumerate() {
            let mut s = params[offset + fi * fo + o];
            for i in 0..fi {
                s += params[offset + o * fi + i] * a[i];
            }
            *zo = s;
        }
        offset += fi * fo + fo;
        if l + 1 < layers {
            a = z
                .into_iter()
                .map(|v| match activation {
                    Activation::Relu => {
                        if v > 0.0 {
                            v
                        } else {
                            0.0
                        }
                    }
                    Activation::Tanh => v.tanh(),
                })
                .collect();
        } else {
            let m = z.iter().cloned().fold(f64::MIN, f64::max);
            let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
            let s: f64 = e.iter().sum();
            a = e.into_iter().map(|v| v / s).collect();
        }
    }
    a
}

/// Mean cross-entropy against soft targets, per-sample reference.
pub fn soft_loss(
    sizes: &[usize],
    activation: Activation,
    params: &[f64],
    xs: &[Vec<f64>],
    targets: &[Vec<f64>],
) -> f64 {
    let mut total = 0.0;
    for (x, q) in xs.iter().zip(targets) {
        let p = forward_one(sizes, activation, params, x);
        for (qc, pc) in q.iter().zip(&p) {
            total -= qc * pc.max(1e-12).ln();
        }
    }
    total / xs.len() as f64
}

/// Mean negative log-likelihood, per-sample reference.
pub fn hard_loss(sizes: &[usize], activation: Activation, params: &[f64], xs: &[Vec<f64>], labels: &[usize]) -> f64 {
    let mut total = 0.0;
    for (x, &y) in xs.iter().zip(labels) {
        total -= forward_one(sizes, activation, params, x)[y].max(1e-12).ln();
    }
    total / xs.len() as f64
}

/// Top-1 accuracy with lowest-index tie-breaking, per-sample reference.
pub fn accuracy(sizes: &[usize], activation: Activation, params: &[f64], xs: &[Vec<f64>], labels: &[usize]) -> f64 {
    let mut correct = 0;
    for (x, &y) in xs.iter().zip(labels) {
        let p = forward_one(sizes, activation, params, x);
        let mut best = 0;
        for c in 1..p.len() {
            if p[c] > p[best] {
                best = c;
            }
        }
        if best == y {
            correct += 1;
        }
    }
    correct as f64 / xs.len() as f64
}

/// Central-difference gradient of `f` at `x` with step `h`.
pub fn central_difference<F: Fn(&[f64]) -> f64>(f: F, x: &[f64], h: f64) -> Vec<f64> {
    let mut work = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = work[i];
            work[i] = orig + h;
            let up = f(&work);
            work[i] = orig - h;
            let down = f(&work);
            work[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Max over coordinates of `|a - b| / max(|a|, floor)`.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    analytic.iter().zip(numeric).map(|(a, n)| (a - n).abs() / a.abs().max(floor)).fold(0.0, f64::max)
}

/// Exact minimizer of `1/2 v^T Q v + c^T v` over `v >= 0` for small `k`,
/// found by solving the stationarity system on every active set and keeping
/// the best feasible candidate.
pub fn nonneg_qp_enumerate(q: &[Vec<f64>], c: &[f64]) -> (Vec<f64>, f64) {
    let k = c.len();
    let objective = |v: &[f64]| {
        let mut s = 0.0;
        for i in 0..k {
            s += c[i] * v[i];
            for j in 0..k {
                s += 0.5 * v[i] * q[i][j] * v[j];
            }
        }
        s
    };
    let mut best = vec![0.0; k];
    let mut best_obj = 0.0;
    for mask in 1u32..(1 << k) {
        let idx: Vec<usize> = (0..k).filter(|&i| mask & (1 << i) != 0).collect();
        let a: Vec<Vec<f64>> = idx.iter().map(|&i| idx.iter().map(|&j| q[i][j]).collect()).collect();
        let b: Vec<f64> = idx.iter().map(|&i| -c[i]).collect();
        let Some(sol) = solve_linear(a, b) else { continue };
        if sol.iter().any(|&x| x < -1e-12) {
            continue;
        }
        let mut v = vec![0.0; k];
        for (&i, &x) in idx.iter().zip(&sol) {
            v[i] = x.max(0.0);
        }
        let obj = objective(&v);
        if obj < best_obj {
            best_obj = obj;
            best = v;
        }
    }
    (best, best_obj)
}

/// Gaussian elimination with partial pivoting; `None` if (near) singular.
pub fn solve_linear(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Option<Vec<f64>> {
    let n = b.len();
    let scale = a.iter().flatten().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-300);
    for col in 0..n {
        let pivot = (col..n).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))?;
        if a[pivot][col].abs() <= 1e-12 * scale {
            return None;
        }
        a.swap(col, pivot);
        b.swap(col, pivot);
        for row in col + 1..n {
            let f = a[row][col] / a[col][col];
            for j in col..n {
                a[row][j] -= f * a[col][j];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let s: f64 = (i + 1..n).map(|j| a[i][j] * x[j]).sum();
        x[i] = (b[i] - s) / a[i][i];
    }
    Some(x)
}

/// Indices of the `count` largest magnitudes by a full stable sort.
pub fn top_magnitude_indices(values: &[f64], count: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[b].abs().partial_cmp(&values[a].abs()).expect("finite values"));
    let mut top: Vec<usize> = idx.into_iter().take(count).collect();
    top.sort_unstable();
    top
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_solver_and_qp() {
        let x = solve_linear(vec![vec![2.0, 1.0], vec![1.0, 3.0]], vec![3.0, 5.0]).unwrap();
        assert!((x[0] - 0.8).abs() < 1e-12 && (x[1] - 1.4).abs() < 1e-12);
        assert!(solve_linear(vec![vec![1.0, 2.0], vec![2.0, 4.0]], vec![1.0, 2.0]).is_none());
        // min 1/2 v^2 - v  => v = 1, obj = -1/2
        let (v, obj) = nonneg_qp_enumerate(&[vec![1.0]], &[-1.0]);
        assert_eq!(v, vec![1.0]);
        assert_eq!(obj, -0.5);
        let (v, obj) = nonneg_qp_enumerate(&[vec![1.0]], &[1.0]);
        assert_eq!((v, obj), (vec![0.0], 0.0));
    }

    #[test]
    fn central_difference_of_quadratic() {
        let g = central_difference(|x| x[0] * x[0] + 3.0 * x[1], &[2.0, 1.0], 1e-5);
        assert!((g[0] - 4.0).abs() < 1e-8 && (g[1] - 3.0).abs() < 1e-8);
    }
}
