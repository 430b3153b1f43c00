#![allow(dead_code)]

use flowik::autodiff::Tensor;

/// `log|det M|` of a dense row-major `n×n` matrix via partially pivoted LU.
pub fn log_abs_det(m: &[f64], n: usize) -> f64 {
    let mut a = m.to_vec();
    let mut acc = 0.0;
    for col in 0..n {
        let piv = (col..n)
            .max_by(|&i, &j| a[i * n + col].abs().total_cmp(&a[j * n + col].abs()))
            .unwrap();
        if piv != col {
            for k in 0..n {
                a.swap(col * n + k, piv * n + k);
            }
        }
        let p = a[col * n + col];
        acc += p.abs().ln();
        for r in col + 1..n {
            let f = a[r * n + col] / p;
            for k in col..n {
                a[r * n + k] -= f * a[col * n + k];
            }
        }
    }
    acc
}

/// Central-difference Jacobian of a row map `f: ℝⁿ → ℝⁿ`, row-major `J[i][j] = ∂fᵢ/∂xⱼ`.
pub fn numerical_jacobian(f: impl Fn(&[f64]) -> Vec<f64>, x: &[f64], h: f64) -> Vec<f64> {
    let n = x.len();
    let mut j = vec![0.0; n * n];
    let mut probe = x.to_vec();
    for col in 0..n {
        probe[col] = x[col] + h;
        let up = f(&probe);
        probe[col] = x[col] - h;
        let down = f(&probe);
        probe[col] = x[col];
        for row in 0..n {
            j[row * n + col] = (up[row] - down[row]) / (2.0 * h);
        }
    }
    j
}

pub fn row(t: &[f64]) -> Tensor {
    Tensor::new(&[1, t.len()], t.to_vec()).unwrap()
}

pub fn close(ad: f64, fd: f64, rtol: f64, atol: f64) -> bool {
    (ad - fd).abs() <= atol + rtol * fd.abs()
}
