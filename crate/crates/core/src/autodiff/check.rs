use super::tensor::Tensor;

/// Central-difference gradient estimate of a scalar function.
///
/// Each coordinate is perturbed by `±h` in turn; the result has the shape of `x`.
pub fn finite_diff_grad(f: impl Fn(&Tensor) -> f64, x: &Tensor, h: f64) -> Tensor {
    assert!(h > 0.0, "finite-difference step must be positive");
    let base = x.to_vec();
    let mut grad = Vec::with_capacity(base.len());
    let mut probe = base.clone();
    for i in 0..base.len() {
        probe[i] = base[i] + h;
        let up = f(&Tensor::from_parts(x.shape().to_vec(), probe.clone()));
        probe[i] = base[i] - h;
        let down = f(&Tensor::from_parts(x.shape().to_vec(), probe.clone()));
        probe[i] = base[i];
        grad.push((up - down) / (2.0 * h));
    }
    Tensor::from_parts(x.shape().to_vec(), grad)
}
