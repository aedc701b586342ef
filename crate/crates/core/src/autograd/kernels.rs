// Dense kernels. Every output element accumulates its terms in one fixed
// sequential order; the inner loops run across independent outputs so the
// compiler can vectorize them without reassociating any sum.

use super::Real;

/// `y[n, o] = sum_i x[n, i] * w[o, i]` with `w` stored `[out, in]`.
pub(crate) fn linear_forward<T: Real>(x: &[T], w: &[T], n: usize, input: usize, out: usize) -> Vec<T> {
    let mut wt = vec![T::zero(); input * out];
    for o in 0..out {
        for i in 0..input {
            wt[i * out + o] = w[o * input + i];
        }
    }
    let mut y = vec![T::zero(); n * out];
    for r in 0..n {
        let xr = &x[r * input..(r + 1) * input];
        let yr = &mut y[r * out..(r + 1) * out];
        for (i, &a) in xr.iter().enumerate() {
            let wr = &wt[i * out..(i + 1) * out];
            for (yv, &wv) in yr.iter_mut().zip(wr) {
                *yv += a * wv;
            }
        }
    }
    y
}

/// `dx[n, i] = sum_o dy[n, o] * w[o, i]`.
pub(crate) fn linear_backward_input<T: Real>(dy: &[T], w: &[T], n: usize, input: usize, out: usize) -> Vec<T> {
    let mut dx = vec![T::zero(); n * input];
    for r in 0..n {
        let dyr = &dy[r * out..(r + 1) * out];
        let dxr = &mut dx[r * input..(r + 1) * input];
        for (o, &c) in dyr.iter().enumerate() {
            let wr = &w[o * input..(o + 1) * input];
            for (d, &wv) in dxr.iter_mut().zip(wr) {
                *d += c * wv;
            }
        }
    }
    dx
}

/// `dw[o, i] = sum_n dy[n, o] * x[n, i]`.
pub(crate) fn linear_backward_weight<T: Real>(dy: &[T], x: &[T], n: usize, input: usize, out: usize) -> Vec<T> {
    let mut dw = vec![T::zero(); out * input];
    for r in 0..n {
        let dyr = &dy[r * out..(r + 1) * out];
        let xr = &x[r * input..(r + 1) * input];
        for (o, &c) in dyr.iter().enumerate() {
            let dwr = &mut dw[o * input..(o + 1) * input];
            for (d, &xv) in dwr.iter_mut().zip(xr) {
                *d += c * xv;
            }
        }
    }
    dw
}

#[inline]
pub(crate) fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let mut acc = T::zero();
    for (&x, &y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

#[inline]
pub(crate) fn axpy<T: Real>(alpha: T, x: &[T], y: &mut [T]) {
    for (yv, &xv) in y.iter_mut().zip(x) {
        *yv += alpha * xv;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(x: &[f64], w: &[f64], n: usize, i: usize, o: usize) -> Vec<f64> {
        let mut y = vec![0.0; n * o];
        for r in 0..n {
            for c in 0..o {
                y[r * o + c] = (0..i).map(|k| x[r * i + k] * w[c * i + k]).sum();
            }
        }
        y
    }

    #[test]
    fn linear_matches_naive_product() {
        let (n, i, o) = (3, 5, 4);
        let x: Vec<f64> = (0..n * i).map(|v| (v as f64 * 0.37).sin()).collect();
        let w: Vec<f64> = (0..o * i).map(|v| (v as f64 * 0.11).cos()).collect();
        let y = linear_forward(&x, &w, n, i, o);
        for (a, b) in y.iter().zip(naive(&x, &w, n, i, o)) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
