//! Central finite differences, the verification oracle for [`super::Tape`].

/// Central-difference gradient of a black-box function.
///
/// Each coordinate costs two evaluations at `params ± h·e_i`.
pub fn finite_diff<F>(mut f: F, params: &[f64], h: f64) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut p = params.to_vec();
    (0..params.len())
        .map(|i| {
            let x = p[i];
            p[i] = x + h;
            let up = f(&p);
            p[i] = x - h;
            let down = f(&p);
            p[i] = x;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// `‖a - b‖_∞ / max(‖a‖_∞, ‖b‖_∞)`, or the absolute gap when both are
/// below `floor`.
pub fn max_relative_error(a: &[f64], b: &[f64], floor: f64) -> f64 {
    assert_eq!(a.len(), b.len());
    let gap = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max);
    let scale = a
        .iter()
        .chain(b)
        .map(|x| x.abs())
        .fold(0.0, f64::max)
        .max(floor);
    gap / scale
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_gradient_is_identity() {
        let p = [0.5, -1.25, 3.0, 1e-3];
        let g = finite_diff(|q| 0.5 * q.iter().map(|x| x * x).sum::<f64>(), &p, 1e-5);
        for (gi, pi) in g.iter().zip(&p) {
            assert!((gi - pi).abs() < 1e-8);
        }
    }

    #[test]
    fn constant_function_has_zero_gradient() {
        let g = finite_diff(|_| 4.2, &[1.0, 2.0, 3.0], 1e-5);
        assert_eq!(g, vec![0.0; 3]);
    }

    #[test]
    fn relative_error_uses_floor() {
        assert_eq!(max_relative_error(&[1e-20], &[0.0], 1e-8), 1e-12);
        assert_eq!(max_relative_error(&[2.0, 1.0], &[2.0, 1.5], 1e-8), 0.25);
    }
}
