use thiserror::Error;

use crate::scalar::Scalar;

#[derive(Debug, Error)]
pub enum FiniteDiffError<E> {
    #[error("function evaluation failed at coordinate {coord}: {source}")]
    Eval { coord: usize, source: E },
    #[error("non-finite function value {value} at coordinate {coord}")]
    NonFinite { coord: usize, value: f64 },
}

/// Central differences `(f(θ + h e_i) - f(θ - h e_i)) / 2h` for every coordinate.
pub fn finite_difference_grad<T, E, F>(
    mut f: F,
    theta: &[T],
    h: T,
) -> Result<Vec<T>, FiniteDiffError<E>>
where
    T: Scalar,
    F: FnMut(&[T]) -> Result<T, E>,
{
    let mut point = theta.to_vec();
    let mut out = Vec::with_capacity(theta.len());
    let two_h = h + h;
    for i in 0..theta.len() {
        let mut eval = |p: &[T]| -> Result<T, FiniteDiffError<E>> {
            let v = f(p).map_err(|source| FiniteDiffError::Eval { coord: i, source })?;
            if !v.is_finite() {
                return Err(FiniteDiffError::NonFinite {
                    coord: i,
                    value: v.f64(),
                });
            }
            Ok(v)
        };
        point[i] = theta[i] + h;
        let plus = eval(&point)?;
        point[i] = theta[i] - h;
        let minus = eval(&point)?;
        point[i] = theta[i];
        out.push((plus - minus) / two_h);
    }
    Ok(out)
}
