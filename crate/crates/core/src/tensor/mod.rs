//! Dense arrays, a reverse-mode tape, parameters and the Adam optimizer.

mod array;
mod param;
mod tape;

pub use array::{dot, Array2};
pub use param::{adam_step, polyak_update, Adam, Parameter};
pub use tape::{BinaryOp, Gradients, Tape, UnaryOp, Var};

/// Central finite-difference gradient of a scalar function.
pub fn finite_difference(x: &Array2, h: f64, mut f: impl FnMut(&Array2) -> f64) -> Array2 {
    let mut grad = Array2::zeros(x.rows(), x.cols());
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = f(&probe);
        probe.data_mut()[i] = orig - h;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        grad.data_mut()[i] = (up - down) / (2.0 * h);
    }
    grad
}

/// `max |a−b| / max(max|b|, floor)`: relative error that tolerates
/// zero-gradient entries.
pub fn relative_error(analytic: &Array2, numeric: &Array2) -> f64 {
    let scale = numeric.max_abs().max(analytic.max_abs()).max(1e-8);
    analytic.zip_map(numeric, |a, b| (a - b).abs()).max_abs() / scale
}
