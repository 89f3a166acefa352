use super::graph::{Graph, NodeId};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Central-difference step used by [`grad_check`].
pub const FD_STEP: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    /// max over coordinates of `|analytic − numeric| / max(1, |numeric|)`
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub checked: usize,
    pub passed: bool,
}

/// Compares the analytic gradient of `build` at `point` against central
/// finite differences, in 64-bit arithmetic.
///
/// `build` receives a fresh graph and the leaf holding `point`, and must
/// return a scalar node.
pub fn grad_check<B>(build: B, point: &Tensor<f64>, tolerance: f64) -> Result<GradCheck>
where
    B: for<'g> Fn(&mut Graph<'g, f64>, NodeId) -> Result<NodeId>,
{
    let coords: Vec<usize> = (0..point.numel()).collect();
    grad_check_coords(build, point, &coords, tolerance)
}

/// [`grad_check`] restricted to the listed coordinates.
pub fn grad_check_coords<B>(build: B, point: &Tensor<f64>, coords: &[usize], tolerance: f64) -> Result<GradCheck>
where
    B: for<'g> Fn(&mut Graph<'g, f64>, NodeId) -> Result<NodeId>,
{
    let analytic = {
        let mut g = Graph::new();
        let x = g.leaf(point.clone(), true);
        let loss = build(&mut g, x)?;
        let grads = g.backward(loss)?;
        grads.get(x).cloned().expect("trainable leaf has a gradient")
    };

    let eval = |p: Tensor<f64>| -> Result<f64> {
        let mut g = Graph::new();
        let x = g.leaf(p, false);
        let loss = build(&mut g, x)?;
        let v = g.value(loss);
        if !v.is_scalar() {
            return Err(Error::NonScalarLoss(v.shape().to_vec()));
        }
        let v = v.item();
        if !v.is_finite() {
            return Err(Error::NonFinite { op: "grad_check" });
        }
        Ok(v)
    };

    let mut worst = (0.0f64, 0usize);
    for &i in coords {
        let mut plus = point.clone();
        plus.data_mut()[i] += FD_STEP;
        let mut minus = point.clone();
        minus.data_mut()[i] -= FD_STEP;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * FD_STEP);
        let err = (analytic.data()[i] - numeric).abs() / numeric.abs().max(1.0);
        if err > worst.0 {
            worst = (err, i);
        }
    }
    Ok(GradCheck {
        max_rel_error: worst.0,
        worst_index: worst.1,
        checked: coords.len(),
        passed: worst.0 < tolerance,
    })
}
