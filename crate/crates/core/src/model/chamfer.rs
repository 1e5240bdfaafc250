//! Chamfer distances and nearest-neighbor error maps.
//!
//! Two variants are kept apart: [`chamfer_sq`] sums squared nearest-neighbor
//! distances in both directions and drives training; [`chamfer_eval_mm`]
//! averages Euclidean distances and is used for every reported number.

use crate::geometry::Point3;
use crate::spatial::KdTree;

use super::ModelError;

fn non_empty(a: &[Point3], b: &[Point3]) -> Result<(), ModelError> {
    if a.is_empty() || b.is_empty() {
        Err(ModelError::EmptyCloud)
    } else {
        Ok(())
    }
}

/// Sum of squared NN distances from every point of `a` to `b`.
fn directed_sq(from: &[Point3], to: &KdTree) -> f64 {
    from.iter().map(|&p| to.nearest(p).dist_sq).sum()
}

/// `Σ_{x∈a} min_y ‖x−y‖² + Σ_{y∈b} min_x ‖x−y‖²` in mm².
pub fn chamfer_sq(a: &[Point3], b: &[Point3]) -> Result<f64, ModelError> {
    non_empty(a, b)?;
    let (ta, tb) = (KdTree::new(a), KdTree::new(b));
    Ok(directed_sq(a, &tb) + directed_sq(b, &ta))
}

/// [`chamfer_sq`] together with its gradient with respect to `pred`
/// (flat `[x0, y0, z0, x1, …]`). `target_tree` may be reused across calls.
pub fn chamfer_sq_grad(
    pred: &[Point3],
    target: &[Point3],
    target_tree: &KdTree,
) -> Result<(f64, Vec<f64>), ModelError> {
    non_empty(pred, target)?;
    let pred_tree = KdTree::new(pred);
    let mut grad = vec![0.0; pred.len() * 3];
    let mut loss = 0.0;
    for (i, &x) in pred.iter().enumerate() {
        let nn = target_tree.nearest(x);
        loss += nn.dist_sq;
        let y = target[nn.index];
        for k in 0..3 {
            grad[3 * i + k] += 2.0 * (x[k] - y[k]);
        }
    }
    for &y in target {
        let nn = pred_tree.nearest(y);
        loss += nn.dist_sq;
        let x = pred[nn.index];
        for k in 0..3 {
            grad[3 * nn.index + k] += 2.0 * (x[k] - y[k]);
        }
    }
    Ok((loss, grad))
}

/// `½·(mean_{x∈pred} NN distance + mean_{y∈gt} NN distance)` in mm.
pub fn chamfer_eval_mm(gt: &[Point3], pred: &[Point3]) -> Result<f64, ModelError> {
    non_empty(gt, pred)?;
    Ok(chamfer_eval_with_tree(gt, &KdTree::new(gt), pred))
}

pub(crate) fn chamfer_eval_with_tree(gt: &[Point3], gt_tree: &KdTree, pred: &[Point3]) -> f64 {
    let pred_tree = KdTree::new(pred);
    let fwd: f64 = pred.iter().map(|&p| gt_tree.nearest(p).dist_sq.sqrt()).sum::<f64>() / pred.len() as f64;
    let back: f64 = gt.iter().map(|&p| pred_tree.nearest(p).dist_sq.sqrt()).sum::<f64>() / gt.len() as f64;
    0.5 * (fwd + back)
}

/// Distance from every predicted point to its nearest truth point.
#[derive(Clone, Debug, PartialEq)]
pub struct NnErrorMap {
    pub distances: Vec<f64>,
    pub nnd_max: f64,
}

pub fn nn_error_map(gt: &[Point3], pred: &[Point3]) -> Result<NnErrorMap, ModelError> {
    non_empty(gt, pred)?;
    let tree = KdTree::new(gt);
    let distances: Vec<f64> = pred.iter().map(|&p| tree.nearest(p).dist_sq.sqrt()).collect();
    let nnd_max = distances.iter().copied().fold(0.0, f64::max);
    Ok(NnErrorMap { distances, nnd_max })
}
