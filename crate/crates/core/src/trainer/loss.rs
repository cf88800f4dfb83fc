//! Bidirectional softmax losses over unit-norm query and target embeddings.
//!
//! For a batch of positives `(Q_i, T_i)` the query-to-target term is the mean
//! of `-log softmax_j(beta * Q_i . C_j)[i]` where the candidates `C` are the
//! batch targets followed by sampled negative targets. The target-to-query
//! term swaps the roles of queries and targets.

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{bail, Result};

/// Tolerance on `|‖row‖ - 1|` for inputs to the tensor-level losses.
pub const UNIT_NORM_TOL: f64 = 1e-6;

/// Row-wise dot products as a `B x 1` column.
pub(crate) fn row_dots(g: &mut Graph, a: Var, b: Var) -> Result<Var> {
    let p = g.mul(a, b)?;
    let s = g.sum(p, Some(1))?;
    let n = g.shape(s)[0];
    g.reshape(s, vec![n, 1])
}

/// One direction of the contrastive loss.
///
/// `anchors` and `positives` are `B x d`. When `in_batch` is set every other
/// positive is a candidate for each anchor; otherwise only the anchor's own
/// positive is. `extra` holds additional raw similarity columns (`B x k`),
/// e.g. against sampled negatives. Returns the mean loss and the number of
/// candidates per anchor.
pub(crate) fn direction_loss(
    g: &mut Graph,
    anchors: Var,
    positives: Var,
    extra: &[Var],
    beta: Var,
    in_batch: bool,
) -> Result<(Var, usize)> {
    let b = g.shape(anchors)[0];
    let (first, targets): (Var, Vec<usize>) = if in_batch {
        (g.matmul_nt(anchors, positives)?, (0..b).collect())
    } else {
        (row_dots(g, anchors, positives)?, vec![0; b])
    };
    let mut cols = vec![first];
    cols.extend_from_slice(extra);
    let sims = if cols.len() == 1 { first } else { g.concat_cols(&cols)? };
    let width = g.shape(sims)[1];
    let logits = g.mul(sims, beta)?;
    let losses = g.cross_entropy_rows(logits, &targets)?;
    Ok((g.mean(losses, None)?, width))
}

fn check_unit_rows(t: &Tensor, what: &str) -> Result<(usize, usize)> {
    let [r, c] = *t.shape() else {
        bail!(Dimension, "{what} must be a matrix, got {:?}", t.shape());
    };
    for i in 0..r {
        let n = t.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
        if (n - 1.0).abs() > UNIT_NORM_TOL {
            bail!(Contract, "{what} row {i} has norm {n}");
        }
    }
    Ok((r, c))
}

fn tensor_loss(
    anchors: &Tensor,
    positives: &Tensor,
    negatives: Option<&Tensor>,
    beta: f64,
    names: [&str; 3],
) -> Result<f64> {
    let (b, d) = check_unit_rows(anchors, names[0])?;
    if check_unit_rows(positives, names[1])? != (b, d) {
        bail!(Dimension, "{} and {} must have the same shape", names[0], names[1]);
    }
    if let Some(n) = negatives {
        if check_unit_rows(n, names[2])?.1 != d {
            bail!(Dimension, "{} has the wrong width", names[2]);
        }
    }
    let mut g = Graph::inference();
    let a = g.leaf(anchors.clone());
    let p = g.leaf(positives.clone());
    let beta = g.scalar(beta);
    let mut extra = Vec::new();
    if let Some(n) = negatives {
        let nv = g.leaf(n.clone());
        extra.push(g.matmul_nt(a, nv)?);
    }
    let (loss, _) = direction_loss(&mut g, a, p, &extra, beta, true)?;
    Ok(g.item(loss))
}

/// Query-to-target loss for `B x d` queries and targets and optional
/// `N x d` negative targets.
pub fn loss_query_to_target(
    q: &Tensor,
    t: &Tensor,
    t_neg: Option<&Tensor>,
    beta: f64,
) -> Result<f64> {
    tensor_loss(q, t, t_neg, beta, ["Q", "T", "T_neg"])
}

/// Target-to-query loss: each target is scored against all batch queries
/// and the optional `N x d` negative queries.
pub fn loss_target_to_query(
    q: &Tensor,
    t: &Tensor,
    q_neg: Option<&Tensor>,
    beta: f64,
) -> Result<f64> {
    tensor_loss(t, q, q_neg, beta, ["T", "Q", "Q_neg"])
}
