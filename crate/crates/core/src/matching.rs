//! Predicted distribution matrix, matching loss, channel reordering and the
//! greedy unique assignment used at inference.

use crate::error::{KdsmError, Result};
use crate::heatmap::HeatmapStack;
use crate::tensor::{softmax_rows, Tensor};

/// Lower clamp applied to probabilities before taking the log.
pub const LOG_FLOOR: f64 = 1e-12;

/// Per-prompt group index, `-1` when unassigned.
pub type Assignment = Vec<i64>;

/// Row-wise softmax of `T' V'`.
pub fn predict_p(logits: &Tensor) -> Result<Tensor> {
    softmax_rows(logits)
}

/// `-sum D_ij log max(P_ij, 1e-12)`.
pub fn match_loss(p: &Tensor, d: &Tensor) -> Result<f64> {
    if p.shape() != d.shape() || p.rank() != 2 {
        return Err(KdsmError::Dimension {
            op: "match_loss",
            lhs: p.shape().to_vec(),
            rhs: d.shape().to_vec(),
        });
    }
    Ok(p.data()
        .iter()
        .zip(d.data())
        .filter(|(_, &dv)| dv != 0.0)
        .map(|(&pv, &dv)| -dv * pv.max(LOG_FLOOR).ln())
        .sum())
}

/// Output channel `i < selections.len()` is input channel `selections[i]`;
/// all later channels are zero.
pub fn reorder_heatmaps(h_raw: &HeatmapStack, selections: &[usize]) -> Result<HeatmapStack> {
    let (n, hei, wid) = h_raw.channels.dims3()?;
    if selections.len() > n {
        return Err(KdsmError::Capacity {
            got: selections.len(),
            capacity: n,
        });
    }
    let plane = hei * wid;
    let mut out = vec![0.0; n * plane];
    for (i, &o) in selections.iter().enumerate() {
        if o >= n {
            return Err(KdsmError::Validation(format!("selection {o} out of range for {n} channels")));
        }
        out[i * plane..(i + 1) * plane].copy_from_slice(h_raw.channel(o));
    }
    Ok(HeatmapStack {
        channels: Tensor::new(vec![n, hei, wid], out)?,
        valid: selections.len(),
    })
}

/// Selected column of each of the first `k_valid` rows (first maximum).
pub fn row_selections(m: &Tensor, k_valid: usize) -> Result<Vec<usize>> {
    let (k, _) = m.dims2()?;
    if k_valid > k {
        return Err(KdsmError::Capacity { got: k_valid, capacity: k });
    }
    Ok((0..k_valid).map(|i| first_argmax(m.row(i))).collect())
}

fn first_argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = j;
        }
    }
    best
}

/// Mean squared error over every element of both stacks.
pub fn heatmap_mse(h: &HeatmapStack, g: &HeatmapStack) -> Result<f64> {
    if h.channels.shape() != g.channels.shape() {
        return Err(KdsmError::Dimension {
            op: "heatmap_mse",
            lhs: h.channels.shape().to_vec(),
            rhs: g.channels.shape().to_vec(),
        });
    }
    let n = h.channels.numel() as f64;
    Ok(h.channels
        .data()
        .iter()
        .zip(g.channels.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / n)
}

/// `alpha * match_loss + beta * MSE`, the MSE spanning all channels.
pub fn total_loss(
    h_reordered: &HeatmapStack,
    g: &HeatmapStack,
    p: &Tensor,
    d: &Tensor,
    alpha: f64,
    beta: f64,
) -> Result<f64> {
    let mse = heatmap_mse(h_reordered, g)?;
    // the clamped log keeps the match term finite, so alpha = 0 contributes an exact zero
    Ok(alpha * match_loss(p, d)? + beta * mse)
}

/// Greedy one-to-one assignment: visit all `(score, k, o)` triples from the
/// highest score down (ties: lower `k`, then lower `o`) and take a pair when
/// both its keypoint and its group are still free.
pub fn greedy_assign(p: &Tensor) -> Result<Assignment> {
    let (k, o) = p.dims2()?;
    let mut triples: Vec<(f64, usize, usize)> = (0..k)
        .flat_map(|i| (0..o).map(move |j| (i, j)))
        .map(|(i, j)| (p.at2(i, j), i, j))
        .collect();
    triples.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut out = vec![-1i64; k];
    let mut taken = vec![false; o];
    let mut assigned = 0;
    for (_, i, j) in triples {
        if assigned == k {
            break;
        }
        if out[i] == -1 && !taken[j] {
            out[i] = j as i64;
            taken[j] = true;
            assigned += 1;
        }
    }
    Ok(out)
}

/// Per-row argmax, ties to the lower index; collisions allowed.
pub fn max_value_assign(p: &Tensor) -> Result<Assignment> {
    let (k, o) = p.dims2()?;
    if o == 0 {
        return Ok(vec![-1; k]);
    }
    Ok((0..k).map(|i| first_argmax(p.row(i)) as i64).collect())
}
