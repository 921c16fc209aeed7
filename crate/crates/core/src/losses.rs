//! Bipartite matching and the training loss terms.
//!
//! The matcher is an O(n^3) shortest-augmenting-path assignment over a
//! square-padded cost matrix. Loss terms live on the autodiff tape so their
//! gradients come from the same graph as the forward pass:
//!
//! * `box_losses` — L1 and (1 - GIoU) over matched pairs,
//! * `object_ce` — weighted cross-entropy over all queries with the
//!   no-object class down-weighted,
//! * `verb_focal` — binary focal loss over the sample's dataset classes only,
//! * `info_nce_bidirectional` — temperature-scaled contrastive loss averaged
//!   over both directions,
//! * `compose_total` — the weighted overall loss.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::{Error, Result};

/// Minimal-cost injective assignment of queries to targets.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchResult {
    /// `(query_index, target_index)` pairs; `|pairs| = min(N, M)`.
    pub pairs: Vec<(usize, usize)>,
    pub unmatched_queries: Vec<usize>,
    pub total_cost: f64,
}

/// Hungarian assignment on an `N x M` cost matrix. Entries must be finite.
pub fn hungarian_match(cost: &Array2<f64>) -> Result<MatchResult> {
    if cost.iter().any(|c| c.is_nan()) {
        return Err(Error::InvalidArgument("cost matrix contains NaN".into()));
    }
    let (n, m) = cost.dim();
    if n == 0 || m == 0 {
        return Ok(MatchResult { pairs: vec![], unmatched_queries: (0..n).collect(), total_cost: 0.0 });
    }
    // Pad to square with zero-cost dummy cells; dummies absorb the unmatched
    // side without changing the optimum over real cells.
    let k = n.max(m);
    let mut square = Array2::zeros((k, k));
    for i in 0..n {
        for j in 0..m {
            square[[i, j]] = cost[[i, j]];
        }
    }

    let assignment = solve_square(&square);

    let mut pairs = Vec::new();
    let mut total = 0.0;
    for (row, col) in assignment.iter().enumerate() {
        if row < n && *col < m {
            pairs.push((row, *col));
            total += cost[[row, *col]];
        }
    }
    pairs.sort_unstable();
    let matched: std::collections::BTreeSet<usize> = pairs.iter().map(|p| p.0).collect();
    let unmatched_queries = (0..n).filter(|q| !matched.contains(q)).collect();
    Ok(MatchResult { pairs, unmatched_queries, total_cost: total })
}

/// Shortest-augmenting-path assignment (potentials form) on a square matrix.
/// Returns `row -> column`.
fn solve_square(cost: &Array2<f64>) -> Vec<usize> {
    let n = cost.nrows();
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; n + 1];
    let mut p = vec![0usize; n + 1]; // p[j] = row matched to column j (1-based)
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost[[i0 - 1, j - 1]] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut row_to_col = vec![0usize; n];
    for j in 1..=n {
        row_to_col[p[j] - 1] = j - 1;
    }
    row_to_col
}

/// Matching cost per the detection-transformer recipe: the box and overlap
/// terms reuse the final loss weights and the class term subtracts the
/// softmax probability of the target class.
pub fn detection_cost_matrix(
    pred_boxes: &Array2<f64>,
    class_probs: &Array2<f64>,
    target_boxes: &Array2<f64>,
    target_classes: &[usize],
    weights: &LossWeights,
) -> Array2<f64> {
    let n = pred_boxes.nrows();
    let m = target_boxes.nrows();
    let mut cost = Array2::zeros((n, m));
    for i in 0..n {
        let pb = [pred_boxes[[i, 0]], pred_boxes[[i, 1]], pred_boxes[[i, 2]], pred_boxes[[i, 3]]];
        for j in 0..m {
            let tb = [target_boxes[[j, 0]], target_boxes[[j, 1]], target_boxes[[j, 2]], target_boxes[[j, 3]]];
            let l1: f64 = pb.iter().zip(&tb).map(|(a, b)| (a - b).abs()).sum();
            let giou = giou_cxcywh(&pb, &tb);
            cost[[i, j]] = weights.lambda_b * l1 + weights.lambda_g * (1.0 - giou)
                - weights.lambda_c * class_probs[[i, target_classes[j]]];
        }
    }
    cost
}

/// Plain-value GIoU of two normalized `cxcywh` boxes. In `[-1, 1]`.
pub fn giou_cxcywh(a: &[f64; 4], b: &[f64; 4]) -> f64 {
    let (ax1, ay1, ax2, ay2) = (a[0] - a[2] / 2.0, a[1] - a[3] / 2.0, a[0] + a[2] / 2.0, a[1] + a[3] / 2.0);
    let (bx1, by1, bx2, by2) = (b[0] - b[2] / 2.0, b[1] - b[3] / 2.0, b[0] + b[2] / 2.0, b[1] + b[3] / 2.0);
    let inter_w = (ax2.min(bx2) - ax1.max(bx1)).max(0.0);
    let inter_h = (ay2.min(by2) - ay1.max(by1)).max(0.0);
    let inter = inter_w * inter_h;
    let area_a = (ax2 - ax1) * (ay2 - ay1);
    let area_b = (bx2 - bx1) * (by2 - by1);
    let union = area_a + area_b - inter;
    let iou = inter / union;
    let ex1 = ax1.min(bx1);
    let ey1 = ay1.min(by1);
    let ex2 = ax2.max(bx2);
    let ey2 = ay2.max(by2);
    let enclose = (ex2 - ex1) * (ey2 - ey1);
    iou - (enclose - union) / enclose
}

/// Box regression terms over matched pairs on the tape.
///
/// `L_b` is the per-pair L1 sum over the four coordinates, averaged over
/// pairs; `L_g` is the mean `1 - GIoU`. With no matched pairs both are 0.
/// Also returns the number of contributing pairs so a caller can renormalize
/// across a batch.
pub fn box_losses(
    tape: &Tape,
    pred_boxes: Var,
    target_boxes: &Array2<f64>,
    pairs: &[(usize, usize)],
) -> (Var, Var, usize) {
    let t = tape;
    let np = pairs.len();
    if np == 0 {
        return (t.scalar_constant(0.0), t.scalar_constant(0.0), 0);
    }
    let query_idx: Vec<usize> = pairs.iter().map(|p| p.0).collect();
    let pred = t.gather_rows(pred_boxes, &query_idx);
    let mut tgt = Array2::zeros((np, 4));
    for (k, &(_, j)) in pairs.iter().enumerate() {
        for c in 0..4 {
            tgt[[k, c]] = target_boxes[[j, c]];
        }
    }
    let tgt = t.constant(tgt);

    let l1 = t.mul_scalar(t.sum_all(t.abs(t.sub(pred, tgt))), 1.0 / np as f64);
    let giou = giou_rows(t, pred, tgt);
    let ones = t.constant(Array2::ones((np, 1)));
    let lg = t.mul_scalar(t.sum_all(t.sub(ones, giou)), 1.0 / np as f64);
    (l1, giou_clean(lg), np)
}

// identity hook; kept separate so the giou pipeline reads clearly
fn giou_clean(v: Var) -> Var {
    v
}

/// Row-wise GIoU of two `[n x 4]` cxcywh tensors on the tape, `[n x 1]`.
pub fn giou_rows(t: &Tape, a: Var, b: Var) -> Var {
    let half = |v: Var, c: usize| t.mul_scalar(t.slice_cols(v, c, 1), 0.5);
    let coords = |v: Var| {
        let cx = t.slice_cols(v, 0, 1);
        let cy = t.slice_cols(v, 1, 1);
        let (hw, hh) = (half(v, 2), half(v, 3));
        (
            t.sub(cx, hw),
            t.sub(cy, hh),
            t.add(cx, hw),
            t.add(cy, hh),
        )
    };
    let (ax1, ay1, ax2, ay2) = coords(a);
    let (bx1, by1, bx2, by2) = coords(b);
    let n = t.shape(ax1).0;
    let zero = t.constant(Array2::zeros((n, 1)));

    let iw = t.maximum(t.sub(t.minimum(ax2, bx2), t.maximum(ax1, bx1)), zero);
    let ih = t.maximum(t.sub(t.minimum(ay2, by2), t.maximum(ay1, by1)), zero);
    let inter = t.mul(iw, ih);
    let area_a = t.mul(t.sub(ax2, ax1), t.sub(ay2, ay1));
    let area_b = t.mul(t.sub(bx2, bx1), t.sub(by2, by1));
    let union = t.sub(t.add(area_a, area_b), inter);
    let iou = t.div(inter, union);

    let ew = t.sub(t.maximum(ax2, bx2), t.minimum(ax1, bx1));
    let eh = t.sub(t.maximum(ay2, by2), t.minimum(ay1, by1));
    let enclose = t.mul(ew, eh);
    t.sub(iou, t.div(t.sub(enclose, union), enclose))
}

/// Weighted cross-entropy over all `N` queries. Unmatched queries supervise
/// the no-object class with weight `no_object_weight`; the reduction is the
/// weighted mean (sum of weighted terms over sum of weights). Also returns
/// the weight sum for batch-level renormalization.
pub fn object_ce(
    tape: &Tape,
    object_logits: Var,
    target_classes: &[usize],
    pairs: &[(usize, usize)],
    no_object_class: usize,
    no_object_weight: f64,
) -> Result<(Var, f64)> {
    let t = tape;
    let (n, k) = t.shape(object_logits);
    let mut query_target = vec![no_object_class; n];
    for &(q, j) in pairs {
        let cls = target_classes[j];
        if cls >= k {
            return Err(Error::InvalidArgument(format!(
                "target class {cls} outside label space of {k} classes"
            )));
        }
        query_target[q] = cls;
    }
    let mut pick = Array2::zeros((n, k));
    let mut weight_sum = 0.0;
    for (q, &cls) in query_target.iter().enumerate() {
        let w = if cls == no_object_class { no_object_weight } else { 1.0 };
        pick[[q, cls]] = w;
        weight_sum += w;
    }
    let log_probs = t.row_log_softmax(object_logits);
    let weighted = t.mul(log_probs, t.constant(pick));
    let loss = t.mul_scalar(t.sum_all(weighted), -1.0 / weight_sum);
    Ok((loss, weight_sum))
}

/// Binary focal loss over the masked classes of one fused score row.
///
/// `scores` is `[1 x C_a]` in (0,1); masked-out classes contribute exactly
/// zero loss and zero gradient. The per-class terms are summed.
pub fn verb_focal(
    tape: &Tape,
    scores: Var,
    target: &[f64],
    mask: &[bool],
    alpha: f64,
    gamma: f64,
) -> Result<Var> {
    let t = tape;
    let (rows, c) = t.shape(scores);
    if rows != 1 || c != target.len() || c != mask.len() {
        return Err(Error::ShapeMismatch {
            context: "verb_focal",
            expected: format!("scores 1x{}, target/mask of same width", target.len()),
            got: format!("{rows}x{c}"),
        });
    }
    for (j, (&y, &m)) in target.iter().zip(mask.iter()).enumerate() {
        if y > 0.0 && !m {
            return Err(Error::InvalidArgument(format!(
                "verb target positive on masked-out class {j}"
            )));
        }
    }
    let p = t.clamp(scores, 1e-6, 1.0 - 1e-6);
    let ones = t.constant(Array2::ones((1, c)));
    let tgt = t.constant(Array2::from_shape_vec((1, c), target.to_vec()).unwrap());
    let mask_row = Array2::from_shape_vec(
        (1, c),
        mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect(),
    )
    .unwrap();
    let m = t.constant(mask_row);

    let one_minus_p = t.sub(ones, p);
    let pos = t.mul_scalar(
        t.mul(tgt, t.mul(t.pow_scalar(one_minus_p, gamma), t.mul_scalar(t.ln(p), -1.0))),
        alpha,
    );
    let neg = t.mul_scalar(
        t.mul(
            t.sub(ones, tgt),
            t.mul(t.pow_scalar(p, gamma), t.mul_scalar(t.ln(one_minus_p), -1.0)),
        ),
        1.0 - alpha,
    );
    Ok(t.sum_all(t.mul(t.add(pos, neg), m)))
}

/// Bidirectional InfoNCE over one positive and a shared negative set.
///
/// Each direction is a softmax cross-entropy with the positive at index 0
/// over temperature-scaled similarities; the loss is their average. With the
/// same partition in both directions the two terms coincide.
pub fn info_nce_bidirectional(
    tape: &Tape,
    sim_pos: Var,
    sim_negs: Option<Var>,
    temperature: f64,
) -> Result<Var> {
    if temperature <= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    let t = tape;
    let logits = match sim_negs {
        Some(negs) => t.concat_cols(&[sim_pos, negs]),
        None => sim_pos,
    };
    let scaled = t.mul_scalar(logits, 1.0 / temperature);
    let log_probs = t.row_log_softmax(scaled);
    let direction = t.mul_scalar(t.slice_cols(log_probs, 0, 1), -1.0);
    // L_s = (L_i2t + L_t2i) / 2 with both directions over the same partition.
    Ok(t.mul_scalar(t.add(direction, direction), 0.5))
}

/// Loss weights of the overall objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_b: f64,
    pub lambda_g: f64,
    pub lambda_c: f64,
    pub lambda_a: f64,
    pub lambda_s: f64,
    /// Balance between the detection and verb branches.
    pub lambda_v: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda_b: 5.0, lambda_g: 2.0, lambda_c: 1.0, lambda_a: 1.0, lambda_s: 1.0, lambda_v: 1.0 }
    }
}

/// Raw loss terms before weighting.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossTerms {
    pub l_b: f64,
    pub l_g: f64,
    pub l_c: f64,
    pub l_a: f64,
    pub l_s: f64,
}

/// Every loss term plus the weighted total.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub l_b: f64,
    pub l_g: f64,
    pub l_c: f64,
    pub l_a: f64,
    pub l_s: f64,
    pub total: f64,
    pub weights: LossWeights,
}

/// Compose the weighted total:
/// `total = λ_b·L_b + λ_g·L_g + λ_c·L_c + λ_v·(λ_a·L_a + λ_s·L_s)`.
pub fn compose_total(terms: &LossTerms, weights: &LossWeights) -> Result<LossReport> {
    for (name, v) in [
        ("L_b", terms.l_b),
        ("L_g", terms.l_g),
        ("L_c", terms.l_c),
        ("L_a", terms.l_a),
        ("L_s", terms.l_s),
    ] {
        if !v.is_finite() {
            return Err(Error::NonFiniteLoss { step: 0, detail: format!("{name} = {v}") });
        }
    }
    let total = weights.lambda_b * terms.l_b
        + weights.lambda_g * terms.l_g
        + weights.lambda_c * terms.l_c
        + weights.lambda_v * (weights.lambda_a * terms.l_a + weights.lambda_s * terms.l_s);
    Ok(LossReport {
        l_b: terms.l_b,
        l_g: terms.l_g,
        l_c: terms.l_c,
        l_a: terms.l_a,
        l_s: terms.l_s,
        total,
        weights: *weights,
    })
}

/// Tape-side composition with the identical association order, so the
/// reported total and the differentiated total agree bit-for-bit.
pub fn compose_total_var(tape: &Tape, terms: [Var; 5], weights: &LossWeights) -> Var {
    let t = tape;
    let [l_b, l_g, l_c, l_a, l_s] = terms;
    let det = t.add(
        t.add(t.mul_scalar(l_b, weights.lambda_b), t.mul_scalar(l_g, weights.lambda_g)),
        t.mul_scalar(l_c, weights.lambda_c),
    );
    let verb = t.mul_scalar(
        t.add(t.mul_scalar(l_a, weights.lambda_a), t.mul_scalar(l_s, weights.lambda_s)),
        weights.lambda_v,
    );
    t.add(det, verb)
}
