//! The two supervision branches.
//!
//! Detection samples run the detection decoder and are supervised by
//! bipartite matching. Action and caption samples run the same (shared)
//! detection decoder, select reliable person queries (RPQs), decode them
//! with the interaction decoder and supervise the fused verb predictions or
//! the caption alignment. Verb-branch losses backpropagate through the shared
//! decoder and backbone unless `detach_rpq` is set.

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{row_softmax_values, Tape, Var};
use crate::captions::NegativeBank;
use crate::data::{
    build_dn_queries, dn_isolation_mask, CaptionRecord, DatasetSpec, ImageAnnotation, ImageRecord,
    VideoRecord,
};
use crate::losses::{
    box_losses, detection_cost_matrix, hungarian_match, info_nce_bidirectional, object_ce,
    verb_focal, LossWeights,
};
use crate::model::{BoundModel, DecoderKind, DecoderState, HeadKind, Predictions};
use crate::{Error, Result};

/// Verb-wise prediction fusion mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    Max,
    Avg,
    None,
}

/// Reliable person queries selected from the detection decoder output.
pub struct RpqSet {
    /// Indices into the `N` detection queries, strictly increasing.
    pub indices: Vec<usize>,
    /// `[N_p x embed_dim]` rows of the detection decoder output.
    pub queries: Var,
    pub person_scores: Vec<f64>,
}

impl RpqSet {
    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }
}

/// Queries whose softmax person score exceeds `threshold`, in query order.
/// An empty result is a legal outcome, not an error.
pub fn select_rpq(
    tape: &Tape,
    preds: &Predictions,
    state: &DecoderState,
    person_class: usize,
    threshold: f64,
    detach: bool,
) -> Result<RpqSet> {
    let logits = preds.object_logits()?;
    let probs = row_softmax_values(&tape.value(logits));
    if person_class >= probs.ncols() {
        return Err(Error::InvalidArgument(format!(
            "person class {person_class} outside object label space of {}",
            probs.ncols()
        )));
    }
    let mut indices = Vec::new();
    let mut person_scores = Vec::new();
    for q in 0..probs.nrows() {
        let s = probs[[q, person_class]];
        if s > threshold {
            indices.push(q);
            person_scores.push(s);
        }
    }
    let gathered = tape.gather_rows(state.output_embeddings, &indices);
    let queries = if detach { tape.constant(tape.value(gathered)) } else { gathered };
    Ok(RpqSet { indices, queries, person_scores })
}

/// Fused verb prediction per the configured mode.
pub struct FusedVerbPrediction {
    /// `[1 x C_a]` for max/avg; the untouched `[N_p x C_a]` matrix for none.
    pub scores: Var,
    pub fusion_mode: FusionMode,
    /// Number of contributing score rows (`N_p`, or summed over frames).
    pub source_count: usize,
}

/// Column-wise fusion of sigmoid verb scores.
pub fn fuse_verb_predictions(
    tape: &Tape,
    scores: Var,
    mode: FusionMode,
) -> Result<FusedVerbPrediction> {
    let (n, _) = tape.shape(scores);
    if n == 0 {
        return Err(Error::InvalidArgument("cannot fuse an empty score matrix".into()));
    }
    let fused = match mode {
        FusionMode::Max => tape.col_max(scores),
        FusionMode::Avg => tape.col_mean(scores),
        FusionMode::None => scores,
    };
    Ok(FusedVerbPrediction { scores: fused, fusion_mode: mode, source_count: n })
}

/// Options shared by every branch invocation.
pub struct BranchContext<'a, 't> {
    pub model: &'a BoundModel<'t>,
    pub weights: LossWeights,
    pub person_class: usize,
    pub fusion_mode: FusionMode,
    pub detach_rpq: bool,
    pub focal_alpha: f64,
    pub focal_gamma: f64,
    pub no_object_weight: f64,
    pub temperature: f64,
    /// Frames sampled per video (`N_f`).
    pub n_frames: usize,
    /// Denoising group construction (noise scale, label flip probability).
    pub dn: Option<(f64, f64)>,
}

/// A per-sample loss value plus the count it was averaged over, so the
/// trainer can renormalize across a batch.
pub struct WeightedTerm {
    pub value: Var,
    pub weight: f64,
}

pub struct DetectionBranchOutput {
    pub boxes: Var,
    pub object_logits: Var,
    pub pairs: Vec<(usize, usize)>,
    pub l_b: WeightedTerm,
    pub l_g: WeightedTerm,
    pub l_c: WeightedTerm,
    /// Denoising-group terms, kept separate so they can be inspected; the
    /// trainer folds them into the same weighted sums.
    pub dn_terms: Option<(WeightedTerm, WeightedTerm, WeightedTerm)>,
}

fn match_predictions(
    tape: &Tape,
    boxes: Var,
    logits: Var,
    gt: &[crate::data::BoxAnn],
    weights: &LossWeights,
) -> Result<Vec<(usize, usize)>> {
    if gt.is_empty() {
        return Ok(vec![]);
    }
    let pred_boxes = tape.value(boxes);
    let probs = row_softmax_values(&tape.value(logits));
    let mut target_boxes = Array2::zeros((gt.len(), 4));
    let mut target_classes = Vec::with_capacity(gt.len());
    for (j, b) in gt.iter().enumerate() {
        for c in 0..4 {
            target_boxes[[j, c]] = b.cxcywh[c];
        }
        target_classes.push(b.class);
    }
    let cost = detection_cost_matrix(&pred_boxes, &probs, &target_boxes, &target_classes, weights);
    Ok(hungarian_match(&cost)?.pairs)
}

/// Object-detection supervision for one box-labeled sample, including the
/// optional denoising query group.
pub fn run_detection_branch(
    ctx: &BranchContext,
    record: &ImageRecord,
    rng: &mut ChaCha8Rng,
) -> Result<DetectionBranchOutput> {
    let model = ctx.model;
    let t = model.tape;
    let config = &model.config;
    let gt = match &record.annotation {
        ImageAnnotation::Boxes(b) => b.as_slice(),
        ImageAnnotation::Verbs(_) => {
            return Err(Error::InvalidArgument(
                "detection branch received an action-labeled record".into(),
            ))
        }
    };
    let enc = model.embed_and_encode(&record.image)?;

    let n = config.num_queries;
    let dn_group = match ctx.dn {
        Some((noise, flip)) if !gt.is_empty() => Some(build_dn_queries(
            model,
            gt,
            noise,
            flip,
            config.num_object_classes,
            rng,
        )),
        _ => None,
    };

    let state = if let Some(group) = &dn_group {
        let n_dn = group.noisy_labels.len();
        let query_pos = t.concat_rows(&[model.var("detection_decoder.query_embed"), group.encoded_queries]);
        let label_rows = t.gather_rows(model.var("dn.label_embed"), &group.noisy_labels);
        let zeros = t.constant(Array2::zeros((n, config.embed_dim)));
        let o0 = t.concat_rows(&[zeros, label_rows]);
        let mask = dn_isolation_mask(n, n_dn);
        model.decode_queries(DecoderKind::Detection, &enc, query_pos, o0, Some(&mask))?
    } else {
        model.detection_decode(&enc)?
    };

    let preds = model.predict_heads(&state, HeadKind::Detection)?;
    let all_boxes = preds.boxes()?;
    let all_logits = preds.object_logits()?;
    let learnable: Vec<usize> = (0..n).collect();
    let boxes = t.gather_rows(all_boxes, &learnable);
    let logits = t.gather_rows(all_logits, &learnable);

    let mut target_boxes = Array2::zeros((gt.len(), 4));
    let mut target_classes = Vec::with_capacity(gt.len());
    for (j, b) in gt.iter().enumerate() {
        for c in 0..4 {
            target_boxes[[j, c]] = b.cxcywh[c];
        }
        target_classes.push(b.class);
    }

    let pairs = match_predictions(t, boxes, logits, gt, &ctx.weights)?;
    let (l_b, l_g, n_pairs) = box_losses(t, boxes, &target_boxes, &pairs);
    let (l_c, ce_weight) = object_ce(
        t,
        logits,
        &target_classes,
        &pairs,
        config.no_object_class(),
        ctx.no_object_weight,
    )?;
    let mut out = DetectionBranchOutput {
        boxes,
        object_logits: logits,
        pairs: pairs.clone(),
        l_b: WeightedTerm { value: l_b, weight: n_pairs as f64 },
        l_g: WeightedTerm { value: l_g, weight: n_pairs as f64 },
        l_c: WeightedTerm { value: l_c, weight: ce_weight },
        dn_terms: None,
    };

    // Auxiliary deep supervision over intermediate decoder layers.
    if config.aux_loss && config.num_decoder_layers > 1 {
        for layer in 0..config.num_decoder_layers - 1 {
            let aux = model.predict_detection_layer(&state, layer)?;
            let aux_boxes = t.gather_rows(aux.boxes()?, &learnable);
            let aux_logits = t.gather_rows(aux.object_logits()?, &learnable);
            let aux_pairs = match_predictions(t, aux_boxes, aux_logits, gt, &ctx.weights)?;
            let (ab, ag, ap) = box_losses(t, aux_boxes, &target_boxes, &aux_pairs);
            let (ac, aw) = object_ce(
                t,
                aux_logits,
                &target_classes,
                &aux_pairs,
                config.no_object_class(),
                ctx.no_object_weight,
            )?;
            out.l_b = merge_terms(t, out.l_b, WeightedTerm { value: ab, weight: ap as f64 });
            out.l_g = merge_terms(t, out.l_g, WeightedTerm { value: ag, weight: ap as f64 });
            out.l_c = merge_terms(t, out.l_c, WeightedTerm { value: ac, weight: aw });
        }
    }

    if let Some(group) = &dn_group {
        let n_dn = group.noisy_labels.len();
        let dn_rows: Vec<usize> = (n..n + n_dn).collect();
        let dn_boxes = t.gather_rows(all_boxes, &dn_rows);
        let dn_logits = t.gather_rows(all_logits, &dn_rows);
        // Denoising queries reconstruct their own ground truth: query i is
        // paired with box i, no matching.
        let dn_pairs: Vec<(usize, usize)> = (0..n_dn).map(|i| (i, i)).collect();
        let (db, dg, dp) = box_losses(t, dn_boxes, &target_boxes, &dn_pairs);
        let (dc, dw) = object_ce(
            t,
            dn_logits,
            &group.true_labels,
            &dn_pairs,
            config.no_object_class(),
            ctx.no_object_weight,
        )?;
        out.dn_terms = Some((
            WeightedTerm { value: db, weight: dp as f64 },
            WeightedTerm { value: dg, weight: dp as f64 },
            WeightedTerm { value: dc, weight: dw },
        ));
    }

    Ok(out)
}

/// Combine two weighted means into one.
pub fn merge_terms(tape: &Tape, a: WeightedTerm, b: WeightedTerm) -> WeightedTerm {
    if b.weight == 0.0 {
        return a;
    }
    if a.weight == 0.0 {
        return b;
    }
    let total = a.weight + b.weight;
    let sum = tape.add(
        tape.mul_scalar(a.value, a.weight / total),
        tape.mul_scalar(b.value, b.weight / total),
    );
    WeightedTerm { value: sum, weight: total }
}

/// Verb-branch result for one sample.
pub enum VerbBranchOutput {
    /// No query cleared the reliability threshold; the sample contributes
    /// zero loss and is counted by the caller.
    Skipped,
    Scored {
        l_a: WeightedTerm,
        rpq_indices: Vec<usize>,
        person_scores: Vec<f64>,
        /// Detached fused scores for reporting.
        fused_scores: Vec<f64>,
        source_count: usize,
    },
}

fn multi_hot(verb_ids: &[usize], c_a: usize) -> Vec<f64> {
    let mut target = vec![0.0; c_a];
    for &v in verb_ids {
        if v < c_a {
            target[v] = 1.0;
        }
    }
    target
}

fn focal_on_fused(
    ctx: &BranchContext,
    fused: &FusedVerbPrediction,
    target: &[f64],
    mask: &[bool],
) -> Result<Var> {
    let t = ctx.model.tape;
    match fused.fusion_mode {
        FusionMode::Max | FusionMode::Avg => {
            verb_focal(t, fused.scores, target, mask, ctx.focal_alpha, ctx.focal_gamma)
        }
        FusionMode::None => {
            // Per-query supervision against the same image-level target,
            // averaged over queries.
            let (rows, _) = t.shape(fused.scores);
            let mut acc = None;
            for r in 0..rows {
                let row = t.gather_rows(fused.scores, &[r]);
                let l = verb_focal(t, row, target, mask, ctx.focal_alpha, ctx.focal_gamma)?;
                acc = Some(match acc {
                    None => l,
                    Some(a) => t.add(a, l),
                });
            }
            Ok(t.mul_scalar(acc.expect("rows >= 1"), 1.0 / rows as f64))
        }
    }
}

/// Image-level action supervision: detection decode, RPQ selection,
/// interaction decode, fusion, focal loss under the dataset's verb mask.
pub fn run_verb_branch_image(
    ctx: &BranchContext,
    record: &ImageRecord,
    dataset: &DatasetSpec,
) -> Result<VerbBranchOutput> {
    let model = ctx.model;
    let t = model.tape;
    let verb_ids = match &record.annotation {
        ImageAnnotation::Verbs(v) => v.as_slice(),
        ImageAnnotation::Boxes(_) => {
            return Err(Error::InvalidArgument(
                "verb branch received a box-labeled record".into(),
            ))
        }
    };
    let enc = model.embed_and_encode(&record.image)?;
    let det = model.detection_decode(&enc)?;
    let preds = model.predict_heads(&det, HeadKind::Detection)?;
    let rpq = select_rpq(t, &preds, &det, ctx.person_class, model.config.rpq_threshold, ctx.detach_rpq)?;
    if rpq.is_empty() {
        return Ok(VerbBranchOutput::Skipped);
    }
    let inter = model.interaction_decode(&enc, rpq.queries)?;
    let verb = model.predict_heads(&inter, HeadKind::Verb)?;
    let scores = t.sigmoid(verb.verb_logits()?);
    let fused = fuse_verb_predictions(t, scores, ctx.fusion_mode)?;

    let c_a = model.config.num_verb_classes;
    let target = multi_hot(verb_ids, c_a);
    let mask = dataset.verb_mask(c_a);
    let l_a = focal_on_fused(ctx, &fused, &target, &mask)?;
    let fused_scores = t.value(fused.scores).row(0).to_vec();
    Ok(VerbBranchOutput::Scored {
        l_a: WeightedTerm { value: l_a, weight: 1.0 },
        rpq_indices: rpq.indices,
        person_scores: rpq.person_scores,
        fused_scores,
        source_count: fused.source_count,
    })
}

/// Video-level action supervision: per-frame verb predictions are
/// concatenated and fused with one column-max before a single focal loss.
pub fn run_verb_branch_video(
    ctx: &BranchContext,
    record: &VideoRecord,
    dataset: &DatasetSpec,
    rng: &mut ChaCha8Rng,
) -> Result<VerbBranchOutput> {
    let model = ctx.model;
    let t = model.tape;
    if record.frames.is_empty() {
        return Err(Error::InvalidArgument(format!("video {} has no frames", record.id)));
    }
    // Sample N_f frames: distinct when available, with replacement otherwise.
    let n_f = ctx.n_frames.max(1);
    let frame_idx: Vec<usize> = if record.frames.len() >= n_f {
        let mut order: Vec<usize> = (0..record.frames.len()).collect();
        for i in 0..n_f {
            let j = rng.random_range(i..order.len());
            order.swap(i, j);
        }
        order.truncate(n_f);
        order
    } else {
        (0..n_f).map(|_| rng.random_range(0..record.frames.len())).collect()
    };

    let mut score_blocks = Vec::new();
    let mut rpq_indices = Vec::new();
    let mut person_scores = Vec::new();
    for &f in &frame_idx {
        let enc = model.embed_and_encode(&record.frames[f])?;
        let det = model.detection_decode(&enc)?;
        let preds = model.predict_heads(&det, HeadKind::Detection)?;
        let rpq =
            select_rpq(t, &preds, &det, ctx.person_class, model.config.rpq_threshold, ctx.detach_rpq)?;
        if rpq.is_empty() {
            continue;
        }
        let inter = model.interaction_decode(&enc, rpq.queries)?;
        let verb = model.predict_heads(&inter, HeadKind::Verb)?;
        score_blocks.push(t.sigmoid(verb.verb_logits()?));
        rpq_indices.extend(rpq.indices);
        person_scores.extend(rpq.person_scores);
    }
    if score_blocks.is_empty() {
        return Ok(VerbBranchOutput::Skipped);
    }
    let all_rows = if score_blocks.len() == 1 {
        score_blocks[0]
    } else {
        t.concat_rows(&score_blocks)
    };
    let fused = fuse_verb_predictions(t, all_rows, FusionMode::Max)?;

    let c_a = model.config.num_verb_classes;
    let target = multi_hot(&record.verb_ids, c_a);
    let mask = dataset.verb_mask(c_a);
    let l_a = focal_on_fused(ctx, &fused, &target, &mask)?;
    let fused_scores = t.value(fused.scores).row(0).to_vec();
    Ok(VerbBranchOutput::Scored {
        l_a: WeightedTerm { value: l_a, weight: 1.0 },
        rpq_indices,
        person_scores,
        fused_scores,
        source_count: fused.source_count,
    })
}

/// Caption alignment result for one sample.
pub enum CaptionBranchOutput {
    Skipped,
    Scored {
        l_s: WeightedTerm,
        /// RPQ selected for each triplet.
        selected: Vec<usize>,
    },
}

/// Alignment of one projected RPQ matrix against a positive text embedding
/// and its negatives: pick the most similar RPQ, then bidirectional InfoNCE.
/// Returns the loss and the selected row index.
pub fn caption_alignment_loss(
    tape: &Tape,
    proj_rows: Var,
    positive: &[f64],
    negatives: &Array2<f64>,
    temperature: f64,
) -> Result<(Var, usize)> {
    let t = tape;
    let (np, dim) = t.shape(proj_rows);
    if np == 0 {
        return Err(Error::EmptyRpq);
    }
    if positive.len() != dim || (negatives.nrows() > 0 && negatives.ncols() != dim) {
        return Err(Error::ShapeMismatch {
            context: "caption_alignment_loss",
            expected: format!("embeddings of width {dim}"),
            got: format!("positive {}, negatives {}", positive.len(), negatives.ncols()),
        });
    }
    let pos = t.constant(Array2::from_shape_vec((1, dim), positive.to_vec()).unwrap());
    let sims = t.matmul(proj_rows, t.transpose(pos));
    let sim_values = t.value(sims);
    let mut best = 0;
    for r in 1..np {
        if sim_values[[r, 0]] > sim_values[[best, 0]] {
            best = r;
        }
    }
    let sel = t.gather_rows(proj_rows, &[best]);
    let s_pos = t.matmul(sel, t.transpose(pos));
    let loss = if negatives.nrows() == 0 {
        info_nce_bidirectional(t, s_pos, None, temperature)?
    } else {
        let negs = t.constant(negatives.clone());
        let s_negs = t.matmul(sel, t.transpose(negs));
        info_nce_bidirectional(t, s_pos, Some(s_negs), temperature)?
    };
    Ok((loss, best))
}

/// Caption branch: projects interaction-decoder embeddings, aligns each of
/// the sample's triplets independently and sums their losses.
pub fn run_caption_branch(
    ctx: &BranchContext,
    record: &CaptionRecord,
    bank: &NegativeBank,
) -> Result<CaptionBranchOutput> {
    let model = ctx.model;
    let t = model.tape;
    if record.triplet_ids.len() != record.triplets.len() {
        return Err(Error::InvalidArgument(format!(
            "caption record {} has no bank-assigned triplet ids",
            record.id
        )));
    }
    if record.triplets.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "caption record {} reached the branch without triplets",
            record.id
        )));
    }
    let enc = model.embed_and_encode(&record.image)?;
    let det = model.detection_decode(&enc)?;
    let preds = model.predict_heads(&det, HeadKind::Detection)?;
    let rpq =
        select_rpq(t, &preds, &det, ctx.person_class, model.config.rpq_threshold, ctx.detach_rpq)?;
    if rpq.is_empty() {
        return Ok(CaptionBranchOutput::Skipped);
    }
    let inter = model.interaction_decode(&enc, rpq.queries)?;
    let proj = model.caption_projection(inter.output_embeddings);

    let mut total: Option<Var> = None;
    let mut selected = Vec::new();
    for &triplet_id in &record.triplet_ids {
        let positive = bank.embedding_of(triplet_id).ok_or_else(|| {
            Error::InvalidArgument(format!("triplet id {triplet_id} missing from bank"))
        })?;
        let neg_ids = crate::captions::negatives_for(triplet_id, bank)?;
        let mut negs = Array2::zeros((neg_ids.len(), bank.proj_dim));
        for (r, id) in neg_ids.iter().enumerate() {
            for (c, v) in bank.entries[*id].embedding.iter().enumerate() {
                negs[[r, c]] = *v;
            }
        }
        let (loss, best) = caption_alignment_loss(t, proj, positive, &negs, ctx.temperature)?;
        selected.push(rpq.indices[best]);
        total = Some(match total {
            None => loss,
            Some(acc) => t.add(acc, loss),
        });
    }
    Ok(CaptionBranchOutput::Scored {
        l_s: WeightedTerm {
            value: total.expect("at least one triplet"),
            weight: record.triplet_ids.len() as f64,
        },
        selected,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic_actions, BoxAnn, SyntheticActionConfig};
    use crate::model::{ModelConfig, ParamSet};
    use rand::SeedableRng;

    fn toy_config() -> ModelConfig {
        ModelConfig {
            embed_dim: 16,
            num_queries: 3,
            num_encoder_layers: 1,
            num_decoder_layers: 1,
            num_heads: 2,
            num_object_classes: 2,
            num_verb_classes: 4,
            ffn_hidden_dim: 24,
            ..ModelConfig::default()
        }
    }

    fn ctx<'a, 't>(model: &'a BoundModel<'t>) -> BranchContext<'a, 't> {
        BranchContext {
            model,
            weights: LossWeights::default(),
            person_class: 0,
            fusion_mode: FusionMode::Max,
            detach_rpq: false,
            focal_alpha: 0.25,
            focal_gamma: 2.0,
            no_object_weight: 0.1,
            temperature: 0.07,
            n_frames: 2,
            dn: None,
        }
    }

    /// Logits whose softmax person score (2 object classes + no-object)
    /// equals `s` at the person column.
    fn logits_for_person_scores(scores: &[f64]) -> Array2<f64> {
        let mut logits = Array2::zeros((scores.len(), 3));
        for (i, &s) in scores.iter().enumerate() {
            // softmax([ln(s), ln((1-s)/2), ln((1-s)/2)]) = [s, ...].
            logits[[i, 0]] = s.ln();
            logits[[i, 1]] = ((1.0 - s) / 2.0).ln();
            logits[[i, 2]] = ((1.0 - s) / 2.0).ln();
        }
        logits
    }

    fn fake_state(tape: &Tape, n: usize, d: usize) -> DecoderState {
        DecoderState {
            kind: DecoderKind::Detection,
            queries: tape.constant(Array2::zeros((n, d))),
            initial_embeddings: tape.constant(Array2::zeros((n, d))),
            output_embeddings: tape.constant(Array2::from_shape_fn((n, d), |(r, c)| {
                (r * d + c) as f64 * 0.01
            })),
            per_layer_outputs: vec![],
            per_layer_attention: vec![],
        }
    }

    #[test]
    fn rpq_selection_matches_threshold_definition() {
        let tape = Tape::new();
        let state = fake_state(&tape, 3, 4);
        let preds = Predictions::Detection {
            boxes: tape.constant(Array2::zeros((3, 4))),
            object_logits: tape.constant(logits_for_person_scores(&[0.95, 0.30, 0.91])),
        };
        let rpq = select_rpq(&tape, &preds, &state, 0, 0.9, false).unwrap();
        assert_eq!(rpq.indices, vec![0, 2]);
        assert!((rpq.person_scores[0] - 0.95).abs() < 1e-9);
        assert!((rpq.person_scores[1] - 0.91).abs() < 1e-9);
        // Selected rows equal the decoder output rows.
        let q = tape.value(rpq.queries);
        let o = tape.value(state.output_embeddings);
        for c in 0..4 {
            assert_eq!(q[[0, c]], o[[0, c]]);
            assert_eq!(q[[1, c]], o[[2, c]]);
        }
    }

    #[test]
    fn rpq_empty_when_all_below_threshold() {
        let tape = Tape::new();
        let state = fake_state(&tape, 2, 4);
        let preds = Predictions::Detection {
            boxes: tape.constant(Array2::zeros((2, 4))),
            object_logits: tape.constant(logits_for_person_scores(&[0.5, 0.89])),
        };
        let rpq = select_rpq(&tape, &preds, &state, 0, 0.9, false).unwrap();
        assert!(rpq.is_empty());
    }

    #[test]
    fn rpq_selection_agrees_with_brute_force_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..200 {
            let n = rng.random_range(1..8);
            let k = rng.random_range(2..5);
            let logits = Array2::from_shape_fn((n, k), |_| rng.random_range(-4.0..4.0));
            for &threshold in &[0.5, 0.9, 0.99] {
                let tape = Tape::new();
                let state = fake_state(&tape, n, 4);
                let preds = Predictions::Detection {
                    boxes: tape.constant(Array2::zeros((n, 4))),
                    object_logits: tape.constant(logits.clone()),
                };
                let person = 0usize;
                let rpq = select_rpq(&tape, &preds, &state, person, threshold, false).unwrap();
                // Brute force: softmax by hand per row.
                let mut expect = Vec::new();
                for q in 0..n {
                    let row: Vec<f64> = (0..k).map(|c| logits[[q, c]]).collect();
                    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
                    let s = (row[person] - m).exp() / z;
                    if s > threshold {
                        expect.push(q);
                    }
                }
                assert_eq!(rpq.indices, expect);
            }
        }
    }

    #[test]
    fn fusion_matches_column_oracles() {
        let tape = Tape::new();
        let scores = tape.constant(ndarray::array![[0.9, 0.1], [0.2, 0.8]]);
        let max = fuse_verb_predictions(&tape, scores, FusionMode::Max).unwrap();
        assert_eq!(tape.value(max.scores), ndarray::array![[0.9, 0.8]]);
        let avg = fuse_verb_predictions(&tape, scores, FusionMode::Avg).unwrap();
        let avg_v = tape.value(avg.scores);
        assert!((avg_v[[0, 0]] - 0.55).abs() < 1e-12);
        assert!((avg_v[[0, 1]] - 0.45).abs() < 1e-12);
        let none = fuse_verb_predictions(&tape, scores, FusionMode::None).unwrap();
        assert_eq!(tape.shape(none.scores), (2, 2));

        // Single row: unchanged under every mode.
        let single = tape.constant(ndarray::array![[0.3, 0.6]]);
        for mode in [FusionMode::Max, FusionMode::Avg, FusionMode::None] {
            let f = fuse_verb_predictions(&tape, single, mode).unwrap();
            let v = tape.value(f.scores);
            assert!((v[[0, 0]] - 0.3).abs() < 1e-12);
            assert!((v[[0, 1]] - 0.6).abs() < 1e-12);
        }

        let empty = tape.constant(Array2::zeros((0, 2)));
        assert!(fuse_verb_predictions(&tape, empty, FusionMode::Max).is_err());
    }

    #[test]
    fn fused_max_is_permutation_invariant_and_monotone() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for _ in 0..100 {
            let n = rng.random_range(1..6);
            let c = rng.random_range(1..5);
            let m = Array2::from_shape_fn((n, c), |_| rng.random_range(0.0..1.0));
            let tape = Tape::new();
            let v = tape.constant(m.clone());
            let fused = tape.value(fuse_verb_predictions(&tape, v, FusionMode::Max).unwrap().scores);

            // Permute rows.
            let mut perm: Vec<usize> = (0..n).collect();
            for i in (1..n).rev() {
                let j = rng.random_range(0..=i);
                perm.swap(i, j);
            }
            let pm = Array2::from_shape_fn((n, c), |(r, cc)| m[[perm[r], cc]]);
            let tape2 = Tape::new();
            let v2 = tape2.constant(pm);
            let fused2 =
                tape2.value(fuse_verb_predictions(&tape2, v2, FusionMode::Max).unwrap().scores);
            assert_eq!(fused, fused2);

            // Adding a row never decreases any fused score.
            let mut extended = Array2::zeros((n + 1, c));
            for r in 0..n {
                for cc in 0..c {
                    extended[[r, cc]] = m[[r, cc]];
                }
            }
            for cc in 0..c {
                extended[[n, cc]] = rng.random_range(0.0..1.0);
            }
            let tape3 = Tape::new();
            let v3 = tape3.constant(extended);
            let fused3 =
                tape3.value(fuse_verb_predictions(&tape3, v3, FusionMode::Max).unwrap().scores);
            for cc in 0..c {
                assert!(fused3[[0, cc]] >= fused[[0, cc]]);
            }
        }
    }

    #[test]
    fn detection_branch_empty_targets_and_cardinality() {
        let config = toy_config();
        let params = ParamSet::init(&config, 0);
        let tape = Tape::new();
        let model = BoundModel::bind(&tape, &params, &config);
        let ctx = ctx(&model);
        let mut rng = ChaCha8Rng::seed_from_u64(0);

        // Zero ground-truth boxes: no pairs, both box terms zero.
        let empty = ImageRecord {
            id: "e".into(),
            dataset: "det".into(),
            image: ndarray::Array3::from_elem((16, 16, 3), 0.2),
            annotation: ImageAnnotation::Boxes(vec![]),
        };
        let out = run_detection_branch(&ctx, &empty, &mut rng).unwrap();
        assert!(out.pairs.is_empty());
        assert_eq!(tape.scalar(out.l_b.value), 0.0);
        assert_eq!(tape.scalar(out.l_g.value), 0.0);
        assert!(tape.scalar(out.l_c.value) > 0.0);

        // One box, N=3 queries: exactly one matched pair.
        let one = ImageRecord {
            id: "o".into(),
            dataset: "det".into(),
            image: ndarray::Array3::from_elem((16, 16, 3), 0.2),
            annotation: ImageAnnotation::Boxes(vec![BoxAnn {
                cxcywh: [0.5, 0.5, 0.4, 0.4],
                class: 1,
            }]),
        };
        let out = run_detection_branch(&ctx, &one, &mut rng).unwrap();
        assert_eq!(out.pairs.len(), 1);
    }

    #[test]
    fn aux_supervision_adds_intermediate_layer_terms() {
        let config = ModelConfig { num_decoder_layers: 2, aux_loss: true, ..toy_config() };
        let params = ParamSet::init(&config, 5);
        let rec = ImageRecord {
            id: "d".into(),
            dataset: "det".into(),
            image: ndarray::Array3::from_elem((16, 16, 3), 0.3),
            annotation: ImageAnnotation::Boxes(vec![BoxAnn {
                cxcywh: [0.5, 0.5, 0.4, 0.4],
                class: 1,
            }]),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);

        let tape = Tape::new();
        let model = BoundModel::bind(&tape, &params, &config);
        let c = ctx(&model);
        let with_aux = run_detection_branch(&c, &rec, &mut rng).unwrap();
        // One matched pair per decoder layer contributes to the weights.
        assert_eq!(with_aux.l_b.weight, 2.0);

        let plain_config = ModelConfig { aux_loss: false, ..config };
        let tape2 = Tape::new();
        let model2 = BoundModel::bind(&tape2, &params, &plain_config);
        let c2 = ctx(&model2);
        let without = run_detection_branch(&c2, &rec, &mut rng).unwrap();
        assert_eq!(without.l_b.weight, 1.0);
    }

    #[test]
    fn read_only_forward_passes_run_concurrently() {
        // Parameters are immutable during a forward pass; concurrent
        // read-only passes over one set must agree with a serial pass.
        let config = toy_config();
        let params = std::sync::Arc::new(ParamSet::init(&config, 11));
        let image = ndarray::Array3::from_elem((16, 16, 3), 0.42);
        let forward = {
            let config = config.clone();
            move |p: &ParamSet, img: &ndarray::Array3<f64>| {
                let tape = Tape::new();
                let model = BoundModel::bind(&tape, p, &config);
                let enc = model.embed_and_encode(img).unwrap();
                let det = model.detection_decode(&enc).unwrap();
                tape.value(det.output_embeddings)
            }
        };
        let serial = forward(&params, &image);
        let handles: Vec<_> = (0..4)
            .map(|_| {
                let p = params.clone();
                let img = image.clone();
                let f = forward.clone();
                std::thread::spawn(move || f(&p, &img))
            })
            .collect();
        for h in handles {
            assert_eq!(h.join().unwrap(), serial);
        }
    }

    #[test]
    fn verb_branch_skips_on_empty_rpq() {
        // Fresh random weights produce person scores nowhere near 0.9.
        let config = toy_config();
        let params = ParamSet::init(&config, 1);
        let tape = Tape::new();
        let model = BoundModel::bind(&tape, &params, &config);
        let ctx = ctx(&model);
        let cfg = SyntheticActionConfig {
            n_samples: 1,
            verb_ids: vec![1],
            n_frames: 1,
            persons_range: (1, 1),
            canvas: (16, 16),
            person_class_id: 0,
            seed: 5,
        };
        let rec = match generate_synthetic_actions(&cfg, false).remove(0) {
            crate::data::Record::ActionImage(r) => r,
            _ => unreachable!(),
        };
        let dataset = DatasetSpec {
            name: "act".into(),
            kind: crate::data::DatasetKind::ActionImage,
            verb_class_ids: vec![0, 1, 2, 3],
            person_class_id: Some(0),
            sampling_weight: 1.0,
        };
        match run_verb_branch_image(&ctx, &rec, &dataset).unwrap() {
            VerbBranchOutput::Skipped => {}
            VerbBranchOutput::Scored { .. } => {
                panic!("untrained model should not produce reliable person queries")
            }
        }
    }

    #[test]
    fn masked_verb_classes_get_zero_gradient_end_to_end() {
        // Dataset owns classes {0,1}; gradients on verb-head columns for
        // classes {2,3} must be exactly zero.
        let config = toy_config();
        let params = ParamSet::init(&config, 2);
        let tape = Tape::new();
        let model = BoundModel::bind(&tape, &params, &config);
        let mut c = ctx(&model);
        // Guarantee a nonempty RPQ by dropping the threshold.
        let t_low = 1.0 / (config.num_object_classes + 1) as f64 * 0.9;
        let mut cfg2 = config.clone();
        cfg2.rpq_threshold = t_low;
        let model2 = BoundModel::bind(&tape, &params, &cfg2);
        c.model = &model2;

        let rec = ImageRecord {
            id: "a".into(),
            dataset: "act".into(),
            image: ndarray::Array3::from_elem((16, 16, 3), 0.4),
            annotation: ImageAnnotation::Verbs(vec![1]),
        };
        let dataset = DatasetSpec {
            name: "act".into(),
            kind: crate::data::DatasetKind::ActionImage,
            verb_class_ids: vec![0, 1],
            person_class_id: Some(0),
            sampling_weight: 1.0,
        };
        let out = run_verb_branch_image(&c, &rec, &dataset).unwrap();
        let l_a = match out {
            VerbBranchOutput::Scored { l_a, .. } => l_a,
            VerbBranchOutput::Skipped => panic!("low threshold must select queries"),
        };
        let grads = tape.backward(l_a.value);
        let named = model2.named_gradients(&grads, &params);
        let gw = &named["heads.verb.w"];
        let gb = &named["heads.verb.b"];
        for col in 2..4 {
            for r in 0..config.embed_dim {
                assert_eq!(gw[[r, col]], 0.0, "weight column {col} row {r}");
            }
            assert_eq!(gb[[0, col]], 0.0);
        }
        // Masked-in classes do receive gradient.
        assert!((0..2).any(|col| gb[[0, col]].abs() > 0.0));
    }

    #[test]
    fn caption_alignment_selects_highest_cosine_and_is_scale_invariant() {
        let tape = Tape::new();
        // Two unit rows with cosines 0.9 and 0.2 against the positive axis.
        let rows = ndarray::array![
            [0.9, (1.0f64 - 0.81).sqrt(), 0.0],
            [0.2, 0.0, (1.0f64 - 0.04).sqrt()]
        ];
        let proj = tape.constant(rows.clone());
        let positive = vec![1.0, 0.0, 0.0];
        let negs = Array2::zeros((0, 3));
        let (_, best) = caption_alignment_loss(&tape, proj, &positive, &negs, 0.07).unwrap();
        assert_eq!(best, 0);

        // Scaling all rows by a positive constant before normalization keeps
        // the argmax (normalization happens upstream in the projection; here
        // cosine ordering is scale-free anyway).
        let scaled = tape.constant(rows.mapv(|v| v * 3.7));
        let (_, best2) = caption_alignment_loss(&tape, scaled, &positive, &negs, 0.07).unwrap();
        assert_eq!(best2, best);
    }

    #[test]
    fn caption_alignment_closed_form() {
        // One RPQ equal to the positive embedding, 10 negatives at cosine 0:
        // L = -ln(e^{1/tau} / (e^{1/tau} + 10)).
        let tape = Tape::new();
        let dim = 12;
        let mut pos = vec![0.0; dim];
        pos[0] = 1.0;
        let proj = tape.constant(Array2::from_shape_vec((1, dim), pos.clone()).unwrap());
        let mut negs = Array2::zeros((10, dim));
        for r in 0..10 {
            negs[[r, 1 + r % (dim - 1)]] = 1.0;
        }
        let (loss, _) = caption_alignment_loss(&tape, proj, &pos, &negs, 0.07).unwrap();
        let e = (1.0f64 / 0.07).exp();
        let want = -(e / (e + 10.0)).ln();
        assert!((tape.scalar(loss) - want).abs() < 1e-12);

        // The symmetric average of two equal directions equals either one.
        let t2 = Tape::new();
        let p = t2.constant(ndarray::array![[0.8]]);
        let n = t2.constant(ndarray::array![[0.1, -0.4]]);
        let l = info_nce_bidirectional(&t2, p, Some(n), 0.07).unwrap();
        let scaled = t2.mul_scalar(t2.concat_cols(&[p, t2.constant(ndarray::array![[0.1, -0.4]])]), 1.0 / 0.07);
        let lp = t2.row_log_softmax(scaled);
        let one_dir = -t2.value(lp)[[0, 0]];
        assert!((t2.scalar(l) - one_dir).abs() < 1e-12);
    }

    #[test]
    fn table5_variants_coincide_for_single_rpq() {
        // With one RPQ row, max, avg and none produce identical losses.
        let target = vec![1.0, 0.0, 0.0];
        let mask = vec![true, true, true];
        let mut outs = Vec::new();
        for mode in [FusionMode::Max, FusionMode::Avg, FusionMode::None] {
            let tape = Tape::new();
            let scores = tape.constant(ndarray::array![[0.7, 0.2, 0.4]]);
            let config = toy_config();
            let params = ParamSet::init(&config, 3);
            let model = BoundModel::bind(&tape, &params, &config);
            let c = BranchContext { fusion_mode: mode, ..ctx(&model) };
            let fused = fuse_verb_predictions(&tape, scores, mode).unwrap();
            let l = focal_on_fused(&c, &fused, &target, &mask).unwrap();
            outs.push(tape.scalar(l));
        }
        assert!((outs[0] - outs[1]).abs() < 1e-15);
        assert!((outs[0] - outs[2]).abs() < 1e-15);
    }

    #[test]
    fn video_branch_uses_max_over_concatenated_frames() {
        // Oracle on the fusion step: frame rows [[0.9, 0.1]] and [[0.2, 0.8]]
        // fuse to [0.9, 0.8].
        let tape = Tape::new();
        let f1 = tape.constant(ndarray::array![[0.9, 0.1]]);
        let f2 = tape.constant(ndarray::array![[0.2, 0.8]]);
        let cat = tape.concat_rows(&[f1, f2]);
        let fused = fuse_verb_predictions(&tape, cat, FusionMode::Max).unwrap();
        assert_eq!(tape.value(fused.scores), ndarray::array![[0.9, 0.8]]);
    }

    #[test]
    fn video_shorter_than_n_frames_falls_back_to_replacement() {
        let config = toy_config();
        let params = ParamSet::init(&config, 4);
        let tape = Tape::new();
        let model = BoundModel::bind(&tape, &params, &config);
        let mut c = ctx(&model);
        c.n_frames = 4;
        let rec = VideoRecord {
            id: "v".into(),
            dataset: "vid".into(),
            frames: vec![ndarray::Array3::from_elem((16, 16, 3), 0.3); 2],
            verb_ids: vec![0],
        };
        let dataset = DatasetSpec {
            name: "vid".into(),
            kind: crate::data::DatasetKind::ActionVideo,
            verb_class_ids: vec![0, 1, 2, 3],
            person_class_id: Some(0),
            sampling_weight: 1.0,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        // Must not error; untrained weights mean it will usually skip.
        let _ = run_verb_branch_video(&c, &rec, &dataset, &mut rng).unwrap();
    }
}
