//! Machine-readable inspection of a checkpointed model on one sample:
//! person scores, selected queries, fused verb scores and the raw decoder
//! cross-attention tensors for external plotting.

use serde::{Deserialize, Serialize};

use crate::autodiff::{row_softmax_values, Tape};
use crate::branches::{fuse_verb_predictions, select_rpq, FusionMode};
use crate::data::Image;
use crate::model::{BoundModel, HeadKind};
use crate::transfer::Checkpoint;
use crate::Result;

/// `[layer][head][query][token]` attention weights.
pub type AttentionTensor = Vec<Vec<Vec<Vec<f64>>>>;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProbeReport {
    pub record_id: String,
    /// Softmax person score of every detection query.
    pub person_scores: Vec<f64>,
    pub rpq_indices: Vec<usize>,
    pub rpq_empty: bool,
    pub boxes: Vec<[f64; 4]>,
    pub object_softmax: Vec<Vec<f64>>,
    pub fusion_mode: FusionMode,
    /// Fused verb scores; absent when no query cleared the threshold.
    pub fused_verb_scores: Option<Vec<f64>>,
    pub detection_attention: AttentionTensor,
    /// Interaction decoder attention; absent when the RPQ set is empty.
    pub interaction_attention: Option<AttentionTensor>,
}

fn export_attention(layers: &[Vec<ndarray::Array2<f64>>]) -> AttentionTensor {
    layers
        .iter()
        .map(|heads| {
            heads
                .iter()
                .map(|a| a.rows().into_iter().map(|r| r.to_vec()).collect())
                .collect()
        })
        .collect()
}

/// Run the two-decoder forward pass on one image and export everything a
/// plotting pipeline needs. An empty RPQ set is reported, not fatal.
pub fn probe(
    checkpoint: &Checkpoint,
    record_id: &str,
    image: &Image,
    person_class: usize,
    fusion_mode: FusionMode,
) -> Result<ProbeReport> {
    let config = &checkpoint.meta.config;
    let tape = Tape::new();
    let model = BoundModel::bind(&tape, &checkpoint.params, config);
    let enc = model.embed_and_encode(image)?;
    let det = model.detection_decode(&enc)?;
    let preds = model.predict_heads(&det, HeadKind::Detection)?;

    let probs = row_softmax_values(&tape.value(preds.object_logits()?));
    let person_scores: Vec<f64> = (0..probs.nrows()).map(|q| probs[[q, person_class]]).collect();
    let object_softmax: Vec<Vec<f64>> = probs.rows().into_iter().map(|r| r.to_vec()).collect();
    let boxes_arr = tape.value(preds.boxes()?);
    let boxes: Vec<[f64; 4]> = boxes_arr
        .rows()
        .into_iter()
        .map(|r| [r[0], r[1], r[2], r[3]])
        .collect();

    let rpq = select_rpq(&tape, &preds, &det, person_class, config.rpq_threshold, true)?;
    let detection_attention = export_attention(&det.per_layer_attention);

    let (fused_verb_scores, interaction_attention, rpq_indices) = if rpq.is_empty() {
        (None, None, vec![])
    } else {
        let indices = rpq.indices.clone();
        let inter = model.interaction_decode(&enc, rpq.queries)?;
        let verb = model.predict_heads(&inter, HeadKind::Verb)?;
        let scores = tape.sigmoid(verb.verb_logits()?);
        let fused = fuse_verb_predictions(&tape, scores, fusion_mode)?;
        let fused_row = tape.value(fused.scores).row(0).to_vec();
        (Some(fused_row), Some(export_attention(&inter.per_layer_attention)), indices)
    };

    Ok(ProbeReport {
        record_id: record_id.to_string(),
        person_scores,
        rpq_empty: rpq_indices.is_empty(),
        rpq_indices,
        boxes,
        object_softmax,
        fusion_mode,
        fused_verb_scores,
        detection_attention,
        interaction_attention,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelConfig, ParamSet};
    use ndarray::Array3;

    fn ckpt() -> Checkpoint {
        let config = ModelConfig {
            embed_dim: 16,
            num_queries: 4,
            num_encoder_layers: 1,
            num_decoder_layers: 2,
            num_heads: 2,
            num_object_classes: 2,
            num_verb_classes: 4,
            ffn_hidden_dim: 24,
            caption_proj_dim: 16,
            ..ModelConfig::default()
        };
        Checkpoint::new(ParamSet::init(&config, 0), &config, 0, 0)
    }

    #[test]
    fn probe_exports_normalized_attention() {
        let checkpoint = ckpt();
        let image = Array3::from_elem((16, 16, 3), 0.3);
        let report = probe(&checkpoint, "r0", &image, 0, FusionMode::Max).unwrap();
        assert_eq!(report.person_scores.len(), 4);
        assert_eq!(report.boxes.len(), 4);
        assert_eq!(report.detection_attention.len(), 2);
        for layer in &report.detection_attention {
            for head in layer {
                for row in head {
                    let sum: f64 = row.iter().sum();
                    assert!((sum - 1.0).abs() < 1e-6);
                }
            }
        }
        // Fresh weights: no reliable person query at T = 0.9.
        assert!(report.rpq_empty);
        assert!(report.fused_verb_scores.is_none());

        // An extreme threshold exercises the empty path deliberately; with a
        // permissive threshold the verb path fills in.
        let mut low = checkpoint.clone();
        low.meta.config.rpq_threshold = 0.2;
        let report = probe(&low, "r0", &image, 0, FusionMode::Max).unwrap();
        if !report.rpq_empty {
            assert!(report.fused_verb_scores.is_some());
            assert!(report.interaction_attention.is_some());
        }
    }

    #[test]
    fn probe_report_serializes_to_json() {
        let checkpoint = ckpt();
        let image = Array3::from_elem((16, 16, 3), 0.5);
        let report = probe(&checkpoint, "r1", &image, 0, FusionMode::Avg).unwrap();
        let json = serde_json::to_string(&report).unwrap();
        let back: ProbeReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back.record_id, "r1");
    }
}
