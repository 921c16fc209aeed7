//! The miniature query-based detection network.
//!
//! A two-layer strided convolutional patch embedder stands in for the CNN
//! backbone; its output tokens are injected with fixed 2D sine positional
//! encodings and enhanced by a transformer encoder. Two decoder stacks follow:
//! the detection decoder (learnable queries, box/object heads) and the
//! interaction decoder (person queries in, verb head out). The detection
//! decoder used by the verb branch is the same parameter set as the one
//! used by the detection branch.
//!
//! Everything runs on the [`autodiff`](crate::autodiff) tape in `f64`, so a
//! forward pass is deterministic given fixed parameters and input.

use std::collections::BTreeMap;

use ndarray::{Array2, Array3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::{Error, Result};

pub const IMAGE_CHANNELS: usize = 3;

/// Hyperparameters of the network. `num_decoder_layers` is shared by the
/// detection and interaction decoders so their parameter trees stay
/// layout-compatible for checkpoint transfer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub embed_dim: usize,
    /// Learnable detection queries (`N`).
    pub num_queries: usize,
    pub num_encoder_layers: usize,
    pub num_decoder_layers: usize,
    pub num_heads: usize,
    pub num_object_classes: usize,
    /// Total verb classes over all action datasets (`C_a`).
    pub num_verb_classes: usize,
    /// Person-score threshold for reliable person queries (`T`).
    pub rpq_threshold: f64,
    pub ffn_hidden_dim: usize,
    /// Total downsampling factor of the patch embedder.
    pub patch_size: usize,
    /// Output dimension of the caption alignment projection.
    pub caption_proj_dim: usize,
    /// Supervise intermediate decoder layers as well (off by default).
    #[serde(default)]
    pub aux_loss: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            embed_dim: 32,
            num_queries: 10,
            num_encoder_layers: 1,
            num_decoder_layers: 2,
            num_heads: 4,
            num_object_classes: 4,
            num_verb_classes: 8,
            rpq_threshold: 0.9,
            ffn_hidden_dim: 64,
            patch_size: 8,
            caption_proj_dim: 64,
            aux_loss: false,
        }
    }
}

impl ModelConfig {
    /// Index of the no-object class in the object head output.
    pub fn no_object_class(&self) -> usize {
        self.num_object_classes
    }

    /// Collects every violated invariant (empty when valid).
    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        if self.embed_dim == 0 || self.embed_dim % 2 != 0 {
            errs.push(format!("embed_dim must be a positive even number, got {}", self.embed_dim));
        }
        if self.num_heads == 0 || self.embed_dim % self.num_heads.max(1) != 0 {
            errs.push(format!(
                "embed_dim {} must be divisible by num_heads {}",
                self.embed_dim, self.num_heads
            ));
        }
        if self.num_queries == 0 {
            errs.push("num_queries must be >= 1".into());
        }
        if !(self.rpq_threshold > 0.0 && self.rpq_threshold < 1.0) {
            errs.push(format!(
                "rpq_threshold must be strictly between 0 and 1, got {}",
                self.rpq_threshold
            ));
        }
        for (name, v) in [
            ("num_encoder_layers", self.num_encoder_layers),
            ("num_decoder_layers", self.num_decoder_layers),
            ("num_object_classes", self.num_object_classes),
            ("num_verb_classes", self.num_verb_classes),
            ("ffn_hidden_dim", self.ffn_hidden_dim),
            ("caption_proj_dim", self.caption_proj_dim),
        ] {
            if v == 0 {
                errs.push(format!("{name} must be positive"));
            }
        }
        if self.patch_size < 2 || self.patch_size % 2 != 0 {
            errs.push(format!("patch_size must be an even number >= 2, got {}", self.patch_size));
        }
        errs
    }
}

/// Component a parameter belongs to, used by the transfer strategies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ComponentTag {
    Backbone,
    Encoder,
    DetectionDecoder,
    InteractionDecoder,
    Heads,
    Dn,
}

impl ComponentTag {
    pub fn as_str(&self) -> &'static str {
        match self {
            ComponentTag::Backbone => "backbone",
            ComponentTag::Encoder => "encoder",
            ComponentTag::DetectionDecoder => "detection_decoder",
            ComponentTag::InteractionDecoder => "interaction_decoder",
            ComponentTag::Heads => "heads",
            ComponentTag::Dn => "dn",
        }
    }

    pub fn from_str(s: &str) -> Option<Self> {
        Some(match s {
            "backbone" => ComponentTag::Backbone,
            "encoder" => ComponentTag::Encoder,
            "detection_decoder" => ComponentTag::DetectionDecoder,
            "interaction_decoder" => ComponentTag::InteractionDecoder,
            "heads" => ComponentTag::Heads,
            "dn" => ComponentTag::Dn,
            _ => return None,
        })
    }
}

/// Component tag derived from a parameter name prefix.
pub fn component_tag(name: &str) -> ComponentTag {
    let prefix = name.split('.').next().unwrap_or("");
    ComponentTag::from_str(prefix)
        .unwrap_or_else(|| panic!("parameter {name:?} has no known component prefix"))
}

/// Named parameter tree. `BTreeMap` keeps every iteration (optimizer steps,
/// serialization, gradient reduction) in one deterministic order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet {
    pub tensors: BTreeMap<String, Array2<f64>>,
}

impl ParamSet {
    /// Truncated-normal(0, 0.02) projection weights, zero biases, unit
    /// layer-norm gains. Query and label embedding tables use unit-variance
    /// truncated normals so queries are distinguishable from step one.
    pub fn init(config: &ModelConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        fn trunc_mat(rng: &mut ChaCha8Rng, std: f64, rows: usize, cols: usize) -> Array2<f64> {
            let normal = Normal::new(0.0, std).unwrap();
            Array2::from_shape_fn((rows, cols), |_| loop {
                let x: f64 = normal.sample(rng);
                if x.abs() <= 2.0 * std {
                    break x;
                }
            })
        }
        let mut trunc = move |rows: usize, cols: usize| trunc_mat(&mut rng, 0.02, rows, cols);
        let mut embed_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x51ed_2700);
        let mut embed_trunc =
            move |rows: usize, cols: usize| trunc_mat(&mut embed_rng, 1.0, rows, cols);

        let d = config.embed_dim;
        let f = config.ffn_hidden_dim;
        let mut tensors = BTreeMap::new();

        // Backbone: conv1 (k = p/2, s = p/2) then conv2 (k = 2, s = 2),
        // both expressed as im2col matmuls.
        let k1 = config.patch_size / 2;
        tensors.insert("backbone.conv1.w".into(), trunc(k1 * k1 * IMAGE_CHANNELS, d));
        tensors.insert("backbone.conv1.b".into(), Array2::zeros((1, d)));
        tensors.insert("backbone.conv2.w".into(), trunc(4 * d, d));
        tensors.insert("backbone.conv2.b".into(), Array2::zeros((1, d)));

        let attn = |t: &mut BTreeMap<String, Array2<f64>>, prefix: &str, trunc: &mut dyn FnMut(usize, usize) -> Array2<f64>| {
            for w in ["wq", "wk", "wv", "wo"] {
                t.insert(format!("{prefix}.{w}"), trunc(d, d));
            }
            for b in ["bq", "bk", "bv", "bo"] {
                t.insert(format!("{prefix}.{b}"), Array2::zeros((1, d)));
            }
        };
        let norm = |t: &mut BTreeMap<String, Array2<f64>>, prefix: &str| {
            t.insert(format!("{prefix}.gamma"), Array2::ones((1, d)));
            t.insert(format!("{prefix}.beta"), Array2::zeros((1, d)));
        };
        let ffn = |t: &mut BTreeMap<String, Array2<f64>>, prefix: &str, trunc: &mut dyn FnMut(usize, usize) -> Array2<f64>| {
            t.insert(format!("{prefix}.w1"), trunc(d, f));
            t.insert(format!("{prefix}.b1"), Array2::zeros((1, f)));
            t.insert(format!("{prefix}.w2"), trunc(f, d));
            t.insert(format!("{prefix}.b2"), Array2::zeros((1, d)));
        };

        for l in 0..config.num_encoder_layers {
            let p = format!("encoder.l{l}");
            attn(&mut tensors, &format!("{p}.attn"), &mut trunc);
            norm(&mut tensors, &format!("{p}.norm1"));
            norm(&mut tensors, &format!("{p}.norm2"));
            ffn(&mut tensors, &format!("{p}.ffn"), &mut trunc);
        }

        tensors.insert(
            "detection_decoder.query_embed".into(),
            embed_trunc(config.num_queries, d),
        );
        for stack in ["detection_decoder", "interaction_decoder"] {
            for l in 0..config.num_decoder_layers {
                let p = format!("{stack}.l{l}");
                attn(&mut tensors, &format!("{p}.self_attn"), &mut trunc);
                attn(&mut tensors, &format!("{p}.cross_attn"), &mut trunc);
                norm(&mut tensors, &format!("{p}.norm1"));
                norm(&mut tensors, &format!("{p}.norm2"));
                norm(&mut tensors, &format!("{p}.norm3"));
                ffn(&mut tensors, &format!("{p}.ffn"), &mut trunc);
            }
        }

        tensors.insert("heads.box.w1".into(), trunc(d, d));
        tensors.insert("heads.box.b1".into(), Array2::zeros((1, d)));
        tensors.insert("heads.box.w2".into(), trunc(d, d));
        tensors.insert("heads.box.b2".into(), Array2::zeros((1, d)));
        tensors.insert("heads.box.w3".into(), trunc(d, 4));
        tensors.insert("heads.box.b3".into(), Array2::zeros((1, 4)));
        tensors.insert("heads.object.w".into(), trunc(d, config.num_object_classes + 1));
        tensors.insert("heads.object.b".into(), Array2::zeros((1, config.num_object_classes + 1)));
        tensors.insert("heads.verb.w".into(), trunc(d, config.num_verb_classes));
        tensors.insert("heads.verb.b".into(), Array2::zeros((1, config.num_verb_classes)));
        tensors.insert("heads.caption_proj.w".into(), trunc(d, config.caption_proj_dim));
        tensors.insert("heads.caption_proj.b".into(), Array2::zeros((1, config.caption_proj_dim)));

        tensors.insert("dn.coord.w1".into(), trunc(4, d));
        tensors.insert("dn.coord.b1".into(), Array2::zeros((1, d)));
        tensors.insert("dn.coord.w2".into(), trunc(d, d));
        tensors.insert("dn.coord.b2".into(), Array2::zeros((1, d)));
        tensors.insert("dn.label_embed".into(), embed_trunc(config.num_object_classes + 1, d));

        Self { tensors }
    }
}

/// Parameter set bound onto a tape as gradient-tracked leaves.
pub struct BoundModel<'t> {
    pub tape: &'t Tape,
    pub config: ModelConfig,
    vars: BTreeMap<String, Var>,
}

impl<'t> BoundModel<'t> {
    pub fn bind(tape: &'t Tape, params: &ParamSet, config: &ModelConfig) -> Self {
        let vars = params
            .tensors
            .iter()
            .map(|(name, value)| (name.clone(), tape.param(value.clone())))
            .collect();
        Self { tape, config: config.clone(), vars }
    }

    pub fn var(&self, name: &str) -> Var {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name:?}"))
    }

    /// Map tape gradients back to parameter names. Parameters that did not
    /// participate in the loss report a zero gradient.
    pub fn named_gradients(
        &self,
        grads: &crate::autodiff::Gradients,
        params: &ParamSet,
    ) -> BTreeMap<String, Array2<f64>> {
        self.vars
            .iter()
            .map(|(name, var)| {
                let g = grads
                    .get(*var)
                    .cloned()
                    .unwrap_or_else(|| Array2::zeros(params.tensors[name].dim()));
                (name.clone(), g)
            })
            .collect()
    }

    fn linear(&self, x: Var, prefix: &str, w: &str, b: &str) -> Var {
        let t = self.tape;
        t.add_row(t.matmul(x, self.var(&format!("{prefix}.{w}"))), self.var(&format!("{prefix}.{b}")))
    }

    fn layer_norm(&self, x: Var, prefix: &str) -> Var {
        self.tape.layer_norm(
            x,
            self.var(&format!("{prefix}.gamma")),
            self.var(&format!("{prefix}.beta")),
            1e-5,
        )
    }

    fn ffn_block(&self, x: Var, prefix: &str) -> Var {
        let h = self.tape.relu(self.linear(x, prefix, "w1", "b1"));
        self.linear(h, prefix, "w2", "b2")
    }

    /// Multi-head attention. `mask` holds additive logits (`-1e9` on blocked
    /// pairs), shape `[n_q x n_k]`. Returns the output and per-head attention
    /// weights.
    fn attention(
        &self,
        prefix: &str,
        q_in: Var,
        k_in: Var,
        v_in: Var,
        mask: Option<&Array2<f64>>,
    ) -> (Var, Vec<Array2<f64>>) {
        let t = self.tape;
        let d = self.config.embed_dim;
        let heads = self.config.num_heads;
        let dk = d / heads;
        let q = self.linear(q_in, prefix, "wq", "bq");
        let k = self.linear(k_in, prefix, "wk", "bk");
        let v = self.linear(v_in, prefix, "wv", "bv");
        let mask_var = mask.map(|m| t.constant(m.clone()));
        let mut outs = Vec::with_capacity(heads);
        let mut weights = Vec::with_capacity(heads);
        for h in 0..heads {
            let qh = t.slice_cols(q, h * dk, dk);
            let kh = t.slice_cols(k, h * dk, dk);
            let vh = t.slice_cols(v, h * dk, dk);
            let mut scores = t.mul_scalar(t.matmul(qh, t.transpose(kh)), 1.0 / (dk as f64).sqrt());
            if let Some(m) = mask_var {
                scores = t.add(scores, m);
            }
            let attn = t.row_softmax(scores);
            weights.push(t.value(attn));
            outs.push(t.matmul(attn, vh));
        }
        let cat = t.concat_cols(&outs);
        (self.linear(cat, prefix, "wo", "bo"), weights)
    }

    /// Flatten, embed and encode an `H x W x 3` image.
    pub fn embed_and_encode(&self, image: &Array3<f64>) -> Result<EncoderOutput> {
        let t = self.tape;
        let (h, w, c) = image.dim();
        if c != IMAGE_CHANNELS {
            return Err(Error::ShapeMismatch {
                context: "embed_and_encode",
                expected: format!("{IMAGE_CHANNELS} channels"),
                got: format!("{c} channels"),
            });
        }
        let p = self.config.patch_size;
        if h < p || w < p {
            return Err(Error::ShapeMismatch {
                context: "embed_and_encode",
                expected: format!("image at least {p}x{p}"),
                got: format!("{h}x{w}"),
            });
        }

        // conv1 as im2col over the raw pixels (constant w.r.t. parameters).
        let k1 = p / 2;
        let g1h = h / k1;
        let g1w = w / k1;
        let mut patches = Array2::zeros((g1h * g1w, k1 * k1 * IMAGE_CHANNELS));
        for gy in 0..g1h {
            for gx in 0..g1w {
                let row = gy * g1w + gx;
                let mut col = 0;
                for dy in 0..k1 {
                    for dx in 0..k1 {
                        for ch in 0..IMAGE_CHANNELS {
                            patches[[row, col]] = image[[gy * k1 + dy, gx * k1 + dx, ch]];
                            col += 1;
                        }
                    }
                }
            }
        }
        let p1 = t.constant(patches);
        let x1 = t.relu(self.linear(p1, "backbone.conv1", "w", "b"));

        // conv2: 2x2/stride-2 over the g1 grid via row gathers.
        let g2h = g1h / 2;
        let g2w = g1w / 2;
        let mut corners: [Vec<usize>; 4] = Default::default();
        for gy in 0..g2h {
            for gx in 0..g2w {
                corners[0].push((2 * gy) * g1w + 2 * gx);
                corners[1].push((2 * gy) * g1w + 2 * gx + 1);
                corners[2].push((2 * gy + 1) * g1w + 2 * gx);
                corners[3].push((2 * gy + 1) * g1w + 2 * gx + 1);
            }
        }
        let gathered: Vec<Var> = corners.iter().map(|idx| t.gather_rows(x1, idx)).collect();
        let stacked = t.concat_cols(&gathered);
        let tokens = self.linear(stacked, "backbone.conv2", "w", "b");

        let pos = sine_positional_encoding(g2h, g2w, self.config.embed_dim);
        let pos_var = t.constant(pos.clone());
        let token_mask = vec![true; g2h * g2w];

        // Transformer encoder, post-norm, keys carry positional encoding.
        let key_mask = key_mask_matrix(token_mask.len(), &token_mask);
        let mut x = tokens;
        for l in 0..self.config.num_encoder_layers {
            let prefix = format!("encoder.l{l}");
            let qk = t.add(x, pos_var);
            let (attn_out, _) =
                self.attention(&format!("{prefix}.attn"), qk, qk, x, key_mask.as_ref());
            x = self.layer_norm(t.add(x, attn_out), &format!("{prefix}.norm1"));
            let ff = self.ffn_block(x, &format!("{prefix}.ffn"));
            x = self.layer_norm(t.add(x, ff), &format!("{prefix}.norm2"));
        }

        Ok(EncoderOutput {
            features: x,
            positional_encoding: pos_var,
            token_mask,
            grid: (g2h, g2w),
        })
    }

    /// Shared decoder stack walk. `query_pos` plays the role of the query
    /// embedding added to queries/keys of self-attention and to queries of
    /// cross-attention; `o0` is the initial decoder embedding.
    pub fn decode_queries(
        &self,
        stack: DecoderKind,
        enc: &EncoderOutput,
        query_pos: Var,
        o0: Var,
        self_mask: Option<&Array2<f64>>,
    ) -> Result<DecoderState> {
        let t = self.tape;
        let (nq, d) = t.shape(query_pos);
        if d != self.config.embed_dim {
            return Err(Error::ShapeMismatch {
                context: "decode_queries",
                expected: format!("queries of width {}", self.config.embed_dim),
                got: format!("width {d}"),
            });
        }
        if t.shape(o0) != (nq, d) {
            return Err(Error::ShapeMismatch {
                context: "decode_queries",
                expected: format!("o0 of shape {nq}x{d}"),
                got: format!("{:?}", t.shape(o0)),
            });
        }
        let name = stack.prefix();
        let key_mask = key_mask_matrix(nq_tokens(enc), &enc.token_mask);
        let mut tgt = o0;
        let mut per_layer_attention = Vec::new();
        let mut per_layer_outputs = Vec::new();
        for l in 0..self.config.num_decoder_layers {
            let prefix = format!("{name}.l{l}");
            let qk = t.add(tgt, query_pos);
            let (self_out, _) =
                self.attention(&format!("{prefix}.self_attn"), qk, qk, tgt, self_mask);
            tgt = self.layer_norm(t.add(tgt, self_out), &format!("{prefix}.norm1"));
            let q = t.add(tgt, query_pos);
            let mem_k = t.add(enc.features, enc.positional_encoding);
            let (cross_out, cross_attn) = self.attention(
                &format!("{prefix}.cross_attn"),
                q,
                mem_k,
                enc.features,
                key_mask.as_ref(),
            );
            per_layer_attention.push(cross_attn);
            tgt = self.layer_norm(t.add(tgt, cross_out), &format!("{prefix}.norm2"));
            let ff = self.ffn_block(tgt, &format!("{prefix}.ffn"));
            tgt = self.layer_norm(t.add(tgt, ff), &format!("{prefix}.norm3"));
            per_layer_outputs.push(tgt);
        }
        Ok(DecoderState {
            kind: stack,
            queries: query_pos,
            initial_embeddings: o0,
            output_embeddings: tgt,
            per_layer_outputs,
            per_layer_attention,
        })
    }

    /// Detection decoder over the learnable query set with zero-initialized
    /// decoder embeddings.
    pub fn detection_decode(&self, enc: &EncoderOutput) -> Result<DecoderState> {
        let q = self.var("detection_decoder.query_embed");
        let o0 = self
            .tape
            .constant(Array2::zeros((self.config.num_queries, self.config.embed_dim)));
        self.decode_queries(DecoderKind::Detection, enc, q, o0, None)
    }

    /// Interaction decoder over reliable person queries.
    pub fn interaction_decode(&self, enc: &EncoderOutput, rpq: Var) -> Result<DecoderState> {
        let (np, _) = self.tape.shape(rpq);
        if np == 0 {
            return Err(Error::EmptyRpq);
        }
        let o0 = self.tape.constant(Array2::zeros((np, self.config.embed_dim)));
        self.decode_queries(DecoderKind::Interaction, enc, rpq, o0, None)
    }

    /// Prediction heads. Box coordinates pass through a sigmoid, so widths
    /// and heights are strictly positive.
    pub fn predict_heads(&self, state: &DecoderState, which: HeadKind) -> Result<Predictions> {
        let t = self.tape;
        match (which, state.kind) {
            (HeadKind::Detection, DecoderKind::Detection) => {
                let o = state.output_embeddings;
                let h1 = t.relu(self.linear(o, "heads.box", "w1", "b1"));
                let h2 = t.relu(self.linear(h1, "heads.box", "w2", "b2"));
                let boxes = t.sigmoid(self.linear(h2, "heads.box", "w3", "b3"));
                let logits = self.linear(o, "heads.object", "w", "b");
                Ok(Predictions::Detection { boxes, object_logits: logits })
            }
            (HeadKind::Verb, DecoderKind::Interaction) => {
                let logits = self.linear(state.output_embeddings, "heads.verb", "w", "b");
                Ok(Predictions::Verb { verb_logits: logits })
            }
            (requested, actual) => Err(Error::WrongDecoderState {
                requested: requested.name(),
                state: actual.prefix(),
            }),
        }
    }

    /// Caption alignment projection of interaction-decoder embeddings,
    /// L2-normalized per row.
    pub fn caption_projection(&self, o_a: Var) -> Var {
        let t = self.tape;
        let proj = self.linear(o_a, "heads.caption_proj", "w", "b");
        l2_normalize_rows(t, proj)
    }

    /// Predictions of intermediate decoder layers, for auxiliary supervision.
    pub fn predict_detection_layer(&self, state: &DecoderState, layer: usize) -> Result<Predictions> {
        if state.kind != DecoderKind::Detection {
            return Err(Error::WrongDecoderState {
                requested: "detection",
                state: state.kind.prefix(),
            });
        }
        let t = self.tape;
        let o = state.per_layer_outputs[layer];
        let h1 = t.relu(self.linear(o, "heads.box", "w1", "b1"));
        let h2 = t.relu(self.linear(h1, "heads.box", "w2", "b2"));
        let boxes = t.sigmoid(self.linear(h2, "heads.box", "w3", "b3"));
        let logits = self.linear(o, "heads.object", "w", "b");
        Ok(Predictions::Detection { boxes, object_logits: logits })
    }
}

fn nq_tokens(enc: &EncoderOutput) -> usize {
    enc.token_mask.len()
}

/// Row-wise L2 normalization on the tape.
pub fn l2_normalize_rows(t: &Tape, x: Var) -> Var {
    let sq = t.mul(x, x);
    let norms = t.pow_scalar(t.row_sum(sq), -0.5);
    t.mul_col(x, norms)
}

/// Additive key mask: `-1e9` on columns whose token is masked out, `None`
/// when every token is valid.
fn key_mask_matrix(nq: usize, token_mask: &[bool]) -> Option<Array2<f64>> {
    if token_mask.iter().all(|&m| m) {
        return None;
    }
    let mut m = Array2::zeros((nq, token_mask.len()));
    for (j, &valid) in token_mask.iter().enumerate() {
        if !valid {
            for i in 0..nq {
                m[[i, j]] = -1e9;
            }
        }
    }
    Some(m)
}

/// Fixed 2D sine positional encoding over a `gh x gw` token grid: the first
/// half of the channels encodes the row coordinate, the second half the
/// column coordinate, interleaved sin/cos over geometric frequencies.
pub fn sine_positional_encoding(gh: usize, gw: usize, dim: usize) -> Array2<f64> {
    assert!(dim % 2 == 0, "positional encoding needs an even dim");
    let half = dim / 2;
    let two_pi = std::f64::consts::TAU;
    let mut pos = Array2::zeros((gh * gw, dim));
    for gy in 0..gh {
        for gx in 0..gw {
            let row = gy * gw + gx;
            let y = (gy as f64 + 0.5) / gh as f64 * two_pi;
            let x = (gx as f64 + 0.5) / gw as f64 * two_pi;
            for j in 0..half {
                let freq = 10000f64.powf(2.0 * (j / 2) as f64 / half as f64);
                let (vy, vx) = (y / freq, x / freq);
                pos[[row, j]] = if j % 2 == 0 { vy.sin() } else { vy.cos() };
                pos[[row, half + j]] = if j % 2 == 0 { vx.sin() } else { vx.cos() };
            }
        }
    }
    pos
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecoderKind {
    Detection,
    Interaction,
}

impl DecoderKind {
    pub fn prefix(&self) -> &'static str {
        match self {
            DecoderKind::Detection => "detection_decoder",
            DecoderKind::Interaction => "interaction_decoder",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadKind {
    Detection,
    Verb,
}

impl HeadKind {
    fn name(&self) -> &'static str {
        match self {
            HeadKind::Detection => "detection",
            HeadKind::Verb => "verb",
        }
    }
}

/// Encoder-enhanced token sequence with positional metadata.
pub struct EncoderOutput {
    pub features: Var,
    pub positional_encoding: Var,
    pub token_mask: Vec<bool>,
    pub grid: (usize, usize),
}

impl EncoderOutput {
    /// Deterministic byte serialization of the detached values, for
    /// bit-stability checks.
    pub fn to_bytes(&self, tape: &Tape) -> Vec<u8> {
        let mut out = Vec::new();
        for arr in [tape.value(self.features), tape.value(self.positional_encoding)] {
            out.extend_from_slice(&(arr.nrows() as u64).to_le_bytes());
            out.extend_from_slice(&(arr.ncols() as u64).to_le_bytes());
            for v in arr.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        for &m in &self.token_mask {
            out.push(m as u8);
        }
        out
    }
}

/// Query set, decoder embeddings and recorded cross-attention of one decoder
/// stack pass.
pub struct DecoderState {
    pub kind: DecoderKind,
    pub queries: Var,
    pub initial_embeddings: Var,
    pub output_embeddings: Var,
    pub per_layer_outputs: Vec<Var>,
    /// `[layer][head]` cross-attention weights, each `[n_q x num_tokens]`.
    pub per_layer_attention: Vec<Vec<Array2<f64>>>,
}

/// Head outputs. Detection fills boxes and object logits; verb fills verb
/// logits only.
pub enum Predictions {
    Detection { boxes: Var, object_logits: Var },
    Verb { verb_logits: Var },
}

impl Predictions {
    pub fn boxes(&self) -> Result<Var> {
        match self {
            Predictions::Detection { boxes, .. } => Ok(*boxes),
            _ => Err(Error::WrongDecoderState { requested: "boxes", state: "verb" }),
        }
    }

    pub fn object_logits(&self) -> Result<Var> {
        match self {
            Predictions::Detection { object_logits, .. } => Ok(*object_logits),
            _ => Err(Error::WrongDecoderState { requested: "object_logits", state: "verb" }),
        }
    }

    pub fn verb_logits(&self) -> Result<Var> {
        match self {
            Predictions::Verb { verb_logits } => Ok(*verb_logits),
            _ => Err(Error::WrongDecoderState { requested: "verb_logits", state: "detection" }),
        }
    }
}
