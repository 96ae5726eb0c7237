//! Proposal stage and the interaction prediction head.
//!
//! A region proposal network scores anchors on every pyramid level. RoIs
//! are pooled with RoIAlign and passed through a two-layer box head to get
//! local features. The top non-pooled pyramid level is averaged into a
//! global vector that is fused with each local feature. Linear layers then
//! predict noun logits, class-specific box deltas, verb logits and a
//! softplus time to contact.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{softmax, Graph, RoiAlignConfig, RoiSpec, Var};
use crate::boxes::{
    batched_nms, box_area, clip_box, level_anchors, match_boxes, order_by_score, sample_balanced,
    BoxCoder, MatchState,
};
use crate::datamodel::{BoundingBox, InteractionAnnotation, StaPrediction};
use crate::error::{Error, Result};
use crate::nn::{Conv, Init, Linear, ParamStore};
use crate::autograd::ConvGeometry;
use crate::pyramid::FeaturePyramid;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ProposalMode {
    #[default]
    LearnedRpn,
    /// Ground-truth boxes with bounded uniform jitter.
    OracleJitter,
}

/// Head architecture; every value but `Proposed` is an ablation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum HeadVariant {
    /// Global-local fusion with residual, verb-noun score product.
    #[default]
    Proposed,
    /// Noun and box only.
    NounsOnly,
    /// Verb and ttc layers on the local features; score is p(n).
    StandardHead,
    /// Fusion MLP over local features only.
    NoGlobal,
    /// Fusion MLP output replaces the local features.
    NoResidual,
    /// Proposed fusion; score is p(n).
    NoVerbNounProduct,
    /// Local features plus a linear projection of the global vector.
    SumFusion,
}

impl HeadVariant {
    pub const ALL: [HeadVariant; 7] = [
        HeadVariant::Proposed,
        HeadVariant::NounsOnly,
        HeadVariant::StandardHead,
        HeadVariant::NoGlobal,
        HeadVariant::NoResidual,
        HeadVariant::NoVerbNounProduct,
        HeadVariant::SumFusion,
    ];

    pub fn predicts_verb_and_ttc(self) -> bool {
        self != HeadVariant::NounsOnly
    }

    pub fn uses_verb_noun_product(self) -> bool {
        matches!(
            self,
            HeadVariant::Proposed | HeadVariant::NoGlobal | HeadVariant::NoResidual | HeadVariant::SumFusion
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HeadConfig {
    pub ablation: HeadVariant,
    pub proposal_mode: ProposalMode,
    /// Maximum jitter as a fraction of box width/height.
    pub oracle_jitter: f64,
    /// Jittered copies per ground truth during oracle-mode training.
    pub oracle_copies: usize,
    /// Random background boxes per image during oracle-mode training.
    pub oracle_background: usize,
    /// Width of the local and fused RoI features.
    pub representation_dim: usize,
    pub roi_output_size: usize,
    pub roi_sampling_ratio: usize,
    pub canonical_box_size: f64,
    pub canonical_level: usize,
    /// Anchor side per pyramid level.
    pub anchor_sizes: Vec<f64>,
    pub aspect_ratios: Vec<f64>,
    pub rpn_pre_nms_top_n_train: usize,
    pub rpn_pre_nms_top_n_test: usize,
    pub rpn_post_nms_top_n_train: usize,
    pub rpn_post_nms_top_n_test: usize,
    pub rpn_nms_threshold: f64,
    pub rpn_fg_iou: f64,
    pub rpn_bg_iou: f64,
    pub rpn_batch_size_per_image: usize,
    pub rpn_positive_fraction: f64,
    pub rpn_smooth_l1_beta: f64,
    pub roi_batch_size_per_image: usize,
    pub roi_positive_fraction: f64,
    pub roi_fg_iou: f64,
    pub box_weights: [f64; 4],
    pub smooth_l1_beta: f64,
    pub score_threshold: f64,
    pub nms_threshold: f64,
    pub detections_per_image: usize,
    pub loss_weight_verb: f64,
    pub loss_weight_ttc: f64,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            ablation: HeadVariant::Proposed,
            proposal_mode: ProposalMode::LearnedRpn,
            oracle_jitter: 0.1,
            oracle_copies: 4,
            oracle_background: 16,
            representation_dim: 1024,
            roi_output_size: 7,
            roi_sampling_ratio: 2,
            canonical_box_size: 224.0,
            canonical_level: 4,
            anchor_sizes: vec![32.0, 64.0, 128.0, 256.0, 512.0],
            aspect_ratios: vec![0.5, 1.0, 2.0],
            rpn_pre_nms_top_n_train: 2000,
            rpn_pre_nms_top_n_test: 1000,
            rpn_post_nms_top_n_train: 2000,
            rpn_post_nms_top_n_test: 1000,
            rpn_nms_threshold: 0.7,
            rpn_fg_iou: 0.7,
            rpn_bg_iou: 0.3,
            rpn_batch_size_per_image: 256,
            rpn_positive_fraction: 0.5,
            rpn_smooth_l1_beta: 1.0 / 9.0,
            roi_batch_size_per_image: 512,
            roi_positive_fraction: 0.25,
            roi_fg_iou: 0.5,
            box_weights: [10.0, 10.0, 5.0, 5.0],
            smooth_l1_beta: 1.0,
            score_threshold: crate::datamodel::SCORE_THRESHOLD,
            nms_threshold: 0.5,
            detections_per_image: 100,
            loss_weight_verb: 0.1,
            loss_weight_ttc: 0.5,
        }
    }
}

impl HeadConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.anchor_sizes.len() != 5 {
            return bad(format!("head.anchor_sizes needs 5 entries, got {}", self.anchor_sizes.len()));
        }
        if self.aspect_ratios.is_empty() || self.aspect_ratios.iter().any(|&r| !(r > 0.0)) {
            return bad("head.aspect_ratios must be positive and non-empty".into());
        }
        for (name, v) in [
            ("rpn_fg_iou", self.rpn_fg_iou),
            ("rpn_bg_iou", self.rpn_bg_iou),
            ("roi_fg_iou", self.roi_fg_iou),
            ("nms_threshold", self.nms_threshold),
            ("rpn_nms_threshold", self.rpn_nms_threshold),
            ("rpn_positive_fraction", self.rpn_positive_fraction),
            ("roi_positive_fraction", self.roi_positive_fraction),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return bad(format!("head.{name} = {v} outside [0, 1]"));
            }
        }
        if self.rpn_bg_iou > self.rpn_fg_iou {
            return bad("head.rpn_bg_iou exceeds head.rpn_fg_iou".into());
        }
        if !(self.score_threshold > 0.0 && self.score_threshold <= 1.0) {
            return bad(format!("head.score_threshold = {} outside (0, 1]", self.score_threshold));
        }
        if self.representation_dim == 0 || self.roi_output_size == 0 || self.roi_sampling_ratio == 0 {
            return bad("head dimensions must be positive".into());
        }
        if self.loss_weight_verb < 0.0 || self.loss_weight_ttc < 0.0 {
            return bad("head loss weights must be non-negative".into());
        }
        if !(self.canonical_box_size > 0.0) || !(2..=5).contains(&self.canonical_level) {
            return bad("head.canonical_box_size must be positive and canonical_level in 2..=5".into());
        }
        if self.oracle_jitter < 0.0 || self.oracle_jitter >= 0.5 {
            return bad(format!("head.oracle_jitter = {} outside [0, 0.5)", self.oracle_jitter));
        }
        Ok(())
    }
}

/// A candidate region in still-frame pixels.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Proposal {
    pub bbox: [f64; 4],
    pub objectness: f64,
}

fn boxes_of(anns: &[InteractionAnnotation]) -> Vec<[f64; 4]> {
    anns.iter().map(|a| a.bbox.to_array()).collect()
}

/// Per-level raw RPN outputs and their anchors.
pub struct RpnOutput {
    /// `[A, H, W]` logits per level.
    pub objectness: Vec<Var>,
    /// `[4A, H, W]` deltas per level.
    pub deltas: Vec<Var>,
    /// Anchors per level, ordered `(anchor, y, x)`.
    pub anchors: Vec<Vec<[f64; 4]>>,
}

/// Shared 3×3 conv followed by 1×1 objectness and delta convs.
#[derive(Clone, Debug)]
pub struct Rpn {
    pub conv: Conv,
    pub cls: Conv,
    pub bbox: Conv,
    pub num_anchors: usize,
}

impl Rpn {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, channels: usize, num_anchors: usize, rng: &mut R) -> Self {
        let conv = Conv::new(store, "rpn.conv", channels, channels, ConvGeometry::conv2d(3, 1, 1), Init::Normal(0.01), rng);
        let g1 = ConvGeometry::conv2d(1, 1, 0);
        let cls = Conv::new(store, "rpn.cls", channels, num_anchors, g1, Init::Normal(0.01), rng);
        let bbox = Conv::new(store, "rpn.bbox", channels, 4 * num_anchors, g1, Init::Normal(0.01), rng);
        Self {
            conv,
            cls,
            bbox,
            num_anchors,
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, pyramid: &FeaturePyramid, cfg: &HeadConfig) -> Result<RpnOutput> {
        let mut out = RpnOutput {
            objectness: Vec::new(),
            deltas: Vec::new(),
            anchors: Vec::new(),
        };
        for (i, &level) in pyramid.levels.iter().enumerate() {
            let (_, h, w) = g.value(level).chw();
            let t = self.conv.forward(g, store, level);
            let t = g.relu(t);
            out.objectness.push(self.cls.forward(g, store, t));
            out.deltas.push(self.bbox.forward(g, store, t));
            out.anchors
                .push(level_anchors(cfg.anchor_sizes[i], &cfg.aspect_ratios, pyramid.strides[i], h, w));
        }
        if out.anchors.iter().all(Vec::is_empty) {
            return Err(Error::Shape("no anchors fit the image".into()));
        }
        Ok(out)
    }

    /// Decoded, clipped, NMS-filtered proposals (no gradient).
    pub fn proposals(&self, g: &Graph, out: &RpnOutput, image_hw: (usize, usize), training: bool, cfg: &HeadConfig) -> Vec<Proposal> {
        let coder = BoxCoder::new([1.0; 4]);
        let (pre, post) = if training {
            (cfg.rpn_pre_nms_top_n_train, cfg.rpn_post_nms_top_n_train)
        } else {
            (cfg.rpn_pre_nms_top_n_test, cfg.rpn_post_nms_top_n_test)
        };
        let (ih, iw) = (image_hw.0 as f64, image_hw.1 as f64);
        let mut boxes = Vec::new();
        let mut scores = Vec::new();
        let mut levels = Vec::new();
        for (l, anchors) in out.anchors.iter().enumerate() {
            let obj = g.value(out.objectness[l]).data();
            let del = g.value(out.deltas[l]).data();
            let hw = anchors.len() / self.num_anchors;
            for &i in order_by_score(obj).iter().take(pre) {
                let (a, pos) = (i / hw, i % hw);
                let d = [0, 1, 2, 3].map(|k| del[(4 * a + k) * hw + pos]);
                let b = clip_box(&coder.decode(&anchors[i], &d), iw, ih);
                if b[2] - b[0] < 1e-3 || b[3] - b[1] < 1e-3 || !obj[i].is_finite() {
                    continue;
                }
                boxes.push(b);
                scores.push(obj[i]);
                levels.push(l);
            }
        }
        batched_nms(&boxes, &scores, &levels, cfg.rpn_nms_threshold)
            .into_iter()
            .take(post)
            .map(|i| Proposal {
                bbox: boxes[i],
                objectness: scores[i],
            })
            .collect()
    }

    /// Objectness and box losses over a balanced anchor sample.
    pub fn losses<R: Rng + ?Sized>(
        &self,
        g: &mut Graph,
        out: &RpnOutput,
        gts: &[[f64; 4]],
        cfg: &HeadConfig,
        rng: &mut R,
    ) -> (Var, Var) {
        let coder = BoxCoder::new([1.0; 4]);
        let mut all = Vec::new();
        let mut index = Vec::new();
        for (l, anchors) in out.anchors.iter().enumerate() {
            for (i, a) in anchors.iter().enumerate() {
                all.push(*a);
                index.push((l, i));
            }
        }
        let states = match_boxes(&all, gts, cfg.rpn_fg_iou, cfg.rpn_bg_iou, true);
        let (pos, neg) = sample_balanced(&states, cfg.rpn_batch_size_per_image, cfg.rpn_positive_fraction, rng);
        let norm = (pos.len() + neg.len()).max(1) as f64;
        let levels = out.anchors.len();
        let mut obj_targets: Vec<Vec<(usize, f64)>> = vec![Vec::new(); levels];
        let mut box_targets: Vec<Vec<(usize, f64)>> = vec![Vec::new(); levels];
        for &k in &pos {
            let (l, i) = index[k];
            obj_targets[l].push((i, 1.0));
            let MatchState::Foreground(j) = states[k] else { unreachable!() };
            let t = coder.encode(&all[k], &gts[j]);
            let hw = out.anchors[l].len() / self.num_anchors;
            let (a, p) = (i / hw, i % hw);
            for (c, &v) in t.iter().enumerate() {
                box_targets[l].push(((4 * a + c) * hw + p, v));
            }
        }
        for &k in &neg {
            let (l, i) = index[k];
            obj_targets[l].push((i, 0.0));
        }
        let mut obj_terms = Vec::new();
        let mut box_terms = Vec::new();
        for l in 0..levels {
            if !obj_targets[l].is_empty() {
                obj_terms.push((g.bce_with_logits(out.objectness[l], &obj_targets[l], norm), 1.0));
            }
            if !box_targets[l].is_empty() {
                box_terms.push((g.smooth_l1(out.deltas[l], &box_targets[l], cfg.rpn_smooth_l1_beta, norm), 1.0));
            }
        }
        let obj = g.weighted_sum(&obj_terms);
        let bx = g.weighted_sum(&box_terms);
        (obj, bx)
    }
}

/// Ground-truth boxes jittered by up to `jitter · (w, h)` per coordinate.
pub fn oracle_proposals<R: Rng + ?Sized>(
    gts: &[[f64; 4]],
    jitter: f64,
    copies: usize,
    image_hw: (usize, usize),
    rng: &mut R,
) -> Vec<Proposal> {
    let (ih, iw) = (image_hw.0 as f64, image_hw.1 as f64);
    let mut out = Vec::new();
    for gt in gts {
        for _ in 0..copies {
            let (w, h) = (gt[2] - gt[0], gt[3] - gt[1]);
            let mut b = *gt;
            if jitter > 0.0 {
                for (k, v) in b.iter_mut().enumerate() {
                    let s = if k % 2 == 0 { w } else { h };
                    *v += rng.gen_range(-jitter..=jitter) * s;
                }
            }
            let b = clip_box(&b, iw, ih);
            if b[2] - b[0] > 1e-3 && b[3] - b[1] > 1e-3 {
                out.push(Proposal { bbox: b, objectness: 1.0 });
            }
        }
    }
    out
}

/// How global context enters the RoI features.
#[derive(Clone, Debug)]
pub enum GlobalLocalFusion {
    /// Local features are used as they are.
    Identity,
    /// `[global ‖ local] → fc1 → relu → fc2`, optionally added to local.
    Mlp { fc1: Linear, fc2: Linear, use_global: bool, residual: bool },
    /// `local + proj(global)`.
    Sum { proj: Linear },
}

impl GlobalLocalFusion {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, variant: HeadVariant, global_dim: usize, dim: usize, rng: &mut R) -> Self {
        let mlp = |store: &mut ParamStore, rng: &mut R, use_global: bool, residual: bool| {
            let in_dim = if use_global { global_dim + dim } else { dim };
            GlobalLocalFusion::Mlp {
                fc1: Linear::new(store, "fusion.fc1", in_dim, dim, Init::KaimingNormal, rng),
                fc2: Linear::new(store, "fusion.fc2", dim, dim, Init::Normal(0.01), rng),
                use_global,
                residual,
            }
        };
        match variant {
            HeadVariant::NounsOnly | HeadVariant::StandardHead => GlobalLocalFusion::Identity,
            HeadVariant::Proposed | HeadVariant::NoVerbNounProduct => mlp(store, rng, true, true),
            HeadVariant::NoGlobal => mlp(store, rng, false, true),
            HeadVariant::NoResidual => mlp(store, rng, true, false),
            HeadVariant::SumFusion => GlobalLocalFusion::Sum {
                proj: Linear::new(store, "fusion.proj", global_dim, dim, Init::Normal(0.01), rng),
            },
        }
    }
}

/// Spatial mean of the top non-pooled pyramid level as a `[1, C]` row.
pub fn global_context(g: &mut Graph, pyramid: &FeaturePyramid) -> Var {
    g.global_avg_pool(pyramid.top())
}

/// Fuses `[R, D]` local features with a `[1, G]` global row.
pub fn fuse_global_local(g: &mut Graph, store: &ParamStore, local: Var, global: Var, fusion: &GlobalLocalFusion) -> Result<Var> {
    let rows = g.value(local).shape()[0];
    match fusion {
        GlobalLocalFusion::Identity => Ok(local),
        GlobalLocalFusion::Mlp {
            fc1,
            fc2,
            use_global,
            residual,
        } => {
            let input = if *use_global {
                let rep = g.repeat_rows(global, rows);
                g.concat_cols(rep, local)
            } else {
                local
            };
            let width = g.value(input).shape()[1];
            if width != fc1.in_features {
                return Err(Error::Shape(format!(
                    "fusion input has {width} features, first layer expects {}",
                    fc1.in_features
                )));
            }
            let h = fc1.forward(g, store, input);
            let h = g.relu(h);
            let m = fc2.forward(g, store, h);
            if *residual {
                if g.value(m).shape() != g.value(local).shape() {
                    return Err(Error::Shape("fusion output does not match local features".into()));
                }
                Ok(g.add(local, m))
            } else {
                Ok(m)
            }
        }
        GlobalLocalFusion::Sum { proj } => {
            let gw = g.value(global).shape()[1];
            if gw != proj.in_features {
                return Err(Error::Shape(format!("global vector has {gw} features, projection expects {}", proj.in_features)));
            }
            let p = proj.forward(g, store, global);
            let p = g.repeat_rows(p, rows);
            Ok(g.add(local, p))
        }
    }
}

/// Recorded outputs of the predictors for a batch of RoIs.
#[derive(Clone, Copy, Debug)]
pub struct HeadVars {
    /// `[R, num_nouns]`.
    pub noun_logits: Var,
    /// `[R, 4 · num_nouns]`.
    pub box_deltas: Var,
    /// `[R, num_verbs]`.
    pub verb_logits: Option<Var>,
    /// `[R, 1]`, after softplus.
    pub ttc: Option<Var>,
}

/// Per-RoI probabilities and regressions.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadOutput {
    pub p_noun: Vec<f64>,
    pub p_verb: Option<Vec<f64>>,
    /// One delta vector per noun class, background included.
    pub box_deltas: Vec<[f64; 4]>,
    pub ttc: Option<f64>,
}

impl HeadVars {
    pub fn outputs(&self, g: &Graph) -> Vec<HeadOutput> {
        let nl = g.value(self.noun_logits);
        let rows = nl.shape()[0];
        let bd = g.value(self.box_deltas);
        (0..rows)
            .map(|r| HeadOutput {
                p_noun: softmax(nl.row(r)),
                p_verb: self.verb_logits.map(|v| softmax(g.value(v).row(r))),
                box_deltas: bd.row(r).chunks(4).map(|c| [c[0], c[1], c[2], c[3]]).collect(),
                ttc: self.ttc.map(|t| g.value(t).data()[r]),
            })
            .collect()
    }
}

/// Box head, fusion and predictors.
#[derive(Clone, Debug)]
pub struct RoiHeads {
    pub variant: HeadVariant,
    pub fc6: Linear,
    pub fc7: Linear,
    pub fusion: GlobalLocalFusion,
    pub cls: Linear,
    pub bbox: Linear,
    pub verb: Option<Linear>,
    pub ttc: Option<Linear>,
    pub num_nouns: usize,
    pub num_verbs: usize,
}

impl RoiHeads {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        cfg: &HeadConfig,
        channels: usize,
        num_nouns: usize,
        num_verbs: usize,
        rng: &mut R,
    ) -> Self {
        let d = cfg.representation_dim;
        let pooled = channels * cfg.roi_output_size * cfg.roi_output_size;
        let fc6 = Linear::new(store, "box_head.fc6", pooled, d, Init::KaimingNormal, rng);
        let fc7 = Linear::new(store, "box_head.fc7", d, d, Init::KaimingNormal, rng);
        let cls = Linear::new(store, "predictor.noun", d, num_nouns, Init::Normal(0.01), rng);
        let bbox = Linear::new(store, "predictor.box", d, 4 * num_nouns, Init::Normal(0.001), rng);
        let (verb, ttc) = if cfg.ablation.predicts_verb_and_ttc() {
            (
                Some(Linear::new(store, "predictor.verb", d, num_verbs, Init::Normal(0.01), rng)),
                Some(Linear::new(store, "predictor.ttc", d, 1, Init::Normal(0.01), rng)),
            )
        } else {
            (None, None)
        };
        let fusion = GlobalLocalFusion::new(store, cfg.ablation, channels, d, rng);
        Self {
            variant: cfg.ablation,
            fc6,
            fc7,
            fusion,
            cls,
            bbox,
            verb,
            ttc,
            num_nouns,
            num_verbs,
        }
    }

    /// Pyramid level index (0 = stride 4) for a box.
    pub fn level_for(bbox: &[f64; 4], cfg: &HeadConfig) -> usize {
        let scale = box_area(bbox).sqrt();
        let k = (cfg.canonical_level as f64 + (scale / cfg.canonical_box_size).log2() + 1e-6).floor();
        let k = if k.is_finite() { k.clamp(2.0, 5.0) } else { 2.0 };
        k as usize - 2
    }

    /// `[R, D]` local features for `boxes`.
    pub fn extract_roi_features(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        pyramid: &FeaturePyramid,
        boxes: &[[f64; 4]],
        cfg: &HeadConfig,
    ) -> Var {
        let rois: Vec<RoiSpec> = boxes
            .iter()
            .map(|b| {
                let level = Self::level_for(b, cfg);
                RoiSpec {
                    level,
                    bbox: *b,
                    scale: 1.0 / pyramid.strides[level] as f64,
                }
            })
            .collect();
        let pooled = g.roi_align(
            &pyramid.levels[..4],
            &rois,
            RoiAlignConfig {
                output_size: cfg.roi_output_size,
                sampling_ratio: cfg.roi_sampling_ratio,
            },
        );
        let h = self.fc6.forward(g, store, pooled);
        let h = g.relu(h);
        let h = self.fc7.forward(g, store, h);
        g.relu(h)
    }

    /// Linear predictors over fused (and, for the standard head, local) features.
    pub fn predict_heads(&self, g: &mut Graph, store: &ParamStore, fused: Var) -> HeadVars {
        let noun_logits = self.cls.forward(g, store, fused);
        let box_deltas = self.bbox.forward(g, store, fused);
        let verb_logits = self.verb.as_ref().map(|l| l.forward(g, store, fused));
        let ttc = self.ttc.as_ref().map(|l| {
            let z = l.forward(g, store, fused);
            g.softplus(z)
        });
        HeadVars {
            noun_logits,
            box_deltas,
            verb_logits,
            ttc,
        }
    }

    /// Local features → fusion → predictors.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, pyramid: &FeaturePyramid, boxes: &[[f64; 4]], cfg: &HeadConfig) -> Result<HeadVars> {
        let local = self.extract_roi_features(g, store, pyramid, boxes, cfg);
        let fused = match self.fusion {
            GlobalLocalFusion::Identity => local,
            _ => {
                let global = global_context(g, pyramid);
                fuse_global_local(g, store, local, global, &self.fusion)?
            }
        };
        Ok(self.predict_heads(g, store, fused))
    }
}

/// Predictions for one RoI: one candidate per non-background noun whose
/// score reaches `threshold`.
///
/// With `verb_noun_product` the score is `p(n) · max_{v>0} p(v)`,
/// otherwise `p(n)`. Without a verb distribution the verb is 1 and the
/// ttc falls back to `1.0`.
pub fn score_and_emit(
    out: &HeadOutput,
    proposal: &[f64; 4],
    coder: &BoxCoder,
    image_hw: (usize, usize),
    verb_noun_product: bool,
    threshold: f64,
) -> Vec<StaPrediction> {
    let (verb_id, p_verb_max) = match &out.p_verb {
        Some(p) => {
            let mut best = (1, p.get(1).copied().unwrap_or(0.0));
            for (v, &pv) in p.iter().enumerate().skip(2) {
                if pv > best.1 {
                    best = (v, pv);
                }
            }
            best
        }
        None => (1, 1.0),
    };
    let ttc = out.ttc.unwrap_or(1.0);
    let (ih, iw) = (image_hw.0 as f64, image_hw.1 as f64);
    let mut preds = Vec::new();
    for n in 1..out.p_noun.len() {
        let score = if verb_noun_product && out.p_verb.is_some() {
            out.p_noun[n] * p_verb_max
        } else {
            out.p_noun[n]
        };
        if !(score >= threshold) || !(ttc > 0.0) {
            continue;
        }
        let b = clip_box(&coder.decode(proposal, &out.box_deltas[n]), iw, ih);
        let Ok(bbox) = BoundingBox::from_array(b) else { continue };
        if bbox.width() < 1e-2 || bbox.height() < 1e-2 {
            continue;
        }
        preds.push(StaPrediction {
            bbox,
            noun_id: n,
            verb_id,
            ttc,
            score: score.min(1.0),
        });
    }
    preds
}

/// Per-class NMS, then the highest-scored `max_detections`.
pub fn postprocess(preds: Vec<StaPrediction>, nms_threshold: f64, max_detections: usize) -> Vec<StaPrediction> {
    let boxes: Vec<[f64; 4]> = preds.iter().map(|p| p.bbox.to_array()).collect();
    let scores: Vec<f64> = preds.iter().map(|p| p.score).collect();
    let classes: Vec<usize> = preds.iter().map(|p| p.noun_id).collect();
    batched_nms(&boxes, &scores, &classes, nms_threshold)
        .into_iter()
        .take(max_detections)
        .map(|i| preds[i])
        .collect()
}

/// Supervision for a batch of sampled RoIs.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RoiTargets {
    /// Noun label per RoI (0 for background).
    pub nouns: Vec<usize>,
    /// Verb label per RoI (0 for background).
    pub verbs: Vec<usize>,
    /// `(row, encoded deltas)` for foreground RoIs.
    pub boxes: Vec<(usize, [f64; 4])>,
    /// `(row, ttc)` for foreground RoIs.
    pub ttc: Vec<(usize, f64)>,
}

/// Builds RoI targets from matched proposals.
pub fn roi_targets(
    proposals: &[[f64; 4]],
    matches: &[Option<usize>],
    gts: &[InteractionAnnotation],
    coder: &BoxCoder,
) -> RoiTargets {
    let mut t = RoiTargets::default();
    for (r, (p, m)) in proposals.iter().zip(matches).enumerate() {
        match m {
            Some(j) => {
                let gt = &gts[*j];
                t.nouns.push(gt.noun_id);
                t.verbs.push(gt.verb_id);
                t.boxes.push((r, coder.encode(p, &gt.bbox.to_array())));
                t.ttc.push((r, gt.ttc));
            }
            None => {
                t.nouns.push(0);
                t.verbs.push(0);
            }
        }
    }
    t
}

/// The six loss terms and their weighted total.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub rpn_objectness: Var,
    pub rpn_box: Var,
    pub noun: Var,
    pub box_reg: Var,
    pub verb: Var,
    pub ttc: Var,
    pub total: Var,
}

/// Scalar values of [`LossVars`].
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossValues {
    pub rpn_objectness: f64,
    pub rpn_box: f64,
    pub noun: f64,
    pub box_reg: f64,
    pub verb: f64,
    pub ttc: f64,
    pub total: f64,
}

impl LossVars {
    pub fn values(&self, g: &Graph) -> LossValues {
        let v = |x: Var| g.value(x).item();
        LossValues {
            rpn_objectness: v(self.rpn_objectness),
            rpn_box: v(self.rpn_box),
            noun: v(self.noun),
            box_reg: v(self.box_reg),
            verb: v(self.verb),
            ttc: v(self.ttc),
            total: v(self.total),
        }
    }
}

impl LossValues {
    /// Weighted sum of the components.
    pub fn weighted_total(&self, verb_weight: f64, ttc_weight: f64) -> f64 {
        self.rpn_objectness + self.rpn_box + self.noun + self.box_reg + verb_weight * self.verb + ttc_weight * self.ttc
    }

    pub fn scale(&mut self, f: f64) {
        for v in [
            &mut self.rpn_objectness,
            &mut self.rpn_box,
            &mut self.noun,
            &mut self.box_reg,
            &mut self.verb,
            &mut self.ttc,
            &mut self.total,
        ] {
            *v *= f;
        }
    }

    pub fn accumulate(&mut self, o: &LossValues) {
        self.rpn_objectness += o.rpn_objectness;
        self.rpn_box += o.rpn_box;
        self.noun += o.noun;
        self.box_reg += o.box_reg;
        self.verb += o.verb;
        self.ttc += o.ttc;
        self.total += o.total;
    }
}

/// RoI-head losses plus the weighted total with the given RPN terms.
///
/// Noun, box and verb terms are normalised by the number of sampled RoIs;
/// ttc by the number of foreground RoIs. Missing verb/ttc predictors give
/// exact zeros.
pub fn compute_losses(
    g: &mut Graph,
    heads: &HeadVars,
    targets: &RoiTargets,
    rpn: (Var, Var),
    cfg: &HeadConfig,
) -> LossVars {
    let n = targets.nouns.len();
    let norm = n.max(1) as f64;
    let noun = g.softmax_cross_entropy(heads.noun_logits, &targets.nouns, norm);
    let num_nouns = g.value(heads.noun_logits).shape()[1];
    let mut box_t = Vec::with_capacity(4 * targets.boxes.len());
    for (r, d) in &targets.boxes {
        let class = targets.nouns[*r];
        for (k, &v) in d.iter().enumerate() {
            box_t.push((r * 4 * num_nouns + 4 * class + k, v));
        }
    }
    let box_reg = g.smooth_l1(heads.box_deltas, &box_t, cfg.smooth_l1_beta, norm);
    let verb = match heads.verb_logits {
        Some(v) => g.softmax_cross_entropy(v, &targets.verbs, norm),
        None => g.input(Tensor::scalar(0.0)),
    };
    let ttc = match heads.ttc {
        Some(t) => {
            let fg = targets.ttc.len().max(1) as f64;
            g.smooth_l1(t, &targets.ttc, cfg.smooth_l1_beta, fg)
        }
        None => g.input(Tensor::scalar(0.0)),
    };
    let (rpn_objectness, rpn_box) = rpn;
    let total = g.weighted_sum(&[
        (rpn_objectness, 1.0),
        (rpn_box, 1.0),
        (noun, 1.0),
        (box_reg, 1.0),
        (verb, cfg.loss_weight_verb),
        (ttc, cfg.loss_weight_ttc),
    ]);
    LossVars {
        rpn_objectness,
        rpn_box,
        noun,
        box_reg,
        verb,
        ttc,
        total,
    }
}

/// Matches proposals to ground truth at `fg_iou` and samples a balanced
/// RoI batch. Returns the sampled boxes and their matched ground truth.
pub fn sample_rois<R: Rng + ?Sized>(
    proposals: &[[f64; 4]],
    gts: &[InteractionAnnotation],
    cfg: &HeadConfig,
    rng: &mut R,
) -> (Vec<[f64; 4]>, Vec<Option<usize>>) {
    let gt_boxes = boxes_of(gts);
    let states = match_boxes(proposals, &gt_boxes, cfg.roi_fg_iou, cfg.roi_fg_iou, false);
    let (pos, neg) = sample_balanced(&states, cfg.roi_batch_size_per_image, cfg.roi_positive_fraction, rng);
    let mut boxes = Vec::with_capacity(pos.len() + neg.len());
    let mut matches = Vec::with_capacity(pos.len() + neg.len());
    for &i in &pos {
        let MatchState::Foreground(j) = states[i] else { unreachable!() };
        boxes.push(proposals[i]);
        matches.push(Some(j));
    }
    for &i in &neg {
        boxes.push(proposals[i]);
        matches.push(None);
    }
    (boxes, matches)
}

pub fn gt_boxes(anns: &[InteractionAnnotation]) -> Vec<[f64; 4]> {
    boxes_of(anns)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::softplus;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toy_cfg(variant: HeadVariant) -> HeadConfig {
        HeadConfig {
            ablation: variant,
            representation_dim: 6,
            roi_output_size: 2,
            roi_sampling_ratio: 1,
            anchor_sizes: vec![8.0, 16.0, 32.0, 64.0, 128.0],
            aspect_ratios: vec![1.0],
            ..HeadConfig::default()
        }
    }

    fn pyramid(g: &mut Graph, c: usize, size: usize, rng: &mut ChaCha8Rng) -> FeaturePyramid {
        let mut levels = Vec::new();
        let mut s = size / 4;
        for _ in 0..5 {
            levels.push(g.input(Tensor::from_fn(&[c, s.max(1), s.max(1)], |_| rng.gen_range(-1.0..1.0))));
            s = s.div_ceil(2);
        }
        FeaturePyramid {
            levels,
            strides: vec![4, 8, 16, 32, 64],
        }
    }

    fn out(p_noun: Vec<f64>, p_verb: Option<Vec<f64>>) -> HeadOutput {
        let n = p_noun.len();
        HeadOutput {
            p_noun,
            p_verb,
            box_deltas: vec![[0.0; 4]; n],
            ttc: Some(0.8),
        }
    }

    const PROPOSAL: [f64; 4] = [10.0, 10.0, 30.0, 40.0];

    #[test]
    fn score_is_noun_times_best_real_verb() {
        let o = out(vec![0.1, 0.7, 0.2], Some(vec![0.2, 0.5, 0.3]));
        let coder = BoxCoder::new([10.0, 10.0, 5.0, 5.0]);
        let p = score_and_emit(&o, &PROPOSAL, &coder, (100, 100), true, 0.05);
        let cup = p.iter().find(|p| p.noun_id == 1).unwrap();
        assert_eq!(cup.score, 0.7 * 0.5);
        assert_eq!(cup.verb_id, 1);
        assert_eq!(cup.bbox.to_array(), PROPOSAL);
        assert_eq!(p.len(), 2);
    }

    #[test]
    fn background_verb_suppresses_everything() {
        let o = out(vec![0.0, 1.0], Some(vec![1.0, 0.0, 0.0]));
        let coder = BoxCoder::new([10.0, 10.0, 5.0, 5.0]);
        assert!(score_and_emit(&o, &PROPOSAL, &coder, (100, 100), true, 0.05).is_empty());
    }

    #[test]
    fn threshold_is_inclusive() {
        let coder = BoxCoder::new([10.0, 10.0, 5.0, 5.0]);
        let at = out(vec![0.95, 0.05], None);
        assert_eq!(score_and_emit(&at, &PROPOSAL, &coder, (100, 100), false, 0.05).len(), 1);
        let below = out(vec![0.950001, 0.049999], None);
        assert!(score_and_emit(&below, &PROPOSAL, &coder, (100, 100), false, 0.05).is_empty());
    }

    #[test]
    fn softplus_ttc_values() {
        assert!((softplus(0.0) - std::f64::consts::LN_2).abs() < 1e-15);
        let tiny = softplus(-20.0);
        assert!(tiny > 0.0 && (tiny - 2.061_153_6e-9).abs() < 1e-15);
    }

    #[test]
    fn zero_logits_give_uniform_distributions() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cfg = toy_cfg(HeadVariant::Proposed);
        let mut store = ParamStore::new();
        let heads = RoiHeads::new(&mut store, &cfg, 3, 4, 3, &mut rng);
        for l in [&heads.cls, heads.verb.as_ref().unwrap(), heads.ttc.as_ref().unwrap()] {
            for id in l.params() {
                let shape = store.get(id).shape().to_vec();
                *store.get_mut(id) = Tensor::zeros(&shape);
            }
        }
        let mut g = Graph::new();
        let x = g.input(Tensor::from_fn(&[2, 6], |i| i as f64));
        let v = heads.predict_heads(&mut g, &store, x);
        for o in v.outputs(&g) {
            assert!(o.p_noun.iter().all(|&p| (p - 0.25).abs() < 1e-15));
            assert!(o.p_verb.unwrap().iter().all(|&p| (p - 1.0 / 3.0).abs() < 1e-15));
            assert!((o.ttc.unwrap() - std::f64::consts::LN_2).abs() < 1e-15);
        }
    }

    #[test]
    fn constant_pyramid_gives_identical_roi_features() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cfg = toy_cfg(HeadVariant::Proposed);
        let mut store = ParamStore::new();
        let heads = RoiHeads::new(&mut store, &cfg, 3, 4, 3, &mut rng);
        let mut g = Graph::new();
        let levels = (0..5).map(|i| g.input(Tensor::full(&[3, 16 >> i.min(4), 16 >> i.min(4)], 0.3))).collect();
        let p = FeaturePyramid { levels, strides: vec![4, 8, 16, 32, 64] };
        let boxes = [[2.0, 2.0, 20.0, 30.0], [10.0, 5.0, 40.0, 12.0], [0.0, 0.0, 60.0, 60.0]];
        let f = heads.extract_roi_features(&mut g, &store, &p, &boxes, &cfg);
        let t = g.value(f);
        for r in 1..3 {
            for (a, b) in t.row(0).iter().zip(t.row(r)) {
                assert!((a - b).abs() < 1e-12);
            }
        }
        let none = heads.extract_roi_features(&mut g, &store, &p, &[], &cfg);
        assert_eq!(g.value(none).shape(), &[0, 6]);
    }

    #[test]
    fn global_context_is_the_spatial_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut g = Graph::new();
        let p = pyramid(&mut g, 3, 64, &mut rng);
        let gc = global_context(&mut g, &p);
        let top = g.value(p.levels[3]).clone();
        let (c, h, w) = top.chw();
        for ch in 0..c {
            let mut sum = 0.0;
            for y in 0..h {
                for x in 0..w {
                    sum += top.at(&[ch, y, x]);
                }
            }
            assert!((g.value(gc).data()[ch] - sum / (h * w) as f64).abs() < 1e-14);
        }
        let mut one_hot = Tensor::zeros(&[2, 4, 5]);
        one_hot.set(&[1, 2, 3], 1.0);
        let v = g.input(one_hot);
        let pooled = g.global_avg_pool(v);
        assert_eq!(g.value(pooled).data(), &[0.0, 1.0 / 20.0]);
    }

    fn zero_fusion(store: &mut ParamStore, f: &GlobalLocalFusion) {
        if let GlobalLocalFusion::Mlp { fc1, fc2, .. } = f {
            for id in fc1.params().into_iter().chain(fc2.params()) {
                let shape = store.get(id).shape().to_vec();
                *store.get_mut(id) = Tensor::zeros(&shape);
            }
        }
    }

    #[test]
    fn zero_fusion_is_the_residual_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cfg = toy_cfg(HeadVariant::Proposed);
        let mut store = ParamStore::new();
        let heads = RoiHeads::new(&mut store, &cfg, 3, 4, 3, &mut rng);
        zero_fusion(&mut store, &heads.fusion);
        let mut g = Graph::new();
        let local = g.input(Tensor::from_fn(&[3, 6], |i| (i as f64).sin()));
        let global = g.input(Tensor::from_fn(&[1, 3], |i| i as f64));
        let fused = fuse_global_local(&mut g, &store, local, global, &heads.fusion).unwrap();
        assert_eq!(g.value(fused), g.value(local));
    }

    #[test]
    fn fusion_dimension_mismatch_is_an_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let f = GlobalLocalFusion::new(&mut store, HeadVariant::Proposed, 3, 6, &mut rng);
        let mut g = Graph::new();
        let local = g.input(Tensor::zeros(&[2, 6]));
        let global = g.input(Tensor::zeros(&[1, 4]));
        assert!(fuse_global_local(&mut g, &store, local, global, &f).is_err());
    }

    #[test]
    fn reference_fusion_dimensions() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let f = GlobalLocalFusion::new(&mut store, HeadVariant::Proposed, 256, 1024, &mut rng);
        let GlobalLocalFusion::Mlp { fc1, fc2, .. } = f else { panic!() };
        assert_eq!((fc1.in_features, fc1.out_features), (1280, 1024));
        assert_eq!((fc2.in_features, fc2.out_features), (1024, 1024));
    }

    #[test]
    fn ttc_smooth_l1_closed_form_and_perfect_verbs() {
        let mut g = Graph::new();
        let t = g.input(Tensor::from_vec(&[1, 1], vec![1.0]));
        let l = g.smooth_l1(t, &[(0, 0.5)], 1.0, 1.0);
        assert_eq!(g.value(l).item(), 0.125);
        let logits = g.input(Tensor::from_vec(&[1, 3], vec![-1e3, 1e3, -1e3]));
        let ce = g.softmax_cross_entropy(logits, &[1], 1.0);
        assert_eq!(g.value(ce).item(), 0.0);
    }

    fn toy_losses(
        variant: HeadVariant,
        lambda_v: f64,
    ) -> (Graph, LossVars, HeadConfig) {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut cfg = toy_cfg(variant);
        cfg.loss_weight_verb = lambda_v;
        let mut store = ParamStore::new();
        let heads = RoiHeads::new(&mut store, &cfg, 3, 4, 3, &mut rng);
        let mut g = Graph::new();
        let p = pyramid(&mut g, 3, 64, &mut rng);
        let boxes = [[2.0, 2.0, 20.0, 30.0], [10.0, 5.0, 40.0, 12.0]];
        let hv = heads.forward(&mut g, &store, &p, &boxes, &cfg).unwrap();
        let targets = RoiTargets {
            nouns: vec![2, 0],
            verbs: vec![1, 0],
            boxes: vec![(0, [0.1, -0.2, 0.3, 0.05])],
            ttc: vec![(0, 0.5)],
        };
        let r1 = g.input(Tensor::scalar(0.3));
        let r2 = g.input(Tensor::scalar(0.2));
        let l = compute_losses(&mut g, &hv, &targets, (r1, r2), &cfg);
        (g, l, cfg)
    }

    #[test]
    fn total_is_the_weighted_sum_of_terms() {
        for lv in [0.1, 0.0] {
            let (g, l, cfg) = toy_losses(HeadVariant::Proposed, lv);
            let v = l.values(&g);
            let want = v.rpn_objectness + v.rpn_box + v.noun + v.box_reg + lv * v.verb + cfg.loss_weight_ttc * v.ttc;
            assert!((v.total - want).abs() < 1e-12);
            assert!((v.total - v.weighted_total(lv, cfg.loss_weight_ttc)).abs() < 1e-12);
            assert!(v.verb > 0.0 && v.ttc > 0.0);
        }
    }

    #[test]
    fn nouns_only_has_exactly_zero_verb_and_ttc_loss() {
        let (g, l, _) = toy_losses(HeadVariant::NounsOnly, 0.1);
        let v = l.values(&g);
        assert_eq!(v.verb, 0.0);
        assert_eq!(v.ttc, 0.0);
    }

    #[test]
    fn every_variant_runs_and_has_finite_losses() {
        for v in HeadVariant::ALL {
            let (g, l, _) = toy_losses(v, 0.1);
            assert!(l.values(&g).total.is_finite(), "{v:?}");
        }
    }

    #[test]
    fn postprocess_suppresses_within_class_and_caps() {
        let b = |x: f64| BoundingBox::new(x, 0.0, x + 10.0, 10.0).unwrap();
        let p = |x: f64, n: usize, s: f64| StaPrediction { bbox: b(x), noun_id: n, verb_id: 1, ttc: 1.0, score: s };
        let preds = vec![p(0.0, 1, 0.9), p(1.0, 1, 0.8), p(1.0, 2, 0.7), p(50.0, 1, 0.6)];
        let kept = postprocess(preds.clone(), 0.5, 100);
        assert_eq!(kept, vec![preds[0], preds[2], preds[3]]);
        assert_eq!(postprocess(preds, 0.5, 2).len(), 2);
    }

    #[test]
    fn oracle_without_jitter_returns_ground_truth() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let gts = [[1.0, 2.0, 11.0, 22.0], [30.0, 30.0, 40.0, 50.0]];
        let p = oracle_proposals(&gts, 0.0, 1, (64, 64), &mut rng);
        assert_eq!(p.iter().map(|p| p.bbox).collect::<Vec<_>>(), gts.to_vec());
    }

    #[test]
    fn rpn_with_zero_objectness_is_deterministic_by_index() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cfg = HeadConfig {
            rpn_post_nms_top_n_test: 10,
            ..toy_cfg(HeadVariant::Proposed)
        };
        let mut store = ParamStore::new();
        let rpn = Rpn::new(&mut store, 3, 1, &mut rng);
        for id in [rpn.cls.weight, rpn.cls.bias, rpn.bbox.weight, rpn.bbox.bias] {
            let shape = store.get(id).shape().to_vec();
            *store.get_mut(id) = Tensor::zeros(&shape);
        }
        let mut g = Graph::new();
        let p = pyramid(&mut g, 3, 64, &mut rng);
        let out = rpn.forward(&mut g, &store, &p, &cfg).unwrap();
        let a = rpn.proposals(&g, &out, (64, 64), false, &cfg);
        let b = rpn.proposals(&g, &out, (64, 64), false, &cfg);
        assert_eq!(a, b);
        assert_eq!(a.len(), 10);
        // Level 0 anchors come first; the first is the clipped anchor at (0, 0).
        assert_eq!(a[0].bbox, [0.0, 0.0, 4.0, 4.0]);
    }

    #[test]
    fn level_mapping_follows_box_scale() {
        let cfg = HeadConfig::default();
        assert_eq!(RoiHeads::level_for(&[0.0, 0.0, 224.0, 224.0], &cfg), 2);
        assert_eq!(RoiHeads::level_for(&[0.0, 0.0, 448.0, 448.0], &cfg), 3);
        assert_eq!(RoiHeads::level_for(&[0.0, 0.0, 20.0, 20.0], &cfg), 0);
        assert_eq!(RoiHeads::level_for(&[0.0, 0.0, 2000.0, 2000.0], &cfg), 3);
    }
}
