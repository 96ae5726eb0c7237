//! The full detector: backbone, pyramid, proposals and interaction head.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::Graph;
use crate::boxes::{clip_box, BoxCoder};
use crate::datamodel::{Sample, StaPrediction};
use crate::error::{Error, Result};
use crate::head::{
    compute_losses, gt_boxes, oracle_proposals, postprocess, roi_targets, sample_rois, score_and_emit, HeadConfig,
    LossVars, ProposalMode, RoiHeads, Rpn,
};
use crate::nn::ParamStore;
use crate::pyramid::{BackboneConfig, StillFastBackbone};

#[derive(Clone, Debug)]
pub struct StillFast {
    pub backbone: StillFastBackbone,
    pub rpn: Rpn,
    pub roi_heads: RoiHeads,
    pub head: HeadConfig,
    pub coder: BoxCoder,
}

impl StillFast {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        backbone: &BackboneConfig,
        head: &HeadConfig,
        clip_len: usize,
        num_nouns: usize,
        num_verbs: usize,
        rng: &mut R,
    ) -> Result<Self> {
        head.validate()?;
        if num_nouns < 2 || num_verbs < 2 {
            return Err(Error::Config("taxonomy needs at least one real noun and one real verb".into()));
        }
        let bb = StillFastBackbone::new(store, backbone, clip_len, rng)?;
        let f = backbone.fpn_channels;
        let rpn = Rpn::new(store, f, head.aspect_ratios.len(), rng);
        let roi_heads = RoiHeads::new(store, head, f, num_nouns, num_verbs, rng);
        Ok(Self {
            backbone: bb,
            rpn,
            roi_heads,
            head: head.clone(),
            coder: BoxCoder::new(head.box_weights),
        })
    }

    /// Records the training forward pass of one sample and its losses.
    pub fn training_losses<R: Rng + ?Sized>(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        sample: &Sample,
        rng: &mut R,
    ) -> Result<LossVars> {
        let cfg = &self.head;
        let pyramid = self.backbone.forward(g, store, &sample.clip)?;
        let hw = sample.clip.still_size();
        let gts = gt_boxes(&sample.annotations);
        let rpn_out = self.rpn.forward(g, store, &pyramid, cfg)?;
        let rpn_losses = self.rpn.losses(g, &rpn_out, &gts, cfg, rng);
        let mut proposals: Vec<[f64; 4]> = match cfg.proposal_mode {
            ProposalMode::LearnedRpn => self
                .rpn
                .proposals(g, &rpn_out, hw, true, cfg)
                .into_iter()
                .map(|p| p.bbox)
                .collect(),
            ProposalMode::OracleJitter => {
                let mut p: Vec<[f64; 4]> = oracle_proposals(&gts, cfg.oracle_jitter, cfg.oracle_copies, hw, rng)
                    .into_iter()
                    .map(|p| p.bbox)
                    .collect();
                p.extend(random_boxes(cfg.oracle_background, hw, rng));
                p
            }
        };
        proposals.extend(gts.iter().copied());
        let (rois, matches) = sample_rois(&proposals, &sample.annotations, cfg, rng);
        let heads = self.roi_heads.forward(g, store, &pyramid, &rois, cfg)?;
        let targets = roi_targets(&rois, &matches, &sample.annotations, &self.coder);
        Ok(compute_losses(g, &heads, &targets, rpn_losses, cfg))
    }

    /// Eval-mode predictions for one sample. Oracle jitter, if any, is
    /// drawn from `jitter_seed` so repeated calls agree.
    pub fn predict(&self, store: &ParamStore, sample: &Sample, jitter_seed: u64) -> Result<Vec<StaPrediction>> {
        let cfg = &self.head;
        let mut g = Graph::new();
        let pyramid = self.backbone.forward(&mut g, store, &sample.clip)?;
        let hw = sample.clip.still_size();
        let proposals: Vec<[f64; 4]> = match cfg.proposal_mode {
            ProposalMode::LearnedRpn => {
                let out = self.rpn.forward(&mut g, store, &pyramid, cfg)?;
                self.rpn.proposals(&g, &out, hw, false, cfg).into_iter().map(|p| p.bbox).collect()
            }
            ProposalMode::OracleJitter => {
                let mut rng = ChaCha8Rng::seed_from_u64(jitter_seed);
                let gts = gt_boxes(&sample.annotations);
                oracle_proposals(&gts, cfg.oracle_jitter, 1, hw, &mut rng)
                    .into_iter()
                    .map(|p| p.bbox)
                    .collect()
            }
        };
        if proposals.is_empty() {
            return Ok(Vec::new());
        }
        let heads = self.roi_heads.forward(&mut g, store, &pyramid, &proposals, cfg)?;
        let product = cfg.ablation.uses_verb_noun_product();
        let mut preds = Vec::new();
        for (out, p) in heads.outputs(&g).iter().zip(&proposals) {
            preds.extend(score_and_emit(out, p, &self.coder, hw, product, cfg.score_threshold));
        }
        Ok(postprocess(preds, cfg.nms_threshold, cfg.detections_per_image))
    }
}

/// Uniform boxes with sides between 1/16 and 1/2 of the image.
fn random_boxes<R: Rng + ?Sized>(n: usize, (h, w): (usize, usize), rng: &mut R) -> Vec<[f64; 4]> {
    let (h, w) = (h as f64, w as f64);
    (0..n)
        .map(|_| {
            let bw = rng.gen_range(w / 16.0..=w / 2.0);
            let bh = rng.gen_range(h / 16.0..=h / 2.0);
            let x = rng.gen_range(0.0..=w - bw);
            let y = rng.gen_range(0.0..=h - bh);
            clip_box(&[x, y, x + bw, y + bh], w, h)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datamodel::{BoundingBox, InteractionAnnotation, ObservedClip};
    use crate::head::HeadVariant;
    use crate::pyramid::FusionMode;
    use crate::tensor::Tensor;

    pub(crate) fn toy_backbone(fusion: FusionMode) -> BackboneConfig {
        BackboneConfig {
            channels_2d: vec![4, 4, 4, 4],
            stem_channels_2d: 4,
            channels_3d: vec![2, 2, 2, 2],
            stem_channels_3d: 2,
            temporal_kernel: 3,
            temporal_strides: vec![1, 1, 1, 1],
            fpn_channels: 4,
            fusion,
        }
    }

    fn toy_head(variant: HeadVariant, mode: ProposalMode) -> HeadConfig {
        HeadConfig {
            ablation: variant,
            proposal_mode: mode,
            representation_dim: 8,
            roi_output_size: 2,
            roi_sampling_ratio: 1,
            anchor_sizes: vec![8.0, 16.0, 32.0, 64.0, 128.0],
            aspect_ratios: vec![1.0],
            rpn_pre_nms_top_n_train: 50,
            rpn_post_nms_top_n_train: 20,
            rpn_pre_nms_top_n_test: 50,
            rpn_post_nms_top_n_test: 20,
            rpn_batch_size_per_image: 32,
            roi_batch_size_per_image: 16,
            ..HeadConfig::default()
        }
    }

    fn sample(seed: u64) -> Sample {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Sample {
            uid: "s".into(),
            clip: ObservedClip {
                still: Tensor::from_fn(&[3, 64, 64], |_| rng.gen_range(-1.0..1.0)),
                video: Tensor::from_fn(&[3, 4, 32, 32], |_| rng.gen_range(-1.0..1.0)),
                timestamp: 1.0,
                frame_rate: 8.0,
                tau_o: 0.5,
            },
            annotations: vec![InteractionAnnotation {
                bbox: BoundingBox::new(10.0, 12.0, 30.0, 40.0).unwrap(),
                noun_id: 1,
                verb_id: 2,
                ttc: 0.75,
            }],
        }
    }

    #[test]
    fn every_variant_and_mode_trains_and_predicts() {
        for fusion in [FusionMode::Combined, FusionMode::No3d, FusionMode::NoPostConv, FusionMode::PostPyramid] {
            for variant in HeadVariant::ALL {
                for mode in [ProposalMode::LearnedRpn, ProposalMode::OracleJitter] {
                    let mut rng = ChaCha8Rng::seed_from_u64(0);
                    let mut store = ParamStore::new();
                    let m = StillFast::new(&mut store, &toy_backbone(fusion), &toy_head(variant, mode), 4, 3, 3, &mut rng)
                        .unwrap();
                    let s = sample(1);
                    let mut g = Graph::new();
                    let l = m.training_losses(&mut g, &store, &s, &mut rng).unwrap();
                    let v = l.values(&g);
                    assert!(v.total.is_finite(), "{fusion:?} {variant:?} {mode:?}");
                    let grads = g.backward(l.total);
                    assert!(g.param_grads(&grads).count() > 0);
                    let p = m.predict(&store, &s, 3).unwrap();
                    for pred in &p {
                        pred.validate().unwrap();
                    }
                    assert_eq!(p, m.predict(&store, &s, 3).unwrap());
                }
            }
        }
    }

    #[test]
    fn tiny_taxonomy_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let head = toy_head(HeadVariant::Proposed, ProposalMode::LearnedRpn);
        assert!(StillFast::new(&mut store, &toy_backbone(FusionMode::Combined), &head, 4, 1, 3, &mut rng).is_err());
    }
}
