//! Box arithmetic shared by the proposal and detection stages.
//!
//! Boxes are `[x1, y1, x2, y2]` arrays in still-frame pixels; widths are
//! `x2 − x1` with no `+1`.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::datamodel::iou;

/// Largest log-scale change the decoder will apply.
pub const DEFAULT_SCALE_CLAMP: f64 = 4.135_166_556_742_356; // ln(1000 / 16)

/// `(dx, dy, dw, dh)` box-delta parameterisation with per-component weights.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoxCoder {
    pub weights: [f64; 4],
    pub scale_clamp: f64,
}

impl BoxCoder {
    pub fn new(weights: [f64; 4]) -> Self {
        Self {
            weights,
            scale_clamp: DEFAULT_SCALE_CLAMP,
        }
    }

    pub fn encode(&self, reference: &[f64; 4], target: &[f64; 4]) -> [f64; 4] {
        let [wx, wy, ww, wh] = self.weights;
        let (rw, rh) = (reference[2] - reference[0], reference[3] - reference[1]);
        let (rx, ry) = (reference[0] + 0.5 * rw, reference[1] + 0.5 * rh);
        let (tw, th) = (target[2] - target[0], target[3] - target[1]);
        let (tx, ty) = (target[0] + 0.5 * tw, target[1] + 0.5 * th);
        [
            wx * (tx - rx) / rw,
            wy * (ty - ry) / rh,
            ww * (tw / rw).ln(),
            wh * (th / rh).ln(),
        ]
    }

    pub fn decode(&self, reference: &[f64; 4], deltas: &[f64; 4]) -> [f64; 4] {
        let [wx, wy, ww, wh] = self.weights;
        let (rw, rh) = (reference[2] - reference[0], reference[3] - reference[1]);
        let (rx, ry) = (reference[0] + 0.5 * rw, reference[1] + 0.5 * rh);
        let dx = deltas[0] / wx;
        let dy = deltas[1] / wy;
        let dw = (deltas[2] / ww).min(self.scale_clamp);
        let dh = (deltas[3] / wh).min(self.scale_clamp);
        let (cx, cy) = (dx * rw + rx, dy * rh + ry);
        let (w, h) = (dw.exp() * rw, dh.exp() * rh);
        [cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h]
    }
}

pub fn clip_box(b: &[f64; 4], width: f64, height: f64) -> [f64; 4] {
    [
        b[0].clamp(0.0, width),
        b[1].clamp(0.0, height),
        b[2].clamp(0.0, width),
        b[3].clamp(0.0, height),
    ]
}

pub fn box_area(b: &[f64; 4]) -> f64 {
    (b[2] - b[0]).max(0.0) * (b[3] - b[1]).max(0.0)
}

/// Indices ordered by score (desc), ties by index.
pub fn order_by_score(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order
}

/// Greedy non-maximum suppression. Returns kept indices by descending score.
pub fn nms(boxes: &[[f64; 4]], scores: &[f64], threshold: f64) -> Vec<usize> {
    let order = order_by_score(scores);
    let mut keep: Vec<usize> = Vec::new();
    for i in order {
        if keep.iter().all(|&k| iou(&boxes[k], &boxes[i]) <= threshold) {
            keep.push(i);
        }
    }
    keep
}

/// NMS applied independently within each group; result sorted by score.
pub fn batched_nms(boxes: &[[f64; 4]], scores: &[f64], groups: &[usize], threshold: f64) -> Vec<usize> {
    let order = order_by_score(scores);
    let mut keep: Vec<usize> = Vec::new();
    for i in order {
        if keep
            .iter()
            .all(|&k| groups[k] != groups[i] || iou(&boxes[k], &boxes[i]) <= threshold)
        {
            keep.push(i);
        }
    }
    keep
}

/// Anchors of one feature level, ordered `(anchor, y, x)` to match a
/// `[A, H, W]` convolution output.
pub fn level_anchors(size: f64, aspect_ratios: &[f64], stride: usize, height: usize, width: usize) -> Vec<[f64; 4]> {
    let base: Vec<[f64; 4]> = aspect_ratios
        .iter()
        .map(|&r| {
            let hr = r.sqrt();
            let (w, h) = (size / hr, size * hr);
            [(-w / 2.0).round(), (-h / 2.0).round(), (w / 2.0).round(), (h / 2.0).round()]
        })
        .collect();
    let mut out = Vec::with_capacity(base.len() * height * width);
    for b in &base {
        for y in 0..height {
            for x in 0..width {
                let (sx, sy) = ((x * stride) as f64, (y * stride) as f64);
                out.push([b[0] + sx, b[1] + sy, b[2] + sx, b[3] + sy]);
            }
        }
    }
    out
}

/// Label assigned to a reference box by [`match_boxes`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MatchState {
    Foreground(usize),
    Background,
    Ignore,
}

/// IoU-threshold matching of references to ground truth.
///
/// `IoU ≥ fg` is foreground, `IoU < bg` background, anything between is
/// ignored. With `low_quality`, each ground truth also claims the
/// references that overlap it best.
pub fn match_boxes(refs: &[[f64; 4]], gts: &[[f64; 4]], fg: f64, bg: f64, low_quality: bool) -> Vec<MatchState> {
    if gts.is_empty() {
        return vec![MatchState::Background; refs.len()];
    }
    let mut best: Vec<(usize, f64)> = Vec::with_capacity(refs.len());
    let mut gt_best = vec![0.0f64; gts.len()];
    let ious: Vec<Vec<f64>> = refs
        .iter()
        .map(|r| gts.iter().map(|g| iou(r, g)).collect())
        .collect();
    for row in &ious {
        let mut b = (0, row[0]);
        for (j, &v) in row.iter().enumerate().skip(1) {
            if v > b.1 {
                b = (j, v);
            }
        }
        best.push(b);
        for (j, &v) in row.iter().enumerate() {
            gt_best[j] = gt_best[j].max(v);
        }
    }
    let mut out: Vec<MatchState> = best
        .iter()
        .map(|&(j, v)| {
            if v >= fg {
                MatchState::Foreground(j)
            } else if v < bg {
                MatchState::Background
            } else {
                MatchState::Ignore
            }
        })
        .collect();
    if low_quality {
        for (i, row) in ious.iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                if v > 0.0 && v == gt_best[j] {
                    out[i] = MatchState::Foreground(best[i].0);
                }
            }
        }
    }
    out
}

/// Random fixed-size subset with a target foreground fraction.
///
/// Returns `(foreground, background)` indices, each in ascending order.
pub fn sample_balanced<R: Rng + ?Sized>(
    states: &[MatchState],
    batch: usize,
    positive_fraction: f64,
    rng: &mut R,
) -> (Vec<usize>, Vec<usize>) {
    let mut pos: Vec<usize> = Vec::new();
    let mut neg: Vec<usize> = Vec::new();
    for (i, s) in states.iter().enumerate() {
        match s {
            MatchState::Foreground(_) => pos.push(i),
            MatchState::Background => neg.push(i),
            MatchState::Ignore => {}
        }
    }
    let num_pos = ((batch as f64 * positive_fraction) as usize).min(pos.len());
    let num_neg = (batch - num_pos).min(neg.len());
    pos.shuffle(rng);
    neg.shuffle(rng);
    pos.truncate(num_pos);
    neg.truncate(num_neg);
    pos.sort_unstable();
    neg.sort_unstable();
    (pos, neg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn nms_keeps_one_of_identical_boxes() {
        let b = [[0.0, 0.0, 10.0, 10.0]; 2];
        assert_eq!(nms(&b, &[0.5, 0.5], 0.7), vec![0]);
    }

    #[test]
    fn nms_ties_resolve_by_index() {
        let b = [[0.0, 0.0, 10.0, 10.0], [50.0, 50.0, 60.0, 60.0], [0.0, 0.0, 10.0, 10.0]];
        assert_eq!(nms(&b, &[0.0, 0.0, 0.0], 0.5), vec![0, 1]);
    }

    #[test]
    fn batched_nms_only_suppresses_within_a_group() {
        let b = [[0.0, 0.0, 10.0, 10.0]; 3];
        assert_eq!(batched_nms(&b, &[0.9, 0.8, 0.7], &[1, 2, 1], 0.5), vec![0, 1]);
    }

    #[test]
    fn anchors_are_centred_on_the_stride_grid() {
        let a = level_anchors(32.0, &[1.0], 8, 2, 3);
        assert_eq!(a.len(), 6);
        assert_eq!(a[0], [-16.0, -16.0, 16.0, 16.0]);
        assert_eq!(a[4], [-8.0, -8.0, 24.0, 24.0]);
        let r = level_anchors(32.0, &[0.5, 2.0], 4, 1, 1);
        assert!((r[0][3] - r[0][1]) < (r[0][2] - r[0][0]));
        assert!((r[1][3] - r[1][1]) > (r[1][2] - r[1][0]));
    }

    #[test]
    fn matcher_thresholds_and_low_quality_claims() {
        let gts = [[0.0, 0.0, 10.0, 10.0]];
        let refs = [[0.0, 0.0, 10.0, 10.0], [0.0, 0.0, 10.0, 14.0], [50.0, 50.0, 60.0, 60.0], [0.0, 0.0, 10.0, 20.0]];
        let m = match_boxes(&refs, &gts, 0.7, 0.3, false);
        assert_eq!(m[0], MatchState::Foreground(0));
        assert_eq!(m[1], MatchState::Foreground(0));
        assert_eq!(m[2], MatchState::Background);
        assert_eq!(m[3], MatchState::Ignore);
        let lq = match_boxes(&refs[2..], &gts, 0.7, 0.3, true);
        assert_eq!(lq[1], MatchState::Foreground(0));
    }

    #[test]
    fn sampler_respects_fraction_and_batch() {
        let mut states = vec![MatchState::Background; 100];
        for s in states.iter_mut().take(40) {
            *s = MatchState::Foreground(0);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (p, n) = sample_balanced(&states, 32, 0.25, &mut rng);
        assert_eq!(p.len(), 8);
        assert_eq!(n.len(), 24);
        assert!(p.iter().all(|&i| i < 40) && n.iter().all(|&i| i >= 40));
    }

    proptest! {
        #[test]
        fn decode_inverts_encode(
            x in 0.0..100.0f64, y in 0.0..100.0f64, w in 1.0..80.0f64, h in 1.0..80.0f64,
            dx in -20.0..20.0f64, dy in -20.0..20.0f64, sw in 0.3..3.0f64, sh in 0.3..3.0f64,
        ) {
            let coder = BoxCoder::new([10.0, 10.0, 5.0, 5.0]);
            let r = [x, y, x + w, y + h];
            let t = [x + dx, y + dy, x + dx + w * sw, y + dy + h * sh];
            let back = coder.decode(&r, &coder.encode(&r, &t));
            for k in 0..4 {
                prop_assert!((back[k] - t[k]).abs() < 1e-9);
            }
        }
    }
}
