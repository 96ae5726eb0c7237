//! Still/fast backbone and the combined feature pyramid.
//!
//! The still branch turns a `[3, H, W]` frame into four maps at strides
//! 4, 8, 16 and 32. The fast branch turns a `[3, T, h, w]` clip into four
//! spatiotemporal maps with the same spatial strides relative to the clip.
//! Each 3D level is lifted onto its 2D partner (nearest-neighbour resize,
//! then a mean over time), projected by a 3×3 convolution, added, and
//! smoothed by a second 3×3 convolution. A standard FPN then produces five
//! maps with a common channel count; the fifth is the fourth subsampled by 2.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{ConvGeometry, Graph, Var};
use crate::datamodel::ObservedClip;
use crate::error::{Error, Result};
use crate::nn::{Conv, Init, ParamStore};
use crate::tensor::Tensor;

/// Strides of the four backbone levels relative to their input.
pub const LEVEL_STRIDES: [usize; 4] = [4, 8, 16, 32];
/// Strides of the five pyramid levels relative to the still frame.
pub const PYRAMID_STRIDES: [usize; 5] = [4, 8, 16, 32, 64];
/// Smallest still side the stride plan supports.
pub const MIN_STILL_SIDE: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    /// Lift, pre-sum conv, add, post-sum conv, then one FPN.
    #[default]
    Combined,
    /// Still branch only; the fast branch is not built.
    #[serde(rename = "no_3d")]
    No3d,
    /// As `Combined` without the post-sum convolution.
    NoPostConv,
    /// Separate 2D and 3D pyramids fused level by level afterwards.
    PostPyramid,
}

impl FusionMode {
    pub fn uses_fast_branch(self) -> bool {
        self != FusionMode::No3d
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    /// Output channels of the four still levels.
    pub channels_2d: Vec<usize>,
    pub stem_channels_2d: usize,
    /// Output channels of the four fast levels.
    pub channels_3d: Vec<usize>,
    pub stem_channels_3d: usize,
    /// Temporal kernel of every fast-branch convolution (odd).
    pub temporal_kernel: usize,
    /// Temporal stride of each fast level.
    pub temporal_strides: Vec<usize>,
    /// Channel count of every pyramid level.
    pub fpn_channels: usize,
    pub fusion: FusionMode,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            channels_2d: vec![256, 512, 1024, 2048],
            stem_channels_2d: 64,
            channels_3d: vec![24, 48, 96, 192],
            stem_channels_3d: 24,
            temporal_kernel: 3,
            temporal_strides: vec![1, 1, 1, 1],
            fpn_channels: 256,
            fusion: FusionMode::Combined,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        let four = |name: &str, v: &[usize]| {
            if v.len() != 4 || v.contains(&0) {
                Err(Error::Config(format!("backbone.{name} needs 4 positive entries, got {v:?}")))
            } else {
                Ok(())
            }
        };
        four("channels_2d", &self.channels_2d)?;
        four("channels_3d", &self.channels_3d)?;
        four("temporal_strides", &self.temporal_strides)?;
        if self.stem_channels_2d == 0 || self.stem_channels_3d == 0 || self.fpn_channels == 0 {
            return Err(Error::Config("backbone channel counts must be positive".into()));
        }
        if self.temporal_kernel.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "backbone.temporal_kernel must be odd, got {}",
                self.temporal_kernel
            )));
        }
        Ok(())
    }
}

/// Feature maps of one forward pass, ordered fine to coarse.
#[derive(Clone, Debug)]
pub struct FeaturePyramid {
    pub levels: Vec<Var>,
    pub strides: Vec<usize>,
}

impl FeaturePyramid {
    /// Coarsest level that is not the pooled extra level.
    pub fn top(&self) -> Var {
        self.levels[self.levels.len() - 2]
    }

    pub fn values(&self, g: &Graph) -> Vec<Tensor> {
        self.levels.iter().map(|&v| g.value(v).clone()).collect()
    }
}

/// Shapes produced by the stride plan, computed without running the model.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StackShapes {
    /// `[C, H, W]` per still level.
    pub still: Vec<[usize; 3]>,
    /// `[C, T, H, W]` per fast level.
    pub fast: Vec<[usize; 4]>,
    /// `[C, H, W]` per pyramid level.
    pub pyramid: Vec<[usize; 3]>,
}

fn halve(n: usize) -> usize {
    n.div_ceil(2)
}

/// Shapes for a still of `still_hw` and a clip of `video_thw`.
pub fn infer_shapes(cfg: &BackboneConfig, still_hw: (usize, usize), video_thw: (usize, usize, usize)) -> StackShapes {
    let (mut h, mut w) = (halve(still_hw.0), halve(still_hw.1));
    let mut still = Vec::new();
    for &c in &cfg.channels_2d {
        h = halve(h);
        w = halve(w);
        still.push([c, h, w]);
    }
    let (mut t, mut vh, mut vw) = (video_thw.0, halve(video_thw.1), halve(video_thw.2));
    let mut fast = Vec::new();
    for (&c, &ts) in cfg.channels_3d.iter().zip(&cfg.temporal_strides) {
        let pad = cfg.temporal_kernel / 2;
        t = (t + 2 * pad - cfg.temporal_kernel) / ts + 1;
        vh = halve(vh);
        vw = halve(vw);
        fast.push([c, t, vh, vw]);
    }
    let mut pyramid: Vec<[usize; 3]> = still.iter().map(|s| [cfg.fpn_channels, s[1], s[2]]).collect();
    let last = pyramid[3];
    pyramid.push([cfg.fpn_channels, halve(last[1]), halve(last[2])]);
    StackShapes { still, fast, pyramid }
}

fn conv3x3_s2() -> ConvGeometry {
    ConvGeometry::conv2d(3, 2, 1)
}

/// Toy still backbone: a stride-2 stem then one stride-2 conv per level.
#[derive(Clone, Debug)]
pub struct StillBackbone {
    pub stem: Conv,
    pub levels: Vec<Conv>,
}

impl StillBackbone {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, cfg: &BackboneConfig, rng: &mut R) -> Self {
        let stem = Conv::new(store, "still.stem", 3, cfg.stem_channels_2d, conv3x3_s2(), Init::KaimingNormal, rng);
        let mut levels = Vec::new();
        let mut c_in = cfg.stem_channels_2d;
        for (i, &c) in cfg.channels_2d.iter().enumerate() {
            levels.push(Conv::new(store, &format!("still.level{i}"), c_in, c, conv3x3_s2(), Init::KaimingNormal, rng));
            c_in = c;
        }
        Self { stem, levels }
    }

    /// `[3, H, W]` → four `[C_i, H_i, W_i]` maps.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, still: Var) -> Result<Vec<Var>> {
        let (c, h, w) = g.value(still).chw();
        if c != 3 {
            return Err(Error::Shape(format!("still must have 3 channels, got {c}")));
        }
        if h < MIN_STILL_SIDE || w < MIN_STILL_SIDE {
            return Err(Error::Shape(format!(
                "still {h}x{w} is smaller than the minimum side {MIN_STILL_SIDE}"
            )));
        }
        let s = self.stem.forward(g, store, still);
        let mut x = g.relu(s);
        let mut out = Vec::with_capacity(4);
        for conv in &self.levels {
            let y = conv.forward(g, store, x);
            x = g.relu(y);
            out.push(x);
        }
        Ok(out)
    }
}

/// Toy fast backbone: 3D convolutions halving space at every step.
#[derive(Clone, Debug)]
pub struct FastBackbone {
    pub stem: Conv,
    pub levels: Vec<Conv>,
    pub clip_len: usize,
}

impl FastBackbone {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, cfg: &BackboneConfig, clip_len: usize, rng: &mut R) -> Self {
        let kt = cfg.temporal_kernel;
        let pt = kt / 2;
        let stem = Conv::new(
            store,
            "fast.stem",
            3,
            cfg.stem_channels_3d,
            ConvGeometry::conv3d([kt, 3, 3], [1, 2, 2], [pt, 1, 1]),
            Init::KaimingNormal,
            rng,
        );
        let mut levels = Vec::new();
        let mut c_in = cfg.stem_channels_3d;
        for (i, (&c, &ts)) in cfg.channels_3d.iter().zip(&cfg.temporal_strides).enumerate() {
            let geom = ConvGeometry::conv3d([kt, 3, 3], [ts, 2, 2], [pt, 1, 1]);
            levels.push(Conv::new(store, &format!("fast.level{i}"), c_in, c, geom, Init::KaimingNormal, rng));
            c_in = c;
        }
        Self { stem, levels, clip_len }
    }

    /// `[3, T, h, w]` → four `[C'_i, T_i, h_i, w_i]` maps.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, video: Var) -> Result<Vec<Var>> {
        let (c, t, h, w) = g.value(video).cthw();
        if c != 3 {
            return Err(Error::Shape(format!("video must have 3 channels, got {c}")));
        }
        if t != self.clip_len {
            return Err(Error::Shape(format!(
                "video has {t} frames, expected clip length {}",
                self.clip_len
            )));
        }
        if h < 16 || w < 16 {
            return Err(Error::Shape(format!("video {h}x{w} is too small for the stride plan")));
        }
        let s = self.stem.forward(g, store, video);
        let mut x = g.relu(s);
        let mut out = Vec::with_capacity(4);
        for conv in &self.levels {
            let y = conv.forward(g, store, x);
            x = g.relu(y);
            out.push(x);
        }
        Ok(out)
    }
}

/// Nearest-neighbour resize of a `[C', T', H', W']` map to `target_hw`
/// followed by the mean over `T'`.
pub fn lift_3d_to_2d(g: &mut Graph, level3d: Var, target_hw: (usize, usize)) -> Var {
    g.nearest_lift(level3d, target_hw.0, target_hw.1)
}

/// The pre-sum and post-sum convolutions of one pyramid level.
#[derive(Clone, Debug)]
pub struct FusionLevel {
    pub pre: Option<Conv>,
    pub post: Option<Conv>,
}

impl FusionLevel {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        c3d: usize,
        c2d: usize,
        with_post: bool,
        rng: &mut R,
    ) -> Self {
        let geom = ConvGeometry::conv2d(3, 1, 1);
        let pre = Some(Conv::new(store, &format!("{name}.pre"), c3d, c2d, geom, Init::KaimingNormal, rng));
        let post = with_post.then(|| Conv::new(store, &format!("{name}.post"), c2d, c2d, geom, Init::KaimingNormal, rng));
        Self { pre, post }
    }
}

/// `post(feat2d + pre(lifted3d))`; `lifted3d = None` drops the 3D term.
pub fn fuse_level(
    g: &mut Graph,
    store: &ParamStore,
    feat2d: Var,
    lifted3d: Option<Var>,
    level: &FusionLevel,
) -> Result<Var> {
    let (c2, h, w) = g.value(feat2d).chw();
    let mut sum = feat2d;
    if let Some(l) = lifted3d {
        let pre = level
            .pre
            .as_ref()
            .ok_or_else(|| Error::Shape("level has no pre-sum convolution".into()))?;
        let (c3, lh, lw) = g.value(l).chw();
        if (lh, lw) != (h, w) {
            return Err(Error::Shape(format!(
                "lifted map {lh}x{lw} does not match the still level {h}x{w}"
            )));
        }
        if c3 != pre.in_channels || c2 != pre.out_channels {
            return Err(Error::Shape(format!(
                "channel mismatch: pre-sum conv maps {} -> {}, inputs have {c3} and {c2}",
                pre.in_channels, pre.out_channels
            )));
        }
        let p = pre.forward(g, store, l);
        sum = g.add(feat2d, p);
    }
    match &level.post {
        Some(post) => {
            if post.in_channels != c2 {
                return Err(Error::Shape(format!(
                    "channel mismatch: post-sum conv expects {} channels, got {c2}",
                    post.in_channels
                )));
            }
            Ok(post.forward(g, store, sum))
        }
        None => Ok(sum),
    }
}

/// Lateral 1×1 projections, nearest top-down addition and 3×3 smoothing.
#[derive(Clone, Debug)]
pub struct Fpn {
    pub laterals: Vec<Conv>,
    pub outputs: Vec<Conv>,
}

impl Fpn {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, in_channels: &[usize], channels: usize, rng: &mut R) -> Self {
        let mut laterals = Vec::new();
        let mut outputs = Vec::new();
        for (i, &c) in in_channels.iter().enumerate() {
            laterals.push(Conv::new(
                store,
                &format!("{name}.lateral{i}"),
                c,
                channels,
                ConvGeometry::conv2d(1, 1, 0),
                Init::KaimingNormal,
                rng,
            ));
            outputs.push(Conv::new(
                store,
                &format!("{name}.output{i}"),
                channels,
                channels,
                ConvGeometry::conv2d(3, 1, 1),
                Init::KaimingNormal,
                rng,
            ));
        }
        Self { laterals, outputs }
    }

    /// Top-down pathway over fine-to-coarse `[C_i, H_i, W_i]` inputs.
    pub fn top_down(&self, g: &mut Graph, store: &ParamStore, inputs: &[Var]) -> Vec<Var> {
        let n = inputs.len();
        let mut out = vec![inputs[0]; n];
        let mut inner = self.laterals[n - 1].forward(g, store, inputs[n - 1]);
        out[n - 1] = self.outputs[n - 1].forward(g, store, inner);
        for i in (0..n - 1).rev() {
            let lat = self.laterals[i].forward(g, store, inputs[i]);
            let (_, h, w) = g.value(lat).chw();
            let up = g.nearest_lift(inner, h, w);
            inner = g.add(lat, up);
            out[i] = self.outputs[i].forward(g, store, inner);
        }
        out
    }

    /// Four smoothed levels plus the stride-2 subsampled extra level.
    pub fn build(&self, g: &mut Graph, store: &ParamStore, fused: &[Var]) -> FeaturePyramid {
        let mut levels = self.top_down(g, store, fused);
        let extra = g.subsample2(levels[levels.len() - 1]);
        levels.push(extra);
        FeaturePyramid {
            levels,
            strides: PYRAMID_STRIDES.to_vec(),
        }
    }
}

/// Alias for [`Fpn::build`].
pub fn build_pyramid(g: &mut Graph, store: &ParamStore, fpn: &Fpn, fused: &[Var]) -> FeaturePyramid {
    fpn.build(g, store, fused)
}

/// The complete two-branch backbone with its pyramid.
#[derive(Clone, Debug)]
pub struct StillFastBackbone {
    pub config: BackboneConfig,
    pub still: StillBackbone,
    pub fast: Option<FastBackbone>,
    pub fusion: Vec<FusionLevel>,
    pub fpn: Fpn,
    /// Pyramid over the fast branch, for post-pyramid fusion only.
    pub fast_fpn: Option<Fpn>,
}

impl StillFastBackbone {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, cfg: &BackboneConfig, clip_len: usize, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        if clip_len == 0 {
            return Err(Error::Config("clip length must be positive".into()));
        }
        let still = StillBackbone::new(store, cfg, rng);
        let mode = cfg.fusion;
        let fast = mode.uses_fast_branch().then(|| FastBackbone::new(store, cfg, clip_len, rng));
        let f = cfg.fpn_channels;
        let mut fusion = Vec::new();
        let mut fast_fpn = None;
        match mode {
            FusionMode::Combined | FusionMode::NoPostConv | FusionMode::No3d => {
                for i in 0..4 {
                    let (c3, c2) = (cfg.channels_3d[i], cfg.channels_2d[i]);
                    let name = format!("fusion.level{i}");
                    if mode == FusionMode::No3d {
                        let post = Conv::new(
                            store,
                            &format!("{name}.post"),
                            c2,
                            c2,
                            ConvGeometry::conv2d(3, 1, 1),
                            Init::KaimingNormal,
                            rng,
                        );
                        fusion.push(FusionLevel { pre: None, post: Some(post) });
                    } else {
                        fusion.push(FusionLevel::new(store, &name, c3, c2, mode == FusionMode::Combined, rng));
                    }
                }
            }
            FusionMode::PostPyramid => {}
        }
        let fpn = Fpn::new(store, "fpn", &cfg.channels_2d, f, rng);
        if mode == FusionMode::PostPyramid {
            fast_fpn = Some(Fpn::new(store, "fast_fpn", &cfg.channels_3d, f, rng));
            for i in 0..4 {
                fusion.push(FusionLevel::new(store, &format!("fusion.level{i}"), f, f, true, rng));
            }
        }
        Ok(Self {
            config: cfg.clone(),
            still,
            fast,
            fusion,
            fpn,
            fast_fpn,
        })
    }

    pub fn clip_len(&self) -> Option<usize> {
        self.fast.as_ref().map(|f| f.clip_len)
    }

    pub fn extract_still_features(&self, g: &mut Graph, store: &ParamStore, still: Var) -> Result<Vec<Var>> {
        self.still.forward(g, store, still)
    }

    pub fn extract_fast_features(&self, g: &mut Graph, store: &ParamStore, video: Var) -> Result<Vec<Var>> {
        match &self.fast {
            Some(f) => f.forward(g, store, video),
            None => Err(Error::Config("fast branch disabled by fusion mode no_3d".into())),
        }
    }

    /// Full backbone from already-recorded still and video nodes.
    pub fn forward_vars(&self, g: &mut Graph, store: &ParamStore, still: Var, video: Option<Var>) -> Result<FeaturePyramid> {
        let f2d = self.extract_still_features(g, store, still)?;
        let mode = self.config.fusion;
        if mode == FusionMode::No3d {
            let mut fused = Vec::with_capacity(4);
            for (i, &f) in f2d.iter().enumerate() {
                fused.push(fuse_level(g, store, f, None, &self.fusion[i])?);
            }
            return Ok(self.fpn.build(g, store, &fused));
        }
        let video = video.ok_or_else(|| Error::Shape("fusion mode requires a video clip".into()))?;
        let f3d = self.extract_fast_features(g, store, video)?;
        if mode == FusionMode::PostPyramid {
            let p2d = self.fpn.top_down(g, store, &f2d);
            let flat: Vec<Var> = f3d
                .iter()
                .map(|&v| {
                    let (_, _, h, w) = g.value(v).cthw();
                    g.nearest_lift(v, h, w)
                })
                .collect();
            let fast_fpn = self.fast_fpn.as_ref().expect("post-pyramid mode builds a fast pyramid");
            let p3d = fast_fpn.top_down(g, store, &flat);
            let mut levels = Vec::with_capacity(5);
            for i in 0..4 {
                let (_, h, w) = g.value(p2d[i]).chw();
                let lifted = lift_3d_to_2d(g, p3d[i], (h, w));
                levels.push(fuse_level(g, store, p2d[i], Some(lifted), &self.fusion[i])?);
            }
            let extra = g.subsample2(levels[3]);
            levels.push(extra);
            return Ok(FeaturePyramid {
                levels,
                strides: PYRAMID_STRIDES.to_vec(),
            });
        }
        let mut fused = Vec::with_capacity(4);
        for i in 0..4 {
            let (_, h, w) = g.value(f2d[i]).chw();
            let lifted = lift_3d_to_2d(g, f3d[i], (h, w));
            fused.push(fuse_level(g, store, f2d[i], Some(lifted), &self.fusion[i])?);
        }
        Ok(self.fpn.build(g, store, &fused))
    }

    /// Records the clip on `g` and runs the full backbone.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, clip: &ObservedClip) -> Result<FeaturePyramid> {
        let still = g.input(clip.still.clone());
        let video = self.config.fusion.uses_fast_branch().then(|| g.input(clip.video.clone()));
        self.forward_vars(g, store, still, video)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toy() -> BackboneConfig {
        BackboneConfig {
            channels_2d: vec![4, 5, 6, 7],
            stem_channels_2d: 3,
            channels_3d: vec![2, 3, 3, 4],
            stem_channels_3d: 2,
            temporal_kernel: 3,
            temporal_strides: vec![1, 2, 1, 1],
            fpn_channels: 4,
            fusion: FusionMode::Combined,
        }
    }

    fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn reference_plan_shapes() {
        let s = infer_shapes(&BackboneConfig::default(), (800, 1280), (16, 256, 410));
        assert_eq!(s.still, vec![[256, 200, 320], [512, 100, 160], [1024, 50, 80], [2048, 25, 40]]);
        assert_eq!(s.fast[0], [24, 16, 64, 103]);
        assert_eq!(s.pyramid.len(), 5);
        assert!(s.pyramid.iter().all(|p| p[0] == 256));
        assert_eq!(s.pyramid[4], [256, 13, 20]);
        let small = infer_shapes(&BackboneConfig::default(), (64, 64), (16, 20, 20));
        assert_eq!(small.still[3], [2048, 2, 2]);
    }

    #[test]
    fn toy_backbone_matches_inferred_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cfg = toy();
        let mut store = ParamStore::new();
        let bb = StillFastBackbone::new(&mut store, &cfg, 4, &mut rng).unwrap();
        let clip = ObservedClip {
            still: rand_tensor(&[3, 64, 80], &mut rng),
            video: rand_tensor(&[3, 4, 20, 26], &mut rng),
            timestamp: 0.0,
            frame_rate: 8.0,
            tau_o: 0.5,
        };
        let shapes = infer_shapes(&cfg, (64, 80), (4, 20, 26));
        let mut g = Graph::new();
        let still = g.input(clip.still.clone());
        let video = g.input(clip.video.clone());
        let f2 = bb.extract_still_features(&mut g, &store, still).unwrap();
        let f3 = bb.extract_fast_features(&mut g, &store, video).unwrap();
        for (v, s) in f2.iter().zip(&shapes.still) {
            assert_eq!(g.value(*v).shape(), s);
        }
        for (v, s) in f3.iter().zip(&shapes.fast) {
            assert_eq!(g.value(*v).shape(), s);
        }
        let p = bb.forward(&mut g, &store, &clip).unwrap();
        for (v, s) in p.levels.iter().zip(&shapes.pyramid) {
            assert_eq!(g.value(*v).shape(), s);
        }
    }

    #[test]
    fn wrong_clip_length_and_tiny_still_are_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let bb = StillFastBackbone::new(&mut store, &toy(), 16, &mut rng).unwrap();
        let mut g = Graph::new();
        let v = g.input(Tensor::zeros(&[3, 8, 32, 32]));
        assert!(bb.extract_fast_features(&mut g, &store, v).is_err());
        let s = g.input(Tensor::zeros(&[3, 32, 64]));
        assert!(bb.extract_still_features(&mut g, &store, s).is_err());
    }

    #[test]
    fn lift_replicates_blocks_like_an_index_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = rand_tensor(&[2, 3, 2, 3], &mut rng);
        let mut g = Graph::new();
        let v = g.input(x.clone());
        let out = lift_3d_to_2d(&mut g, v, (4, 7));
        let out = g.value(out);
        for c in 0..2 {
            for y in 0..4 {
                for xx in 0..7 {
                    let (sy, sx) = (y * 2 / 4, xx * 3 / 7);
                    let want = (0..3).map(|t| x.at(&[c, t, sy, sx])).sum::<f64>() / 3.0;
                    assert!((out.at(&[c, y, xx]) - want).abs() < 1e-15);
                }
            }
        }
    }

    #[test]
    fn lift_of_time_constant_input_is_plain_upsampling() {
        let plane = Tensor::from_vec(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let clip = Tensor::from_fn(&[1, 5, 2, 2], |i| plane.data()[i % 4]);
        let mut g = Graph::new();
        let v = g.input(clip);
        let out = lift_3d_to_2d(&mut g, v, (4, 4));
        let want = [1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0, 3.0, 3.0, 4.0, 4.0, 3.0, 3.0, 4.0, 4.0];
        assert_eq!(g.value(out).data(), &want);
        let c = g.input(Tensor::full(&[2, 3, 3, 3], 0.7));
        let out = lift_3d_to_2d(&mut g, c, (5, 6));
        assert!(g.value(out).data().iter().all(|&v| (v - 0.7).abs() < 1e-15));
    }

    fn set_identity(store: &mut ParamStore, conv: &Conv) {
        let c = conv.out_channels;
        let mut w = Tensor::zeros(&[c, c, 3, 3]);
        for i in 0..c {
            w.set(&[i, i, 1, 1], 1.0);
        }
        *store.get_mut(conv.weight) = w;
        *store.get_mut(conv.bias) = Tensor::zeros(&[c]);
    }

    fn zero(store: &mut ParamStore, conv: &Conv) {
        for id in [conv.weight, conv.bias] {
            let shape = store.get(id).shape().to_vec();
            *store.get_mut(id) = Tensor::zeros(&shape);
        }
    }

    #[test]
    fn zero_pre_and_identity_post_give_the_still_only_level() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut store = ParamStore::new();
        let level = FusionLevel::new(&mut store, "f", 3, 4, true, &mut rng);
        zero(&mut store, level.pre.as_ref().unwrap());
        set_identity(&mut store, level.post.as_ref().unwrap());
        let mut g = Graph::new();
        let f2 = g.input(rand_tensor(&[4, 5, 5], &mut rng));
        let l3 = g.input(rand_tensor(&[3, 5, 5], &mut rng));
        let out = fuse_level(&mut g, &store, f2, Some(l3), &level).unwrap();
        assert_eq!(g.value(out), g.value(f2));
    }

    #[test]
    fn fuse_level_rejects_channel_mismatch() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut store = ParamStore::new();
        let level = FusionLevel::new(&mut store, "f", 3, 4, true, &mut rng);
        let mut g = Graph::new();
        let f2 = g.input(Tensor::zeros(&[4, 5, 5]));
        let l3 = g.input(Tensor::zeros(&[2, 5, 5]));
        assert!(matches!(fuse_level(&mut g, &store, f2, Some(l3), &level), Err(Error::Shape(_))));
    }

    #[test]
    fn reference_fusion_level_zero_channel_plan() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let level = FusionLevel::new(&mut store, "f", 24, 256, true, &mut rng);
        assert_eq!(store.get(level.pre.as_ref().unwrap().weight).shape(), &[256, 24, 3, 3]);
        assert_eq!(store.get(level.post.as_ref().unwrap().weight).shape(), &[256, 256, 3, 3]);
    }

    #[test]
    fn zero_inputs_and_zero_biases_give_a_zero_pyramid() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let fpn = Fpn::new(&mut store, "fpn", &[2, 3, 4, 5], 4, &mut rng);
        let mut g = Graph::new();
        let fused: Vec<Var> = [(2, 16), (3, 8), (4, 4), (5, 2)]
            .iter()
            .map(|&(c, s)| g.input(Tensor::zeros(&[c, s, s])))
            .collect();
        let p = build_pyramid(&mut g, &store, &fpn, &fused);
        assert_eq!(p.levels.len(), 5);
        for (v, s) in p.levels.iter().zip([16, 8, 4, 2, 1]) {
            let t = g.value(*v);
            assert_eq!(t.shape(), &[4, s, s]);
            assert_eq!(t.max_abs(), 0.0);
        }
    }

    #[test]
    fn no_3d_matches_post_conv_over_still_features() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut cfg = toy();
        cfg.fusion = FusionMode::No3d;
        let mut store = ParamStore::new();
        let bb = StillFastBackbone::new(&mut store, &cfg, 4, &mut rng).unwrap();
        assert!(store.with_prefix("fast").next().is_none());
        let still_t = rand_tensor(&[3, 64, 64], &mut rng);
        let mut g = Graph::new();
        let still = g.input(still_t.clone());
        let p = bb.forward_vars(&mut g, &store, still, None).unwrap();

        let mut h = Graph::new();
        let s = h.input(still_t);
        let f2 = bb.still.forward(&mut h, &store, s).unwrap();
        let fused: Vec<Var> = f2
            .iter()
            .zip(&bb.fusion)
            .map(|(&f, l)| l.post.as_ref().unwrap().forward(&mut h, &store, f))
            .collect();
        let q = bb.fpn.build(&mut h, &store, &fused);
        assert_eq!(p.values(&g), q.values(&h));
    }

    #[test]
    fn forward_is_deterministic_and_equals_the_composition() {
        for mode in [FusionMode::Combined, FusionMode::NoPostConv, FusionMode::PostPyramid] {
            let mut rng = ChaCha8Rng::seed_from_u64(11);
            let mut cfg = toy();
            cfg.fusion = mode;
            let mut store = ParamStore::new();
            let bb = StillFastBackbone::new(&mut store, &cfg, 4, &mut rng).unwrap();
            let clip = ObservedClip {
                still: rand_tensor(&[3, 64, 64], &mut rng),
                video: rand_tensor(&[3, 4, 20, 20], &mut rng),
                timestamp: 0.0,
                frame_rate: 8.0,
                tau_o: 0.5,
            };
            let mut g1 = Graph::new();
            let a = bb.forward(&mut g1, &store, &clip).unwrap().values(&g1);
            let mut g2 = Graph::new();
            let b = bb.forward(&mut g2, &store, &clip).unwrap().values(&g2);
            assert_eq!(a, b, "{mode:?}");
            if mode != FusionMode::PostPyramid {
                let mut h = Graph::new();
                let s = h.input(clip.still.clone());
                let v = h.input(clip.video.clone());
                let f2 = bb.extract_still_features(&mut h, &store, s).unwrap();
                let f3 = bb.extract_fast_features(&mut h, &store, v).unwrap();
                let mut fused = Vec::new();
                for i in 0..4 {
                    let (_, hh, ww) = h.value(f2[i]).chw();
                    let l = lift_3d_to_2d(&mut h, f3[i], (hh, ww));
                    fused.push(fuse_level(&mut h, &store, f2[i], Some(l), &bb.fusion[i]).unwrap());
                }
                let c = build_pyramid(&mut h, &store, &bb.fpn, &fused).values(&h);
                assert_eq!(a, c);
            }
        }
    }

    /// Relative error with a floor so tiny gradients do not dominate.
    fn rel(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
    }

    #[test]
    fn fuse_level_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut store = ParamStore::new();
        let level = FusionLevel::new(&mut store, "f", 2, 3, true, &mut rng);
        let f2 = rand_tensor(&[3, 5, 5], &mut rng);
        let l3 = rand_tensor(&[2, 5, 5], &mut rng);
        let readout = rand_tensor(&[3, 5, 5], &mut rng);
        let run = |store: &ParamStore| {
            let mut g = Graph::new();
            let a = g.input(f2.clone());
            let b = g.input(l3.clone());
            let out = fuse_level(&mut g, store, a, Some(b), &level).unwrap();
            let loss = g.dot(out, &readout);
            (g, loss)
        };
        let (g, loss) = run(&store);
        let grads = g.backward(loss);
        let eps = 1e-6;
        let mut checked = 0;
        for (id, grad) in g.param_grads(&grads) {
            for i in (0..grad.numel()).step_by(3) {
                let mut plus = store.clone();
                plus.get_mut(id).data_mut()[i] += eps;
                let mut minus = store.clone();
                minus.get_mut(id).data_mut()[i] -= eps;
                let (gp, lp) = run(&plus);
                let (gm, lm) = run(&minus);
                let fd = (gp.value(lp).item() - gm.value(lm).item()) / (2.0 * eps);
                assert!(rel(grad.data()[i], fd) < 1e-4, "{}[{i}]: {} vs {fd}", store.name(id), grad.data()[i]);
                checked += 1;
            }
        }
        assert!(checked > 40);
    }
}
