//! Frame loading, resizing/normalisation and a synthetic motion dataset.
//!
//! On disk a dataset is `root/annotations.json` plus
//! `root/frames/<video>/<frame:06>.png`.

use std::fs;
use std::path::{Path, PathBuf};

use image::imageops::{resize, FilterType};
use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datamodel::{
    read_annotation_file, write_annotation_file, AnnotationSet, BoundingBox, InteractionAnnotation, ObservedClip,
    Sample, SampleRecord, Taxonomy,
};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const ANNOTATION_FILE: &str = "annotations.json";
pub const FRAMES_DIR: &str = "frames";
/// Largest accepted long/short side ratio of a raw frame.
pub const MAX_ASPECT: f64 = 8.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PreprocessConfig {
    pub train_short_sides: Vec<u32>,
    pub max_long_side: u32,
    pub test_height: u32,
    /// Video height as a fraction of the still height.
    pub alpha: f64,
    pub clip_len: usize,
    pub clip_stride: usize,
    pub still_mean: [f64; 3],
    pub still_std: [f64; 3],
    pub video_mean: [f64; 3],
    pub video_std: [f64; 3],
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            train_short_sides: vec![640, 672, 704, 736, 768, 800],
            max_long_side: 1333,
            test_height: 800,
            alpha: 0.32,
            clip_len: 16,
            clip_stride: 1,
            still_mean: [0.485, 0.456, 0.406],
            still_std: [0.229, 0.224, 0.225],
            video_mean: [0.45, 0.45, 0.45],
            video_std: [0.225, 0.225, 0.225],
        }
    }
}

impl PreprocessConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("preprocess: {m}")));
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return bad("alpha must lie in (0, 1)");
        }
        if self.clip_len == 0 || self.clip_stride == 0 {
            return bad("clip_len and clip_stride must be at least 1");
        }
        if self.train_short_sides.is_empty() || self.train_short_sides.contains(&0) {
            return bad("train_short_sides must be non-empty and positive");
        }
        if self.test_height == 0 || self.max_long_side == 0 {
            return bad("test_height and max_long_side must be positive");
        }
        if self.still_std.iter().chain(&self.video_std).any(|&s| !(s > 0.0)) {
            return bad("normalisation stds must be positive");
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Frame indices of the clip ending at `t`; indices before 0 repeat frame 0.
pub fn sample_clip(t: u64, clip_len: usize, stride: usize) -> Vec<u64> {
    (0..clip_len)
        .map(|i| {
            let back = ((clip_len - 1 - i) * stride) as u64;
            t.saturating_sub(back)
        })
        .collect()
}

/// Target still size for a raw `(H, W)` frame.
pub fn still_size<R: Rng + ?Sized>(cfg: &PreprocessConfig, mode: Mode, raw_hw: (u32, u32), rng: &mut R) -> Result<(usize, usize)> {
    let (h, w) = (raw_hw.0 as f64, raw_hw.1 as f64);
    if raw_hw.0 == 0 || raw_hw.1 == 0 {
        return Err(Error::Data("empty frame".into()));
    }
    if h.max(w) / h.min(w) > MAX_ASPECT {
        return Err(Error::Data(format!("degenerate aspect ratio {}x{}", raw_hw.1, raw_hw.0)));
    }
    let mut scale = match mode {
        Mode::Train => {
            let side = cfg.train_short_sides[rng.gen_range(0..cfg.train_short_sides.len())] as f64;
            side / h.min(w)
        }
        Mode::Eval => cfg.test_height as f64 / h,
    };
    if h.max(w) * scale > cfg.max_long_side as f64 {
        scale = cfg.max_long_side as f64 / h.max(w);
    }
    Ok((((h * scale).round() as usize).max(1), ((w * scale).round() as usize).max(1)))
}

/// Video size for a still of size `(H, W)`.
pub fn video_size(cfg: &PreprocessConfig, still_hw: (usize, usize)) -> (usize, usize) {
    let f = |x: usize| ((x as f64 * cfg.alpha).round() as usize).max(1);
    (f(still_hw.0), f(still_hw.1))
}

/// Per-channel normalised `[3, H, W]` tensor.
pub fn normalize(img: &RgbImage, mean: [f64; 3], std: [f64; 3]) -> Tensor {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut t = Tensor::zeros(&[3, h, w]);
    let d = t.data_mut();
    for (x, y, p) in img.enumerate_pixels() {
        for c in 0..3 {
            d[(c * h + y as usize) * w + x as usize] = (p[c] as f64 / 255.0 - mean[c]) / std[c];
        }
    }
    t
}

fn resized(img: &RgbImage, hw: (usize, usize)) -> RgbImage {
    if (img.height() as usize, img.width() as usize) == hw {
        img.clone()
    } else {
        resize(img, hw.1 as u32, hw.0 as u32, FilterType::Triangle)
    }
}

/// Builds the model input from the raw frames of a clip (last frame is t)
/// and rescales the annotation boxes into still coordinates.
pub fn preprocess<R: Rng + ?Sized>(
    frames: &[RgbImage],
    annotations: &[InteractionAnnotation],
    cfg: &PreprocessConfig,
    mode: Mode,
    frame_rate: f64,
    frame_index: u64,
    rng: &mut R,
) -> Result<(ObservedClip, Vec<InteractionAnnotation>)> {
    if frames.len() < cfg.clip_len {
        return Err(Error::Data(format!("clip needs {} frames, got {}", cfg.clip_len, frames.len())));
    }
    let frames = &frames[frames.len() - cfg.clip_len..];
    let last = frames.last().expect("clip_len is positive");
    let raw = (last.height(), last.width());
    if frames.iter().any(|f| (f.height(), f.width()) != raw) {
        return Err(Error::Data("frames of a clip differ in size".into()));
    }
    let hw = still_size(cfg, mode, raw, rng)?;
    let vhw = video_size(cfg, hw);
    let still = normalize(&resized(last, hw), cfg.still_mean, cfg.still_std);
    let mut video = Tensor::zeros(&[3, cfg.clip_len, vhw.0, vhw.1]);
    let plane = vhw.0 * vhw.1;
    for (i, f) in frames.iter().enumerate() {
        let t = normalize(&resized(f, vhw), cfg.video_mean, cfg.video_std);
        for c in 0..3 {
            let dst = (c * cfg.clip_len + i) * plane;
            video.data_mut()[dst..dst + plane].copy_from_slice(&t.data()[c * plane..(c + 1) * plane]);
        }
    }
    let (sx, sy) = (hw.1 as f64 / raw.1 as f64, hw.0 as f64 / raw.0 as f64);
    let mut boxes = Vec::with_capacity(annotations.len());
    for a in annotations {
        match a.bbox.scaled(sx, sy).clipped(hw.1 as f64, hw.0 as f64) {
            Some(bbox) => boxes.push(InteractionAnnotation { bbox, ..*a }),
            None => log::warn!("annotation box {:?} falls outside the frame and is dropped", a.bbox),
        }
    }
    let clip = ObservedClip {
        still,
        video,
        timestamp: frame_index as f64 / frame_rate,
        frame_rate,
        tau_o: (cfg.clip_len * cfg.clip_stride) as f64 / frame_rate,
    };
    Ok((clip, boxes))
}

/// A dataset directory with its parsed annotation file.
#[derive(Clone, Debug)]
pub struct DatasetDir {
    pub root: PathBuf,
    pub annotations: AnnotationSet,
}

impl DatasetDir {
    pub fn open(root: &Path) -> Result<Self> {
        let path = root.join(ANNOTATION_FILE);
        if !path.is_file() {
            return Err(Error::Data(format!("no {ANNOTATION_FILE} in {}", root.display())));
        }
        Ok(Self {
            root: root.to_path_buf(),
            annotations: read_annotation_file(&path)?,
        })
    }

    pub fn len(&self) -> usize {
        self.annotations.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.annotations.samples.is_empty()
    }

    pub fn frame_path(&self, video: &str, frame: u64) -> PathBuf {
        self.root.join(FRAMES_DIR).join(video).join(format!("{frame:06}.png"))
    }

    /// Raw frames of the clip ending at the sample's frame.
    pub fn load_frames(&self, record: &SampleRecord, clip_len: usize, stride: usize) -> Result<Vec<RgbImage>> {
        sample_clip(record.frame, clip_len, stride)
            .into_iter()
            .map(|f| {
                let path = self.frame_path(&record.video, f);
                image::open(&path)
                    .map(|i| i.to_rgb8())
                    .map_err(|e| Error::Data(format!("{}: {e}", path.display())))
            })
            .collect()
    }

    /// Decodes every clip once.
    pub fn load_raw(&self, clip_len: usize, stride: usize) -> Result<Vec<RawSample>> {
        self.annotations
            .samples
            .iter()
            .map(|r| {
                Ok(RawSample {
                    record: r.clone(),
                    frames: self.load_frames(r, clip_len, stride)?,
                })
            })
            .collect()
    }
}

/// Decoded frames of one clip with its annotation record.
#[derive(Clone, Debug)]
pub struct RawSample {
    pub record: SampleRecord,
    pub frames: Vec<RgbImage>,
}

impl RawSample {
    pub fn preprocess<R: Rng + ?Sized>(&self, cfg: &PreprocessConfig, mode: Mode, frame_rate: f64, rng: &mut R) -> Result<Sample> {
        let (clip, annotations) = preprocess(&self.frames, &self.record.annotations, cfg, mode, frame_rate, self.record.frame, rng)?;
        Ok(Sample {
            uid: self.record.uid.clone(),
            clip,
            annotations,
        })
    }
}

/// Object shapes the synthetic renderer knows.
pub const SHAPES: [&str; 5] = ["square", "disc", "triangle", "diamond", "cross"];

const SHAPE_COLOURS: [[u8; 3]; 5] = [[200, 60, 60], [60, 170, 60], [70, 90, 220], [210, 190, 50], [170, 70, 190]];
const HAND_COLOUR: [u8; 3] = [245, 245, 245];
const BACKGROUND_LEVEL: u8 = 40;

/// Hand speed range of one verb, in px/frame.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MotionRule {
    pub verb: String,
    pub speed: [f64; 2],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSceneSpec {
    pub canvas_width: u32,
    pub canvas_height: u32,
    /// Inclusive object count range.
    pub objects: [usize; 2],
    /// Object side range in px.
    pub object_size: [f64; 2],
    /// Noun of each shape, by shape name.
    pub nouns: Vec<String>,
    pub verbs: Vec<MotionRule>,
    pub hand_size: f64,
    /// Gap between hand and target at t, in px.
    pub contact_gap: [f64; 2],
    /// Maximum object drift in px/frame.
    pub drift: f64,
    pub frame_rate: f64,
    /// Frames of hand motion rendered before t.
    pub lead_frames: usize,
    /// A static hand next to every non-target object.
    pub decoy_hands: bool,
    pub noise: u8,
    pub seed: u64,
}

impl Default for SynthSceneSpec {
    fn default() -> Self {
        Self {
            canvas_width: 128,
            canvas_height: 128,
            objects: [2, 3],
            object_size: [16.0, 26.0],
            nouns: vec!["square".into(), "disc".into(), "triangle".into()],
            verbs: vec![
                MotionRule {
                    verb: "approach_slow".into(),
                    speed: [1.0, 2.0],
                },
                MotionRule {
                    verb: "approach_fast".into(),
                    speed: [5.0, 8.0],
                },
            ],
            hand_size: 8.0,
            contact_gap: [3.0, 12.0],
            drift: 0.3,
            frame_rate: 8.0,
            lead_frames: 8,
            decoy_hands: true,
            noise: 8,
            seed: 0,
        }
    }
}

impl SynthSceneSpec {
    pub fn from_toml(text: &str) -> Result<Self> {
        let spec: SynthSceneSpec = toml::from_str(text).map_err(|e| Error::Config(format!("synthetic spec: {e}")))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("spec serialises")
    }

    pub fn taxonomy(&self) -> Result<Taxonomy> {
        Taxonomy::new(self.nouns.clone(), self.verbs.iter().map(|v| v.verb.clone()).collect::<Vec<_>>())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("synthetic spec: {m}")));
        if self.nouns.len() < 2 || self.verbs.len() < 2 {
            return bad("needs at least 2 nouns and 2 verbs".into());
        }
        for n in &self.nouns {
            if !SHAPES.contains(&n.as_str()) {
                return bad(format!("unknown shape `{n}`; known shapes are {SHAPES:?}"));
            }
        }
        self.taxonomy()?;
        if self.objects[0] == 0 || self.objects[0] > self.objects[1] {
            return bad(format!("object range {:?} is empty", self.objects));
        }
        let pos = |r: [f64; 2]| r[0] > 0.0 && r[0] <= r[1] && r[1].is_finite();
        if !pos(self.object_size) || !pos(self.contact_gap) || self.verbs.iter().any(|v| !pos(v.speed)) {
            return bad("ranges must be positive and ordered".into());
        }
        if !(self.hand_size > 0.0) || !(self.frame_rate > 0.0) || !(self.drift >= 0.0) || self.lead_frames == 0 {
            return bad("hand_size, frame_rate and lead_frames must be positive, drift non-negative".into());
        }
        let need = self.object_size[1] + 2.0 * (self.contact_gap[1] + self.hand_size);
        if (self.canvas_width.min(self.canvas_height) as f64) < need {
            return bad(format!(
                "canvas {}x{} too small for objects, gaps and hands (needs {need} px)",
                self.canvas_width, self.canvas_height
            ));
        }
        Ok(())
    }
}

/// Frames until the hand first touches the target, as seconds.
pub fn contact_ttc(gap: f64, speed: f64, frame_rate: f64) -> f64 {
    (gap / speed - 1e-9).ceil().max(1.0) / frame_rate
}

#[derive(Clone, Copy, Debug)]
struct Mover {
    /// Centre at frame t.
    centre: (f64, f64),
    /// px/frame.
    velocity: (f64, f64),
    half: (f64, f64),
}

impl Mover {
    fn at(&self, dt: f64) -> [f64; 4] {
        let (cx, cy) = (self.centre.0 + self.velocity.0 * dt, self.centre.1 + self.velocity.1 * dt);
        [cx - self.half.0, cy - self.half.1, cx + self.half.0, cy + self.half.1]
    }
}

fn overlaps(a: &[f64; 4], b: &[f64; 4], margin: f64) -> bool {
    a[0] - margin < b[2] && b[0] - margin < a[2] && a[1] - margin < b[3] && b[1] - margin < a[3]
}

fn inside(b: &[f64; 4], w: f64, h: f64) -> bool {
    b[0] >= 0.0 && b[1] >= 0.0 && b[2] <= w && b[3] <= h
}

/// Scene of one synthetic sample, with trajectories relative to frame t.
#[derive(Clone, Debug)]
pub struct SynthScene {
    pub t: u64,
    objects: Vec<(usize, Mover)>,
    target: usize,
    hand: Mover,
    decoys: Vec<Mover>,
    pub annotation: InteractionAnnotation,
    pub speed: f64,
    pub gap: f64,
}

impl SynthScene {
    /// Boxes of every object at frame `f`.
    pub fn object_boxes(&self, f: u64) -> Vec<[f64; 4]> {
        let dt = f as f64 - self.t as f64;
        self.objects.iter().map(|(_, m)| m.at(dt)).collect()
    }

    pub fn hand_box(&self, f: u64) -> [f64; 4] {
        self.hand.at(f as f64 - self.t as f64)
    }

    pub fn target_index(&self) -> usize {
        self.target
    }

    pub fn object_nouns(&self) -> Vec<usize> {
        self.objects.iter().map(|(n, _)| *n).collect()
    }

    fn render(&self, spec: &SynthSceneSpec, f: u64, rng: &mut ChaCha8Rng) -> RgbImage {
        let (w, h) = (spec.canvas_width, spec.canvas_height);
        let mut img = RgbImage::from_pixel(w, h, Rgb([BACKGROUND_LEVEL; 3]));
        if spec.noise > 0 {
            for p in img.pixels_mut() {
                let n = rng.gen_range(0..=spec.noise);
                *p = Rgb([BACKGROUND_LEVEL + n; 3]);
            }
        }
        let dt = f as f64 - self.t as f64;
        for (noun, m) in &self.objects {
            let shape = SHAPES.iter().position(|s| *s == spec.nouns[noun - 1]).expect("validated shape");
            fill(&mut img, &m.at(dt), shape, SHAPE_COLOURS[shape]);
        }
        for d in &self.decoys {
            fill(&mut img, &d.at(dt), 0, HAND_COLOUR);
        }
        fill(&mut img, &self.hand.at(dt), 0, HAND_COLOUR);
        img
    }
}

fn fill(img: &mut RgbImage, b: &[f64; 4], shape: usize, colour: [u8; 3]) {
    let (w, h) = (img.width() as i64, img.height() as i64);
    let (cx, cy) = ((b[0] + b[2]) / 2.0, (b[1] + b[3]) / 2.0);
    let (hx, hy) = ((b[2] - b[0]) / 2.0, (b[3] - b[1]) / 2.0);
    for y in (b[1].floor() as i64).max(0)..(b[3].ceil() as i64).min(h) {
        for x in (b[0].floor() as i64).max(0)..(b[2].ceil() as i64).min(w) {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            if px < b[0] || px >= b[2] || py < b[1] || py >= b[3] {
                continue;
            }
            let (u, v) = ((px - cx) / hx, (py - cy) / hy);
            let hit = match shape {
                0 => true,
                1 => u * u + v * v <= 1.0,
                2 => u.abs() <= (v + 1.0) / 2.0,
                3 => u.abs() + v.abs() <= 1.0,
                _ => u.abs() <= 0.35 || v.abs() <= 0.35,
            };
            if hit {
                img.put_pixel(x as u32, y as u32, Rgb(colour));
            }
        }
    }
}

/// Draws one scene. Fails if no valid layout is found after many attempts.
pub fn sample_scene(spec: &SynthSceneSpec, rng: &mut ChaCha8Rng) -> Result<SynthScene> {
    let (cw, ch) = (spec.canvas_width as f64, spec.canvas_height as f64);
    let t = spec.lead_frames as u64 + rng.gen_range(0..=2u64);
    let first = -(t as f64);
    let hs = spec.hand_size / 2.0;
    // Drawn once so layout rejections cannot skew the verb balance.
    let verb = rng.gen_range(0..spec.verbs.len());
    let speed = rng.gen_range(spec.verbs[verb].speed[0]..=spec.verbs[verb].speed[1]);
    'attempt: for _ in 0..1000 {
        let n = rng.gen_range(spec.objects[0]..=spec.objects[1]);
        let mut objects: Vec<(usize, Mover)> = Vec::with_capacity(n);
        while objects.len() < n {
            let mut placed = false;
            for _ in 0..100 {
                let side = rng.gen_range(spec.object_size[0]..=spec.object_size[1]);
                let half = (side / 2.0, side / 2.0);
                let centre = (rng.gen_range(half.0..cw - half.0), rng.gen_range(half.1..ch - half.1));
                let angle = rng.gen_range(0.0..std::f64::consts::TAU);
                let speed = rng.gen_range(0.0..=spec.drift);
                let m = Mover {
                    centre,
                    velocity: (speed * angle.cos(), speed * angle.sin()),
                    half,
                };
                let clear = objects.iter().all(|(_, o)| {
                    [first, 0.0].iter().all(|&dt| !overlaps(&o.at(dt), &m.at(dt), spec.contact_gap[1] + spec.hand_size))
                });
                if clear && inside(&m.at(first), cw, ch) && inside(&m.at(0.0), cw, ch) {
                    objects.push((rng.gen_range(1..=spec.nouns.len()), m));
                    placed = true;
                    break;
                }
            }
            if !placed {
                continue 'attempt;
            }
        }
        let target = rng.gen_range(0..n);
        let gap = rng.gen_range(spec.contact_gap[0]..=spec.contact_gap[1]);
        let hand = match approach(&objects[target].1, hs, gap, speed, rng) {
            Some(h) => h,
            None => continue,
        };
        let mut decoys = Vec::new();
        if spec.decoy_hands {
            for (i, (_, o)) in objects.iter().enumerate() {
                if i != target {
                    let g = rng.gen_range(spec.contact_gap[0]..=spec.contact_gap[1]);
                    match approach(o, hs, g, 0.0, rng) {
                        Some(d) => decoys.push(d),
                        None => continue 'attempt,
                    }
                }
            }
        }
        let hands: Vec<&Mover> = std::iter::once(&hand).chain(&decoys).collect();
        for dt in (0..=t).map(|k| first + k as f64) {
            for h in &hands {
                let hb = h.at(dt);
                if !inside(&hb, cw, ch) {
                    continue 'attempt;
                }
                for (_, o) in &objects {
                    if overlaps(&hb, &o.at(dt), 0.0) {
                        continue 'attempt;
                    }
                }
            }
            for (a, h) in hands.iter().enumerate() {
                for h2 in &hands[a + 1..] {
                    if overlaps(&h.at(dt), &h2.at(dt), 1.0) {
                        continue 'attempt;
                    }
                }
            }
        }
        let (noun, m) = objects[target];
        let annotation = InteractionAnnotation {
            bbox: BoundingBox::from_array(m.at(0.0))?,
            noun_id: noun,
            verb_id: verb + 1,
            ttc: contact_ttc(gap, speed, spec.frame_rate),
        };
        return Ok(SynthScene {
            t,
            objects,
            target,
            hand,
            decoys,
            annotation,
            speed,
            gap,
        });
    }
    Err(Error::Config("synthetic spec: no valid scene layout found; enlarge the canvas".into()))
}

/// A hand `gap` px from `target` at frame t, closing in at `speed` px/frame
/// relative to the target. Returns `None` if the direction is unusable.
fn approach(target: &Mover, hand_half: f64, gap: f64, speed: f64, rng: &mut ChaCha8Rng) -> Option<Mover> {
    let angle = rng.gen_range(0.0..std::f64::consts::TAU);
    let u = (angle.cos(), angle.sin());
    // Distance along u at which the two boxes just touch.
    let reach = |half: f64, c: f64| if c.abs() < 1e-9 { f64::INFINITY } else { (half + hand_half) / c.abs() };
    let touch = reach(target.half.0, u.0).min(reach(target.half.1, u.1));
    if !touch.is_finite() {
        return None;
    }
    // Gap is measured along the approach direction.
    let s = touch + gap;
    Some(Mover {
        centre: (target.centre.0 + u.0 * s, target.centre.1 + u.1 * s),
        velocity: (target.velocity.0 - u.0 * speed, target.velocity.1 - u.1 * speed),
        half: (hand_half, hand_half),
    })
}

/// Writes `n` synthetic samples to `out`. The result depends only on `spec`.
pub fn generate_synthetic(spec: &SynthSceneSpec, n: usize, out: &Path) -> Result<AnnotationSet> {
    spec.validate()?;
    let taxonomy = spec.taxonomy()?;
    fs::create_dir_all(out.join(FRAMES_DIR)).map_err(|e| Error::io(out, e))?;
    let mut samples = Vec::with_capacity(n);
    for i in 0..n {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        rng.set_stream(i as u64);
        let scene = sample_scene(spec, &mut rng)?;
        let uid = format!("synth_{i:05}");
        let dir = out.join(FRAMES_DIR).join(&uid);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        for f in 0..=scene.t {
            let img = scene.render(spec, f, &mut rng);
            let path = dir.join(format!("{f:06}.png"));
            img.save(&path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        }
        samples.push(SampleRecord {
            uid: uid.clone(),
            video: uid,
            frame: scene.t,
            annotations: vec![scene.annotation],
        });
    }
    let set = AnnotationSet { taxonomy, samples };
    write_annotation_file(&out.join(ANNOTATION_FILE), &set)?;
    let spec_path = out.join("synth_spec.toml");
    fs::write(&spec_path, spec.to_toml()).map_err(|e| Error::io(&spec_path, e))?;
    Ok(set)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn clip_indices() {
        assert_eq!(sample_clip(100, 16, 1), (85..=100).collect::<Vec<_>>());
        let mut early = vec![0; 13];
        early.extend([1, 2, 3]);
        assert_eq!(sample_clip(3, 16, 1), early);
        assert_eq!(sample_clip(100, 16, 2), (70..=100).step_by(2).collect::<Vec<_>>());
    }

    #[test]
    fn eval_sizes_follow_alpha() {
        let cfg = PreprocessConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let hw = still_size(&cfg, Mode::Eval, (1080, 1440), &mut rng).unwrap();
        assert_eq!(hw, (800, 1067));
        assert_eq!(video_size(&cfg, hw).0, 256);
        // Long side capped.
        assert_eq!(still_size(&cfg, Mode::Eval, (1000, 2000), &mut rng).unwrap(), (667, 1333));
        assert!(still_size(&cfg, Mode::Eval, (10, 1000), &mut rng).is_err());
    }

    #[test]
    fn train_short_side_comes_from_the_list() {
        let cfg = PreprocessConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..50 {
            let (h, _) = still_size(&cfg, Mode::Train, (480, 640), &mut rng).unwrap();
            assert!(cfg.train_short_sides.contains(&(h as u32)));
        }
    }

    #[test]
    fn mean_image_normalises_to_zero() {
        let mean = [0.485, 0.456, 0.406];
        // Exact 8-bit levels so the mean is representable.
        let levels = [124u8, 116, 104];
        let img = RgbImage::from_pixel(4, 3, Rgb(levels));
        let m = levels.map(|l| l as f64 / 255.0);
        let t = normalize(&img, m, [0.229, 0.224, 0.225]);
        assert!(t.data().iter().all(|&v| v == 0.0));
        let t = normalize(&img, mean, [0.229, 0.224, 0.225]);
        assert!(t.data().iter().all(|&v| v.abs() < 0.01));
    }

    #[test]
    fn preprocess_scales_boxes_and_shapes() {
        let cfg = PreprocessConfig {
            train_short_sides: vec![640],
            clip_len: 2,
            ..PreprocessConfig::default()
        };
        let frames = vec![RgbImage::new(40, 30); 3];
        let ann = InteractionAnnotation {
            bbox: BoundingBox::new(3.0, 6.0, 15.0, 24.0).unwrap(),
            noun_id: 1,
            verb_id: 1,
            ttc: 1.0,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (clip, boxes) = preprocess(&frames, &[ann], &cfg, Mode::Train, 8.0, 10, &mut rng).unwrap();
        assert_eq!(clip.still.shape(), &[3, 640, 853]);
        assert_eq!(clip.video.shape(), &[3, 2, 205, 273]);
        let f = 640.0 / 30.0;
        let b = boxes[0].bbox.to_array();
        let want = [3.0 * 853.0 / 40.0, 6.0 * f, 15.0 * 853.0 / 40.0, 24.0 * f];
        for k in 0..4 {
            assert!((b[k] - want[k]).abs() < 1e-9);
        }
        assert_eq!(clip.timestamp, 10.0 / 8.0);
        assert!(preprocess(&frames[..1], &[ann], &cfg, Mode::Eval, 8.0, 0, &mut rng).is_err());
    }

    #[test]
    fn ttc_unit_conversion() {
        assert_eq!(contact_ttc(96.0, 32.0, 8.0), 0.375);
        assert_eq!(contact_ttc(97.0, 32.0, 8.0), 0.5);
    }

    /// Steps the rendered trajectories forward until the hand box meets the
    /// target box.
    fn simulated_contact_frames(scene: &SynthScene) -> u64 {
        let target = scene.target_index();
        for k in 1..1000 {
            let f = scene.t + k;
            if overlaps(&scene.hand_box(f), &scene.object_boxes(f)[target], 1e-9) {
                return k;
            }
        }
        panic!("hand never reaches the target");
    }

    #[test]
    fn ttc_matches_simulated_contact() {
        let spec = SynthSceneSpec::default();
        for seed in 0..200 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let scene = sample_scene(&spec, &mut rng).unwrap();
            let frames = simulated_contact_frames(&scene) as f64;
            let ttc_frames = scene.annotation.ttc * spec.frame_rate;
            assert!((frames - ttc_frames).abs() <= 1.0, "seed {seed}: {frames} vs {ttc_frames}");
            for f in 0..=scene.t {
                assert!(!overlaps(&scene.hand_box(f), &scene.object_boxes(f)[scene.target_index()], 0.0));
            }
        }
    }

    #[test]
    fn identical_objects_are_separated_only_by_the_hand_motion() {
        let spec = SynthSceneSpec {
            nouns: vec!["square".into(), "disc".into()],
            objects: [2, 2],
            drift: 0.0,
            noise: 0,
            ..SynthSceneSpec::default()
        };
        let mut found = 0;
        for seed in 0..400 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let scene = sample_scene(&spec, &mut rng).unwrap();
            let nouns = scene.object_nouns();
            if nouns[0] != nouns[1] {
                continue;
            }
            found += 1;
            let boxes = scene.object_boxes(scene.t);
            assert_eq!(scene.annotation.bbox.to_array(), boxes[scene.target_index()]);
            // The still frame shows a static-looking hand next to each object;
            // only the previous frames tell them apart.
            let last = scene.render(&spec, scene.t, &mut rng);
            let hand_pixels = last.pixels().filter(|p| p.0 == HAND_COLOUR).count();
            let side = spec.hand_size as usize;
            assert!(hand_pixels >= 2 * (side - 1) * (side - 1));
            let moved = scene.hand_box(scene.t - 1) != scene.hand_box(scene.t);
            let decoy_moved = scene.decoys[0].at(-1.0) != scene.decoys[0].at(0.0);
            assert!(moved && !decoy_moved);
        }
        assert!(found > 10);
    }

    #[test]
    fn generation_is_deterministic_and_valid() {
        let spec = SynthSceneSpec::default();
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        generate_synthetic(&spec, 4, a.path()).unwrap();
        generate_synthetic(&spec, 4, b.path()).unwrap();
        let read = |p: &Path| fs::read(p).unwrap();
        assert_eq!(read(&a.path().join(ANNOTATION_FILE)), read(&b.path().join(ANNOTATION_FILE)));
        let ds = DatasetDir::open(a.path()).unwrap();
        let frames = ds.load_frames(&ds.annotations.samples[2], 8, 1).unwrap();
        let other = DatasetDir::open(b.path()).unwrap().load_frames(&ds.annotations.samples[2], 8, 1).unwrap();
        assert_eq!(frames, other);
        crate::datamodel::validate_annotation_file(&a.path().join(ANNOTATION_FILE), &spec.taxonomy().unwrap()).unwrap();
    }

    #[test]
    fn spec_validation() {
        assert!(SynthSceneSpec::from_toml("canvas_width = 32\ncanvas_height = 32").is_err());
        assert!(SynthSceneSpec::from_toml("colour = 3").is_err());
        assert!(SynthSceneSpec::from_toml("nouns = [\"square\"]").is_err());
        let s = SynthSceneSpec::from_toml("seed = 7").unwrap();
        assert_eq!(SynthSceneSpec::from_toml(&s.to_toml()).unwrap(), s);
    }

    proptest! {
        #[test]
        fn boxes_stay_inside_and_round_trip(
            w in 32u32..400, h in 32u32..400, x in 0.0..0.8f64, y in 0.0..0.8f64, bw in 0.05..0.2f64, bh in 0.05..0.2f64,
            short in 100u32..900,
        ) {
            let cfg = PreprocessConfig { train_short_sides: vec![short], clip_len: 1, max_long_side: 5000, ..PreprocessConfig::default() };
            let (wf, hf) = (w as f64, h as f64);
            prop_assume!((wf.max(hf) / wf.min(hf)) <= MAX_ASPECT);
            let b = BoundingBox::new(x * wf, y * hf, (x + bw) * wf, (y + bh) * hf).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let (sh, sw) = still_size(&cfg, Mode::Train, (h, w), &mut rng).unwrap();
            let (sx, sy) = (sw as f64 / wf, sh as f64 / hf);
            let fwd = b.scaled(sx, sy).clipped(sw as f64, sh as f64).unwrap();
            let a = fwd.to_array();
            prop_assert!(a[0] >= 0.0 && a[1] >= 0.0 && a[2] <= sw as f64 && a[3] <= sh as f64);
            let back = fwd.scaled(1.0 / sx, 1.0 / sy);
            let again = back.scaled(sx, sy);
            let d = again.to_array();
            for k in 0..4 {
                prop_assert!((d[k] - a[k]).abs() < 1.0);
            }
            prop_assert!((again.iou(&fwd) - 1.0).abs() < 1e-9);
        }
    }
}
