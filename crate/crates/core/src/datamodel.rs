//! Domain types and the canonical annotation / prediction file schemas.
//!
//! Annotation file:
//!
//! ```json
//! {"taxonomy": {"nouns": ["cup", ...], "verbs": ["take", ...]},
//!  "samples": [{"uid": "...", "video": "...", "frame": 17,
//!               "objects": [{"box": [x1, y1, x2, y2], "noun_id": 1, "verb_id": 2, "ttc": 0.5}]}]}
//! ```
//!
//! Prediction file:
//!
//! ```json
//! {"samples": [{"uid": "...", "predictions": [{"box": [...], "noun_id": 1, "verb_id": 2, "ttc": 0.5, "score": 0.7}]}]}
//! ```
//!
//! Class lists in the file omit the background class; id 0 is always
//! background and id `i > 0` names entry `i - 1` of the list.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Lowest score a prediction may carry to be emitted.
pub const SCORE_THRESHOLD: f64 = 0.05;

pub const BACKGROUND: &str = "background";

/// Noun and verb vocabularies, each with background at index 0.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "TaxonomyRecord", into = "TaxonomyRecord")]
pub struct Taxonomy {
    nouns: Vec<String>,
    verbs: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaxonomyRecord {
    pub nouns: Vec<String>,
    pub verbs: Vec<String>,
}

impl Taxonomy {
    /// Builds a taxonomy from the real (non-background) class names.
    pub fn new<S: Into<String>>(
        nouns: impl IntoIterator<Item = S>,
        verbs: impl IntoIterator<Item = S>,
    ) -> Result<Self> {
        let nouns = with_background("noun", nouns.into_iter().map(Into::into).collect())?;
        let verbs = with_background("verb", verbs.into_iter().map(Into::into).collect())?;
        Ok(Self { nouns, verbs })
    }

    /// Number of noun classes including background.
    pub fn num_nouns(&self) -> usize {
        self.nouns.len()
    }

    /// Number of verb classes including background.
    pub fn num_verbs(&self) -> usize {
        self.verbs.len()
    }

    pub fn noun_name(&self, id: usize) -> Option<&str> {
        self.nouns.get(id).map(String::as_str)
    }

    pub fn verb_name(&self, id: usize) -> Option<&str> {
        self.verbs.get(id).map(String::as_str)
    }

    pub fn real_nouns(&self) -> &[String] {
        &self.nouns[1..]
    }

    pub fn real_verbs(&self) -> &[String] {
        &self.verbs[1..]
    }
}

fn with_background(kind: &str, names: Vec<String>) -> Result<Vec<String>> {
    if names.is_empty() {
        return Err(Error::Taxonomy(format!(
            "{kind} list needs at least one class besides background"
        )));
    }
    let mut all = Vec::with_capacity(names.len() + 1);
    all.push(BACKGROUND.to_string());
    for n in names {
        if n.is_empty() {
            return Err(Error::Taxonomy(format!("empty {kind} class name")));
        }
        if all.contains(&n) {
            return Err(Error::Taxonomy(format!("duplicate {kind} class `{n}`")));
        }
        all.push(n);
    }
    Ok(all)
}

impl TryFrom<TaxonomyRecord> for Taxonomy {
    type Error = Error;

    fn try_from(r: TaxonomyRecord) -> Result<Self> {
        Taxonomy::new(r.nouns, r.verbs)
    }
}

impl From<Taxonomy> for TaxonomyRecord {
    fn from(t: Taxonomy) -> Self {
        TaxonomyRecord {
            nouns: t.real_nouns().to_vec(),
            verbs: t.real_verbs().to_vec(),
        }
    }
}

/// Corner-format box `(x1, y1, x2, y2)` in still-frame pixels, end-exclusive.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoundingBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BoundingBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        let b = Self { x1, y1, x2, y2 };
        b.check().map_err(Error::Invalid)?;
        Ok(b)
    }

    pub fn from_array(a: [f64; 4]) -> Result<Self> {
        Self::new(a[0], a[1], a[2], a[3])
    }

    fn check(&self) -> std::result::Result<(), String> {
        let v = [self.x1, self.y1, self.x2, self.y2];
        if v.iter().any(|c| !c.is_finite()) {
            return Err(format!("non-finite box coordinate in {v:?}"));
        }
        if v.iter().any(|&c| c < 0.0) {
            return Err(format!("negative box coordinate in {v:?}"));
        }
        if !(self.x1 < self.x2 && self.y1 < self.y2) {
            return Err(format!("degenerate box {v:?}: need x1 < x2 and y1 < y2"));
        }
        Ok(())
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        (0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))
    }

    pub fn iou(&self, other: &BoundingBox) -> f64 {
        iou(&self.to_array(), &other.to_array())
    }

    /// Scales x and y coordinates independently.
    pub fn scaled(&self, sx: f64, sy: f64) -> BoundingBox {
        BoundingBox {
            x1: self.x1 * sx,
            y1: self.y1 * sy,
            x2: self.x2 * sx,
            y2: self.y2 * sy,
        }
    }

    /// Clips to `[0, width] × [0, height]`; `None` if nothing remains.
    pub fn clipped(&self, width: f64, height: f64) -> Option<BoundingBox> {
        let b = BoundingBox {
            x1: self.x1.clamp(0.0, width),
            y1: self.y1.clamp(0.0, height),
            x2: self.x2.clamp(0.0, width),
            y2: self.y2.clamp(0.0, height),
        };
        (b.x1 < b.x2 && b.y1 < b.y2).then_some(b)
    }
}

/// Intersection over union of two corner-format boxes.
pub fn iou(a: &[f64; 4], b: &[f64; 4]) -> f64 {
    let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = iw * ih;
    if inter <= 0.0 {
        return 0.0;
    }
    let area_a = (a[2] - a[0]) * (a[3] - a[1]);
    let area_b = (b[2] - b[0]) * (b[3] - b[1]);
    inter / (area_a + area_b - inter)
}

/// Ground-truth next-active object.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InteractionAnnotation {
    pub bbox: BoundingBox,
    pub noun_id: usize,
    pub verb_id: usize,
    /// Seconds from the last observed frame to contact.
    pub ttc: f64,
}

/// One anticipated interaction emitted by a model.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StaPrediction {
    pub bbox: BoundingBox,
    pub noun_id: usize,
    pub verb_id: usize,
    pub ttc: f64,
    pub score: f64,
}

impl StaPrediction {
    /// Checks the emission invariants: score in `[0.05, 1]`, positive ttc,
    /// non-background ids and a valid box.
    pub fn validate(&self) -> std::result::Result<(), String> {
        self.bbox.check()?;
        if !(self.score >= SCORE_THRESHOLD && self.score <= 1.0) {
            return Err(format!(
                "score {} outside [{SCORE_THRESHOLD}, 1]",
                self.score
            ));
        }
        if !(self.ttc > 0.0 && self.ttc.is_finite()) {
            return Err(format!("non-positive ttc {}", self.ttc));
        }
        if self.noun_id == 0 || self.verb_id == 0 {
            return Err("background class ids cannot be predicted".into());
        }
        Ok(())
    }
}

/// A still frame plus the low-resolution clip ending at it.
#[derive(Clone, Debug, PartialEq)]
pub struct ObservedClip {
    /// Normalised `[3, H, W]` frame at time t.
    pub still: Tensor,
    /// Normalised `[3, T, h, w]` clip; its last frame is time t.
    pub video: Tensor,
    /// Seconds.
    pub timestamp: f64,
    /// Hz.
    pub frame_rate: f64,
    /// Observed duration in seconds.
    pub tau_o: f64,
}

impl ObservedClip {
    pub fn still_size(&self) -> (usize, usize) {
        let (_, h, w) = self.still.chw();
        (h, w)
    }
}

/// Per-sample annotation metadata from an annotation file.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleRecord {
    pub uid: String,
    pub video: String,
    /// Frame index of time t.
    pub frame: u64,
    pub annotations: Vec<InteractionAnnotation>,
}

/// A preprocessed sample ready for the model.
#[derive(Clone, Debug)]
pub struct Sample {
    pub uid: String,
    pub clip: ObservedClip,
    /// Boxes in the coordinate space of `clip.still`.
    pub annotations: Vec<InteractionAnnotation>,
}

/// A parsed and validated annotation file.
#[derive(Clone, Debug, PartialEq)]
pub struct AnnotationSet {
    pub taxonomy: Taxonomy,
    pub samples: Vec<SampleRecord>,
}

/// Predictions for one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct SamplePredictions {
    pub uid: String,
    pub predictions: Vec<StaPrediction>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PredictionSet {
    pub samples: Vec<SamplePredictions>,
}

// Raw on-disk records. Field names are normative.

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AnnotationFileRecord {
    taxonomy: TaxonomyRecord,
    samples: Vec<SampleFileRecord>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SampleFileRecord {
    uid: String,
    video: String,
    frame: u64,
    objects: Vec<ObjectRecord>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ObjectRecord {
    #[serde(rename = "box")]
    bbox: [f64; 4],
    noun_id: usize,
    verb_id: usize,
    ttc: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PredictionFileRecord {
    samples: Vec<SamplePredictionRecord>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SamplePredictionRecord {
    uid: String,
    predictions: Vec<PredictionRecord>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PredictionRecord {
    #[serde(rename = "box")]
    bbox: [f64; 4],
    noun_id: usize,
    verb_id: usize,
    ttc: f64,
    score: f64,
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })?;
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn check_annotation(
    uid: &str,
    index: usize,
    obj: &ObjectRecord,
    taxonomy: &Taxonomy,
) -> Result<InteractionAnnotation> {
    let field = |name: &str| format!("objects[{index}].{name}");
    let bbox = BoundingBox::from_array(obj.bbox).map_err(|e| Error::schema(uid, field("box"), e.to_string()))?;
    if obj.noun_id == 0 {
        return Err(Error::schema(uid, field("noun_id"), "background not annotatable"));
    }
    if obj.noun_id >= taxonomy.num_nouns() {
        return Err(Error::schema(
            uid,
            field("noun_id"),
            format!("unknown class id {}", obj.noun_id),
        ));
    }
    if obj.verb_id == 0 {
        return Err(Error::schema(uid, field("verb_id"), "background not annotatable"));
    }
    if obj.verb_id >= taxonomy.num_verbs() {
        return Err(Error::schema(
            uid,
            field("verb_id"),
            format!("unknown class id {}", obj.verb_id),
        ));
    }
    if !(obj.ttc > 0.0 && obj.ttc.is_finite()) {
        return Err(Error::schema(uid, field("ttc"), format!("non-positive ttc {}", obj.ttc)));
    }
    Ok(InteractionAnnotation {
        bbox,
        noun_id: obj.noun_id,
        verb_id: obj.verb_id,
        ttc: obj.ttc,
    })
}

/// Parses an annotation file and checks every sample against `taxonomy`.
///
/// The file's own taxonomy must equal `taxonomy`. Sample order is preserved.
pub fn validate_annotation_file(path: &Path, taxonomy: &Taxonomy) -> Result<Vec<SampleRecord>> {
    let set = read_annotation_file_with(path, Some(taxonomy))?;
    Ok(set.samples)
}

/// Parses and validates an annotation file against its embedded taxonomy.
pub fn read_annotation_file(path: &Path) -> Result<AnnotationSet> {
    read_annotation_file_with(path, None)
}

fn read_annotation_file_with(path: &Path, expected: Option<&Taxonomy>) -> Result<AnnotationSet> {
    let raw: AnnotationFileRecord = read_json(path)?;
    let taxonomy = Taxonomy::try_from(raw.taxonomy)?;
    if let Some(expected) = expected {
        if &taxonomy != expected {
            return Err(Error::Taxonomy(format!(
                "{} declares a taxonomy different from the expected one",
                path.display()
            )));
        }
    }
    let mut seen = std::collections::HashSet::new();
    let mut samples = Vec::with_capacity(raw.samples.len());
    for s in raw.samples {
        if s.uid.is_empty() {
            return Err(Error::schema("<empty>", "uid", "empty sample uid"));
        }
        if !seen.insert(s.uid.clone()) {
            return Err(Error::schema(&s.uid, "uid", "duplicate sample uid"));
        }
        let annotations = s
            .objects
            .iter()
            .enumerate()
            .map(|(i, o)| check_annotation(&s.uid, i, o, &taxonomy))
            .collect::<Result<Vec<_>>>()?;
        samples.push(SampleRecord {
            uid: s.uid,
            video: s.video,
            frame: s.frame,
            annotations,
        });
    }
    Ok(AnnotationSet { taxonomy, samples })
}

pub fn write_annotation_file(path: &Path, set: &AnnotationSet) -> Result<()> {
    let raw = AnnotationFileRecord {
        taxonomy: set.taxonomy.clone().into(),
        samples: set
            .samples
            .iter()
            .map(|s| SampleFileRecord {
                uid: s.uid.clone(),
                video: s.video.clone(),
                frame: s.frame,
                objects: s
                    .annotations
                    .iter()
                    .map(|a| ObjectRecord {
                        bbox: a.bbox.to_array(),
                        noun_id: a.noun_id,
                        verb_id: a.verb_id,
                        ttc: a.ttc,
                    })
                    .collect(),
            })
            .collect(),
    };
    write_json(path, &raw)
}

/// Writes predictions after checking every emission invariant.
///
/// Values are written with round-trip-exact float formatting.
pub fn serialize_predictions(preds: &PredictionSet, path: &Path) -> Result<()> {
    let mut samples = Vec::with_capacity(preds.samples.len());
    for s in &preds.samples {
        let mut records = Vec::with_capacity(s.predictions.len());
        for (i, p) in s.predictions.iter().enumerate() {
            p.validate()
                .map_err(|m| Error::schema(&s.uid, format!("predictions[{i}]"), m))?;
            records.push(PredictionRecord {
                bbox: p.bbox.to_array(),
                noun_id: p.noun_id,
                verb_id: p.verb_id,
                ttc: p.ttc,
                score: p.score,
            });
        }
        samples.push(SamplePredictionRecord {
            uid: s.uid.clone(),
            predictions: records,
        });
    }
    write_json(path, &PredictionFileRecord { samples })
}

pub fn read_predictions(path: &Path) -> Result<PredictionSet> {
    let raw: PredictionFileRecord = read_json(path)?;
    let mut seen = std::collections::HashSet::new();
    let mut samples = Vec::with_capacity(raw.samples.len());
    for s in raw.samples {
        if !seen.insert(s.uid.clone()) {
            return Err(Error::schema(&s.uid, "uid", "duplicate sample uid"));
        }
        let mut predictions = Vec::with_capacity(s.predictions.len());
        for (i, r) in s.predictions.into_iter().enumerate() {
            let field = format!("predictions[{i}]");
            let bbox = BoundingBox::from_array(r.bbox).map_err(|e| Error::schema(&s.uid, &field, e.to_string()))?;
            let p = StaPrediction {
                bbox,
                noun_id: r.noun_id,
                verb_id: r.verb_id,
                ttc: r.ttc,
                score: r.score,
            };
            p.validate().map_err(|m| Error::schema(&s.uid, &field, m))?;
            predictions.push(p);
        }
        samples.push(SamplePredictions { uid: s.uid, predictions });
    }
    Ok(PredictionSet { samples })
}
