//! Top-K mean Average Precision for next-active-object predictions.
//!
//! Four matching settings are evaluated: noun only, noun + verb,
//! noun + time to contact, and all three ("overall"). Within a sample, up
//! to `K − 1` of the highest-scored predictions that match no ground truth
//! are ignored rather than counted as false positives.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::datamodel::{
    read_annotation_file, read_predictions, AnnotationSet, InteractionAnnotation, PredictionSet,
    StaPrediction,
};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatchCriteria {
    pub iou_threshold: f64,
    pub require_verb: bool,
    pub require_ttc: bool,
    /// Seconds; `|ttc_pred − ttc_gt| ≤ tolerance` counts as a match.
    pub ttc_tolerance: f64,
    pub k: usize,
}

impl Default for MatchCriteria {
    fn default() -> Self {
        Self {
            iou_threshold: 0.5,
            require_verb: false,
            require_ttc: false,
            ttc_tolerance: 0.25,
            k: 5,
        }
    }
}

impl MatchCriteria {
    pub fn validate(&self) -> Result<()> {
        if !(self.iou_threshold > 0.0 && self.iou_threshold < 1.0) {
            return Err(Error::Invalid(format!(
                "iou threshold {} outside (0, 1)",
                self.iou_threshold
            )));
        }
        if !(self.ttc_tolerance > 0.0) {
            return Err(Error::Invalid(format!(
                "ttc tolerance {} must be positive",
                self.ttc_tolerance
            )));
        }
        if self.k == 0 {
            return Err(Error::Invalid("K must be at least 1".into()));
        }
        Ok(())
    }

    fn accepts(&self, p: &StaPrediction, g: &InteractionAnnotation) -> Option<f64> {
        if p.noun_id != g.noun_id {
            return None;
        }
        if self.require_verb && p.verb_id != g.verb_id {
            return None;
        }
        if self.require_ttc && (p.ttc - g.ttc).abs() > self.ttc_tolerance {
            return None;
        }
        let iou = p.bbox.iou(&g.bbox);
        (iou >= self.iou_threshold).then_some(iou)
    }
}

/// Shared knobs of the four criteria settings.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSettings {
    pub iou_threshold: f64,
    pub ttc_tolerance: f64,
    pub k: usize,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            iou_threshold: 0.5,
            ttc_tolerance: 0.25,
            k: 5,
        }
    }
}

impl EvalSettings {
    /// Criteria for noun, noun+verb, noun+ttc and overall, in that order.
    pub fn criteria(&self) -> [MatchCriteria; 4] {
        let base = MatchCriteria {
            iou_threshold: self.iou_threshold,
            require_verb: false,
            require_ttc: false,
            ttc_tolerance: self.ttc_tolerance,
            k: self.k,
        };
        [
            base,
            MatchCriteria {
                require_verb: true,
                ..base
            },
            MatchCriteria {
                require_ttc: true,
                ..base
            },
            MatchCriteria {
                require_verb: true,
                require_ttc: true,
                ..base
            },
        ]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum MatchLabel {
    TruePositive,
    FalsePositive,
    Ignored,
}

/// Outcome of matching one sample's predictions.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleMatch {
    /// Label per prediction, in input order.
    pub labels: Vec<MatchLabel>,
    /// Matched ground-truth index per prediction, in input order.
    pub matched_gt: Vec<Option<usize>>,
    /// Whether each ground truth was matched.
    pub gt_matched: Vec<bool>,
    /// Position of each prediction in the sample's score ranking.
    pub rank: Vec<usize>,
}

/// Prediction indices ordered by score (desc), box area (desc), input order.
pub fn rank_predictions(preds: &[StaPrediction]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&a, &b| {
        let (pa, pb) = (&preds[a], &preds[b]);
        pb.score
            .total_cmp(&pa.score)
            .then_with(|| pb.bbox.area().total_cmp(&pa.bbox.area()))
            .then_with(|| a.cmp(&b))
    });
    order
}

/// Greedy score-ordered matching with the top-K ignore rule.
pub fn match_sample(
    preds: &[StaPrediction],
    gts: &[InteractionAnnotation],
    criteria: &MatchCriteria,
) -> SampleMatch {
    let order = rank_predictions(preds);
    let mut rank = vec![0; preds.len()];
    for (r, &i) in order.iter().enumerate() {
        rank[i] = r;
    }
    let mut gt_matched = vec![false; gts.len()];
    let mut matched_gt = vec![None; preds.len()];
    for &i in &order {
        let mut best: Option<(usize, f64)> = None;
        for (j, g) in gts.iter().enumerate() {
            if gt_matched[j] {
                continue;
            }
            if let Some(iou) = criteria.accepts(&preds[i], g) {
                if best.is_none_or(|(_, b)| iou > b) {
                    best = Some((j, iou));
                }
            }
        }
        if let Some((j, _)) = best {
            gt_matched[j] = true;
            matched_gt[i] = Some(j);
        }
    }
    let mut labels = vec![MatchLabel::FalsePositive; preds.len()];
    let mut unmatched_seen = 0;
    for &i in &order {
        labels[i] = if matched_gt[i].is_some() {
            MatchLabel::TruePositive
        } else if unmatched_seen < criteria.k - 1 {
            unmatched_seen += 1;
            MatchLabel::Ignored
        } else {
            unmatched_seen += 1;
            MatchLabel::FalsePositive
        };
    }
    SampleMatch {
        labels,
        matched_gt,
        gt_matched,
        rank,
    }
}

/// One non-ignored prediction of a class, for AP accumulation.
#[derive(Clone, Debug, PartialEq)]
pub struct ApEntry {
    pub score: f64,
    pub uid: String,
    /// Rank inside its sample; breaks score ties deterministically.
    pub rank: usize,
    pub true_positive: bool,
}

/// Orders entries by score (desc), then sample uid, then in-sample rank.
pub fn sort_entries(entries: &mut [ApEntry]) {
    entries.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then_with(|| a.uid.cmp(&b.uid))
            .then_with(|| a.rank.cmp(&b.rank))
    });
}

/// All-point interpolated average precision.
///
/// `entries` must exclude ignored predictions. Returns `None` when the class
/// has no ground truth.
pub fn average_precision(entries: &[ApEntry], num_gt: usize) -> Option<f64> {
    if num_gt == 0 {
        return None;
    }
    let mut sorted = entries.to_vec();
    sort_entries(&mut sorted);
    let mut precision = Vec::with_capacity(sorted.len());
    let (mut tp, mut fp) = (0usize, 0usize);
    for e in &sorted {
        if e.true_positive {
            tp += 1;
        } else {
            fp += 1;
        }
        precision.push(tp as f64 / (tp + fp) as f64);
    }
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let total: f64 = sorted
        .iter()
        .zip(&precision)
        .filter(|(e, _)| e.true_positive)
        .map(|(_, p)| *p)
        .sum();
    Some(total / num_gt as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassAp {
    pub noun_id: usize,
    pub noun: String,
    pub num_gt: usize,
    /// Per-criteria AP in percent: noun, noun+verb, noun+ttc, overall.
    /// `None` when the class has no ground truth.
    pub ap: [Option<f64>; 4],
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalCounts {
    pub samples: usize,
    pub predictions: usize,
    pub ground_truth: usize,
    /// Noun classes with at least one ground-truth instance.
    pub evaluated_classes: usize,
}

/// Top-K mAP report; all values in percent.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub k: usize,
    pub map_noun: f64,
    pub map_noun_verb: f64,
    pub map_noun_ttc: f64,
    pub map_overall: f64,
    pub per_class: Vec<ClassAp>,
    pub counts: EvalCounts,
}

impl EvalReport {
    /// The four headline values in fixed order.
    pub fn values(&self) -> [f64; 4] {
        [
            self.map_noun,
            self.map_noun_verb,
            self.map_noun_ttc,
            self.map_overall,
        ]
    }

    /// Fixed-order text table of the four headline values.
    pub fn table(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!("Top-{} mAP (%)\n", self.k));
        for (name, v) in ["Noun", "Noun+Verb", "Noun+TTC", "Overall"]
            .iter()
            .zip(self.values())
        {
            s.push_str(&format!("{name:<10} {v:>7.2}\n"));
        }
        s
    }

    /// Per-class AP table as CSV.
    pub fn per_class_csv(&self) -> String {
        let mut s = String::from("noun_id,noun,num_gt,ap_noun,ap_noun_verb,ap_noun_ttc,ap_overall\n");
        for c in &self.per_class {
            let cell = |v: Option<f64>| v.map(|x| format!("{x:.4}")).unwrap_or_default();
            s.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                c.noun_id,
                c.noun,
                c.num_gt,
                cell(c.ap[0]),
                cell(c.ap[1]),
                cell(c.ap[2]),
                cell(c.ap[3])
            ));
        }
        s
    }
}

/// Evaluates in-memory predictions against annotations.
pub fn evaluate_sets(
    preds: &PredictionSet,
    anns: &AnnotationSet,
    settings: &EvalSettings,
) -> Result<EvalReport> {
    let criteria = settings.criteria();
    for c in &criteria {
        c.validate()?;
    }
    let by_uid: HashMap<&str, &[StaPrediction]> = preds
        .samples
        .iter()
        .map(|s| (s.uid.as_str(), s.predictions.as_slice()))
        .collect();
    if by_uid.len() != preds.samples.len() {
        return Err(Error::Data("duplicate uid in predictions".into()));
    }
    for s in &anns.samples {
        if !by_uid.contains_key(s.uid.as_str()) {
            return Err(Error::Data(format!("uid mismatch: no predictions for sample {}", s.uid)));
        }
    }
    if preds.samples.len() != anns.samples.len() {
        let known: std::collections::HashSet<&str> = anns.samples.iter().map(|s| s.uid.as_str()).collect();
        let extra = preds
            .samples
            .iter()
            .find(|s| !known.contains(s.uid.as_str()))
            .map(|s| s.uid.clone())
            .unwrap_or_default();
        return Err(Error::Data(format!("uid mismatch: predictions for unknown sample {extra}")));
    }
    let num_nouns = anns.taxonomy.num_nouns();
    let num_verbs = anns.taxonomy.num_verbs();
    for s in &preds.samples {
        for p in &s.predictions {
            if p.noun_id >= num_nouns || p.verb_id >= num_verbs {
                return Err(Error::Taxonomy(format!(
                    "sample {}: prediction ids (noun {}, verb {}) outside the annotation taxonomy",
                    s.uid, p.noun_id, p.verb_id
                )));
            }
        }
    }

    let mut num_gt: BTreeMap<usize, usize> = BTreeMap::new();
    for s in &anns.samples {
        for a in &s.annotations {
            *num_gt.entry(a.noun_id).or_default() += 1;
        }
    }

    let mut aps: Vec<BTreeMap<usize, f64>> = Vec::with_capacity(4);
    for c in &criteria {
        let mut entries: BTreeMap<usize, Vec<ApEntry>> = BTreeMap::new();
        for s in &anns.samples {
            let p = by_uid[s.uid.as_str()];
            let m = match_sample(p, &s.annotations, c);
            for (i, pred) in p.iter().enumerate() {
                if m.labels[i] == MatchLabel::Ignored {
                    continue;
                }
                entries.entry(pred.noun_id).or_default().push(ApEntry {
                    score: pred.score,
                    uid: s.uid.clone(),
                    rank: m.rank[i],
                    true_positive: m.labels[i] == MatchLabel::TruePositive,
                });
            }
        }
        let mut per_class = BTreeMap::new();
        for (&noun, &n) in &num_gt {
            let e = entries.get(&noun).map(Vec::as_slice).unwrap_or(&[]);
            if let Some(ap) = average_precision(e, n) {
                per_class.insert(noun, ap);
            }
        }
        aps.push(per_class);
    }

    let mean = |m: &BTreeMap<usize, f64>| {
        if m.is_empty() {
            0.0
        } else {
            100.0 * m.values().sum::<f64>() / m.len() as f64
        }
    };
    let per_class = num_gt
        .iter()
        .map(|(&noun, &n)| ClassAp {
            noun_id: noun,
            noun: anns.taxonomy.noun_name(noun).unwrap_or("?").to_string(),
            num_gt: n,
            ap: [0, 1, 2, 3].map(|i| aps[i].get(&noun).map(|v| 100.0 * v)),
        })
        .collect();
    Ok(EvalReport {
        k: settings.k,
        map_noun: mean(&aps[0]),
        map_noun_verb: mean(&aps[1]),
        map_noun_ttc: mean(&aps[2]),
        map_overall: mean(&aps[3]),
        per_class,
        counts: EvalCounts {
            samples: anns.samples.len(),
            predictions: preds.samples.iter().map(|s| s.predictions.len()).sum(),
            ground_truth: num_gt.values().sum(),
            evaluated_classes: num_gt.len(),
        },
    })
}

/// Evaluates a prediction file against an annotation file.
pub fn evaluate(pred_file: &Path, ann_file: &Path, settings: &EvalSettings) -> Result<EvalReport> {
    let anns = read_annotation_file(ann_file)?;
    let preds = read_predictions(pred_file)?;
    evaluate_sets(&preds, &anns, settings)
}
