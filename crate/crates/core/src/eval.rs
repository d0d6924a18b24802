//! Zero-shot evaluation (FA@k / TA@k against text prototypes), cosine
//! similarity matrices, step-size sweep curves, and the evaluation-cost
//! scaling harness.

use crate::data::Prototypes;
use crate::error::{Error, Result};
use crate::model::{DualEncoderModel, LayerId};
use crate::objectives::{LayerGrad, PairBatch};
use crate::tensor::{clamp_unit, dot, l2_normalize_in_place, Tensor};
use crate::unlearn::apply_layer_edit;
use serde::{Deserialize, Serialize};
use std::time::{Duration, Instant};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptAccuracy {
    pub concept: u32,
    pub samples: usize,
    pub top1_correct: usize,
    pub top5_correct: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Top-1 accuracy over forget-concept samples (lower is better after
    /// unlearning).
    pub fa1: f64,
    pub fa5: f64,
    /// Top-1 accuracy over retain-concept samples.
    pub ta1: f64,
    pub per_concept: Vec<ConceptAccuracy>,
    pub validation_size: usize,
    /// Wall-clock of the evaluation. Not serialized: report files must be
    /// bit-identical across reruns.
    #[serde(skip)]
    pub wall_clock: Duration,
}

/// Rank of the true concept among all prototypes for one embedded sample:
/// the number of concepts beating it by score, ties broken toward the lower
/// concept index.
fn true_rank(scores: &[f64], truth: usize) -> usize {
    let s = scores[truth];
    scores
        .iter()
        .enumerate()
        .filter(|&(j, &v)| v > s || (v == s && j < truth))
        .count()
}

fn prototype_embeddings(
    model: &DualEncoderModel,
    prototypes: &Prototypes,
) -> Result<Vec<Vec<f64>>> {
    (0..prototypes.concept_count())
        .map(|c| model.forward_text(prototypes.text.row(c)))
        .collect()
}

/// Zero-shot classification of every sample against the text prototypes:
/// embed the image, rank concepts by cosine, and score top-k membership
/// separately over forget-concept and retain-concept samples.
pub fn zero_shot_eval(
    model: &DualEncoderModel,
    batch: &PairBatch,
    prototypes: &Prototypes,
    forget_concepts: &[u32],
) -> Result<EvalReport> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch("zero_shot_eval"));
    }
    let started = Instant::now();
    let k = prototypes.concept_count() as u32;
    if let Some(&missing) = batch.labels.iter().find(|&&l| l >= k) {
        return Err(Error::MissingPrototype(missing));
    }
    let proto_emb = prototype_embeddings(model, prototypes)?;

    let mut per_concept: Vec<ConceptAccuracy> = (0..k)
        .map(|concept| ConceptAccuracy {
            concept,
            samples: 0,
            top1_correct: 0,
            top5_correct: 0,
        })
        .collect();
    for i in 0..batch.len() {
        let v = model.forward_vision(batch.vision.row(i))?;
        let scores: Vec<f64> = proto_emb.iter().map(|p| clamp_unit(dot(&v, p))).collect();
        let truth = batch.labels[i] as usize;
        let rank = true_rank(&scores, truth);
        let entry = &mut per_concept[truth];
        entry.samples += 1;
        if rank < 1 {
            entry.top1_correct += 1;
        }
        if rank < 5 {
            entry.top5_correct += 1;
        }
    }

    let mut forget_n = 0usize;
    let mut forget_top1 = 0usize;
    let mut forget_top5 = 0usize;
    let mut retain_n = 0usize;
    let mut retain_top1 = 0usize;
    for entry in &per_concept {
        if forget_concepts.contains(&entry.concept) {
            forget_n += entry.samples;
            forget_top1 += entry.top1_correct;
            forget_top5 += entry.top5_correct;
        } else {
            retain_n += entry.samples;
            retain_top1 += entry.top1_correct;
        }
    }
    let frac = |num: usize, den: usize, vacuous: f64| {
        if den == 0 {
            vacuous
        } else {
            num as f64 / den as f64
        }
    };
    Ok(EvalReport {
        fa1: frac(forget_top1, forget_n, 0.0),
        fa5: frac(forget_top5, forget_n, 0.0),
        ta1: frac(retain_top1, retain_n, 1.0),
        per_concept: per_concept.into_iter().filter(|e| e.samples > 0).collect(),
        validation_size: batch.len(),
        wall_clock: started.elapsed(),
    })
}

/// Reusable (FA, TA) evaluator for the step-size search. FA uses top-1 by
/// default; top-5 is available for the search criterion.
pub struct Evaluator<'a> {
    pub validation: &'a PairBatch,
    pub prototypes: &'a Prototypes,
    pub forget_concepts: Vec<u32>,
    pub top_k: usize,
}

impl<'a> Evaluator<'a> {
    pub fn new(
        validation: &'a PairBatch,
        prototypes: &'a Prototypes,
        forget_concepts: Vec<u32>,
        top_k: usize,
    ) -> Result<Self> {
        if !(top_k == 1 || top_k == 5) {
            return Err(Error::Config("search FA top-k must be 1 or 5".into()));
        }
        Ok(Evaluator {
            validation,
            prototypes,
            forget_concepts,
            top_k,
        })
    }

    pub fn evaluate(&self, model: &DualEncoderModel) -> Result<(f64, f64)> {
        let report = zero_shot_eval(
            model,
            self.validation,
            self.prototypes,
            &self.forget_concepts,
        )?;
        let fa = if self.top_k == 5 {
            report.fa5
        } else {
            report.fa1
        };
        Ok((fa, report.ta1))
    }
}

// --- similarity matrix -------------------------------------------------------

/// Concept-level cosine grid: rows are the concepts present in the sample
/// batch (mean image embedding, re-normalized), columns are all text
/// prototypes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityMatrix {
    pub row_concepts: Vec<u32>,
    pub col_concepts: Vec<u32>,
    /// [rows x cols] cosines in [-1, 1].
    pub values: Tensor,
}

impl SimilarityMatrix {
    pub fn get(&self, row_concept: u32, col_concept: u32) -> Option<f64> {
        let r = self.row_concepts.iter().position(|&c| c == row_concept)?;
        let c = self.col_concepts.iter().position(|&c| c == col_concept)?;
        Some(self.values.row(r)[c])
    }

    /// Stable row/column order CSV: `image_concept,text_<c0>,text_<c1>,...`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("image_concept");
        for c in &self.col_concepts {
            out.push_str(&format!(",text_{c}"));
        }
        out.push('\n');
        for (r, concept) in self.row_concepts.iter().enumerate() {
            out.push_str(&concept.to_string());
            for v in self.values.row(r) {
                out.push_str(&format!(",{v:?}"));
            }
            out.push('\n');
        }
        out
    }
}

pub fn similarity_matrix(
    model: &DualEncoderModel,
    batch: &PairBatch,
    prototypes: &Prototypes,
) -> Result<SimilarityMatrix> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch("similarity_matrix"));
    }
    let k = prototypes.concept_count() as u32;
    if let Some(&missing) = batch.labels.iter().find(|&&l| l >= k) {
        return Err(Error::MissingPrototype(missing));
    }
    let proto_emb = prototype_embeddings(model, prototypes)?;
    let embed_dim = model.embed_dim();

    let mut row_concepts: Vec<u32> = batch.labels.clone();
    row_concepts.sort_unstable();
    row_concepts.dedup();

    let mut values = Vec::with_capacity(row_concepts.len() * proto_emb.len());
    for &concept in &row_concepts {
        let mut mean = vec![0.0f64; embed_dim];
        let mut count = 0usize;
        for i in 0..batch.len() {
            if batch.labels[i] == concept {
                let v = model.forward_vision(batch.vision.row(i))?;
                for (m, x) in mean.iter_mut().zip(v.iter()) {
                    *m += x;
                }
                count += 1;
            }
        }
        for m in mean.iter_mut() {
            *m /= count as f64;
        }
        l2_normalize_in_place(&mut mean)?;
        for p in &proto_emb {
            values.push(clamp_unit(dot(&mean, p)));
        }
    }
    Ok(SimilarityMatrix {
        row_concepts: row_concepts.clone(),
        col_concepts: (0..k).collect(),
        values: Tensor::from_vec(&[row_concepts.len(), proto_emb.len()], values)?,
    })
}

// --- step-size sweep ----------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub lambda: f64,
    pub fa1: f64,
    pub ta1: f64,
}

/// Evaluate the single-layer edit at each grid step size, always from the
/// same original parameters. The lambda = 0 row reproduces the unmodified
/// model's numbers exactly.
pub fn lambda_sweep(
    model: &DualEncoderModel,
    layer: LayerId,
    direction: &LayerGrad,
    grid: &[f64],
    evaluator: &Evaluator,
) -> Result<Vec<SweepRow>> {
    if grid.is_empty() {
        return Err(Error::Config("empty sweep grid".into()));
    }
    if grid.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::Config("sweep grid must be sorted ascending".into()));
    }
    let mut rows = Vec::with_capacity(grid.len());
    for &lambda in grid {
        let candidate = apply_layer_edit(model, layer, direction, lambda)?;
        let (fa1, ta1) = evaluator.evaluate(&candidate)?;
        rows.push(SweepRow { lambda, fa1, ta1 });
    }
    Ok(rows)
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("lambda,fa1,ta1\n");
    for r in rows {
        out.push_str(&format!("{:?},{:?},{:?}\n", r.lambda, r.fa1, r.ta1));
    }
    out
}

// --- evaluation-cost scaling ---------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScalingRow {
    pub fraction: f64,
    pub size: usize,
    /// Median of three repetitions.
    pub seconds: f64,
    pub fa1: f64,
    pub ta1: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScalingReport {
    pub rows: Vec<ScalingRow>,
    /// Least-squares slope of seconds against size.
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
}

impl ScalingReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("fraction,size,seconds,fa1,ta1\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{:?},{},{:?},{:?},{:?}\n",
                r.fraction, r.size, r.seconds, r.fa1, r.ta1
            ));
        }
        out
    }
}

/// Per-concept stratified subset indices: the first `round(fraction * count)`
/// samples of each label, at least one each, in pool order.
pub fn stratified_indices(labels: &[u32], concepts: u32, fraction: f64) -> Vec<usize> {
    let mut picked = Vec::new();
    for c in 0..concepts {
        let concept_idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        if concept_idx.is_empty() {
            continue;
        }
        let quota =
            ((fraction * concept_idx.len() as f64).round() as usize).clamp(1, concept_idx.len());
        picked.extend_from_slice(&concept_idx[..quota]);
    }
    picked.sort_unstable();
    picked
}

/// Measure evaluator wall-clock against validation size and fit a line.
/// Runs single-threaded; each fraction is timed as the median of three
/// repetitions.
pub fn eval_scaling(
    model: &DualEncoderModel,
    pool: &PairBatch,
    prototypes: &Prototypes,
    forget_concepts: &[u32],
    fractions: &[f64],
) -> Result<ScalingReport> {
    if fractions.is_empty() {
        return Err(Error::Config("no fractions".into()));
    }
    if fractions.iter().any(|&f| !(f > 0.0 && f <= 1.0)) {
        return Err(Error::Config("fractions must be in (0, 1]".into()));
    }
    let k = prototypes.concept_count() as u32;
    let mut rows = Vec::with_capacity(fractions.len());
    for &fraction in fractions {
        let subset = pool.take(&stratified_indices(&pool.labels, k, fraction));
        let mut timings = Vec::with_capacity(3);
        let mut last_report = None;
        for _ in 0..3 {
            let report = zero_shot_eval(model, &subset, prototypes, forget_concepts)?;
            timings.push(report.wall_clock.as_secs_f64());
            last_report = Some(report);
        }
        timings.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let report = last_report.unwrap();
        rows.push(ScalingRow {
            fraction,
            size: subset.len(),
            seconds: timings[1],
            fa1: report.fa1,
            ta1: report.ta1,
        });
    }
    let (slope, intercept, r_squared) = linear_fit(
        &rows.iter().map(|r| r.size as f64).collect::<Vec<_>>(),
        &rows.iter().map(|r| r.seconds).collect::<Vec<_>>(),
    );
    Ok(ScalingReport {
        rows,
        slope,
        intercept,
        r_squared,
    })
}

fn linear_fit(x: &[f64], y: &[f64]) -> (f64, f64, f64) {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    if sxx == 0.0 {
        return (0.0, my, 1.0);
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss_res: f64 = x
        .iter()
        .zip(y)
        .map(|(a, b)| {
            let pred = intercept + slope * a;
            (b - pred) * (b - pred)
        })
        .sum();
    let ss_tot: f64 = y.iter().map(|b| (b - my) * (b - my)).sum();
    let r_squared = if ss_tot == 0.0 {
        1.0
    } else {
        1.0 - ss_res / ss_tot
    };
    (slope, intercept, r_squared)
}
