//! The unlearning engine: single-layer weight edits along a stored gradient
//! direction, the bracketing binary search for the step size, the full
//! single-gradient pipeline, joint multi-concept unlearning, and the
//! iterative GA/FT/GAFT baselines.

use crate::error::{Error, Result};
use crate::io::{ContainerReader, ContainerWriter};
use crate::model::{AffineLayer, DualEncoderModel, LayerId};
use crate::objectives::{
    grad, snapshot, GradientSnapshot, LayerGrad, LossKind, ModelGrads, PairBatch,
};
use crate::selection::{
    layer_metrics, pareto_front, select, MetricsReport, ParetoFront, Selection, SelectionStrategy,
    WeightMask,
};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Signature every unlearning evaluator satisfies: candidate model in,
/// (forget accuracy, test accuracy) out.
pub type EvalFn<'a> = dyn FnMut(&DualEncoderModel) -> Result<(f64, f64)> + 'a;

/// Serializable, composable single-layer edit: apply as
/// `theta_l <- theta_l - lambda * direction`.
#[derive(Debug, Clone, PartialEq)]
pub struct UnlearnDelta {
    pub layer: LayerId,
    pub lambda: f64,
    /// Separation direction of the layer (see [`separation_direction`]),
    /// computed from the forget gradient at the original parameters.
    pub direction: LayerGrad,
    /// Concepts this edit removes.
    pub concepts: Vec<u32>,
    /// Parameter point the direction was computed at.
    pub model_fingerprint: u64,
    pub snapshot_fingerprint: u64,
}

/// One probe of the step-size search, with the bracket that was active when
/// the probe was made.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SearchPoint {
    pub step: usize,
    pub lambda: f64,
    pub fa: f64,
    pub ta: f64,
    pub lambda_low: f64,
    pub lambda_high: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchTrace {
    pub points: Vec<SearchPoint>,
    pub chosen: usize,
}

impl SearchTrace {
    pub fn chosen_point(&self) -> &SearchPoint {
        &self.points[self.chosen]
    }

    /// `step,lambda,fa,ta,lambda_low,lambda_high` rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,lambda,fa,ta,lambda_low,lambda_high\n");
        for p in &self.points {
            out.push_str(&format!(
                "{},{:?},{:?},{:?},{:?},{:?}\n",
                p.step, p.lambda, p.fa, p.ta, p.lambda_low, p.lambda_high
            ));
        }
        out
    }
}

/// Minimal-FA, then maximal-TA, then smallest-lambda choice over a set of
/// evaluated points. FA values are exact count ratios, so equality is exact.
fn pick_min_fa_max_ta(points: &[SearchPoint]) -> usize {
    let mut best = 0;
    for (i, p) in points.iter().enumerate().skip(1) {
        let b = &points[best];
        let better = p.fa < b.fa
            || (p.fa == b.fa && p.ta > b.ta)
            || (p.fa == b.fa && p.ta == b.ta && p.lambda < b.lambda);
        if better {
            best = i;
        }
    }
    best
}

/// Step-size search over a probe function `lambda -> (FA, TA)`.
///
/// Starting from `(lambda_low, lambda_high) = (0, inf)` and `lambda0`, each
/// step evaluates the probe; a positive FA raises the lower bracket, zero FA
/// lowers the upper bracket; the next probe doubles while the upper bracket
/// is unbounded and bisects otherwise. After `steps` probes the returned
/// trace selects the minimal-FA point, breaking ties by maximal TA and then
/// by smallest lambda.
pub fn binary_search_fn(
    probe: &mut dyn FnMut(f64) -> Result<(f64, f64)>,
    lambda0: f64,
    steps: usize,
) -> Result<SearchTrace> {
    if !(lambda0 > 0.0 && lambda0.is_finite()) {
        return Err(Error::Config("binary search needs lambda0 > 0".into()));
    }
    if steps == 0 {
        return Err(Error::Config(
            "binary search needs at least one step".into(),
        ));
    }
    let mut lambda_low = 0.0f64;
    let mut lambda_high = f64::INFINITY;
    let mut lambda = lambda0;
    let mut points: Vec<SearchPoint> = Vec::with_capacity(steps);
    for step in 0..steps {
        let (fa, ta) = match probe(lambda) {
            Ok(v) => v,
            Err(e) => {
                return Err(Error::SearchAborted {
                    step,
                    partial: points,
                    source: Box::new(e),
                })
            }
        };
        points.push(SearchPoint {
            step,
            lambda,
            fa,
            ta,
            lambda_low,
            lambda_high,
        });
        if fa > 0.0 {
            lambda_low = lambda;
        } else {
            lambda_high = lambda;
        }
        lambda = if lambda_high.is_infinite() {
            2.0 * lambda
        } else {
            (lambda_low + lambda_high) / 2.0
        };
    }
    let chosen = pick_min_fa_max_ta(&points);
    Ok(SearchTrace { points, chosen })
}

/// Search the step size for a single-layer edit of `model`, evaluating every
/// candidate from the same original parameters.
pub fn binary_search(
    model: &DualEncoderModel,
    layer: LayerId,
    direction: &LayerGrad,
    evaluator: &mut EvalFn,
    lambda0: f64,
    steps: usize,
) -> Result<SearchTrace> {
    let mut probe = |lambda: f64| -> Result<(f64, f64)> {
        let candidate = apply_layer_edit(model, layer, direction, lambda)?;
        evaluator(&candidate)
    };
    binary_search_fn(&mut probe, lambda0, steps)
}

/// `theta_l <- theta_l - lambda * direction`, all other layers untouched.
pub fn apply_layer_edit(
    model: &DualEncoderModel,
    layer: LayerId,
    direction: &LayerGrad,
    lambda: f64,
) -> Result<DualEncoderModel> {
    if lambda == 0.0 {
        // Identity edit by contract.
        model.get_layer(layer)?;
        return Ok(model.clone());
    }
    let current = model.get_layer(layer)?;
    if current.weight.shape() != direction.weight.shape()
        || current.bias.shape() != direction.bias.shape()
    {
        return Err(Error::ShapeMismatch {
            context: format!("delta direction for {}", layer.name()),
            expected: current.weight.shape().to_vec(),
            got: direction.weight.shape().to_vec(),
        });
    }
    let mut edited = AffineLayer {
        weight: current.weight.clone(),
        bias: current.bias.clone(),
    };
    edited.weight.axpy(-lambda, &direction.weight);
    edited.bias.axpy(-lambda, &direction.bias);
    model.set_layer(layer, edited)
}

/// Apply a serialized delta. A fingerprint mismatch against the parameters
/// the direction was computed at is refused unless `allow_mismatch` is set.
pub fn apply_delta(
    model: &DualEncoderModel,
    delta: &UnlearnDelta,
    lambda_override: Option<f64>,
    allow_mismatch: bool,
) -> Result<DualEncoderModel> {
    if !allow_mismatch && model.fingerprint() != delta.model_fingerprint {
        return Err(Error::FingerprintMismatch {
            context: "apply_delta".into(),
            artifact: delta.model_fingerprint,
            model: model.fingerprint(),
        });
    }
    let lambda = lambda_override.unwrap_or(delta.lambda);
    apply_layer_edit(model, delta.layer, &delta.direction, lambda)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CandidateOutcome {
    pub layer: LayerId,
    pub lambda: f64,
    pub fa: f64,
    pub ta: f64,
    pub trace: SearchTrace,
}

#[derive(Debug, Clone)]
pub struct UnlearnDiagnostics {
    pub metrics: MetricsReport,
    pub front: ParetoFront,
    pub candidates: Vec<CandidateOutcome>,
    pub chosen: usize,
    pub snapshot_fingerprint: u64,
}

/// The as-applied edit direction for a stored forget gradient.
///
/// Descending the cosine embedding loss would align the forget pairs even
/// harder; unlearning walks the opposite ray of the same gradient line, which
/// separates the pair embeddings first-order while leaving other concepts to
/// second-order effects. The snapshot keeps the plain loss gradient (that is
/// what the finite-difference checks and the alignment metric are defined
/// on); the negation happens exactly once, here, when an edit is built.
pub fn separation_direction(gradient: &LayerGrad) -> LayerGrad {
    let mut direction = gradient.clone();
    direction.weight.scale(-1.0);
    direction.bias.scale(-1.0);
    direction
}

/// Run one binary search per front layer (initial step size importance/10)
/// and pick the min-FA / max-TA candidate.
fn search_over_front(
    model: &DualEncoderModel,
    snap: &GradientSnapshot,
    front: &ParetoFront,
    evaluator: &mut EvalFn,
    steps: usize,
) -> Result<(Vec<CandidateOutcome>, usize)> {
    let mut candidates = Vec::with_capacity(front.entries.len());
    for entry in &front.entries {
        let direction = separation_direction(&snap.forget.per_layer[entry.ordinal]);
        let lambda0 = entry.importance / 10.0;
        let trace = binary_search(model, entry.layer, &direction, evaluator, lambda0, steps)?;
        let chosen = *trace.chosen_point();
        candidates.push(CandidateOutcome {
            layer: entry.layer,
            lambda: chosen.lambda,
            fa: chosen.fa,
            ta: chosen.ta,
            trace,
        });
    }
    let as_points: Vec<SearchPoint> = candidates
        .iter()
        .map(|c| SearchPoint {
            step: 0,
            lambda: c.lambda,
            fa: c.fa,
            ta: c.ta,
            lambda_low: 0.0,
            lambda_high: 0.0,
        })
        .collect();
    let best = pick_min_fa_max_ta(&as_points);
    Ok((candidates, best))
}

/// The full single-gradient unlearning pipeline: one snapshot, layer metrics,
/// Pareto front, a step-size search per front layer, and the single-layer
/// edit that reaches minimal forget accuracy with maximal retained utility.
pub fn single_layer_unlearn(
    model: &DualEncoderModel,
    forget_set: &PairBatch,
    retain_set: &PairBatch,
    evaluator: &mut EvalFn,
    steps: usize,
) -> Result<(DualEncoderModel, UnlearnDelta, UnlearnDiagnostics)> {
    let snap = snapshot(model, forget_set, retain_set)?;
    let (unlearned, delta, diagnostics) =
        single_layer_unlearn_from_snapshot(model, &snap, forget_set, evaluator, steps)?;
    Ok((unlearned, delta, diagnostics))
}

/// Same pipeline starting from a precomputed snapshot (gradient reuse).
pub fn single_layer_unlearn_from_snapshot(
    model: &DualEncoderModel,
    snap: &GradientSnapshot,
    forget_set: &PairBatch,
    evaluator: &mut EvalFn,
    steps: usize,
) -> Result<(DualEncoderModel, UnlearnDelta, UnlearnDiagnostics)> {
    let metrics = layer_metrics(snap, model)?;
    if metrics.active.is_empty() {
        return Err(Error::NoCandidateLayers);
    }
    let front = pareto_front(&metrics.active);
    let (candidates, chosen) = search_over_front(model, snap, &front, evaluator, steps)?;
    let best = &candidates[chosen];
    let ordinal = model.ordinal(best.layer)?;
    let delta = UnlearnDelta {
        layer: best.layer,
        lambda: best.lambda,
        direction: separation_direction(&snap.forget.per_layer[ordinal]),
        concepts: sorted_unique_labels(forget_set),
        model_fingerprint: snap.model_fingerprint,
        snapshot_fingerprint: snap.fingerprint(),
    };
    let unlearned = apply_delta(model, &delta, None, false)?;
    let diagnostics = UnlearnDiagnostics {
        metrics,
        front,
        candidates,
        chosen,
        snapshot_fingerprint: snap.fingerprint(),
    };
    Ok((unlearned, delta, diagnostics))
}

fn sorted_unique_labels(batch: &PairBatch) -> Vec<u32> {
    let mut labels = batch.labels.clone();
    labels.sort_unstable();
    labels.dedup();
    labels
}

/// Jointly unlearn several concepts: per-concept snapshot and layer choice,
/// per-concept step sizes refined by search, and all chosen layer updates
/// applied in parallel from the original parameters. Two concepts choosing
/// the same layer sum their scaled gradients.
pub fn joint_unlearn(
    model: &DualEncoderModel,
    forget_sets: &[PairBatch],
    retain_set: &PairBatch,
    evaluators: &mut [Box<EvalFn<'_>>],
    steps: usize,
) -> Result<(DualEncoderModel, Vec<UnlearnDelta>, Vec<UnlearnDiagnostics>)> {
    if forget_sets.is_empty() {
        return Err(Error::EmptyBatch("joint_unlearn concepts"));
    }
    assert_eq!(forget_sets.len(), evaluators.len());
    let mut deltas = Vec::with_capacity(forget_sets.len());
    let mut diags = Vec::with_capacity(forget_sets.len());
    for (forget, evaluator) in forget_sets.iter().zip(evaluators.iter_mut()) {
        let snap = snapshot(model, forget, retain_set)?;
        let (_, delta, diag) =
            single_layer_unlearn_from_snapshot(model, &snap, forget, evaluator.as_mut(), steps)?;
        deltas.push(delta);
        diags.push(diag);
    }
    let combined = compose_deltas(model, &deltas)?;
    Ok((combined, deltas, diags))
}

/// Apply several deltas in parallel from the same original parameters,
/// summing scaled directions that hit the same layer.
pub fn compose_deltas(
    model: &DualEncoderModel,
    deltas: &[UnlearnDelta],
) -> Result<DualEncoderModel> {
    let mut per_layer: Vec<Option<LayerGrad>> = vec![None; model.layer_count()];
    for delta in deltas {
        let ordinal = model.ordinal(delta.layer)?;
        let slot = &mut per_layer[ordinal];
        match slot {
            None => {
                let mut scaled = LayerGrad {
                    weight: Tensor::zeros(delta.direction.weight.shape()),
                    bias: Tensor::zeros(delta.direction.bias.shape()),
                };
                scaled.axpy(delta.lambda, &delta.direction);
                *slot = Some(scaled);
            }
            Some(existing) => existing.axpy(delta.lambda, &delta.direction),
        }
    }
    let mut out = model.clone();
    for (ordinal, edit) in per_layer.into_iter().enumerate() {
        if let Some(edit) = edit {
            let id = model.layer_ids()[ordinal];
            let current = out.get_layer(id)?;
            let mut layer = AffineLayer {
                weight: current.weight.clone(),
                bias: current.bias.clone(),
            };
            layer.weight.axpy(-1.0, &edit.weight);
            layer.bias.axpy(-1.0, &edit.bias);
            out = out.set_layer(id, layer)?;
        }
    }
    Ok(out)
}

// --- ablation strategy runs -------------------------------------------------

/// Outcome of running one parameter-selection strategy under the one-step
/// update framework.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StrategyOutcome {
    pub layers: Vec<LayerId>,
    pub lambda: f64,
    pub fa: f64,
    pub ta: f64,
    /// Number of individual parameters touched (mask strategies).
    pub touched_parameters: usize,
}

/// Run the given selection strategy from a shared snapshot. Single-layer
/// strategies search that layer's step size; multi-layer and mask strategies
/// search one shared step size along every selected direction at once.
pub fn run_with_strategy(
    model: &DualEncoderModel,
    snap: &GradientSnapshot,
    strategy: &SelectionStrategy,
    evaluator: &mut EvalFn,
    steps: usize,
) -> Result<(DualEncoderModel, StrategyOutcome)> {
    let metrics = layer_metrics(snap, model)?;
    if metrics.active.is_empty() {
        return Err(Error::NoCandidateLayers);
    }

    if matches!(strategy, SelectionStrategy::Pareto) {
        let front = pareto_front(&metrics.active);
        let (candidates, chosen) = search_over_front(model, snap, &front, evaluator, steps)?;
        let best = &candidates[chosen];
        let ordinal = model.ordinal(best.layer)?;
        let direction = separation_direction(&snap.forget.per_layer[ordinal]);
        let unlearned = apply_layer_edit(model, best.layer, &direction, best.lambda)?;
        let touched = direction.weight.len() + direction.bias.len();
        return Ok((
            unlearned,
            StrategyOutcome {
                layers: vec![best.layer],
                lambda: best.lambda,
                fa: best.fa,
                ta: best.ta,
                touched_parameters: touched,
            },
        ));
    }

    match select(strategy, &metrics.active, snap)? {
        Selection::Layers(ids) if ids.len() == 1 => {
            let layer = ids[0];
            let entry = metrics
                .active
                .iter()
                .find(|m| m.layer == layer)
                .expect("selected layer has metrics");
            let direction = separation_direction(&snap.forget.per_layer[entry.ordinal]);
            let trace = binary_search(
                model,
                layer,
                &direction,
                evaluator,
                entry.importance / 10.0,
                steps,
            )?;
            let chosen = *trace.chosen_point();
            let unlearned = apply_layer_edit(model, layer, &direction, chosen.lambda)?;
            Ok((
                unlearned,
                StrategyOutcome {
                    layers: vec![layer],
                    lambda: chosen.lambda,
                    fa: chosen.fa,
                    ta: chosen.ta,
                    touched_parameters: direction.weight.len() + direction.bias.len(),
                },
            ))
        }
        Selection::Layers(ids) => {
            // One shared step size along every selected layer's own gradient.
            let lambda0 = metrics
                .active
                .iter()
                .filter(|m| ids.contains(&m.layer))
                .map(|m| m.importance)
                .fold(0.0f64, f64::max)
                / 10.0;
            let mut probe = |lambda: f64| -> Result<(f64, f64)> {
                let candidate = apply_multi_layer_edit(model, snap, &ids, lambda)?;
                evaluator(&candidate)
            };
            let trace = binary_search_fn(&mut probe, lambda0, steps)?;
            let chosen = *trace.chosen_point();
            let unlearned = apply_multi_layer_edit(model, snap, &ids, chosen.lambda)?;
            let touched = ids
                .iter()
                .map(|&id| {
                    let l = model.get_layer(id).unwrap();
                    l.weight.len() + l.bias.len()
                })
                .sum();
            Ok((
                unlearned,
                StrategyOutcome {
                    layers: ids,
                    lambda: chosen.lambda,
                    fa: chosen.fa,
                    ta: chosen.ta,
                    touched_parameters: touched,
                },
            ))
        }
        Selection::WeightMask(mask) => {
            let lambda0 = masked_norm_ratio(model, snap, &mask) / 10.0;
            let mut probe = |lambda: f64| -> Result<(f64, f64)> {
                let candidate = apply_masked_edit(model, snap, &mask, lambda)?;
                evaluator(&candidate)
            };
            let trace = binary_search_fn(&mut probe, lambda0, steps)?;
            let chosen = *trace.chosen_point();
            let unlearned = apply_masked_edit(model, snap, &mask, chosen.lambda)?;
            Ok((
                unlearned,
                StrategyOutcome {
                    layers: Vec::new(),
                    lambda: chosen.lambda,
                    fa: chosen.fa,
                    ta: chosen.ta,
                    touched_parameters: mask.selected_count(),
                },
            ))
        }
    }
}

fn apply_multi_layer_edit(
    model: &DualEncoderModel,
    snap: &GradientSnapshot,
    layers: &[LayerId],
    lambda: f64,
) -> Result<DualEncoderModel> {
    let mut out = model.clone();
    for &id in layers {
        let ordinal = model.ordinal(id)?;
        let direction = separation_direction(&snap.forget.per_layer[ordinal]);
        out = apply_layer_edit(&out, id, &direction, lambda)?;
    }
    Ok(out)
}

fn apply_masked_edit(
    model: &DualEncoderModel,
    snap: &GradientSnapshot,
    mask: &WeightMask,
    lambda: f64,
) -> Result<DualEncoderModel> {
    let mut out = model.clone();
    for (ordinal, id) in model.layer_ids().into_iter().enumerate() {
        let layer_mask = &mask.per_layer[ordinal];
        if !layer_mask.iter().any(|&b| b) {
            continue;
        }
        let grad = &snap.forget.per_layer[ordinal];
        let current = out.get_layer(id)?;
        let mut edited = AffineLayer {
            weight: current.weight.clone(),
            bias: current.bias.clone(),
        };
        let w_len = edited.weight.len();
        for (p, &selected) in layer_mask.iter().enumerate() {
            if !selected {
                continue;
            }
            // Separation direction: walk against the stored loss gradient.
            if p < w_len {
                edited.weight.as_mut_slice()[p] += lambda * grad.weight.as_slice()[p];
            } else {
                edited.bias.as_mut_slice()[p - w_len] += lambda * grad.bias.as_slice()[p - w_len];
            }
        }
        out = out.set_layer(id, edited)?;
    }
    Ok(out)
}

/// Importance analog for a weight mask: masked gradient norm over masked
/// parameter norm.
fn masked_norm_ratio(model: &DualEncoderModel, snap: &GradientSnapshot, mask: &WeightMask) -> f64 {
    let mut g2 = 0.0;
    let mut p2 = 0.0;
    for (ordinal, id) in model.layer_ids().into_iter().enumerate() {
        let layer = model.get_layer(id).unwrap();
        let grad = &snap.forget.per_layer[ordinal];
        let w_len = layer.weight.len();
        for (p, &selected) in mask.per_layer[ordinal].iter().enumerate() {
            if !selected {
                continue;
            }
            let (gv, pv) = if p < w_len {
                (grad.weight.as_slice()[p], layer.weight.as_slice()[p])
            } else {
                (
                    grad.bias.as_slice()[p - w_len],
                    layer.bias.as_slice()[p - w_len],
                )
            };
            g2 += gv * gv;
            p2 += pv * pv;
        }
    }
    if p2 <= 0.0 {
        return 1.0;
    }
    (g2 / p2).sqrt()
}

// --- baselines --------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BaselineMethod {
    /// Gradient ascent on the forget loss.
    Ga,
    /// Fine-tuning (descent) on the retain loss.
    Ft,
    /// GA phase then FT phase.
    Gaft,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineConfig {
    pub method: BaselineMethod,
    pub learning_rate: f64,
    pub iterations: usize,
    /// Joint-objective weighting; recorded but unused by the sequential
    /// GAFT variant.
    #[serde(default = "default_alpha")]
    pub alpha: f64,
}

fn default_alpha() -> f64 {
    1.0
}

impl BaselineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::Config(
                "baseline needs at least one iteration".into(),
            ));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("baseline learning rate must be >= 0".into()));
        }
        Ok(())
    }
}

fn full_model_step(model: &DualEncoderModel, grads: &ModelGrads, step: f64) -> DualEncoderModel {
    let mut out = model.clone();
    let vision_layers = out.vision.layers.len();
    for (ordinal, layer) in out
        .vision
        .layers
        .iter_mut()
        .chain(out.text.layers.iter_mut())
        .enumerate()
    {
        debug_assert!(ordinal < vision_layers + model.text.layers.len());
        let grad = &grads.per_layer[ordinal];
        layer.weight.axpy(step, &grad.weight);
        layer.bias.axpy(step, &grad.bias);
    }
    out
}

/// Iterative full-model baselines: plain fixed-step full-batch gradient
/// steps, no momentum or adaptivity.
pub fn baseline_run(
    model: &DualEncoderModel,
    config: &BaselineConfig,
    forget_set: &PairBatch,
    retain_set: &PairBatch,
) -> Result<DualEncoderModel> {
    config.validate()?;
    let lr = config.learning_rate;
    let k = config.iterations;
    let mut current = model.clone();
    let ga_phase = |m: &DualEncoderModel, k: usize| -> Result<DualEncoderModel> {
        let mut m = m.clone();
        for _ in 0..k {
            let g = grad(&m, forget_set, LossKind::Forget)?;
            m = full_model_step(&m, &g, lr); // ascent
        }
        Ok(m)
    };
    let ft_phase = |m: &DualEncoderModel, k: usize| -> Result<DualEncoderModel> {
        let mut m = m.clone();
        for _ in 0..k {
            let g = grad(&m, retain_set, LossKind::Retain)?;
            m = full_model_step(&m, &g, -lr); // descent
        }
        Ok(m)
    };
    current = match config.method {
        BaselineMethod::Ga => ga_phase(&current, k)?,
        BaselineMethod::Ft => ft_phase(&current, k)?,
        BaselineMethod::Gaft => ft_phase(&ga_phase(&current, k)?, k)?,
    };
    Ok(current)
}

// --- delta file format -------------------------------------------------------

pub const DELTA_KIND: &str = "unlearn-delta";
pub const DELTA_VERSION: u32 = 1;

/// Write a delta (`.delta`): layer name, step size, direction payload, and
/// the provenance block.
pub fn save_delta(delta: &UnlearnDelta, path: &Path, config_hash: u64) -> Result<()> {
    let mut w = ContainerWriter::new(DELTA_KIND, DELTA_VERSION);
    w.push(
        "layer",
        format!(
            "{} {} {}",
            delta.layer.name(),
            delta.direction.weight.shape()[0],
            delta.direction.weight.shape()[1]
        ),
    );
    w.push_f64("lambda", delta.lambda);
    w.push(
        "concepts",
        delta
            .concepts
            .iter()
            .map(|c| c.to_string())
            .collect::<Vec<_>>()
            .join(" "),
    );
    w.push_hex("model_fingerprint", delta.model_fingerprint);
    w.push_hex("snapshot_fingerprint", delta.snapshot_fingerprint);
    w.push_hex("config_hash", config_hash);
    w.section_f64("direction", delta.direction.flatten());
    w.write_to(path)
}

pub fn load_delta(path: &Path) -> Result<(UnlearnDelta, u64)> {
    let r = ContainerReader::read_from(path, DELTA_KIND, DELTA_VERSION)?;
    let layer_decl = r.value("layer")?;
    let fields: Vec<&str> = layer_decl.split(' ').collect();
    if fields.len() != 3 {
        return Err(Error::CorruptArtifact(format!(
            "bad layer record `{layer_decl}`"
        )));
    }
    let layer = LayerId::parse(fields[0])?;
    let out_dim: usize = fields[1]
        .parse()
        .map_err(|_| Error::CorruptArtifact("bad layer dim".into()))?;
    let in_dim: usize = fields[2]
        .parse()
        .map_err(|_| Error::CorruptArtifact("bad layer dim".into()))?;
    let payload = r.section_f64("direction")?;
    if payload.len() != out_dim * in_dim + out_dim {
        return Err(Error::CorruptArtifact(
            "direction payload does not match layer shape".into(),
        ));
    }
    let direction = LayerGrad {
        weight: Tensor::from_vec(&[out_dim, in_dim], payload[..out_dim * in_dim].to_vec())?,
        bias: Tensor::from_vec(&[out_dim], payload[out_dim * in_dim..].to_vec())?,
    };
    let concepts = {
        let raw = r.value("concepts")?;
        if raw.is_empty() {
            Vec::new()
        } else {
            raw.split(' ')
                .map(|c| {
                    c.parse()
                        .map_err(|_| Error::CorruptArtifact("bad concept id".into()))
                })
                .collect::<Result<Vec<u32>>>()?
        }
    };
    let delta = UnlearnDelta {
        layer,
        lambda: r.f64_value("lambda")?,
        direction,
        concepts,
        model_fingerprint: r.hex_value("model_fingerprint")?,
        snapshot_fingerprint: r.hex_value("snapshot_fingerprint")?,
    };
    Ok((delta, r.hex_value("config_hash")?))
}
