//! Per-layer importance and gradient alignment, Pareto-front extraction, and
//! the ablation parameter-selection strategies.
//!
//! Importance of a layer is the ratio of its forget-gradient norm to its
//! parameter norm; alignment is the cosine between its flattened forget and
//! retain gradients. A layer is kept on the front unless some other layer has
//! strictly greater importance and strictly smaller alignment.

use crate::error::{Error, Result};
use crate::model::{DualEncoderModel, LayerId};
use crate::objectives::GradientSnapshot;
use crate::rng::Rng;
use crate::tensor::{cosine_slices, flat_norm, DEGENERATE_EPS};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LayerMetrics {
    pub layer: LayerId,
    /// Canonical position in the model's layer enumeration.
    pub ordinal: usize,
    pub importance: f64,
    pub alignment: f64,
    pub forget_grad_norm: f64,
}

/// Metrics for every usable layer plus the layers excluded for having a
/// degenerate (near-zero) forget gradient or parameter norm.
#[derive(Debug, Clone)]
pub struct MetricsReport {
    pub active: Vec<LayerMetrics>,
    pub degenerate: Vec<LayerId>,
}

/// Importance and alignment for every layer of the model, computed from a
/// snapshot taken at the same parameter point.
pub fn layer_metrics(
    snapshot: &GradientSnapshot,
    model: &DualEncoderModel,
) -> Result<MetricsReport> {
    if snapshot.model_fingerprint != model.fingerprint() {
        return Err(Error::FingerprintMismatch {
            context: "layer_metrics".into(),
            artifact: snapshot.model_fingerprint,
            model: model.fingerprint(),
        });
    }
    let mut active = Vec::new();
    let mut degenerate = Vec::new();
    for (ordinal, id) in model.layer_ids().into_iter().enumerate() {
        let layer = model.get_layer(id)?;
        let g_f = &snapshot.forget.per_layer[ordinal];
        let g_r = &snapshot.retain.per_layer[ordinal];
        let forget_grad_norm = g_f.norm();
        let param_norm = flat_norm(&[&layer.weight, &layer.bias]);
        if forget_grad_norm < DEGENERATE_EPS || param_norm < DEGENERATE_EPS {
            degenerate.push(id);
            continue;
        }
        // A vanishing retain gradient cannot be disturbed by any update;
        // treat it as perfectly unaligned.
        let alignment = if g_r.norm() < DEGENERATE_EPS {
            0.0
        } else {
            cosine_slices(&g_f.flatten(), &g_r.flatten())?
        };
        active.push(LayerMetrics {
            layer: id,
            ordinal,
            importance: forget_grad_norm / param_norm,
            alignment,
            forget_grad_norm,
        });
    }
    Ok(MetricsReport { active, degenerate })
}

/// The undominated layers, ordered by descending importance (ties broken by
/// ascending alignment, then canonical position).
#[derive(Debug, Clone)]
pub struct ParetoFront {
    pub entries: Vec<LayerMetrics>,
}

/// A layer survives unless another layer has strictly greater importance AND
/// strictly smaller alignment; ties on either axis are non-dominating.
pub fn pareto_front(metrics: &[LayerMetrics]) -> ParetoFront {
    let mut sorted: Vec<&LayerMetrics> = metrics.iter().collect();
    sort_entries(&mut sorted);

    // Sweep groups of equal importance in descending order; a layer is
    // dominated iff some strictly-more-important layer has strictly smaller
    // alignment, i.e. the running minimum alignment over earlier groups
    // undercuts it.
    let mut entries = Vec::new();
    let mut min_alignment_above = f64::INFINITY;
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i;
        while j < sorted.len() && sorted[j].importance == sorted[i].importance {
            j += 1;
        }
        for m in &sorted[i..j] {
            if m.alignment <= min_alignment_above {
                entries.push(**m);
            }
        }
        for m in &sorted[i..j] {
            if m.alignment < min_alignment_above {
                min_alignment_above = m.alignment;
            }
        }
        i = j;
    }
    let mut refs: Vec<&LayerMetrics> = entries.iter().collect();
    sort_entries(&mut refs);
    let entries = refs.into_iter().copied().collect();
    ParetoFront { entries }
}

fn sort_entries(items: &mut [&LayerMetrics]) {
    items.sort_by(|a, b| {
        b.importance
            .partial_cmp(&a.importance)
            .unwrap()
            .then(a.alignment.partial_cmp(&b.alignment).unwrap())
            .then(a.ordinal.cmp(&b.ordinal))
    });
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SelectionStrategy {
    /// Full single-layer pipeline over the Pareto front (the default).
    Pareto,
    /// Single layer with the highest importance.
    ImportanceOnly,
    /// Single layer with the lowest alignment.
    AlignmentOnly,
    /// Seeded uniform choice among the usable layers.
    RandomLayer { seed: u64 },
    /// Update every layer on the front.
    AllPareto,
    /// Update every usable layer.
    AllLayers,
    /// Top fraction of individual weights by forget-gradient magnitude
    /// across the whole model.
    DistributedWeights { top_fraction: f64 },
}

impl SelectionStrategy {
    pub fn validate(&self) -> Result<()> {
        if let SelectionStrategy::DistributedWeights { top_fraction } = self {
            if !(*top_fraction > 0.0 && *top_fraction <= 1.0) {
                return Err(Error::Config(
                    "distributed_weights top fraction must be in (0, 1]".into(),
                ));
            }
        }
        Ok(())
    }
}

/// Boolean mask over the flattened parameters of each layer (weight entries
/// first, then bias), canonical layer order.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightMask {
    pub per_layer: Vec<Vec<bool>>,
}

impl WeightMask {
    pub fn selected_count(&self) -> usize {
        self.per_layer
            .iter()
            .map(|m| m.iter().filter(|&&b| b).count())
            .sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Selection {
    Layers(Vec<LayerId>),
    WeightMask(WeightMask),
}

/// Resolve a strategy into the set of layers (or the weight mask) to update.
pub fn select(
    strategy: &SelectionStrategy,
    metrics: &[LayerMetrics],
    snapshot: &GradientSnapshot,
) -> Result<Selection> {
    strategy.validate()?;
    if metrics.is_empty() {
        return Err(Error::NoCandidateLayers);
    }
    let best_by = |better: fn(&LayerMetrics, &LayerMetrics) -> bool| -> LayerId {
        let mut best = &metrics[0];
        for m in &metrics[1..] {
            if better(m, best) {
                best = m;
            }
        }
        best.layer
    };
    Ok(match strategy {
        SelectionStrategy::Pareto | SelectionStrategy::AllPareto => Selection::Layers(
            pareto_front(metrics)
                .entries
                .iter()
                .map(|m| m.layer)
                .collect(),
        ),
        SelectionStrategy::ImportanceOnly => {
            Selection::Layers(vec![best_by(|m, best| m.importance > best.importance)])
        }
        SelectionStrategy::AlignmentOnly => {
            Selection::Layers(vec![best_by(|m, best| m.alignment < best.alignment)])
        }
        SelectionStrategy::RandomLayer { seed } => {
            let mut rng = Rng::new(*seed);
            Selection::Layers(vec![metrics[rng.below(metrics.len())].layer])
        }
        SelectionStrategy::AllLayers => {
            Selection::Layers(metrics.iter().map(|m| m.layer).collect())
        }
        SelectionStrategy::DistributedWeights { top_fraction } => {
            Selection::WeightMask(distributed_mask(snapshot, *top_fraction))
        }
    })
}

/// Mask selecting the top fraction of parameters by |forget gradient| across
/// the whole model. Ties at the threshold keep the earlier canonical entry.
fn distributed_mask(snapshot: &GradientSnapshot, top_fraction: f64) -> WeightMask {
    let mut magnitudes: Vec<(f64, usize, usize)> = Vec::new(); // (|g|, layer, flat index)
    for (l, lg) in snapshot.forget.per_layer.iter().enumerate() {
        for (p, &g) in lg
            .weight
            .as_slice()
            .iter()
            .chain(lg.bias.as_slice().iter())
            .enumerate()
        {
            magnitudes.push((g.abs(), l, p));
        }
    }
    let total = magnitudes.len();
    let count = ((top_fraction * total as f64).round() as usize).clamp(1, total);
    magnitudes.sort_by(|a, b| {
        b.0.partial_cmp(&a.0)
            .unwrap()
            .then(a.1.cmp(&b.1))
            .then(a.2.cmp(&b.2))
    });
    let mut per_layer: Vec<Vec<bool>> = snapshot
        .forget
        .per_layer
        .iter()
        .map(|lg| vec![false; lg.weight.len() + lg.bias.len()])
        .collect();
    for &(_, l, p) in magnitudes.iter().take(count) {
        per_layer[l][p] = true;
    }
    WeightMask { per_layer }
}

/// Metric table as CSV, one row per layer:
/// `tower,layer,importance,alignment,forget_grad_norm`.
pub fn metrics_csv(report: &MetricsReport) -> String {
    let mut out = String::from("tower,layer,importance,alignment,forget_grad_norm\n");
    for m in &report.active {
        out.push_str(&format!(
            "{},{},{:?},{:?},{:?}\n",
            m.layer.tower,
            m.layer.name(),
            m.importance,
            m.alignment,
            m.forget_grad_norm
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Architecture, TowerKind};
    use crate::objectives::{snapshot, LayerGrad, PairBatch};
    use crate::tensor::Tensor;

    fn metric(ordinal: usize, importance: f64, alignment: f64) -> LayerMetrics {
        LayerMetrics {
            layer: LayerId::vision(ordinal),
            ordinal,
            importance,
            alignment,
            forget_grad_norm: importance,
        }
    }

    /// Literal transcription of the quadratic strict-dominance filter, used
    /// as the oracle.
    fn brute_force_front(metrics: &[LayerMetrics]) -> Vec<usize> {
        let mut kept = Vec::new();
        for m in metrics {
            let dominated = metrics.iter().any(|other| {
                other.ordinal != m.ordinal
                    && other.importance > m.importance
                    && other.alignment < m.alignment
            });
            if !dominated {
                kept.push(m.ordinal);
            }
        }
        kept.sort_unstable();
        kept
    }

    #[test]
    fn single_layer_front() {
        let m = vec![metric(0, 1.0, 0.3)];
        let front = pareto_front(&m);
        assert_eq!(front.entries.len(), 1);
        assert_eq!(front.entries[0].ordinal, 0);
    }

    #[test]
    fn dominated_layer_removed() {
        let m = vec![metric(0, 2.0, 0.1), metric(1, 1.0, 0.5)];
        let front = pareto_front(&m);
        assert_eq!(front.entries.len(), 1);
        assert_eq!(front.entries[0].ordinal, 0);
    }

    #[test]
    fn equal_importance_is_not_dominating() {
        let m = vec![metric(0, 2.0, 0.5), metric(1, 2.0, 0.9)];
        let front = pareto_front(&m);
        let kept: Vec<usize> = front.entries.iter().map(|e| e.ordinal).collect();
        assert_eq!(kept, vec![0, 1]);
    }

    #[test]
    fn front_matches_brute_force_on_random_sets() {
        let mut rng = Rng::new(314);
        for _ in 0..100 {
            let metrics: Vec<LayerMetrics> = (0..50)
                .map(|i| {
                    // Coarse grid so importance/alignment ties actually occur.
                    let imp = (rng.below(12) as f64) * 0.25;
                    let align = (rng.below(9) as f64) * 0.25 - 1.0;
                    metric(i, imp, align)
                })
                .collect();
            let mut got: Vec<usize> = pareto_front(&metrics)
                .entries
                .iter()
                .map(|e| e.ordinal)
                .collect();
            got.sort_unstable();
            assert_eq!(got, brute_force_front(&metrics));
        }
    }

    #[test]
    fn front_is_idempotent_and_partition_is_certified() {
        let mut rng = Rng::new(2718);
        for _ in 0..20 {
            let metrics: Vec<LayerMetrics> = (0..30)
                .map(|i| metric(i, rng.uniform(0.0, 3.0), rng.uniform(-1.0, 1.0)))
                .collect();
            let front = pareto_front(&metrics);
            let again = pareto_front(&front.entries);
            let a: Vec<usize> = front.entries.iter().map(|e| e.ordinal).collect();
            let b: Vec<usize> = again.entries.iter().map(|e| e.ordinal).collect();
            assert_eq!(a, b);

            // Every layer is on the front or strictly dominated by a front member.
            for m in &metrics {
                let on_front = front.entries.iter().any(|e| e.ordinal == m.ordinal);
                if !on_front {
                    assert!(front
                        .entries
                        .iter()
                        .any(|e| e.importance > m.importance && e.alignment < m.alignment));
                }
            }
        }
    }

    #[test]
    fn front_ordering_is_deterministic() {
        let m = vec![
            metric(3, 1.0, 0.2),
            metric(1, 2.0, 0.6),
            metric(2, 2.0, 0.4),
        ];
        let front = pareto_front(&m);
        let order: Vec<usize> = front.entries.iter().map(|e| e.ordinal).collect();
        // Descending importance, ties by ascending alignment.
        assert_eq!(order, vec![2, 1, 3]);
    }

    fn tiny_snapshot() -> (DualEncoderModel, GradientSnapshot) {
        let arch = Architecture {
            vision_dims: vec![4, 3, 2],
            text_dims: vec![3, 3, 2],
            tau: 0.2,
        };
        let model = DualEncoderModel::init(&arch, &mut Rng::new(8)).unwrap();
        let vd = 4;
        let td = 3;
        let mut rng = Rng::new(9);
        let mk = |rng: &mut Rng, n: usize| {
            PairBatch::new(
                Tensor::from_vec(
                    &[n, vd],
                    (0..n * vd).map(|_| rng.uniform(-1.0, 1.0)).collect(),
                )
                .unwrap(),
                Tensor::from_vec(
                    &[n, td],
                    (0..n * td).map(|_| rng.uniform(-1.0, 1.0)).collect(),
                )
                .unwrap(),
                vec![0; n],
            )
            .unwrap()
        };
        let forget = mk(&mut rng, 3);
        let retain = mk(&mut rng, 5);
        let snap = snapshot(&model, &forget, &retain).unwrap();
        (model, snap)
    }

    #[test]
    fn metrics_ratio_definition() {
        // theta = [3, 4], g_f = [1, 2]: importance = sqrt(5)/5.
        let (model, mut snap) = tiny_snapshot();
        let theta = crate::model::AffineLayer {
            weight: Tensor::from_vec(&[1, 1], vec![3.0]).unwrap(),
            bias: Tensor::from_vec(&[1], vec![4.0]).unwrap(),
        };
        let model = {
            let mut m = model;
            m.vision.layers[0] = theta;
            m
        };
        snap.forget.per_layer[0] = LayerGrad {
            weight: Tensor::from_vec(&[1, 1], vec![1.0]).unwrap(),
            bias: Tensor::from_vec(&[1], vec![2.0]).unwrap(),
        };
        snap.retain.per_layer[0] = LayerGrad {
            weight: Tensor::from_vec(&[1, 1], vec![0.5]).unwrap(),
            bias: Tensor::from_vec(&[1], vec![0.1]).unwrap(),
        };
        snap.model_fingerprint = model.fingerprint();
        let report = layer_metrics(&snap, &model).unwrap();
        let m0 = report
            .active
            .iter()
            .find(|m| m.ordinal == 0)
            .expect("layer 0 present");
        assert!((m0.importance - 5.0f64.sqrt() / 5.0).abs() < 1e-15);
        assert!((m0.importance - 0.447214).abs() < 1e-6);
    }

    #[test]
    fn zero_forget_gradient_reported_degenerate() {
        let (model, mut snap) = tiny_snapshot();
        let shape_w = snap.forget.per_layer[1].weight.shape().to_vec();
        let shape_b = snap.forget.per_layer[1].bias.shape().to_vec();
        snap.forget.per_layer[1] = LayerGrad {
            weight: Tensor::zeros(&shape_w),
            bias: Tensor::zeros(&shape_b),
        };
        let report = layer_metrics(&snap, &model).unwrap();
        assert!(report.degenerate.contains(&LayerId::vision(1)));
        assert!(report.active.iter().all(|m| m.ordinal != 1));
    }

    #[test]
    fn importance_one_when_gradient_equals_parameters() {
        let (model, mut snap) = tiny_snapshot();
        let layer = model.get_layer(LayerId::text(0)).unwrap();
        let ord = model.ordinal(LayerId::text(0)).unwrap();
        snap.forget.per_layer[ord] = LayerGrad {
            weight: layer.weight.clone(),
            bias: layer.bias.clone(),
        };
        let report = layer_metrics(&snap, &model).unwrap();
        let m = report.active.iter().find(|m| m.ordinal == ord).unwrap();
        assert!((m.importance - 1.0).abs() < 1e-15);
        assert!((m.alignment - 1.0).abs() < 1e-12 || m.alignment < 1.0); // cosine of g_f with g_r
    }

    #[test]
    fn fingerprint_mismatch_rejected() {
        let (model, mut snap) = tiny_snapshot();
        snap.model_fingerprint ^= 1;
        assert!(matches!(
            layer_metrics(&snap, &model),
            Err(Error::FingerprintMismatch { .. })
        ));
    }

    #[test]
    fn alignment_invariant_to_gradient_rescaling() {
        let (model, snap) = tiny_snapshot();
        let base = layer_metrics(&snap, &model).unwrap();
        let mut scaled = snap.clone();
        for lg in scaled.forget.per_layer.iter_mut() {
            lg.weight.scale(3.0);
            lg.bias.scale(3.0);
        }
        let scaled_report = layer_metrics(&scaled, &model).unwrap();
        for (a, b) in base.active.iter().zip(scaled_report.active.iter()) {
            assert!((a.alignment - b.alignment).abs() < 1e-12);
            assert!((a.importance * 3.0 - b.importance).abs() < 1e-12);
        }
    }

    #[test]
    fn importance_only_picks_argmax() {
        let metrics = vec![
            metric(0, 0.5, 0.0),
            metric(1, 2.5, 0.9),
            metric(2, 1.0, -0.5),
        ];
        let (_, snap) = tiny_snapshot();
        match select(&SelectionStrategy::ImportanceOnly, &metrics, &snap).unwrap() {
            Selection::Layers(ids) => assert_eq!(ids, vec![LayerId::vision(1)]),
            _ => panic!("expected layers"),
        }
        match select(&SelectionStrategy::AlignmentOnly, &metrics, &snap).unwrap() {
            Selection::Layers(ids) => assert_eq!(ids, vec![LayerId::vision(2)]),
            _ => panic!("expected layers"),
        }
    }

    #[test]
    fn random_layer_reproducible() {
        let metrics: Vec<LayerMetrics> = (0..6).map(|i| metric(i, i as f64, 0.0)).collect();
        let (_, snap) = tiny_snapshot();
        let a = select(&SelectionStrategy::RandomLayer { seed: 5 }, &metrics, &snap).unwrap();
        let b = select(&SelectionStrategy::RandomLayer { seed: 5 }, &metrics, &snap).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn distributed_mask_top_half() {
        let (model, mut snap) = tiny_snapshot();
        // Replace the whole forget gradient with four known entries spread
        // over layer 0 (weight has 3x4=12 entries; use first four, zero rest).
        for lg in snap.forget.per_layer.iter_mut() {
            lg.weight.scale(0.0);
            lg.bias.scale(0.0);
        }
        let w = snap.forget.per_layer[0].weight.as_mut_slice();
        w[0] = 0.1;
        w[1] = -0.9;
        w[2] = 0.3;
        w[3] = 0.7;
        let mask = match select(
            &SelectionStrategy::DistributedWeights {
                top_fraction: 2.0 / 52.0,
            },
            &layer_metrics(&snap, &model)
                .map(|r| r.active)
                .unwrap_or_else(|_| vec![metric(0, 1.0, 0.0)]),
            &snap,
        )
        .unwrap()
        {
            Selection::WeightMask(m) => m,
            _ => panic!("expected mask"),
        };
        // Top two magnitudes are entries 1 (0.9) and 3 (0.7).
        assert!(mask.per_layer[0][1]);
        assert!(mask.per_layer[0][3]);
        assert_eq!(mask.selected_count(), 2);
    }

    #[test]
    fn one_front_spans_both_towers() {
        let (model, snap) = tiny_snapshot();
        let report = layer_metrics(&snap, &model).unwrap();
        let towers: std::collections::HashSet<TowerKind> =
            report.active.iter().map(|m| m.layer.tower).collect();
        assert_eq!(towers.len(), 2);
    }
}
