//! Retain (contrastive) and forget (cosine-embedding) losses, their analytic
//! gradients with respect to every layer, and a finite-difference verifier.
//!
//! The retain loss is the symmetric in-batch contrastive loss: for each pair,
//! cross entropy of the matching score against all candidates in the batch,
//! image-to-text and text-to-image, averaged over both directions. The forget
//! loss is the mean cosine embedding loss `1 - cos(v_i, t_i)` over positive
//! pairs only.

use crate::error::{Error, Result};
use crate::io::{ContainerReader, ContainerWriter};
use crate::model::{DualEncoderModel, ForwardTrace, LayerId, TowerKind};
use crate::tensor::{clamp_unit, dot, Tensor};
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Paired image/text inputs with concept labels. Rows pair up by index.
#[derive(Debug, Clone, PartialEq)]
pub struct PairBatch {
    /// [n x vision_dim]
    pub vision: Tensor,
    /// [n x text_dim]
    pub text: Tensor,
    pub labels: Vec<u32>,
}

impl PairBatch {
    pub fn new(vision: Tensor, text: Tensor, labels: Vec<u32>) -> Result<Self> {
        if vision.shape().len() != 2 || text.shape().len() != 2 {
            return Err(Error::ShapeMismatch {
                context: "PairBatch".into(),
                expected: vec![2],
                got: vec![vision.shape().len(), text.shape().len()],
            });
        }
        if vision.rows() != text.rows() || vision.rows() != labels.len() {
            return Err(Error::ShapeMismatch {
                context: "PairBatch row counts".into(),
                expected: vec![vision.rows()],
                got: vec![text.rows(), labels.len()],
            });
        }
        Ok(PairBatch {
            vision,
            text,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Row subset in the given index order.
    pub fn take(&self, indices: &[usize]) -> PairBatch {
        let vd = self.vision.cols();
        let td = self.text.cols();
        let mut vision = Vec::with_capacity(indices.len() * vd);
        let mut text = Vec::with_capacity(indices.len() * td);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            vision.extend_from_slice(self.vision.row(i));
            text.extend_from_slice(self.text.row(i));
            labels.push(self.labels[i]);
        }
        PairBatch {
            vision: Tensor::from_vec(&[indices.len(), vd], vision).unwrap(),
            text: Tensor::from_vec(&[indices.len(), td], text).unwrap(),
            labels,
        }
    }

    pub fn concat(&self, other: &PairBatch) -> PairBatch {
        let mut vision = self.vision.as_slice().to_vec();
        vision.extend_from_slice(other.vision.as_slice());
        let mut text = self.text.as_slice().to_vec();
        text.extend_from_slice(other.text.as_slice());
        let mut labels = self.labels.clone();
        labels.extend_from_slice(&other.labels);
        PairBatch {
            vision: Tensor::from_vec(&[self.len() + other.len(), self.vision.cols()], vision)
                .unwrap(),
            text: Tensor::from_vec(&[self.len() + other.len(), self.text.cols()], text).unwrap(),
            labels,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    Forget,
    Retain,
}

/// Gradient tensors for one layer (same shapes as the layer itself).
#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrad {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl LayerGrad {
    fn zeros_like(layer: &crate::model::AffineLayer) -> Self {
        LayerGrad {
            weight: Tensor::zeros(layer.weight.shape()),
            bias: Tensor::zeros(layer.bias.shape()),
        }
    }

    pub fn axpy(&mut self, alpha: f64, other: &LayerGrad) {
        self.weight.axpy(alpha, &other.weight);
        self.bias.axpy(alpha, &other.bias);
    }

    pub fn norm(&self) -> f64 {
        crate::tensor::flat_norm(&[&self.weight, &self.bias])
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = self.weight.as_slice().to_vec();
        out.extend_from_slice(self.bias.as_slice());
        out
    }
}

/// Per-layer gradients in the model's canonical layer order.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelGrads {
    pub per_layer: Vec<LayerGrad>,
}

impl ModelGrads {
    pub fn zeros_like(model: &DualEncoderModel) -> Self {
        let per_layer = model
            .layer_ids()
            .into_iter()
            .map(|id| LayerGrad::zeros_like(model.get_layer(id).unwrap()))
            .collect();
        ModelGrads { per_layer }
    }

    pub fn layer(&self, model: &DualEncoderModel, id: LayerId) -> Result<&LayerGrad> {
        Ok(&self.per_layer[model.ordinal(id)?])
    }

    fn add_assign(&mut self, other: &ModelGrads) {
        for (a, b) in self.per_layer.iter_mut().zip(other.per_layer.iter()) {
            a.axpy(1.0, b);
        }
    }

    pub fn assert_finite(&self) -> Result<()> {
        for lg in &self.per_layer {
            if lg.weight.as_slice().iter().any(|x| !x.is_finite())
                || lg.bias.as_slice().iter().any(|x| !x.is_finite())
            {
                return Err(Error::NonFinite("gradient".into()));
            }
        }
        Ok(())
    }
}

/// One-time forget and retain gradients computed at a single parameter point.
#[derive(Debug, Clone)]
pub struct GradientSnapshot {
    pub forget: ModelGrads,
    pub retain: ModelGrads,
    pub forget_count: usize,
    pub retain_count: usize,
    /// Fingerprint of the model the gradients were taken at.
    pub model_fingerprint: u64,
}

impl GradientSnapshot {
    /// Content hash of the snapshot, used as provenance for deltas.
    pub fn fingerprint(&self) -> u64 {
        let mut bytes = Vec::new();
        bytes.extend_from_slice(b"gradient-snapshot");
        bytes.extend_from_slice(&self.model_fingerprint.to_le_bytes());
        bytes.extend_from_slice(&(self.forget_count as u64).to_le_bytes());
        bytes.extend_from_slice(&(self.retain_count as u64).to_le_bytes());
        for grads in [&self.forget, &self.retain] {
            for lg in &grads.per_layer {
                for &v in lg.weight.as_slice().iter().chain(lg.bias.as_slice()) {
                    bytes.extend_from_slice(&v.to_bits().to_le_bytes());
                }
            }
        }
        crate::rng::fnv1a64(&bytes)
    }
}

thread_local! {
    static GRAD_CALLS: std::cell::Cell<u64> = const { std::cell::Cell::new(0) };
    static SNAPSHOT_CALLS: std::cell::Cell<u64> = const { std::cell::Cell::new(0) };
}

/// Diagnostic counter: number of full-batch gradient computations performed
/// on the current thread. One snapshot accounts for two (forget + retain).
pub fn grad_call_count() -> u64 {
    GRAD_CALLS.with(|c| c.get())
}

pub fn snapshot_call_count() -> u64 {
    SNAPSHOT_CALLS.with(|c| c.get())
}

fn embed_batch(
    model: &DualEncoderModel,
    batch: &PairBatch,
) -> Result<(Vec<ForwardTrace>, Vec<ForwardTrace>)> {
    let n = batch.len();
    let mut v = Vec::with_capacity(n);
    let mut t = Vec::with_capacity(n);
    for i in 0..n {
        v.push(model.forward_traced(TowerKind::Vision, batch.vision.row(i))?);
        t.push(model.forward_traced(TowerKind::Text, batch.text.row(i))?);
    }
    Ok((v, t))
}

/// Mean cosine embedding loss over positive pairs: (1/n) sum_i (1 - cos(v_i, t_i)).
/// Always in [0, 2].
pub fn forget_loss(model: &DualEncoderModel, batch: &PairBatch) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch("forget_loss"));
    }
    let (v, t) = embed_batch(model, batch)?;
    let n = batch.len() as f64;
    let mut acc = 0.0;
    for (vi, ti) in v.iter().zip(t.iter()) {
        acc += 1.0 - clamp_unit(dot(&vi.embedding, &ti.embedding));
    }
    Ok(acc / n)
}

/// Symmetric in-batch contrastive loss at temperature tau, per-candidate
/// softmax over the n pairs in memory.
pub fn retain_loss(model: &DualEncoderModel, batch: &PairBatch) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch("retain_loss"));
    }
    let (v, t) = embed_batch(model, batch)?;
    let n = batch.len();
    let scores = score_matrix(&v, &t, model.tau);
    let mut acc = 0.0;
    for (i, row) in scores.iter().enumerate() {
        // image-to-text: softmax over row i
        acc += lse(row) - row[i];
        // text-to-image: softmax over column i
        let col: Vec<f64> = (0..n).map(|j| scores[j][i]).collect();
        acc += lse(&col) - row[i];
    }
    Ok(acc / (2.0 * n as f64))
}

pub fn loss(model: &DualEncoderModel, batch: &PairBatch, kind: LossKind) -> Result<f64> {
    match kind {
        LossKind::Forget => forget_loss(model, batch),
        LossKind::Retain => retain_loss(model, batch),
    }
}

/// scores[i][j] = v_i . t_j / tau (embeddings are unit vectors).
fn score_matrix(v: &[ForwardTrace], t: &[ForwardTrace], tau: f64) -> Vec<Vec<f64>> {
    v.iter()
        .map(|vi| {
            t.iter()
                .map(|tj| dot(&vi.embedding, &tj.embedding) / tau)
                .collect()
        })
        .collect()
}

fn lse(xs: &[f64]) -> f64 {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

fn softmax(xs: &[f64]) -> Vec<f64> {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = xs.iter().map(|x| (x - m).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Gradient accumulation options. Per-sample contributions are summed in
/// ascending sample order, pairwise within chunks of `chunk_size`, and the
/// chunk results are then added in chunk order. Fixed options give bit-stable
/// gradients.
#[derive(Debug, Clone, Copy)]
pub struct GradOptions {
    pub chunk_size: usize,
}

impl Default for GradOptions {
    fn default() -> Self {
        GradOptions { chunk_size: 32 }
    }
}

/// Analytic gradient of the selected loss with respect to every layer.
pub fn grad(model: &DualEncoderModel, batch: &PairBatch, kind: LossKind) -> Result<ModelGrads> {
    grad_with(model, batch, kind, GradOptions::default())
}

pub fn grad_with(
    model: &DualEncoderModel,
    batch: &PairBatch,
    kind: LossKind,
    opts: GradOptions,
) -> Result<ModelGrads> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch("grad"));
    }
    GRAD_CALLS.with(|c| c.set(c.get() + 1));
    let chunk_size = opts.chunk_size.max(1);
    let n = batch.len();
    let (v, t) = embed_batch(model, batch)?;

    // Per-sample gradients with respect to the unit embeddings.
    let (dv, dt) = match kind {
        LossKind::Forget => {
            let scale = -1.0 / n as f64;
            let dv: Vec<Vec<f64>> = t
                .iter()
                .map(|ti| ti.embedding.iter().map(|x| scale * x).collect())
                .collect();
            let dt: Vec<Vec<f64>> = v
                .iter()
                .map(|vi| vi.embedding.iter().map(|x| scale * x).collect())
                .collect();
            (dv, dt)
        }
        LossKind::Retain => retain_embedding_grads(&v, &t, model.tau),
    };

    // Backpropagate each sample through both towers, accumulating in the
    // documented fixed order.
    let mut total = ModelGrads::zeros_like(model);
    let vision_layers = model.vision.layers.len();
    let indices: Vec<usize> = (0..n).collect();
    for chunk in indices.chunks(chunk_size) {
        let contributions: Vec<ModelGrads> = chunk
            .iter()
            .map(|&i| {
                let mut g = ModelGrads::zeros_like(model);
                backward_tower(
                    &model.vision,
                    &v[i],
                    &dv[i],
                    &mut g.per_layer[..vision_layers],
                );
                backward_tower(
                    &model.text,
                    &t[i],
                    &dt[i],
                    &mut g.per_layer[vision_layers..],
                );
                g
            })
            .collect();
        total.add_assign(&pairwise_sum(contributions));
    }
    total.assert_finite()?;
    Ok(total)
}

/// Embedding gradients of the symmetric contrastive loss.
fn retain_embedding_grads(
    v: &[ForwardTrace],
    t: &[ForwardTrace],
    tau: f64,
) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let n = v.len();
    let d = v[0].embedding.len();
    let scores = score_matrix(v, t, tau);
    // p[i] = softmax over text candidates for image i (row i)
    let p: Vec<Vec<f64>> = scores.iter().map(|row| softmax(row)).collect();
    // q[i] = softmax over image candidates for text i (column i)
    let q: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            let col: Vec<f64> = (0..n).map(|j| scores[j][i]).collect();
            softmax(&col)
        })
        .collect();

    let scale = 1.0 / (2.0 * n as f64 * tau);
    let mut dv = vec![vec![0.0; d]; n];
    let mut dt = vec![vec![0.0; d]; n];
    for k in 0..n {
        // d/dv_k of image-to-text terms: sum_j (p[k][j] - d_kj) t_j
        for j in 0..n {
            let c = p[k][j] - if j == k { 1.0 } else { 0.0 };
            for (dvx, tx) in dv[k].iter_mut().zip(t[j].embedding.iter()) {
                *dvx += c * tx;
            }
        }
        // d/dv_k of text-to-image terms: sum_i (q[i][k] - d_ik) t_i
        for i in 0..n {
            let c = q[i][k] - if i == k { 1.0 } else { 0.0 };
            for (dvx, tx) in dv[k].iter_mut().zip(t[i].embedding.iter()) {
                *dvx += c * tx;
            }
        }
        // d/dt_k of image-to-text terms: sum_i (p[i][k] - d_ik) v_i
        for i in 0..n {
            let c = p[i][k] - if i == k { 1.0 } else { 0.0 };
            for (dtx, vx) in dt[k].iter_mut().zip(v[i].embedding.iter()) {
                *dtx += c * vx;
            }
        }
        // d/dt_k of text-to-image terms: sum_j (q[k][j] - d_kj) v_j
        for j in 0..n {
            let c = q[k][j] - if j == k { 1.0 } else { 0.0 };
            for (dtx, vx) in dt[k].iter_mut().zip(v[j].embedding.iter()) {
                *dtx += c * vx;
            }
        }
        for x in dv[k].iter_mut() {
            *x *= scale;
        }
        for x in dt[k].iter_mut() {
            *x *= scale;
        }
    }
    (dv, dt)
}

/// Backpropagate a gradient with respect to the unit embedding through the
/// normalization and the affine/tanh stack of one tower for one sample.
fn backward_tower(
    tower: &crate::model::Tower,
    trace: &ForwardTrace,
    grad_embedding: &[f64],
    out: &mut [LayerGrad],
) {
    // Through e = u / |u|: g_u = (g_e - (e . g_e) e) / |u|.
    let e = &trace.embedding;
    let projected = dot(grad_embedding, e);
    let mut delta: Vec<f64> = grad_embedding
        .iter()
        .zip(e.iter())
        .map(|(g, ei)| (g - projected * ei) / trace.prenorm_norm)
        .collect();

    for k in (0..tower.layers.len()).rev() {
        let layer = &tower.layers[k];
        let input = &trace.inputs[k];
        let (out_dim, in_dim) = (layer.out_dim(), layer.in_dim());
        {
            let gw = out[k].weight.as_mut_slice();
            let gb = out[k].bias.as_mut_slice();
            for o in 0..out_dim {
                let g = delta[o];
                gb[o] += g;
                let row = &mut gw[o * in_dim..(o + 1) * in_dim];
                for (w, x) in row.iter_mut().zip(input.iter()) {
                    *w += g * x;
                }
            }
        }
        if k > 0 {
            let w = layer.weight.as_slice();
            let mut gin = vec![0.0; in_dim];
            for o in 0..out_dim {
                let g = delta[o];
                let row = &w[o * in_dim..(o + 1) * in_dim];
                for (gi, wi) in gin.iter_mut().zip(row.iter()) {
                    *gi += g * wi;
                }
            }
            let h = &trace.hidden[k - 1];
            delta = gin
                .iter()
                .zip(h.iter())
                .map(|(g, hi)| g * (1.0 - hi * hi))
                .collect();
        }
    }
}

/// Deterministic pairwise reduction in index order.
fn pairwise_sum(mut items: Vec<ModelGrads>) -> ModelGrads {
    assert!(!items.is_empty());
    while items.len() > 1 {
        let mut next = Vec::with_capacity(items.len().div_ceil(2));
        let mut iter = items.into_iter();
        while let Some(mut a) = iter.next() {
            if let Some(b) = iter.next() {
                a.add_assign(&b);
            }
            next.push(a);
        }
        items = next;
    }
    items.pop().unwrap()
}

/// One-time forget and retain gradient computation at the current parameters.
pub fn snapshot(
    model: &DualEncoderModel,
    forget_set: &PairBatch,
    retain_set: &PairBatch,
) -> Result<GradientSnapshot> {
    if forget_set.is_empty() {
        return Err(Error::EmptyBatch("snapshot forget set"));
    }
    if retain_set.is_empty() {
        return Err(Error::EmptyBatch("snapshot retain set"));
    }
    SNAPSHOT_CALLS.with(|c| c.set(c.get() + 1));
    Ok(GradientSnapshot {
        forget: grad(model, forget_set, LossKind::Forget)?,
        retain: grad(model, retain_set, LossKind::Retain)?,
        forget_count: forget_set.len(),
        retain_count: retain_set.len(),
        model_fingerprint: model.fingerprint(),
    })
}

/// Max relative error between analytic and central finite-difference
/// gradients over every parameter. Intended for small models.
pub fn fd_check(model: &DualEncoderModel, batch: &PairBatch, kind: LossKind) -> Result<f64> {
    const H: f64 = 1e-5;
    let analytic = grad(model, batch, kind)?;
    let mut max_rel = 0.0f64;
    for (ord, id) in model.layer_ids().into_iter().enumerate() {
        let layer = model.get_layer(id)?;
        let n_params = layer.param_count();
        for p in 0..n_params {
            let numeric = {
                let probe = |sign: f64| -> Result<f64> {
                    let mut perturbed = layer.clone();
                    let slice = if p < layer.weight.len() {
                        &mut perturbed.weight.as_mut_slice()[p..p + 1]
                    } else {
                        let q = p - layer.weight.len();
                        &mut perturbed.bias.as_mut_slice()[q..q + 1]
                    };
                    slice[0] += sign * H;
                    let m = model.set_layer(id, perturbed)?;
                    loss(&m, batch, kind)
                };
                (probe(1.0)? - probe(-1.0)?) / (2.0 * H)
            };
            let a = {
                let lg = &analytic.per_layer[ord];
                if p < lg.weight.len() {
                    lg.weight.as_slice()[p]
                } else {
                    lg.bias.as_slice()[p - lg.weight.len()]
                }
            };
            let rel = (a - numeric).abs() / numeric.abs().max(1e-8);
            if rel > max_rel {
                max_rel = rel;
            }
        }
    }
    Ok(max_rel)
}

// --- snapshot file format -------------------------------------------------

pub const SNAPSHOT_KIND: &str = "gradient-snapshot";
pub const SNAPSHOT_VERSION: u32 = 1;

fn flatten_model_grads(grads: &ModelGrads) -> Vec<f64> {
    let mut out = Vec::new();
    for lg in &grads.per_layer {
        out.extend_from_slice(lg.weight.as_slice());
        out.extend_from_slice(lg.bias.as_slice());
    }
    out
}

fn unflatten_model_grads(shapes: &[(usize, usize)], data: &[f64]) -> Result<ModelGrads> {
    let expected: usize = shapes.iter().map(|(o, i)| o * i + o).sum();
    if data.len() != expected {
        return Err(Error::CorruptArtifact(
            "gradient payload does not match layer table".into(),
        ));
    }
    let mut per_layer = Vec::with_capacity(shapes.len());
    let mut offset = 0;
    for &(o, i) in shapes {
        let weight = Tensor::from_vec(&[o, i], data[offset..offset + o * i].to_vec())?;
        offset += o * i;
        let bias = Tensor::from_vec(&[o], data[offset..offset + o].to_vec())?;
        offset += o;
        per_layer.push(LayerGrad { weight, bias });
    }
    Ok(ModelGrads { per_layer })
}

/// Write a snapshot (`.gsnap`): the checkpoint container with separate forget
/// and retain payload sections plus a metadata block.
pub fn save_snapshot(
    snapshot: &GradientSnapshot,
    model: &DualEncoderModel,
    path: &Path,
    config_hash: u64,
) -> Result<()> {
    let mut w = ContainerWriter::new(SNAPSHOT_KIND, SNAPSHOT_VERSION);
    w.push_hex("model_fingerprint", snapshot.model_fingerprint);
    w.push("forget_count", snapshot.forget_count);
    w.push("retain_count", snapshot.retain_count);
    w.push_hex("config_hash", config_hash);
    for id in model.layer_ids() {
        let layer = model.get_layer(id)?;
        w.push(
            "layer",
            format!("{} {} {}", id.name(), layer.out_dim(), layer.in_dim()),
        );
    }
    w.section_f64("forget", flatten_model_grads(&snapshot.forget));
    w.section_f64("retain", flatten_model_grads(&snapshot.retain));
    w.write_to(path)
}

pub fn load_snapshot(path: &Path) -> Result<(GradientSnapshot, u64)> {
    let r = ContainerReader::read_from(path, SNAPSHOT_KIND, SNAPSHOT_VERSION)?;
    let mut shapes = Vec::new();
    for decl in r.values("layer") {
        let fields: Vec<&str> = decl.split(' ').collect();
        if fields.len() != 3 {
            return Err(Error::CorruptArtifact(format!("bad layer record `{decl}`")));
        }
        let o: usize = fields[1]
            .parse()
            .map_err(|_| Error::CorruptArtifact("bad layer dim".into()))?;
        let i: usize = fields[2]
            .parse()
            .map_err(|_| Error::CorruptArtifact("bad layer dim".into()))?;
        shapes.push((o, i));
    }
    let snapshot = GradientSnapshot {
        forget: unflatten_model_grads(&shapes, r.section_f64("forget")?)?,
        retain: unflatten_model_grads(&shapes, r.section_f64("retain")?)?,
        forget_count: r.usize_value("forget_count")?,
        retain_count: r.usize_value("retain_count")?,
        model_fingerprint: r.hex_value("model_fingerprint")?,
    };
    let config_hash = r.hex_value("config_hash")?;
    Ok((snapshot, config_hash))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Architecture;
    use crate::rng::Rng;

    pub(crate) fn tiny_model(seed: u64) -> DualEncoderModel {
        let arch = Architecture {
            vision_dims: vec![5, 6, 4],
            text_dims: vec![4, 6, 4],
            tau: 0.5,
        };
        DualEncoderModel::init(&arch, &mut Rng::new(seed)).unwrap()
    }

    pub(crate) fn random_batch(n: usize, vd: usize, td: usize, seed: u64) -> PairBatch {
        let mut rng = Rng::new(seed);
        let vision: Vec<f64> = (0..n * vd).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let text: Vec<f64> = (0..n * td).map(|_| rng.uniform(-1.0, 1.0)).collect();
        PairBatch::new(
            Tensor::from_vec(&[n, vd], vision).unwrap(),
            Tensor::from_vec(&[n, td], text).unwrap(),
            vec![0; n],
        )
        .unwrap()
    }

    /// Model whose towers are identity maps, so embeddings equal normalized
    /// inputs. Lets loss values be computed by hand.
    fn identity_model(dim: usize, tau: f64) -> DualEncoderModel {
        let mut eye = Tensor::zeros(&[dim, dim]);
        for i in 0..dim {
            eye.as_mut_slice()[i * dim + i] = 1.0;
        }
        let layer = crate::model::AffineLayer {
            weight: eye,
            bias: Tensor::zeros(&[dim]),
        };
        DualEncoderModel {
            vision: crate::model::Tower {
                layers: vec![layer.clone()],
            },
            text: crate::model::Tower {
                layers: vec![layer],
            },
            tau,
        }
    }

    fn batch_from_rows(rows_v: &[&[f64]], rows_t: &[&[f64]]) -> PairBatch {
        let n = rows_v.len();
        let vd = rows_v[0].len();
        let td = rows_t[0].len();
        PairBatch::new(
            Tensor::from_vec(&[n, vd], rows_v.concat()).unwrap(),
            Tensor::from_vec(&[n, td], rows_t.concat()).unwrap(),
            vec![0; n],
        )
        .unwrap()
    }

    #[test]
    fn retain_loss_single_pair_is_zero() {
        let m = identity_model(3, 0.07);
        let b = batch_from_rows(&[&[1.0, 0.0, 0.0]], &[&[0.0, 2.0, 0.0]]);
        assert_eq!(retain_loss(&m, &b).unwrap(), 0.0);
    }

    #[test]
    fn retain_loss_two_orthogonal_matched_pairs() {
        // v_i = t_i, e1 orthogonal to e2, tau = 1:
        // every term is ln(1 + e^-1) = 0.31326168751822286.
        let m = identity_model(2, 1.0);
        let e1 = [1.0, 0.0];
        let e2 = [0.0, 1.0];
        let b = batch_from_rows(&[&e1, &e2], &[&e1, &e2]);
        let expected = (1.0 + (-1.0f64).exp()).ln();
        let got = retain_loss(&m, &b).unwrap();
        assert!((got - expected).abs() < 1e-14);
        assert!((got - 0.313262).abs() < 1e-6);
    }

    #[test]
    fn retain_loss_all_identical_embeddings() {
        // Uniform softmax over two equal candidates: loss = ln 2.
        let m = identity_model(2, 1.0);
        let e = [0.5, 0.5];
        let b = batch_from_rows(&[&e, &e], &[&e, &e]);
        let got = retain_loss(&m, &b).unwrap();
        assert!((got - std::f64::consts::LN_2).abs() < 1e-14);
    }

    #[test]
    fn forget_loss_extremes() {
        let m = identity_model(2, 0.07);
        let e = [0.8, 0.6];
        let aligned = batch_from_rows(&[&e, &e], &[&e, &e]);
        assert!(forget_loss(&m, &aligned).unwrap().abs() < 1e-14);

        let neg = [-0.8, -0.6];
        let anti = batch_from_rows(&[&e], &[&neg]);
        assert!((forget_loss(&m, &anti).unwrap() - 2.0).abs() < 1e-14);

        let orth = batch_from_rows(&[&[1.0, 0.0]], &[&[0.0, 1.0]]);
        assert!((forget_loss(&m, &orth).unwrap() - 1.0).abs() < 1e-14);
    }

    #[test]
    fn fd_check_forget_loss() {
        let m = tiny_model(31);
        let b = random_batch(5, 5, 4, 32);
        let err = fd_check(&m, &b, LossKind::Forget).unwrap();
        assert!(err < 1e-5, "max relative error {err}");
    }

    #[test]
    fn fd_check_retain_loss() {
        let m = tiny_model(33);
        let b = random_batch(4, 5, 4, 34);
        let err = fd_check(&m, &b, LossKind::Retain).unwrap();
        assert!(err < 1e-5, "max relative error {err}");
    }

    #[test]
    fn retain_grad_single_pair_is_zero() {
        // With n = 1 the retain loss is constant zero, so both analytic and
        // numeric gradients vanish.
        let m = tiny_model(35);
        let b = random_batch(1, 5, 4, 36);
        let g = grad(&m, &b, LossKind::Retain).unwrap();
        for lg in &g.per_layer {
            assert!(lg.norm() < 1e-10);
        }
        let err_scale = fd_check(&m, &b, LossKind::Retain).unwrap();
        // Both sides are ~0; the relative-error guard caps at |a|/1e-8.
        assert!(err_scale < 1e-2);
    }

    #[test]
    fn duplicating_every_row_preserves_gradient() {
        let m = tiny_model(37);
        let b = random_batch(3, 5, 4, 38);
        let doubled = b.concat(&b);
        for kind in [LossKind::Forget, LossKind::Retain] {
            let g1 = grad(&m, &b, kind).unwrap();
            let g2 = grad(&m, &doubled, kind).unwrap();
            for (a, bb) in g1.per_layer.iter().zip(g2.per_layer.iter()) {
                let mut diff = a.clone();
                diff.axpy(-1.0, bb);
                assert!(diff.norm() < 1e-12, "kind {kind:?}");
            }
        }
    }

    #[test]
    fn forget_grad_is_linear_in_the_mean() {
        let m = tiny_model(39);
        let a = random_batch(3, 5, 4, 40);
        let b = random_batch(5, 5, 4, 41);
        let combined = a.concat(&b);
        let ga = grad(&m, &a, LossKind::Forget).unwrap();
        let gb = grad(&m, &b, LossKind::Forget).unwrap();
        let gc = grad(&m, &combined, LossKind::Forget).unwrap();
        let (na, nb) = (a.len() as f64, b.len() as f64);
        for ((la, lb), lc) in ga
            .per_layer
            .iter()
            .zip(gb.per_layer.iter())
            .zip(gc.per_layer.iter())
        {
            let mut expected = LayerGrad {
                weight: Tensor::zeros(la.weight.shape()),
                bias: Tensor::zeros(la.bias.shape()),
            };
            expected.axpy(na / (na + nb), la);
            expected.axpy(nb / (na + nb), lb);
            let mut diff = expected;
            diff.axpy(-1.0, lc);
            assert!(diff.norm() < 1e-13);
        }
    }

    #[test]
    fn chunked_accumulation_matches_sequential_sum() {
        let m = tiny_model(43);
        let b = random_batch(13, 5, 4, 44);
        for kind in [LossKind::Forget, LossKind::Retain] {
            // Independent oracle: plain sequential accumulation (chunk = 1
            // makes every chunk a single sample added in order).
            let sequential = grad_with(&m, &b, kind, GradOptions { chunk_size: 1 }).unwrap();
            for chunk_size in [4, 13, 64] {
                let g = grad_with(&m, &b, kind, GradOptions { chunk_size }).unwrap();
                for (x, y) in g.per_layer.iter().zip(sequential.per_layer.iter()) {
                    let mut diff = x.clone();
                    diff.axpy(-1.0, y);
                    assert!(diff.norm() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn snapshot_is_deterministic_and_shape_aligned() {
        let m = tiny_model(45);
        let f = random_batch(4, 5, 4, 46);
        let r = random_batch(6, 5, 4, 47);
        let s1 = snapshot(&m, &f, &r).unwrap();
        let s2 = snapshot(&m, &f, &r).unwrap();
        assert_eq!(s1.forget, s2.forget);
        assert_eq!(s1.retain, s2.retain);
        assert_eq!(s1.model_fingerprint, m.fingerprint());
        assert_eq!(s1.forget_count, 4);
        assert_eq!(s1.retain_count, 6);
        for (id, lg) in m.layer_ids().into_iter().zip(s1.forget.per_layer.iter()) {
            let layer = m.get_layer(id).unwrap();
            assert_eq!(layer.weight.shape(), lg.weight.shape());
            assert_eq!(layer.bias.shape(), lg.bias.shape());
        }
    }

    #[test]
    fn snapshot_file_round_trip() {
        let dir = std::env::temp_dir().join("ulab-objectives-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("snap.gsnap");
        let m = tiny_model(48);
        let f = random_batch(4, 5, 4, 49);
        let r = random_batch(6, 5, 4, 50);
        let s = snapshot(&m, &f, &r).unwrap();
        save_snapshot(&s, &m, &path, 0x77).unwrap();
        let (loaded, hash) = load_snapshot(&path).unwrap();
        assert_eq!(hash, 0x77);
        assert_eq!(loaded.forget, s.forget);
        assert_eq!(loaded.retain, s.retain);
        assert_eq!(loaded.model_fingerprint, s.model_fingerprint);
        assert_eq!(loaded.forget_count, s.forget_count);
        assert_eq!(loaded.retain_count, s.retain_count);
    }

    #[test]
    fn empty_batch_rejected() {
        let m = tiny_model(51);
        let empty = PairBatch::new(
            Tensor::from_vec(&[1, 5], vec![0.1; 5]).unwrap(),
            Tensor::from_vec(&[1, 4], vec![0.1; 4]).unwrap(),
            vec![0],
        )
        .unwrap()
        .take(&[]);
        assert!(matches!(forget_loss(&m, &empty), Err(Error::EmptyBatch(_))));
        assert!(matches!(
            grad(&m, &empty, LossKind::Retain),
            Err(Error::EmptyBatch(_))
        ));
    }
}
