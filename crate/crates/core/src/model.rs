//! The miniature two-tower contrastive encoder: named affine layers with tanh
//! between them, identity after the last, and an l2-normalized embedding out
//! of each tower.

use crate::error::{Error, Result};
use crate::rng::{fnv1a64, Rng};
use crate::tensor::{l2_normalize_in_place, slice_norm, Tensor, DEGENERATE_EPS};
use serde::{Deserialize, Serialize};
use std::fmt;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TowerKind {
    Vision,
    Text,
}

impl TowerKind {
    pub fn as_str(self) -> &'static str {
        match self {
            TowerKind::Vision => "vision",
            TowerKind::Text => "text",
        }
    }
}

impl fmt::Display for TowerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Stable address of one affine module. `index` is the position within its
/// tower; the canonical model-wide ordering is all vision layers followed by
/// all text layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LayerId {
    pub tower: TowerKind,
    pub index: usize,
}

impl LayerId {
    pub fn vision(index: usize) -> Self {
        LayerId {
            tower: TowerKind::Vision,
            index,
        }
    }

    pub fn text(index: usize) -> Self {
        LayerId {
            tower: TowerKind::Text,
            index,
        }
    }

    /// Human-readable unique name, e.g. "vision.fc1".
    pub fn name(&self) -> String {
        format!("{}.fc{}", self.tower, self.index + 1)
    }

    pub fn parse(name: &str) -> Result<Self> {
        let (tower, rest) = name
            .split_once('.')
            .ok_or_else(|| Error::UnknownLayer(name.to_string()))?;
        let tower = match tower {
            "vision" => TowerKind::Vision,
            "text" => TowerKind::Text,
            _ => return Err(Error::UnknownLayer(name.to_string())),
        };
        let index: usize = rest
            .strip_prefix("fc")
            .and_then(|s| s.parse().ok())
            .filter(|&i| i >= 1)
            .ok_or_else(|| Error::UnknownLayer(name.to_string()))?;
        Ok(LayerId {
            tower,
            index: index - 1,
        })
    }
}

impl fmt::Display for LayerId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name())
    }
}

/// One named affine module: weight [out x in] and bias [out]. Weight and bias
/// are treated as a single flattened unit by all norms and cosines.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AffineLayer {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl AffineLayer {
    pub fn out_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn in_dim(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tower {
    pub layers: Vec<AffineLayer>,
}

impl Tower {
    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().unwrap().out_dim()
    }
}

/// Architecture descriptor: the affine dimension chains of both towers plus
/// the shared embedding dimension and temperature.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    /// Dimension chain of the vision tower, input first (e.g. [32, 64, 64, 16]).
    pub vision_dims: Vec<usize>,
    /// Dimension chain of the text tower, input first.
    pub text_dims: Vec<usize>,
    pub tau: f64,
}

impl Default for Architecture {
    fn default() -> Self {
        Architecture {
            vision_dims: vec![32, 64, 64, 16],
            text_dims: vec![24, 64, 64, 16],
            tau: 0.07,
        }
    }
}

impl Architecture {
    pub fn embed_dim(&self) -> usize {
        *self.vision_dims.last().unwrap()
    }

    pub fn validate(&self) -> Result<()> {
        if self.vision_dims.len() < 2 || self.text_dims.len() < 2 {
            return Err(Error::Config("each tower needs at least one layer".into()));
        }
        if self
            .vision_dims
            .iter()
            .chain(&self.text_dims)
            .any(|&d| d == 0)
        {
            return Err(Error::Config("zero layer dimension".into()));
        }
        if self.vision_dims.last() != self.text_dims.last() {
            return Err(Error::Config(
                "towers must share the final embedding dimension".into(),
            ));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::Config("temperature must be positive".into()));
        }
        Ok(())
    }
}

/// Two-tower dual encoder with a fixed temperature. Immutable by convention:
/// editing operations return a modified copy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DualEncoderModel {
    pub vision: Tower,
    pub text: Tower,
    pub tau: f64,
}

/// Per-sample forward activations kept for backpropagation.
pub struct ForwardTrace {
    /// Input into each affine layer (first entry is the raw input).
    pub inputs: Vec<Vec<f64>>,
    /// tanh outputs per hidden layer (length = layers - 1).
    pub hidden: Vec<Vec<f64>>,
    /// Last affine output before normalization.
    pub prenorm: Vec<f64>,
    pub prenorm_norm: f64,
    /// Unit-norm embedding.
    pub embedding: Vec<f64>,
}

impl DualEncoderModel {
    /// Deterministic initialization: weights uniform in
    /// [-1/sqrt(fan_in), +1/sqrt(fan_in)] drawn layer by layer in canonical
    /// order (vision then text, row-major within each weight), biases zero.
    pub fn init(arch: &Architecture, rng: &mut Rng) -> Result<Self> {
        arch.validate()?;
        let build = |dims: &[usize], rng: &mut Rng| -> Tower {
            let mut layers = Vec::with_capacity(dims.len() - 1);
            for w in dims.windows(2) {
                let (fan_in, fan_out) = (w[0], w[1]);
                let bound = 1.0 / (fan_in as f64).sqrt();
                let data: Vec<f64> = (0..fan_out * fan_in)
                    .map(|_| rng.uniform(-bound, bound))
                    .collect();
                layers.push(AffineLayer {
                    weight: Tensor::from_vec(&[fan_out, fan_in], data).unwrap(),
                    bias: Tensor::zeros(&[fan_out]),
                });
            }
            Tower { layers }
        };
        let vision = build(&arch.vision_dims, rng);
        let text = build(&arch.text_dims, rng);
        Ok(DualEncoderModel {
            vision,
            text,
            tau: arch.tau,
        })
    }

    pub fn architecture(&self) -> Architecture {
        let chain = |t: &Tower| {
            let mut dims = vec![t.input_dim()];
            dims.extend(t.layers.iter().map(|l| l.out_dim()));
            dims
        };
        Architecture {
            vision_dims: chain(&self.vision),
            text_dims: chain(&self.text),
            tau: self.tau,
        }
    }

    pub fn embed_dim(&self) -> usize {
        self.vision.output_dim()
    }

    fn tower(&self, kind: TowerKind) -> &Tower {
        match kind {
            TowerKind::Vision => &self.vision,
            TowerKind::Text => &self.text,
        }
    }

    fn tower_mut(&mut self, kind: TowerKind) -> &mut Tower {
        match kind {
            TowerKind::Vision => &mut self.vision,
            TowerKind::Text => &mut self.text,
        }
    }

    /// Canonical layer enumeration: every parameter tensor appears exactly
    /// once, vision layers first.
    pub fn layer_ids(&self) -> Vec<LayerId> {
        let mut ids: Vec<LayerId> = (0..self.vision.layers.len()).map(LayerId::vision).collect();
        ids.extend((0..self.text.layers.len()).map(LayerId::text));
        ids
    }

    pub fn layer_count(&self) -> usize {
        self.vision.layers.len() + self.text.layers.len()
    }

    /// Position of a layer in the canonical enumeration.
    pub fn ordinal(&self, id: LayerId) -> Result<usize> {
        let (count, base) = match id.tower {
            TowerKind::Vision => (self.vision.layers.len(), 0),
            TowerKind::Text => (self.text.layers.len(), self.vision.layers.len()),
        };
        if id.index >= count {
            return Err(Error::UnknownLayer(id.name()));
        }
        Ok(base + id.index)
    }

    pub fn get_layer(&self, id: LayerId) -> Result<&AffineLayer> {
        self.ordinal(id)?;
        Ok(&self.tower(id.tower).layers[id.index])
    }

    /// Replace exactly the addressed layer, leaving every other layer
    /// bit-identical. Returns a modified copy.
    pub fn set_layer(&self, id: LayerId, params: AffineLayer) -> Result<Self> {
        let current = self.get_layer(id)?;
        if current.weight.shape() != params.weight.shape() {
            return Err(Error::ShapeMismatch {
                context: format!("set_layer {} weight", id.name()),
                expected: current.weight.shape().to_vec(),
                got: params.weight.shape().to_vec(),
            });
        }
        if current.bias.shape() != params.bias.shape() {
            return Err(Error::ShapeMismatch {
                context: format!("set_layer {} bias", id.name()),
                expected: current.bias.shape().to_vec(),
                got: params.bias.shape().to_vec(),
            });
        }
        let mut next = self.clone();
        next.tower_mut(id.tower).layers[id.index] = params;
        Ok(next)
    }

    /// Forward pass of one tower with the full activation trace.
    pub fn forward_traced(&self, kind: TowerKind, x: &[f64]) -> Result<ForwardTrace> {
        let tower = self.tower(kind);
        if x.len() != tower.input_dim() {
            return Err(Error::ShapeMismatch {
                context: format!("{kind} tower input"),
                expected: vec![tower.input_dim()],
                got: vec![x.len()],
            });
        }
        let n_layers = tower.layers.len();
        let mut inputs: Vec<Vec<f64>> = Vec::with_capacity(n_layers);
        let mut hidden: Vec<Vec<f64>> = Vec::with_capacity(n_layers.saturating_sub(1));
        let mut cur = x.to_vec();
        for (k, layer) in tower.layers.iter().enumerate() {
            inputs.push(cur.clone());
            let mut out = vec![0.0; layer.out_dim()];
            let w = layer.weight.as_slice();
            let in_dim = layer.in_dim();
            for (o, out_o) in out.iter_mut().enumerate() {
                let row = &w[o * in_dim..(o + 1) * in_dim];
                let mut acc = layer.bias.as_slice()[o];
                for (wi, xi) in row.iter().zip(cur.iter()) {
                    acc += wi * xi;
                }
                *out_o = acc;
            }
            if k + 1 < n_layers {
                for v in out.iter_mut() {
                    *v = v.tanh();
                }
                hidden.push(out.clone());
            }
            cur = out;
        }
        let prenorm = cur;
        let norm = slice_norm(&prenorm);
        if norm <= DEGENERATE_EPS {
            return Err(Error::DegenerateEmbedding {
                tower: kind.as_str(),
                norm,
            });
        }
        let mut embedding = prenorm.clone();
        l2_normalize_in_place(&mut embedding)?;
        Ok(ForwardTrace {
            inputs,
            hidden,
            prenorm,
            prenorm_norm: norm,
            embedding,
        })
    }

    /// Unit embedding of an image input.
    pub fn forward_vision(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward_traced(TowerKind::Vision, x)?.embedding)
    }

    /// Unit embedding of a text input.
    pub fn forward_text(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward_traced(TowerKind::Text, x)?.embedding)
    }

    /// FNV-1a hash over the full parameter state (names, shapes, raw float
    /// bits, temperature). Identifies the parameter point gradients were
    /// computed at.
    pub fn fingerprint(&self) -> u64 {
        let mut bytes = Vec::new();
        bytes.extend_from_slice(b"dual-encoder");
        bytes.extend_from_slice(&self.tau.to_bits().to_le_bytes());
        for id in self.layer_ids() {
            let layer = self.get_layer(id).unwrap();
            bytes.extend_from_slice(id.name().as_bytes());
            for &d in layer.weight.shape() {
                bytes.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in layer.weight.as_slice() {
                bytes.extend_from_slice(&v.to_bits().to_le_bytes());
            }
            for &v in layer.bias.as_slice() {
                bytes.extend_from_slice(&v.to_bits().to_le_bytes());
            }
        }
        fnv1a64(&bytes)
    }
}

pub const CHECKPOINT_KIND: &str = "checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Write the model, bit-exactly, to the container format (`.ckpt`).
pub fn save_checkpoint(
    model: &DualEncoderModel,
    path: &std::path::Path,
    config_hash: u64,
) -> Result<()> {
    let mut w = crate::io::ContainerWriter::new(CHECKPOINT_KIND, CHECKPOINT_VERSION);
    w.push_f64("tau", model.tau);
    w.push_hex("config_hash", config_hash);
    let mut params = Vec::new();
    for id in model.layer_ids() {
        let layer = model.get_layer(id).unwrap();
        w.push(
            "layer",
            format!("{} {} {}", id.name(), layer.out_dim(), layer.in_dim()),
        );
        params.extend_from_slice(layer.weight.as_slice());
        params.extend_from_slice(layer.bias.as_slice());
    }
    w.section_f64("params", params);
    w.write_to(path)
}

/// Read a checkpoint back. `load(save(m))` equals `m` bit-exactly, including
/// layer order and temperature. Returns the model and the embedded config hash.
pub fn load_checkpoint(path: &std::path::Path) -> Result<(DualEncoderModel, u64)> {
    let r = crate::io::ContainerReader::read_from(path, CHECKPOINT_KIND, CHECKPOINT_VERSION)?;
    let tau = r.f64_value("tau")?;
    let config_hash = r.hex_value("config_hash")?;
    let params = r.section_f64("params")?;

    let mut vision = Vec::new();
    let mut text = Vec::new();
    let mut offset = 0usize;
    for decl in r.values("layer") {
        let fields: Vec<&str> = decl.split(' ').collect();
        if fields.len() != 3 {
            return Err(Error::CorruptArtifact(format!("bad layer record `{decl}`")));
        }
        let id = LayerId::parse(fields[0])?;
        let out_dim: usize = fields[1]
            .parse()
            .map_err(|_| Error::CorruptArtifact("bad layer out dim".into()))?;
        let in_dim: usize = fields[2]
            .parse()
            .map_err(|_| Error::CorruptArtifact("bad layer in dim".into()))?;
        let w_len = out_dim * in_dim;
        if offset + w_len + out_dim > params.len() {
            return Err(Error::CorruptArtifact(
                "layer table exceeds parameter payload".into(),
            ));
        }
        let weight = Tensor::from_vec(&[out_dim, in_dim], params[offset..offset + w_len].to_vec())?;
        offset += w_len;
        let bias = Tensor::from_vec(&[out_dim], params[offset..offset + out_dim].to_vec())?;
        offset += out_dim;
        let layer = AffineLayer { weight, bias };
        match id.tower {
            TowerKind::Vision => vision.push((id.index, layer)),
            TowerKind::Text => text.push((id.index, layer)),
        }
    }
    if offset != params.len() {
        return Err(Error::CorruptArtifact(
            "parameter payload longer than layer table".into(),
        ));
    }
    let collect = |mut list: Vec<(usize, AffineLayer)>| -> Result<Tower> {
        list.sort_by_key(|(i, _)| *i);
        if list.is_empty() || list.iter().enumerate().any(|(k, (i, _))| k != *i) {
            return Err(Error::CorruptArtifact(
                "non-contiguous layer indices".into(),
            ));
        }
        Ok(Tower {
            layers: list.into_iter().map(|(_, l)| l).collect(),
        })
    };
    let model = DualEncoderModel {
        vision: collect(vision)?,
        text: collect(text)?,
        tau,
    };
    model.architecture().validate()?;
    Ok((model, config_hash))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::slice_norm;

    fn identity_single_layer() -> DualEncoderModel {
        let eye = Tensor::from_vec(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let layer = AffineLayer {
            weight: eye,
            bias: Tensor::zeros(&[2]),
        };
        DualEncoderModel {
            vision: Tower {
                layers: vec![layer.clone()],
            },
            text: Tower {
                layers: vec![layer],
            },
            tau: 0.07,
        }
    }

    #[test]
    fn identity_tower_on_unit_vector() {
        let m = identity_single_layer();
        let out = m.forward_vision(&[0.6, 0.8]).unwrap();
        assert!((out[0] - 0.6).abs() < 1e-15);
        assert!((out[1] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn zero_model_degenerate_embedding() {
        let layer = AffineLayer {
            weight: Tensor::zeros(&[2, 2]),
            bias: Tensor::zeros(&[2]),
        };
        let m = DualEncoderModel {
            vision: Tower {
                layers: vec![layer.clone()],
            },
            text: Tower {
                layers: vec![layer],
            },
            tau: 0.07,
        };
        assert!(matches!(
            m.forward_vision(&[1.0, 2.0]),
            Err(Error::DegenerateEmbedding { .. })
        ));
    }

    #[test]
    #[allow(clippy::needless_range_loop)]
    fn forward_matches_straight_line_reference() {
        // Independent straight-line reimplementation of the same arithmetic
        // for a fixed seeded model and input.
        let arch = Architecture {
            vision_dims: vec![3, 4, 2],
            text_dims: vec![3, 4, 2],
            tau: 0.07,
        };
        let mut rng = Rng::new(42);
        let m = DualEncoderModel::init(&arch, &mut rng).unwrap();
        let x = [0.3, -0.7, 1.1];

        let l0 = &m.vision.layers[0];
        let l1 = &m.vision.layers[1];
        let mut h = [0.0f64; 4];
        for o in 0..4 {
            let mut acc = l0.bias.as_slice()[o];
            for i in 0..3 {
                acc += l0.weight.as_slice()[o * 3 + i] * x[i];
            }
            h[o] = acc.tanh();
        }
        let mut u = [0.0f64; 2];
        for o in 0..2 {
            let mut acc = l1.bias.as_slice()[o];
            for i in 0..4 {
                acc += l1.weight.as_slice()[o * 4 + i] * h[i];
            }
            u[o] = acc;
        }
        let n = (u[0] * u[0] + u[1] * u[1]).sqrt();
        let expected = [u[0] / n, u[1] / n];

        let got = m.forward_vision(&x).unwrap();
        assert_eq!(got.as_slice(), expected.as_slice());
    }

    #[test]
    fn forward_embedding_unit_norm_and_deterministic() {
        let mut rng = Rng::new(7);
        let m = DualEncoderModel::init(&Architecture::default(), &mut rng).unwrap();
        let x: Vec<f64> = (0..32).map(|i| (i as f64 * 0.37).sin()).collect();
        let a = m.forward_vision(&x).unwrap();
        let b = m.forward_vision(&x).unwrap();
        assert_eq!(a, b);
        assert!((slice_norm(&a) - 1.0).abs() < 1e-9);
    }

    #[test]
    fn set_layer_round_trip_and_isolation() {
        let mut rng = Rng::new(1);
        let m = DualEncoderModel::init(&Architecture::default(), &mut rng).unwrap();
        let id = LayerId::vision(0);
        let mut new_layer = m.get_layer(id).unwrap().clone();
        new_layer.weight.as_mut_slice()[0] = 99.0;
        let m2 = m.set_layer(id, new_layer.clone()).unwrap();
        assert_eq!(m2.get_layer(id).unwrap(), &new_layer);
        // Every other layer bit-identical.
        for other in m.layer_ids() {
            if other != id {
                assert_eq!(m2.get_layer(other).unwrap(), m.get_layer(other).unwrap());
            }
        }
    }

    #[test]
    fn set_layer_shape_mismatch_errors() {
        let mut rng = Rng::new(1);
        let m = DualEncoderModel::init(&Architecture::default(), &mut rng).unwrap();
        let id = LayerId::vision(0);
        let layer = m.get_layer(id).unwrap();
        let transposed = AffineLayer {
            weight: Tensor::zeros(&[layer.in_dim(), layer.out_dim()]),
            bias: layer.bias.clone(),
        };
        assert!(matches!(
            m.set_layer(id, transposed),
            Err(Error::ShapeMismatch { .. })
        ));
        assert!(matches!(
            m.get_layer(LayerId::vision(99)),
            Err(Error::UnknownLayer(_))
        ));
    }

    #[test]
    fn layer_ids_cover_all_parameters_once() {
        let mut rng = Rng::new(1);
        let m = DualEncoderModel::init(&Architecture::default(), &mut rng).unwrap();
        let ids = m.layer_ids();
        assert_eq!(ids.len(), 6);
        let total: usize = ids
            .iter()
            .map(|&id| m.get_layer(id).unwrap().param_count())
            .sum();
        let expected = (32 * 64 + 64)
            + (64 * 64 + 64)
            + (64 * 16 + 16)
            + (24 * 64 + 64)
            + (64 * 64 + 64)
            + (64 * 16 + 16);
        assert_eq!(total, expected);
        for (k, id) in ids.iter().enumerate() {
            assert_eq!(m.ordinal(*id).unwrap(), k);
            assert_eq!(LayerId::parse(&id.name()).unwrap(), *id);
        }
    }

    #[test]
    fn checkpoint_round_trip_bit_exact() {
        let dir = std::env::temp_dir().join("ulab-model-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("roundtrip.ckpt");
        let mut rng = Rng::new(99);
        let m = DualEncoderModel::init(&Architecture::default(), &mut rng).unwrap();
        save_checkpoint(&m, &path, 0xabc).unwrap();
        let (loaded, hash) = load_checkpoint(&path).unwrap();
        assert_eq!(hash, 0xabc);
        assert_eq!(loaded, m);
        assert_eq!(loaded.fingerprint(), m.fingerprint());
    }

    #[test]
    fn checkpoint_truncation_detected() {
        let dir = std::env::temp_dir().join("ulab-model-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("truncated.ckpt");
        let mut rng = Rng::new(99);
        let m = DualEncoderModel::init(&Architecture::default(), &mut rng).unwrap();
        save_checkpoint(&m, &path, 0).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 16]).unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(Error::CorruptArtifact(_))
        ));
    }

    #[test]
    fn fingerprint_changes_with_parameters() {
        let mut rng = Rng::new(5);
        let m = DualEncoderModel::init(&Architecture::default(), &mut rng).unwrap();
        let f1 = m.fingerprint();
        let id = LayerId::text(1);
        let mut layer = m.get_layer(id).unwrap().clone();
        layer.bias.as_mut_slice()[3] += 1e-12;
        let m2 = m.set_layer(id, layer).unwrap();
        assert_ne!(f1, m2.fingerprint());
        assert_eq!(f1, m.fingerprint());
    }
}
