//! The assembled detector: backbone → deep pyramid → shared heads.

mod backbone;
mod heads;
mod pyramid;

use std::collections::HashMap;

pub use backbone::{Backbone, BackboneConfig, BackboneKind};
pub use heads::{HeadConfig, Heads, PRIOR_PROBABILITY};
pub use pyramid::{PyramidLevel, PyramidWeights};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::anchors::{generate_anchors, AnchorConfig};
use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::tensor::{reshape, Tensor};

/// Image channels the detector consumes (RGB).
pub const IMAGE_CHANNELS: usize = 3;

/// Everything needed to rebuild a detector's parameter store from
/// scratch. Serializes to the manifest text stored next to checkpoints.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub c_pyr: usize,
    pub num_classes: usize,
    pub head_depth: usize,
    /// Heads attach to pyramid levels with stride ≥ this. 8 keeps anchors
    /// sensible on small images; 2 attaches heads to every level down to
    /// 1×1.
    pub min_head_stride: usize,
    pub anchors: AnchorConfig,
}

impl ModelConfig {
    /// Desk-scale default: tiny 3-stage backbone, 64-channel pyramid,
    /// heads on strides ≥ 8.
    pub fn tiny(kind: BackboneKind, num_classes: usize) -> ModelConfig {
        ModelConfig {
            backbone: BackboneConfig::tiny(kind),
            c_pyr: 64,
            num_classes,
            head_depth: 4,
            min_head_stride: 8,
            anchors: AnchorConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.anchors.validate()?;
        self.head_config().validate()?;
        if !self.min_head_stride.is_power_of_two() {
            return Err(Error::Config(format!(
                "min_head_stride must be a power of two, got {}",
                self.min_head_stride
            )));
        }
        Ok(())
    }

    pub fn head_config(&self) -> HeadConfig {
        HeadConfig {
            anchors_per_location: self.anchors.anchors_per_location(),
            num_classes: self.num_classes,
            c_pyr: self.c_pyr,
            depth: self.head_depth,
        }
    }

    /// Canonical manifest text. Field order and float formatting are
    /// fixed so the text (and its hash) is stable for a given config.
    pub fn manifest(&self) -> String {
        let join = |v: &[f64]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        let channels =
            self.backbone.stage_channels.iter().map(|c| c.to_string()).collect::<Vec<_>>().join(",");
        format!(
            "manifest_version = 1\n\
             backbone_kind = {}\n\
             stage_channels = {}\n\
             c_pyr = {}\n\
             num_classes = {}\n\
             head_depth = {}\n\
             min_head_stride = {}\n\
             anchor_ratios = {}\n\
             anchor_scales = {}\n\
             anchor_base_factor = {}\n",
            self.backbone.kind.name(),
            channels,
            self.c_pyr,
            self.num_classes,
            self.head_depth,
            self.min_head_stride,
            join(&self.anchors.ratios),
            join(&self.anchors.scale_factors),
            self.anchors.base_size_factor,
        )
    }

    /// Parse manifest text back into a config. Unknown keys are errors —
    /// a manifest that says more than we understand is not one of ours.
    pub fn from_manifest(text: &str) -> Result<ModelConfig> {
        let mut fields: HashMap<&str, &str> = HashMap::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("manifest line {}: expected 'key = value'", lineno + 1))
            })?;
            fields.insert(key.trim(), value.trim());
        }
        let get = |key: &str| {
            fields
                .get(key)
                .copied()
                .ok_or_else(|| Error::Config(format!("manifest missing '{key}'")))
        };
        let parse_usize = |key: &str| -> Result<usize> {
            get(key)?
                .parse()
                .map_err(|_| Error::Config(format!("manifest '{key}' is not an integer")))
        };
        let parse_f64_list = |key: &str| -> Result<Vec<f64>> {
            get(key)?
                .split(',')
                .map(|s| {
                    s.trim()
                        .parse()
                        .map_err(|_| Error::Config(format!("manifest '{key}' has a bad number")))
                })
                .collect()
        };
        let version = parse_usize("manifest_version")?;
        if version != 1 {
            return Err(Error::Config(format!("unsupported manifest_version {version}")));
        }
        let known = [
            "manifest_version",
            "backbone_kind",
            "stage_channels",
            "c_pyr",
            "num_classes",
            "head_depth",
            "min_head_stride",
            "anchor_ratios",
            "anchor_scales",
            "anchor_base_factor",
        ];
        for key in fields.keys() {
            if !known.contains(key) {
                return Err(Error::Config(format!("manifest has unknown key '{key}'")));
            }
        }
        let stage_channels: Vec<usize> = get("stage_channels")?
            .split(',')
            .map(|s| {
                s.trim()
                    .parse()
                    .map_err(|_| Error::Config("manifest 'stage_channels' has a bad count".into()))
            })
            .collect::<Result<_>>()?;
        let n_stages = stage_channels.len();
        let config = ModelConfig {
            backbone: BackboneConfig {
                kind: BackboneKind::parse(get("backbone_kind")?)?,
                stage_channels,
                stage_strides: vec![2; n_stages],
            },
            c_pyr: parse_usize("c_pyr")?,
            num_classes: parse_usize("num_classes")?,
            head_depth: parse_usize("head_depth")?,
            min_head_stride: parse_usize("min_head_stride")?,
            anchors: AnchorConfig {
                ratios: parse_f64_list("anchor_ratios")?,
                scale_factors: parse_f64_list("anchor_scales")?,
                base_size_factor: get("anchor_base_factor")?
                    .parse()
                    .map_err(|_| Error::Config("manifest 'anchor_base_factor' is not a number".into()))?,
            },
        };
        config.validate()?;
        Ok(config)
    }

    /// FNV-1a 64 over the manifest text; embedded in checkpoints so a
    /// weight file can refuse to load into the wrong architecture.
    pub fn manifest_hash(&self) -> u64 {
        fnv1a(self.manifest().as_bytes())
    }
}

pub(crate) fn fnv1a(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

/// Head outputs for one pyramid level.
pub struct LevelOutput {
    pub stride: usize,
    pub height: usize,
    pub width: usize,
    /// 1×(A·K)×H×W logits; channel a·K + k is anchor a, class k.
    pub cls_logits: Tensor,
    /// 1×(4·A)×H×W deltas; channels 4a..4a+4 are (tx, ty, tw, th).
    pub box_deltas: Tensor,
}

/// All head outputs for one image, finest level first.
pub struct DetectorOutput {
    pub levels: Vec<LevelOutput>,
}

impl DetectorOutput {
    pub fn total_anchors(&self, anchors_per_location: usize) -> usize {
        self.levels.iter().map(|l| l.height * l.width * anchors_per_location).sum()
    }
}

/// The full detector with its parameter store. Construction is
/// deterministic in the seed; two models built from the same config and
/// seed have bit-identical weights.
pub struct DetectorModel {
    pub config: ModelConfig,
    backbone: Backbone,
    pyramid: PyramidWeights,
    heads: Heads,
}

impl DetectorModel {
    pub fn new(config: ModelConfig, seed: u64) -> Result<DetectorModel> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let backbone = Backbone::new(config.backbone.clone(), IMAGE_CHANNELS, &mut rng)?;
        let pyramid = PyramidWeights::new(&config.backbone.stage_channels, config.c_pyr, &mut rng)?;
        let heads = Heads::new(config.head_config(), &mut rng)?;
        Ok(DetectorModel { config, backbone, pyramid, heads })
    }

    fn to_nchw(image: &Tensor) -> Result<Tensor> {
        match image.rank() {
            3 => {
                let s = image.shape().to_vec();
                reshape(image, &[1, s[0], s[1], s[2]])
            }
            4 if image.shape()[0] == 1 => Ok(image.clone()),
            _ => Err(Error::Shape(format!(
                "expected a 3×H×W or 1×3×H×W image, got {:?}",
                image.shape()
            ))),
        }
    }

    /// Head outputs for every level at or above the configured head
    /// stride. Finer pyramid levels are skipped entirely — they cannot
    /// influence the computed levels.
    pub fn forward(&self, image: &Tensor) -> Result<DetectorOutput> {
        let image = Self::to_nchw(image)?;
        let stage_maps = self.backbone.forward(&image)?;
        let levels = self.pyramid.forward(&stage_maps, 2, self.config.min_head_stride)?;
        if levels.is_empty() {
            return Err(Error::Config(format!(
                "no pyramid level has stride ≥ {}; image too small or head stride too large",
                self.config.min_head_stride
            )));
        }
        let mut outputs = Vec::with_capacity(levels.len());
        for level in levels {
            let (cls_logits, box_deltas) = self.heads.forward(&level.feature)?;
            let s = cls_logits.shape();
            outputs.push(LevelOutput {
                stride: level.stride,
                height: s[2],
                width: s[3],
                cls_logits,
                box_deltas,
            });
        }
        Ok(DetectorOutput { levels: outputs })
    }

    /// The full pyramid down to 1×1, every level, for structural
    /// inspection and tests.
    pub fn pyramid_forward(&self, image: &Tensor) -> Result<Vec<PyramidLevel>> {
        let image = Self::to_nchw(image)?;
        let stage_maps = self.backbone.forward(&image)?;
        self.pyramid.forward(&stage_maps, 2, 2)
    }

    /// Anchors matching each level of a forward pass, in the level/cell
    /// order the head channels assume.
    pub fn anchors_for(&self, output: &DetectorOutput) -> Vec<Vec<BBox>> {
        output
            .levels
            .iter()
            .map(|l| generate_anchors(l.height, l.width, l.stride, &self.config.anchors))
            .collect()
    }

    /// Every parameter with a stable, unique name, in a fixed order.
    pub fn named_parameters(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        self.backbone.named_parameters(&mut out);
        self.pyramid.named_parameters(&mut out);
        self.heads.named_parameters(&mut out);
        out
    }

    pub fn parameters(&self) -> Vec<Tensor> {
        self.named_parameters().into_iter().map(|(_, t)| t).collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.named_parameters().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn head_parameter_count(&self) -> usize {
        self.heads.config.parameter_count()
    }

    /// Overwrite this model's parameters with checkpoint entries.
    /// Names prefixed `__meta.` are checkpoint bookkeeping and are
    /// ignored; everything else must match one-to-one.
    pub fn load_state(&self, entries: &[(String, Tensor)]) -> Result<()> {
        let mut by_name: HashMap<&str, &Tensor> = HashMap::new();
        for (name, tensor) in entries {
            if name.starts_with("__meta.") {
                continue;
            }
            if by_name.insert(name.as_str(), tensor).is_some() {
                return Err(Error::Checkpoint(format!("duplicate tensor '{name}'")));
            }
        }
        let own = self.named_parameters();
        for (name, param) in &own {
            let loaded = by_name.remove(name.as_str()).ok_or_else(|| {
                Error::Checkpoint(format!("checkpoint is missing tensor '{name}'"))
            })?;
            if loaded.shape() != param.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor '{name}' has shape {:?} in the checkpoint but {:?} in the model",
                    loaded.shape(),
                    param.shape()
                )));
            }
            // materialize first: `loaded` may alias `param` when a model
            // reloads its own parameter list
            let values = loaded.to_vec();
            param.copy_values_from(&values);
        }
        if let Some(extra) = by_name.keys().next() {
            return Err(Error::Checkpoint(format!(
                "checkpoint contains unknown tensor '{extra}'"
            )));
        }
        Ok(())
    }
}
