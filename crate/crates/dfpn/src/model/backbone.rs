//! Tiny bottom-up backbones: three stand-ins for the big convolutional
//! bases, each stage halving the spatial size.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{add, conv2d, conv2d_depthwise, relu, ConvParams, Tensor};

/// Backbone flavor. All three share the stage/stride layout and differ
/// only in what one stage computes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BackboneKind {
    /// One 3×3 stride-2 conv + relu per stage.
    TinyPlain,
    /// Stride-2 conv + relu + 3×3 conv, merged with a 1×1 stride-2
    /// projection skip, relu on the sum.
    TinyResidual,
    /// Depthwise 3×3 stride-2 + relu, then pointwise 1×1 + relu.
    TinyDepthwise,
}

impl BackboneKind {
    pub fn name(self) -> &'static str {
        match self {
            BackboneKind::TinyPlain => "tiny-plain",
            BackboneKind::TinyResidual => "tiny-residual",
            BackboneKind::TinyDepthwise => "tiny-depthwise",
        }
    }

    pub fn parse(s: &str) -> Result<BackboneKind> {
        match s {
            "tiny-plain" => Ok(BackboneKind::TinyPlain),
            "tiny-residual" => Ok(BackboneKind::TinyResidual),
            "tiny-depthwise" => Ok(BackboneKind::TinyDepthwise),
            other => Err(Error::Config(format!(
                "unknown backbone kind '{other}' (expected tiny-plain, tiny-residual, or tiny-depthwise)"
            ))),
        }
    }
}

/// Stage layout. Strides are all 2 — the pyramid math depends on strict
/// halving — and at least three stages are required so the pyramid has
/// something to merge.
#[derive(Debug, Clone, PartialEq)]
pub struct BackboneConfig {
    pub kind: BackboneKind,
    pub stage_channels: Vec<usize>,
    pub stage_strides: Vec<usize>,
}

impl BackboneConfig {
    /// The default desk-scale layout: three stages at 16/32/64 channels.
    pub fn tiny(kind: BackboneKind) -> BackboneConfig {
        BackboneConfig { kind, stage_channels: vec![16, 32, 64], stage_strides: vec![2, 2, 2] }
    }

    pub fn validate(&self) -> Result<()> {
        if self.stage_channels.len() < 3 {
            return Err(Error::Config(format!(
                "backbone needs at least 3 stages, got {}",
                self.stage_channels.len()
            )));
        }
        if self.stage_strides.len() != self.stage_channels.len() {
            return Err(Error::Config(format!(
                "{} stage strides for {} stages",
                self.stage_strides.len(),
                self.stage_channels.len()
            )));
        }
        if self.stage_strides.iter().any(|&s| s != 2) {
            return Err(Error::Config("every backbone stage must have stride 2".into()));
        }
        if self.stage_channels.iter().any(|&c| c == 0) {
            return Err(Error::Config("stage channel counts must be positive".into()));
        }
        Ok(())
    }

    pub fn num_stages(&self) -> usize {
        self.stage_channels.len()
    }

    /// Smallest H or W the backbone accepts: every stage must keep at
    /// least one pixel to halve.
    pub fn min_input_size(&self) -> usize {
        1 << self.num_stages()
    }

    /// Closed-form parameter count for the whole backbone given the image
    /// channel count. The per-stage formulas (kernel 3):
    ///
    /// - plain:     9·cin·cout + cout
    /// - residual:  (9·cin·cout + cout) + (9·cout² + cout) + (cin·cout + cout)
    /// - depthwise: (9·cin + cin) + (cin·cout + cout)
    pub fn parameter_count(&self, image_channels: usize) -> usize {
        let mut total = 0;
        let mut cin = image_channels;
        for &cout in &self.stage_channels {
            total += match self.kind {
                BackboneKind::TinyPlain => 9 * cin * cout + cout,
                BackboneKind::TinyResidual => {
                    (9 * cin * cout + cout) + (9 * cout * cout + cout) + (cin * cout + cout)
                }
                BackboneKind::TinyDepthwise => (9 * cin + cin) + (cin * cout + cout),
            };
            cin = cout;
        }
        total
    }
}

enum Stage {
    Plain { conv: ConvParams },
    Residual { conv1: ConvParams, conv2: ConvParams, skip: ConvParams },
    Depthwise { dw: ConvParams, pw: ConvParams },
}

fn conv_init(
    out_c: usize,
    in_c: usize,
    k: usize,
    stride: usize,
    padding: usize,
    rng: &mut impl Rng,
) -> Result<ConvParams> {
    let weights = Tensor::he_uniform(&[out_c, in_c, k, k], in_c * k * k, rng);
    ConvParams::new(weights, Tensor::zeros(&[out_c]).with_grad(), stride, padding)
}

impl Stage {
    fn new(kind: BackboneKind, cin: usize, cout: usize, rng: &mut impl Rng) -> Result<Stage> {
        Ok(match kind {
            BackboneKind::TinyPlain => Stage::Plain { conv: conv_init(cout, cin, 3, 2, 1, rng)? },
            BackboneKind::TinyResidual => Stage::Residual {
                conv1: conv_init(cout, cin, 3, 2, 1, rng)?,
                conv2: conv_init(cout, cout, 3, 1, 1, rng)?,
                skip: conv_init(cout, cin, 1, 2, 0, rng)?,
            },
            BackboneKind::TinyDepthwise => {
                let dw_weights = Tensor::he_uniform(&[cin, 1, 3, 3], 9, rng);
                Stage::Depthwise {
                    dw: ConvParams::new(dw_weights, Tensor::zeros(&[cin]).with_grad(), 2, 1)?,
                    pw: conv_init(cout, cin, 1, 1, 0, rng)?,
                }
            }
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        match self {
            Stage::Plain { conv } => Ok(relu(&conv2d(x, conv)?)),
            Stage::Residual { conv1, conv2, skip } => {
                let main = conv2d(&relu(&conv2d(x, conv1)?), conv2)?;
                let shortcut = conv2d(x, skip)?;
                Ok(relu(&add(&main, &shortcut)?))
            }
            Stage::Depthwise { dw, pw } => {
                let depth = relu(&conv2d_depthwise(x, dw)?);
                Ok(relu(&conv2d(&depth, pw)?))
            }
        }
    }

    fn named_parameters(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        let mut push = |name: &str, p: &ConvParams| {
            out.push((format!("{prefix}.{name}.weight"), p.weights.clone()));
            out.push((format!("{prefix}.{name}.bias"), p.bias.clone()));
        };
        match self {
            Stage::Plain { conv } => push("conv", conv),
            Stage::Residual { conv1, conv2, skip } => {
                push("conv1", conv1);
                push("conv2", conv2);
                push("skip", skip);
            }
            Stage::Depthwise { dw, pw } => {
                push("dw", dw);
                push("pw", pw);
            }
        }
    }
}

/// The bottom-up pathway: a chain of halving stages whose outputs feed
/// the pyramid's lateral connections.
pub struct Backbone {
    pub config: BackboneConfig,
    image_channels: usize,
    stages: Vec<Stage>,
}

impl Backbone {
    pub fn new(config: BackboneConfig, image_channels: usize, rng: &mut impl Rng) -> Result<Backbone> {
        config.validate()?;
        let mut stages = Vec::with_capacity(config.num_stages());
        let mut cin = image_channels;
        for &cout in &config.stage_channels {
            stages.push(Stage::new(config.kind, cin, cout, rng)?);
            cin = cout;
        }
        Ok(Backbone { config, image_channels, stages })
    }

    /// All stage feature maps, finest first. Stage i has spatial size
    /// ceil(input / 2^(i+1)).
    pub fn forward(&self, image: &Tensor) -> Result<Vec<Tensor>> {
        if image.rank() != 4 {
            return Err(Error::Shape(format!(
                "backbone expects an NCHW image, got {:?}",
                image.shape()
            )));
        }
        let s = image.shape();
        if s[1] != self.image_channels {
            return Err(Error::Shape(format!(
                "backbone expects {} image channels, got {}",
                self.image_channels, s[1]
            )));
        }
        let min = self.config.min_input_size();
        if s[2] < min || s[3] < min {
            return Err(Error::Shape(format!(
                "{}x{} image too small for {} stages; minimum is {min}x{min}",
                s[2],
                s[3],
                self.config.num_stages()
            )));
        }
        let mut maps = Vec::with_capacity(self.stages.len());
        let mut x = image.clone();
        for stage in &self.stages {
            x = stage.forward(&x)?;
            maps.push(x.clone());
        }
        Ok(maps)
    }

    pub fn named_parameters(&self, out: &mut Vec<(String, Tensor)>) {
        for (i, stage) in self.stages.iter().enumerate() {
            stage.named_parameters(&format!("backbone.stage{i}"), out);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(42)
    }

    #[test]
    fn stage_sizes_halve() {
        let bb = Backbone::new(BackboneConfig::tiny(BackboneKind::TinyPlain), 3, &mut rng()).unwrap();
        let maps = bb.forward(&Tensor::zeros(&[1, 3, 64, 64])).unwrap();
        let sizes: Vec<(usize, usize)> = maps.iter().map(|m| (m.shape()[2], m.shape()[3])).collect();
        assert_eq!(sizes, vec![(32, 32), (16, 16), (8, 8)]);
        assert_eq!(maps[2].shape()[1], 64);
    }

    #[test]
    fn odd_sizes_ceil_halve() {
        let bb = Backbone::new(BackboneConfig::tiny(BackboneKind::TinyPlain), 3, &mut rng()).unwrap();
        let maps = bb.forward(&Tensor::zeros(&[1, 3, 96, 50])).unwrap();
        let sizes: Vec<(usize, usize)> = maps.iter().map(|m| (m.shape()[2], m.shape()[3])).collect();
        assert_eq!(sizes, vec![(48, 25), (24, 13), (12, 7)]);
    }

    #[test]
    fn too_small_input_is_rejected_with_minimum() {
        let bb = Backbone::new(BackboneConfig::tiny(BackboneKind::TinyPlain), 3, &mut rng()).unwrap();
        let err = bb.forward(&Tensor::zeros(&[1, 3, 4, 4])).unwrap_err();
        assert!(err.to_string().contains("minimum is 8x8"), "{err}");
    }

    #[test]
    fn residual_stage_is_main_plus_skip() {
        let cfg = BackboneConfig {
            kind: BackboneKind::TinyResidual,
            stage_channels: vec![4, 4, 4],
            stage_strides: vec![2, 2, 2],
        };
        let bb = Backbone::new(cfg, 3, &mut rng()).unwrap();
        let image = Tensor::full(&[1, 3, 8, 8], 0.5);
        let out = bb.forward(&image).unwrap();

        // Recompose stage 0 by hand from its named parameters.
        let mut params = Vec::new();
        bb.named_parameters(&mut params);
        let find = |name: &str| {
            params.iter().find(|(n, _)| n == name).map(|(_, t)| t.clone()).unwrap()
        };
        let conv1 = ConvParams::new(
            find("backbone.stage0.conv1.weight"),
            find("backbone.stage0.conv1.bias"),
            2,
            1,
        )
        .unwrap();
        let conv2 = ConvParams::new(
            find("backbone.stage0.conv2.weight"),
            find("backbone.stage0.conv2.bias"),
            1,
            1,
        )
        .unwrap();
        let skip = ConvParams::new(
            find("backbone.stage0.skip.weight"),
            find("backbone.stage0.skip.bias"),
            2,
            0,
        )
        .unwrap();
        let main = conv2d(&relu(&conv2d(&image, &conv1).unwrap()), &conv2).unwrap();
        let shortcut = conv2d(&image, &skip).unwrap();
        let expected = relu(&add(&main, &shortcut).unwrap());

        // out[0] is stage 0's output.
        assert_eq!(out[0].to_vec(), expected.to_vec());
    }

    #[test]
    fn depthwise_has_fewer_parameters_than_plain() {
        let plain = BackboneConfig::tiny(BackboneKind::TinyPlain);
        let dw = BackboneConfig::tiny(BackboneKind::TinyDepthwise);
        assert!(dw.parameter_count(3) < plain.parameter_count(3));
    }

    #[test]
    fn closed_form_count_matches_actual_tensors() {
        for kind in [BackboneKind::TinyPlain, BackboneKind::TinyResidual, BackboneKind::TinyDepthwise] {
            let cfg = BackboneConfig::tiny(kind);
            let bb = Backbone::new(cfg.clone(), 3, &mut rng()).unwrap();
            let mut params = Vec::new();
            bb.named_parameters(&mut params);
            let actual: usize = params.iter().map(|(_, t)| t.len()).sum();
            assert_eq!(actual, cfg.parameter_count(3), "{}", kind.name());
        }
    }

    #[test]
    fn config_validation_catches_bad_layouts() {
        let mut cfg = BackboneConfig::tiny(BackboneKind::TinyPlain);
        cfg.stage_channels = vec![16, 32];
        cfg.stage_strides = vec![2, 2];
        assert!(cfg.validate().is_err());
        let mut cfg = BackboneConfig::tiny(BackboneKind::TinyPlain);
        cfg.stage_strides = vec![2, 2, 1];
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn kind_names_round_trip() {
        for kind in [BackboneKind::TinyPlain, BackboneKind::TinyResidual, BackboneKind::TinyDepthwise] {
            assert_eq!(BackboneKind::parse(kind.name()).unwrap(), kind);
        }
        assert!(BackboneKind::parse("resnet-152").is_err());
    }
}
