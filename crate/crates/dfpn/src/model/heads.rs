//! Classification and box-regression subnets, shared across all pyramid
//! levels.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{conv2d, relu, ConvParams, Tensor};

/// Classification prior: the final class conv's bias is set so every
/// anchor starts at roughly this foreground probability, keeping the sea
/// of background anchors from swamping the first gradient steps.
pub const PRIOR_PROBABILITY: f64 = 0.01;

#[derive(Debug, Clone, PartialEq)]
pub struct HeadConfig {
    /// Anchors per location (A).
    pub anchors_per_location: usize,
    /// Object classes (K); background is implicit, not a channel.
    pub num_classes: usize,
    /// Pyramid channel width the towers operate on.
    pub c_pyr: usize,
    /// Number of 3×3 conv + relu layers in each tower.
    pub depth: usize,
}

impl HeadConfig {
    pub fn validate(&self) -> Result<()> {
        if self.anchors_per_location == 0
            || self.num_classes == 0
            || self.c_pyr == 0
            || self.depth == 0
        {
            return Err(Error::Config(format!(
                "head config fields must be positive: A={}, K={}, C_pyr={}, depth={}",
                self.anchors_per_location, self.num_classes, self.c_pyr, self.depth
            )));
        }
        Ok(())
    }

    pub fn cls_channels(&self) -> usize {
        self.anchors_per_location * self.num_classes
    }

    pub fn box_channels(&self) -> usize {
        4 * self.anchors_per_location
    }

    /// Closed-form parameter count: two towers of `depth` 3×3 convs at
    /// C_pyr width plus the two output convs. Independent of how many
    /// pyramid levels the heads are applied to.
    pub fn parameter_count(&self) -> usize {
        let c = self.c_pyr;
        let tower = self.depth * (9 * c * c + c);
        let cls_out = 9 * c * self.cls_channels() + self.cls_channels();
        let box_out = 9 * c * self.box_channels() + self.box_channels();
        2 * tower + cls_out + box_out
    }
}

/// One weight set applied to every level. The two towers are structurally
/// identical; only the output convs differ (A·K vs 4·A channels), and
/// only the classification output carries the prior bias.
pub struct Heads {
    pub config: HeadConfig,
    cls_tower: Vec<ConvParams>,
    cls_out: ConvParams,
    box_tower: Vec<ConvParams>,
    box_out: ConvParams,
}

fn tower(c_pyr: usize, depth: usize, rng: &mut impl Rng) -> Result<Vec<ConvParams>> {
    (0..depth)
        .map(|_| {
            let w = Tensor::he_uniform(&[c_pyr, c_pyr, 3, 3], 9 * c_pyr, rng);
            ConvParams::new(w, Tensor::zeros(&[c_pyr]).with_grad(), 1, 1)
        })
        .collect()
}

impl Heads {
    pub fn new(config: HeadConfig, rng: &mut impl Rng) -> Result<Heads> {
        config.validate()?;
        let c = config.c_pyr;
        let cls_tower = tower(c, config.depth, rng)?;
        let cls_w = Tensor::he_uniform(&[config.cls_channels(), c, 3, 3], 9 * c, rng);
        let prior_bias = -((1.0 - PRIOR_PROBABILITY) / PRIOR_PROBABILITY).ln();
        let cls_out = ConvParams::new(
            cls_w,
            Tensor::full(&[config.cls_channels()], prior_bias).with_grad(),
            1,
            1,
        )?;
        let box_tower = tower(c, config.depth, rng)?;
        let box_w = Tensor::he_uniform(&[config.box_channels(), c, 3, 3], 9 * c, rng);
        let box_out =
            ConvParams::new(box_w, Tensor::zeros(&[config.box_channels()]).with_grad(), 1, 1)?;
        Ok(Heads { config, cls_tower, cls_out, box_tower, box_out })
    }

    /// Apply both towers to one pyramid level. Returns
    /// (class logits 1×A·K×H×W, box deltas 1×4A×H×W); the sigmoid is the
    /// loss/inference side's job.
    pub fn forward(&self, feature: &Tensor) -> Result<(Tensor, Tensor)> {
        let mut c = feature.clone();
        for conv in &self.cls_tower {
            c = relu(&conv2d(&c, conv)?);
        }
        let cls = conv2d(&c, &self.cls_out)?;
        let mut b = feature.clone();
        for conv in &self.box_tower {
            b = relu(&conv2d(&b, conv)?);
        }
        let boxes = conv2d(&b, &self.box_out)?;
        Ok((cls, boxes))
    }

    pub fn named_parameters(&self, out: &mut Vec<(String, Tensor)>) {
        let mut push = |name: String, p: &ConvParams| {
            out.push((format!("{name}.weight"), p.weights.clone()));
            out.push((format!("{name}.bias"), p.bias.clone()));
        };
        for (i, p) in self.cls_tower.iter().enumerate() {
            push(format!("head.cls.tower{i}"), p);
        }
        push("head.cls.out".to_string(), &self.cls_out);
        for (i, p) in self.box_tower.iter().enumerate() {
            push(format!("head.box.tower{i}"), p);
        }
        push("head.box.out".to_string(), &self.box_out);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn heads(depth: usize) -> Heads {
        let cfg = HeadConfig { anchors_per_location: 9, num_classes: 3, c_pyr: 16, depth };
        Heads::new(cfg, &mut ChaCha8Rng::seed_from_u64(5)).unwrap()
    }

    #[test]
    fn output_depths_follow_a_and_k() {
        let h = heads(4);
        let (cls, boxes) = h.forward(&Tensor::full(&[1, 16, 4, 4], 0.3)).unwrap();
        assert_eq!(cls.shape(), &[1, 27, 4, 4]);
        assert_eq!(boxes.shape(), &[1, 36, 4, 4]);
    }

    #[test]
    fn fresh_heads_score_near_prior() {
        // With zero tower biases and the prior on the final bias, a zero
        // feature map must produce logits exactly at the prior.
        let h = heads(4);
        let (cls, _) = h.forward(&Tensor::zeros(&[1, 16, 2, 2])).unwrap();
        let expected = -((1.0 - PRIOR_PROBABILITY) / PRIOR_PROBABILITY).ln();
        for v in cls.to_vec() {
            assert!((v - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn shared_weights_give_identical_interior_responses() {
        // Constant input: any cell whose full receptive field stays inside
        // the map sees the same context regardless of map size. depth 1
        // gives a 5×5 receptive field, so centers of 7×7 and 9×9 qualify.
        let h = heads(1);
        let (cls7, _) = h.forward(&Tensor::full(&[1, 16, 7, 7], 0.25)).unwrap();
        let (cls9, _) = h.forward(&Tensor::full(&[1, 16, 9, 9], 0.25)).unwrap();
        let at = |t: &Tensor, size: usize, ch: usize, y: usize, x: usize| {
            t.to_vec()[(ch * size + y) * size + x]
        };
        for ch in 0..27 {
            let a = at(&cls7, 7, ch, 3, 3);
            let b = at(&cls9, 9, ch, 4, 4);
            assert!((a - b).abs() < 1e-12, "channel {ch}: {a} vs {b}");
        }
    }

    #[test]
    fn parameter_count_matches_closed_form() {
        let h = heads(4);
        let mut params = Vec::new();
        h.named_parameters(&mut params);
        let actual: usize = params.iter().map(|(_, t)| t.len()).sum();
        assert_eq!(actual, h.config.parameter_count());
    }

    #[test]
    fn rejects_zero_sized_config() {
        let cfg = HeadConfig { anchors_per_location: 9, num_classes: 0, c_pyr: 16, depth: 4 };
        assert!(Heads::new(cfg, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }
}
