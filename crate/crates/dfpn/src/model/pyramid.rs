//! The deep pyramid: lateral projections, stride-2 extension below the
//! backbone until the map is 1×1, and the top-down merge pass.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{add, conv2d, relu, upsample_nearest_2x, ConvParams, Tensor};

/// One pyramid level. `index` is log2 of the nominal stride, so P3 is the
/// stride-8 level; `feature` always carries the pyramid channel width.
pub struct PyramidLevel {
    pub index: u32,
    pub stride: usize,
    pub feature: Tensor,
}

/// Learnable pieces of the pyramid. Laterals and the smoothing convs for
/// backbone levels are per-stage; the extension conv and the smoothing
/// conv for levels below the backbone are shared across depths, which
/// keeps the parameter set independent of input size (an image twice as
/// large simply applies the shared convs one more time).
pub struct PyramidWeights {
    laterals: Vec<ConvParams>,
    stage_smooth: Vec<ConvParams>,
    extend: ConvParams,
    deep_smooth: ConvParams,
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

impl PyramidWeights {
    pub fn new(stage_channels: &[usize], c_pyr: usize, rng: &mut impl Rng) -> Result<PyramidWeights> {
        if c_pyr == 0 {
            return Err(Error::Config("pyramid channel width must be positive".into()));
        }
        let mut laterals = Vec::with_capacity(stage_channels.len());
        let mut stage_smooth = Vec::with_capacity(stage_channels.len());
        for &c in stage_channels {
            laterals.push(conv_init(c_pyr, c, 1, 1, 0, rng)?);
        }
        for _ in stage_channels {
            stage_smooth.push(conv_init(c_pyr, c_pyr, 3, 1, 1, rng)?);
        }
        Ok(PyramidWeights {
            laterals,
            stage_smooth,
            extend: conv_init(c_pyr, c_pyr, 3, 2, 1, rng)?,
            deep_smooth: conv_init(c_pyr, c_pyr, 3, 1, 1, rng)?,
        })
    }

    /// Build pyramid levels from backbone stage maps (finest first, each
    /// coarser map exactly ceil-half the previous). Levels finer than
    /// `min_stride` are skipped — they never influence coarser levels, so
    /// the values of the produced levels are unchanged.
    ///
    /// Returned levels are ordered finest → coarsest; the last level is
    /// always 1×1.
    pub fn forward(
        &self,
        stage_maps: &[Tensor],
        first_stage_stride: usize,
        min_stride: usize,
    ) -> Result<Vec<PyramidLevel>> {
        if stage_maps.len() != self.laterals.len() {
            return Err(Error::Shape(format!(
                "{} stage maps for {} lateral connections",
                stage_maps.len(),
                self.laterals.len()
            )));
        }
        for pair in stage_maps.windows(2) {
            let (a, b) = (pair[0].shape(), pair[1].shape());
            if b[2] != a[2].div_ceil(2) || b[3] != a[3].div_ceil(2) {
                return Err(Error::Shape(format!(
                    "stage maps must halve: {}x{} followed by {}x{}",
                    a[2], a[3], b[2], b[3]
                )));
            }
        }

        // Bottom-up: lateral projections for the backbone stages (skipping
        // ones finer than min_stride), then shared stride-2 extensions on
        // the coarsest projection until 1×1.
        let mut strides = Vec::new();
        let mut maps: Vec<Option<Tensor>> = Vec::new();
        let mut smooths: Vec<&ConvParams> = Vec::new();
        let mut stride = first_stage_stride;
        for (i, map) in stage_maps.iter().enumerate() {
            let is_coarsest = i + 1 == stage_maps.len();
            if stride >= min_stride || is_coarsest {
                maps.push(Some(conv2d(map, &self.laterals[i])?));
            } else {
                maps.push(None);
            }
            strides.push(stride);
            smooths.push(&self.stage_smooth[i]);
            stride *= 2;
        }
        let mut deep = maps.last().unwrap().clone().unwrap();
        let mut first_extension = true;
        while deep.shape()[2] > 1 || deep.shape()[3] > 1 {
            let input = if first_extension { deep.clone() } else { relu(&deep) };
            deep = conv2d(&input, &self.extend)?;
            first_extension = false;
            maps.push(Some(deep.clone()));
            strides.push(stride);
            smooths.push(&self.deep_smooth);
            stride *= 2;
        }

        // Top-down: start from the 1×1 map, upsample, merge, smooth.
        let mut levels: Vec<PyramidLevel> = Vec::new();
        let mut above: Option<Tensor> = None;
        for i in (0..maps.len()).rev() {
            if strides[i] < min_stride {
                break;
            }
            let own = maps[i].clone().expect("maps at or above min_stride are computed");
            let merged = match &above {
                None => own,
                Some(coarser) => add(&own, &upsample_nearest_2x(coarser)?)?,
            };
            let smoothed = conv2d(&merged, smooths[i])?;
            above = Some(merged);
            levels.push(PyramidLevel {
                index: strides[i].trailing_zeros(),
                stride: strides[i],
                feature: smoothed,
            });
        }
        levels.reverse();
        Ok(levels)
    }

    pub fn named_parameters(&self, out: &mut Vec<(String, Tensor)>) {
        let mut push = |name: String, p: &ConvParams| {
            out.push((format!("{name}.weight"), p.weights.clone()));
            out.push((format!("{name}.bias"), p.bias.clone()));
        };
        for (i, p) in self.laterals.iter().enumerate() {
            push(format!("pyramid.lateral{i}"), p);
        }
        for (i, p) in self.stage_smooth.iter().enumerate() {
            push(format!("pyramid.smooth{i}"), p);
        }
        push("pyramid.extend".to_string(), &self.extend);
        push("pyramid.smooth_deep".to_string(), &self.deep_smooth);
    }
}
