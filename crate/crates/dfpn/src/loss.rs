//! Training losses: the modified focal classification loss (cross
//! entropy scaled by α² and (1−p)^γ) and smooth-L1 box regression.
//!
//! Both losses are fused graph nodes: the forward pass walks the head
//! output tensors once, and the backward pass writes analytic gradients
//! straight into the logits/deltas. Composing them from elementwise ops
//! would build thousands of tiny nodes per image for no benefit.

use crate::anchors::{AnchorLabel, AssignmentResult};
use crate::error::{Error, Result};
use crate::geometry::BoxDelta;
use crate::model::{DetectorOutput, LevelOutput};
use crate::tensor::{add, scale, Tensor};

/// Probabilities are clamped to [ε, 1−ε] before any logarithm.
const PROB_EPS: f64 = 1e-12;

/// Focal loss knobs. α is squared where it is applied, so the effective
/// foreground weight at the default is 0.0625.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FocalParams {
    pub alpha: f64,
    pub gamma: f64,
}

impl Default for FocalParams {
    fn default() -> FocalParams {
        FocalParams { alpha: 0.25, gamma: 2.0 }
    }
}

impl FocalParams {
    pub fn new(alpha: f64, gamma: f64) -> Result<FocalParams> {
        let p = FocalParams { alpha, gamma };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(Error::Config(format!("alpha must be in (0, 1], got {}", self.alpha)));
        }
        if !(self.gamma >= 0.0) {
            return Err(Error::Config(format!("gamma must be non-negative, got {}", self.gamma)));
        }
        Ok(())
    }
}

fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_EPS, 1.0 - PROB_EPS)
}

/// Reference focal loss for a single true-class probability:
/// α²·(1−p)^γ·(−ln p). With γ=0, α=1 this is plain cross entropy.
pub fn focal_loss(p: f64, params: &FocalParams) -> f64 {
    let p = clamp_prob(p);
    params.alpha * params.alpha * (1.0 - p).powf(params.gamma) * (-p.ln())
}

/// Per-logit focal term and its derivative w.r.t. the logit.
/// `positive` selects the true-class form (penalizes low p); otherwise
/// the negative form penalizes high p. Derivation multiplies dL/dp by
/// the sigmoid derivative p(1−p), leaving only non-negative powers:
///
/// positive: L = −α²(1−p)^γ ln p,      dL/dz = α²[γp(1−p)^γ ln p − (1−p)^(γ+1)]
/// negative: L = −α²p^γ ln(1−p),       dL/dz = α²[p^(γ+1) − γp^γ(1−p) ln(1−p)]
fn focal_term(z: f64, positive: bool, alpha2: f64, gamma: f64) -> (f64, f64) {
    let p = clamp_prob(crate::tensor::sigmoid_scalar(z));
    let q = 1.0 - p;
    if positive {
        let loss = alpha2 * q.powf(gamma) * (-p.ln());
        let grad = alpha2 * (gamma * p * q.powf(gamma) * p.ln() - q.powf(gamma + 1.0));
        (loss, grad)
    } else {
        let loss = alpha2 * p.powf(gamma) * (-q.ln());
        let grad = alpha2 * (p.powf(gamma + 1.0) - gamma * p.powf(gamma) * q * q.ln());
        (loss, grad)
    }
}

/// Smooth-L1 (Huber, transition at 1): 0.5e² for |e| ≤ 1, |e| − 0.5
/// beyond. Returns (loss, dloss/de).
fn smooth_l1(e: f64) -> (f64, f64) {
    if e.abs() <= 1.0 {
        (0.5 * e * e, e)
    } else {
        (e.abs() - 0.5, e.signum())
    }
}

/// Walk one level's classification logits against its slice of anchor
/// labels, producing (summed loss, per-logit gradients). Positive anchors
/// contribute the true-class term for their class and negative-form terms
/// for the rest; background anchors contribute negative-form terms for
/// every class; ignored anchors contribute nothing.
fn cls_level_pass(
    logits: &[f64],
    labels: &[AnchorLabel],
    a: usize,
    k: usize,
    h: usize,
    w: usize,
    alpha2: f64,
    gamma: f64,
    grad: Option<&mut [f64]>,
) -> f64 {
    let mut total = 0.0;
    let mut grad = grad;
    for i in 0..h {
        for j in 0..w {
            let cell = i * w + j;
            for ai in 0..a {
                let label = labels[cell * a + ai];
                let positive_class = match label {
                    AnchorLabel::Positive { class, .. } => Some(class),
                    AnchorLabel::Background => None,
                    AnchorLabel::Ignore => continue,
                };
                for ki in 0..k {
                    let flat = ((ai * k + ki) * h + i) * w + j;
                    let (loss, g) =
                        focal_term(logits[flat], positive_class == Some(ki), alpha2, gamma);
                    total += loss;
                    if let Some(buf) = grad.as_deref_mut() {
                        buf[flat] += g;
                    }
                }
            }
        }
    }
    total
}

struct FocalClsNode {
    logits: Tensor,
    labels: Vec<AnchorLabel>,
    a: usize,
    k: usize,
    h: usize,
    w: usize,
    alpha2: f64,
    gamma: f64,
    normalizer: f64,
}

impl crate::tensor::GraphNode for FocalClsNode {
    fn parents(&self) -> Vec<Tensor> {
        vec![self.logits.clone()]
    }

    fn backward(&self, _out: &[f64], grad_out: &[f64]) {
        let mut dz = vec![0.0; self.logits.len()];
        let logits = self.logits.values();
        cls_level_pass(
            &logits,
            &self.labels,
            self.a,
            self.k,
            self.h,
            self.w,
            self.alpha2,
            self.gamma,
            Some(&mut dz),
        );
        drop(logits);
        let s = grad_out[0] / self.normalizer;
        for v in &mut dz {
            *v *= s;
        }
        self.logits.accumulate_grad(&dz);
    }
}

/// Focal classification loss over all head levels, normalized by the
/// positive-anchor count (floor 1). `assignment` must cover the levels'
/// anchors in order.
pub fn classification_loss(
    levels: &[LevelOutput],
    assignment: &AssignmentResult,
    anchors_per_location: usize,
    num_classes: usize,
    params: &FocalParams,
) -> Result<Tensor> {
    params.validate()?;
    check_assignment_len(levels, assignment, anchors_per_location)?;
    let alpha2 = params.alpha * params.alpha;
    let normalizer = assignment.positive_count().max(1) as f64;

    let mut total: Option<Tensor> = None;
    let mut offset = 0;
    for level in levels {
        let (a, k, h, w) = (anchors_per_location, num_classes, level.height, level.width);
        let count = h * w * a;
        let labels = assignment.labels[offset..offset + count].to_vec();
        offset += count;
        let value = {
            let logits = level.cls_logits.values();
            cls_level_pass(&logits, &labels, a, k, h, w, alpha2, params.gamma, None) / normalizer
        };
        let scalar = if level.cls_logits.requires_grad() {
            Tensor::from_op(
                vec![1],
                vec![value],
                Box::new(FocalClsNode {
                    logits: level.cls_logits.clone(),
                    labels,
                    a,
                    k,
                    h,
                    w,
                    alpha2,
                    gamma: params.gamma,
                    normalizer,
                }),
            )
        } else {
            Tensor::from_value(vec![1], vec![value])
        };
        total = Some(match total {
            None => scalar,
            Some(t) => add(&t, &scalar)?,
        });
    }
    total.ok_or_else(|| Error::Config("classification loss needs at least one level".into()))
}

/// One level's positive-anchor regression targets: (anchor index within
/// the level, encoded delta).
type LevelTargets = Vec<(usize, BoxDelta)>;

fn reg_level_pass(
    deltas: &[f64],
    targets: &[(usize, BoxDelta)],
    a: usize,
    h: usize,
    w: usize,
    grad: Option<&mut [f64]>,
) -> f64 {
    let mut total = 0.0;
    let mut grad = grad;
    for &(anchor_idx, target) in targets {
        let cell = anchor_idx / a;
        let ai = anchor_idx % a;
        let (i, j) = (cell / w, cell % w);
        let t = [target.tx, target.ty, target.tw, target.th];
        for (d, &td) in t.iter().enumerate() {
            let flat = ((ai * 4 + d) * h + i) * w + j;
            let (loss, g) = smooth_l1(deltas[flat] - td);
            total += loss;
            if let Some(buf) = grad.as_deref_mut() {
                buf[flat] += g;
            }
        }
    }
    total
}

struct SmoothL1Node {
    deltas: Tensor,
    targets: LevelTargets,
    a: usize,
    h: usize,
    w: usize,
    normalizer: f64,
}

impl crate::tensor::GraphNode for SmoothL1Node {
    fn parents(&self) -> Vec<Tensor> {
        vec![self.deltas.clone()]
    }

    fn backward(&self, _out: &[f64], grad_out: &[f64]) {
        let mut dd = vec![0.0; self.deltas.len()];
        let deltas = self.deltas.values();
        reg_level_pass(&deltas, &self.targets, self.a, self.h, self.w, Some(&mut dd));
        drop(deltas);
        let s = grad_out[0] / self.normalizer;
        for v in &mut dd {
            *v *= s;
        }
        self.deltas.accumulate_grad(&dd);
    }
}

/// Smooth-L1 loss between predicted and target deltas over the positive
/// anchors, summed across the 4 components and normalized by the
/// positive count (floor 1). Background and ignored anchors carry no
/// regression signal at all.
pub fn regression_loss(
    levels: &[LevelOutput],
    assignment: &AssignmentResult,
    anchors_per_location: usize,
) -> Result<Tensor> {
    check_assignment_len(levels, assignment, anchors_per_location)?;
    let normalizer = assignment.positive_count().max(1) as f64;

    let mut total: Option<Tensor> = None;
    let mut offset = 0;
    for level in levels {
        let (a, h, w) = (anchors_per_location, level.height, level.width);
        let count = h * w * a;
        let targets: LevelTargets = (0..count)
            .filter_map(|idx| assignment.deltas[offset + idx].map(|d| (idx, d)))
            .collect();
        offset += count;
        let value = {
            let deltas = level.box_deltas.values();
            reg_level_pass(&deltas, &targets, a, h, w, None) / normalizer
        };
        let scalar = if level.box_deltas.requires_grad() {
            Tensor::from_op(
                vec![1],
                vec![value],
                Box::new(SmoothL1Node {
                    deltas: level.box_deltas.clone(),
                    targets,
                    a,
                    h,
                    w,
                    normalizer,
                }),
            )
        } else {
            Tensor::from_value(vec![1], vec![value])
        };
        total = Some(match total {
            None => scalar,
            Some(t) => add(&t, &scalar)?,
        });
    }
    total.ok_or_else(|| Error::Config("regression loss needs at least one level".into()))
}

fn check_assignment_len(
    levels: &[LevelOutput],
    assignment: &AssignmentResult,
    anchors_per_location: usize,
) -> Result<()> {
    let expected: usize = levels.iter().map(|l| l.height * l.width * anchors_per_location).sum();
    if expected == 0 {
        return Err(Error::Config("loss requires at least one anchor".into()));
    }
    if assignment.labels.len() != expected || assignment.deltas.len() != expected {
        return Err(Error::Shape(format!(
            "assignment covers {} anchors but the head outputs have {expected}",
            assignment.labels.len()
        )));
    }
    Ok(())
}

/// Weighted sum of the two losses. Both inputs must be finite scalars;
/// a non-finite loss means training has diverged and must abort.
pub fn total_loss(class_loss: &Tensor, reg_loss: &Tensor, reg_weight: f64) -> Result<Tensor> {
    for (name, t) in [("classification", class_loss), ("regression", reg_loss)] {
        if t.len() != 1 {
            return Err(Error::Shape(format!("{name} loss must be scalar, got {:?}", t.shape())));
        }
        if !t.item().is_finite() {
            return Err(Error::NonFinite(format!("{name} loss is {}", t.item())));
        }
    }
    add(class_loss, &scale(reg_loss, reg_weight))
}

/// Everything the training loop logs per iteration.
pub struct LossBreakdown {
    pub class_loss: Tensor,
    pub reg_loss: Tensor,
    pub total: Tensor,
    pub positive_count: usize,
}

/// Assemble both losses and their weighted total for one forward pass.
pub fn detection_loss(
    output: &DetectorOutput,
    assignment: &AssignmentResult,
    anchors_per_location: usize,
    num_classes: usize,
    params: &FocalParams,
    reg_weight: f64,
) -> Result<LossBreakdown> {
    let class_loss =
        classification_loss(&output.levels, assignment, anchors_per_location, num_classes, params)?;
    let reg_loss = regression_loss(&output.levels, assignment, anchors_per_location)?;
    let total = total_loss(&class_loss, &reg_loss, reg_weight)?;
    Ok(LossBreakdown {
        class_loss,
        reg_loss,
        total,
        positive_count: assignment.positive_count(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{gradcheck, sum};

    fn level(cls: Tensor, boxes: Tensor) -> LevelOutput {
        let s = cls.shape().to_vec();
        LevelOutput { stride: 8, height: s[2], width: s[3], cls_logits: cls, box_deltas: boxes }
    }

    fn assignment(labels: Vec<AnchorLabel>, deltas: Vec<Option<BoxDelta>>) -> AssignmentResult {
        AssignmentResult { labels, deltas }
    }

    #[test]
    fn focal_point_value_matches_formula() {
        let p = FocalParams::default();
        let expected = 0.25 * 0.25 * 0.25 * 2f64.ln();
        assert!((focal_loss(0.5, &p) - expected).abs() < 1e-9);
    }

    #[test]
    fn gamma_zero_alpha_one_is_cross_entropy() {
        let p = FocalParams::new(1.0, 0.0).unwrap();
        for i in 1..100 {
            let prob = i as f64 / 100.0;
            assert!((focal_loss(prob, &p) - (-prob.ln())).abs() < 1e-12, "p={prob}");
        }
    }

    #[test]
    fn loss_vanishes_as_p_approaches_one() {
        let p = FocalParams::default();
        assert!(focal_loss(1.0 - 1e-9, &p) < 1e-18);
        assert!(focal_loss(0.999, &p) < focal_loss(0.9, &p));
    }

    #[test]
    fn focal_never_exceeds_alpha2_cross_entropy() {
        let p = FocalParams::default();
        for i in 1..100 {
            let prob = i as f64 / 100.0;
            let ce = 0.25 * 0.25 * (-prob.ln());
            assert!(focal_loss(prob, &p) <= ce + 1e-15);
        }
    }

    #[test]
    fn params_validation() {
        assert!(FocalParams::new(0.0, 2.0).is_err());
        assert!(FocalParams::new(1.5, 2.0).is_err());
        assert!(FocalParams::new(0.25, -0.1).is_err());
        assert!(FocalParams::new(1.0, 0.0).is_ok());
    }

    #[test]
    fn hand_sum_one_positive_two_background() {
        // K=1, A=1, three cells, all logits 0 (p = 0.5): the positive term
        // and the negative-form term coincide at p = 0.5, so the total is
        // 3 focal units over a normalizer of 1.
        let cls = Tensor::zeros(&[1, 1, 1, 3]);
        let boxes = Tensor::zeros(&[1, 4, 1, 3]);
        let labels = vec![
            AnchorLabel::Positive { class: 0, gt_index: 0 },
            AnchorLabel::Background,
            AnchorLabel::Background,
        ];
        let deltas = vec![Some(BoxDelta::ZERO), None, None];
        let lv = vec![level(cls, boxes)];
        let loss =
            classification_loss(&lv, &assignment(labels, deltas), 1, 1, &FocalParams::default())
                .unwrap();
        let unit = 0.25 * 0.25 * 0.25 * 2f64.ln();
        assert!((loss.item() - 3.0 * unit).abs() < 1e-12, "{}", loss.item());
    }

    #[test]
    fn confident_positive_drives_loss_to_zero() {
        let cls = Tensor::from_vec(&[1, 1, 1, 1], vec![40.0]);
        let boxes = Tensor::zeros(&[1, 4, 1, 1]);
        let labels = vec![AnchorLabel::Positive { class: 0, gt_index: 0 }];
        let lv = vec![level(cls, boxes)];
        let loss = classification_loss(
            &lv,
            &assignment(labels, vec![Some(BoxDelta::ZERO)]),
            1,
            1,
            &FocalParams::default(),
        )
        .unwrap();
        assert!(loss.item() < 1e-10);
    }

    #[test]
    fn all_ignore_gives_zero_loss() {
        let cls = Tensor::from_vec(&[1, 2, 1, 2], vec![3.0, -1.0, 0.5, 2.0]);
        let boxes = Tensor::zeros(&[1, 4, 1, 2]);
        let labels = vec![AnchorLabel::Ignore, AnchorLabel::Ignore];
        let lv = vec![level(cls, boxes)];
        let loss = classification_loss(
            &lv,
            &assignment(labels, vec![None, None]),
            1,
            2,
            &FocalParams::default(),
        )
        .unwrap();
        assert_eq!(loss.item(), 0.0);
    }

    #[test]
    fn background_contribution_scales_linearly() {
        let make = |n_bg: usize| {
            let cls = Tensor::full(&[1, 1, 1, n_bg], 0.7);
            let boxes = Tensor::zeros(&[1, 4, 1, n_bg]);
            let labels = vec![AnchorLabel::Background; n_bg];
            let deltas = vec![None; n_bg];
            let lv = vec![level(cls, boxes)];
            classification_loss(&lv, &assignment(labels, deltas), 1, 1, &FocalParams::default())
                .unwrap()
                .item()
        };
        let two = make(2);
        let four = make(4);
        assert!((four - 2.0 * two).abs() < 1e-12);
    }

    #[test]
    fn classification_gradient_matches_finite_differences() {
        // Logits spanning p ≈ 0.02 … 0.98 across positive and background
        // anchors, two classes.
        let zs: Vec<f64> = vec![-4.0, -2.0, -0.5, 0.0, 0.5, 2.0, 4.0, -3.0];
        let cls = Tensor::from_vec(&[1, 2, 2, 2], zs).with_grad();
        let labels = vec![
            AnchorLabel::Positive { class: 0, gt_index: 0 },
            AnchorLabel::Background,
            AnchorLabel::Positive { class: 1, gt_index: 1 },
            AnchorLabel::Ignore,
        ];
        let deltas = vec![Some(BoxDelta::ZERO), None, Some(BoxDelta::ZERO), None];
        let leaves = [cls.clone()];
        let report = gradcheck(
            || {
                let lv = vec![level(cls.clone(), Tensor::zeros(&[1, 4, 2, 2]))];
                classification_loss(
                    &lv,
                    &assignment(labels.clone(), deltas.clone()),
                    1,
                    2,
                    &FocalParams::default(),
                )
            },
            &leaves,
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-6, "max rel err {}", report.max_rel_err);
    }

    #[test]
    fn regression_hand_values() {
        // Single positive anchor; prediction off by 0.5 in every component
        // → 4 · 0.5·0.25 = 0.5. Off by 2.0 → 4 · 1.5 = 6.
        let labels = vec![AnchorLabel::Positive { class: 0, gt_index: 0 }];
        let target = vec![Some(BoxDelta::ZERO)];
        for (err, expected) in [(0.5, 0.5), (2.0, 6.0)] {
            let boxes = Tensor::full(&[1, 4, 1, 1], err);
            let lv = vec![level(Tensor::zeros(&[1, 1, 1, 1]), boxes)];
            let loss =
                regression_loss(&lv, &assignment(labels.clone(), target.clone()), 1).unwrap();
            assert!((loss.item() - expected).abs() < 1e-12, "err {err}");
        }
    }

    #[test]
    fn perfect_regression_is_zero() {
        let d = BoxDelta::new(0.25, -0.5, 0.1, -0.2);
        let boxes = Tensor::from_vec(&[1, 4, 1, 1], vec![0.25, -0.5, 0.1, -0.2]);
        let labels = vec![AnchorLabel::Positive { class: 0, gt_index: 0 }];
        let lv = vec![level(Tensor::zeros(&[1, 1, 1, 1]), boxes)];
        let loss = regression_loss(&lv, &assignment(labels, vec![Some(d)]), 1).unwrap();
        assert_eq!(loss.item(), 0.0);
    }

    #[test]
    fn regression_gradient_matches_finite_differences() {
        let vals: Vec<f64> = vec![0.3, -1.7, 0.9, 2.4, -0.2, 0.0, 1.1, -3.0];
        let boxes = Tensor::from_vec(&[1, 4, 1, 2], vals).with_grad();
        let labels = vec![
            AnchorLabel::Positive { class: 0, gt_index: 0 },
            AnchorLabel::Positive { class: 0, gt_index: 1 },
        ];
        let targets = vec![
            Some(BoxDelta::new(0.1, 0.2, -0.3, 0.4)),
            Some(BoxDelta::new(-0.4, 0.8, 0.0, 0.5)),
        ];
        let leaves = [boxes.clone()];
        let report = gradcheck(
            || {
                let lv = vec![level(Tensor::zeros(&[1, 1, 1, 2]), boxes.clone())];
                regression_loss(&lv, &assignment(labels.clone(), targets.clone()), 1)
            },
            &leaves,
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-6, "max rel err {}", report.max_rel_err);
    }

    #[test]
    fn total_loss_combines_and_validates() {
        let c = Tensor::scalar(0.5);
        let r = Tensor::scalar(0.25);
        assert_eq!(total_loss(&c, &r, 1.0).unwrap().item(), 0.75);
        assert_eq!(total_loss(&c, &r, 2.0).unwrap().item(), 1.0);
        assert_eq!(
            total_loss(&Tensor::scalar(0.0), &Tensor::scalar(0.0), 1.0).unwrap().item(),
            0.0
        );
        let bad = Tensor::scalar(f64::NAN);
        assert!(total_loss(&bad, &r, 1.0).is_err());
    }

    #[test]
    fn assignment_length_mismatch_is_rejected() {
        let lv = vec![level(Tensor::zeros(&[1, 1, 2, 2]), Tensor::zeros(&[1, 4, 2, 2]))];
        let short = assignment(vec![AnchorLabel::Background; 2], vec![None; 2]);
        assert!(classification_loss(&lv, &short, 1, 1, &FocalParams::default()).is_err());
        assert!(regression_loss(&lv, &short, 1).is_err());
    }

    #[test]
    fn backward_reaches_logits_through_loss() {
        let cls = Tensor::from_vec(&[1, 1, 1, 2], vec![0.3, -0.7]).with_grad();
        let boxes = Tensor::from_vec(&[1, 4, 1, 2], vec![0.1; 8]).with_grad();
        let labels = vec![AnchorLabel::Positive { class: 0, gt_index: 0 }, AnchorLabel::Background];
        let deltas = vec![Some(BoxDelta::ZERO), None];
        let lv = vec![level(cls.clone(), boxes.clone())];
        let asn = assignment(labels, deltas);
        let c = classification_loss(&lv, &asn, 1, 1, &FocalParams::default()).unwrap();
        let r = regression_loss(&lv, &asn, 1).unwrap();
        let t = total_loss(&c, &r, 1.0).unwrap();
        sum(&t).backward();
        let g_cls = cls.grad().unwrap();
        let g_box = boxes.grad().unwrap();
        assert!(g_cls[0] < 0.0, "positive logit should be pushed up");
        assert!(g_cls[1] > 0.0, "background logit should be pushed down");
        // only the positive anchor's four components carry regression grads
        assert!(g_box.iter().step_by(2).all(|&g| g != 0.0));
        assert!(g_box.iter().skip(1).step_by(2).all(|&g| g == 0.0));
    }
}
