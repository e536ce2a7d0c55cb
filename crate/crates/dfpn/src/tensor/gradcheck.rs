//! Central-difference verification of analytic gradients.

use super::Tensor;
use crate::error::{Error, Result};

/// Outcome of a gradient check. `max_rel_err` is
/// |analytic − numeric| / max(1, |numeric|) over every coordinate
/// checked; the `worst_*` fields identify the offender.
#[derive(Debug, Clone)]
pub struct GradcheckReport {
    pub checked: usize,
    pub max_rel_err: f64,
    pub worst_leaf: usize,
    pub worst_coord: usize,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
}

impl GradcheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_err < tolerance
    }
}

/// Check every coordinate of every leaf.
pub fn gradcheck<F>(f: F, leaves: &[Tensor], eps: f64) -> Result<GradcheckReport>
where
    F: FnMut() -> Result<Tensor>,
{
    let coords: Vec<(usize, usize)> = leaves
        .iter()
        .enumerate()
        .flat_map(|(li, t)| (0..t.len()).map(move |ci| (li, ci)))
        .collect();
    gradcheck_coords(f, leaves, &coords, eps)
}

/// Check the listed `(leaf index, flat coordinate)` pairs only. `f` must
/// rebuild the computation graph from the leaves on every call and return
/// a scalar; between calls the leaves are perturbed in place.
pub fn gradcheck_coords<F>(
    mut f: F,
    leaves: &[Tensor],
    coords: &[(usize, usize)],
    eps: f64,
) -> Result<GradcheckReport>
where
    F: FnMut() -> Result<Tensor>,
{
    if eps <= 0.0 {
        return Err(Error::Config(format!("gradcheck eps must be positive, got {eps}")));
    }
    for (li, ci) in coords {
        let leaf = leaves
            .get(*li)
            .ok_or_else(|| Error::Config(format!("gradcheck: leaf index {li} out of range")))?;
        if *ci >= leaf.len() {
            return Err(Error::Config(format!(
                "gradcheck: coordinate {ci} out of range for leaf {li} (len {})",
                leaf.len()
            )));
        }
        if !leaf.requires_grad() {
            return Err(Error::Config(format!("gradcheck: leaf {li} does not require grad")));
        }
    }

    for leaf in leaves {
        leaf.zero_grad();
    }
    let loss = f()?;
    if loss.len() != 1 {
        return Err(Error::Shape(format!(
            "gradcheck needs a scalar loss, got shape {:?}",
            loss.shape()
        )));
    }
    loss.backward();
    let analytic: Vec<Vec<f64>> = leaves
        .iter()
        .map(|t| t.grad().unwrap_or_else(|| vec![0.0; t.len()]))
        .collect();
    for leaf in leaves {
        leaf.zero_grad();
    }

    let mut report = GradcheckReport {
        checked: 0,
        max_rel_err: 0.0,
        worst_leaf: 0,
        worst_coord: 0,
        worst_analytic: 0.0,
        worst_numeric: 0.0,
    };
    for &(li, ci) in coords {
        let leaf = &leaves[li];
        let original = leaf.value_at(ci);
        leaf.set_value_at(ci, original + eps);
        let plus = f()?.item();
        leaf.set_value_at(ci, original - eps);
        let minus = f()?.item();
        leaf.set_value_at(ci, original);

        let numeric = (plus - minus) / (2.0 * eps);
        let a = analytic[li][ci];
        let rel = (a - numeric).abs() / numeric.abs().max(1.0);
        report.checked += 1;
        if rel > report.max_rel_err {
            report.max_rel_err = rel;
            report.worst_leaf = li;
            report.worst_coord = ci;
            report.worst_analytic = a;
            report.worst_numeric = numeric;
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::super::ops::{add, conv2d, mul, relu, sigmoid, sum, upsample_nearest_2x, ConvParams};
    use super::*;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn rand_tensor(shape: &[usize], rng: &mut StdRng) -> Tensor {
        let len: usize = shape.iter().product();
        let vals: Vec<f64> = (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor::from_vec(shape, vals).with_grad()
    }

    #[test]
    fn quadratic_gradient_matches() {
        let x = Tensor::from_vec(&[3], vec![0.5, -0.25, 2.0]).with_grad();
        let leaves = [x.clone()];
        let report = gradcheck(|| Ok(sum(&mul(&x, &x)?)), &leaves, 1e-6).unwrap();
        assert_eq!(report.checked, 3);
        assert!(report.passes(1e-7), "max rel err {}", report.max_rel_err);
    }

    #[test]
    fn conv_chain_gradient_matches() {
        let mut rng = StdRng::seed_from_u64(7);
        let x = rand_tensor(&[1, 2, 5, 5], &mut rng);
        let w = rand_tensor(&[3, 2, 3, 3], &mut rng);
        let b = rand_tensor(&[3], &mut rng);
        let leaves = [x.clone(), w.clone(), b.clone()];
        let report = gradcheck(
            || {
                let p = ConvParams::new(w.clone(), b.clone(), 2, 1)?;
                let y = sigmoid(&conv2d(&x, &p)?);
                Ok(sum(&mul(&y, &y)?))
            },
            &leaves,
            1e-5,
        )
        .unwrap();
        assert!(report.passes(1e-6), "max rel err {}", report.max_rel_err);
    }

    #[test]
    fn upsample_add_crop_gradient_matches() {
        let mut rng = StdRng::seed_from_u64(11);
        // 3x3 coarse level upsamples to 6x6 and is cropped onto a 5x5 lateral.
        let lateral = rand_tensor(&[1, 2, 5, 5], &mut rng);
        let coarse = rand_tensor(&[1, 2, 3, 3], &mut rng);
        let leaves = [lateral.clone(), coarse.clone()];
        let report = gradcheck(
            || {
                let up = upsample_nearest_2x(&coarse)?;
                let merged = add(&lateral, &up)?;
                let r = relu(&merged);
                Ok(sum(&mul(&r, &r)?))
            },
            &leaves,
            1e-5,
        )
        .unwrap();
        assert!(report.passes(1e-6), "max rel err {}", report.max_rel_err);
    }

    #[test]
    fn coordinate_subset_only_touches_listed_coords() {
        let x = Tensor::from_vec(&[4], vec![1.0, 2.0, 3.0, 4.0]).with_grad();
        let leaves = [x.clone()];
        let report =
            gradcheck_coords(|| Ok(sum(&mul(&x, &x)?)), &leaves, &[(0, 1), (0, 3)], 1e-6).unwrap();
        assert_eq!(report.checked, 2);
        assert!(report.passes(1e-7));
    }

    #[test]
    fn rejects_non_scalar_loss() {
        let x = Tensor::from_vec(&[2], vec![1.0, 2.0]).with_grad();
        let leaves = [x.clone()];
        assert!(gradcheck(|| mul(&x, &x), &leaves, 1e-6).is_err());
    }

    #[test]
    fn rejects_bad_coordinates() {
        let x = Tensor::from_vec(&[2], vec![1.0, 2.0]).with_grad();
        let leaves = [x.clone()];
        assert!(gradcheck_coords(|| Ok(sum(&x)), &leaves, &[(0, 9)], 1e-6).is_err());
        assert!(gradcheck_coords(|| Ok(sum(&x)), &leaves, &[(4, 0)], 1e-6).is_err());
    }
}
