//! Training objectives: the hallucination (feature-mimicking) loss, the masked
//! pose-heatmap loss, and their weighted total.
//!
//! Both losses are plain mean-squared errors. The pose loss averages the
//! per-channel MSE over the visible (joint, space) channels: a joint visible
//! in both the uv and the uz space contributes two terms, and the normalizer
//! counts channels across both spaces. Samples with no visible channel
//! contribute zero. Batches reduce by mean over samples.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Weights of the two loss terms. The total is their plain sum by default;
/// setting `w_pi = 0` turns stage 2 into the RGB-only ablation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub w_pi: f64,
    pub w_pe: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            w_pi: 1.0,
            w_pe: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if self.w_pi < 0.0 || self.w_pe < 0.0 {
            return Err(Error::Config(format!(
                "loss weights must be non-negative, got w_pi={} w_pe={}",
                self.w_pi, self.w_pe
            )));
        }
        Ok(())
    }
}

/// Mean squared error between a depth feature map and a hallucinated one.
/// Zero iff the inputs are identical; symmetric in its arguments.
pub fn hallucination_loss(f_depth: &Tensor, f_hall: &Tensor) -> Result<Tensor> {
    if f_depth.dims() != f_hall.dims() {
        return Err(Error::Shape(format!(
            "feature maps disagree: {:?} vs {:?}",
            f_depth.dims(),
            f_hall.dims()
        )));
    }
    Ok(f_depth.sub(f_hall)?.sqr()?.mean_all()?)
}

/// Masked pose loss over paired heatmap stacks.
///
/// `pred_*` and `gt_*` are (B, J, H, W); `mask_*` are (B, J) with 1.0 for
/// visible channels. Returns a scalar tensor.
pub fn pose_loss(
    pred_uv: &Tensor,
    pred_uz: &Tensor,
    gt_uv: &Tensor,
    gt_uz: &Tensor,
    mask_uv: &Tensor,
    mask_uz: &Tensor,
) -> Result<Tensor> {
    if pred_uv.dims() != gt_uv.dims() || pred_uz.dims() != gt_uz.dims() {
        return Err(Error::Shape(format!(
            "prediction/target stacks disagree: uv {:?} vs {:?}, uz {:?} vs {:?}",
            pred_uv.dims(),
            gt_uv.dims(),
            pred_uz.dims(),
            gt_uz.dims()
        )));
    }
    let mask_uv = mask_uv.to_dtype(pred_uv.dtype())?;
    let mask_uz = mask_uz.to_dtype(pred_uz.dtype())?;
    // per-channel mean squared error, (B, J) per space
    let err_uv = pred_uv.sub(gt_uv)?.sqr()?.mean((2, 3))?;
    let err_uz = pred_uz.sub(gt_uz)?.sqr()?.mean((2, 3))?;
    let num = ((err_uv * &mask_uv)?.sum(1)? + (err_uz * &mask_uz)?.sum(1)?)?;
    let count = (mask_uv.sum(1)? + mask_uz.sum(1)?)?;
    let denom = count.maximum(1.0)?;
    Ok(num.div(&denom)?.mean_all()?)
}

/// Weighted sum of the two loss terms.
pub fn total_loss(pi: &Tensor, pe: &Tensor, w: &LossWeights) -> Result<Tensor> {
    w.validate()?;
    Ok(((pi * w.w_pi)? + (pe * w.w_pe)?)?)
}

/// Build a (B, J) f32 mask tensor from per-sample boolean masks.
pub fn mask_tensor(masks: &[Vec<bool>], device: &candle_core::Device) -> Result<Tensor> {
    let b = masks.len();
    let j = masks.first().map_or(0, |m| m.len());
    let data: Vec<f32> = masks
        .iter()
        .flat_map(|m| m.iter().map(|&v| if v { 1.0 } else { 0.0 }))
        .collect();
    Ok(Tensor::from_vec(data, (b, j), device)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::gaussian_peak;
    use crate::model::nn::scalar_f32;
    use candle_core::{DType, Device, Var};

    fn dev() -> Device {
        Device::Cpu
    }

    #[test]
    fn hallucination_loss_identities() {
        let a = Tensor::rand(0f32, 1f32, (2, 3, 4, 4), &dev()).unwrap();
        let zero = scalar_f32(&hallucination_loss(&a, &a).unwrap()).unwrap();
        assert_eq!(zero, 0.0);

        let ones = Tensor::ones((2, 3, 4, 4), DType::F32, &dev()).unwrap();
        let zeros = Tensor::zeros((2, 3, 4, 4), DType::F32, &dev()).unwrap();
        let one = scalar_f32(&hallucination_loss(&ones, &zeros).unwrap()).unwrap();
        assert_eq!(one, 1.0);

        let b = Tensor::rand(0f32, 1f32, (2, 3, 4, 4), &dev()).unwrap();
        let ab = scalar_f32(&hallucination_loss(&a, &b).unwrap()).unwrap();
        let ba = scalar_f32(&hallucination_loss(&b, &a).unwrap()).unwrap();
        assert_eq!(ab, ba);

        let bad = Tensor::zeros((2, 3, 4, 5), DType::F32, &dev()).unwrap();
        assert!(hallucination_loss(&a, &bad).is_err());
    }

    #[test]
    fn hallucination_loss_is_permutation_invariant() {
        let n = 24usize;
        let vals: Vec<f32> = (0..n).map(|i| (i as f32).sin()).collect();
        let vals2: Vec<f32> = (0..n).map(|i| (i as f32).cos()).collect();
        let l1 = scalar_f32(
            &hallucination_loss(
                &Tensor::from_vec(vals.clone(), (2, 3, 2, 2), &dev()).unwrap(),
                &Tensor::from_vec(vals2.clone(), (2, 3, 2, 2), &dev()).unwrap(),
            )
            .unwrap(),
        )
        .unwrap();
        // apply the same permutation (reversal) to both inputs
        let rev1: Vec<f32> = vals.iter().rev().cloned().collect();
        let rev2: Vec<f32> = vals2.iter().rev().cloned().collect();
        let l2 = scalar_f32(
            &hallucination_loss(
                &Tensor::from_vec(rev1, (2, 3, 2, 2), &dev()).unwrap(),
                &Tensor::from_vec(rev2, (2, 3, 2, 2), &dev()).unwrap(),
            )
            .unwrap(),
        )
        .unwrap();
        assert!((l1 - l2).abs() < 1e-7);
    }

    fn stacks(b: usize, j: usize, h: usize, w: usize, fill: f32) -> Tensor {
        Tensor::full(fill, (b, j, h, w), &dev()).unwrap()
    }

    #[test]
    fn pose_loss_zero_when_equal_or_fully_masked() {
        let gt = Tensor::rand(0f32, 1f32, (2, 3, 8, 8), &dev()).unwrap();
        let m = mask_tensor(&[vec![true; 3], vec![true; 3]], &dev()).unwrap();
        let l = pose_loss(&gt, &gt, &gt, &gt, &m, &m).unwrap();
        assert_eq!(scalar_f32(&l).unwrap(), 0.0);

        let pred = Tensor::rand(0f32, 1f32, (2, 3, 8, 8), &dev()).unwrap();
        let zero_mask = mask_tensor(&[vec![false; 3], vec![false; 3]], &dev()).unwrap();
        let l = pose_loss(&pred, &pred, &gt, &gt, &zero_mask, &zero_mask).unwrap();
        assert_eq!(scalar_f32(&l).unwrap(), 0.0);
    }

    #[test]
    fn pose_loss_matches_analytic_gaussian_energy() {
        // one visible uv channel, zero prediction: loss = mean(gt^2) over the grid
        let (h, w) = (16usize, 16usize);
        let g = gaussian_peak((7.0, 5.0), 2.0, h, w);
        let expected: f64 =
            g.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>() / (h * w) as f64;

        let gt_uv = Tensor::from_vec(g, (1, 1, h, w), &dev()).unwrap();
        let gt_uz = stacks(1, 1, h, w, 0.0);
        let pred = stacks(1, 1, h, w, 0.0);
        let m_uv = mask_tensor(&[vec![true]], &dev()).unwrap();
        let m_uz = mask_tensor(&[vec![false]], &dev()).unwrap();
        let l = pose_loss(&pred, &pred, &gt_uv, &gt_uz, &m_uv, &m_uz).unwrap();
        let got = scalar_f32(&l).unwrap() as f64;
        assert!(
            (got - expected).abs() < 1e-6,
            "pose loss {got} vs analytic {expected}"
        );
    }

    #[test]
    fn pose_loss_ignores_masked_out_channels() {
        let gt = Tensor::rand(0f32, 1f32, (1, 4, 8, 8), &dev()).unwrap();
        let pred = Tensor::rand(0f32, 1f32, (1, 4, 8, 8), &dev()).unwrap();
        let m_on = mask_tensor(&[vec![true, false, true, false]], &dev()).unwrap();
        let base = scalar_f32(&pose_loss(&pred, &pred, &gt, &gt, &m_on, &m_on).unwrap()).unwrap();

        // perturb masked-out channels (1 and 3) only
        let noise = Tensor::rand(5f32, 6f32, (1, 2, 8, 8), &dev()).unwrap();
        let rows: Vec<Tensor> = vec![
            pred.narrow(1, 0, 1).unwrap(),
            noise.narrow(1, 0, 1).unwrap(),
            pred.narrow(1, 2, 1).unwrap(),
            noise.narrow(1, 1, 1).unwrap(),
        ];
        let perturbed = Tensor::cat(&rows, 1).unwrap();
        let after =
            scalar_f32(&pose_loss(&perturbed, &perturbed, &gt, &gt, &m_on, &m_on).unwrap())
                .unwrap();
        assert_eq!(base, after);
    }

    #[test]
    fn pose_loss_counts_channels_across_both_spaces() {
        // one joint visible in both spaces: |J| = 2, loss = (e_uv + e_uz) / 2
        let (h, w) = (4usize, 4usize);
        let gt_uv = stacks(1, 1, h, w, 1.0);
        let gt_uz = stacks(1, 1, h, w, 0.5);
        let pred = stacks(1, 1, h, w, 0.0);
        let m = mask_tensor(&[vec![true]], &dev()).unwrap();
        let l = scalar_f32(&pose_loss(&pred, &pred, &gt_uv, &gt_uz, &m, &m).unwrap()).unwrap();
        assert!((l - (1.0 + 0.25) / 2.0).abs() < 1e-7);
    }

    #[test]
    fn total_loss_arithmetic_and_validation() {
        let w = LossWeights::default();
        let z = Tensor::zeros((), DType::F32, &dev()).unwrap();
        assert_eq!(
            scalar_f32(&total_loss(&z, &z, &w).unwrap()).unwrap(),
            0.0
        );
        let pi = Tensor::full(0.5f32, (), &dev()).unwrap();
        let pe = Tensor::full(1.5f32, (), &dev()).unwrap();
        assert_eq!(scalar_f32(&total_loss(&pi, &pe, &w).unwrap()).unwrap(), 2.0);

        let bad = LossWeights {
            w_pi: -1.0,
            w_pe: 1.0,
        };
        assert!(total_loss(&pi, &pe, &bad).is_err());

        // w_pi = 0 drops the hallucination term entirely
        let rgb_only = LossWeights {
            w_pi: 0.0,
            w_pe: 1.0,
        };
        assert_eq!(
            scalar_f32(&total_loss(&pi, &pe, &rgb_only).unwrap()).unwrap(),
            1.5
        );
    }

    /// Central-difference gradient of `f` at `var`, one coordinate at a time.
    /// Operates on f64 vars so truncation is the only error source.
    fn numeric_grad(var: &Var, f: &dyn Fn() -> f64, eps: f64) -> Vec<f64> {
        let base = var
            .as_tensor()
            .flatten_all()
            .unwrap()
            .to_vec1::<f64>()
            .unwrap();
        let shape = var.as_tensor().dims().to_vec();
        let mut grads = Vec::with_capacity(base.len());
        for i in 0..base.len() {
            let mut plus = base.clone();
            plus[i] += eps;
            var.set(&Tensor::from_vec(plus, shape.as_slice(), &dev()).unwrap())
                .unwrap();
            let fp = f();
            let mut minus = base.clone();
            minus[i] -= eps;
            var.set(&Tensor::from_vec(minus, shape.as_slice(), &dev()).unwrap())
                .unwrap();
            let fm = f();
            grads.push((fp - fm) / (2.0 * eps));
        }
        var.set(&Tensor::from_vec(base, shape.as_slice(), &dev()).unwrap())
            .unwrap();
        grads
    }

    fn scalar(t: &Tensor) -> f64 {
        t.to_dtype(DType::F64)
            .unwrap()
            .flatten_all()
            .unwrap()
            .to_vec1::<f64>()
            .unwrap()[0]
    }

    #[test]
    fn loss_gradients_match_finite_differences() {
        use rand::Rng;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let mut mk = |rng: &mut rand_chacha::ChaCha8Rng| {
            let v: Vec<f64> = (0..2 * 3 * 4 * 4).map(|_| rng.gen_range(-1.0..1.0)).collect();
            Var::from_tensor(&Tensor::from_vec(v, (2, 3, 4, 4), &dev()).unwrap()).unwrap()
        };
        let a = mk(&mut rng);
        let b = mk(&mut rng);

        // hallucination loss wrt both inputs
        let loss = hallucination_loss(a.as_tensor(), b.as_tensor()).unwrap();
        let grads = loss.backward().unwrap();
        for var in [&a, &b] {
            let analytic = grads
                .get(var)
                .unwrap()
                .flatten_all()
                .unwrap()
                .to_vec1::<f64>()
                .unwrap();
            let f =
                || scalar(&hallucination_loss(a.as_tensor(), b.as_tensor()).unwrap());
            let numeric = numeric_grad(var, &f, 1e-4);
            for (g, n) in analytic.iter().zip(&numeric) {
                let denom = n.abs().max(1e-6);
                assert!(
                    (g - n).abs() / denom < 1e-4,
                    "hallucination grad {g} vs numeric {n}"
                );
            }
        }

        // pose loss wrt predictions, with a mixed mask
        let gt_uv = mk(&mut rng);
        let gt_uz = mk(&mut rng);
        let m_uv =
            mask_tensor(&[vec![true, false, true], vec![true, true, false]], &dev()).unwrap();
        let m_uz =
            mask_tensor(&[vec![false, true, true], vec![true, false, true]], &dev()).unwrap();
        let loss = pose_loss(
            a.as_tensor(),
            b.as_tensor(),
            gt_uv.as_tensor(),
            gt_uz.as_tensor(),
            &m_uv,
            &m_uz,
        )
        .unwrap();
        let grads = loss.backward().unwrap();
        for var in [&a, &b] {
            let analytic = grads
                .get(var)
                .unwrap()
                .flatten_all()
                .unwrap()
                .to_vec1::<f64>()
                .unwrap();
            let f = || {
                scalar(
                    &pose_loss(
                        a.as_tensor(),
                        b.as_tensor(),
                        gt_uv.as_tensor(),
                        gt_uz.as_tensor(),
                        &m_uv,
                        &m_uz,
                    )
                    .unwrap(),
                )
            };
            let numeric = numeric_grad(var, &f, 1e-4);
            for (g, n) in analytic.iter().zip(&numeric) {
                let denom = n.abs().max(1e-6);
                assert!((g - n).abs() / denom < 1e-4, "pose grad {g} vs numeric {n}");
            }
        }
    }
}
