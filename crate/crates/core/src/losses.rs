//! The four training objectives: keyframe regression, intra-trend ranking,
//! intra-trend speed (mixup linearity) and inter-trend subject alignment.
//!
//! Every function operates on candle tensors so gradients flow through them;
//! they work in any float dtype (training uses f32, gradient checks use f64).

use candle_core::{DType, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::error::{validation, Result};
use crate::segmentation::{Endpoint, MixupPairing, SubjectPairSet};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_rank: f64,
    pub lambda_spd: f64,
    pub lambda_sub: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_rank: 0.1,
            lambda_spd: 0.05,
            lambda_sub: 0.005,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_rank", self.lambda_rank),
            ("lambda_spd", self.lambda_spd),
            ("lambda_sub", self.lambda_sub),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(validation(format!("{name} must be a non-negative number, got {v}")));
            }
        }
        Ok(())
    }

    /// Weighted sum of already evaluated loss terms.
    pub fn combine(&self, reg: f64, rank: f64, spd: f64, sub: f64) -> f64 {
        reg + self.lambda_rank * rank + self.lambda_spd * spd + self.lambda_sub * sub
    }
}

fn scalar_zero(like: &Tensor) -> Result<Tensor> {
    Ok(Tensor::zeros((), like.dtype(), like.device())?)
}

/// Squared error on the two annotated keyframes of each segment, summed over
/// segments. All four inputs have shape `(N,)`.
pub fn regression_loss(
    labels_first: &Tensor,
    labels_last: &Tensor,
    preds_first: &Tensor,
    preds_last: &Tensor,
) -> Result<Tensor> {
    if preds_first.elem_count() == 0 {
        return scalar_zero(preds_first);
    }
    let first = (preds_first - labels_first)?.sqr()?.sum_all()?;
    let last = (preds_last - labels_last)?.sqr()?.sum_all()?;
    Ok((first + last)?)
}

/// Distances of every frame's feature from the segment's first frame.
///
/// `features` is `(N, T, d)`; the result is `(N, T)` with a zero first column.
/// Zero distances (repeated frames) get a zero gradient instead of NaN.
pub fn feature_deltas(features: &Tensor) -> Result<Tensor> {
    let (_, t, _) = features.dims3()?;
    if t < 2 {
        return Err(validation(format!("segment length T={t} must be at least 2")));
    }
    let first = features.narrow(1, 0, 1)?;
    let sq = features.broadcast_sub(&first)?.sqr()?.sum(D::Minus1)?;
    let positive = sq.gt(0.0)?.to_dtype(sq.dtype())?;
    // sqrt(sq + 1 - mask) * mask: identical value, finite derivative at zero.
    let safe = (&sq + (1.0 - &positive)?)?;
    Ok((safe.sqrt()? * positive)?)
}

/// Hinge on decreasing consecutive distances, summed over segments:
/// `sum_i sum_{t<T} max(0, d_t - d_{t+1})` for `deltas` of shape `(N, T)`.
pub fn ranking_loss(deltas: &Tensor) -> Result<Tensor> {
    let (n, t) = deltas.dims2()?;
    if n == 0 || t < 2 {
        return scalar_zero(deltas);
    }
    let earlier = deltas.narrow(1, 0, t - 1)?;
    let later = deltas.narrow(1, 1, t - 1)?;
    Ok((earlier - later)?.relu()?.sum_all()?)
}

/// Mixup linearity inside each segment.
///
/// `images` is `(N, T, ...)`, `preds` is `(N, T, C)` and holds the model's
/// predictions for those images. `forward` maps a batch of images
/// `(B, ...)` to intensities `(B, C)`. Targets are blended predictions with
/// gradients detached; gradients flow through the forward on mixed images.
pub fn speed_loss<F>(forward: F, images: &Tensor, preds: &Tensor, pairings: &[MixupPairing]) -> Result<Tensor>
where
    F: FnOnce(&Tensor) -> Result<Tensor>,
{
    let dims = images.dims();
    if dims.len() < 2 {
        return Err(validation("segment images need shape (N, T, ...)"));
    }
    let (n, t) = (dims[0], dims[1]);
    let (pn, pt, c) = preds.dims3()?;
    if (pn, pt) != (n, t) {
        return Err(validation(format!(
            "predictions {:?} do not match images {:?}",
            preds.dims(),
            dims
        )));
    }
    if pairings.len() != n {
        return Err(validation(format!("{} pairings for {n} segments", pairings.len())));
    }
    if n == 0 {
        return scalar_zero(preds);
    }

    let mut first_idx = Vec::with_capacity(n * t);
    let mut second_idx = Vec::with_capacity(n * t);
    let mut lambdas = Vec::with_capacity(n * t);
    for (seg, pairing) in pairings.iter().enumerate() {
        if pairing.pairs.len() != pairing.lambdas.len() {
            return Err(validation("pairing has mismatched pair and lambda counts"));
        }
        for (&(i, j), &lambda) in pairing.pairs.iter().zip(&pairing.lambdas) {
            if i >= t || j >= t {
                return Err(validation(format!("mixup pair ({i}, {j}) out of range for T={t}")));
            }
            first_idx.push((seg * t + i) as u32);
            second_idx.push((seg * t + j) as u32);
            lambdas.push(lambda);
        }
    }
    let m = lambdas.len();
    let device = images.device();
    let first_idx = Tensor::from_vec(first_idx, m, device)?;
    let second_idx = Tensor::from_vec(second_idx, m, device)?;

    let flat_images = images.flatten_to(1)?;
    let mut lambda_shape = vec![m];
    lambda_shape.extend(std::iter::repeat_n(1, dims.len() - 2));
    let lam_img = Tensor::from_vec(lambdas.clone(), lambda_shape, device)?.to_dtype(images.dtype())?;
    let a = flat_images.index_select(&first_idx, 0)?;
    let b = flat_images.index_select(&second_idx, 0)?;
    // lambda * a + (1 - lambda) * b
    let mixed = (&b + (a - &b)?.broadcast_mul(&lam_img)?)?;
    drop(b);

    let flat_preds = preds.detach().reshape((n * t, c))?;
    let lam_pred = Tensor::from_vec(lambdas, (m, 1), device)?.to_dtype(preds.dtype())?;
    let pa = flat_preds.index_select(&first_idx, 0)?;
    let pb = flat_preds.index_select(&second_idx, 0)?;
    let target = (&pb + (pa - &pb)?.broadcast_mul(&lam_pred)?)?;

    let out = forward(&mixed)?;
    if out.dims() != target.dims() {
        return Err(validation(format!(
            "forward returned {:?}, expected {:?}",
            out.dims(),
            target.dims()
        )));
    }
    Ok((out - target)?.sqr()?.sum_all()?)
}

/// Cosine misalignment of same-class, same-label keyframe features.
///
/// `endpoint_features` is `(N, 2, d)`: for batch segment `i`, row 0 holds the
/// feature of its first keyframe and row 1 of its last, both for the
/// segment's AU class. Each class contributes the mean of `1 - f_a . f_b`
/// over its pairs; the result is averaged over `au_count` classes.
pub fn subject_loss(pairs: &SubjectPairSet, endpoint_features: &Tensor, au_count: usize) -> Result<Tensor> {
    let (n, two, d) = endpoint_features.dims3()?;
    if two != 2 {
        return Err(validation("endpoint features need shape (N, 2, d)"));
    }
    if pairs.is_empty() {
        return scalar_zero(endpoint_features);
    }
    if au_count == 0 {
        return Err(validation("AU count must be positive"));
    }
    let mut per_class = vec![0usize; au_count];
    for p in &pairs.pairs {
        if p.au_class >= au_count {
            return Err(validation(format!("AU class {} out of range", p.au_class)));
        }
        if p.segment_a >= n || p.segment_b >= n {
            return Err(validation("subject pair refers to a segment outside the batch"));
        }
        per_class[p.au_class] += 1;
    }
    let row = |seg: usize, e: Endpoint| -> u32 {
        (2 * seg + if e == Endpoint::First { 0 } else { 1 }) as u32
    };
    let ia: Vec<u32> = pairs.pairs.iter().map(|p| row(p.segment_a, p.endpoint_a)).collect();
    let ib: Vec<u32> = pairs.pairs.iter().map(|p| row(p.segment_b, p.endpoint_b)).collect();
    let weights: Vec<f64> = pairs
        .pairs
        .iter()
        .map(|p| 1.0 / (au_count as f64 * per_class[p.au_class] as f64))
        .collect();

    let m = ia.len();
    let device = endpoint_features.device();
    let flat = endpoint_features.reshape((2 * n, d))?;
    let fa = flat.index_select(&Tensor::from_vec(ia, m, device)?, 0)?;
    let fb = flat.index_select(&Tensor::from_vec(ib, m, device)?, 0)?;
    let cos = (fa * fb)?.sum(D::Minus1)?;
    let weights = Tensor::from_vec(weights, m, device)?.to_dtype(endpoint_features.dtype())?;
    Ok(((1.0 - cos)? * weights)?.sum_all()?)
}

/// Weighted combination of the four terms.
pub fn total_loss(reg: &Tensor, rank: &Tensor, spd: &Tensor, sub: &Tensor, w: &LossWeights) -> Result<Tensor> {
    let total = ((reg + (rank * w.lambda_rank)?)? + (spd * w.lambda_spd)?)?;
    Ok((total + (sub * w.lambda_sub)?)?)
}

/// Reads a scalar tensor as f64.
pub fn scalar_value(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::segmentation::SubjectPair;
    use candle_core::Device;

    fn t1(v: &[f64]) -> Tensor {
        Tensor::new(v, &Device::Cpu).unwrap()
    }

    #[test]
    fn regression_examples() {
        let z = regression_loss(&t1(&[0.2]), &t1(&[0.8]), &t1(&[0.2]), &t1(&[0.8])).unwrap();
        assert_eq!(scalar_value(&z).unwrap(), 0.0);
        let l = regression_loss(&t1(&[0.2]), &t1(&[0.8]), &t1(&[0.4]), &t1(&[0.6])).unwrap();
        assert!((scalar_value(&l).unwrap() - 0.08).abs() < 1e-12);
        let doubled =
            regression_loss(&t1(&[0.2, 0.2]), &t1(&[0.8, 0.8]), &t1(&[0.4, 0.4]), &t1(&[0.6, 0.6])).unwrap();
        assert!((scalar_value(&doubled).unwrap() - 0.16).abs() < 1e-12);
        let empty = regression_loss(&t1(&[]), &t1(&[]), &t1(&[]), &t1(&[])).unwrap();
        assert_eq!(scalar_value(&empty).unwrap(), 0.0);
    }

    #[test]
    fn delta_examples() {
        let same = Tensor::ones((1, 4, 3), DType::F64, &Device::Cpu).unwrap();
        let d = feature_deltas(&same).unwrap().to_vec2::<f64>().unwrap();
        assert_eq!(d, vec![vec![0.0; 4]]);

        let f = Tensor::new(&[[[1.0f64, 0.0, 0.0], [0.0, 1.0, 0.0]]], &Device::Cpu).unwrap();
        let d = feature_deltas(&f).unwrap().to_vec2::<f64>().unwrap();
        assert_eq!(d[0][0], 0.0);
        assert!((d[0][1] - 2f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn repeated_frames_have_finite_gradient() {
        let var = candle_core::Var::from_tensor(&Tensor::ones((1, 3, 2), DType::F64, &Device::Cpu).unwrap()).unwrap();
        let loss = ranking_loss(&feature_deltas(var.as_tensor()).unwrap()).unwrap();
        let grads = loss.backward().unwrap();
        let g = grads.get(&var).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        assert!(g.iter().all(|x| x.is_finite()));
    }

    #[test]
    fn ranking_examples() {
        let l = |v: &[f64]| {
            let t = Tensor::new(v, &Device::Cpu).unwrap().unsqueeze(0).unwrap();
            scalar_value(&ranking_loss(&t).unwrap()).unwrap()
        };
        assert_eq!(l(&[0.0, 0.1, 0.2, 0.3]), 0.0);
        assert!((l(&[0.0, 0.5, 0.3, 0.7]) - 0.2).abs() < 1e-12);
        assert_eq!(l(&[0.0, 0.0, 0.0, 0.0]), 0.0);
    }

    fn seg_images(n: usize, t: usize, p: usize) -> Tensor {
        let v: Vec<f64> = (0..n * t * p).map(|k| ((k * 37) % 11) as f64 / 11.0).collect();
        Tensor::from_vec(v, (n, t, p), &Device::Cpu).unwrap()
    }

    fn linear_stub(w: &Tensor) -> impl Fn(&Tensor) -> Result<Tensor> + '_ {
        move |x: &Tensor| Ok(x.matmul(w)?)
    }

    #[test]
    fn speed_identity_endpoints() {
        let (n, t, p) = (2, 4, 5);
        let images = seg_images(n, t, p);
        let w = Tensor::new(&[[0.3f64, -0.1], [0.2, 0.4], [0.0, 0.1], [0.5, 0.5], [-0.2, 0.3]], &Device::Cpu).unwrap();
        let nonlinear = |x: &Tensor| Ok(x.matmul(&w)?.sqr()?);
        let preds = nonlinear(&images.reshape((n * t, p)).unwrap()).unwrap().reshape((n, t, 2)).unwrap();
        let shuffled = MixupPairing {
            pairs: vec![(0, 2), (1, 0), (2, 3), (3, 1)],
            lambdas: vec![1.0; 4],
        };
        let l = speed_loss(nonlinear, &images, &preds, &[shuffled.clone(), shuffled]).unwrap();
        assert!(scalar_value(&l).unwrap().abs() < 1e-12);

        let fixed = MixupPairing {
            pairs: (0..t).map(|i| (i, i)).collect(),
            lambdas: vec![0.0; 4],
        };
        let l = speed_loss(nonlinear, &images, &preds, &[fixed.clone(), fixed]).unwrap();
        assert!(scalar_value(&l).unwrap().abs() < 1e-12);
    }

    #[test]
    fn speed_linear_model_is_consistent() {
        let (n, t, p) = (3, 4, 5);
        let images = seg_images(n, t, p);
        let w = Tensor::new(&[[0.3f64, -0.1], [0.2, 0.4], [0.0, 0.1], [0.5, 0.5], [-0.2, 0.3]], &Device::Cpu).unwrap();
        let preds = images.reshape((n * t, p)).unwrap().matmul(&w).unwrap().reshape((n, t, 2)).unwrap();
        let pairing = MixupPairing {
            pairs: vec![(0, 3), (1, 2), (2, 0), (3, 1)],
            lambdas: vec![0.5; 4],
        };
        let l = speed_loss(linear_stub(&w), &images, &preds, &vec![pairing; n]).unwrap();
        assert!(scalar_value(&l).unwrap().abs() < 1e-12);
    }

    #[test]
    fn speed_rejects_bad_pairs() {
        let images = seg_images(1, 4, 5);
        let preds = Tensor::zeros((1, 4, 2), DType::F64, &Device::Cpu).unwrap();
        let bad = MixupPairing {
            pairs: vec![(0, 4), (1, 2), (2, 0), (3, 1)],
            lambdas: vec![0.5; 4],
        };
        let w = Tensor::zeros((5, 2), DType::F64, &Device::Cpu).unwrap();
        assert!(speed_loss(linear_stub(&w), &images, &preds, &[bad]).is_err());
    }

    fn pair(a: usize, b: usize, au: usize) -> SubjectPair {
        SubjectPair {
            segment_a: a,
            endpoint_a: Endpoint::First,
            segment_b: b,
            endpoint_b: Endpoint::First,
            au_class: au,
            shared_label: 0.4,
        }
    }

    #[test]
    fn subject_examples() {
        let set = SubjectPairSet {
            pairs: vec![pair(0, 1, 0)],
        };
        let same = Tensor::new(&[[[1.0f64, 0.0], [1.0, 0.0]], [[1.0, 0.0], [0.0, 1.0]]], &Device::Cpu).unwrap();
        assert!(scalar_value(&subject_loss(&set, &same, 1).unwrap()).unwrap().abs() < 1e-12);

        let anti = Tensor::new(&[[[1.0f64, 0.0], [1.0, 0.0]], [[-1.0, 0.0], [0.0, 1.0]]], &Device::Cpu).unwrap();
        assert!((scalar_value(&subject_loss(&set, &anti, 1).unwrap()).unwrap() - 2.0).abs() < 1e-12);

        let ortho = Tensor::new(&[[[1.0f64, 0.0], [1.0, 0.0]], [[0.0, 1.0], [0.0, 1.0]]], &Device::Cpu).unwrap();
        assert!((scalar_value(&subject_loss(&set, &ortho, 2).unwrap()).unwrap() - 0.5).abs() < 1e-12);

        let empty = SubjectPairSet::default();
        assert_eq!(scalar_value(&subject_loss(&empty, &ortho, 2).unwrap()).unwrap(), 0.0);
    }

    #[test]
    fn total_examples() {
        let s = |v: f64| Tensor::new(v, &Device::Cpu).unwrap();
        let w = LossWeights::default();
        let t = total_loss(&s(1.0), &s(2.0), &s(3.0), &s(4.0), &w).unwrap();
        assert!((scalar_value(&t).unwrap() - 1.37).abs() < 1e-12);
        assert!((w.combine(1.0, 2.0, 3.0, 4.0) - 1.37).abs() < 1e-12);
        let zero = LossWeights {
            lambda_rank: 0.0,
            lambda_spd: 0.0,
            lambda_sub: 0.0,
        };
        assert_eq!(zero.combine(1.0, 2.0, 3.0, 4.0), 1.0);
        // Affine in each weight.
        let at = |lr: f64| LossWeights { lambda_rank: lr, ..w }.combine(1.0, 2.0, 3.0, 4.0);
        assert!(((at(0.3) - at(0.1)) - (at(0.5) - at(0.3))).abs() < 1e-12);
        assert!(LossWeights { lambda_sub: -1.0, ..w }.validate().is_err());
    }
}
