//! Reverse-prediction MAE, the prototype contrast term, and their sum.

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::clustering::ClusterModel;
use crate::error::{PcrpError, Result};
use crate::numcore::{transpose, Graph, Real, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContrastConfig {
    /// Prototypes per contrast term, positive included. Clamped to each `k`.
    pub r: usize,
    pub lambda_contrast: f64,
}

impl Default for ContrastConfig {
    fn default() -> Self {
        Self {
            r: 16,
            lambda_contrast: 1.0,
        }
    }
}

/// Mean absolute error over every element of two equally shaped tensors.
pub fn reverse_mae<F: Real>(g: &mut Graph<F>, target: Var, predicted: Var) -> Result<Var> {
    if g.shape(target) != g.shape(predicted) {
        return Err(PcrpError::Shape {
            op: "reverse_mae",
            left: g.shape(target).to_vec(),
            right: g.shape(predicted).to_vec(),
        });
    }
    let diff = g.sub(target, predicted)?;
    Ok(g.mean_abs(diff))
}

/// MAE over per-step `[B×D]` frames; equals the batch mean of per-sample MAE.
pub fn sequence_mae<F: Real>(g: &mut Graph<F>, targets: &[Var], predictions: &[Var]) -> Result<Var> {
    if targets.len() != predictions.len() || targets.is_empty() {
        return Err(PcrpError::Shape {
            op: "sequence_mae",
            left: vec![targets.len()],
            right: vec![predictions.len()],
        });
    }
    let mut total: Option<Var> = None;
    for (&t, &p) in targets.iter().zip(predictions) {
        let step = reverse_mae(g, t, p)?;
        total = Some(match total {
            Some(acc) => g.add(acc, step)?,
            None => step,
        });
    }
    Ok(g.scale(total.unwrap(), F::one() / F::from_usize(targets.len()).unwrap()))
}

/// Draws the prototype subset for one sample: the positive first, then
/// `r − 1` distinct negatives uniformly from the other `k − 1`.
pub fn sample_prototypes(k: usize, positive: usize, r: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let r = r.clamp(1, k);
    let mut out = Vec::with_capacity(r);
    out.push(positive);
    out.extend(
        index::sample(rng, k - 1, r - 1)
            .into_iter()
            .map(|j| if j >= positive { j + 1 } else { j }),
    );
    out
}

/// Per-sample contrast `[B]`, averaged over the clusterings.
///
/// `encodings` holds unit-norm rows `[B×C]`; `sample_indices[b]` is the
/// dataset index of row `b`, used to look up its assigned prototype.
/// Prototypes and tightness enter as constants.
pub fn proto_contrast<F: Real>(
    g: &mut Graph<F>,
    encodings: Var,
    sample_indices: &[usize],
    models: &[ClusterModel],
    r: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Var> {
    let shape = g.shape(encodings).to_vec();
    if shape.len() != 2 || shape[0] != sample_indices.len() {
        return Err(PcrpError::Shape {
            op: "proto_contrast",
            left: shape,
            right: vec![sample_indices.len()],
        });
    }
    if models.is_empty() {
        return Err(PcrpError::Contract("proto_contrast needs at least one clustering".into()));
    }
    let mut total: Option<Var> = None;
    for model in models {
        if model.dim != shape[1] {
            return Err(PcrpError::Shape {
                op: "proto_contrast",
                left: shape.clone(),
                right: vec![model.k, model.dim],
            });
        }
        let rows = sample_indices
            .iter()
            .map(|&i| {
                let pos = *model.assignment.get(i).ok_or_else(|| {
                    PcrpError::Param(format!("sample {i} not covered by a {}-cluster model", model.k))
                })?;
                Ok(sample_prototypes(model.k, pos, r, rng))
            })
            .collect::<Result<Vec<_>>>()?;
        let protos: Vec<F> = model.prototypes.iter().map(|&x| F::lit(x)).collect();
        let zt = g.constant(transpose(&protos, model.k, model.dim));
        let dots = g.matmul(encodings, zt)?;
        let inv: Vec<F> = model.tightness.iter().map(|&phi| F::lit(1.0 / phi)).collect();
        let inv = g.constant(Tensor::vector(inv));
        let logits = g.mul(dots, inv)?;
        let nll = g.subset_nll(logits, rows)?;
        total = Some(match total {
            Some(acc) => g.add(acc, nll)?,
            None => nll,
        });
    }
    Ok(g.scale(total.unwrap(), F::one() / F::from_usize(models.len()).unwrap()))
}

/// Handles to the loss and its two terms.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub total: Var,
    pub mae: Var,
    pub contrast: Option<Var>,
}

/// Batch mean of `mae + λ·contrast`. With no clusterings the contrast term is
/// absent. `encodings` must be unit-norm rows.
#[allow(clippy::too_many_arguments)]
pub fn protomae<F: Real>(
    g: &mut Graph<F>,
    targets: &[Var],
    predictions: &[Var],
    encodings: Var,
    sample_indices: &[usize],
    models: &[ClusterModel],
    cfg: &ContrastConfig,
    seed: u64,
) -> Result<LossTerms> {
    let mae = sequence_mae(g, targets, predictions)?;
    if models.is_empty() {
        return Ok(LossTerms {
            total: mae,
            mae,
            contrast: None,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let per_sample = proto_contrast(g, encodings, sample_indices, models, cfg.r, &mut rng)?;
    let contrast = g.mean(per_sample);
    let weighted = g.scale(contrast, F::lit(cfg.lambda_contrast));
    let total = g.add(mae, weighted)?;
    Ok(LossTerms {
        total,
        mae,
        contrast: Some(contrast),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn model(prototypes: Vec<f64>, dim: usize, tightness: Vec<f64>, assignment: Vec<usize>) -> ClusterModel {
        let k = tightness.len();
        let mut member_counts = vec![0; k];
        assignment.iter().for_each(|&c| member_counts[c] += 1);
        ClusterModel {
            k,
            dim,
            prototypes,
            tightness,
            member_counts,
            assignment,
        }
    }

    fn contrast_value(v: &[f64], m: &[ClusterModel], r: usize, seed: u64) -> f64 {
        let mut g = Graph::new();
        let e = g.constant(Tensor::matrix(1, v.len(), v.to_vec()).unwrap());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let out = proto_contrast(&mut g, e, &[0], m, r, &mut rng).unwrap();
        g.value(out).data()[0]
    }

    #[test]
    fn mae_hand_case_and_symmetry() {
        let mut g = Graph::new();
        let target = g.constant(Tensor::new(vec![2, 1, 3], vec![1., 2., 3., 4., 5., 6.]).unwrap());
        let pred = g.constant(Tensor::zeros(&[2, 1, 3]));
        let a = reverse_mae(&mut g, target, pred).unwrap();
        let b = reverse_mae(&mut g, pred, target).unwrap();
        assert_eq!(g.value(a).item().unwrap(), 3.5);
        assert_eq!(g.value(a), g.value(b));
        let zero = reverse_mae(&mut g, target, target).unwrap();
        assert_eq!(g.value(zero).item().unwrap(), 0.0);
        let wrong = g.constant(Tensor::zeros(&[6]));
        assert!(reverse_mae(&mut g, target, wrong).is_err());
    }

    #[test]
    fn contrast_with_only_the_positive_is_zero() {
        let m = model(vec![1.0, 0.0, 0.0, 1.0, -1.0, 0.0], 2, vec![0.3, 0.2, 0.9], vec![1]);
        assert_eq!(contrast_value(&[0.6, 0.8], &[m], 1, 3), 0.0);
    }

    #[test]
    fn contrast_hand_case() {
        // v = z_s, v·z_neg = 0, φ = 0.5 for both: logits (2, 0).
        let m = model(vec![1.0, 0.0, 0.0, 1.0], 2, vec![0.5, 0.5], vec![0]);
        let got = contrast_value(&[1.0, 0.0], &[m], 2, 0);
        let want = -(2f64.exp() / (2f64.exp() + 1.0)).ln();
        assert!((got - want).abs() < 1e-12);
    }

    #[test]
    fn looser_positive_cluster_increases_loss() {
        let v = [0.8, 0.6, 0.0];
        let protos = vec![0.6, 0.8, 0.0, 0.0, 0.6, 0.8, 0.5, -0.5, std::f64::consts::FRAC_1_SQRT_2];
        let mut prev = 0.0;
        for phi in [0.05, 0.1, 0.2, 0.4, 0.8] {
            let m = model(protos.clone(), 3, vec![phi, 0.1, 0.1], vec![0]);
            let l = contrast_value(&v, &[m], 3, 1);
            assert!(l > prev, "phi {phi}: {l} <= {prev}");
            prev = l;
        }
    }

    #[test]
    fn sampling_draws_distinct_negatives() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..200 {
            let k = rng.gen_range(1..12);
            let pos = rng.gen_range(0..k);
            let r = rng.gen_range(1..15);
            let s = sample_prototypes(k, pos, r, &mut rng);
            assert_eq!(s[0], pos);
            assert_eq!(s.len(), r.min(k));
            let mut sorted = s.clone();
            sorted.sort();
            sorted.dedup();
            assert_eq!(sorted.len(), s.len());
            assert!(s.iter().all(|&j| j < k));
        }
    }

    fn frames(g: &mut Graph<f64>, data: &[f64], b: usize, d: usize) -> Vec<Var> {
        data.chunks(b * d)
            .map(|c| g.constant(Tensor::matrix(b, d, c.to_vec()).unwrap()))
            .collect()
    }

    #[test]
    fn protomae_reductions() {
        let target: Vec<f64> = (0..12).map(|i| i as f64 * 0.1).collect();
        let m = model(vec![1.0, 0.0, 0.0, 1.0], 2, vec![0.5, 0.5], vec![0]);
        let cfg = ContrastConfig {
            r: 2,
            lambda_contrast: 1.0,
        };

        // No clusterings and a perfect prediction.
        let mut g = Graph::new();
        let t = frames(&mut g, &target, 1, 3);
        let enc = g.constant(Tensor::matrix(1, 2, vec![1.0, 0.0]).unwrap());
        let l = protomae(&mut g, &t, &t, enc, &[0], &[], &cfg, 0).unwrap();
        assert_eq!(g.value(l.total).item().unwrap(), 0.0);

        // Zero weight leaves only the MAE.
        let mut g = Graph::new();
        let t = frames(&mut g, &target, 1, 3);
        let p = frames(&mut g, &[0.0; 12], 1, 3);
        let enc = g.constant(Tensor::matrix(1, 2, vec![1.0, 0.0]).unwrap());
        let zero_w = ContrastConfig {
            lambda_contrast: 0.0,
            ..cfg
        };
        let l = protomae(&mut g, &t, &p, enc, &[0], std::slice::from_ref(&m), &zero_w, 0).unwrap();
        assert_eq!(g.value(l.total), g.value(l.mae));

        // One sample: total is the sum of the independently computed terms.
        let l = protomae(&mut g, &t, &p, enc, &[0], std::slice::from_ref(&m), &cfg, 0).unwrap();
        let mae_alone: f64 = target.iter().map(|x| x.abs()).sum::<f64>() / 12.0;
        let contrast_alone = contrast_value(&[1.0, 0.0], &[m], 2, 0);
        let total = g.value(l.total).item().unwrap();
        assert!((total - (mae_alone + contrast_alone)).abs() < 1e-12);
    }

    #[test]
    fn contrast_is_near_log_r_for_random_directions() {
        let (c, k, r) = (128, 32, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let unit = |rng: &mut ChaCha8Rng| {
            let mut v: Vec<f64> = (0..c).map(|_| rand_distr::Distribution::sample(&rand_distr::StandardNormal, rng)).collect();
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.iter_mut().for_each(|x| *x /= n);
            v
        };
        let mut sum = 0.0;
        for draw in 0..1000 {
            let protos: Vec<f64> = (0..k).flat_map(|_| unit(&mut rng)).collect();
            let v = unit(&mut rng);
            let m = model(protos, c, vec![1.0; k], vec![draw % k]);
            sum += contrast_value(&v, &[m], r, draw as u64);
        }
        let mean = sum / 1000.0;
        assert!((mean - (r as f64).ln()).abs() < 0.3, "mean {mean}");
    }
}
