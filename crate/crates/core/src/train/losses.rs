//! Loss components on plain values. The tape versions in
//! [`super::objective`] compute the same quantities with gradients.

use crate::error::{Error, Result};
use crate::model::tape::{covariance_penalty, moment_penalty, BCE_CLIP};
use crate::model::{squared_distance, Latent};

use super::LossWeights;

/// `sum_k w_k ||pred_k - target_k||^2`.
pub fn loss_mh(pred: &[Latent], targets: &[Latent], horizon_weights: &[f64]) -> Result<f64> {
    if pred.len() != targets.len() || pred.len() != horizon_weights.len() {
        return Err(Error::LengthMismatch(format!(
            "{} predictions, {} targets, {} horizon weights",
            pred.len(),
            targets.len(),
            horizon_weights.len()
        )));
    }
    Ok(pred
        .iter()
        .zip(targets)
        .zip(horizon_weights)
        .map(|((p, t), w)| w * squared_distance(&p.0, &t.0))
        .sum())
}

/// Reachability score with its label.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoredPair {
    pub score: f64,
    pub label: bool,
}

pub fn bce(score: f64, label: bool) -> f64 {
    let p = score.clamp(BCE_CLIP, 1.0 - BCE_CLIP);
    if label {
        -p.ln()
    } else {
        -(1.0 - p).ln()
    }
}

fn class_weight(w: &LossWeights, label: bool) -> f64 {
    if label {
        w.omega_pos
    } else {
        w.omega_neg
    }
}

/// Class-weighted mean BCE over encoded pairs plus `rho_pred` times the same
/// mean over predicted pairs (zero when there are none).
pub fn loss_reach(enc: &[ScoredPair], pred: &[ScoredPair], w: &LossWeights) -> Result<f64> {
    if enc.is_empty() {
        return Err(Error::Empty("reachability loss needs encoded pairs"));
    }
    let mean = |pairs: &[ScoredPair]| {
        pairs
            .iter()
            .map(|p| class_weight(w, p.label) * bce(p.score, p.label))
            .sum::<f64>()
            / pairs.len() as f64
    };
    let pred_term = if pred.is_empty() { 0.0 } else { mean(pred) };
    Ok(mean(enc) + w.rho_pred * pred_term)
}

/// Mean squared per-dimension batch mean plus mean squared deviation of the
/// per-dimension variance from one (population variance).
pub fn loss_reg(latents: &[Latent]) -> Result<f64> {
    if latents.len() < 2 {
        return Err(Error::Empty("regularizer needs a batch of at least two latents"));
    }
    let rows: Vec<&[f64]> = latents.iter().map(Latent::as_slice).collect();
    Ok(moment_penalty(&rows))
}

/// Mean squared off-diagonal entry of the batch covariance: penalises
/// latent dimensions that merely copy each other.
pub fn loss_cov(latents: &[Latent]) -> Result<f64> {
    if latents.len() < 2 {
        return Err(Error::Empty("regularizer needs a batch of at least two latents"));
    }
    let rows: Vec<&[f64]> = latents.iter().map(Latent::as_slice).collect();
    Ok(covariance_penalty(&rows))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::LN_2;

    fn lat(v: &[f64]) -> Latent {
        Latent(v.to_vec())
    }

    #[test]
    fn mh_zero_when_exact() {
        let z = vec![lat(&[1.0, 2.0]), lat(&[0.5, -1.0])];
        assert_eq!(loss_mh(&z, &z, &[0.5, 0.5]).unwrap(), 0.0);
    }

    #[test]
    fn mh_single_step() {
        let p = [lat(&[1.0, 1.0])];
        let t = [lat(&[0.0, 3.0])];
        assert_eq!(loss_mh(&p, &t, &[1.0]).unwrap(), 5.0);
    }

    #[test]
    fn mh_hand_case() {
        // squared errors 4 and 2 with weights (1, 0.5) -> 4 + 1 = 5
        let p = [lat(&[2.0, 0.0]), lat(&[1.0, 1.0])];
        let t = [lat(&[0.0, 0.0]), lat(&[0.0, 0.0])];
        assert_eq!(loss_mh(&p, &t, &[1.0, 0.5]).unwrap(), 5.0);
    }

    #[test]
    fn mh_length_mismatch() {
        let p = [lat(&[0.0])];
        assert!(loss_mh(&p, &[], &[1.0]).is_err());
        assert!(loss_mh(&p, &p, &[1.0, 1.0]).is_err());
    }

    #[test]
    fn reach_perfect_predictions() {
        let w = LossWeights::uniform(1);
        let enc = [
            ScoredPair {
                score: 1.0,
                label: true,
            },
            ScoredPair {
                score: 0.0,
                label: false,
            },
        ];
        let l = loss_reach(&enc, &enc, &w).unwrap();
        assert!(l < 1e-6 * (1.0 + w.rho_pred), "{l}");
    }

    #[test]
    fn reach_half_scores_give_ln2() {
        let w = LossWeights {
            rho_pred: 0.0,
            ..LossWeights::uniform(1)
        };
        let enc: Vec<_> = [true, false, true]
            .iter()
            .map(|&label| ScoredPair { score: 0.5, label })
            .collect();
        assert!((loss_reach(&enc, &[], &w).unwrap() - LN_2).abs() < 1e-15);
    }

    #[test]
    fn reach_hand_fixture() {
        let w = LossWeights {
            omega_pos: 2.0,
            omega_neg: 1.0,
            rho_pred: 0.5,
            ..LossWeights::uniform(1)
        };
        let enc = [
            ScoredPair { score: 0.9, label: true },
            ScoredPair { score: 0.2, label: false },
            ScoredPair { score: 0.6, label: false },
        ];
        let pred = [ScoredPair { score: 0.7, label: true }];
        // enc: (2*-ln 0.9 + -ln 0.8 + -ln 0.4) / 3 ; pred: 0.5 * 2 * -ln 0.7
        let expect = (2.0 * 0.105_360_515_657_826_3
            + 0.223_143_551_314_209_7
            + 0.916_290_731_874_155)
            / 3.0
            + 0.5 * 2.0 * 0.356_674_943_938_732_4;
        assert!((loss_reach(&enc, &pred, &w).unwrap() - expect).abs() < 1e-12);
    }

    #[test]
    fn reach_requires_encoded_pairs() {
        assert!(loss_reach(&[], &[], &LossWeights::uniform(1)).is_err());
    }

    #[test]
    fn reg_cases() {
        assert_eq!(loss_reg(&[lat(&[1.0, -1.0]), lat(&[-1.0, 1.0])]).unwrap(), 0.0);
        assert_eq!(loss_reg(&[lat(&[0.0; 3]), lat(&[0.0; 3])]).unwrap(), 1.0);
        // columns (1,3) and (2,0): means (2,1), variances (1,1) -> (4+1)/2 + 0
        let v = loss_reg(&[lat(&[1.0, 2.0]), lat(&[3.0, 0.0])]).unwrap();
        assert!((v - 2.5).abs() < 1e-15);
        assert!(loss_reg(&[lat(&[1.0])]).is_err());
    }

    #[test]
    fn cov_cases() {
        // columns (1,3) and (2,0) have covariance -1
        let v = loss_cov(&[lat(&[1.0, 2.0]), lat(&[3.0, 0.0])]).unwrap();
        assert!((v - 1.0).abs() < 1e-15);
        let iso = [
            lat(&[1.0, 1.0]),
            lat(&[1.0, -1.0]),
            lat(&[-1.0, 1.0]),
            lat(&[-1.0, -1.0]),
        ];
        assert_eq!(loss_cov(&iso).unwrap(), 0.0);
        assert_eq!(loss_reg(&iso).unwrap(), 0.0);
        assert!(loss_cov(&[lat(&[1.0, 0.0])]).is_err());
    }
}
