//! Expected success and the variance-bounded score.

use serde::{Deserialize, Serialize};

use crate::error::{Result, VbError};
use crate::gain::{GainMode, GainVector};
use crate::intent::IntentDistribution;

pub const DEFAULT_ALPHA: f64 = 0.5;

pub const ALPHA_GRID: [f64; 5] = [0.0, 0.25, 0.5, 0.75, 1.0];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreBreakdown {
    pub es: f64,
    pub variance: f64,
    pub alpha: f64,
    /// `es - alpha * sqrt(variance)`; negative for small `es` and large `alpha`.
    pub vb_raw: f64,
    /// `vb_raw` clamped to [0, 1].
    pub vb: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gain_mode: Option<GainMode>,
}

impl ScoreBreakdown {
    pub fn with_context(mut self, k: usize, gain_mode: GainMode) -> Self {
        self.k = Some(k);
        self.gain_mode = Some(gain_mode);
        self
    }

    pub fn clamped(&self) -> bool {
        self.vb_raw < 0.0
    }
}

/// `sum_i pi_i * g_i`. Gains must follow the distribution's entity order.
pub fn expected_success(dist: &IntentDistribution, gains: &GainVector) -> Result<f64> {
    if dist.len() != gains.len() {
        return Err(VbError::invalid(format!(
            "distribution has {} intents but gain vector has {}",
            dist.len(),
            gains.len()
        )));
    }
    let mut es = 0.0;
    let mut mass = 0.0;
    for (entry, g) in dist.entries.iter().zip(&gains.per_intent) {
        if entry.entity.entity_id != g.entity_id {
            return Err(VbError::invalid(format!(
                "gain for {} misaligned with intent {}",
                g.entity_id, entry.entity.entity_id
            )));
        }
        es += entry.probability * g.gain;
        mass += entry.probability;
    }
    if mass <= 0.0 {
        return Err(VbError::invalid("intent distribution has no mass"));
    }
    // Dividing by the accumulated mass makes full coverage exactly 1.0
    // instead of 1 - ulp, which would otherwise leak a ~1e-8 spread into VB.
    Ok((es / mass).clamp(0.0, 1.0))
}

fn check_es(es: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&es) {
        return Err(VbError::invalid(format!("expected success must be in [0,1], got {es}")));
    }
    Ok(())
}

/// Variance of the Bernoulli success indicator with mean `es`.
pub fn bernoulli_variance(es: f64) -> Result<f64> {
    check_es(es)?;
    Ok(es * (1.0 - es))
}

pub fn vb_raw(es: f64, alpha: f64) -> f64 {
    es - alpha * (es * (1.0 - es)).sqrt()
}

pub fn vb_score(es: f64, alpha: f64) -> Result<ScoreBreakdown> {
    check_es(es)?;
    if !alpha.is_finite() || alpha < 0.0 {
        return Err(VbError::invalid(format!("alpha must be finite and >= 0, got {alpha}")));
    }
    let variance = es * (1.0 - es);
    let raw = vb_raw(es, alpha);
    Ok(ScoreBreakdown {
        es,
        variance,
        alpha,
        vb_raw: raw,
        vb: raw.clamp(0.0, 1.0),
        k: None,
        gain_mode: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gain::IntentGain;
    use crate::intent::{CandidateEntity, Provenance};
    use approx::assert_abs_diff_eq;

    fn pair(masses: &[f64], gains: &[f64]) -> (IntentDistribution, GainVector) {
        let ids: Vec<String> = (0..masses.len()).map(|i| format!("e{i}")).collect();
        let dist = IntentDistribution::from_masses(
            ids.iter().map(|id| CandidateEntity::new(id.clone(), "")).collect(),
            masses,
            Provenance::Softmax,
        )
        .unwrap();
        let gains = GainVector {
            per_intent: ids
                .into_iter()
                .zip(gains)
                .map(|(entity_id, &gain)| IntentGain { entity_id, gain })
                .collect(),
            mode: GainMode::Binary,
        };
        (dist, gains)
    }

    #[test]
    fn es_examples() {
        let (d, g) = pair(&[0.5, 0.5], &[1.0, 0.0]);
        assert_eq!(expected_success(&d, &g).unwrap(), 0.5);

        let e = std::f64::consts::E;
        let z = e * e + e + 1.0;
        let (d, g) = pair(&[e * e / z, e / z, 1.0 / z], &[1.0, 0.0, 1.0]);
        assert_abs_diff_eq!(expected_success(&d, &g).unwrap(), 0.75527, epsilon = 1e-5);

        let (d, g) = pair(&[0.2, 0.3, 0.5], &[1.0, 1.0, 1.0]);
        assert_eq!(expected_success(&d, &g).unwrap(), 1.0);
    }

    #[test]
    fn es_rejects_misalignment() {
        let (d, mut g) = pair(&[0.5, 0.5], &[1.0, 0.0]);
        g.per_intent.swap(0, 1);
        assert!(expected_success(&d, &g).is_err());
        g.per_intent.pop();
        assert!(expected_success(&d, &g).is_err());
    }

    #[test]
    fn variance_examples() {
        assert_abs_diff_eq!(bernoulli_variance(0.833).unwrap(), 0.139, epsilon = 1e-3);
        assert_abs_diff_eq!(bernoulli_variance(0.867).unwrap(), 0.115, epsilon = 1e-3);
        assert_eq!(bernoulli_variance(0.0).unwrap(), 0.0);
        assert_eq!(bernoulli_variance(1.0).unwrap(), 0.0);
        assert!(bernoulli_variance(1.2).is_err());
        assert!(bernoulli_variance(-0.01).is_err());
    }

    #[test]
    fn vb_examples() {
        for alpha in [0.0, 0.5, 1.0, 3.0] {
            assert_eq!(vb_score(1.0, alpha).unwrap().vb, 1.0);
        }
        assert_eq!(vb_score(0.37, 0.0).unwrap().vb, 0.37);

        let b = vb_score(0.833, 0.5).unwrap();
        let hand = 0.833 - 0.5 * (0.833f64 * 0.167).sqrt();
        assert_abs_diff_eq!(b.vb_raw, hand, epsilon = 1e-12);
        assert_abs_diff_eq!(b.vb_raw, 0.64661, epsilon = 1e-4);

        let neg = vb_score(0.1, 1.0).unwrap();
        assert_abs_diff_eq!(neg.vb_raw, -0.2, epsilon = 1e-12);
        assert_eq!(neg.vb, 0.0);
        assert!(neg.clamped());

        assert!(vb_score(0.5, -0.1).is_err());
        assert!(vb_score(1.5, 0.5).is_err());
    }
}
