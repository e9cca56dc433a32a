//! Gold-label MLM loss, soft-label distillation loss against normalized top-k
//! teacher distributions, their λ-weighted combination and the λ schedule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::teacher::TopKPrediction;
use crate::vocab::TeacherId;

/// A teacher's stored top-k logits after softmax over those k entries only.
/// Every id outside `ids` has zero mass.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedTeacherDist {
    pub position: usize,
    pub ids: Vec<u32>,
    pub probs: Vec<f64>,
}

pub fn normalize_topk(p: &TopKPrediction) -> NormalizedTeacherDist {
    let logits: Vec<f64> = p.logits.iter().map(|&l| l as f64).collect();
    NormalizedTeacherDist {
        position: p.position,
        ids: p.ids.clone(),
        probs: softmax(&logits),
    }
}

pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|&z| (z - max).exp()).sum::<f64>().ln();
    logits.iter().map(|&z| z - lse).collect()
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

fn check_id(id: u32, width: usize) -> Result<usize> {
    if (id as usize) < width {
        Ok(id as usize)
    } else {
        Err(Error::IdOutOfRange { id, size: width })
    }
}

/// `−log softmax(logits)[gold]` for one position.
pub fn gold_term(logits: &[f64], gold: u32) -> Result<f64> {
    let g = check_id(gold, logits.len())?;
    Ok(-log_softmax(logits)[g])
}

/// `−Σ_j Q(j) · log softmax(logits)[j]` over the teacher's support.
pub fn kd_term(logits: &[f64], teacher: &NormalizedTeacherDist) -> Result<f64> {
    let ls = log_softmax(logits);
    let mut acc = 0.0;
    for (&id, &q) in teacher.ids.iter().zip(&teacher.probs) {
        let j = check_id(id, logits.len())?;
        if q > 0.0 {
            acc -= q * ls[j];
        }
    }
    Ok(acc)
}

/// Mean gold cross-entropy over masked positions.
pub fn l_mlm(logits: &[Vec<f64>], gold_ids: &[u32]) -> Result<f64> {
    if logits.is_empty() || logits.len() != gold_ids.len() {
        return Err(Error::invalid(
            "l_mlm needs one gold id per logit row and at least one row",
        ));
    }
    let mut sum = 0.0;
    for (row, &g) in logits.iter().zip(gold_ids) {
        sum += gold_term(row, g)?;
    }
    Ok(sum / logits.len() as f64)
}

/// Mean soft-label cross-entropy against one teacher over masked positions.
pub fn l_kd(logits: &[Vec<f64>], teacher: &[NormalizedTeacherDist]) -> Result<f64> {
    if logits.is_empty() || logits.len() != teacher.len() {
        return Err(Error::invalid(
            "l_kd needs one teacher distribution per logit row and at least one row",
        ));
    }
    let mut sum = 0.0;
    for (row, t) in logits.iter().zip(teacher) {
        sum += kd_term(row, t)?;
    }
    Ok(sum / logits.len() as f64)
}

/// Gradient of `−Σ_j t_j log softmax(z)_j` w.r.t. `z`, scaled by `weight` and
/// added into `out`. `target` is a sparse distribution summing to one.
pub fn add_cross_entropy_grad(logits: &[f64], target: &[(u32, f64)], weight: f64, out: &mut [f64]) {
    if weight == 0.0 {
        return;
    }
    let p = softmax(logits);
    let mass: f64 = target.iter().map(|t| t.1).sum();
    for (o, pj) in out.iter_mut().zip(&p) {
        *o += weight * mass * pj;
    }
    for &(id, t) in target {
        out[id as usize] -= weight * t;
    }
}

/// Per-language inputs to [`l_all`].
#[derive(Debug, Clone, PartialEq)]
pub struct LanguageLoss {
    pub language: String,
    pub l_mlm: f64,
    /// One entry per teacher of this language present in the batch.
    pub l_kd: Vec<(TeacherId, f64)>,
}

impl LanguageLoss {
    /// KD loss averaged uniformly over this language's teachers; zero when none.
    pub fn mean_kd(&self) -> f64 {
        if self.l_kd.is_empty() {
            0.0
        } else {
            self.l_kd.iter().map(|t| t.1).sum::<f64>() / self.l_kd.len() as f64
        }
    }
}

/// `mean over languages of λ·L_KD + (1−λ)·L_MLM`.
pub fn l_all(languages: &[LanguageLoss], lambda: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::invalid(format!("lambda must be in [0, 1], got {lambda}")));
    }
    if languages.is_empty() {
        return Err(Error::invalid("l_all over zero languages"));
    }
    let sum: f64 = languages
        .iter()
        .map(|l| lambda * l.mean_kd() + (1.0 - lambda) * l.l_mlm)
        .sum();
    Ok(sum / languages.len() as f64)
}

/// Linear anneal from 1 at step 0 to 0 at `total_steps`.
pub fn lambda_at(step: u64, total_steps: u64) -> Result<f64> {
    if total_steps == 0 || step > total_steps {
        return Err(Error::invalid(format!(
            "step {step} outside schedule of {total_steps} steps"
        )));
    }
    Ok(1.0 - step as f64 / total_steps as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case", tag = "kind", content = "value")]
pub enum LambdaSchedule {
    #[default]
    Linear,
    Constant(f64),
}

impl LambdaSchedule {
    pub fn at(&self, step: u64, total_steps: u64) -> Result<f64> {
        match *self {
            LambdaSchedule::Linear => lambda_at(step, total_steps),
            LambdaSchedule::Constant(l) if (0.0..=1.0).contains(&l) => Ok(l),
            LambdaSchedule::Constant(l) => Err(Error::invalid(format!("constant lambda {l} outside [0, 1]"))),
        }
    }
}

/// Losses for one optimization step.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LossBreakdown {
    /// `−log p(gold)` per masked position, batch order.
    pub gold_terms: Vec<f64>,
    /// `−Σ Q log p` per masked position and teacher, batch order.
    pub kd_terms: Vec<(TeacherId, f64)>,
    /// Mean over languages of per-language L_MLM.
    pub l_mlm: f64,
    /// Per-teacher KD loss averaged over the languages that teacher served in the batch.
    pub l_kd_per_teacher: Vec<(TeacherId, f64)>,
    /// Mean over languages of the teacher-averaged KD loss; the term λ multiplies.
    pub l_kd: f64,
    pub l_all: f64,
    pub lambda: f64,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dist(ids: &[u32], probs: &[f64]) -> NormalizedTeacherDist {
        NormalizedTeacherDist {
            position: 0,
            ids: ids.to_vec(),
            probs: probs.to_vec(),
        }
    }

    /// Logits whose softmax is exactly `probs` (up to rounding).
    fn logits_for(probs: &[f64]) -> Vec<f64> {
        probs.iter().map(|p| p.ln()).collect()
    }

    #[test]
    fn normalize_topk_cases() {
        let tk = |logits: &[f32]| TopKPrediction {
            position: 3,
            ids: (0..logits.len() as u32).collect(),
            logits: logits.to_vec(),
        };
        assert_eq!(normalize_topk(&tk(&[0.0, 0.0])).probs, vec![0.5, 0.5]);
        let p = normalize_topk(&tk(&[2.0, 0.0])).probs;
        assert!((p[0] - 0.8808).abs() < 1e-3 && (p[1] - 0.1192).abs() < 1e-3);
        let one = normalize_topk(&tk(&[-3.0]));
        assert_eq!(one.probs, vec![1.0]);
        assert_eq!(one.position, 3);
    }

    #[test]
    fn l_mlm_cases() {
        let row = logits_for(&[0.7, 0.2, 0.1]);
        assert!((l_mlm(&[row.clone()], &[0]).unwrap() - 0.3567).abs() < 1e-3);
        assert!(l_mlm(&[vec![0.0, -1e4, -1e4]], &[0]).unwrap().abs() < 1e-12);
        assert!((l_mlm(&[vec![0.0; 3]], &[2]).unwrap() - 3f64.ln()).abs() < 1e-12);
        assert!(matches!(l_mlm(&[row], &[3]), Err(Error::IdOutOfRange { .. })));
    }

    #[test]
    fn l_kd_cases() {
        let row = logits_for(&[0.7, 0.2, 0.1]);
        let onehot = dist(&[1], &[1.0]);
        assert_eq!(
            l_kd(&[row.clone()], &[onehot]).unwrap(),
            l_mlm(&[row.clone()], &[1]).unwrap()
        );
        let half = dist(&[0, 1], &[0.5, 0.5]);
        assert!((l_kd(&[row.clone()], &[half]).unwrap() - 0.9831).abs() < 1e-3);
        assert!(l_kd(&[row.clone()], &[dist(&[7], &[1.0])]).is_err());
        // zero-mass support entries contribute nothing even at -inf log prob
        let zero = dist(&[0, 1], &[1.0, 0.0]);
        assert_eq!(
            l_kd(&[vec![0.0, f64::NEG_INFINITY]], &[zero]).unwrap(),
            l_mlm(&[vec![0.0, f64::NEG_INFINITY]], &[0]).unwrap()
        );
    }

    #[test]
    fn l_all_cases() {
        let lang = |mlm: f64, kd: &[f64]| LanguageLoss {
            language: "x".into(),
            l_mlm: mlm,
            l_kd: kd.iter().enumerate().map(|(i, &k)| (TeacherId(i as u32), k)).collect(),
        };
        let langs = [lang(0.3567, &[0.9831]), lang(1.0, &[0.5, 0.7])];
        assert!((l_all(&langs, 0.0).unwrap() - (0.3567 + 1.0) / 2.0).abs() < 1e-12);
        assert!((l_all(&langs, 1.0).unwrap() - (0.9831 + 0.6) / 2.0).abs() < 1e-12);
        assert!((l_all(&langs[..1], 0.5).unwrap() - 0.6699).abs() < 1e-3);
        assert!(l_all(&langs, 1.5).is_err());
        assert!(l_all(&[], 0.5).is_err());
    }

    #[test]
    fn lambda_schedule() {
        assert_eq!(lambda_at(0, 10).unwrap(), 1.0);
        assert_eq!(lambda_at(10, 10).unwrap(), 0.0);
        assert_eq!(lambda_at(5, 10).unwrap(), 0.5);
        assert!(lambda_at(11, 10).is_err());
        assert!(lambda_at(0, 0).is_err());
        assert_eq!(LambdaSchedule::Constant(0.25).at(3, 5).unwrap(), 0.25);
        assert!(LambdaSchedule::Constant(2.0).at(3, 5).is_err());
    }

    #[test]
    fn grad_matches_softmax_minus_target() {
        let z = vec![0.3, -1.2, 2.0, 0.0];
        let mut g = vec![0.0; 4];
        add_cross_entropy_grad(&z, &[(2, 0.75), (0, 0.25)], 2.0, &mut g);
        let p = softmax(&z);
        let expect = [2.0 * (p[0] - 0.25), 2.0 * p[1], 2.0 * (p[2] - 0.75), 2.0 * p[3]];
        for (a, b) in g.iter().zip(expect) {
            assert!((a - b).abs() < 1e-15);
        }
    }
}
