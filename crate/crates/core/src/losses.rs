//! Training objectives.
//!
//! Classification losses operate on per-frame log-probabilities `[3, N]`
//! and return gradients with respect to them; heads turn those into logit
//! gradients. Log-probabilities are floored at `ln(1e-12)` and the floor
//! blocks gradient flow.

use crate::backbone::Predictor;
use crate::data::{ClassId, LabelSequence, LogitSequence, N_CLASSES};
use crate::error::{Error, Result};
use crate::mae::Direction;
use crate::nn::{log_softmax_backward, log_softmax_cols, Mat, Scalar};

pub const PROB_FLOOR: f64 = 1e-12;

/// How the T-MSE gradient treats the previous frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TmseGrad {
    /// Previous-frame log-probability is a constant.
    Detached,
    /// Exact gradient of the loss value through both frames.
    Full,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossConfig {
    pub tau: f64,
    pub lambda: f64,
    pub beta: f64,
    pub tmse_grad: TmseGrad,
    /// Optional per-class weights on the cross-entropy term.
    pub class_weights: Option<[f64; N_CLASSES]>,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            tau: 4.0,
            lambda: 0.15,
            beta: 0.35,
            tmse_grad: TmseGrad::Detached,
            class_weights: None,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) {
            return Err(Error::config("loss.tau", "must be positive"));
        }
        if !(self.lambda >= 0.0) {
            return Err(Error::config("loss.lambda", "must be nonnegative"));
        }
        if !(self.beta >= 0.0) {
            return Err(Error::config("loss.beta", "must be nonnegative"));
        }
        if let Some(w) = self.class_weights {
            if w.iter().any(|&x| !(x >= 0.0)) {
                return Err(Error::config("loss.class_weights", "must be nonnegative"));
            }
        }
        Ok(())
    }
}

fn floor_ln() -> f64 {
    PROB_FLOOR.ln()
}

fn check_len(labels: &[ClassId], logp: &Mat<f64>) -> Result<()> {
    if logp.rows != N_CLASSES {
        return Err(Error::shape(format!("{N_CLASSES} class rows"), logp.rows.to_string()));
    }
    if labels.len() != logp.cols {
        return Err(Error::shape(format!("{} frames", labels.len()), format!("{} frames", logp.cols)));
    }
    if labels.is_empty() {
        return Err(Error::shape("N >= 1 frames", "0 frames"));
    }
    Ok(())
}

/// Cross-entropy `(1/N) * sum_t -w_{y_t} log p_{t,y_t}` and its gradient.
pub fn ce_logp(labels: &[ClassId], logp: &Mat<f64>, weights: Option<[f64; N_CLASSES]>) -> Result<(f64, Mat<f64>)> {
    check_len(labels, logp)?;
    let n = labels.len() as f64;
    let lo = floor_ln();
    let mut g = Mat::zeros(logp.rows, logp.cols);
    let mut loss = 0.0;
    for (t, y) in labels.iter().enumerate() {
        let c = y.index();
        let w = weights.map_or(1.0, |w| w[c]);
        let lp = logp.at(c, t);
        loss -= w * lp.max(lo);
        if lp > lo {
            *g.at_mut(c, t) = -w / n;
        }
    }
    Ok((loss / n, g))
}

/// Truncated MSE over adjacent-frame log-probability differences,
/// normalised by `N * C`.
pub fn tmse_logp(logp: &Mat<f64>, tau: f64, mode: TmseGrad) -> Result<(f64, Mat<f64>)> {
    let n = logp.cols;
    if n < 2 {
        return Err(Error::shape("N >= 2 frames for the smoothing loss", format!("{n} frames")));
    }
    let lo = floor_ln();
    let norm = (n * logp.rows) as f64;
    let mut g = Mat::zeros(logp.rows, n);
    let mut loss = 0.0;
    for c in 0..logp.rows {
        let row = logp.row(c);
        for t in 1..n {
            let (cur, prev) = (row[t].max(lo), row[t - 1].max(lo));
            let d = cur - prev;
            if d.abs() < tau {
                loss += d * d;
                let gd = 2.0 * d / norm;
                if row[t] > lo {
                    *g.at_mut(c, t) += gd;
                }
                if mode == TmseGrad::Full && row[t - 1] > lo {
                    *g.at_mut(c, t - 1) -= gd;
                }
            } else {
                loss += tau * tau;
            }
        }
    }
    Ok((loss / norm, g))
}

/// `ce + lambda * tmse`. A single-frame window has nothing to smooth and
/// contributes only the cross-entropy.
pub fn cls_logp(labels: &[ClassId], logp: &Mat<f64>, cfg: &LossConfig) -> Result<(f64, Mat<f64>)> {
    let (ce, mut g) = ce_logp(labels, logp, cfg.class_weights)?;
    if logp.cols < 2 || cfg.lambda == 0.0 {
        return Ok((ce, g));
    }
    let (tm, gt) = tmse_logp(logp, cfg.tau, cfg.tmse_grad)?;
    for (a, b) in g.data.iter_mut().zip(&gt.data) {
        *a += cfg.lambda * b;
    }
    Ok((ce + cfg.lambda * tm, g))
}

/// Classification loss from logits; returns the logit gradient in `T`.
pub fn cls_from_logits<T: Scalar>(labels: &[ClassId], logits: &Mat<T>, cfg: &LossConfig) -> Result<(f64, Mat<T>)> {
    let z = Mat::from_f64(logits.rows, logits.cols, &logits.to_f64());
    let logp = log_softmax_cols(&z);
    let (loss, g) = cls_logp(labels, &logp, cfg)?;
    let dz = log_softmax_backward(&logp, &g);
    Ok((loss, to_t(&dz)))
}

pub(crate) fn to_t<T: Scalar>(m: &Mat<f64>) -> Mat<T> {
    Mat::from_vec(m.rows, m.cols, m.data.iter().map(|&v| T::of(v)).collect())
}

/// Mean squared error over all elements, target held constant.
pub fn align<T: Scalar>(m_prime: &Mat<T>, m: &Mat<T>) -> Result<(f64, Mat<T>)> {
    if (m_prime.rows, m_prime.cols) != (m.rows, m.cols) {
        return Err(Error::shape(
            format!("{}x{}", m.rows, m.cols),
            format!("{}x{}", m_prime.rows, m_prime.cols),
        ));
    }
    let n = m.data.len() as f64;
    let mut loss = 0.0;
    let mut g = Mat::zeros(m.rows, m.cols);
    let scale = 2.0 / n;
    for ((gi, &a), &b) in g.data.iter_mut().zip(&m_prime.data).zip(&m.data) {
        let d = a.f64() - b.f64();
        loss += d * d;
        *gi = T::of(scale * d);
    }
    Ok((loss / n, g))
}

fn probs_to_logp(p: &LogitSequence) -> Result<Mat<f64>> {
    if !p.is_probability() {
        return Err(Error::validation("probabilities", "expected a probability sequence"));
    }
    let mut m = Mat::from_vec(N_CLASSES, p.n_frames(), p.values().to_vec());
    m.data.iter_mut().for_each(|v| *v = v.max(PROB_FLOOR).ln());
    Ok(m)
}

pub fn ce_loss(y: &LabelSequence, p: &LogitSequence) -> Result<f64> {
    Ok(ce_logp(&y.labels, &probs_to_logp(p)?, None)?.0)
}

pub fn tmse_loss(p: &LogitSequence, tau: f64) -> Result<f64> {
    Ok(tmse_logp(&probs_to_logp(p)?, tau, TmseGrad::Detached)?.0)
}

pub fn cls_loss(y: &LabelSequence, p: &LogitSequence, cfg: &LossConfig) -> Result<f64> {
    Ok(cls_logp(&y.labels, &probs_to_logp(p)?, cfg)?.0)
}

pub fn align_loss<T: Scalar>(m_prime: &Mat<T>, m: &Mat<T>) -> Result<f64> {
    Ok(align(m_prime, m)?.0)
}

/// Gradient pieces of one adaptation term.
pub struct AdaptationTerms<T> {
    pub align: f64,
    pub cls: f64,
    pub loss: f64,
    /// Gradient w.r.t. the reconstructed features.
    pub grad: Mat<T>,
}

/// `align(m', m) + beta * cls(y, predictor(m'))`. The predictor belongs to
/// the target modality and is not updated.
pub fn adaptation<T: Scalar>(
    m_prime: &Mat<T>,
    m_target: &Mat<T>,
    labels: &[ClassId],
    predictor: &Predictor<T>,
    cfg: &LossConfig,
) -> Result<AdaptationTerms<T>> {
    adaptation_with_grad(m_prime, m_target, labels, predictor, cfg, None)
}

/// As [`adaptation`], optionally accumulating the predictor's own gradient
/// (end-to-end training).
pub fn adaptation_with_grad<T: Scalar>(
    m_prime: &Mat<T>,
    m_target: &Mat<T>,
    labels: &[ClassId],
    predictor: &Predictor<T>,
    cfg: &LossConfig,
    predictor_grad: Option<&mut Predictor<T>>,
) -> Result<AdaptationTerms<T>> {
    let (al, mut grad) = align(m_prime, m_target)?;
    let mut cls = 0.0;
    if cfg.beta != 0.0 {
        let (z, cache) = predictor.logits(m_prime)?;
        let (c, mut dz) = cls_from_logits(labels, &z, cfg)?;
        cls = c;
        let b = T::of(cfg.beta);
        dz.data.iter_mut().for_each(|v| *v *= b);
        grad.add_assign(&predictor.backward(&cache, &dz, predictor_grad));
    }
    Ok(AdaptationTerms {
        align: al,
        cls,
        loss: al + cfg.beta * cls,
        grad,
    })
}

pub fn adaptation_loss<T: Scalar>(
    direction: Direction,
    m_prime: &Mat<T>,
    m_target: &Mat<T>,
    y: &LabelSequence,
    predictor: &Predictor<T>,
    cfg: &LossConfig,
) -> Result<f64> {
    if m_prime.rows != predictor.in_channels() {
        return Err(Error::shape(
            format!("{} features for the {} predictor", predictor.in_channels(), direction.target()),
            m_prime.rows.to_string(),
        ));
    }
    Ok(adaptation(m_prime, m_target, &y.labels, predictor, cfg)?.loss)
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossComponents {
    pub cls_fuse: f64,
    pub r2i: f64,
    pub i2r: f64,
}

pub fn total_loss(c: &LossComponents) -> f64 {
    c.cls_fuse + c.r2i + c.i2r
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::{input_fd, rel_error};
    use crate::nn::Tensor;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn probs(cols: &[[f64; 3]]) -> LogitSequence {
        LogitSequence::from_columns(cols).unwrap()
    }

    fn labels(ids: &[usize]) -> LabelSequence {
        LabelSequence::new(ids.iter().map(|&i| ClassId::from_index(i).unwrap()).collect(), 25.0)
    }

    fn rand_logits(n: usize, seed: u64) -> Mat<f64> {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        Mat::from_vec(3, n, Tensor::<f64>::uniform(&[3 * n], 3.0, &mut r).data)
    }

    #[test]
    fn ce_closed_forms() {
        let u = probs(&[[1.0 / 3.0; 3]; 5]);
        assert!((ce_loss(&labels(&[0, 1, 2, 2, 0]), &u).unwrap() - 3f64.ln()).abs() < 1e-12);
        let p = probs(&[[0.5, 0.25, 0.25], [0.5, 0.25, 0.25]]);
        let l = ce_loss(&labels(&[0, 1]), &p).unwrap();
        assert!((l - 1.5 * 2f64.ln()).abs() < 1e-12);
        let perfect = probs(&[[0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]);
        assert_eq!(ce_loss(&labels(&[1, 2]), &perfect).unwrap(), 0.0);
        assert!(ce_loss(&labels(&[1]), &perfect).is_err());
    }

    #[test]
    fn tmse_hand_cases() {
        let e = std::f64::consts::E;
        // only class 0 moves, so the sum has a single nonzero term
        let pair = |a: f64, b: f64| -> f64 {
            let lp = Mat::from_vec(3, 2, vec![a.ln(), b.ln(), 0.0, 0.0, 0.0, 0.0]);
            tmse_logp(&lp, 4.0, TmseGrad::Detached).unwrap().0 * 6.0
        };
        assert!((pair(e.powi(-1), e.powi(-3)) - 4.0).abs() < 1e-9);
        assert!((pair(e.powi(-1), e.powi(-6)) - 16.0).abs() < 1e-9);
        let constant = probs(&[[0.2, 0.3, 0.5]; 4]);
        assert_eq!(tmse_loss(&constant, 4.0).unwrap(), 0.0);
        assert!(tmse_loss(&probs(&[[0.2, 0.3, 0.5]]), 4.0).is_err());
    }

    #[test]
    fn tmse_without_clip_is_plain_mse_of_log_differences() {
        let lp = log_softmax_cols(&rand_logits(6, 3));
        let mut direct = 0.0;
        for c in 0..3 {
            for t in 1..6 {
                direct += (lp.at(c, t) - lp.at(c, t - 1)).powi(2);
            }
        }
        let l = tmse_logp(&lp, f64::INFINITY, TmseGrad::Detached).unwrap().0;
        assert!((l - direct / 18.0).abs() < 1e-12);
    }

    #[test]
    fn cls_recomposes() {
        let lp = log_softmax_cols(&rand_logits(9, 4));
        let y: Vec<ClassId> = (0..9).map(|t| ClassId::from_index(t % 3).unwrap()).collect();
        let cfg = LossConfig::default();
        let ce = ce_logp(&y, &lp, None).unwrap().0;
        let tm = tmse_logp(&lp, 4.0, TmseGrad::Detached).unwrap().0;
        let cls = cls_logp(&y, &lp, &cfg).unwrap().0;
        assert!((cls - (ce + 0.15 * tm)).abs() < 1e-14);
        let no_smooth = LossConfig { lambda: 0.0, ..Default::default() };
        assert_eq!(cls_logp(&y, &lp, &no_smooth).unwrap().0, ce);
    }

    #[test]
    fn align_cases() {
        let a = Mat::from_vec(2, 2, vec![1.0, 2.0, 3.0, 4.0]);
        let b = Mat::from_vec(2, 2, vec![1.0, 2.0, 3.0, 6.0]);
        assert_eq!(align_loss(&a, &b).unwrap(), 1.0);
        let shifted = Mat::from_vec(2, 2, a.data.iter().map(|v| v + 1.0).collect());
        assert_eq!(align_loss(&shifted, &a).unwrap(), 1.0);
        assert_eq!(align_loss(&a, &a).unwrap(), 0.0);
    }

    #[test]
    fn cls_logit_gradient_matches_finite_differences_in_full_mode() {
        let z = rand_logits(7, 5);
        let y: Vec<ClassId> = [0, 0, 1, 1, 1, 2, 0].iter().map(|&i| ClassId::from_index(i).unwrap()).collect();
        let cfg = LossConfig { tmse_grad: TmseGrad::Full, ..Default::default() };
        let (_, dz) = cls_from_logits(&y, &z, &cfg).unwrap();
        let fd = input_fd(&z.data, 1e-6, |v| cls_from_logits(&y, &Mat::from_vec(3, 7, v.to_vec()), &cfg).unwrap().0);
        assert!(rel_error(&dz.data, &fd) < 1e-6);
    }

    #[test]
    fn detached_gradient_matches_frozen_previous_frame_surrogate() {
        // d/dz_t of sum_t (lp_t - stopgrad(lp_{t-1}))^2 equals the FD of a
        // surrogate where the previous frame is read from a fixed copy
        let z = rand_logits(5, 6);
        let (_, g) = tmse_logp(&log_softmax_cols(&z), 4.0, TmseGrad::Detached).unwrap();
        let dz = log_softmax_backward(&log_softmax_cols(&z), &g);
        let frozen = log_softmax_cols(&z);
        let surrogate = |v: &[f64]| {
            let lp = log_softmax_cols(&Mat::from_vec(3, 5, v.to_vec()));
            let mut s = 0.0;
            for c in 0..3 {
                for t in 1..5 {
                    let d = lp.at(c, t) - frozen.at(c, t - 1);
                    s += if d.abs() < 4.0 { d * d } else { 16.0 };
                }
            }
            s / 15.0
        };
        let fd = input_fd(&z.data, 1e-6, surrogate);
        assert!(rel_error(&dz.data, &fd) < 1e-6);
    }

    #[test]
    fn align_gradient_matches_finite_differences() {
        let a = rand_logits(4, 7);
        let b = rand_logits(4, 8);
        let (_, g) = align(&a, &b).unwrap();
        let fd = input_fd(&a.data, 1e-6, |v| align(&Mat::from_vec(3, 4, v.to_vec()), &b).unwrap().0);
        assert!(rel_error(&g.data, &fd) < 1e-8);
    }

    #[test]
    fn adaptation_recomposes_and_degenerates() {
        let mut r = ChaCha8Rng::seed_from_u64(9);
        let pred = Predictor::<f64>::new(4, &mut r);
        let m = Mat::from_vec(4, 6, Tensor::<f64>::uniform(&[24], 1.0, &mut r).data);
        let mp = Mat::from_vec(4, 6, Tensor::<f64>::uniform(&[24], 1.0, &mut r).data);
        let y = labels(&[0, 1, 1, 2, 2, 0]);
        let cfg = LossConfig::default();
        let l = adaptation_loss(Direction::R2I, &mp, &m, &y, &pred, &cfg).unwrap();
        let probs = crate::nn::softmax_cols(&pred.logits(&mp).unwrap().0);
        let p = LogitSequence::new(6, probs.data.clone(), true).unwrap();
        let expected = align_loss(&mp, &m).unwrap() + 0.35 * cls_loss(&y, &p, &cfg).unwrap();
        assert!((l - expected).abs() < 1e-12);
        let no_cls = LossConfig { beta: 0.0, ..Default::default() };
        assert_eq!(
            adaptation_loss(Direction::R2I, &mp, &m, &y, &pred, &no_cls).unwrap(),
            align_loss(&mp, &m).unwrap()
        );
    }

    #[test]
    fn adaptation_gradient_matches_finite_differences() {
        let mut r = ChaCha8Rng::seed_from_u64(10);
        let pred = Predictor::<f64>::new(4, &mut r);
        let m = Mat::from_vec(4, 6, Tensor::<f64>::uniform(&[24], 1.0, &mut r).data);
        let mp = Mat::from_vec(4, 6, Tensor::<f64>::uniform(&[24], 1.0, &mut r).data);
        let y: Vec<ClassId> = [0, 1, 1, 2, 2, 0].iter().map(|&i| ClassId::from_index(i).unwrap()).collect();
        let cfg = LossConfig { tmse_grad: TmseGrad::Full, ..Default::default() };
        let g = adaptation(&mp, &m, &y, &pred, &cfg).unwrap().grad;
        let fd = input_fd(&mp.data, 1e-6, |v| {
            adaptation(&Mat::from_vec(4, 6, v.to_vec()), &m, &y, &pred, &cfg).unwrap().loss
        });
        assert!(rel_error(&g.data, &fd) < 1e-6);
    }

    #[test]
    fn total_is_sum() {
        assert_eq!(total_loss(&LossComponents::default()), 0.0);
        let c = LossComponents { cls_fuse: 0.7, r2i: 0.125, i2r: 2.5 };
        assert_eq!(total_loss(&c), 0.7 + 0.125 + 2.5);
    }

    proptest! {
        #[test]
        fn tmse_is_bounded_and_losses_nonnegative(vals in prop::collection::vec(-30.0f64..30.0, 12)) {
            let lp = log_softmax_cols(&Mat::from_vec(3, 4, vals));
            let (tm, _) = tmse_logp(&lp, 4.0, TmseGrad::Detached).unwrap();
            prop_assert!((0.0..=16.0 + 1e-12).contains(&tm));
            let y = vec![ClassId::Other; 4];
            prop_assert!(ce_logp(&y, &lp, None).unwrap().0 >= 0.0);
        }
    }
}
