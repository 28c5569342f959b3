//! Detection, reliability and total objectives.

use pfs_tensor::{FocalParams, Scalar, Tape, Tensor, TensorError, Var};
use serde::{Deserialize, Serialize};

use crate::config::LossConfig;
use crate::error::Result;
use crate::host::{DetectionTargets, HeadOutput};

/// Gaussian-focal heatmap loss normalised by peak count plus masked L1 on the
/// regression channels at peak cells.
pub fn detection_loss<T: Scalar>(tape: &mut Tape<T>, out: &HeadOutput, targets: &DetectionTargets, cfg: &LossConfig) -> Result<Var> {
    let shape = tape.shape(out.heat).to_vec();
    let heat_t = Tensor::from_vec(&shape, targets.heat.iter().map(|&v| T::lit(v as f64)).collect())?;
    let focal = tape.focal_loss(
        out.heat,
        heat_t,
        FocalParams { alpha: T::lit(cfg.focal_alpha), beta: T::lit(cfg.focal_beta), eps: T::lit(cfg.log_eps) },
    )?;
    let reg_shape = tape.shape(out.reg).to_vec();
    let reg_t = Tensor::from_vec(&reg_shape, targets.reg.iter().map(|&v| T::lit(v as f64)).collect())?;
    let l1 = tape.masked_l1(out.reg, reg_t, targets.reg_mask.clone())?;
    let l1 = tape.affine(l1, T::lit(cfg.reg_weight), T::zero())?;
    Ok(tape.add(focal, l1)?)
}

/// Mean binary cross-entropy with the logs clamped at `eps`.
pub fn bce<T: Scalar>(tape: &mut Tape<T>, p: Var, target: Tensor<T>, eps: f64) -> Result<Var> {
    Ok(tape.bce(p, target, T::lit(eps))?)
}

/// One sample's reliability term: `BCE(R, T)` when the sample is corrupted,
/// `alpha_anchor * BCE(R, 1)` when clean. Exactly one flag must be set.
pub fn reliability_loss<T: Scalar>(
    tape: &mut Tape<T>,
    r: Var,
    target: &Tensor<T>,
    is_corr: bool,
    is_clean: bool,
    alpha_anchor: f64,
    eps: f64,
) -> Result<Var> {
    if is_corr == is_clean {
        return Err(TensorError::Usage(format!("reliability flags must partition samples (corr={is_corr}, clean={is_clean})")).into());
    }
    if is_corr {
        bce(tape, r, target.clone(), eps)
    } else {
        let ones = Tensor::ones(tape.shape(r));
        let b = bce(tape, r, ones, eps)?;
        Ok(tape.affine(b, T::lit(alpha_anchor), T::zero())?)
    }
}

/// `l_det + lambda_rel * l_rel`.
pub fn total_loss<T: Scalar>(tape: &mut Tape<T>, l_det: Var, l_rel: Var, lambda_rel: f64) -> Result<Var> {
    if lambda_rel < 0.0 {
        return Err(crate::error::PfsError::Config(format!("lambda_rel {lambda_rel} is negative")));
    }
    let w = tape.affine(l_rel, T::lit(lambda_rel), T::zero())?;
    Ok(tape.add(l_det, w)?)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_det: f64,
    pub l_rel: f64,
    pub l_total: f64,
    pub is_corr: bool,
    pub is_clean: bool,
}

#[cfg(test)]
mod tests {
    use super::*;
    use pfs_tensor::sigmoid;

    #[test]
    fn bce_anchor_values() {
        let mut t = Tape::<f64>::new();
        let p = t.constant(Tensor::full(&[4], 0.5));
        let v = bce(&mut t, p, Tensor::full(&[4], 0.5), 1e-6).unwrap();
        assert!((t.value(v).item() - std::f64::consts::LN_2).abs() < 1e-12);
        let q = t.constant(Tensor::full(&[4], sigmoid(4.0)));
        let v = bce(&mut t, q, Tensor::ones(&[4]), 1e-6).unwrap();
        assert!((t.value(v).item() - 0.01815).abs() < 1e-5);
    }

    #[test]
    fn reliability_branches() {
        let mut t = Tape::<f64>::new();
        let target = Tensor::full(&[1, 3, 3], 0.3);
        let r = t.constant(Tensor::full(&[1, 3, 3], 1.0 - 1e-6));
        let clean = reliability_loss(&mut t, r, &target, false, true, 0.2, 1e-6).unwrap();
        assert!(t.value(clean).item() < 1e-6);

        let r = t.constant(target.clone());
        let corr = reliability_loss(&mut t, r, &target, true, false, 0.2, 1e-6).unwrap();
        let h = -(0.3f64 * 0.3f64.ln() + 0.7 * 0.7f64.ln());
        assert!((t.value(corr).item() - h).abs() < 1e-12);

        let r = t.constant(Tensor::full(&[1, 3, 3], sigmoid(4.0)));
        let fresh = reliability_loss(&mut t, r, &target, false, true, 0.2, 1e-6).unwrap();
        assert!((t.value(fresh).item() - 0.00363).abs() < 1e-5);

        assert!(reliability_loss(&mut t, r, &target, true, true, 0.2, 1e-6).is_err());
        assert!(reliability_loss(&mut t, r, &target, false, false, 0.2, 1e-6).is_err());
    }

    #[test]
    fn total_combines_terms() {
        let mut t = Tape::<f64>::new();
        let a = t.constant(Tensor::scalar(0.7));
        let b = t.constant(Tensor::scalar(0.3));
        let s = total_loss(&mut t, a, b, 1.0).unwrap();
        assert!((t.value(s).item() - 1.0).abs() < 1e-12);
        let s0 = total_loss(&mut t, a, b, 0.0).unwrap();
        assert_eq!(t.value(s0).item(), 0.7);
    }
}
