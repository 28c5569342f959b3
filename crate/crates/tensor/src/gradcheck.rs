//! Central finite-difference checks of tape gradients (64-bit).
//!
//! The numeric side only ever runs forward passes, so it is independent of
//! every backward rule it checks.

use rand::seq::index::sample;
use rand::Rng;

use crate::error::Result;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Default step for central differences.
pub const FD_STEP: f64 = 1e-5;

/// One-sided slopes differing by more than this fraction of the tensor's
/// gradient scale suggest a non-differentiable point (a ReLU or clamp
/// boundary) inside `[x - h, x + h]`; the step then shrinks tenfold, up to
/// [`SHRINKS`] times. Smooth curvature contributes about `h |f''|`, and a
/// kink below the threshold moves the central difference by at most half of it.
pub const KINK_TOL: f64 = 1e-4;

pub const SHRINKS: usize = 2;

/// Outcome for one input tensor.
#[derive(Clone, Debug)]
pub struct InputCheck {
    pub name: String,
    pub coords: usize,
    /// Coordinates whose one-sided slopes still disagreed at the smallest
    /// step. These compare against whichever of the one-sided and central
    /// slopes is nearest, since one side of the stencil is kink-free.
    pub kinks: usize,
    /// `max |analytic - numeric| / max(max |analytic|, max |numeric|, 1e-7)`
    /// over the checked coordinates.
    pub rel_err: f64,
}

/// Compare analytic and numeric gradients of the scalar built by `build`
/// w.r.t. every entry of `inputs`. At most `max_coords` coordinates per input
/// are sampled.
pub fn check_gradients<R, F>(
    inputs: &[(String, Tensor<f64>)],
    build: F,
    h: f64,
    max_coords: usize,
    rng: &mut R,
) -> Result<Vec<InputCheck>>
where
    R: Rng + ?Sized,
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|(_, t)| tape.param(t.clone())).collect();
    let loss = build(&mut tape, &vars)?;
    let mut grads = tape.backward(loss)?;

    let eval = |values: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.constant(t.clone())).collect();
        let loss = build(&mut tape, &vars)?;
        Ok(tape.value(loss).item())
    };

    let mut values: Vec<Tensor<f64>> = inputs.iter().map(|(_, t)| t.clone()).collect();
    let base = eval(&values)?;
    let mut out = Vec::with_capacity(inputs.len());
    for (i, (name, t)) in inputs.iter().enumerate() {
        let analytic = grads.take(vars[i]).unwrap_or_else(|| Tensor::zeros(t.shape()));
        let n = t.numel();
        let coords: Vec<usize> = if n <= max_coords { (0..n).collect() } else { sample(rng, n, max_coords).into_vec() };
        let picked: Vec<f64> = coords.iter().map(|&c| analytic.data()[c]).collect();
        let kink_gap = KINK_TOL * picked.iter().fold(1e-7f64, |m, a| m.max(a.abs()));
        let mut rows = Vec::with_capacity(coords.len());
        let mut kinks = 0;
        for (&c, &a) in coords.iter().zip(&picked) {
            let orig = values[i].data()[c];
            let mut step = h;
            let mut row = None;
            for attempt in 0..=SHRINKS {
                values[i].data_mut()[c] = orig + step;
                let plus = eval(&values)?;
                values[i].data_mut()[c] = orig - step;
                let minus = eval(&values)?;
                values[i].data_mut()[c] = orig;
                let (fwd, bwd) = ((plus - base) / step, (base - minus) / step);
                let central = (plus - minus) / (2.0 * step);
                if (fwd - bwd).abs() <= kink_gap {
                    row = Some((central, (a - central).abs()));
                    break;
                }
                if attempt == SHRINKS {
                    kinks += 1;
                    let diff = (a - fwd).abs().min((a - bwd).abs()).min((a - central).abs());
                    row = Some((central, diff));
                }
                step /= 10.0;
            }
            rows.push(row.expect("at least one attempt"));
        }
        let scale = rows.iter().zip(&picked).fold(1e-7f64, |m, (&(n, _), a)| m.max(a.abs()).max(n.abs()));
        let max_diff = rows.iter().fold(0.0f64, |m, &(_, d)| m.max(d));
        out.push(InputCheck { name: name.clone(), coords: coords.len(), kinks, rel_err: max_diff / scale });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn relu_kink_inside_the_stencil_is_resolved_by_shrinking() {
        // 5e-6 from the boundary: straddled at h = 1e-4 and 1e-5, clean at 1e-6.
        let inputs = vec![("x".to_string(), Tensor::from_vec(&[2], vec![5e-6, -0.3]).unwrap())];
        let build = |t: &mut Tape<f64>, v: &[Var]| {
            let y = t.relu(v[0])?;
            t.sum(y)
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let r = check_gradients(&inputs, build, 1e-4, 8, &mut rng).unwrap();
        assert_eq!(r[0].kinks, 0);
        assert!(r[0].rel_err < 1e-8, "{}", r[0].rel_err);
    }

    #[test]
    fn kink_at_the_point_falls_back_to_one_sided_slope() {
        let inputs = vec![("x".to_string(), Tensor::from_vec(&[1], vec![0.0]).unwrap())];
        let build = |t: &mut Tape<f64>, v: &[Var]| {
            let y = t.relu(v[0])?;
            t.sum(y)
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let r = check_gradients(&inputs, build, 1e-4, 8, &mut rng).unwrap();
        assert_eq!(r[0].kinks, 1);
        assert!(r[0].rel_err < 1e-8);
    }
}
