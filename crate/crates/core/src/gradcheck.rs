//! Central finite-difference gradient oracle.

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Which coordinates of the inputs to probe.
#[derive(Clone, Copy, Debug)]
pub enum Probe {
    All,
    /// `count` coordinates drawn without replacement across all inputs.
    Sample { count: usize, seed: u64 },
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(input index, element index)` of the worst coordinate.
    pub worst: (usize, usize),
    pub probed: usize,
}

/// Max over elements of `|analytic − central difference| / max(1, |analytic|)`
/// for a scalar function of one tensor.
pub fn grad_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let report = grad_check_inputs(|t, v| f(t, v[0]), std::slice::from_ref(x), h, Probe::All)?;
    Ok(report.max_rel_error)
}

/// Finite-difference check of a scalar function of several tensors, all of
/// which are differentiated.
pub fn grad_check_inputs<F>(f: F, inputs: &[Tensor], h: f64, probe: Probe) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if h <= 0.0 {
        return Err(Error::Config("finite-difference step must be > 0".into()));
    }
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;
    let analytic: Vec<Tensor> = vars.iter().map(|&v| grads.wrt(&tape, v)).collect();
    drop(tape);

    let coords: Vec<(usize, usize)> = {
        let all: Vec<(usize, usize)> = inputs
            .iter()
            .enumerate()
            .flat_map(|(i, t)| (0..t.len()).map(move |j| (i, j)))
            .collect();
        match probe {
            Probe::All => all,
            Probe::Sample { count, seed } => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let mut picked: Vec<usize> = index::sample(&mut rng, all.len(), count.min(all.len())).into_vec();
                picked.sort_unstable();
                picked.into_iter().map(|k| all[k]).collect()
            }
        }
    };

    let eval = |perturbed: &[Tensor]| -> Result<f64> {
        let mut t = Tape::new();
        let vs: Vec<Var> = perturbed.iter().map(|p| t.constant(p.clone())).collect();
        let l = f(&mut t, &vs)?;
        t.value(l).item()
    };

    let mut work: Vec<Tensor> = inputs.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: (0, 0),
        probed: coords.len(),
    };
    for (i, j) in coords {
        let orig = work[i].data()[j];
        work[i].data_mut()[j] = orig + h;
        let up = eval(&work)?;
        work[i].data_mut()[j] = orig - h;
        let down = eval(&work)?;
        work[i].data_mut()[j] = orig;
        let numeric = (up - down) / (2.0 * h);
        let a = analytic[i].data()[j];
        let err = (a - numeric).abs() / a.abs().max(1.0);
        if err > report.max_rel_error || !err.is_finite() {
            report.max_rel_error = if err.is_finite() { err } else { f64::INFINITY };
            report.worst = (i, j);
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn linear_function_is_exact_on_dyadic_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let data: Vec<f64> = (0..24).map(|_| f64::from(rng.random_range(-64i32..64)) / 16.0).collect();
        let x = Tensor::new(&[2, 3, 4], data).unwrap();
        let err = grad_check(|t, v| Ok(t.sum(v)), &x, 2f64.powi(-16)).unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn linear_function_on_arbitrary_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::randn(&[2, 3, 4, 4], 1.0, &mut rng);
        let err = grad_check(|t, v| Ok(t.sum(v)), &x, 1e-5).unwrap();
        assert!(err < 1e-9, "{err}");
    }

    #[test]
    fn broken_backward_is_detected() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::randn(&[2, 3, 4, 4], 1.0, &mut rng);
        // y = x² but the rule claims dy/dx = x
        let err = grad_check(
            |t, v| {
                let val = t.value(v).map(|a| a * a);
                let y = t.custom(&[v], val, Box::new(|g, ins, _| vec![g_times(g, ins[0])]));
                Ok(t.sum(y))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err > 1e-2, "{err}");
    }

    fn g_times(g: &Tensor, x: &Tensor) -> Tensor {
        let gv = g.data();
        let data = x.data().iter().zip(gv).map(|(a, b)| a * b).collect();
        Tensor::new(x.dims(), data).unwrap()
    }

    #[test]
    fn sampled_probe_counts() {
        let x = Tensor::ones(&[10]);
        let y = Tensor::ones(&[5]);
        let r = grad_check_inputs(
            |t, v| {
                let a = t.sum(v[0]);
                let b = t.sum(v[1]);
                let s = t.add(a, b)?;
                Ok(s)
            },
            &[x, y],
            1e-5,
            Probe::Sample { count: 7, seed: 9 },
        )
        .unwrap();
        assert_eq!(r.probed, 7);
        assert!(r.max_rel_error < 1e-9);
    }
}
