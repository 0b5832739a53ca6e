//! Learnable Sobel–Feldman edge block.
//!
//! Four 3×3 zero-sum templates (vertical, horizontal and two diagonals) whose
//! classic weight-2 entries are replaced by a learnable `α`. At `α = 2` the
//! vertical and horizontal kernels are the textbook Sobel operator.

use crate::autodiff::{PadMode, Tape, Var};
use crate::error::{Error, Result};
use crate::params::{Bound, ParamId, ParamStore};
use crate::tensor::Tensor;

/// Initial `α`, the classic Sobel weight.
pub const DEFAULT_ALPHA: f64 = 2.0;

/// Kernels per input channel.
pub const EDGE_CHANNELS: usize = 4;

/// `(constant part, coefficient of α)` for each of the four templates.
const TEMPLATES: [([f64; 9], [f64; 9]); EDGE_CHANNELS] = [
    // vertical: [[-1,0,1],[-α,0,α],[-1,0,1]]
    (
        [-1.0, 0.0, 1.0, 0.0, 0.0, 0.0, -1.0, 0.0, 1.0],
        [0.0, 0.0, 0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0],
    ),
    // horizontal: [[-1,-α,-1],[0,0,0],[1,α,1]]
    (
        [-1.0, 0.0, -1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 1.0],
        [0.0, -1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0],
    ),
    // main diagonal: [[-α,-1,0],[-1,0,1],[0,1,α]]
    (
        [0.0, -1.0, 0.0, -1.0, 0.0, 1.0, 0.0, 1.0, 0.0],
        [-1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0],
    ),
    // anti diagonal: [[0,1,α],[-1,0,1],[-α,-1,0]]
    (
        [0.0, 1.0, 0.0, -1.0, 0.0, 1.0, 0.0, -1.0, 0.0],
        [0.0, 0.0, 1.0, 0.0, 0.0, 0.0, -1.0, 0.0, 0.0],
    ),
];

/// The four oriented kernels with their learnable `α`.
#[derive(Clone, Debug)]
pub struct SobelKernelSet {
    alpha: ParamId,
    per_kernel: bool,
}

impl SobelKernelSet {
    /// Registers `α` under `name`. With `per_kernel` each template gets its
    /// own `α` (shape `[4]`), otherwise one scalar is shared.
    pub fn new(store: &mut ParamStore, name: &str, per_kernel: bool, init: f64) -> Result<Self> {
        let n = if per_kernel { EDGE_CHANNELS } else { 1 };
        let alpha = store.add(name, Tensor::full(&[n], init))?;
        Ok(Self { alpha, per_kernel })
    }

    pub fn alpha(&self) -> ParamId {
        self.alpha
    }

    /// Materializes the kernels as a `4×1×3×3` tensor, differentiable in `α`.
    pub fn build_kernels(&self, tape: &mut Tape, params: &Bound) -> Result<Var> {
        let (base, mask) = template_tensors();
        let alpha = params.var(self.alpha);
        let base = tape.constant(base);
        let mask = tape.constant(mask);
        let scaled = if self.per_kernel {
            let parts = (0..EDGE_CHANNELS)
                .map(|k| {
                    let m = tape.narrow(mask, 0, k, 1)?;
                    let a = tape.narrow(alpha, 0, k, 1)?;
                    tape.mul_scalar(m, a)
                })
                .collect::<Result<Vec<_>>>()?;
            tape.concat(&parts, 0)?
        } else {
            tape.mul_scalar(mask, alpha)?
        };
        tape.add(base, scaled)
    }

    /// Raw oriented responses (before the activation), `B×4×H×W`. Borders
    /// are reflect-padded so flat regions respond with zero everywhere.
    pub fn response(&self, tape: &mut Tape, params: &Bound, image: Var) -> Result<Var> {
        let (_, c, _, _) = tape.value(image).bchw("edge_forward")?;
        if c != 1 {
            return Err(Error::dim("edge_forward", "C", format!("expected 1 input channel, got {c}")));
        }
        let k = self.build_kernels(tape, params)?;
        let padded = tape.pad2d(image, 1, PadMode::Reflect)?;
        tape.conv2d(padded, k, None, 1, 0)
    }

    /// `S(I) = GeLU(sobel(I))`, shape-preserving.
    pub fn forward(&self, tape: &mut Tape, params: &Bound, image: Var) -> Result<Var> {
        let r = self.response(tape, params, image)?;
        Ok(tape.gelu(r))
    }
}

fn template_tensors() -> (Tensor, Tensor) {
    let base: Vec<f64> = TEMPLATES.iter().flat_map(|(b, _)| b.iter().copied()).collect();
    let mask: Vec<f64> = TEMPLATES.iter().flat_map(|(_, m)| m.iter().copied()).collect();
    let dims = [EDGE_CHANNELS, 1, 3, 3];
    (Tensor::from_parts(dims.to_vec(), base), Tensor::from_parts(dims.to_vec(), mask))
}

/// Plain (non-tape) kernels at a given `α`, row-major 3×3 each.
pub fn kernels_at(alpha: f64) -> [[f64; 9]; EDGE_CHANNELS] {
    let mut out = [[0.0; 9]; EDGE_CHANNELS];
    for (k, (b, m)) in TEMPLATES.iter().enumerate() {
        for i in 0..9 {
            out[k][i] = b[i] + alpha * m[i];
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::grad_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rot90(k: &[f64; 9]) -> [f64; 9] {
        // clockwise: new[i][j] = old[2-j][i]
        let mut r = [0.0; 9];
        for i in 0..3 {
            for j in 0..3 {
                r[i * 3 + j] = k[(2 - j) * 3 + i];
            }
        }
        r
    }

    fn transpose(k: &[f64; 9]) -> [f64; 9] {
        let mut r = [0.0; 9];
        for i in 0..3 {
            for j in 0..3 {
                r[i * 3 + j] = k[j * 3 + i];
            }
        }
        r
    }

    fn neg(k: [f64; 9]) -> [f64; 9] {
        k.map(|v| -v)
    }

    #[test]
    fn classic_sobel_at_two() {
        let k = kernels_at(2.0);
        assert_eq!(k[0], [-1.0, 0.0, 1.0, -2.0, 0.0, 2.0, -1.0, 0.0, 1.0]);
        assert_eq!(k[1], [-1.0, -2.0, -1.0, 0.0, 0.0, 0.0, 1.0, 2.0, 1.0]);
    }

    #[test]
    fn kernels_are_zero_sum_and_related() {
        for alpha in [-3.0, 0.0, 0.5, 2.0, 7.25] {
            let k = kernels_at(alpha);
            for kernel in &k {
                assert_eq!(kernel.iter().sum::<f64>(), 0.0);
            }
            assert_eq!(rot90(&k[0]), k[1]);
            // diagonals: one is the 90° rotation of the other, and under
            // transposition one is symmetric and the other antisymmetric
            assert_eq!(neg(rot90(&k[2])), k[3]);
            assert_eq!(transpose(&k[2]), k[2]);
            assert_eq!(transpose(&k[3]), neg(k[3]));
        }
    }

    #[test]
    fn kernel_derivative_is_the_mask() {
        let mut store = ParamStore::new();
        let set = SobelKernelSet::new(&mut store, "sobel.alpha", false, 1.3).unwrap();
        let mut tape = Tape::new();
        let b = store.bind(&mut tape);
        let k = set.build_kernels(&mut tape, &b).unwrap();
        // d(sum(k ⊙ e_i))/dα for each element i
        for i in 0..36 {
            let mut probe = Tensor::zeros(&[4, 1, 3, 3]);
            probe.data_mut()[i] = 1.0;
            let p = tape.constant(probe);
            let m = tape.mul(k, p).unwrap();
            let s = tape.sum(m);
            let g = tape.backward(s).unwrap().wrt(&tape, b.var(set.alpha()));
            let want = TEMPLATES[i / 9].1[i % 9];
            assert_eq!(g.data()[0], want);
        }
    }

    #[test]
    fn per_kernel_alpha() {
        let mut store = ParamStore::new();
        let set = SobelKernelSet::new(&mut store, "a", true, 2.0).unwrap();
        store.get_mut(set.alpha()).data_mut()[3] = 5.0;
        let mut tape = Tape::new();
        let b = store.bind(&mut tape);
        let k = set.build_kernels(&mut tape, &b).unwrap();
        let v = tape.value(k).data();
        assert_eq!(&v[..9], &kernels_at(2.0)[0]);
        assert_eq!(&v[27..], &kernels_at(5.0)[3]);
    }

    fn run_edge(img: Tensor) -> (Tensor, Tensor) {
        let mut store = ParamStore::new();
        let set = SobelKernelSet::new(&mut store, "a", false, DEFAULT_ALPHA).unwrap();
        let mut tape = Tape::new();
        let b = store.bind(&mut tape);
        let x = tape.constant(img);
        let r = set.response(&mut tape, &b, x).unwrap();
        let s = tape.gelu(r);
        (tape.value(r).clone(), tape.value(s).clone())
    }

    #[test]
    fn constant_image_has_no_response() {
        let (r, s) = run_edge(Tensor::full(&[1, 1, 6, 6], 0.7));
        assert_eq!(s.dims(), &[1, 4, 6, 6]);
        // zero in exact arithmetic, borders included; blocked GEMM summation
        // leaves ulp-level residue
        assert!(r.data().iter().chain(s.data()).all(|v| v.abs() < 1e-14));
        let (r0, s0) = run_edge(Tensor::zeros(&[2, 1, 6, 6]));
        assert!(r0.data().iter().chain(s0.data()).all(|&v| v == 0.0));
    }

    #[test]
    fn vertical_step_edge() {
        // left half 0, right half 1 on 6×6
        let mut img = Tensor::zeros(&[1, 1, 6, 6]);
        for i in 0..6 {
            for j in 3..6 {
                img.data_mut()[i * 6 + j] = 1.0;
            }
        }
        let (r, _) = run_edge(img);
        // vertical kernel sees (1+2+1)=4 at columns 2 and 3 on every row
        for i in 0..6 {
            for j in 0..6 {
                let want = if j == 2 || j == 3 { 4.0 } else { 0.0 };
                assert_eq!(r.at(&[0, 0, i, j]), want, "({i},{j})");
                assert_eq!(r.at(&[0, 1, i, j]), 0.0);
            }
        }
    }

    #[test]
    fn rejects_multichannel_input() {
        let mut store = ParamStore::new();
        let set = SobelKernelSet::new(&mut store, "a", false, 2.0).unwrap();
        let mut tape = Tape::new();
        let b = store.bind(&mut tape);
        let x = tape.constant(Tensor::zeros(&[1, 2, 4, 4]));
        assert!(matches!(set.forward(&mut tape, &b, x), Err(Error::Dimension { .. })));
    }

    #[test]
    fn alpha_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let img = Tensor::uniform(&[1, 1, 6, 6], 1.0, &mut rng).map(|v| 0.5 + 0.5 * v);
        let weights = Tensor::randn(&[1, 4, 6, 6], 1.0, &mut rng);
        let err = grad_check(
            |tape, alpha| {
                let (base, mask) = template_tensors();
                let base = tape.constant(base);
                let mask = tape.constant(mask);
                let m = tape.mul_scalar(mask, alpha)?;
                let k = tape.add(base, m)?;
                let x = tape.constant(img.clone());
                let r = tape.conv2d(x, k, None, 1, 1)?;
                let s = tape.gelu(r);
                let w = tape.constant(weights.clone());
                let p = tape.mul(s, w)?;
                Ok(tape.sum(p))
            },
            &Tensor::scalar(1.7),
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }
}
