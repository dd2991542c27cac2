use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{standard_normal, ParamStore};

#[derive(Clone, Debug)]
pub struct FdOptions {
    /// Central-difference step.
    pub step: f64,
    /// Coordinates probed per block; smaller blocks are checked exhaustively.
    pub max_coords: usize,
    /// Also compare one random unit-direction derivative per block.
    pub directional: bool,
    /// Lower bound on the relative-error denominator.
    pub floor: f64,
    pub seed: u64,
}

impl Default for FdOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            max_coords: 16,
            directional: true,
            floor: 1e-6,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct BlockReport {
    pub name: String,
    pub max_rel_err: f64,
    pub checked: usize,
    /// False when the function produced a non-finite value.
    pub finite: bool,
}

impl BlockReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.finite && self.max_rel_err < tol
    }
}

#[derive(Clone, Debug, Default)]
pub struct FdReport {
    pub blocks: Vec<BlockReport>,
}

impl FdReport {
    pub fn max_rel_err(&self) -> f64 {
        self.blocks
            .iter()
            .map(|b| {
                if b.finite {
                    b.max_rel_err
                } else {
                    f64::INFINITY
                }
            })
            .fold(0.0, f64::max)
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.blocks.iter().all(|b| b.passes(tol))
    }

    pub fn failing(&self, tol: f64) -> Vec<&BlockReport> {
        self.blocks.iter().filter(|b| !b.passes(tol)).collect()
    }
}

fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Compares the gradients stored on `params` against central differences
/// of `f`, block by block.
///
/// Blocks without a stored gradient are compared against zero.
pub fn finite_diff_check<F>(params: &ParamStore, mut f: F, opts: &FdOptions) -> FdReport
where
    F: FnMut(&ParamStore) -> f64,
{
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut work = params.clone();
    let mut report = FdReport::default();
    let h = opts.step;
    for id in params.ids() {
        let base = params.get(id);
        if !base.requires_grad() {
            continue;
        }
        let n = base.numel();
        let grad = base
            .grad()
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; n]);
        let coords: Vec<usize> = if n <= opts.max_coords {
            (0..n).collect()
        } else {
            sample(&mut rng, n, opts.max_coords).into_vec()
        };
        let mut block = BlockReport {
            name: params.name(id).to_string(),
            max_rel_err: 0.0,
            checked: 0,
            finite: true,
        };
        for &k in &coords {
            let orig = base.data()[k];
            work.get_mut(id).data_mut()[k] = orig + h;
            let fp = f(&work);
            work.get_mut(id).data_mut()[k] = orig - h;
            let fm = f(&work);
            work.get_mut(id).data_mut()[k] = orig;
            if !fp.is_finite() || !fm.is_finite() {
                block.finite = false;
                continue;
            }
            let fd = (fp - fm) / (2.0 * h);
            block.max_rel_err = block.max_rel_err.max(rel_err(grad[k], fd, opts.floor));
            block.checked += 1;
        }
        if opts.directional && n > 1 {
            let mut dir: Vec<f64> = (0..n).map(|_| standard_normal(&mut rng)).collect();
            let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
            dir.iter_mut().for_each(|v| *v /= norm);
            let shifted = |sign: f64, work: &mut ParamStore| {
                let t = work.get_mut(id).data_mut();
                for ((w, b), d) in t.iter_mut().zip(base.data()).zip(&dir) {
                    *w = b + sign * h * d;
                }
            };
            shifted(1.0, &mut work);
            let fp = f(&work);
            shifted(-1.0, &mut work);
            let fm = f(&work);
            work.get_mut(id).data_mut().copy_from_slice(base.data());
            if fp.is_finite() && fm.is_finite() {
                let fd = (fp - fm) / (2.0 * h);
                let ad: f64 = grad.iter().zip(&dir).map(|(g, d)| g * d).sum();
                block.max_rel_err = block.max_rel_err.max(rel_err(ad, fd, opts.floor));
                block.checked += 1;
            } else {
                block.finite = false;
            }
        }
        report.blocks.push(block);
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Tape, Tensor};

    fn linear_store() -> ParamStore {
        let mut s = ParamStore::new();
        s.add("w", Tensor::vector(vec![0.5, -1.0, 2.0]));
        s
    }

    fn linear(p: &ParamStore) -> f64 {
        let w = p.get(crate::tensor::ParamId(0)).data();
        3.0 * w[0] - 2.0 * w[1] + 0.5 * w[2]
    }

    #[test]
    fn linear_function_is_near_exact() {
        let mut s = linear_store();
        s.get_mut(crate::tensor::ParamId(0))
            .accumulate_grad(&[3.0, -2.0, 0.5])
            .unwrap();
        let r = finite_diff_check(&s, linear, &FdOptions::default());
        assert!(r.max_rel_err() < 1e-9, "{r:?}");
    }

    #[test]
    fn corrupted_gradient_is_flagged() {
        let mut s = linear_store();
        s.get_mut(crate::tensor::ParamId(0))
            .accumulate_grad(&[3.0, -2.0, 0.7])
            .unwrap();
        let r = finite_diff_check(&s, linear, &FdOptions::default());
        assert!(!r.passes(1e-4));
        assert_eq!(r.failing(1e-4)[0].name, "w");
    }

    #[test]
    fn nan_output_is_a_failure() {
        let mut s = linear_store();
        s.get_mut(crate::tensor::ParamId(0))
            .accumulate_grad(&[0.0; 3])
            .unwrap();
        let r = finite_diff_check(&s, |_| f64::NAN, &FdOptions::default());
        assert!(!r.passes(1.0));
    }

    #[test]
    fn softmax_cross_entropy_composite() {
        let mut s = ParamStore::new();
        let w = s.add(
            "logits",
            Tensor::matrix(2, 3, vec![0.2, -0.4, 0.9, 0.1, 0.3, -0.8]).unwrap(),
        );
        let eval = |p: &ParamStore, grad: bool| -> (f64, Option<Vec<f64>>) {
            let tape = Tape::new();
            let b = if grad {
                p.bind(&tape)
            } else {
                p.bind_frozen(&tape)
            };
            let lp = b[w].log_softmax_rows();
            let loss = lp.select(&[2, 4]).unwrap().sum().scale(-1.0);
            if grad {
                tape.backward(loss).unwrap();
            }
            (loss.item(), b[w].grad().map(|g| g.data().to_vec()))
        };
        let (_, g) = eval(&s, true);
        s.get_mut(w).accumulate_grad(&g.unwrap()).unwrap();
        let r = finite_diff_check(&s, |p| eval(p, false).0, &FdOptions::default());
        assert!(r.passes(1e-4), "{r:?}");
    }
}
