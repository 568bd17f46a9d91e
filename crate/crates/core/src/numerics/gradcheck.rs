//! Central finite-difference checks for [`Graph`] gradients.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::graph::{Graph, NodeId};
use super::param::{ParamId, ParamStore};
use super::tensor::{dot, Tensor2};
use crate::error::{input_err, Result};

#[derive(Clone, Copy, Debug)]
pub enum GradCheckMode {
    /// Perturb every scalar of every parameter.
    Elementwise,
    /// Per parameter tensor, compare the directional derivative along
    /// `directions` seeded Gaussian directions. Elementwise comparisons are
    /// dominated by roundoff on entries whose true gradient is near zero,
    /// and cost two forward passes per scalar.
    Directional { directions: usize, seed: u64 },
}

/// `|a - b| / (|a| + |b| + 1e-12)`
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / (a.abs() + b.abs() + 1e-12)
}

fn eval<F>(store: &ParamStore, f: &F) -> Result<f64>
where
    F: for<'a> Fn(&mut Graph<'a>) -> Result<NodeId>,
{
    let mut g = Graph::new(store);
    let out = f(&mut g)?;
    Ok(g.value(out).get(0, 0))
}

/// One analytic/numeric comparison.
#[derive(Clone, Debug)]
pub struct GradComparison {
    pub param: String,
    pub analytic: f64,
    pub numeric: f64,
}

impl GradComparison {
    pub fn relative_error(&self) -> f64 {
        relative_error(self.analytic, self.numeric)
    }
}

/// Returns the largest relative error between the analytic gradient of `f`
/// and central differences with step `eps`, over all parameters of `store`.
/// Parameter values are restored before returning.
pub fn grad_check<F>(store: &mut ParamStore, f: F, eps: f64, mode: GradCheckMode) -> Result<f64>
where
    F: for<'a> Fn(&mut Graph<'a>) -> Result<NodeId>,
{
    Ok(grad_check_report(store, f, eps, mode)?
        .iter()
        .map(GradComparison::relative_error)
        .fold(0.0, f64::max))
}

/// Every comparison made by [`grad_check`].
pub fn grad_check_report<F>(store: &mut ParamStore, f: F, eps: f64, mode: GradCheckMode) -> Result<Vec<GradComparison>>
where
    F: for<'a> Fn(&mut Graph<'a>) -> Result<NodeId>,
{
    if !(eps > 0.0) {
        return input_err("grad_check eps must be positive");
    }
    let grads = {
        let mut g = Graph::new(store);
        let out = f(&mut g)?;
        g.backward(out)?
    };
    let ids: Vec<ParamId> = store.iter().map(|(id, _)| id).collect();
    let mut out = Vec::new();

    for id in ids {
        let (rows, cols) = store.value(id).shape();
        let analytic = grads.get(id).cloned().unwrap_or_else(|| Tensor2::zeros(rows, cols));
        match mode {
            GradCheckMode::Elementwise => {
                for i in 0..rows * cols {
                    let orig = store.value(id).data()[i];
                    store.get_mut(id).value.data_mut()[i] = orig + eps;
                    let fp = eval(store, &f)?;
                    store.get_mut(id).value.data_mut()[i] = orig - eps;
                    let fm = eval(store, &f)?;
                    store.get_mut(id).value.data_mut()[i] = orig;
                    let cd = (fp - fm) / (2.0 * eps);
                    out.push(GradComparison {
                        param: store.get(id).name.clone(),
                        analytic: analytic.data()[i],
                        numeric: cd,
                    });
                }
            }
            GradCheckMode::Directional { directions, seed } => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (id.index() as u64).wrapping_mul(0x9E37_79B9));
                for _ in 0..directions {
                    let dir: Vec<f64> = (0..rows * cols).map(|_| StandardNormal.sample(&mut rng)).collect();
                    let orig = store.value(id).clone();
                    let shifted = |sign: f64| {
                        let data = orig.data().iter().zip(&dir).map(|(v, d)| v + sign * eps * d).collect();
                        Tensor2::from_vec(rows, cols, data).expect("same shape")
                    };
                    store.get_mut(id).value = shifted(1.0);
                    let fp = eval(store, &f)?;
                    store.get_mut(id).value = shifted(-1.0);
                    let fm = eval(store, &f)?;
                    store.get_mut(id).value = orig;
                    let cd = (fp - fm) / (2.0 * eps);
                    out.push(GradComparison {
                        param: store.get(id).name.clone(),
                        analytic: dot(analytic.data(), &dir),
                        numeric: cd,
                    });
                }
            }
        }
    }
    Ok(out)
}
