//! Central-difference verification of graph gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GradCheck {
    pub epsilon: f64,
    /// Coordinates probed per parameter tensor; `None` probes all of them.
    pub max_coords_per_param: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheck {
    fn default() -> Self {
        GradCheck {
            epsilon: 1e-5,
            max_coords_per_param: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_param: usize,
    pub worst_index: usize,
    pub coords_checked: usize,
}

/// Checks every coordinate of `params`; returns the max relative error.
pub fn gradient_check<F>(loss_fn: F, params: &[Tensor], epsilon: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let check = GradCheck {
        epsilon,
        ..GradCheck::default()
    };
    Ok(check.run(loss_fn, params)?.max_rel_error)
}

impl GradCheck {
    pub fn run<F>(&self, loss_fn: F, params: &[Tensor]) -> Result<GradCheckReport>
    where
        F: Fn(&mut Graph, &[Var]) -> Result<Var>,
    {
        if !(self.epsilon > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "gradient check epsilon must be positive, got {}",
                self.epsilon
            )));
        }
        let mut graph = Graph::new();
        let vars: Vec<Var> = params.iter().map(|p| graph.param(p.clone())).collect();
        let loss = loss_fn(&mut graph, &vars)?;
        let grads = graph.backward(loss)?;

        let eval = |params: &[Tensor]| -> Result<f64> {
            let mut g = Graph::new();
            let vars: Vec<Var> = params.iter().map(|p| g.param(p.clone())).collect();
            let l = loss_fn(&mut g, &vars)?;
            let v = g.value(l).item();
            if !v.is_finite() {
                return Err(Error::NumericalInstability {
                    op: "loss during gradient probing".into(),
                });
            }
            Ok(v)
        };

        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut probe = params.to_vec();
        let mut report = GradCheckReport {
            max_rel_error: 0.0,
            worst_param: 0,
            worst_index: 0,
            coords_checked: 0,
        };
        for (pi, var) in vars.iter().enumerate() {
            let analytic = grads.get_or_zeros(*var, &params[pi]);
            let len = params[pi].len();
            let coords: Vec<usize> = match self.max_coords_per_param {
                Some(k) if k < len => {
                    let mut c = sample(&mut rng, len, k).into_vec();
                    c.sort_unstable();
                    c
                }
                _ => (0..len).collect(),
            };
            for idx in coords {
                let orig = params[pi].data()[idx];
                probe[pi].data_mut()[idx] = orig + self.epsilon;
                let plus = eval(&probe)?;
                probe[pi].data_mut()[idx] = orig - self.epsilon;
                let minus = eval(&probe)?;
                probe[pi].data_mut()[idx] = orig;

                let numeric = (plus - minus) / (2.0 * self.epsilon);
                let a = analytic.data()[idx];
                let rel = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
                report.coords_checked += 1;
                if rel > report.max_rel_error {
                    report.max_rel_error = rel;
                    report.worst_param = pi;
                    report.worst_index = idx;
                }
            }
        }
        Ok(report)
    }
}
