//! Derivative-free maximization (Nelder–Mead with one restart).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub max_evals: usize,
    pub x_tol: f64,
    pub f_tol: f64,
    /// Edge length of the initial simplex when the caller gives no per-coordinate steps.
    pub initial_step: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            max_evals: 5000,
            x_tol: 1e-8,
            f_tol: 1e-11,
            initial_step: 0.1,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_evals < 1 || !(self.x_tol > 0.0) || !(self.f_tol > 0.0) || !(self.initial_step > 0.0)
        {
            return Err(Error::InvalidParameter(format!("optimizer config {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Maximum {
    pub argmax: Vec<f64>,
    pub value: f64,
    pub evals: usize,
}

/// Maximize `objective` starting at `initial` with the configured simplex size.
pub fn maximize<F>(objective: F, initial: &[f64], config: &OptimizerConfig) -> Result<Maximum>
where
    F: FnMut(&[f64]) -> f64,
{
    let steps = vec![config.initial_step; initial.len()];
    maximize_with_steps(objective, initial, &steps, config)
}

/// Maximize with a per-coordinate initial simplex.
///
/// Non-finite objective values are treated as -∞, so the caller can encode
/// infeasible regions by returning NaN.
pub fn maximize_with_steps<F>(
    mut objective: F,
    initial: &[f64],
    steps: &[f64],
    config: &OptimizerConfig,
) -> Result<Maximum>
where
    F: FnMut(&[f64]) -> f64,
{
    config.validate()?;
    if initial.is_empty() {
        return Err(Error::InvalidParameter("empty starting point".into()));
    }
    if steps.len() != initial.len() {
        return Err(Error::DimensionMismatch {
            expected: initial.len(),
            got: steps.len(),
        });
    }
    // minimize the negation
    let mut cost = |x: &[f64]| {
        let v = objective(x);
        if v.is_finite() {
            -v
        } else {
            f64::INFINITY
        }
    };
    let f0 = cost(initial);
    if !f0.is_finite() {
        return Err(Error::InvalidParameter(
            "objective is not finite at the starting point".into(),
        ));
    }

    let mut used = 1usize;
    let mut best_x = initial.to_vec();
    let mut best_f = f0;
    // first pass, then one restart from the point it found
    for _ in 0..2 {
        let (x, f, converged) = simplex_search(&mut cost, &best_x, best_f, steps, config, &mut used);
        if f <= best_f {
            best_x = x;
            best_f = f;
        }
        if !converged {
            return Err(Error::NonConvergence {
                evals: used,
                best_point: best_x,
                best_value: -best_f,
            });
        }
    }
    Ok(Maximum {
        argmax: best_x,
        value: -best_f,
        evals: used,
    })
}

fn simplex_search<F>(
    cost: &mut F,
    start: &[f64],
    f_start: f64,
    steps: &[f64],
    config: &OptimizerConfig,
    used: &mut usize,
) -> (Vec<f64>, f64, bool)
where
    F: FnMut(&[f64]) -> f64,
{
    let k = start.len();
    let mut pts: Vec<Vec<f64>> = Vec::with_capacity(k + 1);
    let mut vals: Vec<f64> = Vec::with_capacity(k + 1);
    pts.push(start.to_vec());
    vals.push(f_start);
    for j in 0..k {
        let mut p = start.to_vec();
        p[j] += steps[j];
        let mut v = cost(&p);
        *used += 1;
        if !v.is_finite() {
            // step into an infeasible region: try the other direction
            p[j] = start[j] - steps[j];
            v = cost(&p);
            *used += 1;
        }
        pts.push(p);
        vals.push(v);
    }

    let (alpha, gamma, rho, sigma) = (1.0, 2.0, 0.5, 0.5);
    let mut order: Vec<usize> = (0..=k).collect();
    let mut centroid = vec![0.0; k];
    let mut trial = vec![0.0; k];
    let mut trial2 = vec![0.0; k];

    loop {
        // stable sort keeps the incumbent first among ties
        order.sort_by(|&a, &b| vals[a].total_cmp(&vals[b]));
        let best = order[0];
        let worst = order[k];
        let second = order[k - 1];

        let f_spread = vals[worst] - vals[best];
        let x_spread = pts
            .iter()
            .flat_map(|p| p.iter().zip(&pts[best]).map(|(a, b)| (a - b).abs()))
            .fold(0.0_f64, f64::max);
        if x_spread <= config.x_tol && f_spread <= config.f_tol {
            return (pts[best].clone(), vals[best], true);
        }
        if *used >= config.max_evals {
            return (pts[best].clone(), vals[best], false);
        }

        centroid.iter_mut().for_each(|c| *c = 0.0);
        for &i in order.iter().take(k) {
            for (c, x) in centroid.iter_mut().zip(&pts[i]) {
                *c += x / k as f64;
            }
        }

        for j in 0..k {
            trial[j] = centroid[j] + alpha * (centroid[j] - pts[worst][j]);
        }
        let fr = cost(&trial);
        *used += 1;

        if fr < vals[best] {
            for j in 0..k {
                trial2[j] = centroid[j] + gamma * (trial[j] - centroid[j]);
            }
            let fe = cost(&trial2);
            *used += 1;
            if fe < fr {
                pts[worst].copy_from_slice(&trial2);
                vals[worst] = fe;
            } else {
                pts[worst].copy_from_slice(&trial);
                vals[worst] = fr;
            }
            continue;
        }
        if fr < vals[second] {
            pts[worst].copy_from_slice(&trial);
            vals[worst] = fr;
            continue;
        }
        // contraction, outside if the reflection helped at all
        let outside = fr < vals[worst];
        for j in 0..k {
            trial2[j] = if outside {
                centroid[j] + rho * (trial[j] - centroid[j])
            } else {
                centroid[j] + rho * (pts[worst][j] - centroid[j])
            };
        }
        let fc = cost(&trial2);
        *used += 1;
        let accept = if outside { fc <= fr } else { fc < vals[worst] };
        if accept {
            pts[worst].copy_from_slice(&trial2);
            vals[worst] = fc;
            continue;
        }
        // shrink towards the best vertex
        let anchor = pts[best].clone();
        for &i in order.iter().skip(1) {
            for (x, a) in pts[i].iter_mut().zip(&anchor) {
                *x = a + sigma * (*x - a);
            }
            vals[i] = cost(&pts[i]);
            *used += 1;
        }
    }
}
