use std::collections::BTreeMap;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::{ParamGroup, ParameterStore};

/// Which coordinates of each parameter tensor are probed.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Coords {
    #[default]
    All,
    /// `k` coordinates drawn uniformly without replacement.
    Random(usize),
    /// The `k` coordinates with the largest analytic magnitude (lowest index
    /// first on ties). A central difference at `eps` resolves a derivative
    /// only to about `ulp(loss) / 2eps`, so tiny entries measure rounding
    /// rather than the gradient.
    Largest(usize),
}

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    /// Central-difference step, within `[1e-7, 1e-3]`.
    pub eps: f64,
    pub coords: Coords,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            coords: Coords::All,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckEntry {
    pub name: String,
    pub group: ParamGroup,
    pub coords_checked: usize,
    pub max_rel_error: f64,
    /// Analytic and numeric values at the worst coordinate.
    pub worst: (f64, f64),
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.entries
            .iter()
            .map(|e| e.max_rel_error)
            .fold(0.0, f64::max)
    }

    pub fn by_group(&self) -> BTreeMap<ParamGroup, f64> {
        let mut out = BTreeMap::new();
        for e in &self.entries {
            let slot = out.entry(e.group).or_insert(0.0f64);
            *slot = slot.max(e.max_rel_error);
        }
        out
    }
}

/// Relative error with denominator `max(|analytic|, |numeric|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

fn eval_loss<F>(store: &ParameterStore, f: &F) -> Result<f64>
where
    F: Fn(&mut Graph<'_>) -> Result<Var>,
{
    let mut g = Graph::with_store(store);
    let v = f(&mut g)?;
    Ok(g.scalar(v))
}

/// Compares the analytic gradient of the scalar built by `f` against central
/// differences `(f(θ+eps) − f(θ−eps)) / 2eps`, for every trainable parameter
/// in `store`. Parameter values are restored before returning.
pub fn grad_check<F>(
    store: &mut ParameterStore,
    f: F,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<'_>) -> Result<Var>,
{
    if !(1e-7..=1e-3).contains(&opts.eps) {
        return Err(Error::Config(format!(
            "grad_check eps {} outside [1e-7, 1e-3]",
            opts.eps
        )));
    }
    let analytic = {
        let mut g = Graph::with_store(store);
        let loss = f(&mut g)?;
        g.backward(loss, 1.0)?
    };

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut report = GradCheckReport::default();
    for id in store.trainable_ids() {
        let (name, group, numel) = {
            let p = store.get(id);
            (p.name.clone(), p.group, p.value.numel())
        };
        let grad = analytic.get(id).ok_or_else(|| Error::GradCheck {
            param: name.clone(),
            msg: "no analytic gradient produced".into(),
        })?;
        let coords: Vec<usize> = match opts.coords {
            Coords::Random(k) if k < numel => index::sample(&mut rng, numel, k).into_vec(),
            Coords::Largest(k) if k < numel => {
                let mut order: Vec<usize> = (0..numel).collect();
                order.sort_by(|&a, &b| grad[b].abs().total_cmp(&grad[a].abs()).then(a.cmp(&b)));
                order.truncate(k);
                order
            }
            _ => (0..numel).collect(),
        };

        let original = store.value(id).clone();
        let mut worst = 0.0f64;
        let mut worst_pair = (0.0, 0.0);
        for &c in &coords {
            let mut plus = original.clone();
            plus.data_mut()[c] += opts.eps;
            store.get_mut(id).value = plus;
            let lp = eval_loss(store, &f);
            let mut minus = original.clone();
            minus.data_mut()[c] -= opts.eps;
            store.get_mut(id).value = minus;
            let lm = eval_loss(store, &f);
            store.get_mut(id).value = original.clone();

            let (lp, lm) = match (lp, lm) {
                (Ok(a), Ok(b)) if a.is_finite() && b.is_finite() => (a, b),
                (Err(e), _) | (_, Err(e)) => {
                    return Err(Error::GradCheck {
                        param: name,
                        msg: format!("loss evaluation failed at coordinate {c}: {e}"),
                    })
                }
                _ => {
                    return Err(Error::GradCheck {
                        param: name,
                        msg: format!("non-finite loss at coordinate {c}"),
                    })
                }
            };
            let numeric = (lp - lm) / (2.0 * opts.eps);
            let e = relative_error(grad[c], numeric);
            if e >= worst {
                worst = e;
                worst_pair = (grad[c], numeric);
            }
        }
        report.entries.push(GradCheckEntry {
            name,
            group,
            coords_checked: coords.len(),
            max_rel_error: worst,
            worst: worst_pair,
        });
    }
    Ok(report)
}
