//! Central finite-difference verification of tape gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{ParamId, ParamStore, Tape, Var};
use crate::error::Result;

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub step: f64,
    /// Cap on coordinates probed per parameter tensor; `None` probes all.
    pub max_coords_per_param: Option<usize>,
    pub seed: u64,
    /// Smallest denominator of the relative error.
    pub floor: f64,
    /// Fourth-order five-point stencil instead of the two-point central
    /// difference.
    pub five_point: bool,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            max_coords_per_param: None,
            seed: 0,
            floor: 1e-8,
            five_point: false,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_err: f64,
    /// Parameter name and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
    /// Analytic and numeric derivative at `worst`.
    pub worst_values: Option<(f64, f64)>,
}

impl GradCheckReport {
    pub fn merge(&mut self, other: GradCheckReport) {
        self.checked += other.checked;
        if self.worst.is_none() || other.max_rel_err > self.max_rel_err {
            self.max_rel_err = other.max_rel_err;
            self.worst = other.worst;
            self.worst_values = other.worst_values;
        }
    }
}

/// `|analytic - numeric| / max(|analytic|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(floor)
}

fn eval<F>(store: &ParamStore, f: &F) -> Result<f64>
where
    F: Fn(&mut Tape<'_>) -> Result<Var>,
{
    let mut tape = Tape::new(store);
    let loss = f(&mut tape)?;
    Ok(tape.scalar(loss))
}

/// Compares backprop gradients of the scalar built by `f` against central
/// differences for every parameter in `store` (or a sample of coordinates).
pub fn check<F>(store: &mut ParamStore, f: F, opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<'_>) -> Result<Var>,
{
    let grads = {
        let mut tape = Tape::new(store);
        let loss = f(&mut tape)?;
        tape.backward(loss)?
    };
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut report = GradCheckReport::default();
    let ids: Vec<ParamId> = store.ids().collect();
    for id in ids {
        let numel = store.get(id).numel();
        let coords: Vec<usize> = match opts.max_coords_per_param {
            Some(cap) if cap < numel => sample(&mut rng, numel, cap).into_vec(),
            _ => (0..numel).collect(),
        };
        let analytic = grads.get(id).expect("materialized by backward").to_vec();
        for k in coords {
            let orig = store.get(id).data()[k];
            let mut at = |offset: f64| -> Result<f64> {
                store.get_mut(id).data_mut()[k] = orig + offset;
                eval(store, &f)
            };
            let h = opts.step;
            let numeric = if opts.five_point {
                (at(-2.0 * h)? - 8.0 * at(-h)? + 8.0 * at(h)? - at(2.0 * h)?) / (12.0 * h)
            } else {
                (at(h)? - at(-h)?) / (2.0 * h)
            };
            store.get_mut(id).data_mut()[k] = orig;
            let err = relative_error(analytic[k], numeric, opts.floor);
            report.checked += 1;
            if err > report.max_rel_err || report.worst.is_none() {
                report.max_rel_err = report.max_rel_err.max(err);
                report.worst = Some((store.name(id).to_string(), k));
                report.worst_values = Some((analytic[k], numeric));
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn cubic_passes() {
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::vector(vec![0.7, -1.3, 2.0]));
        let report = check(
            &mut store,
            |tape| {
                let x = tape.param(w);
                let sq = tape.mul(x, x)?;
                let cube = tape.mul(sq, x)?;
                Ok(tape.sum(cube))
            },
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert_eq!(report.checked, 3);
        assert!(report.max_rel_err < 1e-8, "{report:?}");
    }
}
