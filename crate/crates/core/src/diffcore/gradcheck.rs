//! Central finite-difference verification of analytic gradients.
//!
//! The harness never throws on a mismatch: every entry is measured and the
//! report carries the worst offenders, so a failing check is inspectable.

use rayon::prelude::*;

use crate::diffcore::params::{ParamId, ParamStore};
use crate::error::Result;

/// Scale-aware comparison: |analytic - fd| / max(|fd|, floor).
pub const REL_ERR_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct EntryReport {
    pub index: usize,
    pub analytic: f64,
    pub fd: f64,
    pub rel_err: f64,
}

#[derive(Clone, Debug)]
pub struct ParamReport {
    pub name: String,
    pub entries: usize,
    pub failed: usize,
    pub max_rel_err: f64,
    /// Worst entries by relative error, capped at a handful.
    pub worst: Vec<EntryReport>,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub h: f64,
    pub tol: f64,
    pub params: Vec<ParamReport>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.params.iter().all(|p| p.failed == 0)
    }

    pub fn total_entries(&self) -> usize {
        self.params.iter().map(|p| p.entries).sum()
    }

    pub fn total_failed(&self) -> usize {
        self.params.iter().map(|p| p.failed).sum()
    }

    pub fn max_rel_err(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_err).fold(0.0, f64::max)
    }

    pub fn summary(&self) -> String {
        format!(
            "gradcheck: {}/{} entries within tol {:.1e} (h={:.1e}, worst rel err {:.3e})",
            self.total_entries() - self.total_failed(),
            self.total_entries(),
            self.tol,
            self.h,
            self.max_rel_err()
        )
    }
}

/// Compare the analytic gradients already present in `store` against central
/// finite differences of `forward`, entry by entry.
///
/// `forward` must be a deterministic pure function of the parameter values.
/// The store is cloned per worker, so the caller's values are untouched.
pub fn finite_difference_check<F>(
    store: &ParamStore,
    forward: F,
    h: f64,
    tol: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&ParamStore) -> Result<f64> + Sync,
{
    let pids: Vec<ParamId> = store.ids().collect();
    let params = pids
        .par_iter()
        .map(|&pid| -> Result<ParamReport> {
            let mut local = store.clone();
            let n = local.value(pid).numel();
            let mut worst: Vec<EntryReport> = Vec::new();
            let mut failed = 0;
            let mut max_rel_err: f64 = 0.0;
            for i in 0..n {
                let orig = local.value(pid).data()[i];
                local.value_mut(pid).data_mut()[i] = orig + h;
                let up = forward(&local)?;
                local.value_mut(pid).data_mut()[i] = orig - h;
                let down = forward(&local)?;
                local.value_mut(pid).data_mut()[i] = orig;
                let fd = (up - down) / (2.0 * h);
                let analytic = store.grad(pid).data()[i];
                let rel_err = (analytic - fd).abs() / fd.abs().max(REL_ERR_FLOOR);
                max_rel_err = max_rel_err.max(rel_err);
                if rel_err > tol {
                    failed += 1;
                }
                if worst.len() < 5 || rel_err > worst.last().map_or(0.0, |w| w.rel_err) {
                    worst.push(EntryReport { index: i, analytic, fd, rel_err });
                    worst.sort_by(|a, b| b.rel_err.total_cmp(&a.rel_err));
                    worst.truncate(5);
                }
            }
            Ok(ParamReport {
                name: store.name(pid).to_string(),
                entries: n,
                failed,
                max_rel_err,
                worst,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(GradCheckReport { h, tol, params })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::tape::Tape;
    use crate::diffcore::tensor::Tensor;

    #[test]
    fn empty_store_gives_empty_report() {
        let store = ParamStore::new();
        let report = finite_difference_check(&store, |_| Ok(1.0), 1e-4, 1e-5).unwrap();
        assert!(report.params.is_empty());
        assert!(report.passed());
        assert_eq!(report.total_entries(), 0);
    }

    // Single linear layer + BCE: analytic gradient from the tape must match
    // finite differences of the same loss everywhere.
    #[test]
    fn linear_layer_bce_passes() {
        let mut store = ParamStore::new();
        let w = store
            .register("w", Tensor::matrix(&[vec![0.3, -0.2], vec![0.1, 0.4], vec![-0.5, 0.2]]).unwrap())
            .unwrap();
        let b = store.register("b", Tensor::vector(&[0.05, -0.1])).unwrap();
        let x = Tensor::matrix(&[vec![0.7, -1.2, 0.4], vec![-0.3, 0.8, 1.1]]).unwrap();
        let targets = std::sync::Arc::new(vec![1.0, 0.0, 1.0, 0.25]);

        let run = |store: &ParamStore| -> Result<(Tape, crate::diffcore::tape::NodeId)> {
            let mut tape = Tape::new();
            let xin = tape.input(x.clone());
            let wn = tape.param(store, w);
            let bn = tape.param(store, b);
            let z = tape.matmul(xin, wn)?;
            let z = tape.add(z, bn)?;
            let z = tape.reshape(z, vec![4])?;
            let p = tape.sigmoid(z);
            let loss = tape.bce_mean(p, targets.clone())?;
            Ok((tape, loss))
        };

        let (tape, loss) = run(&store).unwrap();
        let accum = tape.backward(loss).unwrap();
        store.zero_grads();
        accum.apply_to(&mut store);

        let report = finite_difference_check(
            &store,
            |s| {
                let (tape, loss) = run(s)?;
                Ok(tape.value(loss).item())
            },
            1e-4,
            1e-5,
        )
        .unwrap();
        assert!(report.passed(), "{}", report.summary());
    }
}
