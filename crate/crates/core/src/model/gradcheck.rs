//! Central finite-difference verification of analytic gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::params::{Gradients, ParameterStore};
use crate::error::Result;

/// Denominator floor of the relative error, so that entries whose true
/// gradient is ~0 are compared on an absolute scale instead of amplifying
/// finite-difference truncation noise.
pub const REL_ERROR_FLOOR: f64 = 1e-3;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Coordinates {
    All,
    /// Up to `n` coordinates per tensor, chosen with `seed`.
    PerTensor { n: usize, seed: u64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckEntry {
    pub name: String,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
    pub step: f64,
    pub tolerance: f64,
    pub max_rel_error: f64,
    pub worst: Option<String>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }

    pub fn failures(&self) -> impl Iterator<Item = &GradCheckEntry> {
        self.entries
            .iter()
            .filter(move |e| e.rel_error >= self.tolerance)
    }

    pub fn merge(&mut self, other: GradCheckReport) {
        if other.max_rel_error > self.max_rel_error {
            self.max_rel_error = other.max_rel_error;
            self.worst = other.worst;
        }
        self.entries.extend(other.entries);
    }
}

/// Compares `analytic` against `(f(p + step e_i) - f(p - step e_i)) / 2 step`
/// for the selected coordinates.
pub fn finite_difference_check<F>(
    params: &ParameterStore,
    loss: F,
    analytic: &Gradients,
    step: f64,
    tolerance: f64,
    coords: Coordinates,
) -> Result<GradCheckReport>
where
    F: Fn(&ParameterStore) -> Result<f64>,
{
    let mut probe = params.clone();
    let mut offsets = Vec::new();
    let mut base = 0;
    let mut rng = match coords {
        Coordinates::PerTensor { seed, .. } => Some(ChaCha8Rng::seed_from_u64(seed)),
        Coordinates::All => None,
    };
    for t in params.tensors() {
        match (coords, rng.as_mut()) {
            (Coordinates::PerTensor { n, .. }, Some(rng)) if n < t.len() => {
                let mut picked = sample(rng, t.len(), n).into_vec();
                picked.sort_unstable();
                offsets.extend(picked.into_iter().map(|i| base + i));
            }
            _ => offsets.extend(base..base + t.len()),
        }
        base += t.len();
    }

    let mut report = GradCheckReport {
        entries: Vec::with_capacity(offsets.len()),
        step,
        tolerance,
        max_rel_error: 0.0,
        worst: None,
    };
    for off in offsets {
        let orig = probe.flat_get(off);
        probe.flat_set(off, orig + step);
        let plus = loss(&probe)?;
        probe.flat_set(off, orig - step);
        let minus = loss(&probe)?;
        probe.flat_set(off, orig);
        let numeric = (plus - minus) / (2.0 * step);
        let a = analytic.flat_get(off);
        let rel = relative_error(a, numeric);
        let name = params.flat_name(off);
        if report.worst.is_none() || rel > report.max_rel_error {
            report.max_rel_error = rel;
            report.worst = Some(name.clone());
        }
        report.entries.push(GradCheckEntry {
            name,
            analytic: a,
            numeric,
            rel_error: rel,
        });
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::tape::Tape;

    #[test]
    fn quadratic_gradient_matches() {
        let mut p = ParameterStore::new();
        let w = p.add("w", &[1, 3], vec![0.3, -0.7, 1.1]).unwrap();
        let b = p.add("b", &[1], vec![0.2]).unwrap();
        let x = vec![1.0, 2.0, 3.0];
        let eval = |store: &ParameterStore| -> Result<f64> {
            let mut tape = Tape::new(store);
            let xn = tape.constant(x.clone());
            let y = tape.affine(xn, w, b);
            let t = tape.tanh(y);
            let l = tape.squared_norm(t);
            Ok(tape.scalar(l))
        };
        let mut tape = Tape::new(&p);
        let xn = tape.constant(x.clone());
        let y = tape.affine(xn, w, b);
        let t = tape.tanh(y);
        let l = tape.squared_norm(t);
        let g = tape.backward(l).unwrap();
        let report = finite_difference_check(&p, eval, &g, 1e-4, 1e-4, Coordinates::All).unwrap();
        assert!(report.passed(), "{report:?}");
        assert_eq!(report.entries.len(), 4);
    }

    #[test]
    fn wrong_gradient_detected() {
        let mut p = ParameterStore::new();
        p.add("w", &[2], vec![1.0, 2.0]).unwrap();
        let eval = |s: &ParameterStore| -> Result<f64> {
            Ok(s.tensors()[0].data.iter().map(|v| v * v).sum())
        };
        let mut g = p.zeros_like();
        g.data[0] = vec![2.0, 3.0];
        let report = finite_difference_check(&p, eval, &g, 1e-4, 1e-4, Coordinates::All).unwrap();
        assert!(!report.passed());
        assert_eq!(report.failures().count(), 1);
        assert_eq!(report.worst.as_deref(), Some("w[1]"));
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!((relative_error(1e-9, 2e-9) - 1e-6).abs() < 1e-18);
        assert!((relative_error(2.0, 1.0) - 0.5).abs() < 1e-15);
    }
}
