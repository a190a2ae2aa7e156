use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{BoundReport, BoundSample};
use crate::data::{Dataset, OffsetTable};
use crate::env::Oracle;
use crate::error::Result;
use crate::planner::{rank, rc_cost};

/// Shortest observed offsets against true hitting times: one sample per
/// offset-table entry with `measured = D*` and `bound = D_D`. Also reports
/// the empirical competitiveness `c = max D_D / D*`.
pub fn check_data_competitiveness(ds: &Dataset, oracle: &Oracle) -> Result<BoundReport> {
    let table = OffsetTable::from_dataset(ds)?;
    let mut report = BoundReport::new("data_competitiveness");
    for (s, g, d) in table.iter() {
        let sample = match oracle.distance(s, g) {
            Some(star) => BoundSample::new(f64::from(star), f64::from(d)),
            // An observed path to an unreachable cell is itself a violation.
            None => BoundSample::new(f64::INFINITY, f64::from(d)),
        };
        report.push(sample);
    }
    let ratios: Vec<f64> = report
        .samples
        .iter()
        .filter(|s| s.measured >= 1.0 && s.measured.is_finite())
        .map(|s| s.bound / s.measured)
        .collect();
    report.stat("entries", table.len() as f64);
    report.stat("competitiveness", table.competitiveness(oracle));
    report.stat(
        "mean_ratio",
        ratios.iter().sum::<f64>() / ratios.len().max(1) as f64,
    );
    Ok(report)
}

/// Pairwise planner preference against the closed form: with the gate floor
/// inactive, candidate `a` beats `b` iff `d_a (1 - lambda R_a) < d_b (1 -
/// lambda R_b)`. Each tuple is ranked by the planner's own comparator with
/// `b` at the lower index, so ties go to `b` as the strict inequality says.
/// A sample's `measured` is 1 on a mismatch; the bound is 0.
pub fn check_preference_inequality(n: usize, floor: f64, seed: u64) -> Result<BoundReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = BoundReport::new("preference_inequality");
    let (mut mismatches, mut a_wins) = (0usize, 0usize);
    while report.samples.len() < n {
        let lambda = rng.gen_range(0.0..=1.0);
        let (ra, rb): (f64, f64) = (rng.gen(), rng.gen());
        if 1.0 - lambda * ra <= floor || 1.0 - lambda * rb <= floor {
            continue;
        }
        let (da, db): (f64, f64) = (rng.gen_range(0.0..10.0), rng.gen_range(0.0..10.0));
        let costs = [rc_cost(db, rb, lambda, floor), rc_cost(da, ra, lambda, floor)];
        let planner_a = rank(&costs)[0] == 1;
        let closed = da * (1.0 - lambda * ra) < db * (1.0 - lambda * rb);
        let mismatch = planner_a != closed;
        mismatches += usize::from(mismatch);
        a_wins += usize::from(planner_a);
        report.push(BoundSample::new(f64::from(u8::from(mismatch)), 0.0));
    }
    report.stat("tuples", n as f64);
    report.stat("mismatches", mismatches as f64);
    report.stat("a_preferred_fraction", a_wins as f64 / n.max(1) as f64);
    Ok(report)
}
