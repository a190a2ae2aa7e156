//! Empirical checks of the error-propagation, reachability and preference
//! bounds behind the method. Every check returns a [`BoundReport`] whose
//! violations count only samples on which the bound's hypotheses hold.

mod bounds;
mod preference;
mod reach;

use std::io::Write;
use std::path::Path;

pub use bounds::{check_compounding, check_cost_distortion, check_margin_robustness, LipschitzProbe};
pub use preference::{check_data_competitiveness, check_preference_inequality};
pub use reach::{
    check_bayes_reach, check_budget_identifiability, flip_probes, BayesFixture, FixtureInput,
    FlipProbe, HeadFitConfig,
};

use crate::error::Result;

/// Relative slack for comparisons between quantities computed along
/// different floating-point paths.
pub const BOUND_RTOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct BoundSample {
    pub measured: f64,
    pub bound: f64,
    /// Whether the bound's hypotheses hold for this sample.
    pub applicable: bool,
}

impl BoundSample {
    pub fn new(measured: f64, bound: f64) -> Self {
        Self {
            measured,
            bound,
            applicable: true,
        }
    }

    pub fn violated(&self) -> bool {
        self.applicable && self.measured > self.bound * (1.0 + BOUND_RTOL) + 1e-12
    }

    /// `measured / bound`, 0 when both vanish.
    pub fn ratio(&self) -> f64 {
        if self.bound == 0.0 {
            if self.measured == 0.0 {
                0.0
            } else {
                f64::INFINITY
            }
        } else {
            self.measured / self.bound
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BoundReport {
    pub name: String,
    pub samples: Vec<BoundSample>,
    /// Named summary quantities (estimated constants, accuracies, ...).
    pub stats: Vec<(String, f64)>,
}

impl BoundReport {
    pub fn new(name: &str) -> Self {
        Self {
            name: name.to_string(),
            samples: Vec::new(),
            stats: Vec::new(),
        }
    }

    pub fn push(&mut self, sample: BoundSample) {
        self.samples.push(sample);
    }

    pub fn stat(&mut self, name: &str, value: f64) {
        self.stats.push((name.to_string(), value));
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.stats.iter().find(|(n, _)| n == name).map(|(_, v)| *v)
    }

    pub fn violations(&self) -> usize {
        self.samples.iter().filter(|s| s.violated()).count()
    }

    pub fn excluded(&self) -> usize {
        self.samples.iter().filter(|s| !s.applicable).count()
    }

    /// Largest `measured / bound` over applicable samples.
    pub fn worst_ratio(&self) -> f64 {
        self.samples
            .iter()
            .filter(|s| s.applicable)
            .map(BoundSample::ratio)
            .fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.violations() == 0
    }

    /// One row per sample, then summary rows: violations, exclusions, worst
    /// ratio and every named statistic.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["check", "row", "measured", "bound", "ratio", "applicable", "violated"])?;
        for (i, s) in self.samples.iter().enumerate() {
            w.write_record([
                self.name.clone(),
                i.to_string(),
                s.measured.to_string(),
                s.bound.to_string(),
                s.ratio().to_string(),
                u8::from(s.applicable).to_string(),
                u8::from(s.violated()).to_string(),
            ])?;
        }
        let mut summary = vec![
            ("violations".to_string(), self.violations() as f64),
            ("excluded".to_string(), self.excluded() as f64),
            ("samples".to_string(), self.samples.len() as f64),
            ("worst_ratio".to_string(), self.worst_ratio()),
        ];
        summary.extend(self.stats.iter().cloned());
        for (name, v) in summary {
            w.write_record([
                self.name.clone(),
                format!("summary:{name}"),
                v.to_string(),
                String::new(),
                String::new(),
                String::new(),
                String::new(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.write_csv(std::fs::File::create(path)?)
    }
}
