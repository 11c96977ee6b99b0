use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Activation range clip point, as a quantile of `|x|`.
pub const CLIP_PERCENTILE: f64 = 0.999;

/// Histogram resolution: bins per octave of `|x|`. Percentile estimates carry at
/// most `2^(1/512) − 1 ≈ 0.14 %` relative error.
const BINS_PER_OCTAVE: f64 = 256.0;

/// Running statistics for one activation site.
///
/// Every field is a commutative reduction, so the result does not depend on the
/// order in which batches are observed.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SiteStats {
    pub min: f64,
    pub max: f64,
    pub count: u64,
    zeros: u64,
    /// log2-spaced histogram of non-zero `|x|`, keyed by bin index.
    hist: BTreeMap<i32, u64>,
}

impl SiteStats {
    pub fn observe(&mut self, values: &[f64]) {
        for &v in values {
            if self.count == 0 {
                self.min = v;
                self.max = v;
            } else {
                self.min = self.min.min(v);
                self.max = self.max.max(v);
            }
            self.count += 1;
            let a = v.abs();
            if a == 0.0 {
                self.zeros += 1;
            } else {
                let bin = (a.log2() * BINS_PER_OCTAVE).floor() as i32;
                *self.hist.entry(bin).or_insert(0) += 1;
            }
        }
    }

    /// Nearest-rank quantile `p` of `|x|`, reported at the geometric centre of its bin.
    pub fn abs_percentile(&self, p: f64) -> f64 {
        if self.count == 0 {
            return 0.0;
        }
        let rank = ((p * self.count as f64).ceil() as u64).clamp(1, self.count);
        if rank <= self.zeros {
            return 0.0;
        }
        let mut seen = self.zeros;
        for (&bin, &n) in &self.hist {
            seen += n;
            if seen >= rank {
                let v = 2f64.powf((bin as f64 + 0.5) / BINS_PER_OCTAVE);
                // never report beyond the observed extremes
                return v.min(self.min.abs().max(self.max.abs()));
            }
        }
        self.min.abs().max(self.max.abs())
    }

    /// Fold another site's statistics into this one.
    pub fn merge(&mut self, other: &SiteStats) {
        if other.count == 0 {
            return;
        }
        if self.count == 0 {
            *self = other.clone();
            return;
        }
        self.min = self.min.min(other.min);
        self.max = self.max.max(other.max);
        self.count += other.count;
        self.zeros += other.zeros;
        for (&b, &n) in &other.hist {
            *self.hist.entry(b).or_insert(0) += n;
        }
    }

    /// Clipped range `[lo, hi]` used to build the activation grid.
    pub fn clip_range(&self) -> (f64, f64) {
        let p = self.abs_percentile(CLIP_PERCENTILE);
        (self.min.max(-p), self.max.min(p))
    }
}

/// Per-site statistics from a calibration pass.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CalibStats {
    pub sites: BTreeMap<String, SiteStats>,
    pub batches: usize,
}

impl CalibStats {
    pub fn observe(&mut self, site: &str, values: &[f64]) {
        self.sites.entry(site.to_string()).or_default().observe(values);
    }

    pub fn merge(&mut self, other: &CalibStats) {
        for (name, st) in &other.sites {
            self.sites.entry(name.clone()).or_default().merge(st);
        }
        self.batches += other.batches;
    }

    pub fn site(&self, name: &str) -> Result<&SiteStats> {
        self.sites
            .get(name)
            .ok_or_else(|| Error::Calibration(format!("no statistics recorded for activation site `{name}`")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{seq::SliceRandom, Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn uniform_percentile_is_close_to_quantile() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut s = SiteStats::default();
        let xs: Vec<f64> = (0..200_000).map(|_| rng.gen_range(-1.0..1.0)).collect();
        s.observe(&xs);
        let p = s.abs_percentile(0.999);
        assert!((p - 0.999).abs() < 0.01, "{p}");
    }

    #[test]
    fn zeros_collapse_range() {
        let mut s = SiteStats::default();
        s.observe(&[0.0; 64]);
        assert_eq!(s.clip_range(), (0.0, 0.0));
        let g = super::super::activation_grid(0.0, 0.0, 8);
        assert_eq!(g.scales[0], super::super::MIN_SCALE);
    }

    #[test]
    fn stats_do_not_depend_on_batch_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut batches: Vec<Vec<f64>> = (0..10).map(|_| (0..50).map(|_| rng.gen_range(-3.0..2.0)).collect()).collect();
        let mut a = SiteStats::default();
        batches.iter().for_each(|b| a.observe(b));
        batches.shuffle(&mut rng);
        let mut b = SiteStats::default();
        batches.iter().for_each(|x| b.observe(x));
        assert_eq!(a, b);
        assert!(a.min <= a.max);
    }
}
