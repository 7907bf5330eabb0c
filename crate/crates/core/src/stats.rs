use serde::{Deserialize, Serialize};

/// A Monte Carlo mean with its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub mean: f64,
    pub se: f64,
    pub count: usize,
}

impl Estimate {
    pub fn exact(value: f64) -> Self {
        Estimate {
            mean: value,
            se: 0.0,
            count: 1,
        }
    }

    pub fn from_samples(samples: &[f64]) -> Self {
        let mut acc = MeanAccumulator::default();
        samples.iter().for_each(|&x| acc.push(x));
        acc.estimate()
    }

    /// `self - other` for independent estimates.
    pub fn minus(&self, other: &Estimate) -> Estimate {
        Estimate {
            mean: self.mean - other.mean,
            se: self.se.hypot(other.se),
            count: self.count.min(other.count),
        }
    }
}

/// Welford running mean and variance.
#[derive(Debug, Clone, Copy, Default)]
pub struct MeanAccumulator {
    n: usize,
    mean: f64,
    m2: f64,
}

impl MeanAccumulator {
    pub fn push(&mut self, x: f64) {
        self.n += 1;
        let delta = x - self.mean;
        self.mean += delta / self.n as f64;
        self.m2 += delta * (x - self.mean);
    }

    pub fn count(&self) -> usize {
        self.n
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    /// Unbiased sample variance; zero with fewer than two samples.
    pub fn variance(&self) -> f64 {
        if self.n < 2 {
            0.0
        } else {
            self.m2 / (self.n - 1) as f64
        }
    }

    pub fn estimate(&self) -> Estimate {
        let se = if self.n < 2 {
            0.0
        } else {
            (self.variance() / self.n as f64).sqrt()
        };
        Estimate {
            mean: self.mean,
            se,
            count: self.n,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn welford_matches_two_pass() {
        let xs = [1.0, 2.0, 4.0, 7.0, 11.0];
        let mean = xs.iter().sum::<f64>() / 5.0;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 4.0;
        let e = Estimate::from_samples(&xs);
        assert!((e.mean - mean).abs() < 1e-12);
        assert!((e.se - (var / 5.0).sqrt()).abs() < 1e-12);
    }
}
