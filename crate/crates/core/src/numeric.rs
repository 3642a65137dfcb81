//! Summation helpers used by the reductions.

/// Neumaier-compensated running sum.
#[derive(Debug, Clone, Copy, Default)]
pub struct CompensatedSum {
    sum: f64,
    comp: f64,
}

impl CompensatedSum {
    pub fn add(&mut self, v: f64) {
        let t = self.sum + v;
        if self.sum.abs() >= v.abs() {
            self.comp += (self.sum - t) + v;
        } else {
            self.comp += (v - t) + self.sum;
        }
        self.sum = t;
    }

    pub fn value(&self) -> f64 {
        self.sum + self.comp
    }
}

/// Pairwise (cascade) summation with compensated leaves and merges; the
/// split points depend only on the length.
pub fn pairwise_sum(v: &[f64]) -> f64 {
    cascade(v).value()
}

fn cascade(v: &[f64]) -> CompensatedSum {
    const BASE: usize = 32;
    if v.len() <= BASE {
        let mut acc = CompensatedSum::default();
        for &x in v {
            acc.add(x);
        }
        return acc;
    }
    let mid = v.len() / 2;
    let mut left = cascade(&v[..mid]);
    let right = cascade(&v[mid..]);
    left.add(right.sum);
    left.comp += right.comp;
    left
}

/// Mean and sample standard deviation (`n − 1` denominator; 0 for one value).
pub fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = pairwise_sum(v) / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let sq: Vec<f64> = v.iter().map(|x| (x - mean) * (x - mean)).collect();
    (mean, (pairwise_sum(&sq) / (n - 1) as f64).sqrt())
}
