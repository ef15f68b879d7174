//! Order-stable reductions shared by the estimators and metrics.

/// Neumaier-compensated sum.
pub fn sum<I: IntoIterator<Item = f64>>(values: I) -> f64 {
    let mut acc = CompensatedSum::default();
    for v in values {
        acc.add(v);
    }
    acc.value()
}

/// Running compensated accumulator.
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
        // Infinite inputs poison the compensation term with NaN.
        if self.sum.is_infinite() {
            self.sum
        } else {
            self.sum + self.comp
        }
    }
}

pub fn mean(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        None
    } else {
        Some(sum(values.iter().copied()) / values.len() as f64)
    }
}

/// Sample variance with an (n - 1) denominator. Two-pass for stability.
pub fn sample_variance(values: &[f64]) -> Option<f64> {
    if values.len() < 2 {
        return None;
    }
    let m = mean(values)?;
    let ss = sum(values.iter().map(|v| (v - m) * (v - m)));
    Some(ss / (values.len() - 1) as f64)
}

/// Population variance (denominator n).
pub fn population_variance(values: &[f64]) -> Option<f64> {
    let m = mean(values)?;
    let ss = sum(values.iter().map(|v| (v - m) * (v - m)));
    Some(ss / values.len() as f64)
}

/// SplitMix64 finalizer, used to derive independent RNG seeds from counters.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed for the stream identified by `(master, a, b)`.
pub fn derive_seed(master: u64, a: u64, b: u64) -> u64 {
    mix64(mix64(mix64(master) ^ a) ^ b.rotate_left(32))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn compensated_sum_recovers_small_terms() {
        let mut vals = [1e16, 1.0, -1e16];
        assert_eq!(sum(vals.iter().copied()), 1.0);
        vals.reverse();
        assert_eq!(sum(vals.iter().copied()), 1.0);
    }

    #[test]
    fn infinite_sum_stays_infinite() {
        assert_eq!(sum([1.0, f64::INFINITY, 2.0]), f64::INFINITY);
    }

    #[test]
    fn variances() {
        let v = [1.0, 2.0, 3.0, 4.0];
        assert!((sample_variance(&v).unwrap() - 5.0 / 3.0).abs() < 1e-15);
        assert!((population_variance(&v).unwrap() - 1.25).abs() < 1e-15);
        assert!(sample_variance(&[1.0]).is_none());
    }

    #[test]
    fn derived_seeds_differ() {
        let a = derive_seed(7, 0, 1);
        let b = derive_seed(7, 1, 0);
        let c = derive_seed(8, 0, 1);
        assert_ne!(a, b);
        assert_ne!(a, c);
        assert_eq!(a, derive_seed(7, 0, 1));
    }
}
