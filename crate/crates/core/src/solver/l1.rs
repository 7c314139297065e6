//! Nonnegative variable splitting for l1 objectives.
//!
//! `||a||_1` becomes the linear function `sum(a_plus + a_minus)` over
//! `a = a_plus - a_minus` with both parts nonnegative, which the smooth
//! solvers handle directly.

/// Descriptor mapping `2n` nonnegative split variables to `n` signed values.
/// Layout: `[a_plus; a_minus]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct L1Split {
    n: usize,
}

impl L1Split {
    pub fn new(n: usize) -> Self {
        assert!(n >= 1, "splitting needs at least one signed value");
        L1Split { n }
    }

    pub fn signed_len(&self) -> usize {
        self.n
    }

    /// Number of split variables.
    pub fn dim(&self) -> usize {
        2 * self.n
    }

    /// Recover the signed vector from split variables.
    pub fn to_signed(&self, split: &[f64]) -> Vec<f64> {
        debug_assert_eq!(split.len(), self.dim());
        (0..self.n).map(|i| split[i] - split[self.n + i]).collect()
    }

    /// Canonical split of a signed vector (positive/negative parts), used
    /// for warm starts.
    pub fn from_signed(&self, signed: &[f64]) -> Vec<f64> {
        debug_assert_eq!(signed.len(), self.n);
        let mut split = vec![0.0; self.dim()];
        for i in 0..self.n {
            split[i] = signed[i].max(0.0);
            split[self.n + i] = (-signed[i]).max(0.0);
        }
        split
    }

    /// The l1 objective in split variables: a plain sum.
    pub fn objective(&self, split: &[f64]) -> f64 {
        split.iter().sum()
    }

    pub fn objective_grad(&self) -> Vec<f64> {
        vec![1.0; self.dim()]
    }

    /// Nonnegativity bounds for the split variables.
    pub fn bounds(&self) -> (Vec<f64>, Vec<f64>) {
        (vec![0.0; self.dim()], vec![f64::INFINITY; self.dim()])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_splits_to_zero() {
        let s = L1Split::new(3);
        let split = s.from_signed(&[0.0, 0.0, 0.0]);
        assert_eq!(s.objective(&split), 0.0);
        assert_eq!(s.to_signed(&split), vec![0.0, 0.0, 0.0]);
    }

    #[test]
    fn split_of_mixed_signs() {
        let s = L1Split::new(2);
        let split = s.from_signed(&[-2.0, 3.0]);
        assert_eq!(split, vec![0.0, 3.0, 2.0, 0.0]);
        assert_eq!(s.objective(&split), 5.0);
        assert_eq!(s.to_signed(&split), vec![-2.0, 3.0]);
    }

    #[test]
    fn roundtrip_is_identity() {
        let s = L1Split::new(4);
        let signed = [1.5, -0.25, 0.0, 7.0];
        assert_eq!(s.to_signed(&s.from_signed(&signed)), signed.to_vec());
    }
}
