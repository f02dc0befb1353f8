use crate::error::{Result, UumError};

/// Query × key permission matrix. `true` means the query may attend to the key.
///
/// Rows flagged as padding produce an all-zero attention distribution; any
/// other row must permit at least one key.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttentionMask {
    queries: usize,
    keys: usize,
    allowed: Vec<bool>,
    pad_rows: Vec<bool>,
}

impl AttentionMask {
    /// Every query may see every key.
    pub fn full(n: usize) -> Self {
        Self { queries: n, keys: n, allowed: vec![true; n * n], pad_rows: vec![false; n] }
    }

    pub fn from_fn(queries: usize, keys: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut allowed = Vec::with_capacity(queries * keys);
        for q in 0..queries {
            for k in 0..keys {
                allowed.push(f(q, k));
            }
        }
        Self { queries, keys, allowed, pad_rows: vec![false; queries] }
    }

    /// Bidirectional attention among real tokens; pad tokens are neither
    /// queried nor attended to.
    pub fn from_padding(real: &[bool]) -> Self {
        let n = real.len();
        let mut mask = Self::from_fn(n, n, |q, k| real[q] && real[k]);
        mask.pad_rows = real.iter().map(|r| !r).collect();
        mask
    }

    pub fn identity(n: usize) -> Self {
        Self::from_fn(n, n, |q, k| q == k)
    }

    pub fn with_pad_rows(mut self, pad_rows: Vec<bool>) -> Self {
        assert_eq!(pad_rows.len(), self.queries);
        self.pad_rows = pad_rows;
        self
    }

    pub fn queries(&self) -> usize {
        self.queries
    }

    pub fn keys(&self) -> usize {
        self.keys
    }

    pub fn allowed(&self, q: usize, k: usize) -> bool {
        self.allowed[q * self.keys + k]
    }

    pub fn row(&self, q: usize) -> &[bool] {
        &self.allowed[q * self.keys..(q + 1) * self.keys]
    }

    pub fn is_pad_row(&self, q: usize) -> bool {
        self.pad_rows[q]
    }

    /// Every non-pad query row has at least one permitted key.
    pub fn validate(&self) -> Result<()> {
        for q in 0..self.queries {
            if !self.pad_rows[q] && !self.row(q).iter().any(|&a| a) {
                return Err(UumError::AllMasked { row: q });
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn padding_mask_excludes_pad_keys_and_rows() {
        let m = AttentionMask::from_padding(&[true, true, false]);
        assert!(m.allowed(0, 1));
        assert!(!m.allowed(0, 2));
        assert!(m.is_pad_row(2));
        assert!(m.validate().is_ok());
    }

    #[test]
    fn empty_real_row_fails_validation() {
        let m = AttentionMask::from_fn(2, 2, |q, _| q == 0);
        assert!(matches!(m.validate(), Err(UumError::AllMasked { row: 1 })));
    }
}
