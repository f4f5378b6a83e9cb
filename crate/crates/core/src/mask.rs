//! Explicit boolean attention masks.
//!
//! A mask is attached to every attention computation: rows index queries,
//! columns index keys, and `allowed[i][j]` says whether query `i` may attend
//! to key `j`. The −∞-sentinel convention is realized inside the masked
//! softmax instead of being written into the logits.

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskSpec {
    rows: usize,
    cols: usize,
    allowed: Vec<bool>, // row-major rows×cols
    /// Per-row allowed prefix length when every row's allowed set is a
    /// contiguous prefix (true for causal and full masks); lets the softmax
    /// run branch-free.
    prefix: Option<Vec<usize>>,
}

fn prefix_lengths(rows: usize, cols: usize, allowed: &[bool]) -> Option<Vec<usize>> {
    let mut lens = Vec::with_capacity(rows);
    for i in 0..rows {
        let row = &allowed[i * cols..(i + 1) * cols];
        let len = row.iter().position(|&a| !a).unwrap_or(cols);
        if row[len..].iter().any(|&a| a) {
            return None; // allowed entries after the first gap
        }
        lens.push(len);
    }
    Some(lens)
}

impl MaskSpec {
    /// Build from an explicit boolean matrix. Every row must allow at least
    /// one key.
    pub fn new(rows: usize, cols: usize, allowed: Vec<bool>) -> Result<Self> {
        if rows == 0 || cols == 0 || allowed.len() != rows * cols {
            return Err(Error::Mask(format!(
                "allowed matrix must be {rows}x{cols}, got {} entries",
                allowed.len()
            )));
        }
        for i in 0..rows {
            if !allowed[i * cols..(i + 1) * cols].iter().any(|&a| a) {
                return Err(Error::Mask(format!("row {i} has no allowed entries")));
            }
        }
        let prefix = prefix_lengths(rows, cols, &allowed);
        Ok(MaskSpec {
            rows,
            cols,
            allowed,
            prefix,
        })
    }

    /// All-allowed mask.
    pub fn full(rows: usize, cols: usize) -> Self {
        MaskSpec {
            rows,
            cols,
            allowed: vec![true; rows * cols],
            prefix: Some(vec![cols; rows]),
        }
    }

    /// Per-row prefix lengths when the mask is prefix-shaped.
    pub fn prefix_lens(&self) -> Option<&[usize]> {
        self.prefix.as_deref()
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn allowed(&self, i: usize, j: usize) -> bool {
        self.allowed[i * self.cols + j]
    }

    pub fn row(&self, i: usize) -> &[bool] {
        &self.allowed[i * self.cols..(i + 1) * self.cols]
    }
}

/// Causal visibility with a key offset: `allowed[i][j] ⇔ j ≤ i + key_offset`.
///
/// With `key_offset = cols − rows` every query sees the whole leading
/// `cols − rows` prefix plus causal visibility within the trailing square
/// block — the cross-attention mask used by the latent queries.
pub fn causal_mask(rows: usize, cols: usize, key_offset: usize) -> Result<MaskSpec> {
    if rows == 0 || cols == 0 {
        return Err(Error::Mask("mask dimensions must be positive".into()));
    }
    if cols < rows || key_offset > cols - rows {
        return Err(Error::Mask(format!(
            "key_offset {key_offset} out of range for {rows}x{cols} causal mask (max {})",
            cols as isize - rows as isize
        )));
    }
    let mut allowed = vec![false; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            allowed[i * cols + j] = j <= i + key_offset;
        }
    }
    MaskSpec::new(rows, cols, allowed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn rows_of(m: &MaskSpec) -> Vec<Vec<bool>> {
        (0..m.rows()).map(|i| m.row(i).to_vec()).collect()
    }

    #[test]
    fn square_causal() {
        let m = causal_mask(3, 3, 0).unwrap();
        assert_eq!(
            rows_of(&m),
            vec![
                vec![true, false, false],
                vec![true, true, false],
                vec![true, true, true],
            ]
        );
    }

    #[test]
    fn latent_over_prefix() {
        let m = causal_mask(2, 4, 2).unwrap();
        assert_eq!(
            rows_of(&m),
            vec![
                vec![true, true, true, false],
                vec![true, true, true, true],
            ]
        );
    }

    #[test]
    fn single_cell() {
        let m = causal_mask(1, 1, 0).unwrap();
        assert_eq!(rows_of(&m), vec![vec![true]]);
    }

    #[test]
    fn offset_out_of_range() {
        assert!(causal_mask(3, 4, 2).is_err());
        assert!(causal_mask(4, 3, 0).is_err());
    }

    #[test]
    fn fully_masked_row_rejected() {
        let err = MaskSpec::new(2, 2, vec![true, false, false, false]).unwrap_err();
        assert!(err.to_string().contains("row 1"));
    }

    #[test]
    fn prefix_detection() {
        let causal = causal_mask(3, 5, 2).unwrap();
        assert_eq!(causal.prefix_lens(), Some(&[3, 4, 5][..]));
        assert_eq!(MaskSpec::full(2, 4).prefix_lens(), Some(&[4, 4][..]));
        // a gap breaks the prefix form
        let gappy = MaskSpec::new(1, 3, vec![true, false, true]).unwrap();
        assert_eq!(gappy.prefix_lens(), None);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn causal_structure(rows in 1usize..12, extra in 0usize..8) {
            let cols = rows + extra;
            let offset = extra; // maximal valid offset
            let m = causal_mask(rows, cols, offset).unwrap();
            for i in 0..rows {
                for j in 0..cols {
                    prop_assert_eq!(m.allowed(i, j), j <= i + offset);
                }
                prop_assert!(m.row(i).iter().any(|&a| a));
            }
        }
    }
}
