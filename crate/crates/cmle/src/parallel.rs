//! Switchable data-parallel helpers.
//!
//! With the `parallel` feature (the default) these helpers fan work out over
//! the rayon global pool; without it they compile to plain sequential loops.
//! Results are identical either way: every work item writes its own output
//! slot, outputs are collected in index order, and any reduction over them
//! happens sequentially afterwards, so enabling the feature never changes a
//! single bit of output.
//!
//! The `*_seq` twins always run sequentially regardless of the feature. They
//! exist so the bench suite can measure both paths in one binary.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Applies `f` to `0..n` and collects the results in index order.
#[cfg(feature = "parallel")]
pub fn map_indexed<U, F>(n: usize, f: F) -> Vec<U>
where
    U: Send,
    F: Fn(usize) -> U + Sync + Send,
{
    (0..n).into_par_iter().map(f).collect()
}

/// Applies `f` to `0..n` and collects the results in index order.
#[cfg(not(feature = "parallel"))]
pub fn map_indexed<U, F>(n: usize, f: F) -> Vec<U>
where
    U: Send,
    F: Fn(usize) -> U + Sync + Send,
{
    map_indexed_seq(n, f)
}

/// Sequential twin of [`map_indexed`].
pub fn map_indexed_seq<U, F>(n: usize, f: F) -> Vec<U>
where
    F: Fn(usize) -> U,
{
    (0..n).map(f).collect()
}

/// Splits `data` into consecutive rows of `row_len` values and hands each row
/// to `f` together with its row index.
#[cfg(feature = "parallel")]
pub fn for_each_row<F>(data: &mut [f64], row_len: usize, f: F)
where
    F: Fn(usize, &mut [f64]) + Sync + Send,
{
    assert!(row_len > 0, "row length must be positive");
    data.par_chunks_mut(row_len)
        .enumerate()
        .for_each(|(i, row)| f(i, row));
}

/// Splits `data` into consecutive rows of `row_len` values and hands each row
/// to `f` together with its row index.
#[cfg(not(feature = "parallel"))]
pub fn for_each_row<F>(data: &mut [f64], row_len: usize, f: F)
where
    F: Fn(usize, &mut [f64]) + Sync + Send,
{
    for_each_row_seq(data, row_len, f);
}

/// Sequential twin of [`for_each_row`].
pub fn for_each_row_seq<F>(data: &mut [f64], row_len: usize, f: F)
where
    F: Fn(usize, &mut [f64]),
{
    assert!(row_len > 0, "row length must be positive");
    for (i, row) in data.chunks_mut(row_len).enumerate() {
        f(i, row);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn map_indexed_preserves_order() {
        let out = map_indexed(100, |i| i * i);
        let seq = map_indexed_seq(100, |i| i * i);
        assert_eq!(out, seq);
        assert_eq!(out[7], 49);
    }

    #[test]
    fn for_each_row_matches_sequential() {
        let mut a = vec![0.0; 12];
        let mut b = vec![0.0; 12];
        let fill = |i: usize, row: &mut [f64]| {
            for (j, v) in row.iter_mut().enumerate() {
                *v = (i * 10 + j) as f64;
            }
        };
        for_each_row(&mut a, 3, fill);
        for_each_row_seq(&mut b, 3, fill);
        assert_eq!(a, b);
        assert_eq!(a[4], 11.0);
    }
}
