//! Data-parallel map helpers. With the `parallel` feature (default) the
//! dispatching variants fan out over rayon; results are always collected in
//! input order, so downstream fixed-order reductions stay deterministic.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Map over a slice, parallel when the `parallel` feature is enabled.
pub fn map_collect<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync,
{
    #[cfg(feature = "parallel")]
    {
        items.par_iter().map(&f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        items.iter().map(f).collect()
    }
}

/// Sequential reference path, available regardless of features (benched
/// against `map_collect`).
pub fn map_collect_seq<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    F: Fn(&T) -> R,
{
    items.iter().map(f).collect()
}

/// Map over `0..n`, parallel when the `parallel` feature is enabled.
pub fn map_range<R, F>(n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync,
{
    #[cfg(feature = "parallel")]
    {
        (0..n).into_par_iter().map(&f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..n).map(f).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parallel_and_sequential_agree_in_order() {
        let xs: Vec<u64> = (0..1000).collect();
        let f = |x: &u64| x * x + 1;
        assert_eq!(map_collect(&xs, f), map_collect_seq(&xs, f));
        assert_eq!(map_range(10, |i| i * 2), vec![0, 2, 4, 6, 8, 10, 12, 14, 16, 18]);
    }
}
