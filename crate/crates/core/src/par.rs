//! Index-parallel map with a sequential fallback.
//!
//! With the `parallel` feature (default) work is spread over the rayon
//! pool; without it the same closures run in a plain loop. Results are
//! always returned in index order, so output never depends on which path
//! ran or on thread scheduling.

use crate::error::Result;

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// True when the crate was built with the rayon-backed path.
pub const fn is_parallel() -> bool {
    cfg!(feature = "parallel")
}

/// `(0..n).map(f)` on the configured backend.
pub fn map_indices<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        map_indices_par(n, f)
    }
    #[cfg(not(feature = "parallel"))]
    {
        map_indices_seq(n, f)
    }
}

pub fn map_indices_seq<T, F>(n: usize, f: F) -> Vec<T>
where
    F: Fn(usize) -> T,
{
    (0..n).map(f).collect()
}

#[cfg(feature = "parallel")]
pub fn map_indices_par<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    (0..n).into_par_iter().map(f).collect()
}

/// Fallible variant; on failure the error of the lowest failing index wins.
pub fn try_map_indices<T, F>(n: usize, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(usize) -> Result<T> + Sync + Send,
{
    map_indices(n, f).into_iter().collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn order_is_preserved() {
        let v = map_indices(1000, |i| i * i);
        assert_eq!(v, map_indices_seq(1000, |i| i * i));
    }

    #[test]
    fn lowest_error_wins() {
        let r: Result<Vec<usize>> =
            try_map_indices(50, |i| if i % 7 == 3 { Err(crate::Error::Contract(format!("bad {i}"))) } else { Ok(i) });
        match r {
            Err(crate::Error::Contract(msg)) => assert_eq!(msg, "bad 3"),
            other => panic!("unexpected {other:?}"),
        }
    }
}
