//! Data-parallel helpers.
//!
//! With the `parallel` feature (on by default) [`Exec::Parallel`] fans work
//! out over the rayon pool; without it every call runs sequentially. Results
//! are always collected in input order, so both paths produce identical output.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Exec {
    Sequential,
    Parallel,
}

impl Default for Exec {
    fn default() -> Self {
        if cfg!(feature = "parallel") {
            Exec::Parallel
        } else {
            Exec::Sequential
        }
    }
}

pub fn map<T, R, F>(exec: Exec, items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    match exec {
        #[cfg(feature = "parallel")]
        Exec::Parallel => items.par_iter().map(f).collect(),
        _ => items.iter().map(f).collect(),
    }
}

pub fn map_range<R, F>(exec: Exec, n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    match exec {
        #[cfg(feature = "parallel")]
        Exec::Parallel => (0..n).into_par_iter().map(f).collect(),
        _ => (0..n).map(f).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn both_paths_agree() {
        let xs: Vec<u64> = (0..1000).collect();
        let f = |x: &u64| x.wrapping_mul(0x9E37_79B9) % 97;
        assert_eq!(map(Exec::Sequential, &xs, f), map(Exec::Parallel, &xs, f));
        assert_eq!(map_range(Exec::Parallel, 10, |i| i * 2), (0..10).map(|i| i * 2).collect::<Vec<_>>());
    }
}
