//! Data-parallel helpers.
//!
//! With the `parallel` feature, [`Exec::Parallel`] fans work out over the
//! current rayon pool. Without it every mode runs sequentially. Results are
//! always returned in input order, so reductions done by the caller over the
//! returned vector are bit-identical across modes and worker counts.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Exec {
    #[default]
    Parallel,
    Sequential,
}

impl Exec {
    pub fn map<T, R, F>(self, items: &[T], f: F) -> Vec<R>
    where
        T: Sync,
        R: Send,
        F: Fn(&T) -> R + Sync + Send,
    {
        match self {
            #[cfg(feature = "parallel")]
            Exec::Parallel => items.par_iter().map(f).collect(),
            _ => items.iter().map(f).collect(),
        }
    }

    pub fn map_range<R, F>(self, n: usize, f: F) -> Vec<R>
    where
        R: Send,
        F: Fn(usize) -> R + Sync + Send,
    {
        match self {
            #[cfg(feature = "parallel")]
            Exec::Parallel => (0..n).into_par_iter().map(f).collect(),
            _ => (0..n).map(f).collect(),
        }
    }

    pub fn is_parallel(self) -> bool {
        cfg!(feature = "parallel") && self == Exec::Parallel
    }
}

/// Run `f` with at most `workers` threads. `workers <= 1` selects sequential
/// execution; otherwise a dedicated pool of that size is used.
pub fn with_workers<R, F>(workers: usize, f: F) -> R
where
    R: Send,
    F: FnOnce(Exec) -> R + Send,
{
    if workers <= 1 {
        return f(Exec::Sequential);
    }
    #[cfg(feature = "parallel")]
    {
        match rayon::ThreadPoolBuilder::new().num_threads(workers).build() {
            Ok(pool) => pool.install(|| f(Exec::Parallel)),
            Err(_) => f(Exec::Sequential),
        }
    }
    #[cfg(not(feature = "parallel"))]
    {
        f(Exec::Sequential)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn modes_agree_and_keep_order() {
        let items: Vec<u64> = (0..100).collect();
        let a = Exec::Parallel.map(&items, |x| x * x);
        let b = Exec::Sequential.map(&items, |x| x * x);
        assert_eq!(a, b);
        assert_eq!(a[7], 49);
        let c = with_workers(3, |exec| exec.map_range(10, |i| i + 1));
        assert_eq!(c, (1..=10).collect::<Vec<_>>());
    }
}
