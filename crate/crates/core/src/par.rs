//! Data-parallel map with a sequential fallback. Results always come back in
//! input order, so reductions over them are deterministic either way.

/// How independent per-item work is scheduled.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Execution {
    /// Rayon's global pool when the `parallel` feature is on; sequential
    /// otherwise.
    #[default]
    Parallel,
    Sequential,
}

impl Execution {
    pub fn is_parallel(self) -> bool {
        cfg!(feature = "parallel") && self == Execution::Parallel
    }
}

pub fn map<T, R, F>(exec: Execution, items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if exec.is_parallel() {
        use rayon::prelude::*;
        return items.par_iter().map(f).collect();
    }
    let _ = exec;
    items.iter().map(f).collect()
}

pub fn map_range<R, F>(exec: Execution, n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if exec.is_parallel() {
        use rayon::prelude::*;
        return (0..n).into_par_iter().map(f).collect();
    }
    let _ = exec;
    (0..n).map(f).collect()
}

/// Collects the first error in input order.
pub fn try_map<T, R, F>(exec: Execution, items: &[T], f: F) -> crate::Result<Vec<R>>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> crate::Result<R> + Sync + Send,
{
    map(exec, items, f).into_iter().collect()
}
