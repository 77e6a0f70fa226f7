//! Data-parallel map helpers.
//!
//! Every parallel loop in the crate goes through [`map_indexed`], which always
//! returns results in index order. Reductions are then performed sequentially
//! by the caller, so floating-point sums do not depend on the worker count.
//!
//! With the `parallel` feature disabled (or [`ExecMode::Sequential`]
//! requested), the same closures run on the calling thread.

/// Execution strategy for an indexed map.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ExecMode {
    Sequential,
    #[default]
    Parallel,
}

impl ExecMode {
    /// `Parallel` when the crate was built with rayon support.
    pub fn best() -> Self {
        if cfg!(feature = "parallel") {
            ExecMode::Parallel
        } else {
            ExecMode::Sequential
        }
    }
}

/// Evaluate `f(0..n)` and collect the outputs in index order.
pub fn map_indexed<T, F>(mode: ExecMode, n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    match mode {
        ExecMode::Sequential => (0..n).map(f).collect(),
        ExecMode::Parallel => par_map(n, f),
    }
}

/// Like [`map_indexed`] but short-circuits on the first error in index order.
pub fn try_map_indexed<T, E, F>(mode: ExecMode, n: usize, f: F) -> Result<Vec<T>, E>
where
    T: Send,
    E: Send,
    F: Fn(usize) -> Result<T, E> + Sync + Send,
{
    map_indexed(mode, n, f).into_iter().collect()
}

#[cfg(feature = "parallel")]
fn par_map<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    use rayon::prelude::*;
    (0..n).into_par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
fn par_map<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    (0..n).map(f).collect()
}

/// Number of worker threads parallel maps will use.
pub fn worker_count() -> usize {
    #[cfg(feature = "parallel")]
    {
        rayon::current_num_threads()
    }
    #[cfg(not(feature = "parallel"))]
    {
        1
    }
}

/// Fix the worker count for the rest of the process. Must run before the
/// first parallel map; later calls fail.
pub fn set_worker_count(n: usize) -> crate::Result<()> {
    if n == 0 {
        return Err(crate::Error::invalid("worker count must be at least 1"));
    }
    #[cfg(feature = "parallel")]
    {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| crate::Error::invalid(format!("cannot configure workers: {e}")))
    }
    #[cfg(not(feature = "parallel"))]
    {
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn both_modes_preserve_order() {
        let seq = map_indexed(ExecMode::Sequential, 100, |i| i * i);
        let par = map_indexed(ExecMode::Parallel, 100, |i| i * i);
        assert_eq!(seq, par);
        assert_eq!(seq[7], 49);
    }

    #[test]
    fn try_map_reports_first_error() {
        let r: Result<Vec<usize>, usize> =
            try_map_indexed(ExecMode::Parallel, 10, |i| if i % 4 == 3 { Err(i) } else { Ok(i) });
        assert_eq!(r, Err(3));
    }
}
