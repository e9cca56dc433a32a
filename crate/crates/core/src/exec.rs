//! Data-parallel helpers with a sequential fallback.
//!
//! With the `parallel` feature (default) work fans out over the rayon pool;
//! without it, or with [`ExecMode::Sequential`], the same closures run in order.
//! Outputs are always collected in input order so callers can reduce
//! deterministically regardless of worker count.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExecMode {
    Sequential,
    Parallel,
}

impl Default for ExecMode {
    fn default() -> Self {
        if cfg!(feature = "parallel") {
            ExecMode::Parallel
        } else {
            ExecMode::Sequential
        }
    }
}

pub fn map_ordered<T, R, F>(mode: ExecMode, items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(usize, &T) -> R + Sync + Send,
{
    match mode {
        #[cfg(feature = "parallel")]
        ExecMode::Parallel => items.par_iter().enumerate().map(|(i, t)| f(i, t)).collect(),
        _ => items.iter().enumerate().map(|(i, t)| f(i, t)).collect(),
    }
}

/// Configure the global worker pool from `MERGEDISTILL_WORKERS`, if set.
/// Returns the effective worker count.
pub fn init_workers_from_env() -> usize {
    let requested = std::env::var("MERGEDISTILL_WORKERS")
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0);
    init_workers(requested)
}

#[cfg(feature = "parallel")]
fn init_workers(requested: Option<usize>) -> usize {
    if let Some(n) = requested {
        // Fails only if the pool was already built; keep whatever exists.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    rayon::current_num_threads()
}

#[cfg(not(feature = "parallel"))]
fn init_workers(_requested: Option<usize>) -> usize {
    1
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn both_modes_keep_order() {
        let xs: Vec<u64> = (0..1000).collect();
        let seq = map_ordered(ExecMode::Sequential, &xs, |i, x| x * 3 + i as u64);
        let par = map_ordered(ExecMode::Parallel, &xs, |i, x| x * 3 + i as u64);
        assert_eq!(seq, par);
    }
}
