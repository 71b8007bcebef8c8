//! Data-parallel execution with a sequential fallback.
//!
//! With the `parallel` feature (default) work fans out over rayon; without it,
//! or with [`Parallelism::Sequential`], the same closures run in order on the
//! calling thread.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Parallelism {
    Sequential,
    #[default]
    Parallel,
}

impl Parallelism {
    pub fn effective(self) -> Parallelism {
        if cfg!(feature = "parallel") {
            self
        } else {
            Parallelism::Sequential
        }
    }
}

/// Maps `f` over `items`, preserving order.
pub fn map<T, R, F>(mode: Parallelism, items: Vec<T>, f: F) -> Vec<R>
where
    T: Send,
    R: Send,
    F: Fn(T) -> R + Sync + Send,
{
    match mode.effective() {
        #[cfg(feature = "parallel")]
        Parallelism::Parallel => {
            use rayon::prelude::*;
            items.into_par_iter().map(f).collect()
        }
        _ => items.into_iter().map(f).collect(),
    }
}

/// Runs `workers` copies of `worker(i)` concurrently on a dedicated pool of
/// exactly that many threads, or one after another in sequential mode.
pub fn run_workers<F>(mode: Parallelism, workers: usize, worker: F)
where
    F: Fn(usize) + Sync + Send,
{
    match mode.effective() {
        #[cfg(feature = "parallel")]
        Parallelism::Parallel if workers > 1 => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(workers)
                .thread_name(|i| format!("moss-worker-{i}"))
                .build()
                .expect("building worker pool");
            pool.scope(|s| {
                for i in 0..workers {
                    let worker = &worker;
                    s.spawn(move |_| worker(i));
                }
            });
        }
        _ => (0..workers).for_each(worker),
    }
}
