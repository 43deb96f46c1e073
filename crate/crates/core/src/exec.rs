//! Data-parallel map helpers and the fork-join used for emulation atoms.
//!
//! With the `parallel` feature the loops run on rayon; without it (or with
//! [`ExecMode::Sequential`]) they are plain iterator chains. Results keep
//! input order in both modes.

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

pub fn map<T, U, F>(items: &[T], f: F) -> Vec<U>
where
    T: Sync,
    U: Send,
    F: Fn(&T) -> U + Sync + Send,
{
    map_with(ExecMode::default(), items, f)
}

pub fn map_with<T, U, F>(mode: ExecMode, items: &[T], f: F) -> Vec<U>
where
    T: Sync,
    U: Send,
    F: Fn(&T) -> U + Sync + Send,
{
    match mode {
        #[cfg(feature = "parallel")]
        ExecMode::Parallel => items.par_iter().map(f).collect(),
        _ => items.iter().map(f).collect(),
    }
}

/// A unit of work for [`fork_join`].
pub type Task<'a> = Box<dyn FnOnce() + Send + 'a>;

/// Minimum worker count of the atom pool, one per emulated resource kind.
pub const MIN_ATOM_WORKERS: usize = 3;

#[cfg(feature = "parallel")]
fn atom_pool() -> &'static rayon::ThreadPool {
    static POOL: std::sync::OnceLock<rayon::ThreadPool> = std::sync::OnceLock::new();
    POOL.get_or_init(|| {
        let n = std::thread::available_parallelism().map_or(1, |n| n.get()).max(MIN_ATOM_WORKERS);
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .thread_name(|i| format!("atom-{i}"))
            .build()
            .expect("atom thread pool")
    })
}

/// Runs all tasks concurrently and returns once every one has finished.
///
/// Tasks always get their own worker, so a task that sleeps or blocks on
/// I/O never delays the others. `Parallel` reuses a persistent rayon pool;
/// `Sequential` spawns short-lived scoped threads.
pub fn fork_join(mode: ExecMode, tasks: Vec<Task<'_>>) {
    if tasks.len() <= 1 {
        tasks.into_iter().for_each(|t| t());
        return;
    }
    match mode {
        #[cfg(feature = "parallel")]
        ExecMode::Parallel => atom_pool().scope(|s| {
            for t in tasks {
                s.spawn(move |_| t());
            }
        }),
        _ => std::thread::scope(|s| {
            for t in tasks {
                s.spawn(t);
            }
        }),
    }
}
