//! Optional multi-threading for embarrassingly parallel per-scene work,
//! controlled by the `FLEXIO_NUM_THREADS` environment variable (default 1).

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use crate::error::{FlexioError, Result};

pub const ENV_NUM_THREADS: &str = "FLEXIO_NUM_THREADS";

/// Worker-thread count from the environment; unset means 1.
pub fn num_threads() -> Result<usize> {
    match std::env::var(ENV_NUM_THREADS) {
        Err(std::env::VarError::NotPresent) => Ok(1),
        Err(e) => Err(FlexioError::InvalidInput(format!("{ENV_NUM_THREADS}: {e}"))),
        Ok(s) => s
            .trim()
            .parse::<usize>()
            .ok()
            .filter(|&n| n >= 1)
            .ok_or_else(|| {
                FlexioError::InvalidInput(format!(
                    "{ENV_NUM_THREADS} must be a positive integer, got {s:?}"
                ))
            }),
    }
}

/// Order-preserving fallible map, fanned out over `threads` workers.
pub fn try_map<T, U, F>(items: &[T], threads: usize, f: F) -> Result<Vec<U>>
where
    T: Sync,
    U: Send,
    F: Fn(&T) -> Result<U> + Sync,
{
    if threads <= 1 || items.len() <= 1 {
        return items.iter().map(&f).collect();
    }
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<Result<U>>>> =
        Mutex::new((0..items.len()).map(|_| None).collect());
    std::thread::scope(|scope| {
        for _ in 0..threads.min(items.len()) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= items.len() {
                    break;
                }
                let r = f(&items[i]);
                results.lock().unwrap()[i] = Some(r);
            });
        }
    });
    results
        .into_inner()
        .unwrap()
        .into_iter()
        .map(|r| r.expect("worker left a gap"))
        .collect()
}
