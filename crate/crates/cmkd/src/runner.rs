use std::thread;

use cmkd_core::exec::Runner;

/// Environment variable capping worker threads.
pub const THREADS_ENV: &str = "CMKD_THREADS";

/// Splits index ranges across scoped threads; results come back in index
/// order, so output does not depend on the thread count.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Threaded {
    threads: usize,
}

impl Threaded {
    pub fn new(threads: usize) -> Self {
        Threaded { threads: threads.max(1) }
    }

    /// Reads `CMKD_THREADS`; missing or unparsable values mean one thread.
    pub fn from_env() -> Self {
        let threads = std::env::var(THREADS_ENV).ok().and_then(|v| v.trim().parse().ok()).unwrap_or(1);
        Self::new(threads)
    }

    pub fn threads(&self) -> usize {
        self.threads
    }
}

impl Runner for Threaded {
    fn map<T, F>(&self, n: usize, f: F) -> Vec<T>
    where
        T: Send,
        F: Fn(usize) -> T + Sync,
    {
        let workers = self.threads.min(n);
        if workers <= 1 {
            return (0..n).map(f).collect();
        }
        let f = &f;
        thread::scope(|s| {
            let handles: Vec<_> = (0..workers)
                .map(|w| {
                    let range = (w * n / workers)..((w + 1) * n / workers);
                    s.spawn(move || range.map(f).collect::<Vec<T>>())
                })
                .collect();
            handles.into_iter().flat_map(|h| h.join().expect("worker panicked")).collect()
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn order_is_preserved_for_any_thread_count() {
        for t in 1..6 {
            let out = Threaded::new(t).map(17, |i| i * i);
            assert_eq!(out, (0..17).map(|i| i * i).collect::<Vec<_>>());
        }
    }
}
