//! Deterministic fan-out over indices with scoped threads.

use std::thread;

/// Worker count from `LRX_THREADS` (default 1).
pub fn threads() -> usize {
    std::env::var("LRX_THREADS").ok().and_then(|v| v.parse::<usize>().ok()).filter(|&n| n > 0).unwrap_or(1)
}

/// `(0..n).map(f)` evaluated on up to `workers` threads; results keep index
/// order.
pub fn map_indexed<T, F>(n: usize, workers: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync,
{
    let workers = workers.clamp(1, n.max(1));
    if workers == 1 {
        return (0..n).map(f).collect();
    }
    let f = &f;
    let mut out: Vec<Option<T>> = (0..n).map(|_| None).collect();
    thread::scope(|s| {
        let per = n.div_ceil(workers);
        for (w, slot) in out.chunks_mut(per).enumerate() {
            s.spawn(move || {
                for (j, o) in slot.iter_mut().enumerate() {
                    *o = Some(f(w * per + j));
                }
            });
        }
    });
    out.into_iter().map(|o| o.expect("every index visited")).collect()
}
