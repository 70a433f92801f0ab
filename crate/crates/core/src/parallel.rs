//! Optional intra-op parallelism across batch items.
//!
//! The worker count comes from `MADF_THREADS` (default 1). Work is split by
//! batch item only and every cross-item reduction is summed in item order,
//! so results do not depend on the thread count.

use std::sync::OnceLock;

static THREADS: OnceLock<usize> = OnceLock::new();

/// Worker count, read once from `MADF_THREADS`.
pub fn threads() -> usize {
    *THREADS.get_or_init(|| {
        std::env::var("MADF_THREADS")
            .ok()
            .and_then(|v| v.trim().parse::<usize>().ok())
            .filter(|&v| v >= 1)
            .unwrap_or(1)
    })
}

/// Runs `f(item, chunk)` over consecutive `chunk_len`-sized chunks of `out`.
pub fn for_each_chunk<T, F>(out: &mut [T], chunk_len: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync,
{
    if chunk_len == 0 {
        return;
    }
    let workers = threads().min(out.len() / chunk_len);
    if workers <= 1 {
        for (i, chunk) in out.chunks_mut(chunk_len).enumerate() {
            f(i, chunk);
        }
        return;
    }
    let items = out.len() / chunk_len;
    let per_worker = items.div_ceil(workers);
    std::thread::scope(|scope| {
        for (wi, group) in out.chunks_mut(per_worker * chunk_len).enumerate() {
            let f = &f;
            scope.spawn(move || {
                for (j, chunk) in group.chunks_mut(chunk_len).enumerate() {
                    f(wi * per_worker + j, chunk);
                }
            });
        }
    });
}

/// Maps `f` over `0..n` and returns the results in index order.
pub fn map_items<R, F>(n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync,
{
    let workers = threads().min(n);
    if workers <= 1 {
        return (0..n).map(f).collect();
    }
    let per_worker = n.div_ceil(workers);
    let mut slots: Vec<Option<R>> = (0..n).map(|_| None).collect();
    std::thread::scope(|scope| {
        for (wi, group) in slots.chunks_mut(per_worker).enumerate() {
            let f = &f;
            scope.spawn(move || {
                for (j, slot) in group.iter_mut().enumerate() {
                    *slot = Some(f(wi * per_worker + j));
                }
            });
        }
    });
    slots.into_iter().map(|s| s.expect("worker filled slot")).collect()
}
