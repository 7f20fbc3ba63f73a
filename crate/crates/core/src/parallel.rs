//! Order-preserving data parallelism over slices.
//!
//! Results always come back in input order, so any reduction done by the
//! caller is independent of the worker count.

use std::num::NonZeroUsize;

/// Worker count for a `threads` setting where 0 means "all cores".
pub fn resolve_threads(threads: usize) -> usize {
    if threads > 0 {
        threads
    } else {
        std::thread::available_parallelism().map_or(1, NonZeroUsize::get)
    }
}

pub fn map_ordered<T, R, F>(items: &[T], threads: usize, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync,
{
    let workers = resolve_threads(threads).min(items.len()).max(1);
    if workers == 1 {
        return items.iter().map(&f).collect();
    }
    let chunk = items.len().div_ceil(workers);
    std::thread::scope(|scope| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|part| {
                let f = &f;
                scope.spawn(move || part.iter().map(f).collect::<Vec<R>>())
            })
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("worker panicked"))
            .collect()
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn order_is_preserved_for_any_worker_count() {
        let items: Vec<u64> = (0..103).collect();
        let serial = map_ordered(&items, 1, |x| x * x);
        for threads in [2, 3, 8, 200] {
            assert_eq!(map_ordered(&items, threads, |x| x * x), serial);
        }
        assert!(map_ordered(&[] as &[u64], 4, |x| *x).is_empty());
    }
}
