use std::sync::atomic::{AtomicUsize, Ordering};

/// Runs `work` on every item using up to `jobs` threads. Results come back
/// in item order regardless of scheduling.
pub fn for_each<T: Sync, R: Send>(items: &[T], jobs: usize, work: impl Fn(&T) -> R + Sync) -> Vec<R> {
    let jobs = jobs.clamp(1, items.len().max(1));
    if jobs == 1 {
        return items.iter().map(work).collect();
    }
    let next = AtomicUsize::new(0);
    let mut results: Vec<(usize, R)> = std::thread::scope(|scope| {
        let handles: Vec<_> = (0..jobs)
            .map(|_| {
                scope.spawn(|| {
                    let mut done = Vec::new();
                    loop {
                        let i = next.fetch_add(1, Ordering::Relaxed);
                        let Some(item) = items.get(i) else { break };
                        done.push((i, work(item)));
                    }
                    done
                })
            })
            .collect();
        handles.into_iter().flat_map(|h| h.join().expect("worker thread panicked")).collect()
    });
    results.sort_by_key(|(i, _)| *i);
    results.into_iter().map(|(_, r)| r).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn keeps_item_order() {
        let items: Vec<u64> = (0..50).collect();
        for jobs in [1, 3, 8] {
            assert_eq!(for_each(&items, jobs, |x| x * x), items.iter().map(|x| x * x).collect::<Vec<_>>());
        }
        assert!(for_each(&Vec::<u64>::new(), 4, |x| *x).is_empty());
    }
}
