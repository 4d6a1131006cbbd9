use std::sync::mpsc::sync_channel;
use std::thread;

use crate::error::Result;

/// Builds batches `0..count` on one producer thread, keeping at most `depth`
/// finished batches queued, and hands them to `consume` in index order.
/// `consume` returns `Ok(false)` to stop early; the producer then exits at its
/// next send.
pub fn prefetch<B, P, C>(count: usize, depth: usize, produce: P, mut consume: C) -> Result<()>
where
    B: Send,
    P: Fn(usize) -> Result<B> + Sync,
    C: FnMut(usize, B) -> Result<bool>,
{
    let (tx, rx) = sync_channel::<Result<B>>(depth.max(1));
    thread::scope(|s| {
        let produce = &produce;
        s.spawn(move || {
            for i in 0..count {
                if tx.send(produce(i)).is_err() {
                    break;
                }
            }
        });
        for i in 0..count {
            let batch = rx.recv().expect("producer ended early")?;
            if !consume(i, batch)? {
                break;
            }
        }
        drop(rx);
        Ok(())
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;
    use std::sync::atomic::{AtomicUsize, Ordering};

    #[test]
    fn ordered_and_bounded() {
        let made = AtomicUsize::new(0);
        let mut seen = vec![];
        prefetch(
            20,
            2,
            |i| {
                made.fetch_add(1, Ordering::SeqCst);
                Ok(i * 10)
            },
            |i, b| {
                // producer can be at most depth + 1 ahead of the consumer
                assert!(made.load(Ordering::SeqCst) <= i + 4);
                seen.push(b);
                Ok(true)
            },
        )
        .unwrap();
        assert_eq!(seen, (0..20).map(|i| i * 10).collect::<Vec<_>>());
    }

    #[test]
    fn early_stop_and_errors() {
        let mut n = 0;
        prefetch(100, 3, Ok, |_, _| {
            n += 1;
            Ok(n < 5)
        })
        .unwrap();
        assert_eq!(n, 5);
        let r = prefetch(10, 1, |i| if i == 3 { Err(Error::Cancelled) } else { Ok(i) }, |_, _| Ok(true));
        assert!(matches!(r, Err(Error::Cancelled)));
    }
}
