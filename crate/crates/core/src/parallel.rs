//! Central dispatch between data-parallel and sequential execution.
//!
//! Every parallel site in the crate funnels through the helpers here, so there
//! is exactly one place that decides how work is scheduled. Parallelism is
//! only ever applied across *independent output regions* (disjoint `&mut`
//! chunks); reductions keep a fixed sequential order elsewhere. Consequently
//! results are bit-identical between the parallel and sequential paths, across
//! thread counts, and with the `parallel` feature disabled.

use std::sync::atomic::{AtomicBool, Ordering};

static FORCE_SEQUENTIAL: AtomicBool = AtomicBool::new(false);

/// Force sequential execution at runtime even when the `parallel` feature is
/// enabled. Used by the benchmark suite to compare both schedules in one
/// process.
pub fn force_sequential(on: bool) {
    FORCE_SEQUENTIAL.store(on, Ordering::SeqCst);
}

/// True if work will currently run on the sequential path.
pub fn is_sequential() -> bool {
    if cfg!(feature = "parallel") {
        FORCE_SEQUENTIAL.load(Ordering::SeqCst)
    } else {
        true
    }
}

/// Apply `f(chunk_index, chunk)` to consecutive `chunk_len` slices of `data`.
///
/// Chunks are disjoint output regions, so the parallel and sequential paths
/// produce identical bytes. A trailing partial chunk is passed through as-is.
pub fn for_each_chunk_mut<T, F>(data: &mut [T], chunk_len: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync,
{
    assert!(chunk_len > 0, "chunk_len must be positive");
    #[cfg(feature = "parallel")]
    {
        if !is_sequential() {
            use rayon::prelude::*;
            data.par_chunks_mut(chunk_len)
                .enumerate()
                .for_each(|(i, c)| f(i, c));
            return;
        }
    }
    for (i, c) in data.chunks_mut(chunk_len).enumerate() {
        f(i, c);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chunked_map_matches_sequential() {
        let mut a: Vec<f32> = (0..1003).map(|i| i as f32).collect();
        let mut b = a.clone();
        for_each_chunk_mut(&mut a, 64, |i, c| {
            for (j, v) in c.iter_mut().enumerate() {
                *v = *v * 2.0 + i as f32 + j as f32;
            }
        });
        force_sequential(true);
        for_each_chunk_mut(&mut b, 64, |i, c| {
            for (j, v) in c.iter_mut().enumerate() {
                *v = *v * 2.0 + i as f32 + j as f32;
            }
        });
        force_sequential(false);
        assert_eq!(a, b);
    }
}
