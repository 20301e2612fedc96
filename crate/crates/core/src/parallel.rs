//! Gradient accumulation split across the current rayon pool.

use rayon::prelude::*;

use crate::error::Result;
use crate::grid::GradSink;

/// Runs `work` over contiguous chunks of `items`, one chunk per worker, each
/// writing into its own sink. Chunk sinks are merged into `sink` afterwards
/// and the returned partial losses are summed in chunk order.
///
/// With a single worker everything runs inline on `sink`, so results are
/// bit-reproducible.
pub(crate) fn accumulate<T, F>(
    items: &[T],
    sink: &mut GradSink,
    spares: &mut Vec<GradSink>,
    work: F,
) -> Result<f64>
where
    T: Sync,
    F: Fn(&[T], &mut [f64]) -> Result<f64> + Sync,
{
    let workers = rayon::current_num_threads().min(items.len()).max(1);
    if workers == 1 {
        return work(items, sink.values_mut());
    }
    let chunk = items.len().div_ceil(workers);
    let chunks: Vec<&[T]> = items.chunks(chunk).collect();
    while spares.len() < chunks.len() - 1 {
        let mut s = sink.clone();
        s.zero();
        spares.push(s);
    }
    for s in spares.iter_mut() {
        if s.values().len() != sink.values().len() {
            *s = sink.clone();
        }
        s.zero();
    }
    let (first, rest) = chunks.split_first().expect("at least one chunk");
    let (head, tail) = rayon::join(
        || work(first, sink.values_mut()),
        || {
            rest.par_iter()
                .zip(spares.par_iter_mut())
                .map(|(items, s)| work(items, s.values_mut()))
                .collect::<Vec<_>>()
        },
    );
    let mut total = head?;
    for partial in tail {
        total += partial?;
    }
    for s in spares.iter().take(rest.len()) {
        sink.merge_from(s)?;
    }
    Ok(total)
}
