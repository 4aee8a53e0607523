//! Data-parallel helpers.
//!
//! With the `parallel` feature (default) work fans out over the rayon pool;
//! without it the same closures run sequentially. Results always come back in
//! index order, so any reduction done by the caller over the returned vector
//! is deterministic regardless of thread count.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Evaluates `f(i)` for `i in 0..n` and returns the results in index order.
pub fn map_range<R, F>(n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        (0..n).into_par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..n).map(f).collect()
    }
}

/// Maps `f` over a slice, preserving order.
pub fn map_slice<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        items.par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        items.iter().map(f).collect()
    }
}

/// Runs `f(chunk_index, chunk)` over consecutive `chunk_len`-sized pieces of `data`.
pub fn for_each_chunk_mut<T, F>(data: &mut [T], chunk_len: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    assert!(chunk_len > 0);
    #[cfg(feature = "parallel")]
    {
        data.par_chunks_mut(chunk_len)
            .enumerate()
            .for_each(|(i, c)| f(i, c));
    }
    #[cfg(not(feature = "parallel"))]
    {
        data.chunks_mut(chunk_len)
            .enumerate()
            .for_each(|(i, c)| f(i, c));
    }
}

/// Builds a 3D array by evaluating `f` at every index, one axis-0 slab per task.
pub fn array3_from_fn<T, F>(shape: [usize; 3], f: F) -> ndarray::Array3<T>
where
    T: Send + Clone + Default,
    F: Fn([usize; 3]) -> T + Sync + Send,
{
    let slab = shape[1] * shape[2];
    let mut data = vec![T::default(); shape[0] * slab];
    if slab > 0 {
        for_each_chunk_mut(&mut data, slab, |i, chunk| {
            for (k, v) in chunk.iter_mut().enumerate() {
                *v = f([i, k / shape[2], k % shape[2]]);
            }
        });
    }
    ndarray::Array3::from_shape_vec(shape, data).unwrap()
}

/// Runs `f` inside a dedicated pool of `threads` workers (1 = effectively sequential).
///
/// Without the `parallel` feature this just calls `f`.
pub fn with_threads<R, F>(threads: usize, f: F) -> R
where
    R: Send,
    F: FnOnce() -> R + Send,
{
    #[cfg(feature = "parallel")]
    {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads.max(1))
            .build()
            .expect("failed to build rayon pool");
        pool.install(f)
    }
    #[cfg(not(feature = "parallel"))]
    {
        let _ = threads;
        f()
    }
}

/// Number of workers the default pool uses.
pub fn current_threads() -> usize {
    #[cfg(feature = "parallel")]
    {
        rayon::current_num_threads()
    }
    #[cfg(not(feature = "parallel"))]
    {
        1
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn map_range_preserves_order() {
        let v = map_range(100, |i| i * i);
        assert_eq!(v, (0..100).map(|i| i * i).collect::<Vec<_>>());
    }

    #[test]
    fn chunks_cover_everything() {
        let mut data = vec![0usize; 37];
        for_each_chunk_mut(&mut data, 5, |ci, c| {
            for (j, x) in c.iter_mut().enumerate() {
                *x = ci * 5 + j;
            }
        });
        assert_eq!(data, (0..37).collect::<Vec<_>>());
    }

    #[test]
    fn single_thread_pool_gives_same_result() {
        let a: f64 = map_range(1000, |i| (i as f64).sqrt()).iter().sum();
        let b: f64 = with_threads(1, || map_range(1000, |i| (i as f64).sqrt()).iter().sum());
        assert_eq!(a.to_bits(), b.to_bits());
    }
}
