//! Execution strategy for the crate's data-parallel loops.
//!
//! Every parallel entry point takes an [`Exec`] so callers (and the bench
//! suite) can pick the sequential path explicitly. Without the `parallel`
//! feature, [`Exec::Parallel`] silently runs sequentially. Results are always
//! collected in input order, so the choice never changes an output.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum Exec {
    Sequential,
    #[default]
    Parallel,
}

impl Exec {
    /// True when this strategy will actually fan out across threads.
    pub fn is_parallel(self) -> bool {
        cfg!(feature = "parallel") && self == Exec::Parallel
    }

    /// Order-preserving map over a slice.
    pub fn map<T, R, F>(self, items: &[T], f: F) -> Vec<R>
    where
        T: Sync,
        R: Send,
        F: Fn(&T) -> R + Sync + Send,
    {
        #[cfg(feature = "parallel")]
        if self == Exec::Parallel {
            return items.par_iter().map(f).collect();
        }
        items.iter().map(f).collect()
    }

    /// Applies `f` to matching mutable chunks of up to four slices in lockstep.
    ///
    /// All slices must have the same length; chunk `i` of each slice covers
    /// elements `i * chunk .. min((i + 1) * chunk, len)`.
    pub fn for_each_chunk4<A, B, C, D, F>(
        self,
        chunk: usize,
        a: &mut [A],
        b: &mut [B],
        c: &mut [C],
        d: &[D],
        f: F,
    ) where
        A: Send,
        B: Send,
        C: Send,
        D: Sync,
        F: Fn(&mut [A], &mut [B], &mut [C], &[D]) + Sync + Send,
    {
        assert!(chunk > 0, "chunk size must be positive");
        assert!(a.len() == b.len() && b.len() == c.len() && c.len() == d.len());
        #[cfg(feature = "parallel")]
        if self == Exec::Parallel {
            a.par_chunks_mut(chunk)
                .zip(b.par_chunks_mut(chunk))
                .zip(c.par_chunks_mut(chunk))
                .zip(d.par_chunks(chunk))
                .for_each(|(((a, b), c), d)| f(a, b, c, d));
            return;
        }
        a.chunks_mut(chunk)
            .zip(b.chunks_mut(chunk))
            .zip(c.chunks_mut(chunk))
            .zip(d.chunks(chunk))
            .for_each(|(((a, b), c), d)| f(a, b, c, d));
    }
}
