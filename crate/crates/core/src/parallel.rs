//! Order-preserving data-parallel helpers.
//!
//! Every helper returns results in input order, so reductions performed by
//! the caller afterwards are sequential and bitwise reproducible no matter
//! how the work was scheduled.

/// How a data-parallel loop is executed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Exec {
    Sequential,
    /// Rayon work stealing. Without the `parallel` feature this runs sequentially.
    #[default]
    Parallel,
}

impl Exec {
    pub fn available_parallelism() -> bool {
        cfg!(feature = "parallel")
    }
}

/// Maps `f` over `0..n`, returning results in index order.
pub fn map_indexed<R, F>(exec: Exec, n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    match exec {
        #[cfg(feature = "parallel")]
        Exec::Parallel => {
            use rayon::prelude::*;
            (0..n).into_par_iter().map(f).collect()
        }
        _ => (0..n).map(f).collect(),
    }
}

/// Maps `f` over a slice, returning results in slice order.
pub fn map_slice<T, R, F>(exec: Exec, items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    map_indexed(exec, items.len(), |i| f(&items[i]))
}

/// Like [`map_indexed`] but stops at the first error in index order.
pub fn try_map_indexed<R, E, F>(exec: Exec, n: usize, f: F) -> Result<Vec<R>, E>
where
    R: Send,
    E: Send,
    F: Fn(usize) -> Result<R, E> + Sync + Send,
{
    map_indexed(exec, n, f).into_iter().collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn both_modes_preserve_order() {
        let seq = map_indexed(Exec::Sequential, 100, |i| i * i);
        let par = map_indexed(Exec::Parallel, 100, |i| i * i);
        assert_eq!(seq, par);
        assert_eq!(seq[7], 49);
    }

    #[test]
    fn first_error_wins() {
        let r: Result<Vec<usize>, usize> =
            try_map_indexed(Exec::Parallel, 10, |i| if i >= 3 { Err(i) } else { Ok(i) });
        assert_eq!(r, Err(3));
    }
}
