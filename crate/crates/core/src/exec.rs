//! Data-parallel map with a deterministic, order-preserving result.
//!
//! With the `parallel` feature and more than one thread, work runs on a
//! dedicated rayon pool. Otherwise everything runs on the calling thread.
//! Results always come back in input order, so reductions performed by the
//! caller are bitwise identical across thread counts.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

pub struct Executor {
    threads: usize,
    #[cfg(feature = "parallel")]
    pool: Option<rayon::ThreadPool>,
}

impl std::fmt::Debug for Executor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Executor").field("threads", &self.threads).finish()
    }
}

impl Default for Executor {
    fn default() -> Self {
        Self::sequential()
    }
}

impl Executor {
    pub fn sequential() -> Self {
        Self {
            threads: 1,
            #[cfg(feature = "parallel")]
            pool: None,
        }
    }

    /// Falls back to sequential execution when the pool cannot be built
    /// or the crate is compiled without the `parallel` feature.
    pub fn new(threads: usize) -> Self {
        #[cfg(feature = "parallel")]
        {
            if threads > 1 {
                if let Ok(pool) = rayon::ThreadPoolBuilder::new().num_threads(threads).build() {
                    return Self {
                        threads,
                        pool: Some(pool),
                    };
                }
                log::warn!("could not build a {threads}-thread pool, running sequentially");
            }
        }
        if threads > 1 && !cfg!(feature = "parallel") {
            log::warn!("built without the `parallel` feature; ignoring threads = {threads}");
        }
        Self::sequential()
    }

    pub fn threads(&self) -> usize {
        self.threads
    }

    pub fn is_parallel(&self) -> bool {
        #[cfg(feature = "parallel")]
        {
            self.pool.is_some()
        }
        #[cfg(not(feature = "parallel"))]
        {
            false
        }
    }

    pub fn map<T, R, F>(&self, items: &[T], f: F) -> Vec<R>
    where
        T: Sync,
        R: Send,
        F: Fn(&T) -> R + Sync + Send,
    {
        #[cfg(feature = "parallel")]
        if let Some(pool) = &self.pool {
            return pool.install(|| items.par_iter().map(&f).collect());
        }
        items.iter().map(f).collect()
    }

    pub fn map_range<R, F>(&self, n: usize, f: F) -> Vec<R>
    where
        R: Send,
        F: Fn(usize) -> R + Sync + Send,
    {
        #[cfg(feature = "parallel")]
        if let Some(pool) = &self.pool {
            return pool.install(|| (0..n).into_par_iter().map(&f).collect());
        }
        (0..n).map(f).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn order_preserved_for_any_thread_count() {
        let items: Vec<u64> = (0..257).collect();
        let seq = Executor::sequential().map(&items, |x| x * x);
        let par = Executor::new(4).map(&items, |x| x * x);
        assert_eq!(seq, par);
        assert_eq!(Executor::new(3).map_range(10, |i| i + 1), (1..=10).collect::<Vec<_>>());
    }

    #[test]
    fn float_reduction_is_thread_count_independent() {
        let items: Vec<f64> = (0..1000).map(|i| (i as f64 * 0.37).sin() * 1e-3).collect();
        let sum = |e: &Executor| e.map(&items, |v| v * 1.000001).iter().sum::<f64>();
        assert_eq!(sum(&Executor::sequential()).to_bits(), sum(&Executor::new(4)).to_bits());
    }
}
