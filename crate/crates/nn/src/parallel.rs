//! Data-parallel helpers.
//!
//! With the `parallel` feature (default) work is spread over the rayon pool;
//! without it every helper runs sequentially. Either way results come back
//! in input order and reductions are performed sequentially in that order,
//! so outputs are bit-identical regardless of thread count.

use std::sync::atomic::{AtomicU8, Ordering};

use serde::{Deserialize, Serialize};

use crate::params::{Gradients, ParamStore};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Parallelism {
    Sequential,
    #[default]
    Parallel,
}

static MODE: AtomicU8 = AtomicU8::new(1);

/// Process-wide default used by [`map`] and [`batch_gradients`].
pub fn set_mode(mode: Parallelism) {
    MODE.store(matches!(mode, Parallelism::Parallel) as u8, Ordering::Relaxed);
}

pub fn mode() -> Parallelism {
    if MODE.load(Ordering::Relaxed) == 1 {
        Parallelism::Parallel
    } else {
        Parallelism::Sequential
    }
}

/// True when parallel execution is compiled in.
pub const fn available() -> bool {
    cfg!(feature = "parallel")
}

pub fn map_with<T, R, F>(mode: Parallelism, items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    match mode {
        #[cfg(feature = "parallel")]
        Parallelism::Parallel if items.len() > 1 => {
            use rayon::prelude::*;
            items.par_iter().map(f).collect()
        }
        _ => items.iter().map(f).collect(),
    }
}

pub fn map<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    map_with(mode(), items, f)
}

/// Runs `f` for every item, then sums losses and gradients in item order.
pub fn batch_gradients_with<T, F>(mode: Parallelism, store: &ParamStore, items: &[T], f: F) -> (f64, Gradients)
where
    T: Sync,
    F: Fn(&T) -> (f64, Gradients) + Sync + Send,
{
    let parts = map_with(mode, items, f);
    let mut total = 0.0;
    let mut grads = Gradients::for_store(store);
    for (loss, g) in parts {
        total += loss;
        grads.merge(g);
    }
    (total, grads)
}

pub fn batch_gradients<T, F>(store: &ParamStore, items: &[T], f: F) -> (f64, Gradients)
where
    T: Sync,
    F: Fn(&T) -> (f64, Gradients) + Sync + Send,
{
    batch_gradients_with(mode(), store, items, f)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamId;
    use crate::tensor::Tensor;

    #[test]
    fn parallel_and_sequential_agree_bitwise() {
        let mut store = ParamStore::new();
        store.add("w", Tensor::vector(vec![0.0; 3]));
        let items: Vec<f64> = (0..257).map(|i| (i as f64).sin() * 1e-3 + 1.0 / (i as f64 + 1.0)).collect();
        let f = |x: &f64| {
            let mut g = Gradients::for_store(&store);
            g.accumulate(ParamId(0), &Tensor::vector(vec![*x, x * x, x.sqrt()]));
            (x.ln(), g)
        };
        let (l1, g1) = batch_gradients_with(Parallelism::Parallel, &store, &items, f);
        let (l2, g2) = batch_gradients_with(Parallelism::Sequential, &store, &items, f);
        assert_eq!(l1.to_bits(), l2.to_bits());
        let a = g1.get(ParamId(0)).unwrap().data();
        let b = g2.get(ParamId(0)).unwrap().data();
        assert!(a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn map_preserves_order() {
        let v: Vec<usize> = (0..100).collect();
        assert_eq!(map_with(Parallelism::Parallel, &v, |x| x * 2), v.iter().map(|x| x * 2).collect::<Vec<_>>());
    }
}
