//! Shared mini-batch loop.

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use sentiscale_nn::parallel::batch_gradients;
use sentiscale_nn::{Gradients, Optimizer, ParamStore};

use crate::error::{CoreError, Result};

/// Runs `epochs` passes of shuffled mini-batches. `example` returns the loss
/// and gradients of one item; batch gradients are averaged before the update.
/// Returns the mean per-item loss of every epoch.
pub fn run_epochs<T, F>(
    store: &mut ParamStore,
    opt: &mut Optimizer,
    items: &[T],
    batch_size: usize,
    epochs: usize,
    rng: &mut ChaCha8Rng,
    example: F,
) -> Result<Vec<f64>>
where
    T: Sync,
    F: Fn(&ParamStore, &T) -> (f64, Gradients) + Sync + Send,
{
    let mut order: Vec<usize> = (0..items.len()).collect();
    let mut history = Vec::with_capacity(epochs);
    let batch_size = batch_size.max(1);
    for epoch in 0..epochs {
        order.shuffle(rng);
        let mut total = 0.0;
        for chunk in order.chunks(batch_size) {
            let batch: Vec<&T> = chunk.iter().map(|&i| &items[i]).collect();
            let (loss, mut grads) = batch_gradients(store, &batch, |it| example(store, it));
            if !loss.is_finite() || !grads.all_finite() {
                return Err(CoreError::TrainingDiverged { at: epoch });
            }
            grads.scale(1.0 / batch.len() as f64);
            opt.apply(store, &grads);
            total += loss;
        }
        history.push(total / items.len().max(1) as f64);
    }
    Ok(history)
}
