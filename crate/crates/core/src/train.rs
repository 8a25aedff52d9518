//! Mini-batch training shared by all learned models.
//!
//! Per-sample gradients are computed independently (optionally in parallel)
//! and summed in sample order, so sequential and parallel runs produce
//! identical parameters.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autograd::{Gradients, Graph, ParamStore, Var};
use crate::error::{Error, Result};
use crate::exec::{self, Execution};
use crate::optim::{Adam, AdamConfig};
use crate::rng::Rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: AdamConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            batch_size: 32,
            optimizer: AdamConfig::default(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub phase: Option<usize>,
    pub loss: f64,
    pub samples: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_accuracy: Option<f64>,
}

pub type SampleLoss<'a, S> = dyn Fn(&mut Graph, &S) -> Result<Option<Var>> + Sync + 'a;

/// Mean gradient over the samples whose loss is defined. Returns the mean
/// loss and the number of contributing samples.
pub fn batch_gradients<S: Sync>(
    store: &ParamStore,
    batch: &[&S],
    mode: Execution,
    loss_fn: &SampleLoss<'_, S>,
) -> Result<(Gradients, f64, usize)> {
    let per_sample = exec::map(mode, batch, |s| -> Result<Option<(Gradients, f64)>> {
        let mut g = Graph::new(store);
        let Some(loss) = loss_fn(&mut g, s)? else {
            return Ok(None);
        };
        let value = g.value(loss).item();
        if !value.is_finite() {
            return Err(Error::NonFinite {
                what: "training loss".into(),
                detail: format!("loss = {value}"),
            });
        }
        Ok(Some((g.backward(loss)?, value)))
    });
    let mut total = store.zero_grads();
    let mut loss_sum = 0.0;
    let mut used = 0;
    for r in per_sample {
        if let Some((grads, loss)) = r? {
            total.accumulate(&grads);
            loss_sum += loss;
            used += 1;
        }
    }
    if used > 0 {
        total.scale(1.0 / used as f64);
    }
    Ok((total, loss_sum / used.max(1) as f64, used))
}

/// One pass over `samples` in a seeded random order. Returns the mean loss
/// and the number of samples that contributed.
pub fn run_epoch<S: Sync>(
    store: &mut ParamStore,
    adam: &mut Adam,
    samples: &[S],
    batch_size: usize,
    rng: &mut Rng,
    mode: Execution,
    loss_fn: &SampleLoss<'_, S>,
) -> Result<(f64, usize)> {
    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.shuffle(rng);
    let mut loss_sum = 0.0;
    let mut used_total = 0;
    for chunk in order.chunks(batch_size.max(1)) {
        let batch: Vec<&S> = chunk.iter().map(|&i| &samples[i]).collect();
        let (grads, loss, used) = batch_gradients(store, &batch, mode, loss_fn)?;
        if used == 0 {
            continue;
        }
        if !grads.0.iter().all(|t| t.all_finite()) {
            return Err(Error::NonFinite {
                what: "gradient".into(),
                detail: format!("batch mean loss {loss}"),
            });
        }
        adam.step(store, &grads);
        loss_sum += loss * used as f64;
        used_total += used;
    }
    Ok((loss_sum / used_total.max(1) as f64, used_total))
}

pub fn optimizer(cfg: &AdamConfig, store: &ParamStore) -> Adam {
    Adam::new(*cfg, store)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_for;
    use crate::tensor::Tensor;

    #[test]
    fn sequential_and_parallel_are_identical() {
        let samples: Vec<(f64, f64)> = (0..37).map(|i| (i as f64 / 10.0, 2.0 * i as f64 / 10.0 + 1.0)).collect();
        let run = |mode| {
            let mut s = ParamStore::new();
            let w = s.add("w", Tensor::scalar(0.0));
            let b = s.add("b", Tensor::scalar(0.0));
            let mut adam = Adam::new(
                AdamConfig {
                    learning_rate: 0.05,
                    ..Default::default()
                },
                &s,
            );
            let mut rng = rng_for(1, "t");
            let f = move |g: &mut Graph, &(x, y): &(f64, f64)| {
                let (wv, bv) = (g.param(w), g.param(b));
                let xv = g.input(Tensor::scalar(x));
                let p = g.mul(wv, xv);
                let p = g.add(p, bv);
                let yv = g.input(Tensor::scalar(y));
                let d = g.sub(p, yv);
                let l = g.square(d);
                Ok(Some(g.sum(l)))
            };
            for _ in 0..300 {
                run_epoch(&mut s, &mut adam, &samples, 8, &mut rng, mode, &f).unwrap();
            }
            s
        };
        let a = run(Execution::Sequential);
        let b = run(Execution::Parallel);
        assert_eq!(a, b);
        let w = a.get(a.id("w").unwrap()).item();
        assert!((w - 2.0).abs() < 0.05, "w = {w}");
    }

    #[test]
    fn non_finite_loss_aborts() {
        let s = ParamStore::new();
        let f = |g: &mut Graph, _: &()| Ok(Some(g.input(Tensor::scalar(f64::NAN))));
        let batch = [&()];
        assert!(matches!(
            batch_gradients(&s, &batch, Execution::Sequential, &f),
            Err(Error::NonFinite { .. })
        ));
    }
}
