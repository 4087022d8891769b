use std::path::Path;

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::SampleWindow;
use crate::error::{Error, Result};
use crate::graph::RoadGraph;
use crate::numerics::{ParamStore, Tape};
use crate::stgin::StginModel;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    /// Parameter updates; ignored when `epochs` is set.
    pub iterations: usize,
    pub epochs: Option<usize>,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 32,
            iterations: 500,
            epochs: None,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Parameter("batch size must be positive".into()));
        }
        if self.epochs.is_none() && self.iterations == 0 || self.epochs == Some(0) {
            return Err(Error::Parameter("training needs at least one update".into()));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Parameter(format!(
                "learning rate must be a nonnegative number, got {}",
                self.learning_rate
            )));
        }
        let unit = 0.0..1.0;
        if !unit.contains(&self.beta1) || !unit.contains(&self.beta2) || !(self.epsilon > 0.0) {
            return Err(Error::Parameter(format!(
                "optimizer constants out of range (beta1 {}, beta2 {}, epsilon {})",
                self.beta1, self.beta2, self.epsilon
            )));
        }
        Ok(())
    }

    /// Number of parameter updates for a training set of `n` windows.
    pub fn updates(&self, n: usize) -> usize {
        match self.epochs {
            Some(e) => e * n.div_ceil(self.batch_size),
            None => self.iterations,
        }
    }
}

/// First- and second-moment optimizer state, one buffer per parameter.
#[derive(Clone, Debug)]
pub struct Adam {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl Adam {
    pub fn new(store: &ParamStore, cfg: &TrainConfig) -> Self {
        let zeros: Vec<Vec<f64>> = store.iter().map(|(_, _, t)| vec![0.0; t.len()]).collect();
        Adam {
            m: zeros.clone(),
            v: zeros,
            t: 0,
            lr: cfg.learning_rate,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.epsilon,
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &[Vec<f64>]) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        let ids: Vec<_> = store.ids().collect();
        for (i, id) in ids.into_iter().enumerate() {
            let (m, v, g) = (&mut self.m[i], &mut self.v[i], &grads[i]);
            for ((p, (mj, vj)), gj) in store
                .get_mut(id)
                .data_mut()
                .iter_mut()
                .zip(m.iter_mut().zip(v.iter_mut()))
                .zip(g)
            {
                *mj = self.beta1 * *mj + (1.0 - self.beta1) * gj;
                *vj = self.beta2 * *vj + (1.0 - self.beta2) * gj * gj;
                *p -= self.lr * (*mj / c1) / ((*vj / c2).sqrt() + self.eps);
            }
        }
    }
}

/// Loss and parameter gradients for one window.
pub fn sample_gradients(
    model: &StginModel,
    graph: &RoadGraph,
    window: &SampleWindow,
) -> Result<(f64, Vec<(crate::numerics::ParamId, Vec<f64>)>)> {
    let mut tape = Tape::new();
    let x = tape.constant(window.input.clone());
    let pred = model.forward_tape(&mut tape, graph, x, None)?;
    let loss = tape.mse(pred, &window.target)?;
    let value = tape.value(loss).item()?;
    Ok((value, tape.backward(loss)?.into_params()))
}

/// Mean loss and mean gradient over a batch, one buffer per parameter.
/// Per-window passes run in parallel; the reduction is sequential so the
/// result does not depend on scheduling.
pub fn batch_gradients(
    model: &StginModel,
    graph: &RoadGraph,
    batch: &[&SampleWindow],
) -> Result<(f64, Vec<Vec<f64>>)> {
    let per_sample: Vec<_> = batch
        .par_iter()
        .map(|w| sample_gradients(model, graph, w))
        .collect::<Result<_>>()?;
    let mut sums: Vec<Vec<f64>> = model
        .store
        .iter()
        .map(|(_, _, t)| vec![0.0; t.len()])
        .collect();
    let mut loss = 0.0;
    for (l, grads) in per_sample {
        loss += l;
        for (id, g) in grads {
            for (s, v) in sums[id.0].iter_mut().zip(&g) {
                *s += v;
            }
        }
    }
    let scale = 1.0 / batch.len() as f64;
    sums.iter_mut().flatten().for_each(|v| *v *= scale);
    Ok((loss * scale, sums))
}

/// Minibatch training with reshuffling at each pass over the data. Returns
/// the loss of every update. On a non-finite loss or gradient the model keeps
/// its last finite parameters.
pub fn train(
    model: &mut StginModel,
    graph: &RoadGraph,
    windows: &[SampleWindow],
    cfg: &TrainConfig,
) -> Result<Vec<f64>> {
    cfg.validate()?;
    if windows.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    let updates = cfg.updates(windows.len());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..windows.len()).collect();
    let mut cursor = order.len();
    let mut adam = Adam::new(&model.store, cfg);
    let mut trace = Vec::with_capacity(updates);
    info!(
        "training {} parameters on {} windows for {updates} updates",
        model.num_parameters(),
        windows.len()
    );
    for update in 0..updates {
        if cursor >= order.len() {
            order.shuffle(&mut rng);
            cursor = 0;
        }
        let end = (cursor + cfg.batch_size).min(order.len());
        let batch: Vec<&SampleWindow> = order[cursor..end].iter().map(|&i| &windows[i]).collect();
        cursor = end;
        let (loss, grads) = batch_gradients(model, graph, &batch)?;
        if !loss.is_finite() || grads.iter().flatten().any(|g| !g.is_finite()) {
            return Err(Error::Training {
                update,
                message: format!("loss {loss} or its gradient is not finite"),
            });
        }
        adam.step(&mut model.store, &grads);
        trace.push(loss);
        if update % 50 == 0 || update + 1 == updates {
            info!("update {update}: loss {loss:.6}");
        } else {
            debug!("update {update}: loss {loss:.6}");
        }
    }
    Ok(trace)
}

/// `update,loss` CSV.
pub fn write_loss_csv(path: impl AsRef<Path>, trace: &[f64]) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::from("update,loss\n");
    for (i, l) in trace.iter().enumerate() {
        out.push_str(&format!("{i},{l}\n"));
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}
