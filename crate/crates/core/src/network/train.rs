//! SGD with momentum and weight decay over batches of windows.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{CdcError, Result};
use crate::exec::Exec;
use crate::network::model::{ForwardMode, Network};
use crate::network::window::VideoWindow;
use crate::ops::softmax::{softmax_loss, softmax_loss_grad, FrameLabels};
use crate::seed::mix_seed;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SgdConfig {
    pub learning_rate: f32,
    /// Learning rate of the final CDC layer.
    pub final_learning_rate: f32,
    pub momentum: f32,
    pub weight_decay: f32,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig {
            learning_rate: 1e-5,
            final_learning_rate: 1e-4,
            momentum: 0.9,
            weight_decay: 0.005,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SgdState {
    pub config: SgdConfig,
    /// One rate per parameter tensor.
    pub learning_rates: Vec<f32>,
    pub velocity: Vec<Tensor>,
}

impl SgdState {
    pub fn new(net: &Network, config: SgdConfig) -> Result<Self> {
        let learning_rates = net
            .final_layer_mask()
            .into_iter()
            .map(|f| {
                if f {
                    config.final_learning_rate
                } else {
                    config.learning_rate
                }
            })
            .collect();
        let velocity = net
            .named_params()
            .iter()
            .map(|(_, t)| Tensor::zeros(t.dims()))
            .collect::<Result<Vec<_>>>()?;
        Ok(SgdState {
            config,
            learning_rates,
            velocity,
        })
    }

    /// `v <- m v - lr (g + wd p)`, then `p <- p + v`.
    pub fn step(&mut self, net: &mut Network, grads: &[Tensor]) -> Result<()> {
        let mut params = net.params_mut();
        if grads.len() != params.len() || self.velocity.len() != params.len() {
            return Err(CdcError::ShapeMismatch(format!(
                "{} gradients and {} velocity buffers for {} parameters",
                grads.len(),
                self.velocity.len(),
                params.len()
            )));
        }
        let SgdConfig {
            momentum: m,
            weight_decay: wd,
            ..
        } = self.config;
        for (((p, g), v), &lr) in params
            .iter_mut()
            .zip(grads)
            .zip(&mut self.velocity)
            .zip(&self.learning_rates)
        {
            g.ensure_dims(p.dims(), "gradient")?;
            v.ensure_dims(p.dims(), "velocity")?;
            for ((pv, &gv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
                *vv = m * *vv - lr * (gv + wd * *pv);
                *pv += *vv;
            }
        }
        Ok(())
    }
}

fn sum_in_order(per_window: Vec<Vec<Tensor>>) -> Vec<Tensor> {
    let mut it = per_window.into_iter();
    let mut acc = it.next().expect("non-empty batch");
    for grads in it {
        for (a, g) in acc.iter_mut().zip(grads) {
            for (x, y) in a.data_mut().iter_mut().zip(g.data()) {
                *x += y;
            }
        }
    }
    acc
}

/// Loss and parameter gradients for one batch. Windows are processed under
/// `exec`; gradients are reduced in batch order.
pub fn batch_gradients(
    net: &Network,
    batch: &[&VideoWindow],
    seed: u64,
    exec: Exec,
) -> Result<(f64, Vec<Tensor>)> {
    if batch.is_empty() {
        return Err(CdcError::InvalidArgument("empty batch".into()));
    }
    let l = net.config().window_length();
    let labels: Vec<FrameLabels> = batch
        .iter()
        .map(|w| {
            let z = w.labels.clone().ok_or_else(|| {
                CdcError::Missing(format!("window {}@{} has no labels", w.video, w.start))
            })?;
            if z.len() != l {
                return Err(CdcError::ShapeMismatch(format!(
                    "window of {} frames, network expects {l}",
                    z.len()
                )));
            }
            Ok(z)
        })
        .collect::<Result<_>>()?;
    let forwards = exec.map_range(batch.len(), |i| {
        net.forward(
            &batch[i].frames,
            ForwardMode::Train {
                seed: mix_seed(seed, i as u64),
            },
        )
    });
    let mut scores = Vec::with_capacity(batch.len());
    let mut caches = Vec::with_capacity(batch.len());
    for f in forwards {
        let (p, c) = f?;
        scores.push(p);
        caches.push(c.expect("train mode keeps a cache"));
    }
    let loss = softmax_loss(&scores, &labels)?;
    if !loss.is_finite() {
        return Err(CdcError::NonFinite(format!("training loss {loss}")));
    }
    let grad_logits = softmax_loss_grad(&scores, &labels)?;
    let grads = exec.map_range(batch.len(), |i| net.backward(&caches[i], &grad_logits[i]));
    let grads = grads.into_iter().collect::<Result<Vec<_>>>()?;
    Ok((loss, sum_in_order(grads)))
}

/// One SGD update on `batch`; returns the batch loss before the update.
pub fn train_step(
    net: &mut Network,
    batch: &[&VideoWindow],
    sgd: &mut SgdState,
    seed: u64,
    exec: Exec,
) -> Result<f64> {
    let (loss, grads) = batch_gradients(net, batch, seed, exec)?;
    sgd.step(net, &grads)?;
    Ok(loss)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainOptions {
    pub steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub sgd: SgdConfig,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            steps: 2000,
            batch_size: 8,
            seed: 0,
            sgd: SgdConfig::default(),
        }
    }
}

/// Run `opts.steps` updates over reshuffled passes of `windows`, reporting
/// `(step, loss)` through `on_step`. Returns the per-step losses.
pub fn train<F>(
    net: &mut Network,
    windows: &[VideoWindow],
    opts: &TrainOptions,
    exec: Exec,
    mut on_step: F,
) -> Result<Vec<f64>>
where
    F: FnMut(usize, f64),
{
    if windows.is_empty() || opts.batch_size == 0 {
        return Err(CdcError::InvalidArgument(
            "training needs windows and a batch size >= 1".into(),
        ));
    }
    let mut sgd = SgdState::new(net, opts.sgd)?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut order: Vec<usize> = Vec::new();
    let mut losses = Vec::with_capacity(opts.steps);
    for step in 0..opts.steps {
        let mut batch = Vec::with_capacity(opts.batch_size);
        while batch.len() < opts.batch_size.min(windows.len()) {
            if order.is_empty() {
                order = (0..windows.len()).collect();
                order.shuffle(&mut rng);
            }
            batch.push(&windows[order.pop().expect("refilled")]);
        }
        let loss = train_step(
            net,
            &batch,
            &mut sgd,
            mix_seed(opts.seed, step as u64 + 1),
            exec,
        )?;
        on_step(step, loss);
        losses.push(loss);
    }
    Ok(losses)
}

/// Fraction of non-pad frames whose eval-mode argmax equals the label.
pub fn frame_accuracy(net: &Network, windows: &[VideoWindow], exec: Exec) -> Result<f64> {
    let counts = exec.map(windows, |w| {
        let z = w
            .labels
            .as_ref()
            .ok_or_else(|| CdcError::Missing("window has no labels".into()))?;
        let (p, _) = net.forward(&w.frames, ForwardMode::Eval)?;
        let pred = p.argmax_per_frame();
        let mut hit = 0usize;
        let mut total = 0usize;
        for t in 0..z.len() {
            if !z.pad[t] {
                total += 1;
                hit += usize::from(pred[t] == z.labels[t]);
            }
        }
        Ok((hit, total))
    });
    let (mut hit, mut total) = (0usize, 0usize);
    for c in counts {
        let (h, t) = c?;
        hit += h;
        total += t;
    }
    if total == 0 {
        return Err(CdcError::InvalidArgument("no labeled frames".into()));
    }
    Ok(hit as f64 / total as f64)
}
