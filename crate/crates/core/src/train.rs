//! Minibatch maximum likelihood with Adam.
//!
//! Step `s` draws its minibatch from an RNG stream keyed by `(seed, s)`, so
//! a run resumed from a checkpoint replays the uninterrupted trajectory
//! without saving RNG state.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::{write_atomic, Checkpoint};
use crate::config::TrainConfig;
use crate::data::Dataset;
use crate::error::{PieError, Result};
use crate::model::PieModel;
use crate::optim::{AdamConfig, AdamState};
use crate::tape::{Gradients, Tape};
use crate::tensor::{Tensor, TensorError};

pub const DEQUANTIZE_WIDTH: f64 = 1.0 / 256.0;
const EVAL_STREAM: u64 = u64::MAX;

#[derive(Debug, Clone, PartialEq)]
pub struct LossRow {
    pub step: u64,
    pub train_nll: f64,
    pub eval_nll: Option<f64>,
    pub wall_clock_ms: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunReport {
    pub rows: Vec<LossRow>,
    pub checkpoints: Vec<PathBuf>,
    pub loss_log: Option<PathBuf>,
    pub final_step: u64,
    pub wall_clock_ms: u64,
}

impl RunReport {
    pub fn eval_curve(&self) -> Vec<(u64, f64)> {
        self.rows.iter().filter_map(|r| r.eval_nll.map(|e| (r.step, e))).collect()
    }
}

pub const LOSS_LOG_HEADER: &str = "step,trainNll,evalNll,wallClockMs";

pub fn format_loss_log(rows: &[LossRow]) -> String {
    let mut s = String::from(LOSS_LOG_HEADER);
    s.push('\n');
    for r in rows {
        let eval = r.eval_nll.map(|e| e.to_string()).unwrap_or_default();
        let _ = writeln!(s, "{},{},{},{}", r.step, r.train_nll, eval, r.wall_clock_ms);
    }
    s
}

pub fn checkpoint_name(step: u64) -> String {
    format!("checkpoint-{step:08}.json")
}

pub struct Trainer {
    config: TrainConfig,
    model: PieModel,
    optimizer: AdamState,
    step: u64,
    data: Dataset,
    eval_batch: Option<Tensor>,
    threads: usize,
}

impl Trainer {
    /// Splits `data` per the config and initializes a fresh model.
    pub fn new(config: TrainConfig, data: Dataset) -> Result<Self> {
        config.validate()?;
        let model = PieModel::new(config.architecture(data.item_shape()), config.seed)?;
        let optimizer = AdamState::new(model.params());
        Self::assemble(config, model, optimizer, 0, data)
    }

    /// Continues from a checkpoint on the same dataset.
    pub fn resume(checkpoint: &Checkpoint, data: Dataset) -> Result<Self> {
        if checkpoint.input_shape != data.item_shape() {
            return Err(PieError::Data(format!(
                "checkpoint expects items of shape {:?}, dataset has {:?}",
                checkpoint.input_shape,
                data.item_shape()
            )));
        }
        let (model, optimizer) = checkpoint.restore()?;
        Self::assemble(checkpoint.config.clone(), model, optimizer, checkpoint.step, data)
    }

    fn assemble(config: TrainConfig, model: PieModel, optimizer: AdamState, step: u64, data: Dataset) -> Result<Self> {
        if data.item_dim() != model.input_dim() {
            return Err(PieError::Data(format!(
                "model expects {} values per item, dataset has {}",
                model.input_dim(),
                data.item_dim()
            )));
        }
        let data = data.with_split(config.train_fraction, config.seed)?;
        let mut test: Vec<usize> = data.test_indices().to_vec();
        if config.eval_size > 0 {
            test.truncate(config.eval_size);
        }
        let eval_batch = if test.is_empty() {
            None
        } else {
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
            rng.set_stream(EVAL_STREAM);
            let mut x = data.batch(&test);
            if config.dequantize {
                dequantize(&mut x, &mut rng);
            }
            Some(x)
        };
        Ok(Trainer {
            config,
            model,
            optimizer,
            step,
            data,
            eval_batch,
            threads: 1,
        })
    }

    /// Worker threads for gradient shards. Results do not depend on it.
    pub fn with_threads(mut self, threads: usize) -> Self {
        self.threads = threads.max(1);
        self
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn model(&self) -> &PieModel {
        &self.model
    }

    pub fn into_model(self) -> PieModel {
        self.model
    }

    pub fn optimizer(&self) -> &AdamState {
        &self.optimizer
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn dataset(&self) -> &Dataset {
        &self.data
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::capture(&self.config, &self.model, &self.optimizer, self.step)
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.config.learning_rate,
            beta1: self.config.beta1,
            beta2: self.config.beta2,
            eps: self.config.eps_adam,
        }
    }

    /// Minibatch used at `step`.
    pub fn minibatch(&self, step: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(step);
        let train = self.data.train_indices();
        let amount = self.config.batch_size.min(train.len());
        let picks: Vec<usize> = index::sample(&mut rng, train.len(), amount).into_iter().map(|i| train[i]).collect();
        let mut x = self.data.batch(&picks);
        if self.config.dequantize {
            dequantize(&mut x, &mut rng);
        }
        x
    }

    /// Mean held-out negative log-likelihood, if there is a held-out split.
    pub fn eval_nll(&self) -> Result<Option<f64>> {
        match &self.eval_batch {
            None => Ok(None),
            Some(x) => {
                let ll = self.model.log_likelihood(x)?;
                Ok(Some(-ll.iter().sum::<f64>() / ll.len() as f64))
            }
        }
    }

    /// Mean negative log-likelihood of `x` and its gradient.
    pub fn loss_and_grad(&self, x: &Tensor) -> Result<(f64, Gradients)> {
        let (rows, cols) = x.dims2("loss")?;
        let shards = self.config.grad_shards.min(rows).max(1);
        let bounds: Vec<(usize, usize)> = (0..shards).map(|i| (i * rows / shards, (i + 1) * rows / shards)).collect();
        let model = &self.model;
        let run = |&(a, b): &(usize, usize)| -> Result<(f64, Gradients)> {
            let part = Tensor::new(vec![b - a, cols], x.data()[a * cols..b * cols].to_vec())?;
            let mut tape = Tape::new();
            let p = model.params().bind(&mut tape);
            let xv = tape.constant(part);
            let ll = model.log_likelihood_var(&mut tape, &p, xv)?;
            let total = tape.sum(ll)?;
            let loss = tape.mul_scalar(total, -1.0 / rows as f64)?;
            let value = tape.value(loss).item().expect("scalar loss");
            Ok((value, tape.backward(loss)?))
        };
        let results: Vec<Result<(f64, Gradients)>> = if self.threads > 1 && shards > 1 {
            let per = shards.div_ceil(self.threads);
            std::thread::scope(|s| {
                let handles: Vec<_> = bounds
                    .chunks(per)
                    .map(|group| s.spawn(move || group.iter().map(run).collect::<Vec<_>>()))
                    .collect();
                handles.into_iter().flat_map(|h| h.join().expect("gradient worker panicked")).collect()
            })
        } else {
            bounds.iter().map(run).collect()
        };
        let mut loss = 0.0;
        let mut grads: Option<Gradients> = None;
        for r in results {
            let (l, g) = r?;
            loss += l;
            match grads.as_mut() {
                None => grads = Some(g),
                Some(acc) => acc.accumulate(&g)?,
            }
        }
        Ok((loss, grads.expect("at least one shard")))
    }

    fn should_eval(&self, s: u64) -> bool {
        s == self.config.max_steps || if self.config.eval_every == 0 { s == 0 } else { s % self.config.eval_every == 0 }
    }

    /// Trains until `max_steps` updates. With `out`, writes `loss_log.csv`
    /// and checkpoints into that directory.
    pub fn run(&mut self, out: Option<&Path>) -> Result<RunReport> {
        self.run_until(self.config.max_steps, out)
    }

    /// Like [`Trainer::run`] but stops after `stop` updates, which must not
    /// exceed `max_steps`. Logged steps match an uninterrupted run.
    pub fn run_until(&mut self, stop: u64, out: Option<&Path>) -> Result<RunReport> {
        let stop = stop.min(self.config.max_steps);
        let start = Instant::now();
        let mut rows = Vec::new();
        let mut checkpoints = Vec::new();
        let adam = self.adam();
        let mut last_good: Option<Checkpoint> = None;
        let elapsed = |start: &Instant| start.elapsed().as_millis() as u64;

        let diverged = |this: &Self, last_good: &Option<Checkpoint>, rows: &[LossRow]| -> Result<PieError> {
            let mut path = None;
            if let (Some(dir), Some(ck)) = (out, last_good) {
                let p = dir.join(checkpoint_name(ck.step));
                ck.save(&p)?;
                path = Some(p);
            }
            if let Some(dir) = out {
                write_atomic(&dir.join("loss_log.csv"), format_loss_log(rows).as_bytes())?;
            }
            Ok(PieError::Divergence { step: this.step, last_good: path })
        };

        while self.step <= stop {
            let s = self.step;
            let x = self.minibatch(s);
            let (loss, mut grads) = match self.loss_and_grad(&x) {
                Ok(v) => v,
                Err(e) if is_numerical(&e) => return Err(diverged(self, &last_good, &rows)?),
                Err(e) => return Err(e),
            };
            if !loss.is_finite() || !grads.all_finite() {
                return Err(diverged(self, &last_good, &rows)?);
            }
            let eval_nll = if self.should_eval(s) {
                match self.eval_nll() {
                    Ok(v) => v,
                    Err(e) if is_numerical(&e) => return Err(diverged(self, &last_good, &rows)?),
                    Err(e) => return Err(e),
                }
            } else {
                None
            };
            rows.push(LossRow {
                step: s,
                train_nll: loss,
                eval_nll,
                wall_clock_ms: if self.config.log_wall_clock { elapsed(&start) } else { 0 },
            });
            let periodic = self.config.checkpoint_every > 0 && s % self.config.checkpoint_every == 0;
            if let Some(dir) = out {
                if periodic || s == stop {
                    let p = dir.join(checkpoint_name(s));
                    self.checkpoint().save(&p)?;
                    checkpoints.push(p);
                }
            }
            if s == stop {
                break;
            }
            last_good = Some(self.checkpoint());
            if self.config.grad_clip > 0.0 {
                let norm = grads.global_norm();
                if norm > self.config.grad_clip {
                    grads.scale(self.config.grad_clip / norm);
                }
            }
            self.optimizer.step(self.model.params_mut(), &grads, &adam)?;
            self.step += 1;
        }

        let loss_log = match out {
            Some(dir) => {
                let p = dir.join("loss_log.csv");
                write_atomic(&p, format_loss_log(&rows).as_bytes())?;
                Some(p)
            }
            None => None,
        };
        Ok(RunReport {
            rows,
            checkpoints,
            loss_log,
            final_step: self.step,
            wall_clock_ms: elapsed(&start),
        })
    }
}

fn is_numerical(e: &PieError) -> bool {
    matches!(
        e,
        PieError::NonFiniteActivation { .. }
            | PieError::Singular { .. }
            | PieError::NonFiniteScale { .. }
            | PieError::Tensor(TensorError::NonFinite { .. } | TensorError::Domain { .. })
    )
}

/// Adds `U(0, 1/256)` noise to every value.
pub fn dequantize<R: Rng>(x: &mut Tensor, rng: &mut R) {
    for v in x.data_mut() {
        *v += rng.gen_range(0.0..DEQUANTIZE_WIDTH);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{make_synthetic_2d, SyntheticKind};

    fn cfg(steps: u64) -> TrainConfig {
        let mut c = TrainConfig::new(0.1, steps, 2, vec![1]);
        c.batch_size = 32;
        c.k_repeats = 1;
        c.eval_every = 5;
        c
    }

    fn data() -> Dataset {
        make_synthetic_2d(SyntheticKind::TwoGaussians, 200, 1).unwrap()
    }

    #[test]
    fn zero_steps_leaves_params() {
        let mut t = Trainer::new(cfg(0), data()).unwrap();
        let before = t.model().params().clone();
        let r = t.run(None).unwrap();
        assert_eq!(r.rows.len(), 1);
        assert!(r.rows[0].eval_nll.is_some());
        assert_eq!(r.final_step, 0);
        for ((_, _, a), (_, _, b)) in before.iter().zip(t.model().params().iter()) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn logs_every_step_and_evaluates_on_schedule() {
        let mut t = Trainer::new(cfg(12), data()).unwrap();
        let r = t.run(None).unwrap();
        assert_eq!(r.rows.len(), 13);
        let evals: Vec<u64> = r.eval_curve().iter().map(|e| e.0).collect();
        assert_eq!(evals, vec![0, 5, 10, 12]);
        assert!(r.rows.iter().all(|r| r.train_nll.is_finite() && r.wall_clock_ms == 0));
    }

    #[test]
    fn shard_count_is_thread_independent() {
        let mut c = cfg(3);
        c.grad_shards = 4;
        let a = Trainer::new(c.clone(), data()).unwrap().run(None).unwrap();
        let b = Trainer::new(c, data()).unwrap().with_threads(3).run(None).unwrap();
        assert_eq!(format_loss_log(&a.rows), format_loss_log(&b.rows));
    }

    #[test]
    fn sharded_gradient_matches_single() {
        let t1 = Trainer::new(cfg(1), data()).unwrap();
        let mut c = cfg(1);
        c.grad_shards = 5;
        let t5 = Trainer::new(c, data()).unwrap();
        let x = t1.minibatch(0);
        let (l1, g1) = t1.loss_and_grad(&x).unwrap();
        let (l5, g5) = t5.loss_and_grad(&x).unwrap();
        assert!((l1 - l5).abs() < 1e-12);
        for ((_, a), (_, b)) in g1.iter().zip(g5.iter()) {
            assert!(a.max_abs_diff(b).unwrap() < 1e-12);
        }
    }

    #[test]
    fn loss_log_format() {
        let rows = vec![
            LossRow { step: 0, train_nll: 1.5, eval_nll: Some(2.25), wall_clock_ms: 0 },
            LossRow { step: 1, train_nll: 0.1, eval_nll: None, wall_clock_ms: 3 },
        ];
        assert_eq!(format_loss_log(&rows), "step,trainNll,evalNll,wallClockMs\n0,1.5,2.25,0\n1,0.1,,3\n");
    }
}
