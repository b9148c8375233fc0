//! Training configuration, read from a flat JSON object. Unknown keys are
//! rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{PieError, Result};
use crate::layers::ResidualMean;
use crate::model::Architecture;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct TrainConfig {
    /// Residual variance ε².
    pub epsilon_sq: f64,
    #[serde(default = "defaults::learning_rate")]
    pub learning_rate: f64,
    #[serde(default = "defaults::beta1")]
    pub beta1: f64,
    #[serde(default = "defaults::beta2")]
    pub beta2: f64,
    #[serde(default = "defaults::eps_adam")]
    pub eps_adam: f64,
    #[serde(default = "defaults::batch_size")]
    pub batch_size: usize,
    pub max_steps: u64,
    #[serde(default)]
    pub seed: u64,
    /// Output dimension of each splitting block.
    pub dim_schedule: Vec<usize>,
    /// Coupling/Householder repetitions per block.
    #[serde(default = "defaults::k_repeats")]
    pub k_repeats: usize,

    /// Leading blocks that work on the image grid.
    #[serde(default)]
    pub conv_blocks: usize,
    /// Append a non-splitting block at latent dimension.
    #[serde(default)]
    pub final_block: bool,
    #[serde(default = "defaults::householder_count")]
    pub householder_count: usize,
    #[serde(default)]
    pub residual_mean: ResidualMean,
    /// Add `U(0, 1/256)` noise to inputs when computing likelihoods.
    #[serde(default)]
    pub dequantize: bool,
    /// Held-out evaluation interval in steps; 0 evaluates only at the
    /// first and last step.
    #[serde(default = "defaults::eval_every")]
    pub eval_every: u64,
    /// Checkpoint interval in steps; 0 writes only the final checkpoint.
    #[serde(default)]
    pub checkpoint_every: u64,
    /// Global gradient-norm clip; 0 disables.
    #[serde(default = "defaults::grad_clip")]
    pub grad_clip: f64,
    /// Record real elapsed time in the loss log. When false the column is
    /// zero and the log is byte-reproducible.
    #[serde(default)]
    pub log_wall_clock: bool,
    /// Fraction of the dataset used for training; the rest is held out.
    #[serde(default = "defaults::train_fraction")]
    pub train_fraction: f64,
    /// Fixed number of gradient shards per minibatch. Any value gives the
    /// same result for a given setting; changing it changes rounding.
    #[serde(default = "defaults::grad_shards")]
    pub grad_shards: usize,
    /// Held-out samples scored per evaluation; 0 uses the whole split.
    #[serde(default = "defaults::eval_size")]
    pub eval_size: usize,
}

mod defaults {
    pub fn learning_rate() -> f64 {
        1e-3
    }
    pub fn beta1() -> f64 {
        0.9
    }
    pub fn beta2() -> f64 {
        0.999
    }
    pub fn eps_adam() -> f64 {
        1e-8
    }
    pub fn batch_size() -> usize {
        128
    }
    pub fn k_repeats() -> usize {
        3
    }
    pub fn householder_count() -> usize {
        3
    }
    pub fn eval_every() -> u64 {
        100
    }
    pub fn grad_clip() -> f64 {
        100.0
    }
    pub fn train_fraction() -> f64 {
        0.8
    }
    pub fn grad_shards() -> usize {
        1
    }
    pub fn eval_size() -> usize {
        1000
    }
}

impl TrainConfig {
    /// Defaults for every optional field.
    pub fn new(epsilon_sq: f64, max_steps: u64, seed: u64, dim_schedule: Vec<usize>) -> Self {
        TrainConfig {
            epsilon_sq,
            learning_rate: defaults::learning_rate(),
            beta1: defaults::beta1(),
            beta2: defaults::beta2(),
            eps_adam: defaults::eps_adam(),
            batch_size: defaults::batch_size(),
            max_steps,
            seed,
            dim_schedule,
            k_repeats: defaults::k_repeats(),
            conv_blocks: 0,
            final_block: false,
            householder_count: defaults::householder_count(),
            residual_mean: ResidualMean::Zero,
            dequantize: false,
            eval_every: defaults::eval_every(),
            checkpoint_every: 0,
            grad_clip: defaults::grad_clip(),
            log_wall_clock: false,
            train_fraction: defaults::train_fraction(),
            grad_shards: defaults::grad_shards(),
            eval_size: defaults::eval_size(),
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: TrainConfig = serde_json::from_str(text).map_err(|e| PieError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| PieError::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(PieError::Config(m));
        if !(self.epsilon_sq > 0.0 && self.epsilon_sq.is_finite()) {
            return fail(format!("epsilonSq must be positive, got {}", self.epsilon_sq));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return fail(format!("learningRate must be positive, got {}", self.learning_rate));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return fail(format!("{name} must be in [0, 1), got {b}"));
            }
        }
        if !(self.eps_adam > 0.0) {
            return fail(format!("epsAdam must be positive, got {}", self.eps_adam));
        }
        if self.batch_size == 0 {
            return fail("batchSize must be at least 1".into());
        }
        if self.dim_schedule.windows(2).any(|w| w[1] >= w[0]) || self.dim_schedule.contains(&0) {
            return fail(format!("dimSchedule must be strictly decreasing and positive: {:?}", self.dim_schedule));
        }
        if self.k_repeats == 0 || self.householder_count == 0 {
            return fail("kRepeats and householderCount must be at least 1".into());
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return fail(format!("trainFraction must be in (0, 1), got {}", self.train_fraction));
        }
        if self.grad_shards == 0 {
            return fail("gradShards must be at least 1".into());
        }
        if !(self.grad_clip >= 0.0) {
            return fail(format!("gradClip must be non-negative, got {}", self.grad_clip));
        }
        Ok(())
    }

    pub fn architecture(&self, input_shape: &[usize]) -> Architecture {
        Architecture {
            input_shape: input_shape.to_vec(),
            conv_blocks: self.conv_blocks,
            dim_schedule: self.dim_schedule.clone(),
            final_block: self.final_block,
            k_repeats: self.k_repeats,
            householder_count: self.householder_count,
            residual_mean: self.residual_mean,
            epsilon_sq: self.epsilon_sq,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_json_gets_defaults() {
        let c = TrainConfig::from_json(r#"{"epsilonSq":0.1,"maxSteps":5,"dimSchedule":[1]}"#).unwrap();
        assert_eq!(c, TrainConfig::new(0.1, 5, 0, vec![1]));
        assert_eq!(c.learning_rate, 1e-3);
        assert_eq!(c.batch_size, 128);
        assert_eq!(c.grad_clip, 100.0);
    }

    #[test]
    fn round_trips() {
        let mut c = TrainConfig::new(0.01, 10, 4, vec![392, 196, 64, 10]);
        c.conv_blocks = 2;
        c.residual_mean = ResidualMean::Mlp;
        assert_eq!(TrainConfig::from_json(&c.to_json()).unwrap(), c);
    }

    #[test]
    fn rejects_invalid() {
        for bad in [
            r#"{"epsilonSq":0.1,"maxSteps":5,"dimSchedule":[1],"learningrate":1}"#,
            r#"{"epsilonSq":0,"maxSteps":5,"dimSchedule":[1]}"#,
            r#"{"epsilonSq":0.1,"maxSteps":5,"dimSchedule":[2,2]}"#,
            r#"{"epsilonSq":0.1,"maxSteps":5,"dimSchedule":[1],"batchSize":0}"#,
            r#"{"maxSteps":5,"dimSchedule":[1]}"#,
        ] {
            assert!(matches!(TrainConfig::from_json(bad), Err(PieError::Config(_))), "{bad}");
        }
    }
}
