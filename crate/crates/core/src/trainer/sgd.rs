use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Result, TrainError};
use crate::tensor_nn::{load_checkpoint, save_checkpoint, Real, UNetConfig, UNetParams};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SgdConfig {
    pub lr_initial: f64,
    pub lr_after_drop: f64,
    /// First epoch (0-based) that uses `lr_after_drop`.
    pub drop_epoch: usize,
    pub momentum: f64,
    pub nesterov: bool,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            lr_initial: 0.02,
            lr_after_drop: 0.001,
            drop_epoch: 5,
            momentum: 0.9,
            nesterov: true,
            batch_size: 5,
            epochs: 12,
            seed: 0,
        }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        let lr_ok = |lr: f64| lr > 0.0 && lr.is_finite();
        if !lr_ok(self.lr_initial) || !lr_ok(self.lr_after_drop) {
            return Err(TrainError::Config("learning rates must be positive".into()));
        }
        if self.drop_epoch > self.epochs {
            return Err(TrainError::Config(format!(
                "drop_epoch {} is after the last epoch ({})",
                self.drop_epoch, self.epochs
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(TrainError::Config(format!("momentum {} outside [0, 1)", self.momentum)));
        }
        if self.batch_size == 0 {
            return Err(TrainError::Config("batch_size must be at least 1".into()));
        }
        Ok(())
    }
}

/// Step schedule: `lr_initial` before `drop_epoch`, `lr_after_drop` from it on.
pub fn lr_schedule(epoch: usize, config: &SgdConfig) -> f64 {
    if epoch < config.drop_epoch {
        config.lr_initial
    } else {
        config.lr_after_drop
    }
}

/// One momentum step on a flat parameter slice:
/// `v <- mu v + g`, then `p <- p - lr (g + mu v)` (Nesterov) or `p <- p - lr v`.
pub fn sgd_update<T: Real>(param: &mut [T], velocity: &mut [T], grad: &[T], lr: f64, momentum: f64, nesterov: bool) {
    let lr = T::from_f64(lr).unwrap();
    let mu = T::from_f64(momentum).unwrap();
    for ((p, v), &g) in param.iter_mut().zip(velocity.iter_mut()).zip(grad) {
        *v = mu * *v + g;
        let step = if nesterov { g + mu * *v } else { *v };
        *p = *p - lr * step;
    }
}

/// Everything needed to continue a run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState<T = f32> {
    pub params: UNetParams<T>,
    pub velocity: UNetParams<T>,
    /// Next epoch to run.
    pub epoch: usize,
    /// Optimizer steps taken.
    pub step: u64,
    pub rng: ChaCha8Rng,
}

#[derive(Serialize, Deserialize)]
struct StateFile {
    epoch: usize,
    step: u64,
    rng: ChaCha8Rng,
}

impl<T: Real> TrainState<T> {
    /// Fresh state: seeded He initialization, zero velocity. Initialization
    /// and shuffling draw from separate streams of the same seed.
    pub fn new(config: UNetConfig, seed: u64) -> Result<Self> {
        let params = UNetParams::init(config, seed)?;
        let velocity = params.zeros_like();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(1);
        Ok(Self {
            params,
            velocity,
            epoch: 0,
            step: 0,
            rng,
        })
    }

    pub fn sgd_step(&mut self, grads: &UNetParams<T>, lr: f64, config: &SgdConfig) -> Result<()> {
        for (name, g) in grads.named_tensors() {
            if !g.all_finite() {
                return Err(TrainError::NonFiniteGradient { tensor: name });
            }
        }
        let params = self.params.tensors_mut();
        let velocity = self.velocity.tensors_mut();
        let grads = grads.tensors();
        if params.len() != grads.len() {
            return Err(TrainError::Shape("gradient layout does not match parameters".into()));
        }
        for ((p, v), g) in params.into_iter().zip(velocity).zip(grads) {
            if p.shape() != g.shape() || v.shape() != p.shape() {
                return Err(TrainError::Shape(format!(
                    "gradient {:?} vs parameter {:?}",
                    g.shape(),
                    p.shape()
                )));
            }
            sgd_update(p.data_mut(), v.data_mut(), g.data(), lr, config.momentum, config.nesterov);
        }
        self.step += 1;
        Ok(())
    }
}

impl TrainState<f32> {
    /// Writes `params.unp`, `velocity.unp` and `state.json` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        save_checkpoint(&self.params, &dir.join("params.unp"))?;
        save_checkpoint(&self.velocity, &dir.join("velocity.unp"))?;
        let file = StateFile {
            epoch: self.epoch,
            step: self.step,
            rng: self.rng.clone(),
        };
        let json = serde_json::to_string_pretty(&file).map_err(|e| TrainError::State(e.to_string()))?;
        fs::write(dir.join("state.json"), json)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let params = load_checkpoint(&dir.join("params.unp"))?;
        let velocity = load_checkpoint(&dir.join("velocity.unp"))?;
        if velocity.config != params.config {
            return Err(TrainError::State("velocity and params disagree on config".into()));
        }
        let text = fs::read_to_string(dir.join("state.json"))?;
        let file: StateFile = serde_json::from_str(&text).map_err(|e| TrainError::State(e.to_string()))?;
        Ok(Self {
            params,
            velocity,
            epoch: file.epoch,
            step: file.step,
            rng: file.rng,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor_nn::Tensor;
    use rand::RngCore;

    #[test]
    fn vanilla_step_without_momentum() {
        let mut p = [1.0f64];
        let mut v = [0.0f64];
        sgd_update(&mut p, &mut v, &[1.0], 0.02, 0.0, false);
        assert_eq!(p[0], 0.98);
        // nesterov with mu = 0 is also plain gradient descent
        let mut p2 = [1.0f64];
        let mut v2 = [0.0f64];
        sgd_update(&mut p2, &mut v2, &[1.0], 0.02, 0.0, true);
        assert_eq!(p2[0], 0.98);
    }

    #[test]
    fn nesterov_hand_example() {
        let mut p = [0.0f64];
        let mut v = [0.0f64];
        sgd_update(&mut p, &mut v, &[1.0], 0.02, 0.9, true);
        assert_eq!(v[0], 1.0);
        assert!((p[0] + 0.038).abs() < 1e-15);
        // second step: v = 1.9, step = 1 + 0.9 * 1.9 = 2.71
        sgd_update(&mut p, &mut v, &[1.0], 0.02, 0.9, true);
        assert!((v[0] - 1.9).abs() < 1e-15);
        assert!((p[0] + 0.038 + 0.0542).abs() < 1e-15);
    }

    #[test]
    fn classical_momentum() {
        let mut p = [0.0f64];
        let mut v = [0.5f64];
        sgd_update(&mut p, &mut v, &[1.0], 0.1, 0.9, false);
        assert!((v[0] - 1.45).abs() < 1e-15);
        assert!((p[0] + 0.145).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_keeps_params() {
        let mut p = [0.3f32, -2.0];
        let mut v = [0.0f32; 2];
        sgd_update(&mut p, &mut v, &[0.0, 0.0], 0.02, 0.9, true);
        assert_eq!(p, [0.3, -2.0]);
    }

    #[test]
    fn schedule_boundaries() {
        let cfg = SgdConfig::default();
        assert_eq!(lr_schedule(0, &cfg), 0.02);
        assert_eq!(lr_schedule(4, &cfg), 0.02);
        assert_eq!(lr_schedule(5, &cfg), 0.001);
        assert_eq!(lr_schedule(11, &cfg), 0.001);
    }

    #[test]
    fn config_validation() {
        assert!(SgdConfig::default().validate().is_ok());
        assert!(SgdConfig { lr_initial: 0.0, ..Default::default() }.validate().is_err());
        assert!(SgdConfig { drop_epoch: 13, ..Default::default() }.validate().is_err());
        assert!(SgdConfig { batch_size: 0, ..Default::default() }.validate().is_err());
        let parsed: SgdConfig = serde_json::from_str(r#"{"epochs": 20}"#).unwrap();
        assert_eq!(parsed, SgdConfig { epochs: 20, ..Default::default() });
    }

    fn toy() -> UNetConfig {
        UNetConfig {
            depth: 2,
            in_channels: 3,
            out_channels: 2,
            base_channels: 2,
            normalize_input: false,
            normalize_output: false,
        }
    }

    #[test]
    fn non_finite_gradient_aborts() {
        let mut state = TrainState::<f32>::new(toy(), 0).unwrap();
        let mut grads = state.params.zeros_like();
        grads.head.bias = Tensor::new(&[2], vec![0.0, f32::NAN]).unwrap();
        match state.sgd_step(&grads, 0.1, &SgdConfig::default()) {
            Err(TrainError::NonFiniteGradient { tensor }) => assert_eq!(tensor, "head.bias"),
            other => panic!("expected abort, got {other:?}"),
        }
        assert_eq!(state.step, 0);
    }

    #[test]
    fn state_save_load_resumes_rng() {
        let dir = tempfile::tempdir().unwrap();
        let mut state = TrainState::<f32>::new(toy(), 9).unwrap();
        state.rng.next_u64();
        state.epoch = 3;
        state.step = 17;
        state.velocity.head.bias = Tensor::new(&[2], vec![0.5, -0.25]).unwrap();
        state.save(dir.path()).unwrap();
        let mut loaded = TrainState::load(dir.path()).unwrap();
        assert_eq!(loaded, state);
        assert_eq!(loaded.rng.next_u64(), state.rng.next_u64());
    }
}
