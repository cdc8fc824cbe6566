//! Flat, namespaced `key = value` experiment configuration.

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::scene::SceneSpec;
use crate::error::{LabError, Result};
use crate::optimizer::{
    AiuConfig, LearningRates, NoiseConfig, OptimizerConfig, OptimizerMode, RsrConfig, Schedule, StssSchedule,
};
use crate::pipeline::{DensifyConfig, StagePlan, Strategy, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    pub seed: u64,
    pub log_interval: u64,
    pub tap_moments: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageSection {
    pub warmup_end: u64,
    pub densify_end: u64,
    pub total_iters: u64,
    pub densify_interval: u64,
    pub reset_interval: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptSection {
    pub mode_densify: OptimizerMode,
    pub mode_refine: OptimizerMode,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub lr_position: f64,
    pub lr_position_final: f64,
    pub lr_scale: f64,
    pub lr_rotation: f64,
    pub lr_opacity: f64,
    pub lr_color: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegSection {
    pub lambda_dssim: f64,
    pub lambda_o: f64,
    pub lambda_s: f64,
    pub clip_o: f64,
    pub clip_s: f64,
    pub round_pixels: bool,
    pub opacity_start: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DensifySection {
    pub strategy: Strategy,
    pub grad_threshold: f64,
    pub prune_threshold: f64,
    pub percent_dense: f64,
    pub split_factor: f64,
    pub max_primitives: usize,
    pub opacity_reset: bool,
    pub reset_floor: f64,
    pub clone_correction: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RsrSection {
    pub enabled: bool,
    pub alpha1: f64,
    pub alpha2: f64,
    pub interval: u64,
    /// `lo`, `mid`, `hi`, or explicit `iter:ratio,iter:ratio`.
    pub stss: String,
    pub enforce_square: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AiuSection {
    pub enabled: bool,
    pub start: u64,
    pub end: u64,
    pub prob: String,
    pub step_scale: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSection {
    pub enabled: bool,
    pub lr: f64,
    pub sharpness: f64,
    pub center: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub run: RunSection,
    pub scene: SceneSpec,
    pub stage: StageSection,
    pub opt: OptSection,
    pub reg: RegSection,
    pub densify: DensifySection,
    pub rsr: RsrSection,
    pub aiu: AiuSection,
    pub noise: NoiseSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let scene = SceneSpec::default();
        let extent = scene.canvas as f64;
        let lr = LearningRates::with_extent(extent);
        Self {
            run: RunSection { seed: 0, log_interval: 100, tap_moments: false },
            stage: StageSection {
                warmup_end: 50,
                densify_end: 1500,
                total_iters: 3000,
                densify_interval: 10,
                reset_interval: 300,
            },
            opt: OptSection {
                mode_densify: OptimizerMode::CoupledAdam,
                mode_refine: OptimizerMode::CoupledAdam,
                beta1: 0.9,
                beta2: 0.999,
                eps: 1e-8,
                lr_position: lr.position,
                lr_position_final: 1.6e-6 * extent,
                lr_scale: lr.scale,
                lr_rotation: lr.rotation,
                lr_opacity: lr.opacity,
                lr_color: lr.color,
            },
            reg: RegSection {
                lambda_dssim: 0.2,
                lambda_o: 0.0,
                lambda_s: 0.0,
                clip_o: 10.0,
                clip_s: 10.0,
                round_pixels: true,
                opacity_start: 300,
            },
            densify: DensifySection {
                strategy: Strategy::Vanilla,
                grad_threshold: 2e-4,
                prune_threshold: 0.005,
                percent_dense: 0.02,
                split_factor: 1.6,
                max_primitives: 2000,
                opacity_reset: true,
                reset_floor: 0.01,
                clone_correction: false,
            },
            rsr: RsrSection {
                enabled: false,
                alpha1: 0.2,
                alpha2: 0.04,
                interval: 10,
                stss: "lo".into(),
                enforce_square: true,
            },
            aiu: AiuSection {
                enabled: false,
                start: 10,
                end: 3000,
                prob: "0.1".into(),
                step_scale: "0.1".into(),
            },
            noise: NoiseSection {
                enabled: false,
                lr: 1.0,
                sharpness: 100.0,
                center: 0.005,
            },
            scene,
        }
    }
}

fn scalar_string(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

/// `iter:value,iter:value`, or a bare number for a constant.
pub fn parse_schedule(s: &str) -> Result<Schedule> {
    let s = s.trim();
    if let Ok(v) = s.parse::<f64>() {
        return Ok(Schedule::constant(v));
    }
    let points = s
        .split(',')
        .map(|part| {
            let (it, v) = part
                .split_once(':')
                .ok_or_else(|| LabError::Config(format!("schedule entry {part:?} is not iter:value")))?;
            let it = it.trim().parse::<u64>().map_err(|_| LabError::Config(format!("bad milestone {it:?}")))?;
            let v = v.trim().parse::<f64>().map_err(|_| LabError::Config(format!("bad value {v:?}")))?;
            Ok((it, v))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Schedule { points })
}

impl ExperimentConfig {
    fn to_value(&self) -> Value {
        serde_json::to_value(self).expect("config is always serializable")
    }

    /// Every setting as `(section.key, value)` in a stable order.
    pub fn to_kv(&self) -> Vec<(String, String)> {
        let mut out = Vec::new();
        if let Value::Object(sections) = self.to_value() {
            for (section, body) in sections {
                if let Value::Object(fields) = body {
                    for (k, v) in fields {
                        out.push((format!("{section}.{k}"), scalar_string(&v)));
                    }
                }
            }
        }
        out
    }

    pub fn to_kv_string(&self) -> String {
        self.to_kv().into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    /// Sets one key, parsing the value with the type of the current setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let mut root = self.to_value();
        let (section, field) = key
            .split_once('.')
            .ok_or_else(|| LabError::Config(format!("key {key:?} is not section.field")))?;
        let slot = root
            .get_mut(section)
            .and_then(|s| s.get_mut(field))
            .ok_or_else(|| LabError::Config(format!("unknown config key {key:?}")))?;
        let bad = || LabError::Config(format!("cannot parse {value:?} for {key}"));
        let value = value.trim();
        *slot = match slot {
            Value::Bool(_) => Value::Bool(value.parse().map_err(|_| bad())?),
            Value::Number(n) if n.is_u64() => Value::from(value.parse::<u64>().map_err(|_| bad())?),
            Value::Number(_) => Value::from(value.parse::<f64>().map_err(|_| bad())?),
            _ => Value::String(value.to_string()),
        };
        *self = serde_json::from_value(root).map_err(|e| LabError::Config(format!("{key}: {e}")))?;
        Ok(())
    }

    /// Applies `key = value` lines; blank lines and `#` comments are skipped.
    pub fn apply_kv_text(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| LabError::Parse(format!("line {}: expected key = value", n + 1)))?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    pub fn from_kv_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_kv_text(text)?;
        Ok(cfg)
    }

    /// Applies `key=value` overrides.
    pub fn apply_overrides(&mut self, overrides: &[String]) -> Result<()> {
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| LabError::Config(format!("override {o:?} is not key=value")))?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    /// Keys whose values differ, with `(self, other)` values.
    pub fn diff(&self, other: &ExperimentConfig) -> Vec<(String, String, String)> {
        self.to_kv()
            .into_iter()
            .zip(other.to_kv())
            .filter(|((_, a), (_, b))| a != b)
            .map(|((k, a), (_, b))| (k, a, b))
            .collect()
    }

    pub fn stss_schedule(&self) -> Result<StssSchedule> {
        let (w, d) = (self.stage.warmup_end, self.stage.densify_end);
        let mid = w + (d - w) / 2;
        let ratios = match self.rsr.stss.as_str() {
            "lo" => Schedule { points: vec![(w, 0.05)] },
            "mid" => Schedule { points: vec![(w, 0.05), (mid, 0.15)] },
            "hi" => Schedule { points: vec![(w, 0.05), (mid, 0.25)] },
            explicit => parse_schedule(explicit)?,
        };
        Ok(StssSchedule { ratios, interval: self.rsr.interval, end: d })
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        self.scene.validate()?;
        let optimizer = OptimizerConfig {
            mode: self.opt.mode_densify,
            beta1: self.opt.beta1,
            beta2: self.opt.beta2,
            eps: self.opt.eps,
            lr: LearningRates {
                position: self.opt.lr_position,
                scale: self.opt.lr_scale,
                rotation: self.opt.lr_rotation,
                opacity: self.opt.lr_opacity,
                color: self.opt.lr_color,
            },
            lambda_opacity: self.reg.lambda_o,
            lambda_scale: self.reg.lambda_s,
            clip_opacity: self.reg.clip_o,
            clip_scale: self.reg.clip_s,
            round_pixel_count: self.reg.round_pixels,
        };
        let rsr = if self.rsr.enabled {
            Some(RsrConfig {
                alpha1: self.rsr.alpha1,
                alpha2: self.rsr.alpha2,
                schedule: self.stss_schedule()?,
                enforce_square: self.rsr.enforce_square,
            })
        } else {
            None
        };
        let aiu = if self.aiu.enabled {
            Some(AiuConfig {
                start: self.aiu.start,
                end: self.aiu.end,
                probability: parse_schedule(&self.aiu.prob)?,
                step_scale: parse_schedule(&self.aiu.step_scale)?,
            })
        } else {
            None
        };
        let noise = self.noise.enabled.then_some(NoiseConfig {
            lr: self.noise.lr,
            sharpness: self.noise.sharpness,
            center: self.noise.center,
        });
        let cfg = TrainConfig {
            plan: StagePlan {
                warmup_end: self.stage.warmup_end,
                densify_end: self.stage.densify_end,
                total_iters: self.stage.total_iters,
                densify_interval: self.stage.densify_interval,
                reset_interval: self.stage.reset_interval,
                densify_mode: self.opt.mode_densify,
                refine_mode: self.opt.mode_refine,
            },
            densify: DensifyConfig {
                strategy: self.densify.strategy,
                grad_threshold: self.densify.grad_threshold,
                prune_threshold: self.densify.prune_threshold,
                percent_dense: self.densify.percent_dense,
                extent: self.scene.canvas as f64,
                split_factor: self.densify.split_factor,
                max_primitives: self.densify.max_primitives,
                opacity_reset: self.densify.opacity_reset,
                reset_floor: self.densify.reset_floor,
                clone_opacity_correction: self.densify.clone_correction,
            },
            optimizer,
            lr_position_final: self.opt.lr_position_final,
            lambda1: self.reg.lambda_dssim,
            dar_opacity_start: self.reg.opacity_start,
            rsr,
            aiu,
            noise,
            log_interval: self.run.log_interval,
            tap_moments: self.run.tap_moments,
            seed: self.run.seed,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}
