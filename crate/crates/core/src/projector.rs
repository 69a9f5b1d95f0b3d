//! Trigger projector: maps `d_v`-wide feature rows into the language model's
//! embedding space, with five per-stage designs and optional cross-stage
//! sharing.

use std::collections::BTreeSet;
use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::config::{ModelConfig, ProjectorPair, ProjectorVariant};
use crate::error::{Error, Result};
use crate::nn::Linear;
use crate::params::ParamStore;
use crate::tensor::Matrix;

pub const LEARNABLE_INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Ta1,
    Ta2,
}

impl Stage {
    pub const BOTH: [Stage; 2] = [Stage::Ta1, Stage::Ta2];

    fn key(self) -> &'static str {
        match self {
            Stage::Ta1 => "ta1",
            Stage::Ta2 => "ta2",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.key())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProjectorConfig {
    pub pair: ProjectorPair,
    pub d_v: usize,
    pub d_h: usize,
    pub d_llm: usize,
    pub n_iq: usize,
    pub n_eq: usize,
}

impl ProjectorConfig {
    pub fn from_model(model: &ModelConfig, pair: ProjectorPair) -> Self {
        Self {
            pair,
            d_v: model.d_v,
            d_h: model.d_h,
            d_llm: model.d_llm,
            n_iq: model.n_iq,
            n_eq: model.n_eq,
        }
    }

    fn variant(&self, stage: Stage) -> ProjectorVariant {
        match stage {
            Stage::Ta1 => self.pair.ta1,
            Stage::Ta2 => self.pair.ta2,
        }
    }

    /// Distinct trainable layers `(name, d_in, d_out)` of the active stages.
    /// A shared layer appears once because both stages name it identically.
    fn trainable_layers(&self, stages: &[Stage]) -> BTreeSet<(String, usize, usize)> {
        let (dv, dh, dl) = (self.d_v, self.d_h, self.d_llm);
        let mut set = BTreeSet::new();
        for &stage in stages {
            let s = stage.key();
            match self.variant(stage) {
                ProjectorVariant::L => {
                    set.insert((format!("{s}.linear"), dv, dl));
                }
                ProjectorVariant::S => {
                    set.insert(("shared.linear".to_string(), dv, dl));
                }
                ProjectorVariant::Dl => {
                    set.insert((format!("{s}.fc1"), dv, dh));
                    set.insert((format!("{s}.fc2"), dh, dl));
                }
                ProjectorVariant::Hdl => {
                    set.insert((format!("{s}.trigger"), dv, dh));
                }
                ProjectorVariant::Ours => {
                    set.insert(("shared.trigger".to_string(), dv, dh));
                }
            }
        }
        set
    }

    /// Trainable weights and biases of the projector alone, over `stages`.
    pub fn projector_params(&self, stages: &[Stage]) -> u64 {
        self.trainable_layers(stages)
            .iter()
            .map(|&(_, i, o)| Linear::param_count(i, o))
            .sum()
    }
}

/// Trainable parameters attributed to a projector choice: both stages'
/// projector layers plus the image and entity query tokens.
pub fn count_trainable_params(cfg: &ProjectorConfig) -> u64 {
    cfg.projector_params(&Stage::BOTH) + ((cfg.n_iq + cfg.n_eq) * cfg.d_v) as u64
}

/// The map applied by one stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StageMap {
    /// `L` and `S`.
    Affine(Linear),
    /// `DL`.
    TwoLayer(Linear, Linear),
    /// `HDL` and `OURS`: trainable trigger, then the frozen projector.
    Trigger { trigger: Linear, frozen: Linear },
}

impl StageMap {
    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        match self {
            StageMap::Affine(l) => l.forward(g, x),
            StageMap::TwoLayer(a, b) => {
                let h = a.forward(g, x);
                b.forward(g, h)
            }
            StageMap::Trigger { trigger, frozen } => {
                let h = trigger.forward(g, x);
                frozen.forward(g, h)
            }
        }
    }

    /// The first layer: the one that is shared between stages when sharing is on.
    pub fn first_layer(&self) -> Linear {
        match *self {
            StageMap::Affine(l) | StageMap::TwoLayer(l, _) => l,
            StageMap::Trigger { trigger, .. } => trigger,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TriggerProjector {
    pub config: ProjectorConfig,
    ta1: Option<StageMap>,
    ta2: Option<StageMap>,
    frozen: Option<Linear>,
}

impl TriggerProjector {
    /// Registers the layers of the listed stages under `projector.*`.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        cfg: &ProjectorConfig,
        stages: &[Stage],
    ) -> Result<Self> {
        Self::with_frozen(store, rng, cfg, stages, None)
    }

    /// As [`TriggerProjector::new`], reusing an existing frozen `d_h → d_llm`
    /// layer instead of registering one.
    pub fn with_frozen<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        cfg: &ProjectorConfig,
        stages: &[Stage],
        existing: Option<Linear>,
    ) -> Result<Self> {
        cfg.pair.validate()?;
        let needs_frozen = stages.iter().any(|&s| cfg.variant(s).uses_frozen_layer());
        let frozen = match existing {
            Some(l) if (l.d_in, l.d_out) != (cfg.d_h, cfg.d_llm) => {
                return Err(Error::Shape(format!(
                    "frozen layer is {}→{}, projector needs {}→{}",
                    l.d_in, l.d_out, cfg.d_h, cfg.d_llm
                )))
            }
            Some(l) => Some(l),
            None if needs_frozen => Some(Linear::new(
                store,
                rng,
                "projector.frozen",
                cfg.d_h,
                cfg.d_llm,
                1.0 / (cfg.d_h as f64).sqrt(),
                false,
            )?),
            None => None,
        };
        let mut made: Vec<(String, Linear)> = Vec::new();
        let mut layer = |store: &mut ParamStore, rng: &mut R, key: String, d_in, d_out| -> Result<Linear> {
            if let Some((_, l)) = made.iter().find(|(k, _)| *k == key) {
                return Ok(*l);
            }
            let l = Linear::new(
                store,
                rng,
                &format!("projector.{key}"),
                d_in,
                d_out,
                LEARNABLE_INIT_STD,
                true,
            )?;
            made.push((key, l));
            Ok(l)
        };
        let (dv, dh, dl) = (cfg.d_v, cfg.d_h, cfg.d_llm);
        let mut maps = [None, None];
        for &stage in stages {
            let s = stage.key();
            let map = match cfg.variant(stage) {
                ProjectorVariant::L => StageMap::Affine(layer(store, rng, format!("{s}.linear"), dv, dl)?),
                ProjectorVariant::S => StageMap::Affine(layer(store, rng, "shared.linear".into(), dv, dl)?),
                ProjectorVariant::Dl => StageMap::TwoLayer(
                    layer(store, rng, format!("{s}.fc1"), dv, dh)?,
                    layer(store, rng, format!("{s}.fc2"), dh, dl)?,
                ),
                ProjectorVariant::Hdl => StageMap::Trigger {
                    trigger: layer(store, rng, format!("{s}.trigger"), dv, dh)?,
                    frozen: frozen.expect("frozen layer registered"),
                },
                ProjectorVariant::Ours => StageMap::Trigger {
                    trigger: layer(store, rng, "shared.trigger".into(), dv, dh)?,
                    frozen: frozen.expect("frozen layer registered"),
                },
            };
            maps[stage as usize] = Some(map);
        }
        let [ta1, ta2] = maps;
        Ok(Self {
            config: *cfg,
            ta1,
            ta2,
            frozen,
        })
    }

    pub fn stage(&self, stage: Stage) -> Result<&StageMap> {
        match stage {
            Stage::Ta1 => self.ta1.as_ref(),
            Stage::Ta2 => self.ta2.as_ref(),
        }
        .ok_or_else(|| Error::Config(format!("projector stage {stage} is not instantiated")))
    }

    pub fn frozen_layer(&self) -> Option<Linear> {
        self.frozen
    }

    /// Row-wise projection of an `l × d_v` block.
    pub fn forward(&self, g: &mut Graph, stage: Stage, x: Var) -> Result<Var> {
        let width = g.value(x).cols();
        if width != self.config.d_v {
            return Err(Error::Shape(format!(
                "projector takes {}-wide rows, got {width}",
                self.config.d_v
            )));
        }
        Ok(self.stage(stage)?.forward(g, x))
    }

    /// Projects a batch of `l × d_v` blocks to `l × d_llm`.
    pub fn project(&self, store: &ParamStore, stage: Stage, batch: &[Matrix]) -> Result<Vec<Matrix>> {
        batch
            .iter()
            .map(|m| {
                let mut g = Graph::inference(store);
                let x = g.constant(m.clone());
                let y = self.forward(&mut g, stage, x)?;
                Ok(g.value(y).clone())
            })
            .collect()
    }
}
