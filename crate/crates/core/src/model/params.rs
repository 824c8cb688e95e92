//! Parameter layout, initialization, checkpoint round trip, and the
//! per-component parameter census.

use std::fmt;
use std::path::Path;

use lifeseq_tensor::{load_params, save_params, ParamId, ParamSet, Tensor};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde_json::json;

use super::config::ModelConfig;
use crate::rng::substream;
use crate::{Error, Result};

/// Handles to one decoder layer's parameters, in checkpoint order.
#[derive(Debug, Clone, Copy)]
pub(super) struct LayerIds {
    pub norm1: ParamId,
    pub wq: ParamId,
    pub bq: ParamId,
    pub wk: ParamId,
    pub bk: ParamId,
    pub wv: ParamId,
    pub bv: ParamId,
    pub wo: ParamId,
    pub bo: ParamId,
    pub norm2: ParamId,
    pub ff1: ParamId,
    pub ff1_b: ParamId,
    pub ff2: ParamId,
    pub ff2_b: ParamId,
}

/// A model's configuration, its parameter store, and the resolved handles the
/// forward pass needs. Weight decay applies only to the projection and
/// feedforward matrices; embeddings, gates, gains, and biases opt out.
#[derive(Debug, Clone)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub set: ParamSet,
    pub(super) tokens: ParamId,
    pub(super) age_w: ParamId,
    pub(super) age_phi: ParamId,
    pub(super) year_w: ParamId,
    pub(super) year_phi: ParamId,
    pub(super) alpha_pos: ParamId,
    pub(super) alpha_age: ParamId,
    pub(super) alpha_year: ParamId,
    pub(super) layers: Vec<LayerIds>,
    pub(super) head_w: ParamId,
    pub(super) head_b: ParamId,
}

impl ModelParams {
    /// Fresh parameters: matrices N(0, 0.02), biases and residual gates zero,
    /// norm gains one. Time-stream frequencies are drawn wider (N(0, 0.05))
    /// with phases uniform on the circle so ages decades apart separate.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = substream(seed, "model-init");
        let normal = Normal::new(0.0, 0.02).expect("std is finite");
        let freq = Normal::new(0.0, 0.05).expect("std is finite");
        let gauss = |rows: usize, cols: usize, dist: Normal<f64>, rng: &mut rand_chacha::ChaCha12Rng| {
            let data = (0..rows * cols).map(|_| dist.sample(rng)).collect();
            Tensor::from_vec(rows, cols, data).expect("sized data")
        };

        let d = config.d_model;
        let aw = config.attn_width();
        let mut set = ParamSet::new();
        let tokens = set.add("embed.tokens", gauss(config.vocab_size, d, normal, &mut rng), false);
        let age_w = set.add("embed.age_w", gauss(1, d, freq, &mut rng), false);
        let age_phi = {
            let data = (0..d).map(|_| rng.gen::<f64>() * std::f64::consts::TAU).collect();
            set.add("embed.age_phi", Tensor::from_vec(1, d, data).expect("sized data"), false)
        };
        let year_w = set.add("embed.year_w", gauss(1, d, freq, &mut rng), false);
        let year_phi = {
            let data = (0..d).map(|_| rng.gen::<f64>() * std::f64::consts::TAU).collect();
            set.add("embed.year_phi", Tensor::from_vec(1, d, data).expect("sized data"), false)
        };
        let alpha_pos = set.add("embed.alpha_pos", Tensor::scalar(0.0), false);
        let alpha_age = set.add("embed.alpha_age", Tensor::scalar(0.0), false);
        let alpha_year = set.add("embed.alpha_year", Tensor::scalar(0.0), false);

        let mut layers = Vec::with_capacity(config.n_layers);
        for i in 0..config.n_layers {
            let p = |s: &str| format!("layer{i}.{s}");
            layers.push(LayerIds {
                norm1: set.add(p("norm1"), Tensor::filled(1, d, 1.0), false),
                wq: set.add(p("wq"), gauss(d, aw, normal, &mut rng), true),
                bq: set.add(p("bq"), Tensor::zeros(1, aw), false),
                wk: set.add(p("wk"), gauss(d, aw, normal, &mut rng), true),
                bk: set.add(p("bk"), Tensor::zeros(1, aw), false),
                wv: set.add(p("wv"), gauss(d, aw, normal, &mut rng), true),
                bv: set.add(p("bv"), Tensor::zeros(1, aw), false),
                wo: set.add(p("wo"), gauss(aw, d, normal, &mut rng), true),
                bo: set.add(p("bo"), Tensor::zeros(1, d), false),
                norm2: set.add(p("norm2"), Tensor::filled(1, d, 1.0), false),
                ff1: set.add(p("ff1"), gauss(d, config.d_ff, normal, &mut rng), true),
                ff1_b: set.add(p("ff1_b"), Tensor::zeros(1, config.d_ff), false),
                ff2: set.add(p("ff2"), gauss(config.d_ff, d, normal, &mut rng), true),
                ff2_b: set.add(p("ff2_b"), Tensor::zeros(1, d), false),
            });
        }
        let head_w = set.add("head.w", gauss(d, config.vocab_size, normal, &mut rng), true);
        let head_b = set.add("head.b", Tensor::zeros(1, config.vocab_size), false);

        Ok(ModelParams {
            config,
            set,
            tokens,
            age_w,
            age_phi,
            year_w,
            year_phi,
            alpha_pos,
            alpha_age,
            alpha_year,
            layers,
            head_w,
            head_b,
        })
    }

    /// Rebinds handles into an existing store (checkpoint load). Every tensor
    /// is looked up by name and checked against the configured shape.
    pub fn from_set(config: ModelConfig, set: ParamSet) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let aw = config.attn_width();
        let find = |name: &str, rows: usize, cols: usize| -> Result<ParamId> {
            let id = set
                .by_name(name)
                .ok_or_else(|| Error::Model(format!("checkpoint missing tensor {name}")))?;
            let shape = set.get(id)?.value.shape();
            if shape != (rows, cols) {
                return Err(Error::Model(format!(
                    "tensor {name} is {}x{}, config wants {rows}x{cols}",
                    shape.0, shape.1
                )));
            }
            Ok(id)
        };

        let tokens = find("embed.tokens", config.vocab_size, d)?;
        let age_w = find("embed.age_w", 1, d)?;
        let age_phi = find("embed.age_phi", 1, d)?;
        let year_w = find("embed.year_w", 1, d)?;
        let year_phi = find("embed.year_phi", 1, d)?;
        let alpha_pos = find("embed.alpha_pos", 1, 1)?;
        let alpha_age = find("embed.alpha_age", 1, 1)?;
        let alpha_year = find("embed.alpha_year", 1, 1)?;
        let mut layers = Vec::with_capacity(config.n_layers);
        for i in 0..config.n_layers {
            let p = |s: &str| format!("layer{i}.{s}");
            layers.push(LayerIds {
                norm1: find(&p("norm1"), 1, d)?,
                wq: find(&p("wq"), d, aw)?,
                bq: find(&p("bq"), 1, aw)?,
                wk: find(&p("wk"), d, aw)?,
                bk: find(&p("bk"), 1, aw)?,
                wv: find(&p("wv"), d, aw)?,
                bv: find(&p("bv"), 1, aw)?,
                wo: find(&p("wo"), aw, d)?,
                bo: find(&p("bo"), 1, d)?,
                norm2: find(&p("norm2"), 1, d)?,
                ff1: find(&p("ff1"), d, config.d_ff)?,
                ff1_b: find(&p("ff1_b"), 1, config.d_ff)?,
                ff2: find(&p("ff2"), config.d_ff, d)?,
                ff2_b: find(&p("ff2_b"), 1, d)?,
            });
        }
        let head_w = find("head.w", d, config.vocab_size)?;
        let head_b = find("head.b", 1, config.vocab_size)?;

        Ok(ModelParams {
            config,
            set,
            tokens,
            age_w,
            age_phi,
            year_w,
            year_phi,
            alpha_pos,
            alpha_age,
            alpha_year,
            layers,
            head_w,
            head_b,
        })
    }

    /// Writes tensors plus a manifest whose `extra` carries the model config
    /// under `"model_config"`, merged with the caller's fields.
    pub fn save(&self, dir: &Path, extra: &serde_json::Value) -> Result<()> {
        let mut merged = match extra {
            serde_json::Value::Null => json!({}),
            v => v.clone(),
        };
        let obj = merged
            .as_object_mut()
            .ok_or_else(|| Error::Model("checkpoint extra must be a JSON object".into()))?;
        obj.insert("model_config".into(), serde_json::to_value(&self.config)?);
        save_params(&self.set, dir, &merged)?;
        Ok(())
    }

    /// Reads a checkpoint written by [`ModelParams::save`], returning the
    /// rebound parameters and the manifest's extra payload.
    pub fn load(dir: &Path) -> Result<(Self, serde_json::Value)> {
        let (set, extra) = load_params(dir)?;
        let config: ModelConfig = serde_json::from_value(
            extra
                .get("model_config")
                .cloned()
                .ok_or_else(|| Error::Model("checkpoint extra lacks model_config".into()))?,
        )?;
        Ok((Self::from_set(config, set)?, extra))
    }

    pub fn census(&self) -> ParameterCensus {
        let mut census = ParameterCensus::default();
        for (_, p) in self.set.iter() {
            let n = p.value.len();
            census.total += n;
            if let Some(rest) = p.name.strip_prefix("layer") {
                let field = rest.split_once('.').map(|(_, f)| f).unwrap_or("");
                match field {
                    "norm1" | "norm2" => census.norms += n,
                    "ff1" | "ff1_b" | "ff2" | "ff2_b" => census.feedforward += n,
                    _ => census.attention += n,
                }
            } else if p.name.starts_with("embed.") {
                census.embedding += n;
            } else {
                census.head += n;
            }
        }
        census.n_layers = self.config.n_layers;
        census
    }
}

/// Scalar parameter counts by component. `attention`, `feedforward`, and
/// `norms` sum over all layers.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ParameterCensus {
    pub embedding: usize,
    pub attention: usize,
    pub feedforward: usize,
    pub norms: usize,
    pub head: usize,
    pub total: usize,
    pub n_layers: usize,
}

impl ParameterCensus {
    pub fn per_layer(&self) -> usize {
        if self.n_layers == 0 {
            0
        } else {
            (self.attention + self.feedforward + self.norms) / self.n_layers
        }
    }
}

impl fmt::Display for ParameterCensus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "embedding        {:>12}", self.embedding)?;
        writeln!(f, "attention        {:>12}", self.attention)?;
        writeln!(f, "feedforward      {:>12}", self.feedforward)?;
        writeln!(f, "norms            {:>12}", self.norms)?;
        writeln!(f, "head             {:>12}", self.head)?;
        writeln!(f, "per layer        {:>12}", self.per_layer())?;
        write!(f, "total            {:>12}", self.total)
    }
}
