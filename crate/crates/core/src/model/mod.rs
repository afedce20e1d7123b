//! Network definition: configuration, the named parameter set, and the
//! forward graph builders in [`net`].
//!
//! Parameters live in a flat name-to-tensor map with dot-separated paths
//! (`blocks.2.sa.wq`). The manifest is a pure function of the config, which
//! keeps checkpoints self-describing and makes cross-config loads fail
//! loudly.

use crate::error::{Error, Result};
use crate::tasks;
use crate::tensor::{Tape, Tensor, TensorId};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

pub mod check;
pub mod net;

pub use net::{
    backbone_velocity, build_conditioning, duration_adapt, encode_content, fuse_instruction,
    predict_durations, select_streams, Condition, Conditioning, RopeTables,
};

// ── Configuration ────────────────────────────────────────────────────────

/// How conditioning streams enter the backbone blocks. `Dual` is the
/// production wiring; the other three exist for the ablation arms.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    /// Frame-aligned stream added per block, the other stream replaced by a
    /// learnable dummy; cross-attention reads the non-aligned stream.
    Dual,
    /// Both streams concatenated into the cross-attention context; no
    /// additive fusion.
    CrossAttnOnly,
    /// Both real streams pass through every block.
    Double,
    /// Additive stream applied once before block 1 only.
    InputOnly,
}

impl FusionMode {
    pub const ALL: [FusionMode; 4] = [
        FusionMode::Dual,
        FusionMode::CrossAttnOnly,
        FusionMode::Double,
        FusionMode::InputOnly,
    ];

    pub fn name(self) -> &'static str {
        match self {
            FusionMode::Dual => "dual",
            FusionMode::CrossAttnOnly => "cross_attn_only",
            FusionMode::Double => "double",
            FusionMode::InputOnly => "input_only",
        }
    }

    pub fn parse(s: &str) -> Result<FusionMode> {
        match s {
            "dual" => Ok(FusionMode::Dual),
            "cross_attn_only" => Ok(FusionMode::CrossAttnOnly),
            "double" => Ok(FusionMode::Double),
            "input_only" => Ok(FusionMode::InputOnly),
            other => Err(Error::Config(format!(
                "unknown fusion mode '{other}' (expected dual, cross_attn_only, double or input_only)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub depth: usize,
    pub embed_size: usize,
    pub num_heads: usize,
    pub ffn_mult: usize,
    pub latent_dim: usize,
    pub fusion_mode: FusionMode,
    pub max_units: usize,
    pub max_frames: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig::desk()
    }
}

impl ModelConfig {
    /// CPU-trainable default.
    pub fn desk() -> Self {
        ModelConfig {
            depth: 4,
            embed_size: 64,
            num_heads: 4,
            ffn_mult: 4,
            latent_dim: tasks::LATENT_DIM,
            fusion_mode: FusionMode::Dual,
            max_units: 64,
            max_frames: 64,
        }
    }

    /// The reference "small" size; used for shape tests only.
    pub fn small() -> Self {
        ModelConfig { depth: 12, embed_size: 512, num_heads: 8, ..ModelConfig::desk() }
    }

    /// Two blocks, eight-wide embeddings: the smallest build that still has
    /// multi-head attention, both duration heads, and every fusion stream.
    /// Used by the gradient checker and fast trainer tests.
    pub fn check() -> Self {
        ModelConfig { depth: 2, embed_size: 8, num_heads: 2, ffn_mult: 2, ..ModelConfig::desk() }
    }

    pub fn head_dim(&self) -> usize {
        self.embed_size / self.num_heads
    }

    pub fn validate(&self) -> Result<()> {
        let positive: [(&str, usize); 6] = [
            ("depth", self.depth),
            ("embed_size", self.embed_size),
            ("num_heads", self.num_heads),
            ("ffn_mult", self.ffn_mult),
            ("latent_dim", self.latent_dim),
            ("max_frames", self.max_frames),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if !self.embed_size.is_multiple_of(self.num_heads) {
            return Err(Error::Config(format!(
                "embed_size {} not divisible by num_heads {}",
                self.embed_size, self.num_heads
            )));
        }
        if !self.head_dim().is_multiple_of(2) {
            return Err(Error::Config(format!(
                "head_dim {} must be even for the rotary pairing",
                self.head_dim()
            )));
        }
        Ok(())
    }
}

// ── Parameters ───────────────────────────────────────────────────────────

enum Init {
    /// Xavier-uniform over the matrix's fan-in/fan-out.
    Xavier,
    /// N(0, 0.5^2); embedding tables and dummy vectors.
    Gauss,
    Zeros,
    /// AdaLN head bias: scales start at 1, shifts and gates at 0, so the
    /// zeroed head emits (gamma=1, beta=0, alpha=0) for every tau at init.
    AdalnBias,
}

fn layout(cfg: &ModelConfig) -> Vec<(String, Vec<usize>, Init)> {
    let d = cfg.embed_size;
    let l = cfg.latent_dim;
    let h = cfg.ffn_mult * d;
    let mut v: Vec<(String, Vec<usize>, Init)> = Vec::new();
    let mut p = |name: String, shape: &[usize], init: Init| v.push((name, shape.to_vec(), init));

    p("enc.sym.table".into(), &[tasks::SYMBOL_VOCAB, d], Init::Gauss);
    p("enc.frame.w".into(), &[l, d], Init::Xavier);
    p("enc.frame.b".into(), &[1, d], Init::Zeros);
    p("enc.evt.table".into(), &[tasks::EVENT_VOCAB, d], Init::Gauss);
    for t in 0..tasks::TaskId::ALL.len() {
        p(format!("instr.{t}.table"), &[tasks::INSTRUCTION_ROWS, d], Init::Gauss);
    }
    for w in ["wq", "wk", "wv", "wo"] {
        p(format!("adapter.{w}"), &[d, d], Init::Xavier);
    }
    for head in ["seq", "clip"] {
        p(format!("dur.{head}.fc1"), &[d, d], Init::Xavier);
        p(format!("dur.{head}.b1"), &[1, d], Init::Zeros);
        p(format!("dur.{head}.fc2"), &[d, 1], Init::Xavier);
        p(format!("dur.{head}.b2"), &[1, 1], Init::Zeros);
    }
    p("dummy.c_i".into(), &[1, d], Init::Gauss);
    p("dummy.c_i_t".into(), &[1, d], Init::Gauss);
    p("time.fc1".into(), &[d, d], Init::Xavier);
    p("time.b1".into(), &[1, d], Init::Zeros);
    p("time.fc2".into(), &[d, d], Init::Xavier);
    p("time.b2".into(), &[1, d], Init::Zeros);
    p("in_proj.w".into(), &[l, d], Init::Xavier);
    p("in_proj.b".into(), &[1, d], Init::Zeros);
    for b in 0..cfg.depth {
        for attn in ["sa", "ca"] {
            for w in ["wq", "wk", "wv", "wo"] {
                p(format!("blocks.{b}.{attn}.{w}"), &[d, d], Init::Xavier);
            }
        }
        p(format!("blocks.{b}.ffn.fc1"), &[d, h], Init::Xavier);
        p(format!("blocks.{b}.ffn.b1"), &[1, h], Init::Zeros);
        p(format!("blocks.{b}.ffn.fc2"), &[h, d], Init::Xavier);
        p(format!("blocks.{b}.ffn.b2"), &[1, d], Init::Zeros);
        p(format!("blocks.{b}.adaln.fc1"), &[d, d], Init::Xavier);
        p(format!("blocks.{b}.adaln.b1"), &[1, d], Init::Zeros);
        p(format!("blocks.{b}.adaln.fc2"), &[d, 6 * d], Init::Zeros);
        p(format!("blocks.{b}.adaln.b2"), &[1, 6 * d], Init::AdalnBias);
    }
    // Zero output projection: an untrained model predicts zero velocity, so
    // sampling returns the noise draw unchanged.
    p("out_proj.w".into(), &[d, l], Init::Zeros);
    p("out_proj.b".into(), &[1, l], Init::Zeros);
    v
}

fn materialize(shape: &[usize], init: &Init, rng: &mut ChaCha8Rng) -> Tensor {
    match init {
        Init::Xavier => {
            let (fan_in, fan_out) = (shape[0], shape[1]);
            let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let data = (0..shape.iter().product())
                .map(|_| a * (2.0 * rng.gen::<f64>() - 1.0))
                .collect();
            Tensor::new(shape, data).unwrap()
        }
        Init::Gauss => Tensor::randn(shape, 0.5, rng),
        Init::Zeros => Tensor::zeros(shape),
        Init::AdalnBias => {
            let d = shape[1] / 6;
            let mut data = vec![0.0; shape[1]];
            data[..d].fill(1.0);
            data[3 * d..4 * d].fill(1.0);
            Tensor::new(shape, data).unwrap()
        }
    }
}

/// All learnable parameters, keyed by path.
#[derive(Debug, Clone)]
pub struct ParamSet {
    pub config: ModelConfig,
    map: BTreeMap<String, Tensor>,
}

impl ParamSet {
    /// Deterministic initialization: the rng is consumed in layout order,
    /// so one (config, seed) pair always yields the same parameters.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<ParamSet> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut map = BTreeMap::new();
        for (name, shape, init) in layout(config) {
            map.insert(name, materialize(&shape, &init, &mut rng));
        }
        Ok(ParamSet { config: config.clone(), map })
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.map.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.map.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.map.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn num_elements(&self) -> usize {
        self.map.values().map(Tensor::numel).sum()
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.map
            .get(name)
            .ok_or_else(|| Error::Config(format!("unknown parameter '{name}'")))
    }

    /// Replace one parameter's values, keeping the manifest fixed.
    pub fn set(&mut self, name: &str, value: Tensor) -> Result<()> {
        let slot = self
            .map
            .get_mut(name)
            .ok_or_else(|| Error::Config(format!("unknown parameter '{name}'")))?;
        if slot.shape != value.shape {
            return Err(Error::ShapeMismatch {
                op: "param_set",
                lhs: slot.shape.clone(),
                rhs: value.shape,
            });
        }
        *slot = value;
        Ok(())
    }

    /// Push every parameter onto a tape. Trainable staging creates grad
    /// leaves; inference stages constants.
    pub fn stage(&self, tape: &mut Tape, trainable: bool) -> StagedParams {
        let mut ids = BTreeMap::new();
        for (name, tensor) in &self.map {
            let id = if trainable {
                tape.leaf(tensor.clone().requires_grad(true))
            } else {
                tape.constant(tensor.clone())
            };
            ids.insert(name.clone(), id);
        }
        StagedParams { ids }
    }
}

/// Tape handles for one staging of a [`ParamSet`].
pub struct StagedParams {
    ids: BTreeMap<String, TensorId>,
}

impl StagedParams {
    pub fn id(&self, name: &str) -> Result<TensorId> {
        self.ids
            .get(name)
            .copied()
            .ok_or_else(|| Error::Config(format!("unknown parameter '{name}'")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, TensorId)> {
        self.ids.iter().map(|(k, v)| (k.as_str(), *v))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_is_a_function_of_config_only() {
        let a = ParamSet::init(&ModelConfig::desk(), 1).unwrap();
        let b = ParamSet::init(&ModelConfig::desk(), 2).unwrap();
        let names_a: Vec<&str> = a.names().collect();
        let names_b: Vec<&str> = b.names().collect();
        assert_eq!(names_a, names_b);
        assert!(names_a.contains(&"blocks.3.sa.wq"));
        assert!(names_a.contains(&"dummy.c_i"));
    }

    #[test]
    fn init_is_deterministic_per_seed() {
        let a = ParamSet::init(&ModelConfig::desk(), 7).unwrap();
        let b = ParamSet::init(&ModelConfig::desk(), 7).unwrap();
        for ((na, ta), (nb, tb)) in a.iter().zip(b.iter()) {
            assert_eq!(na, nb);
            assert_eq!(ta.data, tb.data);
        }
        let c = ParamSet::init(&ModelConfig::desk(), 8).unwrap();
        assert_ne!(a.get("blocks.0.sa.wq").unwrap().data, c.get("blocks.0.sa.wq").unwrap().data);
    }

    #[test]
    fn adaln_bias_starts_at_identity_scales() {
        let p = ParamSet::init(&ModelConfig::desk(), 0).unwrap();
        let b2 = p.get("blocks.0.adaln.b2").unwrap();
        let d = 64;
        assert!(b2.data[..d].iter().all(|&x| x == 1.0));
        assert!(b2.data[d..3 * d].iter().all(|&x| x == 0.0));
        assert!(b2.data[3 * d..4 * d].iter().all(|&x| x == 1.0));
        assert!(b2.data[4 * d..].iter().all(|&x| x == 0.0));
        assert!(p.get("out_proj.w").unwrap().data.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut cfg = ModelConfig::desk();
        cfg.num_heads = 3;
        assert!(cfg.validate().is_err(), "64 % 3 != 0");

        let mut cfg = ModelConfig::desk();
        cfg.embed_size = 12;
        cfg.num_heads = 4;
        assert!(cfg.validate().is_err(), "head_dim 3 is odd");

        let mut cfg = ModelConfig::desk();
        cfg.depth = 0;
        assert!(cfg.validate().is_err());

        assert!(ModelConfig::desk().validate().is_ok());
        assert!(ModelConfig::small().validate().is_ok());
    }

    #[test]
    fn set_guards_name_and_shape() {
        let mut p = ParamSet::init(&ModelConfig::desk(), 0).unwrap();
        assert!(p.set("nope", Tensor::zeros(&[1, 1])).is_err());
        assert!(p.set("dummy.c_i", Tensor::zeros(&[2, 64])).is_err());
        assert!(p.set("dummy.c_i", Tensor::zeros(&[1, 64])).is_ok());
    }

    #[test]
    fn fusion_mode_names_round_trip() {
        for m in FusionMode::ALL {
            assert_eq!(FusionMode::parse(m.name()).unwrap(), m);
        }
        assert!(FusionMode::parse("extra").is_err());
    }
}
