use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::config::{ConditioningMode, ModelConfig};
use crate::error::{Error, Result};
use crate::tensor::{Array, Float, Tensor};

/// Standard deviation of the truncated-normal weight init.
pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// N(0, σ²) truncated to ±2σ.
    TruncNormal(f64),
    Zeros,
    Ones,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

fn spec(out: &mut Vec<ParamSpec>, name: String, shape: &[usize], init: Init) {
    out.push(ParamSpec {
        name,
        shape: shape.to_vec(),
        init,
    });
}

fn linear(out: &mut Vec<ParamSpec>, prefix: &str, fan_in: usize, fan_out: usize, zero: bool) {
    let w = if zero { Init::Zeros } else { Init::TruncNormal(INIT_STD) };
    spec(out, format!("{prefix}.weight"), &[fan_in, fan_out], w);
    spec(out, format!("{prefix}.bias"), &[fan_out], Init::Zeros);
}

/// The exact parameter set a configuration demands, in a fixed order.
///
/// Denoiser tensors are unprefixed; encoder tensors live under `enc.`.
pub fn param_specs(cfg: &ModelConfig) -> Vec<ParamSpec> {
    let d = cfg.hidden;
    let mut out = Vec::new();
    linear(&mut out, "x_embed", cfg.token_dim(), d, false);
    linear(&mut out, "t_embed.fc1", cfg.freq_dim(), d, false);
    linear(&mut out, "t_embed.fc2", d, d, false);
    for i in 0..cfg.blocks {
        let p = format!("blocks.{i}");
        linear(&mut out, &format!("{p}.attn.qkv"), d, 3 * d, false);
        linear(&mut out, &format!("{p}.attn.proj"), d, d, false);
        linear(&mut out, &format!("{p}.mlp.fc1"), d, cfg.mlp_ratio * d, false);
        linear(&mut out, &format!("{p}.mlp.fc2"), cfg.mlp_ratio * d, d, false);
        linear(&mut out, &format!("{p}.ada"), d, 6 * d, true);
    }
    linear(&mut out, "final.ada", d, 2 * d, true);
    linear(&mut out, "final.linear", d, cfg.token_dim(), true);

    // Drawn after the shared tensors so every mode starts from the same
    // denoiser weights under one seed.
    match cfg.conditioning {
        ConditioningMode::Unconditional => {}
        ConditioningMode::Class => spec(
            &mut out,
            "y_embed.table".into(),
            &[cfg.num_classes.unwrap_or(0), d],
            Init::Zeros,
        ),
        ConditioningMode::Representation => linear(&mut out, "r_proj", cfg.repr_dim, d, false),
    }

    if cfg.has_encoder() {
        let e = cfg.encoder_hidden;
        linear(&mut out, "enc.x_embed", cfg.token_dim(), e, false);
        for i in 0..cfg.encoder_blocks {
            let p = format!("enc.blocks.{i}");
            spec(&mut out, format!("{p}.norm1.gain"), &[e], Init::Ones);
            spec(&mut out, format!("{p}.norm1.bias"), &[e], Init::Zeros);
            linear(&mut out, &format!("{p}.attn.qkv"), e, 3 * e, false);
            linear(&mut out, &format!("{p}.attn.proj"), e, e, false);
            spec(&mut out, format!("{p}.norm2.gain"), &[e], Init::Ones);
            spec(&mut out, format!("{p}.norm2.bias"), &[e], Init::Zeros);
            linear(&mut out, &format!("{p}.mlp.fc1"), e, cfg.mlp_ratio * e, false);
            linear(&mut out, &format!("{p}.mlp.fc2"), cfg.mlp_ratio * e, e, false);
        }
        spec(&mut out, "enc.norm.gain".into(), &[e], Init::Ones);
        spec(&mut out, "enc.norm.bias".into(), &[e], Init::Zeros);
        linear(&mut out, "enc.head", e, cfg.repr_dim, false);
    }
    out
}

/// Named parameter arrays. Plain data: `Send + Sync`, cheap to bind into a graph.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamSet<F> {
    tensors: BTreeMap<String, Array<F>>,
}

impl<F: Float> ParamSet<F> {
    pub fn new() -> Self {
        Self {
            tensors: BTreeMap::new(),
        }
    }

    pub fn init(specs: &[ParamSpec], rng: &mut impl Rng) -> Self {
        let mut set = Self::new();
        for s in specs {
            let n: usize = s.shape.iter().product();
            let data: Vec<F> = match s.init {
                Init::Zeros => vec![F::zero(); n],
                Init::Ones => vec![F::one(); n],
                Init::TruncNormal(std) => (0..n)
                    .map(|_| loop {
                        let z: f64 = rng.sample(StandardNormal);
                        if z.abs() <= 2.0 {
                            break F::from_f64(z * std);
                        }
                    })
                    .collect(),
            };
            set.insert(s.name.clone(), Array { shape: s.shape.clone(), data });
        }
        set
    }

    pub fn insert(&mut self, name: String, value: Array<F>) {
        self.tensors.insert(name, value);
    }

    pub fn remove(&mut self, name: &str) -> Option<Array<F>> {
        self.tensors.remove(name)
    }

    pub fn get(&self, name: &str) -> Option<&Array<F>> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Array<F>> {
        self.tensors.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Array<F>)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Array<F>)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(Array::numel).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.values().all(Array::is_finite)
    }

    pub fn cast<G: Float>(&self) -> ParamSet<G> {
        ParamSet {
            tensors: self.tensors.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }

    /// Wrap every array in a graph tensor; `trainable(name)` selects leaves
    /// that collect gradients.
    pub fn bind(&self, trainable: impl Fn(&str) -> bool) -> Bound<F> {
        Bound {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), Tensor::from_array(v, trainable(k))))
                .collect(),
        }
    }

    /// Bind everything as constants (inference).
    pub fn constants(&self) -> Bound<F> {
        self.bind(|_| false)
    }

    /// Check names and shapes against the specs of a configuration.
    pub fn check_against(&self, specs: &[ParamSpec]) -> Result<()> {
        if self.tensors.len() != specs.len() {
            return Err(Error::Config(format!(
                "expected {} parameter tensors, found {}",
                specs.len(),
                self.tensors.len()
            )));
        }
        for s in specs {
            match self.tensors.get(&s.name) {
                None => return Err(Error::Config(format!("missing parameter `{}`", s.name))),
                Some(a) if a.shape != s.shape => {
                    return Err(Error::Config(format!(
                        "parameter `{}` has shape {:?}, expected {:?}",
                        s.name, a.shape, s.shape
                    )))
                }
                _ => {}
            }
        }
        Ok(())
    }
}

/// Parameters bound into one graph.
pub struct Bound<F: Float> {
    tensors: BTreeMap<String, Tensor<F>>,
}

impl<F: Float> Bound<F> {
    pub fn get(&self, name: &str) -> Result<&Tensor<F>> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Config(format!("missing parameter `{name}`")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<F>)> {
        self.tensors.iter()
    }

    /// Gradients of every trainable leaf (zeros when unreached).
    pub fn grads(&self) -> BTreeMap<String, Vec<F>> {
        self.tensors
            .iter()
            .filter(|(_, t)| t.requires_grad())
            .map(|(k, t)| (k.clone(), t.grad_vec().unwrap_or_else(|| vec![F::zero(); t.numel()])))
            .collect()
    }
}

/// Configuration plus parameters: the full θ (and φ in representation mode).
#[derive(Debug, Clone, PartialEq)]
pub struct Model<F> {
    pub config: ModelConfig,
    pub params: ParamSet<F>,
}

impl<F: Float> Model<F> {
    /// Fresh initialization from `seed`.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = ParamSet::init(&param_specs(&config), &mut rng);
        Ok(Self { config, params })
    }

    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        self.params.check_against(&param_specs(&self.config))
    }

    pub fn cast<G: Float>(&self) -> Model<G> {
        Model {
            config: self.config.clone(),
            params: self.params.cast(),
        }
    }
}
