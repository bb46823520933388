//! Model selection (MLP head-only or ViT trunk plus head) and the model
//! checkpoint container.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::bayes::{
    BayesianClassifier, ClassifierSpec, ElboBreakdown, PosteriorKind, PredictiveDistribution,
    PriorSpec, VariationalModel,
};
use crate::codec::{unseal, Reader, Writer};
use crate::error::{Error, Result};
use crate::numeric::{Activation, Rng, Tape, Tensor, Var};
use crate::vit::{VitConfig, VitModel, VIT_SECTION};

pub const MODEL_MAGIC: &[u8; 4] = b"UALB";
pub const MODEL_VERSION: u32 = 1;

fn default_activation() -> Activation {
    Activation::Relu
}

fn default_mlp_ratio() -> f64 {
    2.0
}

/// Declarative model description; input width and class count come from
/// the dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelSpec {
    Mlp {
        #[serde(default)]
        hidden: Vec<usize>,
        #[serde(default = "default_activation")]
        activation: Activation,
        #[serde(default)]
        prior: PriorSpec,
        #[serde(default)]
        posterior: PosteriorKind,
    },
    Vit {
        patch_size: usize,
        embed_dim: usize,
        heads: usize,
        depth: usize,
        #[serde(default = "default_mlp_ratio")]
        mlp_ratio: f64,
        #[serde(default)]
        head_hidden: Vec<usize>,
        #[serde(default = "default_activation")]
        activation: Activation,
        #[serde(default)]
        prior: PriorSpec,
        #[serde(default)]
        posterior: PosteriorKind,
    },
}

impl Default for ModelSpec {
    fn default() -> Self {
        ModelSpec::Mlp {
            hidden: vec![16],
            activation: Activation::Relu,
            prior: PriorSpec::default(),
            posterior: PosteriorKind::MeanField,
        }
    }
}

fn head_spec(
    input: usize,
    hidden: &[usize],
    classes: usize,
    activation: Activation,
    prior: &PriorSpec,
    posterior: PosteriorKind,
) -> ClassifierSpec {
    let dims = std::iter::once(input)
        .chain(hidden.iter().copied())
        .chain([classes])
        .collect();
    let mut spec = ClassifierSpec::mlp(dims, activation);
    spec.prior = prior.clone();
    spec.posterior = posterior;
    spec
}

impl ModelSpec {
    /// `input_shape` is the per-sample feature shape (`[d]` or `[H, W, C]`).
    pub fn build(&self, input_shape: &[usize], class_count: usize, seed: u64) -> Result<Model> {
        match self {
            ModelSpec::Mlp {
                hidden,
                activation,
                prior,
                posterior,
            } => {
                let d = input_shape.iter().product();
                let spec = head_spec(d, hidden, class_count, *activation, prior, *posterior);
                Ok(Model::Mlp(BayesianClassifier::init(&spec, seed)?))
            }
            ModelSpec::Vit {
                patch_size,
                embed_dim,
                heads,
                depth,
                mlp_ratio,
                head_hidden,
                activation,
                prior,
                posterior,
            } => {
                let [h, w, c] = input_shape else {
                    return Err(Error::Config(format!(
                        "vit model needs image features [H, W, C], dataset has {input_shape:?}"
                    )));
                };
                let config = VitConfig {
                    image_size: [*h, *w, *c],
                    patch_size: *patch_size,
                    embed_dim: *embed_dim,
                    heads: *heads,
                    depth: *depth,
                    mlp_ratio: *mlp_ratio,
                    head: head_spec(
                        *embed_dim,
                        head_hidden,
                        class_count,
                        *activation,
                        prior,
                        *posterior,
                    ),
                };
                Ok(Model::Vit(Box::new(VitModel::init(&config, seed)?)))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Model {
    Mlp(BayesianClassifier),
    Vit(Box<VitModel>),
}

impl Model {
    pub fn head(&self) -> &BayesianClassifier {
        match self {
            Model::Mlp(c) => c,
            Model::Vit(v) => &v.head,
        }
    }

    /// Per-sample feature shape the model expects.
    pub fn input_shape(&self) -> Vec<usize> {
        match self {
            Model::Mlp(c) => vec![c.input_dim()],
            Model::Vit(v) => v.config.image_size.to_vec(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::with_header(MODEL_MAGIC, MODEL_VERSION);
        self.head().write_to(&mut w);
        if let Model::Vit(v) = self {
            v.write_trunk(&mut w);
        }
        w.finish_sealed()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let body = unseal(bytes)?;
        let mut r = Reader::with_header(body, MODEL_MAGIC, MODEL_VERSION)?;
        let head = BayesianClassifier::read_from(&mut r)?;
        let model = if r.peek(4) == Some(VIT_SECTION.as_slice()) {
            Model::Vit(Box::new(VitModel::read_trunk(&mut r, head)?))
        } else {
            Model::Mlp(head)
        };
        r.expect_end()?;
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

impl VariationalModel for Model {
    fn bind_params(&self, tape: &mut Tape) -> Vec<Var> {
        match self {
            Model::Mlp(c) => c.bind_params(tape),
            Model::Vit(v) => v.bind_params(tape),
        }
    }

    fn elbo_graph(
        &self,
        tape: &mut Tape,
        leaves: &[Var],
        x: &Tensor,
        labels: &[usize],
        m_train: usize,
        kl_weight: f64,
        lambda: f64,
        rng: &mut Rng,
    ) -> Result<(Var, ElboBreakdown)> {
        match self {
            Model::Mlp(c) => c.elbo_graph(tape, leaves, x, labels, m_train, kl_weight, lambda, rng),
            Model::Vit(v) => v.elbo_graph(tape, leaves, x, labels, m_train, kl_weight, lambda, rng),
        }
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        match self {
            Model::Mlp(c) => c.params_mut(),
            Model::Vit(v) => v.params_mut(),
        }
    }

    fn predict_mc(
        &self,
        x: &Tensor,
        m: usize,
        lambda: f64,
        rng: &mut Rng,
    ) -> Result<Vec<PredictiveDistribution>> {
        match self {
            Model::Mlp(c) => VariationalModel::predict_mc(c, x, m, lambda, rng),
            Model::Vit(v) => v.predict_mc(x, m, lambda, rng),
        }
    }

    fn class_count(&self) -> usize {
        self.head().class_count
    }

    fn end_of_epoch(&mut self) -> Result<()> {
        match self {
            Model::Mlp(c) => c.end_of_epoch(),
            Model::Vit(v) => v.end_of_epoch(),
        }
    }
}
