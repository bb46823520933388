use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Zero-mean Gaussian prior over every weight and bias.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PriorSpec {
    /// One standard deviation shared by all layers.
    Isotropic { sigma: f64 },
    /// One standard deviation per variational layer; optionally learned by
    /// empirical Bayes during training.
    PerLayer {
        layer_sigmas: Vec<f64>,
        #[serde(default)]
        learn_layer_sigmas: bool,
    },
}

impl Default for PriorSpec {
    fn default() -> Self {
        PriorSpec::Isotropic { sigma: 1.0 }
    }
}

impl PriorSpec {
    pub fn sigma_for(&self, layer: usize) -> f64 {
        match self {
            PriorSpec::Isotropic { sigma } => *sigma,
            PriorSpec::PerLayer { layer_sigmas, .. } => layer_sigmas[layer],
        }
    }

    pub fn validate(&self, layers: usize) -> Result<()> {
        let sigmas: Vec<f64> = match self {
            PriorSpec::Isotropic { sigma } => vec![*sigma],
            PriorSpec::PerLayer { layer_sigmas, .. } => {
                if layer_sigmas.len() != layers {
                    return Err(Error::Config(format!(
                        "per-layer prior has {} sigmas for {layers} layers",
                        layer_sigmas.len()
                    )));
                }
                layer_sigmas.clone()
            }
        };
        if let Some(bad) = sigmas.iter().find(|s| !(s.is_finite() && **s > 0.0)) {
            return Err(Error::Config(format!(
                "prior sigma must be positive, got {bad}"
            )));
        }
        Ok(())
    }

    pub fn learns_sigmas(&self) -> bool {
        matches!(
            self,
            PriorSpec::PerLayer {
                learn_layer_sigmas: true,
                ..
            }
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn validation() {
        assert!(PriorSpec::Isotropic { sigma: 0.0 }.validate(2).is_err());
        let p = PriorSpec::PerLayer {
            layer_sigmas: vec![1.0, 0.5],
            learn_layer_sigmas: false,
        };
        assert!(p.validate(2).is_ok());
        assert!(p.validate(3).is_err());
        assert_eq!(p.sigma_for(1), 0.5);
    }

    #[test]
    fn parses_from_toml() {
        let p: PriorSpec = toml::from_str(
            "kind = \"per_layer\"\nlayer_sigmas = [1.0, 2.0]\nlearn_layer_sigmas = true",
        )
        .unwrap();
        assert!(p.learns_sigmas());
        assert!(
            toml::from_str::<PriorSpec>("kind = \"isotropic\"\nsigma = 1.0\nbogus = 1").is_err()
        );
    }
}
