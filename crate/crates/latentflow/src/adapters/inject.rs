//! Attaching adapter banks to a trained backbone and extending them.

use super::{AdapterBank, AdapterConfig};
use crate::error::{Error, Result};
use crate::tensor::{RngState, Scalar};
use crate::udit::UditModel;

/// Linear maps inside a transformer block that can host an adapter bank.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum AdapterTarget {
    Wq,
    Wk,
    Wv,
    Wo,
    MlpIn,
    MlpOut,
}

pub const ALL_TARGETS: [AdapterTarget; 6] = [
    AdapterTarget::Wq,
    AdapterTarget::Wk,
    AdapterTarget::Wv,
    AdapterTarget::Wo,
    AdapterTarget::MlpIn,
    AdapterTarget::MlpOut,
];

impl AdapterTarget {
    pub fn name(&self) -> &'static str {
        match self {
            AdapterTarget::Wq => "Wq",
            AdapterTarget::Wk => "Wk",
            AdapterTarget::Wv => "Wv",
            AdapterTarget::Wo => "Wo",
            AdapterTarget::MlpIn => "mlp_in",
            AdapterTarget::MlpOut => "mlp_out",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "Wq" => Ok(AdapterTarget::Wq),
            "Wk" => Ok(AdapterTarget::Wk),
            "Wv" => Ok(AdapterTarget::Wv),
            "Wo" => Ok(AdapterTarget::Wo),
            "mlp_in" => Ok(AdapterTarget::MlpIn),
            "mlp_out" => Ok(AdapterTarget::MlpOut),
            other => Err(Error::Config(format!("unknown adapter target `{other}`"))),
        }
    }

    /// Attention-only target set.
    pub fn attention() -> Vec<AdapterTarget> {
        vec![
            AdapterTarget::Wq,
            AdapterTarget::Wk,
            AdapterTarget::Wv,
            AdapterTarget::Wo,
        ]
    }
}

/// Parameter accounting after injection.
#[derive(Clone, Copy, Debug)]
pub struct InjectReport {
    /// Trainable (adapter) parameter count.
    pub trainable_params: usize,
    /// Frozen backbone parameter count.
    pub backbone_params: usize,
    /// Banks attached.
    pub banks: usize,
}

impl InjectReport {
    /// Trainable fraction over `backbone + adapters + extra` parameters;
    /// `extra` covers companion models counted into the system total.
    pub fn trainable_fraction(&self, extra_params: usize) -> f64 {
        let total = self.backbone_params + self.trainable_params + extra_params;
        self.trainable_params as f64 / total as f64
    }
}

/// Attach a zero-delta adapter bank to every targeted linear map of every
/// block, freezing the backbone. Model outputs are unchanged until the
/// banks train (expert `b` matrices start at zero).
pub fn inject<E: Scalar>(
    model: &mut UditModel<E>,
    targets: &[AdapterTarget],
    cfg: &AdapterConfig,
    rng: &mut RngState,
) -> Result<InjectReport> {
    if targets.is_empty() {
        return Err(Error::Config("inject: empty target set".into()));
    }
    cfg.validate()?;
    model.freeze_backbone();

    let mut banks = 0usize;
    for (block_idx, block) in model.blocks.iter_mut().enumerate() {
        for target in targets {
            let site = block.adapter_site(target.name()).ok_or_else(|| {
                Error::Config(format!("unknown adapter target `{}`", target.name()))
            })?;
            let name = format!("blocks.{block_idx}.{}.adapters", target.name());
            let bank = AdapterBank::new(rng, &name, site.fan_in(), site.fan_out(), cfg)?;
            site.bank = Some(bank);
            banks += 1;
        }
    }

    let backbone_params: usize = model.params().iter().map(|p| p.numel()).sum();
    let trainable_params: usize = model.adapter_params().iter().map(|p| p.numel()).sum();
    Ok(InjectReport {
        trainable_params,
        backbone_params,
        banks,
    })
}

/// Append one zero-delta expert (plus router column) to every bank. Old
/// experts freeze; only the new experts and the routers remain trainable.
pub fn extend_with_expert<E: Scalar>(
    model: &mut UditModel<E>,
    rng: &mut RngState,
    a_init_std: f64,
) -> Result<InjectReport> {
    if !model.has_adapters() {
        return Err(Error::Config(
            "extend_with_expert: model has no adapter banks".into(),
        ));
    }
    let mut banks = 0usize;
    for slot in model.adapter_banks_mut() {
        if let Some(bank) = slot.as_mut() {
            bank.extend(rng, a_init_std);
            banks += 1;
        }
    }
    let backbone_params: usize = model.params().iter().map(|p| p.numel()).sum();
    let trainable_params: usize = model
        .adapter_params()
        .iter()
        .filter(|p| p.requires_grad())
        .map(|p| p.numel())
        .sum();
    Ok(InjectReport {
        trainable_params,
        backbone_params,
        banks,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ForwardCtx;
    use crate::tensor::RngState;
    use crate::udit::UditConfig;

    fn tiny_model(seed: u64) -> UditModel<f32> {
        let cfg = UditConfig {
            layers: 2,
            embed_dim: 16,
            heads: 2,
            mlp_ratio: 2.0,
            latent_dim: 4,
            time_features: 8,
            max_len: 16,
        };
        let mut rng = RngState::new(seed, 0);
        let model = UditModel::<f32>::new(&cfg, &mut rng).unwrap();
        // Randomize the output projection so outputs are nonzero.
        model
            .output_proj
            .weight
            .overwrite(&rng.normal_vec::<f32>(16 * 4))
            .unwrap();
        model
    }

    #[test]
    fn injection_preserves_outputs_bitwise() {
        let mut model = tiny_model(1);
        let mut rng = RngState::new(2, 0);
        let inputs: Vec<crate::Tensor> = (0..10)
            .map(|_| rng.normal_tensor::<f32>(&[6, 8]))
            .collect();
        let before: Vec<Vec<f32>> = inputs
            .iter()
            .map(|z| {
                model
                    .forward(z, 0.5, &mut ForwardCtx::inference())
                    .unwrap()
                    .to_vec()
            })
            .collect();
        let report = inject(
            &mut model,
            &ALL_TARGETS,
            &AdapterConfig::default(),
            &mut rng,
        )
        .unwrap();
        assert_eq!(report.banks, 12);
        for (z, want) in inputs.iter().zip(&before) {
            let got = model
                .forward(z, 0.5, &mut ForwardCtx::inference())
                .unwrap()
                .to_vec();
            assert_eq!(&got, want);
        }
        // Backbone is frozen, adapters trainable.
        assert!(model.params().iter().all(|p| !p.requires_grad()));
        assert!(model.adapter_params().iter().all(|p| p.requires_grad()));
    }

    #[test]
    fn unknown_target_is_config_error() {
        assert!(AdapterTarget::parse("Wx").is_err());
        assert!(AdapterTarget::parse("mlp_in").is_ok());
    }

    #[test]
    fn extension_requires_prior_injection() {
        let mut model = tiny_model(3);
        let mut rng = RngState::new(4, 0);
        let err = extend_with_expert(&mut model, &mut rng, 0.02).unwrap_err();
        assert_eq!(err.category(), "config");
    }

    #[test]
    fn extension_trainable_set_is_new_expert_plus_router() {
        let mut model = tiny_model(5);
        let mut rng = RngState::new(6, 0);
        inject(
            &mut model,
            &[AdapterTarget::Wq],
            &AdapterConfig::default(),
            &mut rng,
        )
        .unwrap();
        let report = extend_with_expert(&mut model, &mut rng, 0.02).unwrap();
        assert_eq!(report.banks, 2);
        for slot in model.adapter_banks_mut() {
            if let Some(bank) = slot.as_ref() {
                assert_eq!(bank.num_experts(), 6);
                for e in &bank.experts[..5] {
                    assert!(!e.is_trainable());
                }
                assert!(bank.experts[5].is_trainable());
                assert!(bank.router.wg.requires_grad());
                assert!(bank.router.noise_mu.requires_grad());
            }
        }
    }

    #[test]
    fn extension_preserves_outputs_of_untrained_banks() {
        let mut model = tiny_model(7);
        let mut rng = RngState::new(8, 0);
        inject(
            &mut model,
            &ALL_TARGETS,
            &AdapterConfig::default(),
            &mut rng,
        )
        .unwrap();
        let z = rng.normal_tensor::<f32>(&[5, 8]);
        let before = model
            .forward(&z, 0.25, &mut ForwardCtx::inference())
            .unwrap()
            .to_vec();
        extend_with_expert(&mut model, &mut rng, 0.02).unwrap();
        let after = model
            .forward(&z, 0.25, &mut ForwardCtx::inference())
            .unwrap()
            .to_vec();
        assert_eq!(before, after);
    }
}
