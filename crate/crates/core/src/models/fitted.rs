use serde::{Deserialize, Serialize};

use super::{
    ArConfig, ArModel, Family, FlowConfig, FlowModel, GenerativeModel, InputSpec, ModelError, QuantImage, VaeConfig,
    VaeModel,
};
use crate::data::{adapt_channels, Image};
use crate::frequency::FrequencyConfig;
use crate::tensor::ParamStore;

/// Family-agnostic model settings. Unset sizes take the family defaults:
/// VAE 4 conv layers, base width 32, latent 100 (grayscale) or 200 (colour);
/// flow 8 couplings of 32 filters; AR 5 masked layers of 64 filters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub family: Family,
    pub latent_dim: Option<usize>,
    pub layers: Option<usize>,
    pub filters: Option<usize>,
    pub quant_levels: usize,
    /// Importance samples for VAE likelihoods at evaluation time.
    pub iw_samples: usize,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            family: Family::Vae,
            latent_dim: None,
            layers: None,
            filters: None,
            quant_levels: 256,
            iw_samples: 20,
            init_seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn vae(&self, image_channels: usize) -> VaeConfig {
        let d = VaeConfig::default();
        VaeConfig {
            latent_dim: self.latent_dim.unwrap_or(if image_channels == 1 { 100 } else { 200 }),
            base_width: self.filters.unwrap_or(d.base_width),
            conv_layers: self.layers.unwrap_or(d.conv_layers),
            iw_samples: self.iw_samples,
            init_seed: self.init_seed,
        }
    }

    pub fn flow(&self) -> FlowConfig {
        let d = FlowConfig::default();
        FlowConfig {
            layers: self.layers.unwrap_or(d.layers),
            filters: self.filters.unwrap_or(d.filters),
            init_seed: self.init_seed,
        }
    }

    pub fn ar(&self) -> ArConfig {
        let d = ArConfig::default();
        ArConfig {
            layers: self.layers.unwrap_or(d.layers),
            filters: self.filters.unwrap_or(d.filters),
            init_seed: self.init_seed,
        }
    }
}

#[derive(Clone, Debug)]
pub enum AnyModel {
    Vae(VaeModel<f32>),
    Flow(FlowModel<f32>),
    Ar(ArModel<f32>),
}

impl AnyModel {
    pub fn as_dyn(&self) -> &dyn GenerativeModel {
        match self {
            AnyModel::Vae(m) => m,
            AnyModel::Flow(m) => m,
            AnyModel::Ar(m) => m,
        }
    }

    pub fn as_dyn_mut(&mut self) -> &mut dyn GenerativeModel {
        match self {
            AnyModel::Vae(m) => m,
            AnyModel::Flow(m) => m,
            AnyModel::Ar(m) => m,
        }
    }
}

/// A model together with the input encoding it was built for.
#[derive(Clone, Debug)]
pub struct FittedModel {
    pub model: AnyModel,
    /// `Some` when the model consumes frequency-augmented inputs.
    pub freq: Option<FrequencyConfig>,
    image_channels: usize,
}

impl FittedModel {
    /// Fresh model for images of `resolution = (h, w, c)`.
    pub fn build(
        config: &ModelConfig,
        resolution: (usize, usize, usize),
        freq: Option<FrequencyConfig>,
    ) -> Result<Self, ModelError> {
        let (h, w, c) = resolution;
        if let Some(f) = &freq {
            f.validate(h, w)?;
        }
        let spec = InputSpec::new(h, w, c + freq.is_some() as usize, config.quant_levels)?;
        let model = match config.family {
            Family::Vae => AnyModel::Vae(VaeModel::new(spec, config.vae(c))?),
            Family::Flow => AnyModel::Flow(FlowModel::new(spec, config.flow())?),
            Family::Ar => AnyModel::Ar(ArModel::new(spec, config.ar())?),
        };
        Ok(Self { model, freq, image_channels: c })
    }

    pub fn family(&self) -> Family {
        self.model.as_dyn().family()
    }

    pub fn spec(&self) -> InputSpec {
        self.model.as_dyn().spec()
    }

    pub fn image_channels(&self) -> usize {
        self.image_channels
    }

    pub fn params(&self) -> &ParamStore<f32> {
        self.model.as_dyn().params()
    }

    /// Replaces all parameter values, e.g. from a checkpoint, and marks the
    /// model trained.
    pub fn load_params(&mut self, store: &ParamStore<f32>) -> Result<(), ModelError> {
        self.model.as_dyn_mut().params_mut().load_from(store)?;
        self.model.as_dyn_mut().mark_trained();
        Ok(())
    }

    /// Model input for `image`, converting its channel count if needed.
    pub fn encode(&self, image: &Image) -> Result<QuantImage, ModelError> {
        let s = self.spec();
        if (image.height(), image.width()) != (s.height, s.width) {
            let got = InputSpec { height: image.height(), width: image.width(), ..s };
            return Err(ModelError::SpecMismatch { expected: s, got });
        }
        let adapted;
        let img = if image.channels() == self.image_channels {
            image
        } else {
            adapted =
                adapt_channels(image, self.image_channels).map_err(|e| ModelError::Architecture(e.to_string()))?;
            &adapted
        };
        QuantImage::encode(img, self.freq.as_ref(), s.levels)
    }
}
