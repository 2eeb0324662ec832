//! The input-output neural jump ODE: latent state driven by a learned ODE
//! between observations, reset by a learned jump map at observations and
//! read out by a third network.

pub mod features;
mod forward;
mod online;
mod train;

use std::fs;
use std::path::Path;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Activation, BoundedNet, Mlp, NodeId, ParamStore, Tape};
use crate::paths::Dims;

pub use features::{model_features, FeatureKind, ObservationState};
pub use forward::{forward_batch, forward_batch_observed, forward_path, ForwardTrace, Mode};
pub use online::{predict_online, ObservationEvent, OnlinePredictor};
pub use train::{evaluate_losses, loss_gradient, train, EpochRecord, TrainConfig, TrainOutcome};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

fn default_true() -> bool {
    true
}

fn default_level() -> usize {
    3
}

fn default_hidden_layers() -> usize {
    1
}

fn default_gamma() -> f64 {
    100.0
}

fn default_dropout() -> f64 {
    0.1
}

/// Network sizes and wiring.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Architecture {
    pub dims: Dims,
    pub d_h: usize,
    pub hidden_width: usize,
    #[serde(default = "default_hidden_layers")]
    pub hidden_layers: usize,
    pub activation: Activation,
    #[serde(default = "default_level")]
    pub sig_level: usize,
    #[serde(default = "default_true")]
    pub recurrent_encoder: bool,
    #[serde(default = "default_true")]
    pub encoder_residual: bool,
    #[serde(default = "default_true")]
    pub decoder_residual: bool,
    #[serde(default = "default_dropout")]
    pub dropout: f64,
    #[serde(default = "default_gamma")]
    pub gamma_init: f64,
}

impl Architecture {
    /// Hidden width 100, one hidden layer, level-3 signatures, residual
    /// encoder and decoder, dropout 0.1.
    pub fn new(dims: Dims, d_h: usize, activation: Activation) -> Self {
        Self {
            dims,
            d_h,
            hidden_width: 100,
            hidden_layers: 1,
            activation,
            sig_level: 3,
            recurrent_encoder: true,
            encoder_residual: true,
            decoder_residual: true,
            dropout: 0.1,
            gamma_init: 100.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims.d_u == 0 || self.dims.d_v == 0 {
            return Err(Error::invalid(
                "input and output dimensions must be positive",
            ));
        }
        if self.d_h == 0 || self.hidden_width == 0 {
            return Err(Error::invalid("latent and hidden widths must be positive"));
        }
        if self.decoder_residual && self.d_h < self.dims.d_v {
            return Err(Error::invalid("decoder residual needs d_h >= d_v"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::invalid("dropout rate must lie in [0, 1)"));
        }
        if !(self.gamma_init > 0.0 && self.gamma_init.is_finite()) {
            return Err(Error::invalid("gamma_init must be positive"));
        }
        Ok(())
    }

    pub fn drift_input_width(&self) -> Result<usize> {
        Ok(self.d_h + features::drift_feature_width(self.dims.d_u, self.sig_level)?)
    }

    pub fn jump_input_width(&self) -> Result<usize> {
        let h = if self.recurrent_encoder { self.d_h } else { 0 };
        Ok(h + features::jump_feature_width(self.dims.d_u, self.sig_level)?)
    }

    fn sizes(&self, input: usize, output: usize) -> Vec<usize> {
        let mut s = vec![input];
        s.extend(std::iter::repeat_n(self.hidden_width, self.hidden_layers));
        s.push(output);
        s
    }
}

/// Parameters of the three networks plus their architecture.
#[derive(Debug, Clone, PartialEq)]
pub struct NjodeParams {
    pub arch: Architecture,
    pub store: ParamStore,
    pub f_net: BoundedNet,
    pub rho_net: BoundedNet,
    pub g_net: Mlp,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Checkpoint {
    version: u32,
    architecture: Architecture,
    tensors: serde_json::Value,
}

impl NjodeParams {
    /// Freshly initialized parameters.
    pub fn init(arch: Architecture, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let f_sizes = arch.sizes(arch.drift_input_width()?, arch.d_h);
        let rho_sizes = arch.sizes(arch.jump_input_width()?, arch.d_h);
        let g_sizes = arch.sizes(arch.d_h, arch.dims.d_v);
        let f_net = BoundedNet::new(
            &mut store,
            "f",
            &f_sizes,
            arch.activation,
            arch.gamma_init,
            &mut rng,
        )?;
        let rho_net = BoundedNet::new(
            &mut store,
            "rho",
            &rho_sizes,
            arch.activation,
            arch.gamma_init,
            &mut rng,
        )?;
        let g_net = Mlp::new(&mut store, "g", &g_sizes, arch.activation, &mut rng)?;
        Ok(Self {
            arch,
            store,
            f_net,
            rho_net,
            g_net,
        })
    }

    fn from_store(arch: Architecture, store: ParamStore) -> Result<Self> {
        arch.validate()?;
        let f_sizes = arch.sizes(arch.drift_input_width()?, arch.d_h);
        let rho_sizes = arch.sizes(arch.jump_input_width()?, arch.d_h);
        let g_sizes = arch.sizes(arch.d_h, arch.dims.d_v);
        let mut next = 0;
        let mut bounded = |sizes: &[usize]| -> Result<BoundedNet> {
            let inner = Mlp::from_store(&store, next, sizes, arch.activation)?;
            next += 2 * (sizes.len() - 1);
            let gamma = store
                .ids()
                .nth(next)
                .filter(|&id| store.get(id).dim() == (1, 1))
                .ok_or_else(|| Error::invalid("missing clip radius in checkpoint"))?;
            next += 1;
            Ok(BoundedNet { inner, gamma })
        };
        let f_net = bounded(&f_sizes)?;
        let rho_net = bounded(&rho_sizes)?;
        let g_net = Mlp::from_store(&store, next, &g_sizes, arch.activation)?;
        if next + 2 * (g_sizes.len() - 1) != store.len() {
            return Err(Error::invalid("checkpoint has extra tensors"));
        }
        Ok(Self {
            arch,
            store,
            f_net,
            rho_net,
            g_net,
        })
    }

    pub fn to_json_string(&self) -> String {
        let ck = Checkpoint {
            version: CHECKPOINT_FORMAT_VERSION,
            architecture: self.arch.clone(),
            tensors: self.store.to_json(),
        };
        serde_json::to_string(&ck).expect("checkpoint serializes")
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        let raw: serde_json::Value =
            serde_json::from_str(text).map_err(|e| Error::parse("checkpoint", "json", e))?;
        match raw.get("version").and_then(|v| v.as_u64()) {
            Some(v) if v == u64::from(CHECKPOINT_FORMAT_VERSION) => {}
            Some(v) => {
                return Err(Error::UnsupportedVersion {
                    found: u32::try_from(v).unwrap_or(u32::MAX),
                    expected: CHECKPOINT_FORMAT_VERSION,
                })
            }
            None => return Err(Error::parse("checkpoint", "version", "missing")),
        }
        let ck: Checkpoint = serde_json::from_value(raw)
            .map_err(|e| Error::parse("checkpoint", "architecture", e))?;
        Self::from_store(ck.architecture, ParamStore::from_json(&ck.tensors)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_json_string()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json_str(&text)
    }

    fn dropout_rate(&self) -> f64 {
        self.arch.dropout
    }

    /// `g(h)` (+ the first `d_V` latent coordinates with the decoder residual).
    pub(crate) fn readout(
        &self,
        tape: &mut Tape<'_>,
        h: NodeId,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<NodeId> {
        let out = self
            .g_net
            .forward_tape(tape, h, rng.map(|r| (self.dropout_rate(), r)))?;
        if self.arch.decoder_residual {
            let skip = tape.slice_cols(h, 0, self.arch.dims.d_v);
            Ok(tape.add(out, skip))
        } else {
            Ok(out)
        }
    }

    /// New latent rows after a jump from `h_minus` with non-latent jump
    /// features `feats`.
    pub(crate) fn jump(
        &self,
        tape: &mut Tape<'_>,
        h_minus: NodeId,
        feats: Array2<f64>,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<NodeId> {
        let x = tape.input(feats);
        let x = if self.arch.recurrent_encoder {
            tape.concat_cols(&[h_minus, x])
        } else {
            x
        };
        let r = self
            .rho_net
            .forward_tape(tape, x, rng.map(|r| (self.dropout_rate(), r)))?;
        Ok(if self.arch.encoder_residual {
            tape.add(h_minus, r)
        } else {
            r
        })
    }

    /// One explicit Euler step `h + dt · f(h, feats)`.
    pub(crate) fn drift_step(
        &self,
        tape: &mut Tape<'_>,
        h: NodeId,
        feats: Array2<f64>,
        dt: f64,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<NodeId> {
        let x = tape.input(feats);
        let x = tape.concat_cols(&[h, x]);
        let f = self
            .f_net
            .forward_tape(tape, x, rng.map(|r| (self.dropout_rate(), r)))?;
        Ok(tape.axpy(h, dt, f))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn checkpoint_round_trip() {
        let arch = Architecture::new(Dims::new(2, 1), 8, Activation::Relu);
        let p = NjodeParams::init(arch, 3).unwrap();
        let back = NjodeParams::from_json_str(&p.to_json_string()).unwrap();
        assert_eq!(back, p);
    }

    #[test]
    fn checkpoint_version_is_checked() {
        let arch = Architecture::new(Dims::new(1, 1), 4, Activation::Tanh);
        let text = NjodeParams::init(arch, 3)
            .unwrap()
            .to_json_string()
            .replacen("\"version\":1", "\"version\":2", 1);
        assert!(matches!(
            NjodeParams::from_json_str(&text),
            Err(Error::UnsupportedVersion { found: 2, .. })
        ));
    }

    #[test]
    fn decoder_residual_needs_room() {
        let mut arch = Architecture::new(Dims::new(1, 3), 2, Activation::Tanh);
        assert!(NjodeParams::init(arch.clone(), 0).is_err());
        arch.decoder_residual = false;
        assert!(NjodeParams::init(arch, 0).is_ok());
    }
}
