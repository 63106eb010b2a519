//! A configured network plus its parameters, and the bridge-sampler adapter.

use c2v_core::diffusion::Denoiser;
use c2v_core::{rng, ConditionSet, Volume};

use crate::error::{NnError, Result};
use crate::params::ParamStore;
use crate::tape::{Tape, Tensor, Var};
use crate::unet::{self, DenoiserConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    cfg: DenoiserConfig,
    params: ParamStore,
}

impl Model {
    /// Fresh initialization from the `"init"` stream of `seed`.
    pub fn new(cfg: DenoiserConfig, seed: u64) -> Result<Model> {
        cfg.validate()?;
        let mut r = rng::stream(seed, "init", &[]);
        let params = ParamStore::from_specs(&cfg.param_specs(), &mut r);
        Ok(Model { cfg, params })
    }

    pub fn from_params(cfg: DenoiserConfig, params: ParamStore) -> Result<Model> {
        cfg.validate()?;
        params.check_layout(&cfg.param_specs())?;
        Ok(Model { cfg, params })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn into_params(self) -> ParamStore {
        self.params
    }

    /// `[1, in_channels, D, H, W]`: the bridge state followed by the
    /// configured auxiliary channels in their fixed order.
    pub fn input(&self, x_t: &Volume, cond: &ConditionSet) -> Result<Tensor> {
        x_t.check_geometry(&cond.s_c)?;
        let [d, h, w] = x_t.dims();
        let mut data = Vec::with_capacity(self.cfg.in_channels * x_t.len());
        data.extend_from_slice(x_t.data());
        for v in cond.clone().with_active(self.cfg.aux).active_volumes() {
            data.extend_from_slice(v.data());
        }
        Tensor::new(vec![1, self.cfg.in_channels, d, h, w], data)
    }

    /// Record a forward pass; `trainable` decides whether parameters collect gradients.
    pub fn record(
        &self,
        tape: &mut Tape,
        input: Tensor,
        t: &[usize],
        trainable: bool,
    ) -> Result<(Var, Vec<Var>)> {
        let bound = self.params.bind(tape, trainable);
        let x = tape.constant(input);
        let out = unet::forward(&self.cfg, tape, &bound, x, t)?;
        Ok((out, bound.vars().to_vec()))
    }

    /// Inference on one input tensor.
    pub fn predict_tensor(&self, input: Tensor, t: usize) -> Result<Tensor> {
        let mut tape = Tape::new();
        let (out, _) = self.record(&mut tape, input, &[t], false)?;
        Ok(tape.value(out).clone())
    }

    pub fn predict(&self, x_t: &Volume, cond: &ConditionSet, t: usize) -> Result<Volume> {
        if x_t.dims() != [self.cfg.resolution; 3] {
            return Err(NnError::Shape(format!(
                "volume {:?} does not match the network resolution {}",
                x_t.dims(),
                self.cfg.resolution
            )));
        }
        let out = self.predict_tensor(self.input(x_t, cond)?, t)?;
        Ok(Volume::new(*x_t.grid(), out.data)?)
    }
}

/// Adapter for the bridge sampler; rejects timesteps outside `[1, T]`.
pub struct NetDenoiser<'a> {
    pub model: &'a Model,
    pub total_steps: usize,
}

impl Denoiser for NetDenoiser<'_> {
    fn predict(&self, x_t: &Volume, cond: &ConditionSet, t: usize) -> c2v_core::Result<Volume> {
        if t == 0 || t > self.total_steps {
            return Err(c2v_core::Error::InvalidArgument(format!(
                "timestep {t} outside [1, {}]",
                self.total_steps
            )));
        }
        self.model.predict(x_t, cond, t).map_err(|e| match e {
            NnError::Core(e) => e,
            e if e.is_validation() => c2v_core::Error::Geometry(e.to_string()),
            e => c2v_core::Error::Denoiser(e.to_string()),
        })
    }
}
