use std::path::Path;

use crate::error::{Error, Result};
use crate::model::checkpoint::Checkpoint;
use crate::model::{ModelConfig, Weights};
use crate::modality::Adapter;
use crate::numerics::{adam_step, AdamConfig, Matrix, MomentState};

use super::Grads;

/// Everything needed to resume training bit-exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub step: usize,
    pub weights: Weights,
    pub adapter: Adapter,
    /// Adam moments, in `weights.named()` then `adapter.named()` order.
    pub moments: Vec<MomentState>,
}

impl TrainState {
    pub fn fresh(weights: &Weights, adapter: &Adapter) -> Self {
        let moments = weights
            .named()
            .iter()
            .map(|(_, t)| MomentState::new(t.data().len()))
            .chain(adapter.named().iter().map(|(_, t)| MomentState::new(t.data().len())))
            .collect();
        Self { step: 0, weights: weights.clone(), adapter: adapter.clone(), moments }
    }

    pub(crate) fn apply(
        &mut self,
        weights: &mut Weights,
        adapter: &mut Adapter,
        grads: &Grads,
        hyper: &AdamConfig,
        step: u64,
    ) -> Result<()> {
        let params = weights.named_mut().into_iter().chain(adapter.named_mut());
        for (((name, p), (_, g)), m) in params.zip(grads.named()).zip(self.moments.iter_mut()) {
            adam_step(&name, p.data_mut(), g.data(), m, hyper, step)?;
        }
        Ok(())
    }

    pub(crate) fn snapshot(&mut self, weights: &Weights, adapter: &Adapter) {
        self.weights = weights.clone();
        self.adapter = adapter.clone();
    }

    pub fn to_checkpoint(&self, cfg: &ModelConfig) -> Checkpoint {
        let mut tensors: Vec<(String, Matrix)> = Vec::new();
        let mut names = Vec::new();
        for (n, t) in self.weights.named() {
            tensors.push((format!("model.{n}"), t.clone()));
            names.push(n);
        }
        for (n, t) in self.adapter.named() {
            tensors.push((n.clone(), t.clone()));
            names.push(n);
        }
        for (name, m) in names.iter().zip(&self.moments) {
            let len = m.m.len();
            tensors.push((format!("adam_m.{name}"), Matrix::from_vec(1, len, m.m.clone()).unwrap()));
            tensors.push((format!("adam_v.{name}"), Matrix::from_vec(1, len, m.v.clone()).unwrap()));
        }
        let a = &self.adapter;
        Checkpoint {
            config: *cfg,
            meta: vec![
                ("step".into(), self.step as u64),
                ("d_enc".into(), a.w1.rows() as u64),
                ("adapter_hidden".into(), a.w1.cols() as u64),
            ],
            tensors,
        }
    }

    /// Restores a state whose shapes must match `cfg` and the adapter dims
    /// recorded in the checkpoint.
    pub fn from_checkpoint(ck: &Checkpoint, cfg: &ModelConfig) -> Result<Self> {
        let meta = |k: &str| ck.meta(k).ok_or_else(|| Error::Format(format!("checkpoint lacks {k}")));
        let mut weights = Weights::zeros(cfg);
        ck.fill("model.", weights.named_mut())?;
        let mut adapter = Adapter::zeros(meta("d_enc")? as usize, meta("adapter_hidden")? as usize, cfg.d_model);
        ck.fill("", adapter.named_mut())?;
        let mut state = TrainState::fresh(&weights, &adapter);
        let names: Vec<String> = weights.named().into_iter().map(|(n, _)| n).chain(adapter.named().into_iter().map(|(n, _)| n)).collect();
        for (name, m) in names.iter().zip(state.moments.iter_mut()) {
            let mut mm = Matrix::zeros(1, m.m.len());
            let mut vv = Matrix::zeros(1, m.v.len());
            ck.fill("", vec![(format!("adam_m.{name}"), &mut mm), (format!("adam_v.{name}"), &mut vv)])?;
            m.m = mm.into_vec();
            m.v = vv.into_vec();
        }
        state.step = meta("step")? as usize;
        Ok(state)
    }

    pub fn save(&self, path: &Path, cfg: &ModelConfig) -> Result<()> {
        self.to_checkpoint(cfg).save(path)
    }

    pub fn load(path: &Path, cfg: &ModelConfig) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?, cfg)
    }
}
