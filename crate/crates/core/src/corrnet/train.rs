use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::data::{pearson, PretrainSample};
use super::{CorrNet, EncoderConfig};
use crate::error::{Error, Result};
use crate::nncore::{component_rng, cosine_lr, AdamW, AdamWConfig, Checkpoint, Gradients, Graph, ParamStore, RngStream};
use crate::obsbuild::Normalizer;

pub const ENCODER_CHECKPOINT_KIND: &str = "corrnet";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainOptions {
    pub epochs: usize,
    pub batch_size: usize,
    /// Frames drawn (without replacement) per epoch; 0 means all.
    pub frames_per_epoch: usize,
    pub adamw: AdamWConfig,
    pub seed: u64,
}

impl Default for PretrainOptions {
    fn default() -> Self {
        PretrainOptions {
            epochs: 10,
            batch_size: 8,
            frames_per_epoch: 0,
            adamw: AdamWConfig::default(),
            seed: 0,
        }
    }
}

/// One row of the pretraining log. Epoch 0 holds the untrained network
/// evaluated on a slice of the training set and on the held-out set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub contact_mse: f64,
    pub coordination_mse: f64,
    pub total: f64,
    pub val_contact_mse: f64,
    pub val_coordination_mse: f64,
    pub val_pearson: f64,
}

impl EpochMetrics {
    pub const CSV_HEADER: &'static str =
        "epoch,contact_mse,coordination_mse,total,val_contact_mse,val_coordination_mse,val_pearson";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{:.8},{:.8},{:.8},{:.8},{:.8},{:.6}",
            self.epoch,
            self.contact_mse,
            self.coordination_mse,
            self.total,
            self.val_contact_mse,
            self.val_coordination_mse,
            self.val_pearson
        )
    }
}

/// Network, parameters and optimizer of a pretraining run.
#[derive(Debug, Clone)]
pub struct PretrainState {
    pub net: CorrNet,
    pub store: ParamStore<f32>,
    pub opt: AdamW<f32>,
    /// Epochs completed so far.
    pub epoch: usize,
    pub history: Vec<EpochMetrics>,
}

impl PretrainState {
    pub fn new(config: EncoderConfig, da: usize, dh: usize, opts: &PretrainOptions) -> Result<Self> {
        let mut store = ParamStore::new();
        let mut rng = component_rng(opts.seed, RngStream::CorrInit);
        let net = CorrNet::new(&mut store, "corr", config, da, dh, &mut rng)?;
        Ok(PretrainState {
            net,
            store,
            opt: AdamW::new(opts.adamw),
            epoch: 0,
            history: Vec::new(),
        })
    }

    pub fn to_checkpoint(&self, normalizer: &Normalizer, opts: &PretrainOptions) -> Checkpoint {
        let manifest = json!({
            "kind": ENCODER_CHECKPOINT_KIND,
            "encoder": self.net.config,
            "da": self.net.da,
            "dh": self.net.dh,
            "epoch": self.epoch,
            "optimizer_step": self.opt.step_count(),
            "options": opts,
            "history": self.history,
            "normalizer": normalizer.to_json(),
        });
        Checkpoint::from_store(manifest, &self.store, Some(&self.opt))
    }

    /// Rebuilds a run from its checkpoint, optimizer state included.
    pub fn from_checkpoint(ckpt: &Checkpoint, opts: &PretrainOptions) -> Result<(Self, Normalizer)> {
        let (config, da, dh, normalizer) = read_manifest(ckpt)?;
        let mut st = PretrainState::new(config, da, dh, opts)?;
        ckpt.load_params(&mut st.store)?;
        let m = &ckpt.manifest;
        let step = m["optimizer_step"].as_u64().ok_or_else(|| bad("optimizer_step"))?;
        ckpt.restore_optimizer(&st.store, &mut st.opt, step)?;
        st.epoch = m["epoch"].as_u64().ok_or_else(|| bad("epoch"))? as usize;
        st.history = serde_json::from_value(m["history"].clone())?;
        Ok((st, normalizer))
    }
}

fn bad(field: &str) -> Error {
    Error::Format(format!("encoder checkpoint manifest lacks a valid `{field}`"))
}

fn read_manifest(ckpt: &Checkpoint) -> Result<(EncoderConfig, usize, usize, Normalizer)> {
    let m = &ckpt.manifest;
    if m["kind"] != ENCODER_CHECKPOINT_KIND {
        return Err(Error::Format(format!("not an encoder checkpoint (kind {})", m["kind"])));
    }
    let config: EncoderConfig = serde_json::from_value(m["encoder"].clone())?;
    let da = m["da"].as_u64().ok_or_else(|| bad("da"))? as usize;
    let dh = m["dh"].as_u64().ok_or_else(|| bad("dh"))? as usize;
    let normalizer = Normalizer::from_json(&m["normalizer"])?;
    Ok((config, da, dh, normalizer))
}

/// Encoder config, dims, normalizer and parameters (by name) from a
/// pretraining checkpoint.
pub fn load_encoder_checkpoint(path: &Path) -> Result<(Checkpoint, EncoderConfig, usize, usize, Normalizer)> {
    let ckpt = Checkpoint::load(path)?;
    let (c, da, dh, n) = read_manifest(&ckpt)?;
    Ok((ckpt, c, da, dh, n))
}

/// Held-out statistics of the contact and coordination heads.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ContactEval {
    pub contact_mse: f64,
    pub coordination_mse: f64,
    pub total: f64,
    /// Over all points of all samples pooled together.
    pub pearson: f64,
}

pub fn evaluate_contact(net: &CorrNet, store: &ParamStore<f32>, samples: &[PretrainSample<f32>]) -> Result<ContactEval> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument("no samples to evaluate".into()));
    }
    let (mut c, mut k, mut tot) = (0.0, 0.0, 0.0);
    let mut pred = Vec::new();
    let mut truth = Vec::new();
    for s in samples {
        let mut g = Graph::with_params(store);
        let l = net.pretrain_loss(&mut g, s)?;
        c += g.value(l.contact).data()[0] as f64;
        k += g.value(l.coordination).data()[0] as f64;
        tot += g.value(l.total).data()[0] as f64;
        pred.extend(g.value(l.contact_pred).to_f64_vec());
        truth.extend(s.contact.to_f64_vec());
    }
    let n = samples.len() as f64;
    Ok(ContactEval {
        contact_mse: c / n,
        coordination_mse: k / n,
        total: tot / n,
        pearson: pearson(&pred, &truth),
    })
}

fn check_finite(v: f64, what: &str) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Numeric(format!("non-finite {what}: {v}")))
    }
}

/// Runs epochs `state.epoch + 1 ..= opts.epochs` under a cosine learning-rate
/// decay. Each epoch draws its frame
/// order from `(seed, epoch)` alone, so a resumed run repeats the losses of
/// an uninterrupted one. `on_epoch` sees every new log row (epoch 0 first
/// when starting fresh).
pub fn pretrain(
    state: &mut PretrainState,
    train: &[PretrainSample<f32>],
    val: &[PretrainSample<f32>],
    opts: &PretrainOptions,
    mut on_epoch: impl FnMut(&EpochMetrics, &PretrainState) -> Result<()>,
) -> Result<()> {
    if train.is_empty() || val.is_empty() {
        return Err(Error::InvalidArgument("pretraining needs training and held-out frames".into()));
    }
    if opts.batch_size == 0 {
        return Err(Error::InvalidArgument("batch_size must be positive".into()));
    }
    if state.epoch == 0 && state.history.is_empty() {
        let probe = &train[..train.len().min(val.len())];
        let tr = evaluate_contact(&state.net, &state.store, probe)?;
        let va = evaluate_contact(&state.net, &state.store, val)?;
        let row = EpochMetrics {
            epoch: 0,
            contact_mse: tr.contact_mse,
            coordination_mse: tr.coordination_mse,
            total: tr.total,
            val_contact_mse: va.contact_mse,
            val_coordination_mse: va.coordination_mse,
            val_pearson: va.pearson,
        };
        state.history.push(row.clone());
        on_epoch(&row, state)?;
    }
    while state.epoch < opts.epochs {
        let epoch = state.epoch + 1;
        let mut rng = component_rng(opts.seed.wrapping_add(epoch as u64), RngStream::CorrTrain);
        state.opt.config.lr = cosine_lr(opts.adamw.lr, epoch, opts.epochs);
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng);
        if opts.frames_per_epoch > 0 {
            order.truncate(opts.frames_per_epoch);
        }
        let (mut c, mut k, mut tot) = (0.0, 0.0, 0.0);
        for batch in order.chunks(opts.batch_size) {
            let mut grads = Gradients::new();
            for &i in batch {
                let mut g = Graph::with_params(&state.store);
                let l = state.net.pretrain_loss(&mut g, &train[i])?;
                let lt = check_finite(g.value(l.total).data()[0] as f64, "pretraining loss")?;
                c += g.value(l.contact).data()[0] as f64;
                k += g.value(l.coordination).data()[0] as f64;
                tot += lt;
                g.backward(l.total)?;
                grads.accumulate(g.param_grads());
            }
            grads.scale(1.0 / batch.len() as f64);
            state.opt.step(&mut state.store, &grads)?;
        }
        let n = order.len() as f64;
        let va = evaluate_contact(&state.net, &state.store, val)?;
        state.epoch = epoch;
        let row = EpochMetrics {
            epoch,
            contact_mse: c / n,
            coordination_mse: k / n,
            total: tot / n,
            val_contact_mse: va.contact_mse,
            val_coordination_mse: va.coordination_mse,
            val_pearson: va.pearson,
        };
        state.history.push(row.clone());
        on_epoch(&row, state)?;
    }
    Ok(())
}
