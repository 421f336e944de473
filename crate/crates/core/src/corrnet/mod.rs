//! Correspondence encoder: per-point encoders for hand and object, token-level
//! cross-attention fusion, state projections, and the pretraining heads
//! (contact map and arm/hand coordination).

mod data;
mod train;

pub use data::{action_chunk, frame_tensors, pearson, pretrain_samples, FrameTensors, PretrainSample, NORMAL_K};
pub use train::{
    evaluate_contact, load_encoder_checkpoint, pretrain, ContactEval, EpochMetrics, PretrainOptions, PretrainState,
};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nncore::{Axis, Graph, LayerNorm, Linear, Mlp, MultiHeadCrossAttention, ParamStore, Real, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub n_points: usize,
    pub d: usize,
    pub heads: usize,
    pub state_dim: usize,
    pub lambda: f64,
    pub gamma: f64,
    pub theta: f64,
    pub horizon: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            n_points: 1024,
            d: 128,
            heads: 4,
            state_dim: 16,
            lambda: 1.0,
            gamma: 1.0,
            theta: 10.0,
            horizon: 12,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.n_points == 0 || self.d == 0 || self.horizon == 0 || self.state_dim == 0 {
            return bad("n_points, d, horizon and state_dim must be positive".into());
        }
        if self.heads == 0 || self.d % self.heads != 0 {
            return bad(format!("d={} is not divisible by heads={}", self.d, self.heads));
        }
        if self.state_dim % self.heads != 0 {
            return bad(format!("state_dim={} is not divisible by heads={}", self.state_dim, self.heads));
        }
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return bad(format!("lambda must be a finite non-negative number, got {}", self.lambda));
        }
        if !(self.gamma >= 0.0) || !(self.theta > 0.0) {
            return bad("gamma must be >= 0 and theta > 0".into());
        }
        Ok(())
    }

    /// Length of one frame's conditioning vector.
    pub fn feature_dim(&self) -> usize {
        2 * self.d + 2 * self.state_dim
    }
}

const ENC_HIDDEN: [usize; 2] = [64, 128];
const CONTACT_HIDDEN: [usize; 2] = [128, 64];
const COORD_HIDDEN: usize = 256;

/// Shared per-point stack: three times linear → layer norm → relu.
#[derive(Debug, Clone)]
pub struct PointEncoder {
    layers: Vec<(Linear, LayerNorm)>,
}

impl PointEncoder {
    fn new<T: Real>(store: &mut ParamStore<T>, name: &str, d: usize, rng: &mut impl Rng) -> Result<Self> {
        let dims = [3, ENC_HIDDEN[0], ENC_HIDDEN[1], d];
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                Ok((
                    Linear::new(store, &format!("{name}.fc{i}"), w[0], w[1], rng)?,
                    LayerNorm::new(store, &format!("{name}.ln{i}"), w[1])?,
                ))
            })
            .collect::<Result<_>>()?;
        Ok(PointEncoder { layers })
    }

    fn forward<T: Real>(&self, g: &mut Graph<'_, T>, mut x: Var) -> Result<Var> {
        for (lin, ln) in &self.layers {
            x = lin.forward(g, x)?;
            x = ln.forward(g, x)?;
            x = g.relu(x);
        }
        Ok(x)
    }
}

/// Graph handles for one frame's encoder outputs.
#[derive(Debug, Clone, Copy)]
pub struct FrameVars {
    pub phi_h: Var,
    pub phi_o: Var,
    pub pooled_h: Var,
    pub pooled_o: Var,
    pub psi_a: Var,
    pub psi_h: Var,
}

/// Loss handles from [`CorrNet::pretrain_loss`].
#[derive(Debug, Clone, Copy)]
pub struct PretrainLoss {
    pub total: Var,
    pub contact: Var,
    pub coordination: Var,
    /// `[N, 1]` predicted contact map.
    pub contact_pred: Var,
}

/// Parameter handles of the full network. Every parameter name starts with
/// the prefix given at construction; encoder parts live under
/// `{prefix}.enc` and pretraining heads under `{prefix}.head`.
#[derive(Debug, Clone)]
pub struct CorrNet {
    pub config: EncoderConfig,
    pub da: usize,
    pub dh: usize,
    pub prefix: String,
    enc_h: PointEncoder,
    enc_o: PointEncoder,
    attn_h: MultiHeadCrossAttention,
    attn_o: MultiHeadCrossAttention,
    proj_a: Linear,
    proj_h: Linear,
    attn_sa: MultiHeadCrossAttention,
    attn_sh: MultiHeadCrossAttention,
    contact_obj: Linear,
    contact_hand: Linear,
    contact_rest: Mlp,
    arm_head: Mlp,
    hand_head: Mlp,
}

impl CorrNet {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        prefix: &str,
        config: EncoderConfig,
        da: usize,
        dh: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        config.validate()?;
        if da == 0 || dh == 0 {
            return Err(Error::InvalidArgument("arm and hand dims must be positive".into()));
        }
        let (d, s, h) = (config.d, config.state_dim, config.horizon);
        let e = format!("{prefix}.enc");
        let hd = format!("{prefix}.head");
        Ok(CorrNet {
            enc_h: PointEncoder::new(store, &format!("{e}.hand_pn"), d, rng)?,
            enc_o: PointEncoder::new(store, &format!("{e}.obj_pn"), d, rng)?,
            attn_h: MultiHeadCrossAttention::new(store, &format!("{e}.xattn_h"), d, config.heads, rng)?,
            attn_o: MultiHeadCrossAttention::new(store, &format!("{e}.xattn_o"), d, config.heads, rng)?,
            proj_a: Linear::new(store, &format!("{e}.state.proj_arm"), da, s, rng)?,
            proj_h: Linear::new(store, &format!("{e}.state.proj_hand"), dh, s, rng)?,
            attn_sa: MultiHeadCrossAttention::new(store, &format!("{e}.state.xattn_arm"), s, config.heads, rng)?,
            attn_sh: MultiHeadCrossAttention::new(store, &format!("{e}.state.xattn_hand"), s, config.heads, rng)?,
            contact_obj: Linear::new(store, &format!("{hd}.contact.obj"), d, CONTACT_HIDDEN[0], rng)?,
            contact_hand: Linear::new(store, &format!("{hd}.contact.hand"), d, CONTACT_HIDDEN[0], rng)?,
            contact_rest: Mlp::new(store, &format!("{hd}.contact.mlp"), &[CONTACT_HIDDEN[0], CONTACT_HIDDEN[1], 1], rng)?,
            arm_head: Mlp::new(store, &format!("{hd}.arm"), &[2 * d + s, COORD_HIDDEN, COORD_HIDDEN, h * da], rng)?,
            hand_head: Mlp::new(store, &format!("{hd}.hand"), &[2 * d + s, COORD_HIDDEN, COORD_HIDDEN, h * dh], rng)?,
            config,
            da,
            dh,
            prefix: prefix.to_string(),
        })
    }

    /// Prefix shared by every encoder parameter (not the heads).
    pub fn encoder_prefix(&self) -> String {
        format!("{}.enc", self.prefix)
    }

    fn check_cloud<T: Real>(&self, g: &Graph<'_, T>, x: Var, what: &str) -> Result<()> {
        let shape = g.value(x).shape();
        if shape != [self.config.n_points, 3] {
            return Err(Error::shape(
                "encode_point_tokens",
                format!("{what} cloud {shape:?}, expected [{}, 3]", self.config.n_points),
            ));
        }
        Ok(())
    }

    /// Per-point tokens `[N, d]` of the hand (`hand = true`) or object encoder.
    pub fn encode_point_tokens<T: Real>(&self, g: &mut Graph<'_, T>, cloud: Var, hand: bool) -> Result<Var> {
        self.check_cloud(g, cloud, if hand { "hand" } else { "object" })?;
        if hand {
            self.enc_h.forward(g, cloud)
        } else {
            self.enc_o.forward(g, cloud)
        }
    }

    /// Residual cross-attention in both directions; returns `(φ_H, φ_O)`.
    pub fn cross_fuse<T: Real>(&self, g: &mut Graph<'_, T>, hand_tokens: Var, obj_tokens: Var) -> Result<(Var, Var)> {
        let ah = self.attn_h.forward(g, hand_tokens, obj_tokens)?;
        let phi_h = g.add(ah, hand_tokens)?;
        let ao = self.attn_o.forward(g, obj_tokens, hand_tokens)?;
        let phi_o = g.add(ao, obj_tokens)?;
        Ok((phi_h, phi_o))
    }

    /// Projects `[1, Da]` and `[1, Dh]` states to the shared width and fuses
    /// them like the point tokens; returns `(ψ_A, ψ_H)`.
    pub fn project_states<T: Real>(&self, g: &mut Graph<'_, T>, arm: Var, hand: Var) -> Result<(Var, Var)> {
        for (x, dim, what) in [(arm, self.da, "arm"), (hand, self.dh, "hand")] {
            if g.value(x).shape() != [1, dim] {
                return Err(Error::shape(
                    "project_states",
                    format!("{what} state {:?}, expected [1, {dim}]", g.value(x).shape()),
                ));
            }
        }
        let pa = self.proj_a.forward(g, arm)?;
        let ph = self.proj_h.forward(g, hand)?;
        let fa = self.attn_sa.forward(g, pa, ph)?;
        let psi_a = g.add(fa, pa)?;
        let fh = self.attn_sh.forward(g, ph, pa)?;
        let psi_h = g.add(fh, ph)?;
        Ok((psi_a, psi_h))
    }

    pub fn features<T: Real>(
        &self,
        g: &mut Graph<'_, T>,
        obj: Var,
        hand: Var,
        arm_state: Var,
        hand_state: Var,
    ) -> Result<FrameVars> {
        let th = self.encode_point_tokens(g, hand, true)?;
        let to = self.encode_point_tokens(g, obj, false)?;
        let (phi_h, phi_o) = self.cross_fuse(g, th, to)?;
        let pooled_h = g.max_pool(phi_h, Axis::Rows)?;
        let pooled_o = g.max_pool(phi_o, Axis::Rows)?;
        let (psi_a, psi_h) = self.project_states(g, arm_state, hand_state)?;
        Ok(FrameVars {
            phi_h,
            phi_o,
            pooled_h,
            pooled_o,
            psi_a,
            psi_h,
        })
    }

    /// `[1, 2d + 2s]`: pooled hand, pooled object, ψ_A, ψ_H.
    pub fn condition<T: Real>(&self, g: &mut Graph<'_, T>, f: &FrameVars) -> Result<Var> {
        g.concat(&[f.pooled_h, f.pooled_o, f.psi_a, f.psi_h], Axis::Cols)
    }

    /// Contact probability per object point, `[N, 1]`. The first layer acts
    /// on object token ⊕ pooled hand feature, split into its two halves.
    pub fn predict_contact<T: Real>(&self, g: &mut Graph<'_, T>, f: &FrameVars) -> Result<Var> {
        let zo = self.contact_obj.forward(g, f.phi_o)?;
        let wh = g.param(self.contact_hand.weight);
        let zh = g.matmul(f.pooled_h, wh)?;
        let z = g.add_bias(zo, zh)?;
        let z = g.relu(z);
        let logits = self.contact_rest.forward(g, z)?;
        Ok(g.sigmoid(logits))
    }

    /// Arm sequence `[1, H·Da]` (row-major over steps) from pooled features
    /// and the hand-state token.
    pub fn predict_arm_seq<T: Real>(&self, g: &mut Graph<'_, T>, f: &FrameVars) -> Result<Var> {
        let x = g.concat(&[f.pooled_h, f.pooled_o, f.psi_h], Axis::Cols)?;
        self.arm_head.forward(g, x)
    }

    /// Hand sequence `[1, H·Dh]` from pooled features and the arm-state token.
    pub fn predict_hand_seq<T: Real>(&self, g: &mut Graph<'_, T>, f: &FrameVars) -> Result<Var> {
        let x = g.concat(&[f.pooled_h, f.pooled_o, f.psi_a], Axis::Cols)?;
        self.hand_head.forward(g, x)
    }

    /// Contact MSE plus λ times the summed arm and hand sequence MSEs. With
    /// λ = 0 the coordination term is still computed but left out of `total`.
    pub fn pretrain_loss<T: Real>(&self, g: &mut Graph<'_, T>, sample: &PretrainSample<T>) -> Result<PretrainLoss> {
        let n = self.config.n_points;
        let h = self.config.horizon;
        for (t, shape, what) in [
            (&sample.contact, [n, 1], "contact target"),
            (&sample.arm_seq, [1, h * self.da], "arm sequence target"),
            (&sample.hand_seq, [1, h * self.dh], "hand sequence target"),
        ] {
            if t.shape() != shape {
                return Err(Error::shape("pretrain_loss", format!("{what} {:?}, expected {shape:?}", t.shape())));
            }
        }
        let fr = &sample.frame;
        let obj = g.constant(fr.obj.clone());
        let hand = g.constant(fr.hand.clone());
        let arm = g.constant(fr.arm.clone());
        let hs = g.constant(fr.hand_state.clone());
        let f = self.features(g, obj, hand, arm, hs)?;
        let c_pred = self.predict_contact(g, &f)?;
        let c_true = g.constant(sample.contact.clone());
        let contact = g.mse(c_pred, c_true)?;
        let a_pred = self.predict_arm_seq(g, &f)?;
        let a_true = g.constant(sample.arm_seq.clone());
        let la = g.mse(a_pred, a_true)?;
        let h_pred = self.predict_hand_seq(g, &f)?;
        let h_true = g.constant(sample.hand_seq.clone());
        let lh = g.mse(h_pred, h_true)?;
        let coordination = g.add(la, lh)?;
        let total = if self.config.lambda == 0.0 {
            contact
        } else {
            let w = g.scale(coordination, self.config.lambda);
            g.add(contact, w)?
        };
        Ok(PretrainLoss {
            total,
            contact,
            coordination,
            contact_pred: c_pred,
        })
    }
}

#[cfg(test)]
mod tests;
