//! The decoder network: masked multi-head self-attention blocks, the
//! fully-connected residual fusion block, and the two prediction heads.

use std::cell::RefCell;

use minitensor::{
    add, batch_norm1d, concat_last, dropout, gather_rows, layer_norm, linear, matmul, relu, scale,
    softmax_last, BatchNormState, Scalar, Tensor, TensorError,
};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::embed::{EmbedFlags, EmbeddingTables};
use crate::train::Batch;

pub const LAYER_NORM_EPS: f64 = 1e-5;
pub const BATCH_NORM_EPS: f64 = 1e-5;
pub const BATCH_NORM_MOMENTUM: f64 = 0.1;

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("config field {field}: {msg}")]
    BadConfig { field: &'static str, msg: String },
    #[error("{feature} index out of vocabulary: {source}")]
    OutOfVocabulary {
        feature: &'static str,
        source: TensorError,
    },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("batch is empty")]
    EmptyBatch,
    #[error("conditioned forward needs one next-mode index per sample")]
    MissingNextModes,
    #[error("batch vocabulary does not fit the model: {msg}")]
    VocabularyMismatch { msg: String },
}

/// Network hyperparameters and vocabulary sizes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub d_model: usize,
    pub d_user: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub feedforward: usize,
    pub fc_dropout: f64,
    pub sublayer_dropout: f64,
    pub num_locations: usize,
    pub num_modes: usize,
    pub num_users: usize,
    pub use_location_feature: bool,
    pub use_temporal_features: bool,
    pub use_mode_feature: bool,
    /// Adds a learned projection of the true next-mode embedding onto the
    /// decoder output before fusion.
    pub conditioned_on_next_mode: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_model: 64,
            d_user: 16,
            num_layers: 4,
            num_heads: 8,
            feedforward: 256,
            fc_dropout: 0.1,
            sublayer_dropout: 0.1,
            num_locations: 0,
            num_modes: crate::data::NUM_MODES,
            num_users: 0,
            use_location_feature: true,
            use_temporal_features: true,
            use_mode_feature: true,
            conditioned_on_next_mode: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let positive: [(&'static str, usize); 7] = [
            ("d_model", self.d_model),
            ("d_user", self.d_user),
            ("num_layers", self.num_layers),
            ("num_heads", self.num_heads),
            ("feedforward", self.feedforward),
            ("num_locations", self.num_locations),
            ("num_users", self.num_users),
        ];
        for (field, v) in positive {
            if v == 0 {
                return Err(ModelError::BadConfig {
                    field,
                    msg: "must be positive".into(),
                });
            }
        }
        if self.d_model % self.num_heads != 0 {
            return Err(ModelError::BadConfig {
                field: "num_heads",
                msg: format!(
                    "d_model {} is not divisible by num_heads {}",
                    self.d_model, self.num_heads
                ),
            });
        }
        if self.d_model % 2 != 0 {
            return Err(ModelError::BadConfig {
                field: "d_model",
                msg: "must be even for the positional encoding".into(),
            });
        }
        if self.num_modes != crate::data::NUM_MODES {
            return Err(ModelError::BadConfig {
                field: "num_modes",
                msg: format!("mode vocabulary is fixed at 7, got {}", self.num_modes),
            });
        }
        for (field, p) in [
            ("fc_dropout", self.fc_dropout),
            ("sublayer_dropout", self.sublayer_dropout),
        ] {
            if !(0.0..1.0).contains(&p) {
                return Err(ModelError::BadConfig {
                    field,
                    msg: format!("dropout {p} outside [0, 1)"),
                });
            }
        }
        Ok(())
    }

    pub fn embed_flags(&self) -> EmbedFlags {
        EmbedFlags {
            location: self.use_location_feature,
            temporal: self.use_temporal_features,
            mode: self.use_mode_feature,
        }
    }

    fn fused_width(&self) -> usize {
        self.d_model + self.d_user
    }

    /// Closed-form trainable parameter count for this configuration. The
    /// implementation's actual count must match it exactly.
    pub fn param_count(&self) -> usize {
        let (d, du, ff) = (self.d_model, self.d_user, self.feedforward);
        let df = self.fused_width();
        let mut count = 0usize;
        if self.use_location_feature {
            count += self.num_locations * d;
        }
        if self.use_temporal_features {
            count += crate::data::NUM_TIME_BINS * d + crate::data::NUM_WEEKDAYS * d;
        }
        if self.use_mode_feature {
            count += self.num_modes * d;
        }
        count += self.num_users * du;
        // per block: four projections, the feedforward pair, two layer norms
        let per_block = 4 * (d * d + d) + (d * ff + ff) + (ff * d + d) + 4 * d;
        count += self.num_layers * per_block;
        // fusion: linear + batch-norm gain/bias
        count += df * df + df + 2 * df;
        // heads
        count += df * self.num_locations + self.num_locations;
        count += df * self.num_modes + self.num_modes;
        if self.conditioned_on_next_mode {
            count += d * d + d;
        }
        count
    }
}

struct LinearLayer<E: Scalar> {
    w: Tensor<E>,
    b: Tensor<E>,
}

impl<E: Scalar> LinearLayer<E> {
    fn new(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let w: Vec<E> = (0..fan_in * fan_out)
            .map(|_| E::from_f64(rng.gen_range(-bound..bound)))
            .collect();
        LinearLayer {
            w: Tensor::parameter(&[fan_in, fan_out], w),
            b: Tensor::parameter(&[fan_out], vec![E::ZERO; fan_out]),
        }
    }

    fn apply(&self, x: &Tensor<E>) -> Result<Tensor<E>, TensorError> {
        linear(x, &self.w, &self.b)
    }
}

struct LayerNormParams<E: Scalar> {
    gain: Tensor<E>,
    bias: Tensor<E>,
}

impl<E: Scalar> LayerNormParams<E> {
    fn new(width: usize) -> Self {
        LayerNormParams {
            gain: Tensor::parameter(&[width], vec![E::ONE; width]),
            bias: Tensor::parameter(&[width], vec![E::ZERO; width]),
        }
    }

    fn apply(&self, x: &Tensor<E>) -> Result<Tensor<E>, TensorError> {
        layer_norm(x, &self.gain, &self.bias, LAYER_NORM_EPS)
    }
}

/// The scaled dot-product attention core. Returns the context values and the
/// attention weights; `mask` (zero where allowed, minus infinity where not)
/// broadcasts against the score matrix.
pub fn scaled_dot_attention<E: Scalar>(
    q: &Tensor<E>,
    k: &Tensor<E>,
    v: &Tensor<E>,
    mask: &Tensor<E>,
) -> Result<(Tensor<E>, Tensor<E>), ModelError> {
    let d_k = *q.shape().last().ok_or(ModelError::EmptyBatch)?;
    let scores = matmul(q, &k.transpose_last()?)?;
    let scores = scale(&scores, 1.0 / (d_k as f64).sqrt());
    let masked = add(&scores, mask)?;
    let weights = softmax_last(&masked)?;
    let context = matmul(&weights, v)?;
    Ok((context, weights))
}

/// Additive attention mask `(B, 1, m, m)`: step i may see steps j <= i that
/// are real (not padding).
pub fn attention_mask<E: Scalar>(lengths: &[usize], max_len: usize) -> Tensor<E> {
    let b = lengths.len();
    let neg_inf = E::from_f64(f64::NEG_INFINITY);
    let mut data = vec![E::ZERO; b * max_len * max_len];
    for (bi, &len) in lengths.iter().enumerate() {
        for i in 0..max_len {
            for j in 0..max_len {
                if j > i || j >= len {
                    data[(bi * max_len + i) * max_len + j] = neg_inf;
                }
            }
        }
    }
    Tensor::constant(&[b, 1, max_len, max_len], data)
}

struct DecoderBlock<E: Scalar> {
    wq: LinearLayer<E>,
    wk: LinearLayer<E>,
    wv: LinearLayer<E>,
    wo: LinearLayer<E>,
    ln_attn: LayerNormParams<E>,
    ff1: LinearLayer<E>,
    ff2: LinearLayer<E>,
    ln_ff: LayerNormParams<E>,
}

impl<E: Scalar> DecoderBlock<E> {
    fn new(rng: &mut ChaCha8Rng, d: usize, ff: usize) -> Self {
        DecoderBlock {
            wq: LinearLayer::new(rng, d, d),
            wk: LinearLayer::new(rng, d, d),
            wv: LinearLayer::new(rng, d, d),
            wo: LinearLayer::new(rng, d, d),
            ln_attn: LayerNormParams::new(d),
            ff1: LinearLayer::new(rng, d, ff),
            ff2: LinearLayer::new(rng, ff, d),
            ln_ff: LayerNormParams::new(d),
        }
    }

    /// One block: masked multi-head attention and the feedforward sublayer,
    /// each wrapped as sublayer -> dropout -> residual add -> layer norm.
    fn forward(
        &self,
        x: &Tensor<E>,
        mask: &Tensor<E>,
        heads: usize,
        dropout_p: f64,
        train: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Tensor<E>, ModelError> {
        let (b, m, d) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let dk = d / heads;
        let x2 = x.reshape(&[b * m, d])?;
        let split = |t: Tensor<E>| -> Result<Tensor<E>, TensorError> {
            t.reshape(&[b, m, heads, dk])?.permute(&[0, 2, 1, 3])
        };
        let q = split(self.wq.apply(&x2)?)?;
        let k = split(self.wk.apply(&x2)?)?;
        let v = split(self.wv.apply(&x2)?)?;
        let (context, _) = scaled_dot_attention(&q, &k, &v, mask)?;
        let merged = context.permute(&[0, 2, 1, 3])?.reshape(&[b * m, d])?;
        let attn_out = self.wo.apply(&merged)?;
        let attn_out = dropout(&attn_out, dropout_p, train, rng)?;
        let x2 = self.ln_attn.apply(&add(&x2, &attn_out)?)?;

        let ff = self.ff2.apply(&relu(&self.ff1.apply(&x2)?))?;
        let ff = dropout(&ff, dropout_p, train, rng)?;
        let x2 = self.ln_ff.apply(&add(&x2, &ff)?)?;
        Ok(x2.reshape(&[b, m, d])?)
    }

    fn named(&self, prefix: &str, out: &mut Vec<(String, Tensor<E>)>) {
        for (name, t) in [
            ("attn.wq.weight", &self.wq.w),
            ("attn.wq.bias", &self.wq.b),
            ("attn.wk.weight", &self.wk.w),
            ("attn.wk.bias", &self.wk.b),
            ("attn.wv.weight", &self.wv.w),
            ("attn.wv.bias", &self.wv.b),
            ("attn.wo.weight", &self.wo.w),
            ("attn.wo.bias", &self.wo.b),
            ("ln_attn.gain", &self.ln_attn.gain),
            ("ln_attn.bias", &self.ln_attn.bias),
            ("ff.w1.weight", &self.ff1.w),
            ("ff.w1.bias", &self.ff1.b),
            ("ff.w2.weight", &self.ff2.w),
            ("ff.w2.bias", &self.ff2.b),
            ("ln_ff.gain", &self.ln_ff.gain),
            ("ln_ff.bias", &self.ln_ff.bias),
        ] {
            out.push((format!("{prefix}.{name}"), t.clone()));
        }
    }
}

/// The fully-connected residual block between the decoder output (with the
/// user embedding concatenated) and the prediction heads: linear, relu,
/// dropout, residual add, batch norm.
struct FusionBlock<E: Scalar> {
    lin: LinearLayer<E>,
    bn_gamma: Tensor<E>,
    bn_beta: Tensor<E>,
    bn_state: RefCell<BatchNormState<E>>,
}

impl<E: Scalar> FusionBlock<E> {
    fn new(rng: &mut ChaCha8Rng, width: usize) -> Self {
        FusionBlock {
            lin: LinearLayer::new(rng, width, width),
            bn_gamma: Tensor::parameter(&[width], vec![E::ONE; width]),
            bn_beta: Tensor::parameter(&[width], vec![E::ZERO; width]),
            bn_state: RefCell::new(BatchNormState::new(
                width,
                BATCH_NORM_MOMENTUM,
                BATCH_NORM_EPS,
            )),
        }
    }

    fn forward(
        &self,
        x: &Tensor<E>,
        dropout_p: f64,
        train: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Tensor<E>, ModelError> {
        let h = relu(&self.lin.apply(x)?);
        let h = dropout(&h, dropout_p, train, rng)?;
        let res = add(&h, x)?;
        let mut state = self.bn_state.borrow_mut();
        Ok(batch_norm1d(&res, &self.bn_gamma, &self.bn_beta, &mut state, train)?)
    }
}

#[derive(Debug)]
pub struct ForwardOutput<E: Scalar> {
    /// `(B, |locations|)` raw logits at each sample's last real step.
    pub loc_logits: Tensor<E>,
    /// `(B, |modes|)` raw logits.
    pub mode_logits: Tensor<E>,
}

/// The full next-location/next-mode model.
pub struct Model<E: Scalar> {
    pub config: ModelConfig,
    pub tables: EmbeddingTables<E>,
    blocks: Vec<DecoderBlock<E>>,
    fusion: FusionBlock<E>,
    loc_head: LinearLayer<E>,
    mode_head: LinearLayer<E>,
    next_mode_proj: Option<LinearLayer<E>>,
}

impl<E: Scalar> Model<E> {
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tables = EmbeddingTables::new(
            config.num_locations,
            config.num_modes,
            config.num_users,
            config.d_model,
            config.d_user,
            config.embed_flags(),
            &mut rng,
        );
        let blocks = (0..config.num_layers)
            .map(|_| DecoderBlock::new(&mut rng, config.d_model, config.feedforward))
            .collect();
        let df = config.fused_width();
        let fusion = FusionBlock::new(&mut rng, df);
        let loc_head = LinearLayer::new(&mut rng, df, config.num_locations);
        let mode_head = LinearLayer::new(&mut rng, df, config.num_modes);
        let next_mode_proj = config
            .conditioned_on_next_mode
            .then(|| LinearLayer::new(&mut rng, config.d_model, config.d_model));
        Ok(Model {
            config: config.clone(),
            tables,
            blocks,
            fusion,
            loc_head,
            mode_head,
            next_mode_proj,
        })
    }

    fn check_batch(&self, batch: &Batch) -> Result<(), ModelError> {
        if batch.size == 0 {
            return Err(ModelError::EmptyBatch);
        }
        if let Some(&t) = batch
            .target_locations
            .iter()
            .find(|&&t| t as usize >= self.config.num_locations)
        {
            return Err(ModelError::VocabularyMismatch {
                msg: format!(
                    "target location {t} outside vocabulary of {}",
                    self.config.num_locations
                ),
            });
        }
        Ok(())
    }

    /// Decoder stack output `(B, m, d_model)` before gathering.
    pub fn block_stack(
        &self,
        batch: &Batch,
        train: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Tensor<E>, ModelError> {
        self.check_batch(batch)?;
        let (emb, _) = self.tables.embed_batch(batch)?;
        self.run_blocks(emb, batch, train, rng)
    }

    fn run_blocks(
        &self,
        emb: Tensor<E>,
        batch: &Batch,
        train: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Tensor<E>, ModelError> {
        let mask = attention_mask::<E>(&batch.lengths, batch.max_len);
        let mut x = emb;
        for block in &self.blocks {
            x = block.forward(
                &x,
                &mask,
                self.config.num_heads,
                self.config.sublayer_dropout,
                train,
                rng,
            )?;
        }
        Ok(x)
    }

    fn heads(
        &self,
        gathered: Tensor<E>,
        user_emb: Tensor<E>,
        train: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<ForwardOutput<E>, ModelError> {
        let fused_in = concat_last(&[&gathered, &user_emb])?;
        let fused = self.fusion.forward(&fused_in, self.config.fc_dropout, train, rng)?;
        Ok(ForwardOutput {
            loc_logits: self.loc_head.apply(&fused)?,
            mode_logits: self.mode_head.apply(&fused)?,
        })
    }

    /// Forward pass: raw location and mode logits at each sample's last real
    /// step. Softmax lives inside the loss and the rankings, not here.
    pub fn forward(
        &self,
        batch: &Batch,
        train: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<ForwardOutput<E>, ModelError> {
        self.check_batch(batch)?;
        let (emb, user_emb) = self.tables.embed_batch(batch)?;
        let x = self.run_blocks(emb, batch, train, rng)?;
        let last: Vec<usize> = batch.lengths.iter().map(|&l| l - 1).collect();
        let gathered = gather_rows(&x, &last)?;
        self.heads(gathered, user_emb, train, rng)
    }

    /// Forward pass conditioned on the true next travel mode: the decoder
    /// output is augmented with a learned projection of the next-mode
    /// embedding before fusion.
    pub fn forward_conditioned(
        &self,
        batch: &Batch,
        next_modes: &[u32],
        train: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<ForwardOutput<E>, ModelError> {
        self.check_batch(batch)?;
        let proj = self.next_mode_proj.as_ref().ok_or(ModelError::BadConfig {
            field: "conditioned_on_next_mode",
            msg: "model was built without the next-mode projection".into(),
        })?;
        let mode_table = self.tables.mode.as_ref().ok_or(ModelError::BadConfig {
            field: "use_mode_feature",
            msg: "conditioning requires the mode embedding table".into(),
        })?;
        if next_modes.len() != batch.size {
            return Err(ModelError::MissingNextModes);
        }
        let (emb, user_emb) = self.tables.embed_batch(batch)?;
        let x = self.run_blocks(emb, batch, train, rng)?;
        let last: Vec<usize> = batch.lengths.iter().map(|&l| l - 1).collect();
        let gathered = gather_rows(&x, &last)?;
        let next_emb = minitensor::embedding_lookup(mode_table, next_modes, &[batch.size])
            .map_err(|e| ModelError::OutOfVocabulary {
                feature: "next_mode",
                source: e,
            })?;
        let conditioned = add(&gathered, &proj.apply(&next_emb)?)?;
        self.heads(conditioned, user_emb, train, rng)
    }

    /// All trainable parameters, in a fixed order, with checkpoint names.
    pub fn named_parameters(&self) -> Vec<(String, Tensor<E>)> {
        let mut out = self.tables.named_tensors();
        for (i, block) in self.blocks.iter().enumerate() {
            block.named(&format!("block{i}"), &mut out);
        }
        out.push(("fusion.linear.weight".into(), self.fusion.lin.w.clone()));
        out.push(("fusion.linear.bias".into(), self.fusion.lin.b.clone()));
        out.push(("fusion.bn.gamma".into(), self.fusion.bn_gamma.clone()));
        out.push(("fusion.bn.beta".into(), self.fusion.bn_beta.clone()));
        out.push(("head.location.weight".into(), self.loc_head.w.clone()));
        out.push(("head.location.bias".into(), self.loc_head.b.clone()));
        out.push(("head.mode.weight".into(), self.mode_head.w.clone()));
        out.push(("head.mode.bias".into(), self.mode_head.b.clone()));
        if let Some(p) = &self.next_mode_proj {
            out.push(("cond.next_mode.weight".into(), p.w.clone()));
            out.push(("cond.next_mode.bias".into(), p.b.clone()));
        }
        out
    }

    /// Non-trainable buffers that still belong in a checkpoint: the fusion
    /// block's batch-norm running statistics.
    pub fn named_buffers(&self) -> Vec<(String, Vec<E>)> {
        let state = self.fusion.bn_state.borrow();
        vec![
            ("fusion.bn.running_mean".into(), state.running_mean.clone()),
            ("fusion.bn.running_var".into(), state.running_var.clone()),
        ]
    }

    pub fn set_buffer(&self, name: &str, values: Vec<E>) -> Result<(), ModelError> {
        let mut state = self.fusion.bn_state.borrow_mut();
        let slot = match name {
            "fusion.bn.running_mean" => &mut state.running_mean,
            "fusion.bn.running_var" => &mut state.running_var,
            other => {
                return Err(ModelError::BadConfig {
                    field: "buffer",
                    msg: format!("unknown buffer {other:?}"),
                })
            }
        };
        if slot.len() != values.len() {
            return Err(ModelError::BadConfig {
                field: "buffer",
                msg: format!("buffer {name} expects {} values", slot.len()),
            });
        }
        *slot = values;
        Ok(())
    }

    pub fn num_params(&self) -> usize {
        self.named_parameters().iter().map(|(_, t)| t.numel()).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            d_model: 8,
            d_user: 4,
            num_layers: 1,
            num_heads: 2,
            feedforward: 16,
            num_locations: 5,
            num_users: 3,
            ..ModelConfig::default()
        }
    }

    fn batch_of(samples: Vec<(u32, Vec<u32>)>) -> Batch {
        use crate::data::{EncodedSample, Split};
        let encoded: Vec<EncodedSample> = samples
            .into_iter()
            .map(|(user, locs)| {
                let m = locs.len();
                EncodedSample {
                    user,
                    locations: locs,
                    time_bins: (0..m).map(|k| (k * 7 % 96) as u8).collect(),
                    weekdays: (0..m).map(|k| (k % 7) as u8).collect(),
                    modes: (0..m).map(|k| (k % 7) as u8).collect(),
                    target_location: 1,
                    target_mode: 2,
                    target_time: "2023-01-09T08:00:00+00:00".into(),
                    split: Split::Train,
                }
            })
            .collect();
        Batch::from_samples(&encoded.iter().collect::<Vec<_>>())
    }

    #[test]
    fn config_validation_catches_contradictions() {
        let mut c = tiny_config();
        c.num_heads = 3;
        let err = c.validate().unwrap_err();
        assert!(err.to_string().contains("num_heads"), "{err}");
        let mut c = tiny_config();
        c.num_locations = 0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn single_step_attention_weight_is_one() {
        let q = Tensor::<f64>::constant(&[1, 1, 1, 1], vec![0.7]);
        let mask = attention_mask::<f64>(&[1], 1);
        let (ctx, weights) = scaled_dot_attention(&q, &q, &q, &mask).unwrap();
        assert_eq!(weights.to_vec(), vec![1.0]);
        assert_eq!(ctx.to_vec(), vec![0.7]);
    }

    #[test]
    fn two_step_toy_attention_matches_hand_computation() {
        // d_model 1, single head, identity projections, X = [[1], [2]]:
        // row 1 scores are [q1*k0, q1*k1] = [2, 4], softmax gives
        // [0.1192, 0.8808], context 0.1192*1 + 0.8808*2 = 1.8808
        let x = Tensor::<f64>::constant(&[1, 1, 2, 1], vec![1.0, 2.0]);
        let mask = attention_mask::<f64>(&[2], 2);
        let (ctx, weights) = scaled_dot_attention(&x, &x, &x, &mask).unwrap();
        let w = weights.to_vec();
        // row 0 sees only itself
        assert!((w[0] - 1.0).abs() < 1e-12);
        assert_eq!(w[1], 0.0);
        let denom = (2.0f64).exp() + (4.0f64).exp();
        assert!((w[2] - (2.0f64).exp() / denom).abs() < 1e-12);
        assert!((w[3] - (4.0f64).exp() / denom).abs() < 1e-12);
        let expected = w[2] + 2.0 * w[3];
        assert!((ctx.to_vec()[1] - expected).abs() < 1e-12);
        assert!((ctx.to_vec()[1] - 1.880797).abs() < 1e-6);
        // first row of any length behaves like the single-step case
        assert!((ctx.to_vec()[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn identical_samples_give_identical_logit_rows() {
        let model = Model::<f64>::new(&tiny_config(), 42).unwrap();
        let batch = batch_of(vec![(0, vec![1, 2, 3]), (0, vec![1, 2, 3])]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = model.forward(&batch, false, &mut rng).unwrap();
        let v = out.loc_logits.to_vec();
        assert_eq!(v[0..5], v[5..10]);
    }

    #[test]
    fn padded_steps_do_not_influence_logits() {
        let model = Model::<f64>::new(&tiny_config(), 42).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        // batch with lengths [3, 1]: sample 1 has two padded steps
        let mut batch = batch_of(vec![(0, vec![1, 2, 3]), (1, vec![4])]);
        let before = model.forward(&batch, false, &mut rng).unwrap();
        // perturb the padded steps' features
        batch.locations[4] = 3;
        batch.time_bins[4] = 90;
        batch.modes[5] = 6;
        let after = model.forward(&batch, false, &mut rng).unwrap();
        assert_eq!(before.loc_logits.to_vec(), after.loc_logits.to_vec());
        assert_eq!(before.mode_logits.to_vec(), after.mode_logits.to_vec());
    }

    #[test]
    fn permuting_the_batch_permutes_outputs() {
        let model = Model::<f64>::new(&tiny_config(), 11).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let fwd = model
            .forward(&batch_of(vec![(0, vec![1, 2]), (1, vec![3, 4, 0]), (2, vec![2])]), false, &mut rng)
            .unwrap();
        let rev = model
            .forward(&batch_of(vec![(2, vec![2]), (1, vec![3, 4, 0]), (0, vec![1, 2])]), false, &mut rng)
            .unwrap();
        let (a, b) = (fwd.loc_logits.to_vec(), rev.loc_logits.to_vec());
        assert_eq!(a[0..5], b[10..15]);
        assert_eq!(a[5..10], b[5..10]);
        assert_eq!(a[10..15], b[0..5]);
    }

    #[test]
    fn causality_no_future_step_affects_an_earlier_output() {
        let model = Model::<f64>::new(&tiny_config(), 9).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let base = batch_of(vec![(0, vec![1, 2, 3, 4])]);
        let x = model.block_stack(&base, false, &mut rng).unwrap();
        let mut changed = batch_of(vec![(0, vec![1, 2, 0, 0])]);
        changed.time_bins[2] = 50;
        changed.modes[3] = 6;
        let y = model.block_stack(&changed, false, &mut rng).unwrap();
        let (xv, yv) = (x.to_vec(), y.to_vec());
        // rows 0 and 1 identical, later rows differ
        assert_eq!(xv[0..16], yv[0..16]);
        assert!(xv[16..32].iter().zip(&yv[16..32]).any(|(a, b)| a != b));
    }

    #[test]
    fn parameter_count_matches_the_closed_form() {
        for conditioned in [false, true] {
            for flags in [(true, true, true), (true, false, true), (false, true, false)] {
                let mut cfg = tiny_config();
                cfg.use_location_feature = flags.0;
                cfg.use_temporal_features = flags.1;
                cfg.use_mode_feature = flags.2;
                cfg.conditioned_on_next_mode = conditioned;
                let model = Model::<f32>::new(&cfg, 1).unwrap();
                assert_eq!(model.num_params(), cfg.param_count(), "{cfg:?}");
            }
        }
    }

    #[test]
    fn conditioned_forward_with_zero_projection_equals_unconditioned() {
        let mut cfg = tiny_config();
        cfg.conditioned_on_next_mode = true;
        let model = Model::<f64>::new(&cfg, 5).unwrap();
        let proj = model.next_mode_proj.as_ref().unwrap();
        proj.w.update_value(|v| v.fill(0.0));
        proj.b.update_value(|v| v.fill(0.0));
        let batch = batch_of(vec![(0, vec![1, 2]), (1, vec![3])]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let plain = model.forward(&batch, false, &mut rng).unwrap();
        let cond = model
            .forward_conditioned(&batch, &[2, 5], false, &mut rng)
            .unwrap();
        assert_eq!(plain.loc_logits.to_vec(), cond.loc_logits.to_vec());
    }

    #[test]
    fn conditioned_forward_reacts_to_the_supplied_mode() {
        let mut cfg = tiny_config();
        cfg.conditioned_on_next_mode = true;
        let model = Model::<f64>::new(&cfg, 5).unwrap();
        let batch = batch_of(vec![(0, vec![1, 2])]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = model
            .forward_conditioned(&batch, &[0], false, &mut rng)
            .unwrap();
        let b = model
            .forward_conditioned(&batch, &[6], false, &mut rng)
            .unwrap();
        assert_ne!(a.loc_logits.to_vec(), b.loc_logits.to_vec());
        // missing next-mode column
        assert!(model
            .forward_conditioned(&batch, &[], false, &mut rng)
            .is_err());
        // unconditioned model rejects the conditioned path
        let plain = Model::<f64>::new(&tiny_config(), 5).unwrap();
        assert!(plain
            .forward_conditioned(&batch, &[0], false, &mut rng)
            .is_err());
    }

    #[test]
    fn vocabulary_mismatch_is_rejected() {
        let model = Model::<f64>::new(&tiny_config(), 1).unwrap();
        let mut batch = batch_of(vec![(0, vec![1, 2])]);
        batch.target_locations[0] = 99;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let err = model.forward(&batch, false, &mut rng).unwrap_err();
        assert!(matches!(err, ModelError::VocabularyMismatch { .. }));
    }
}
