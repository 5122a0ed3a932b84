//! The full predictor: per-frame spatial encoder, fast-weight translator
//! stack, attention skip branch, mirrored decoder with a dense
//! super-resolution refinement stream, and channel-wise stream fusion.
//!
//! Encoder and decoder apply identical weights to every frame (frames are
//! folded into the batch axis), so all temporal mixing happens in the
//! translator and the skip branch. The decoder fuses three streams — its own
//! upsampled features, the skip branch, and the super-resolution residual —
//! with a per-channel softmax over stream logits, then projects to one
//! channel and clamps to the normalized range.

use crate::attention::{skip_branch, MotionAttention, TemporalAttention};
use crate::conv::{conv2d, conv_transpose2d};
use crate::error::{Error, Result};
use crate::param::{ParamSet, Parameter};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::{Tape, Tensor};
use crate::ttt::{TttBlock, TttConfig};

/// Dense layers inside each residual dense block.
const RDB_DENSE_LAYERS: usize = 3;

/// Whether the fast-weight inner loop runs during a forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TttMode {
    On,
    Off,
}

impl TttMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "ttt_on" | "on" => Ok(Self::On),
            "ttt_off" | "off" => Ok(Self::Off),
            other => Err(Error::Config(format!("unknown mode '{other}' (ttt_on|ttt_off)"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::On => "ttt_on",
            Self::Off => "ttt_off",
        }
    }
}

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    /// Input length; the predicted length equals it.
    pub t: usize,
    pub height: usize,
    pub width: usize,
    /// Feature channels everywhere (encoder, translator token width, decoder).
    pub base_channels: usize,
    /// Number of stride-2 encoder stages (decoder mirrors them).
    pub encoder_stages: usize,
    pub translator_blocks: usize,
    /// Feedforward hidden width on the merged time-channel axis.
    pub ff_hidden: usize,
    /// Squeeze-excitation reduction ratio for temporal attention.
    pub se_reduction: usize,
    pub rrdb_blocks: usize,
    pub rrdb_growth: usize,
    /// Residual scale applied to each dense block's output.
    pub rrdb_beta: f64,
    pub skip_enabled: bool,
    pub sr_enabled: bool,
    pub ttt: TttConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            t: 8,
            height: 32,
            width: 32,
            base_channels: 8,
            encoder_stages: 2,
            translator_blocks: 2,
            ff_hidden: 128,
            se_reduction: 4,
            rrdb_blocks: 2,
            rrdb_growth: 8,
            rrdb_beta: 0.2,
            skip_enabled: true,
            sr_enabled: true,
            ttt: TttConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.t == 0 || self.height == 0 || self.width == 0 || self.base_channels == 0 {
            return Err(Error::Config("model dimensions must be >= 1".into()));
        }
        let down = 1usize << self.encoder_stages;
        if self.height % down != 0 || self.width % down != 0 {
            return Err(Error::Config(format!(
                "spatial extent {}x{} not divisible by 2^{} downsampling",
                self.height, self.width, self.encoder_stages
            )));
        }
        let merged = self.t * self.base_channels;
        if self.se_reduction == 0 || merged % self.se_reduction != 0 {
            return Err(Error::Config(format!(
                "se_reduction {} must divide merged width {merged}",
                self.se_reduction
            )));
        }
        if self.ff_hidden == 0 {
            return Err(Error::Config("ff_hidden must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.rrdb_beta) {
            return Err(Error::Config("rrdb_beta must lie in [0, 1]".into()));
        }
        if self.ttt.eta_inner <= 0.0 {
            return Err(Error::Config("eta_inner must be positive".into()));
        }
        Ok(())
    }

    /// Encoded spatial extent after the stride-2 stages.
    pub fn encoded_hw(&self) -> (usize, usize) {
        let down = 1usize << self.encoder_stages;
        (self.height / down, self.width / down)
    }
}

struct ConvLayer<T: Scalar> {
    w: Parameter<T>,
    b: Parameter<T>,
}

impl<T: Scalar> ConvLayer<T> {
    fn init(set: &mut ParamSet<T>, name: &str, cin: usize, cout: usize, rng: &mut Rng) -> Self {
        let scale = (2.0 / ((cin + cout) * 9) as f64).sqrt();
        Self {
            w: set.register(Parameter::uniform(&format!("{name}.w"), &[cout, cin, 3, 3], scale, rng)),
            b: set.register(Parameter::zeros(&format!("{name}.b"), &[cout])),
        }
    }

    fn zeroed(set: &mut ParamSet<T>, name: &str, cin: usize, cout: usize) -> Self {
        Self {
            w: set.register(Parameter::zeros(&format!("{name}.w"), &[cout, cin, 3, 3])),
            b: set.register(Parameter::zeros(&format!("{name}.b"), &[cout])),
        }
    }

    fn forward(&self, x: &Tensor<T>, stride: usize, tape: Option<&Tape<T>>) -> Result<Tensor<T>> {
        let y = conv2d(x, &self.w.tensor(tape), stride, 1)?;
        let s = y.shape().to_vec();
        y.reshape(&[s[0], s[1], s[2] * s[3]])?
            .add_channel(&self.b.tensor(tape))?
            .reshape(&s)
    }

    fn forward_transposed(
        &self,
        x: &Tensor<T>,
        stride: usize,
        out_h: usize,
        out_w: usize,
        tape: Option<&Tape<T>>,
    ) -> Result<Tensor<T>> {
        let y = conv_transpose2d(x, &self.w.tensor(tape), stride, 1, out_h, out_w)?;
        let s = y.shape().to_vec();
        y.reshape(&[s[0], s[1], s[2] * s[3]])?
            .add_channel(&self.b.tensor(tape))?
            .reshape(&s)
    }
}

/// Residual dense block: densely connected 3x3 convolutions whose fused
/// output is scaled by beta and added back to the input.
struct DenseBlock<T: Scalar> {
    dense: Vec<ConvLayer<T>>,
    fuse: ConvLayer<T>,
    beta: f64,
}

impl<T: Scalar> DenseBlock<T> {
    fn init(set: &mut ParamSet<T>, name: &str, c: usize, growth: usize, beta: f64, rng: &mut Rng) -> Self {
        let dense = (0..RDB_DENSE_LAYERS)
            .map(|i| ConvLayer::init(set, &format!("{name}.dense{i}"), c + i * growth, growth, rng))
            .collect();
        let fuse = ConvLayer::init(set, &format!("{name}.fuse"), c + RDB_DENSE_LAYERS * growth, c, rng);
        Self { dense, fuse, beta }
    }

    fn forward(&self, x: &Tensor<T>, tape: Option<&Tape<T>>) -> Result<Tensor<T>> {
        let s = x.shape().to_vec();
        let (n, _c, h, w) = (s[0], s[1], s[2], s[3]);
        let as3 = |t: &Tensor<T>| -> Result<Tensor<T>> {
            let ts = t.shape().to_vec();
            t.reshape(&[ts[0], ts[1], ts[2] * ts[3]])
        };
        let mut feats3: Vec<Tensor<T>> = vec![as3(x)?];
        for layer in &self.dense {
            let refs: Vec<&Tensor<T>> = feats3.iter().collect();
            let cat = crate::ops::concat_channel(&refs)?;
            let cin = cat.shape()[1];
            let y = layer
                .forward(&cat.reshape(&[n, cin, h, w])?, 1, tape)?
                .relu();
            feats3.push(as3(&y)?);
        }
        let refs: Vec<&Tensor<T>> = feats3.iter().collect();
        let cat = crate::ops::concat_channel(&refs)?;
        let cin = cat.shape()[1];
        let fused = self.fuse.forward(&cat.reshape(&[n, cin, h, w])?, 1, tape)?;
        x.add(&fused.scale(T::of(self.beta)))
    }
}

/// The assembled network. Parameter names are prefixed by subsystem
/// (`enc.`, `trans.`, `dec.`, `sr.`, `head.` form the backbone; `skip.`,
/// `fusion.`, and the per-block `.w0` tensors are the adaptation side).
pub struct Model<T: Scalar> {
    pub cfg: ModelConfig,
    params: ParamSet<T>,
    stem: ConvLayer<T>,
    enc_down: Vec<ConvLayer<T>>,
    blocks: Vec<TttBlock<T>>,
    dec_up: Vec<ConvLayer<T>>,
    rdbs: Vec<DenseBlock<T>>,
    sr_final: ConvLayer<T>,
    skip_me: MotionAttention<T>,
    skip_ta: TemporalAttention<T>,
    fusion_logits: Parameter<T>,
    head: ConvLayer<T>,
}

impl<T: Scalar> Model<T> {
    pub fn init(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = Rng::derive(seed, "model-init", 0);
        let mut set = ParamSet::new();
        let c = cfg.base_channels;

        let stem = ConvLayer::init(&mut set, "enc.stem", 1, c, &mut rng);
        let enc_down = (0..cfg.encoder_stages)
            .map(|i| ConvLayer::init(&mut set, &format!("enc.down{i}"), c, c, &mut rng))
            .collect();

        let mut blocks = Vec::with_capacity(cfg.translator_blocks);
        for i in 0..cfg.translator_blocks {
            let blk = TttBlock::init(
                &format!("trans.{i}"),
                c,
                cfg.t,
                cfg.se_reduction,
                cfg.ff_hidden,
                cfg.ttt.clone(),
                &mut rng,
            )?;
            for p in blk.params() {
                set.register(p);
            }
            blocks.push(blk);
        }

        let dec_up = (0..cfg.encoder_stages)
            .map(|i| ConvLayer::init(&mut set, &format!("dec.up{i}"), c, c, &mut rng))
            .collect();

        let rdbs = (0..cfg.rrdb_blocks)
            .map(|i| DenseBlock::init(&mut set, &format!("sr.rdb{i}"), c, cfg.rrdb_growth, cfg.rrdb_beta, &mut rng))
            .collect();
        // zero start: the refinement stream contributes nothing until trained
        let sr_final = ConvLayer::zeroed(&mut set, "sr.final", c, c);

        let skip_ta = TemporalAttention::init("skip.ta", cfg.t, c, cfg.se_reduction, &mut rng)?;
        for p in skip_ta.params() {
            set.register(p);
        }
        let skip_me = MotionAttention::init("skip.me", c, &mut rng);
        for p in skip_me.params() {
            set.register(p);
        }
        let fusion_logits = set.register(Parameter::zeros("fusion.logits", &[3, c]));
        let head = ConvLayer::init(&mut set, "head", c, 1, &mut rng);
        // small positive head bias keeps early outputs inside the clamp
        head.b.set_values(&[T::of(0.05)]);

        Ok(Self {
            cfg,
            params: set,
            stem,
            enc_down,
            blocks,
            dec_up,
            rdbs,
            sr_final,
            skip_me,
            skip_ta,
            fusion_logits,
            head,
        })
    }

    pub fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    pub fn trainable_params(&self) -> Vec<Parameter<T>> {
        self.params.iter().filter(|p| p.is_trainable()).cloned().collect()
    }

    /// Snapshot of all parameter values in registration order.
    pub fn values(&self) -> Vec<Vec<T>> {
        self.params.iter().map(|p| p.values()).collect()
    }

    pub fn set_values(&self, values: &[Vec<T>]) {
        assert_eq!(values.len(), self.params.len());
        for (p, v) in self.params.iter().zip(values) {
            p.set_values(v);
        }
    }

    fn is_adaptation_name(name: &str) -> bool {
        name.starts_with("skip.") || name.starts_with("fusion.") || name.ends_with(".w0")
    }

    /// Freeze the pre-trained backbone; returns exactly the adaptation-side
    /// parameters (skip branch, fusion weights, fast-weight initializations)
    /// as the trainable subset.
    pub fn freeze_backbone(&self) -> Vec<Parameter<T>> {
        let mut adaptation = Vec::new();
        for p in self.params.iter() {
            let adapt = Self::is_adaptation_name(p.name());
            p.set_trainable(adapt);
            if adapt {
                adaptation.push(p.clone());
            }
        }
        adaptation
    }

    pub fn unfreeze_all(&self) {
        for p in self.params.iter() {
            p.set_trainable(true);
        }
    }

    /// Backbone / adaptation split without changing trainable flags.
    pub fn partition(&self) -> (Vec<Parameter<T>>, Vec<Parameter<T>>) {
        self.params.partition(|n| Self::is_adaptation_name(n))
    }

    /// Per-frame spatial encoding: returns the stride-1 stem features (the
    /// skip source) and the downsampled features for the translator.
    pub fn encode(&self, x: &Tensor<T>, tape: Option<&Tape<T>>) -> Result<(Tensor<T>, Tensor<T>)> {
        let s = x.shape().to_vec();
        if s.len() != 5 || s[1] != self.cfg.t || s[2] != 1 || s[3] != self.cfg.height || s[4] != self.cfg.width {
            return Err(Error::ShapeMismatch {
                op: "encode",
                detail: format!(
                    "expected [B,{},1,{},{}], got {s:?}",
                    self.cfg.t, self.cfg.height, self.cfg.width
                ),
            });
        }
        let (b, t) = (s[0], s[1]);
        let c = self.cfg.base_channels;
        let x4 = x.reshape(&[b * t, 1, self.cfg.height, self.cfg.width])?;
        let low4 = self.stem.forward(&x4, 1, tape)?.relu();
        let mut cur = low4.clone();
        for stage in &self.enc_down {
            cur = stage.forward(&cur, 2, tape)?.relu();
        }
        let (eh, ew) = self.cfg.encoded_hw();
        Ok((
            low4.reshape(&[b, t, c, self.cfg.height, self.cfg.width])?,
            cur.reshape(&[b, t, c, eh, ew])?,
        ))
    }

    /// Translator: cascaded residual fast-weight blocks on the encoded
    /// features; identity when no blocks are configured.
    pub fn translate(
        &self,
        h: &Tensor<T>,
        tape: Option<&Tape<T>>,
        steps_override: Option<usize>,
    ) -> Result<Tensor<T>> {
        let mut cur = h.clone();
        for blk in &self.blocks {
            cur = blk.forward(&cur, tape, steps_override)?;
        }
        Ok(cur)
    }

    /// Softmax-normalized per-channel stream weights; disabled streams are
    /// masked out of the softmax and receive exactly zero weight.
    fn fusion_weights(&self, tape: Option<&Tape<T>>) -> Result<Tensor<T>> {
        let c = self.cfg.base_channels;
        let mut mask = vec![T::zero(); 3 * c];
        if !self.cfg.skip_enabled {
            for v in &mut mask[c..2 * c] {
                *v = T::of(-1e30);
            }
        }
        if !self.cfg.sr_enabled {
            for v in &mut mask[2 * c..3 * c] {
                *v = T::of(-1e30);
            }
        }
        let mask = Tensor::from_parts(vec![3, c], std::rc::Rc::new(mask));
        self.fusion_logits.tensor(tape).add(&mask)?.softmax_axis0()
    }

    /// Decoder: mirrored upsampling, super-resolution refinement, and
    /// channel-wise weighted fusion of {decoder, skip, refinement} streams,
    /// projected to one channel and clamped to the normalized range.
    pub fn decode(
        &self,
        z: &Tensor<T>,
        skip: Option<&Tensor<T>>,
        tape: Option<&Tape<T>>,
    ) -> Result<Tensor<T>> {
        let s = z.shape().to_vec();
        let (b, t, c) = (s[0], s[1], s[2]);
        let (mut cur_h, mut cur_w) = (s[3], s[4]);
        let mut cur = z.reshape(&[b * t, c, cur_h, cur_w])?;
        for up in &self.dec_up {
            cur_h *= 2;
            cur_w *= 2;
            cur = up.forward_transposed(&cur, 2, cur_h, cur_w, tape)?.relu();
        }
        let pixels = cur_h * cur_w;
        let weights = self.fusion_weights(tape)?;
        let wt_for = |row: usize| -> Result<Tensor<T>> {
            weights.slice_rows(row, row + 1)?.reshape(&[c])
        };

        let dec3 = cur.reshape(&[b * t, c, pixels])?;
        let mut fused = dec3.mul_channel(&wt_for(0)?)?;
        if self.cfg.skip_enabled {
            let skip5 = skip.ok_or_else(|| Error::ShapeMismatch {
                op: "decode",
                detail: "skip stream enabled but not provided".into(),
            })?;
            if skip5.shape() != [b, t, c, cur_h, cur_w] {
                return Err(Error::ShapeMismatch {
                    op: "decode",
                    detail: format!("skip stream {:?} vs [{b},{t},{c},{cur_h},{cur_w}]", skip5.shape()),
                });
            }
            let skip3 = skip5.reshape(&[b * t, c, pixels])?;
            fused = fused.add(&skip3.mul_channel(&wt_for(1)?)?)?;
        }
        if self.cfg.sr_enabled {
            let mut sr = cur.clone();
            for rdb in &self.rdbs {
                sr = rdb.forward(&sr, tape)?;
            }
            let sr = self.sr_final.forward(&sr, 1, tape)?;
            let sr3 = sr.reshape(&[b * t, c, pixels])?;
            fused = fused.add(&sr3.mul_channel(&wt_for(2)?)?)?;
        }
        let fused4 = fused.reshape(&[b * t, c, cur_h, cur_w])?;
        let out = self.head.forward(&fused4, 1, tape)?.clamp(T::zero(), T::one());
        out.reshape(&[b, t, 1, cur_h, cur_w])
    }

    /// Full forward pass on normalized input. `TttMode::Off` disables the
    /// inner loop (zero steps per token); nothing else differs between the
    /// modes, and model parameters are never mutated.
    pub fn forward(&self, x: &Tensor<T>, mode: TttMode, tape: Option<&Tape<T>>) -> Result<Tensor<T>> {
        let (low, h) = self.encode(x, tape)?;
        let steps_override = match mode {
            TttMode::On => None,
            TttMode::Off => Some(0),
        };
        let z = self.translate(&h, tape, steps_override)?;
        let skip = if self.cfg.skip_enabled {
            Some(skip_branch(&low, &self.skip_me, &self.skip_ta, tape)?)
        } else {
            None
        };
        self.decode(&z, skip.as_ref(), tape)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::check_gradients_sampled;
    use crate::ttt::InnerGradMode;

    fn tiny_cfg() -> ModelConfig {
        ModelConfig {
            t: 2,
            height: 8,
            width: 8,
            base_channels: 2,
            encoder_stages: 2,
            translator_blocks: 1,
            ff_hidden: 8,
            se_reduction: 1,
            rrdb_blocks: 1,
            rrdb_growth: 2,
            rrdb_beta: 0.2,
            skip_enabled: true,
            sr_enabled: true,
            ttt: TttConfig { eta_inner: 0.05, ..TttConfig::default() },
        }
    }

    fn rand_input(cfg: &ModelConfig, b: usize, seed: u64) -> Tensor<f64> {
        let mut rng = Rng::new(seed);
        let n = b * cfg.t * cfg.height * cfg.width;
        let data = (0..n).map(|_| rng.range(0.0, 1.0)).collect();
        Tensor::from_vec(&[b, cfg.t, 1, cfg.height, cfg.width], data).unwrap()
    }

    #[test]
    fn config_validation() {
        let mut cfg = tiny_cfg();
        cfg.height = 10; // not divisible by 4
        assert!(cfg.validate().is_err());
        let mut cfg = tiny_cfg();
        cfg.se_reduction = 3; // does not divide 4
        assert!(cfg.validate().is_err());
        assert!(tiny_cfg().validate().is_ok());
    }

    #[test]
    fn encode_is_frame_permutation_equivariant() {
        let cfg = tiny_cfg();
        let model = Model::init(cfg.clone(), 1).unwrap();
        let x = rand_input(&cfg, 1, 2);
        // swap the two frames
        let pixels = cfg.height * cfg.width;
        let mut swapped = x.data()[pixels..].to_vec();
        swapped.extend_from_slice(&x.data()[..pixels]);
        let xs = Tensor::from_vec(x.shape(), swapped).unwrap();
        let (_, h) = model.encode(&x, None).unwrap();
        let (_, hs) = model.encode(&xs, None).unwrap();
        let frame = h.len() / 2;
        assert_eq!(&h.data()[..frame], &hs.data()[frame..]);
        assert_eq!(&h.data()[frame..], &hs.data()[..frame]);
    }

    #[test]
    fn encode_zero_input_propagates_biases_identically_per_frame() {
        let cfg = tiny_cfg();
        let model = Model::init(cfg.clone(), 3).unwrap();
        // give the convs nonzero biases so the propagation is visible
        model.stem.b.set_values(&[0.3, -0.2]);
        for (i, stage) in model.enc_down.iter().enumerate() {
            stage.b.set_values(&[0.1 * (i as f64 + 1.0), -0.05]);
        }
        let x = Tensor::zeros(&[1, cfg.t, 1, cfg.height, cfg.width]);
        let (low, h) = model.encode(&x, None).unwrap();
        // frames identical
        let lf = low.len() / cfg.t;
        assert_eq!(&low.data()[..lf], &low.data()[lf..]);
        let hf = h.len() / cfg.t;
        assert_eq!(&h.data()[..hf], &h.data()[hf..]);
        // hand-compose the bias propagation for the stem at an interior pixel:
        // conv(0) + b, relu
        let expect0 = 0.3f64.max(0.0);
        let expect1 = (-0.2f64).max(0.0);
        let pix = cfg.height * cfg.width;
        assert!((low.data()[0] - expect0).abs() < 1e-15);
        assert!((low.data()[pix] - expect1).abs() < 1e-15);
    }

    #[test]
    fn forward_shape_contract_over_random_configs() {
        let mut rng = Rng::new(5);
        for trial in 0..4 {
            let stages = rng.range_usize(1, 2);
            let cfg = ModelConfig {
                t: rng.range_usize(1, 3),
                height: 8,
                width: 8,
                base_channels: rng.range_usize(1, 3),
                encoder_stages: stages,
                translator_blocks: rng.range_usize(0, 2),
                ff_hidden: 4,
                se_reduction: 1,
                rrdb_blocks: rng.range_usize(0, 2),
                rrdb_growth: 2,
                rrdb_beta: 0.2,
                skip_enabled: trial % 2 == 0,
                sr_enabled: trial < 2,
                ttt: TttConfig { eta_inner: 0.05, ..TttConfig::default() },
            };
            let model = Model::init(cfg.clone(), 10 + trial as u64).unwrap();
            let b = rng.range_usize(1, 2);
            let x = rand_input(&cfg, b, 20 + trial as u64);
            let y = model.forward(&x, TttMode::On, None).unwrap();
            assert_eq!(y.shape(), &[b, cfg.t, 1, cfg.height, cfg.width]);
        }
    }

    #[test]
    fn translate_with_zero_blocks_is_identity() {
        let cfg = ModelConfig { translator_blocks: 0, ..tiny_cfg() };
        let model = Model::init(cfg.clone(), 7).unwrap();
        let x = rand_input(&cfg, 1, 8);
        let (_, h) = model.encode(&x, None).unwrap();
        let z = model.translate(&h, None, None).unwrap();
        assert_eq!(z.data(), h.data());
    }

    #[test]
    fn modes_are_bit_identical_when_steps_is_zero() {
        let mut cfg = tiny_cfg();
        cfg.ttt.steps_per_token = 0;
        let model = Model::init(cfg.clone(), 9).unwrap();
        let x = rand_input(&cfg, 1, 10);
        let on = model.forward(&x, TttMode::On, None).unwrap();
        let off = model.forward(&x, TttMode::Off, None).unwrap();
        assert_eq!(on.data(), off.data());
    }

    #[test]
    fn forward_is_deterministic() {
        let cfg = tiny_cfg();
        let model = Model::init(cfg.clone(), 11).unwrap();
        let x = rand_input(&cfg, 1, 12);
        let a = model.forward(&x, TttMode::Off, None).unwrap();
        let b = model.forward(&x, TttMode::Off, None).unwrap();
        assert_eq!(a.data(), b.data());
        let c = model.forward(&x, TttMode::On, None).unwrap();
        let d = model.forward(&x, TttMode::On, None).unwrap();
        assert_eq!(c.data(), d.data());
    }

    #[test]
    fn ttt_on_does_not_mutate_parameters() {
        let cfg = tiny_cfg();
        let model = Model::init(cfg.clone(), 13).unwrap();
        let before = model.values();
        let x = rand_input(&cfg, 2, 14);
        model.forward(&x, TttMode::On, None).unwrap();
        let after = model.values();
        for (a, b) in before.iter().zip(&after) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn fusion_concentrated_on_decoder_matches_plain_decoder() {
        let cfg = tiny_cfg();
        let model = Model::init(cfg.clone(), 15).unwrap();
        // push all fusion mass onto the decoder stream
        let c = cfg.base_channels;
        let mut logits = vec![0.0f64; 3 * c];
        for v in logits.iter_mut().take(c) {
            *v = 200.0;
        }
        model.fusion_logits.set_values(&logits);
        let x = rand_input(&cfg, 1, 16);
        let full = model.forward(&x, TttMode::Off, None).unwrap();

        // plain decoder: upsample + head only
        let (_, h) = model.encode(&x, None).unwrap();
        let z = model.translate(&h, None, Some(0)).unwrap();
        let s = z.shape().to_vec();
        let (b, t, ch) = (s[0], s[1], s[2]);
        let (mut hh, mut ww) = (s[3], s[4]);
        let mut cur = z.reshape(&[b * t, ch, hh, ww]).unwrap();
        for up in &model.dec_up {
            hh *= 2;
            ww *= 2;
            cur = up.forward_transposed(&cur, 2, hh, ww, None).unwrap().relu();
        }
        let plain = model
            .head
            .forward(&cur, 1, None)
            .unwrap()
            .clamp(0.0, 1.0);
        for (a, b) in full.data().iter().zip(plain.data()) {
            assert!((a - b).abs() < 1e-10, "{a} vs {b}");
        }
    }

    #[test]
    fn sr_stream_with_zero_final_layer_contributes_nothing() {
        let cfg = tiny_cfg();
        let with_sr = Model::init(cfg.clone(), 17).unwrap();
        let without = Model::init(ModelConfig { sr_enabled: false, ..cfg.clone() }, 17).unwrap();
        // sr.final is zero-initialized, so the sr stream is exactly zero;
        // masking it out of the softmax changes the other stream weights, so
        // compare the raw stream sum instead: force fusion fully onto dec.
        let c = cfg.base_channels;
        let mut logits = vec![0.0f64; 3 * c];
        for v in logits.iter_mut().take(c) {
            *v = 200.0;
        }
        with_sr.fusion_logits.set_values(&logits);
        without.fusion_logits.set_values(&logits);
        let x = rand_input(&cfg, 1, 18);
        let a = with_sr.forward(&x, TttMode::Off, None).unwrap();
        let b = without.forward(&x, TttMode::Off, None).unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() < 1e-10);
        }
    }

    #[test]
    fn freeze_backbone_partitions_exactly() {
        let cfg = tiny_cfg();
        let model = Model::<f64>::init(cfg, 19).unwrap();
        let adaptation = model.freeze_backbone();
        let total = model.params().len();
        let frozen = model.params().iter().filter(|p| !p.is_trainable()).count();
        assert_eq!(frozen + adaptation.len(), total);
        for p in &adaptation {
            assert!(
                p.name().starts_with("skip.") || p.name().starts_with("fusion.") || p.name().ends_with(".w0"),
                "unexpected adaptation parameter {}",
                p.name()
            );
            assert!(p.is_trainable());
        }
        // w0 of every translator block is on the adaptation side
        assert!(adaptation.iter().any(|p| p.name().ends_with(".w0")));
        // the partition helper agrees
        let (adapt2, backbone) = model.partition();
        assert_eq!(adapt2.len(), adaptation.len());
        assert_eq!(backbone.len() + adapt2.len(), total);
        model.unfreeze_all();
        assert_eq!(model.trainable_params().len(), total);
    }

    #[test]
    fn full_model_gradients_at_tiny_dims() {
        let mut cfg = tiny_cfg();
        cfg.ttt.grad_mode = InnerGradMode::Unrolled;
        let model = Model::init(cfg.clone(), 21).unwrap();
        let x = rand_input(&cfg, 1, 22);
        let y = rand_input(&cfg, 1, 23);
        let params = model.trainable_params();
        let mut rng = Rng::new(24);
        check_gradients_sampled(
            &params,
            |tape| {
                let pred = model.forward(&x, TttMode::On, Some(tape)).unwrap();
                crate::losses::weighted_mae(&pred, &y, &crate::losses::LossConfig::default()).unwrap()
            },
            1e-5,
            1e-4,
            4,
            &mut rng,
        )
        .unwrap();
    }
}

#[cfg(test)]
mod probe {
    use super::*;
    use crate::gradcheck::check_gradients;

    fn probe_cfg(skip: bool, sr: bool, blocks: usize) -> ModelConfig {
        ModelConfig {
            t: 2, height: 8, width: 8, base_channels: 2, encoder_stages: 2,
            translator_blocks: blocks, ff_hidden: 8, se_reduction: 1,
            rrdb_blocks: 1, rrdb_growth: 2, rrdb_beta: 0.2,
            skip_enabled: skip, sr_enabled: sr,
            ttt: TttConfig { eta_inner: 0.05, ..TttConfig::default() },
        }
    }

    fn run(skip: bool, sr: bool, blocks: usize) -> std::result::Result<(), String> {
        let cfg = probe_cfg(skip, sr, blocks);
        let model = Model::<f64>::init(cfg.clone(), 21).unwrap();
        let mut rng = Rng::new(22);
        let n = cfg.t * cfg.height * cfg.width;
        let x = Tensor::from_vec(&[1, cfg.t, 1, cfg.height, cfg.width],
            (0..n).map(|_| rng.range(0.0, 1.0)).collect()).unwrap();
        let target = Tensor::from_vec(&[1, cfg.t, 1, cfg.height, cfg.width],
            (0..n).map(|_| rng.range(0.0, 1.0)).collect()).unwrap();
        let params: Vec<_> = model.params().iter()
            .filter(|p| p.name().starts_with("dec.")).cloned().collect();
        check_gradients(
            &params,
            |tape| {
                let pred = model.forward(&x, TttMode::On, Some(tape)).unwrap();
                crate::losses::weighted_mae(&pred, &target, &crate::losses::LossConfig::default()).unwrap()
            },
            1e-5, 1e-4,
        ).map_err(|e| format!("{e}"))
    }

    #[test]
    fn probe_variants() {
        for (skip, sr, blocks) in [(false,false,0),(true,false,0),(false,true,0),(true,true,0),(true,true,1)] {
            let r = run(skip, sr, blocks);
            eprintln!("skip={skip} sr={sr} blocks={blocks}: {:?}", r.err());
        }
        panic!("probe only");
    }
}
