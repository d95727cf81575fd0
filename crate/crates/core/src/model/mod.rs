//! Generator, Discriminator and Combiner networks and the three model variants:
//! frame-wise (`ANCLaF`), sequence (`ANCLaF-S-n`) and sequence with attention
//! (`ANCLaF-SA-n`).
//!
//! Every forward takes batched inputs: images are `[batch × pixels]`, latent
//! features `[batch × (latent+4)]`, predictions `[batch × 2]`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{attend_and_augment, combined_state, AttentionMode, AttentionParams, StateWindow};
use crate::metrics::AffectLabel;
use crate::nn::{
    init_params, lstm_step, Activation, AffineLayer, DecoderStack, EncoderStack, LstmCell, LstmState, NnError,
    ParamSpec, ParamStore,
};
use crate::scalar::Scalar;
use crate::synth::{distort, Distortion};
use crate::tensor::{Graph, NodeId, TensorError};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ModelError {
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("operation needs a {expected:?} model, this one is {actual:?}")]
    WrongVariant { expected: Variant, actual: Variant },
    #[error("sequence of {got} frames given to a model configured for {expected}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("non-finite affect label ({0}, {1})")]
    NonFiniteLabel(f64, f64),
    #[error("invalid architecture: {0}")]
    Architecture(String),
}

impl From<crate::synth::DataError> for ModelError {
    fn from(e: crate::synth::DataError) -> Self {
        ModelError::Architecture(e.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Frame,
    Sequence,
    SequenceAttention,
}

/// Every dimension needed to rebuild a model from named parameter arrays.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub image_side: usize,
    /// `[pixels, hidden…, latent]`; the decoder mirrors it.
    pub generator_dims: Vec<usize>,
    /// `[pixels, hidden…, features]`; both heads read the last width.
    pub discriminator_dims: Vec<usize>,
    pub combiner_hidden: usize,
    pub lstm_hidden: usize,
    pub variant: Variant,
    pub attention_mode: AttentionMode,
    /// Curriculum length `n`; 1 for the frame variant.
    pub seq_len: usize,
    /// Scale the attention context by `1/k` for a window of `k` states.
    pub context_divide_by_count: bool,
    /// Condition on a one-hot of the most likely quadrant instead of the probabilities.
    pub hard_quadrant: bool,
}

impl Default for Architecture {
    fn default() -> Self {
        Self {
            image_side: 16,
            generator_dims: vec![256, 128, 64],
            discriminator_dims: vec![256, 64, 32],
            combiner_hidden: 32,
            lstm_hidden: 32,
            variant: Variant::Frame,
            attention_mode: AttentionMode::Concat,
            seq_len: 1,
            context_divide_by_count: true,
            hard_quadrant: false,
        }
    }
}

impl Architecture {
    pub fn pixels(&self) -> usize {
        self.image_side * self.image_side
    }

    pub fn latent_dim(&self) -> usize {
        *self.generator_dims.last().unwrap_or(&0)
    }

    pub fn zq_dim(&self) -> usize {
        self.latent_dim() + 4
    }

    /// Width of a combined state `[h ; c]`.
    pub fn state_dim(&self) -> usize {
        2 * self.lstm_hidden
    }

    pub fn lstm_input_dim(&self) -> usize {
        match self.variant {
            Variant::SequenceAttention => self.state_dim() + self.zq_dim(),
            _ => self.zq_dim(),
        }
    }

    pub fn model_name(&self) -> String {
        match self.variant {
            Variant::Frame => "ANCLaF".to_string(),
            Variant::Sequence => format!("ANCLaF-S-{}", self.seq_len),
            Variant::SequenceAttention => format!("ANCLaF-SA-{}", self.seq_len),
        }
    }

    pub fn with_variant(&self, variant: Variant, seq_len: usize) -> Self {
        Self {
            variant,
            seq_len,
            ..self.clone()
        }
    }

    fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::Architecture(m.to_string()));
        if self.generator_dims.len() < 2 || self.discriminator_dims.len() < 2 {
            return bad("generator and discriminator need at least one layer");
        }
        if self.generator_dims[0] != self.pixels() || self.discriminator_dims[0] != self.pixels() {
            return bad("first layer width must equal the pixel count");
        }
        if self.generator_dims.contains(&0)
            || self.discriminator_dims.contains(&0)
            || self.combiner_hidden == 0
            || self.lstm_hidden == 0
            || self.seq_len == 0
        {
            return bad("dimensions must be positive");
        }
        if self.variant == Variant::Frame && self.seq_len != 1 {
            return bad("frame variant has sequence length 1");
        }
        Ok(())
    }

    fn generator_specs(&self) -> Result<Vec<ParamSpec>, NnError> {
        let mut specs = EncoderStack::specs("g.enc", &self.generator_dims)?;
        let mirrored: Vec<usize> = self.generator_dims.iter().rev().copied().collect();
        specs.extend(DecoderStack::specs("g.dec", &mirrored)?);
        Ok(specs)
    }

    fn discriminator_specs(&self) -> Result<Vec<ParamSpec>, NnError> {
        let mut specs = EncoderStack::specs("d.enc", &self.discriminator_dims)?;
        let feat = *self.discriminator_dims.last().unwrap();
        specs.extend(AffineLayer::specs("d.real", feat, 1));
        specs.extend(AffineLayer::specs("d.quad", feat, 4));
        Ok(specs)
    }

    fn combiner_specs(&self) -> Result<Vec<ParamSpec>, NnError> {
        let zq = self.zq_dim();
        Ok(match self.variant {
            Variant::Frame => {
                let mut s = EncoderStack::specs("c.enc", &[zq, self.combiner_hidden])?;
                s.extend(AffineLayer::specs("c.head", self.combiner_hidden, 2));
                s
            }
            Variant::Sequence | Variant::SequenceAttention => {
                let mut s = LstmCell::specs("c.lstm", self.lstm_input_dim(), self.lstm_hidden);
                s.extend(AffineLayer::specs("c.head", self.lstm_hidden, 2));
                if self.variant == Variant::SequenceAttention {
                    s.extend(AttentionParams::specs("c.attn", self.state_dim(), self.attention_mode));
                }
                s
            }
        })
    }
}

/// Circumplex quadrant: 0 = (V≥0, A≥0), 1 = (V<0, A≥0), 2 = (V<0, A<0), 3 = (V≥0, A<0).
pub fn quadrant_of(label: &AffectLabel) -> Result<usize, ModelError> {
    if !label.valence.is_finite() || !label.arousal.is_finite() {
        return Err(ModelError::NonFiniteLabel(label.valence, label.arousal));
    }
    let pos_v = label.valence >= 0.0;
    let pos_a = label.arousal >= 0.0;
    Ok(match (pos_v, pos_a) {
        (true, true) => 0,
        (false, true) => 1,
        (false, false) => 2,
        (true, false) => 3,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorNet {
    pub encoder: EncoderStack,
    pub decoder: DecoderStack,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiscriminatorNet {
    pub encoder: EncoderStack,
    pub head_realfake: AffineLayer,
    pub head_quadrant: AffineLayer,
}

#[derive(Debug, Clone, PartialEq)]
pub enum CombinerNet {
    Frame {
        encoder: EncoderStack,
        head: AffineLayer,
    },
    Sequence {
        lstm: LstmCell,
        head: AffineLayer,
    },
    SequenceAttention {
        lstm: LstmCell,
        attention: AttentionParams,
        head: AffineLayer,
    },
}

/// Per-frame conditioned latent block: `zq = [z ; q]`.
#[derive(Debug, Clone, Copy)]
pub struct LatentFeature {
    pub z: NodeId,
    pub q: NodeId,
    pub zq: NodeId,
}

#[derive(Debug, Clone, Copy)]
pub struct DiscriminatorOutput {
    pub p_real: NodeId,
    pub quadrant_logits: NodeId,
    pub quadrant_probs: NodeId,
}

#[derive(Debug, Clone)]
pub struct SequenceOutput {
    pub predictions: Vec<NodeId>,
    pub states: Vec<LstmState>,
    /// Alignment weights per frame; `None` when the window was empty or the model has no attention.
    pub attention: Vec<Option<NodeId>>,
}

/// A complete model: architecture, parameters and the bound networks.
#[derive(Debug, Clone, PartialEq)]
pub struct AnclafModel<T> {
    pub arch: Architecture,
    pub params: ParamStore<T>,
    pub generator: GeneratorNet,
    pub discriminator: DiscriminatorNet,
    pub combiner: CombinerNet,
}

impl<T: Scalar> AnclafModel<T> {
    /// Fresh parameters; bit-identical for equal `(arch, seed)`.
    pub fn init(arch: Architecture, seed: u64) -> Result<Self, ModelError> {
        arch.validate()?;
        let mut specs = arch.generator_specs()?;
        specs.extend(arch.discriminator_specs()?);
        specs.extend(arch.combiner_specs()?);
        let params = init_params(&specs, seed)?;
        Self::from_params(arch, params)
    }

    /// Binds networks to an existing store; every name the architecture needs must exist.
    pub fn from_params(arch: Architecture, params: ParamStore<T>) -> Result<Self, ModelError> {
        arch.validate()?;
        let gdepth = arch.generator_dims.len() - 1;
        let generator = GeneratorNet {
            encoder: EncoderStack::bind(&params, "g.enc", gdepth, Activation::Tanh)?,
            decoder: DecoderStack::bind(&params, "g.dec", gdepth, Activation::Tanh)?,
        };
        let ddepth = arch.discriminator_dims.len() - 1;
        let discriminator = DiscriminatorNet {
            encoder: EncoderStack::bind(&params, "d.enc", ddepth, Activation::Tanh)?,
            head_realfake: AffineLayer::bind(&params, "d.real", Activation::Sigmoid)?,
            head_quadrant: AffineLayer::bind(&params, "d.quad", Activation::None)?,
        };
        let combiner = match arch.variant {
            Variant::Frame => CombinerNet::Frame {
                encoder: EncoderStack::bind(&params, "c.enc", 1, Activation::Tanh)?,
                head: AffineLayer::bind(&params, "c.head", Activation::None)?,
            },
            Variant::Sequence => CombinerNet::Sequence {
                lstm: LstmCell::bind(&params, "c.lstm")?,
                head: AffineLayer::bind(&params, "c.head", Activation::None)?,
            },
            Variant::SequenceAttention => CombinerNet::SequenceAttention {
                lstm: LstmCell::bind(&params, "c.lstm")?,
                attention: AttentionParams::bind(&params, "c.attn", arch.state_dim(), arch.attention_mode)?,
                head: AffineLayer::bind(&params, "c.head", Activation::None)?,
            },
        };
        let model = Self {
            arch,
            params,
            generator,
            discriminator,
            combiner,
        };
        model.check_shapes()?;
        Ok(model)
    }

    fn check_shapes(&self) -> Result<(), ModelError> {
        let a = &self.arch;
        let mismatch = |what: &str, got: usize, want: usize| {
            Err(ModelError::Architecture(format!("{what}: parameters give {got}, architecture says {want}")))
        };
        if self.generator.encoder.latent_dim != a.latent_dim() {
            return mismatch("latent", self.generator.encoder.latent_dim, a.latent_dim());
        }
        if self.generator.decoder.output_dim() != a.pixels() {
            return mismatch("decoder output", self.generator.decoder.output_dim(), a.pixels());
        }
        match &self.combiner {
            CombinerNet::Frame { encoder, .. } if encoder.input_dim() != a.zq_dim() => {
                mismatch("combiner input", encoder.input_dim(), a.zq_dim())
            }
            CombinerNet::Sequence { lstm, .. } | CombinerNet::SequenceAttention { lstm, .. }
                if lstm.input_size != a.lstm_input_dim() || lstm.hidden_size != a.lstm_hidden =>
            {
                mismatch("lstm input", lstm.input_size, a.lstm_input_dim())
            }
            _ => Ok(()),
        }
    }

    pub fn name(&self) -> String {
        self.arch.model_name()
    }

    /// Same G and D parameters with a freshly initialized combiner for `variant`.
    pub fn with_fresh_combiner(&self, variant: Variant, seq_len: usize, seed: u64) -> Result<Self, ModelError> {
        let arch = self.arch.with_variant(variant, seq_len);
        arch.validate()?;
        let fresh: ParamStore<T> = init_params(&arch.combiner_specs()?, seed)?;
        let mut params = ParamStore::new();
        for (_, name, t) in self.params.iter().filter(|(_, n, _)| !n.starts_with("c.")) {
            params.add(name, t.clone())?;
        }
        for (_, name, t) in fresh.iter() {
            params.add(name, t.clone())?;
        }
        Self::from_params(arch, params)
    }

    /// Identical parameters under a different curriculum length.
    pub fn with_seq_len(&self, seq_len: usize) -> Result<Self, ModelError> {
        if self.arch.variant == Variant::Frame {
            return Err(ModelError::WrongVariant {
                expected: Variant::Sequence,
                actual: Variant::Frame,
            });
        }
        let mut params = self.params.clone();
        params.zero_grad();
        Self::from_params(self.arch.with_variant(self.arch.variant, seq_len), params)
    }

    /// Turns a sequence model into its attention counterpart: the gate matrix gains
    /// `2h` zero input columns for the context vector and `W_a` is freshly sampled.
    pub fn with_attention(&self, mode: AttentionMode, seed: u64) -> Result<Self, ModelError> {
        let CombinerNet::Sequence { lstm, .. } = &self.combiner else {
            return Err(ModelError::WrongVariant {
                expected: Variant::Sequence,
                actual: self.arch.variant,
            });
        };
        let mut arch = self.arch.with_variant(Variant::SequenceAttention, self.arch.seq_len);
        arch.attention_mode = mode;
        let mut params = self.params.clone();
        params.zero_grad();
        lstm.widen_input(&mut params, arch.state_dim())?;
        let fresh: ParamStore<T> = init_params(&AttentionParams::specs("c.attn", arch.state_dim(), mode), seed)?;
        for (_, name, t) in fresh.iter() {
            params.add(name, t.clone())?;
        }
        Self::from_params(arch, params)
    }

    /// Encodes `image` (optionally distorted first) and decodes it back.
    /// Returns `(reconstruction, z)`.
    pub fn generator_forward<R: Rng>(
        &self,
        g: &mut Graph<T>,
        image: NodeId,
        distortion: Option<(&[Distortion], &mut R)>,
    ) -> Result<(NodeId, NodeId), ModelError> {
        let input = match distortion {
            None => image,
            Some((kinds, rng)) => {
                let side = self.arch.image_side;
                let shape = g.shape(image).to_vec();
                let mut out = Vec::with_capacity(g.value(image).len());
                for row in g.value(image).chunks(side * side) {
                    let px: Vec<f64> = row.iter().map(|v| v.as_f64()).collect();
                    let noisy = distort(&px, side, rng, kinds)?;
                    out.extend(noisy.into_iter().map(T::of));
                }
                g.constant_from(&shape, out)?
            }
        };
        let z = self.generator.encoder.forward(g, &self.params, input)?;
        let rec = self.generator.decoder.forward(g, &self.params, z)?;
        Ok((rec, z))
    }

    pub fn discriminator_forward(&self, g: &mut Graph<T>, image: NodeId) -> Result<DiscriminatorOutput, ModelError> {
        let d = &self.discriminator;
        let feat = d.encoder.forward(g, &self.params, image)?;
        let p_real = d.head_realfake.forward(g, &self.params, feat)?;
        let quadrant_logits = d.head_quadrant.forward(g, &self.params, feat)?;
        let quadrant_probs = g.softmax(quadrant_logits)?;
        Ok(DiscriminatorOutput {
            p_real,
            quadrant_logits,
            quadrant_probs,
        })
    }

    /// `zq = concat(z, q)` along the feature axis.
    pub fn make_zq(&self, g: &mut Graph<T>, z: NodeId, q: NodeId) -> Result<LatentFeature, ModelError> {
        let zq = g.concat_last(&[z, q])?;
        Ok(LatentFeature { z, q, zq })
    }

    /// Clean-image features: `z = enc_G(I)`, `q = D(G(I))`.
    pub fn latent_features(&self, g: &mut Graph<T>, image: NodeId) -> Result<LatentFeature, ModelError> {
        let (rec, z) = self.generator_forward::<rand_chacha::ChaCha8Rng>(g, image, None)?;
        let d = self.discriminator_forward(g, rec)?;
        let q = if self.arch.hard_quadrant {
            let probs = g.value(d.quadrant_probs);
            let mut hard = vec![T::zero(); probs.len()];
            for (row, out) in probs.chunks(4).zip(hard.chunks_mut(4)) {
                let best = (0..4).fold(0, |b, i| if row[i] > row[b] { i } else { b });
                out[best] = T::one();
            }
            let shape = g.shape(d.quadrant_probs).to_vec();
            g.constant_from(&shape, hard)?
        } else {
            d.quadrant_probs
        };
        self.make_zq(g, z, q)
    }

    /// Frame combiner on precomputed `zq [batch × (latent+4)]`.
    pub fn combine_frame(&self, g: &mut Graph<T>, zq: NodeId) -> Result<NodeId, ModelError> {
        match &self.combiner {
            CombinerNet::Frame { encoder, head } => {
                let h = encoder.forward(g, &self.params, zq)?;
                Ok(head.forward(g, &self.params, h)?)
            }
            _ => Err(ModelError::WrongVariant {
                expected: Variant::Frame,
                actual: self.arch.variant,
            }),
        }
    }

    /// Single-frame estimate through G → D → ZQ → C.
    pub fn anclaf_forward(&self, g: &mut Graph<T>, image: NodeId) -> Result<(NodeId, LatentFeature), ModelError> {
        if self.arch.variant != Variant::Frame {
            return Err(ModelError::WrongVariant {
                expected: Variant::Frame,
                actual: self.arch.variant,
            });
        }
        let trace = self.latent_features(g, image)?;
        let pred = self.combine_frame(g, trace.zq)?;
        Ok((pred, trace))
    }

    fn check_sequence(&self, variant: Variant, len: usize, n: usize) -> Result<(), ModelError> {
        if self.arch.variant != variant {
            return Err(ModelError::WrongVariant {
                expected: variant,
                actual: self.arch.variant,
            });
        }
        if len != n {
            return Err(ModelError::LengthMismatch { expected: n, got: len });
        }
        Ok(())
    }

    /// Sequence variant over exactly `n` frames from a zero state.
    pub fn anclaf_s_forward(&self, g: &mut Graph<T>, zq_seq: &[NodeId], n: usize) -> Result<SequenceOutput, ModelError> {
        self.check_sequence(Variant::Sequence, zq_seq.len(), n)?;
        self.run_sequence(g, zq_seq)
    }

    /// Attention variant over exactly `n` frames from a zero state and an empty window.
    pub fn anclaf_sa_forward(
        &self,
        g: &mut Graph<T>,
        zq_seq: &[NodeId],
        n: usize,
    ) -> Result<SequenceOutput, ModelError> {
        self.check_sequence(Variant::SequenceAttention, zq_seq.len(), n)?;
        self.run_sequence(g, zq_seq)
    }

    /// Runs the sequence combiner over any number of frames. The state carries
    /// across all of them; the attention window keeps at most `seq_len` states.
    pub fn run_sequence(&self, g: &mut Graph<T>, zq_seq: &[NodeId]) -> Result<SequenceOutput, ModelError> {
        let first = *zq_seq.first().ok_or(NnError::EmptySequence)?;
        let batch = g.shape(first)[0];
        let mut out = SequenceOutput {
            predictions: Vec::with_capacity(zq_seq.len()),
            states: Vec::with_capacity(zq_seq.len()),
            attention: Vec::with_capacity(zq_seq.len()),
        };
        match &self.combiner {
            CombinerNet::Frame { .. } => {
                return Err(ModelError::WrongVariant {
                    expected: Variant::Sequence,
                    actual: Variant::Frame,
                })
            }
            CombinerNet::Sequence { lstm, head } => {
                let mut state = LstmState::zeros(g, batch, lstm.hidden_size);
                for &zq in zq_seq {
                    let (h, next) = lstm_step(g, &self.params, lstm, zq, state)?;
                    out.predictions.push(head.forward(g, &self.params, h)?);
                    out.states.push(next);
                    out.attention.push(None);
                    state = next;
                }
            }
            CombinerNet::SequenceAttention { lstm, attention, head } => {
                let mut state = LstmState::zeros(g, batch, lstm.hidden_size);
                let mut window = StateWindow::new(self.arch.seq_len);
                for &zq in zq_seq {
                    let aug = attend_and_augment(
                        g,
                        &self.params,
                        attention,
                        zq,
                        state,
                        &mut window,
                        self.arch.context_divide_by_count,
                    )?;
                    let (h, next) = lstm_step(g, &self.params, lstm, aug.input, state)?;
                    out.predictions.push(head.forward(g, &self.params, h)?);
                    let combined = combined_state(g, next)?;
                    window.push(g, &self.params, attention, combined)?;
                    out.states.push(next);
                    out.attention.push(aug.weights);
                    state = next;
                }
            }
        }
        Ok(out)
    }
}
