//! Encoder and the two dense heads: specs, parameters, passes, checkpoints.

mod encoder;
pub(crate) mod layers;

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};
use std::path::Path;

use ndarray::{Array2, ArrayView2, LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive};
use rand::distributions::{Distribution, Uniform};
use rand::Rng;
use serde::{Deserialize, Serialize};

pub use encoder::EncoderCache;
use encoder::{EncoderLayout, Init};

use crate::error::{Error, Result};
use crate::seed::derived_rng;

/// Floating-point element type of a network.
pub trait Real:
    Float
    + FromPrimitive
    + LinalgScalar
    + ScalarOperand
    + Debug
    + Default
    + Send
    + Sync
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + 'static
{
    const NAME: &'static str;
}

impl Real for f32 {
    const NAME: &'static str = "f32";
}

impl Real for f64 {
    const NAME: &'static str = "f64";
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvBlock {
    pub filters: usize,
    pub kernel: usize,
}

/// Convolutional encoder: a temporal convolution and a spatial convolution
/// over all input channels, then conv blocks. Every stage is followed by
/// batch norm, ELU, max-pool by 2 and dropout. Convolutions are unpadded.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub input_channels: usize,
    pub input_samples: usize,
    pub temporal_filters: usize,
    pub temporal_kernel: usize,
    pub blocks: Vec<ConvBlock>,
    pub dropout: f64,
    pub bn_eps: f64,
    pub bn_momentum: f64,
}

impl ConvSpec {
    /// The four-stage DeepConvNet layout.
    pub fn deep_conv_net(input_channels: usize, input_samples: usize) -> Self {
        ConvSpec {
            input_channels,
            input_samples,
            temporal_filters: 25,
            temporal_kernel: 5,
            blocks: vec![
                ConvBlock { filters: 50, kernel: 4 },
                ConvBlock {
                    filters: 100,
                    kernel: 5,
                },
                ConvBlock {
                    filters: 200,
                    kernel: 5,
                },
            ],
            dropout: 0.5,
            bn_eps: 1e-5,
            bn_momentum: 0.1,
        }
    }

    /// First two stages only, for short inputs.
    pub fn truncated(input_channels: usize, input_samples: usize) -> Self {
        let mut s = Self::deep_conv_net(input_channels, input_samples);
        s.blocks.truncate(1);
        s
    }

    /// Time length after each operation: input, temporal conv, spatial conv,
    /// pool, then conv and pool for every block.
    pub fn time_trace(&self) -> Result<Vec<usize>> {
        if self.input_channels == 0 || self.temporal_filters == 0 || self.temporal_kernel == 0 {
            return Err(Error::Config("conv encoder sizes must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) || !(self.bn_eps > 0.0) || !(0.0..=1.0).contains(&self.bn_momentum) {
            return Err(Error::Config(format!(
                "invalid dropout {} / batch-norm eps {} / momentum {}",
                self.dropout, self.bn_eps, self.bn_momentum
            )));
        }
        let too_short = |t: usize| {
            Error::Shape(format!(
                "input of {} samples is too short for the encoder (reached {t})",
                self.input_samples
            ))
        };
        let mut t = self.input_samples;
        let mut trace = vec![t];
        let conv = |t: usize, k: usize| if t >= k { Ok(t + 1 - k) } else { Err(too_short(t)) };
        t = conv(t, self.temporal_kernel)?;
        trace.extend([t, t]);
        t /= 2;
        trace.push(t);
        for b in &self.blocks {
            if b.filters == 0 || b.kernel == 0 {
                return Err(Error::Config("conv block sizes must be positive".into()));
            }
            t = conv(t, b.kernel)?;
            trace.push(t);
            t /= 2;
            trace.push(t);
        }
        if t == 0 {
            return Err(too_short(t));
        }
        Ok(trace)
    }

    pub fn latent_dim(&self) -> Result<usize> {
        let t = *self.time_trace()?.last().expect("non-empty trace");
        let filters = self.blocks.last().map_or(self.temporal_filters, |b| b.filters);
        Ok(t * filters)
    }
}

/// One hidden dense layer with ELU and dropout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseSpec {
    pub input_dim: usize,
    pub hidden: usize,
    pub dropout: f64,
}

impl DenseSpec {
    pub fn new(input_dim: usize) -> Self {
        DenseSpec {
            input_dim,
            hidden: 128,
            dropout: 0.5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.hidden == 0 || !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("invalid dense encoder {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EncoderSpec {
    Conv(ConvSpec),
    Dense(DenseSpec),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub encoder: EncoderSpec,
    /// Emotion classes.
    pub num_classes: usize,
    /// Data sources seen by the adversary.
    pub num_sources: usize,
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 || self.num_sources < 1 {
            return Err(Error::Config(format!(
                "need at least 2 classes and 1 source, got {} and {}",
                self.num_classes, self.num_sources
            )));
        }
        EncoderLayout::new(&self.encoder).map(|_| ())
    }
}

/// Encoder, emotion head, adversary head, and batch-norm running statistics.
///
/// Heads store a `(out, latent)` row-major weight followed by the bias.
#[derive(Debug, Clone)]
pub struct Network<F: Real> {
    spec: ModelSpec,
    layout: EncoderLayout,
    pub encoder: Vec<F>,
    pub classifier: Vec<F>,
    pub adversary: Vec<F>,
    pub running: Vec<F>,
}

fn fill_uniform<F: Real, R: Rng>(out: &mut [F], fan_in: usize, rng: &mut R) {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let dist = Uniform::new_inclusive(-bound, bound);
    for v in out {
        *v = layers::cast(dist.sample(rng));
    }
}

fn head_params<F: Real>(out: usize, latent: usize, rng: &mut impl Rng) -> Vec<F> {
    let mut p = vec![F::zero(); out * (latent + 1)];
    fill_uniform(&mut p, latent, rng);
    p
}

impl<F: Real> Network<F> {
    /// Fan-in scaled uniform weights, batch-norm scale 1 and shift 0.
    pub fn init(spec: ModelSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let layout = EncoderLayout::new(&spec.encoder)?;
        let mut rng = derived_rng(seed, "init", 0);
        let mut encoder = vec![F::zero(); layout.param_len()];
        for (range, init) in layout.param_inits() {
            match init {
                Init::Uniform { fan_in } => fill_uniform(&mut encoder[range], fan_in, &mut rng),
                Init::Ones => encoder[range].fill(F::one()),
                Init::Zeros => encoder[range].fill(F::zero()),
            }
        }
        let latent = layout.latent_dim();
        let classifier = head_params(spec.num_classes, latent, &mut rng);
        let adversary = head_params(spec.num_sources, latent, &mut rng);
        let running = layout.initial_running();
        Ok(Network {
            spec,
            layout,
            encoder,
            classifier,
            adversary,
            running,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn latent_dim(&self) -> usize {
        self.layout.latent_dim()
    }

    pub fn input_len(&self) -> usize {
        self.layout.input_len()
    }

    /// Eval-mode encoding: no dropout, batch norm from running statistics.
    pub fn encode(&self, x: ArrayView2<F>) -> Result<Array2<F>> {
        encoder::check_input(&self.layout, &x)?;
        Ok(encoder::forward::<F, rand_chacha::ChaCha8Rng>(&self.layout, &self.encoder, &self.running, x, None).0)
    }

    /// Train-mode encoding with batch statistics and dropout drawn from
    /// `rng`. Running statistics are not touched; see
    /// [`Network::commit_batch_stats`].
    pub fn forward_train<R: Rng>(&self, x: ArrayView2<F>, rng: &mut R) -> Result<(Array2<F>, EncoderCache<F>)> {
        encoder::check_input(&self.layout, &x)?;
        let (h, cache) = encoder::forward(&self.layout, &self.encoder, &self.running, x, Some(rng));
        Ok((h, cache.expect("train mode returns a cache")))
    }

    /// Update running batch-norm estimates from a train-mode pass.
    pub fn commit_batch_stats(&mut self, cache: &EncoderCache<F>) {
        encoder::commit_running(&self.layout, &mut self.running, cache);
    }

    /// Recompute running batch-norm estimates from a dropout-free pass over
    /// `x`, in chunks of `batch` rows. No effect on dense encoders.
    pub fn recalibrate_batch_stats(&mut self, x: ArrayView2<F>, batch: usize) -> Result<()> {
        encoder::check_input(&self.layout, &x)?;
        encoder::recalibrate_running(&self.layout, &self.encoder, &mut self.running, x, batch);
        Ok(())
    }

    /// Encoder parameter gradient for an upstream gradient `dh` on the latents.
    pub fn encoder_backward(&self, cache: &EncoderCache<F>, dh: &Array2<F>) -> Vec<F> {
        encoder::backward(&self.layout, &self.encoder, cache, dh)
    }

    fn head_split(&self, params: &[F], out: usize) -> (usize, usize) {
        let w = out * self.latent_dim();
        debug_assert_eq!(params.len(), w + out);
        (w, out)
    }

    fn check_latent(&self, h: &ArrayView2<F>) -> Result<()> {
        if h.ncols() != self.latent_dim() {
            return Err(Error::Shape(format!(
                "latent width {} does not match the heads ({})",
                h.ncols(),
                self.latent_dim()
            )));
        }
        Ok(())
    }

    pub fn emotion_logits(&self, h: ArrayView2<F>) -> Result<Array2<F>> {
        self.check_latent(&h)?;
        let (w, _) = self.head_split(&self.classifier, self.spec.num_classes);
        Ok(layers::dense_forward(h, &self.classifier[..w], &self.classifier[w..]))
    }

    pub fn adversary_logits(&self, h: ArrayView2<F>) -> Result<Array2<F>> {
        self.check_latent(&h)?;
        let (w, _) = self.head_split(&self.adversary, self.spec.num_sources);
        Ok(layers::dense_forward(h, &self.adversary[..w], &self.adversary[w..]))
    }

    /// Same network in another precision.
    pub fn cast<G: Real>(&self) -> Network<G> {
        let conv = |v: &[F]| {
            v.iter()
                .map(|x| layers::cast::<G>(x.to_f64().unwrap_or(f64::NAN)))
                .collect()
        };
        Network {
            spec: self.spec.clone(),
            layout: self.layout.clone(),
            encoder: conv(&self.encoder),
            classifier: conv(&self.classifier),
            adversary: conv(&self.adversary),
            running: conv(&self.running),
        }
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let conv = |v: &[F]| v.iter().map(|x| x.to_f64().unwrap_or(f64::NAN)).collect();
        Checkpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            precision: F::NAME.to_string(),
            spec: self.spec.clone(),
            encoder: conv(&self.encoder),
            classifier: conv(&self.classifier),
            adversary: conv(&self.adversary),
            running_stats: conv(&self.running),
        }
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        if c.format != CHECKPOINT_FORMAT || c.version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!(
                "unsupported checkpoint {} v{}",
                c.format, c.version
            )));
        }
        let mut net = Network::<F>::init(c.spec.clone(), 0)?;
        let fill = |dst: &mut Vec<F>, src: &[f64], what: &str| -> Result<()> {
            if dst.len() != src.len() {
                return Err(Error::Format(format!(
                    "checkpoint {what} has {} values, spec needs {}",
                    src.len(),
                    dst.len()
                )));
            }
            for (d, &s) in dst.iter_mut().zip(src) {
                *d = layers::cast(s);
            }
            Ok(())
        };
        fill(&mut net.encoder, &c.encoder, "encoder")?;
        fill(&mut net.classifier, &c.classifier, "classifier")?;
        fill(&mut net.adversary, &c.adversary, "adversary")?;
        fill(&mut net.running, &c.running_stats, "running_stats")?;
        Ok(net)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::format::create_parent(path)?;
        let text = serde_json::to_string(&self.checkpoint()).map_err(|e| Error::json(path, e))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let c: Checkpoint = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
        Self::from_checkpoint(&c)
    }
}

pub const CHECKPOINT_FORMAT: &str = "advcensor-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

/// JSON checkpoint: the model spec plus flat parameter arrays in storage
/// order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub precision: String,
    pub spec: ModelSpec,
    pub encoder: Vec<f64>,
    pub classifier: Vec<f64>,
    pub adversary: Vec<f64>,
    pub running_stats: Vec<f64>,
}
