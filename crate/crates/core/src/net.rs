//! Two-layer hashing network: `features -> hidden -> d_bits` relaxed codes.
//!
//! One instance per modality. Parameters live in `f64`; checkpoints store
//! them as `f32`.

use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::binio;
use crate::dataset::Modality;
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"GCPN";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HiddenActivation {
    #[default]
    Relu,
    Tanh,
}

/// Output squashing. `ScaledTanh` computes `tanh(scale * z)`, the adjusted
/// tanh used by the value-gap ablations.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum OutputActivation {
    #[default]
    Tanh,
    ScaledTanh { scale: f64 },
}

impl OutputActivation {
    fn scale(self) -> f64 {
        match self {
            OutputActivation::Tanh => 1.0,
            OutputActivation::ScaledTanh { scale } => scale,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch: usize,
    pub epochs: usize,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            lr: 0.005,
            momentum: 0.9,
            weight_decay: 0.0005,
            batch: 32,
            epochs: 50,
        }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::InvalidParameter(format!("lr {} must be >= 0", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidParameter(format!(
                "momentum {} not in [0, 1)",
                self.momentum
            )));
        }
        if self.weight_decay.is_nan() || self.weight_decay < 0.0 {
            return Err(Error::InvalidParameter("weight_decay must be >= 0".into()));
        }
        if self.batch < 2 {
            return Err(Error::InvalidParameter("batch must be >= 2".into()));
        }
        if self.epochs == 0 {
            return Err(Error::InvalidParameter("epochs must be >= 1".into()));
        }
        Ok(())
    }
}

/// Gradients (or momentum buffers) with the same shapes as a [`HashNet`].
#[derive(Debug, Clone, PartialEq)]
pub struct NetGrads {
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
}

impl NetGrads {
    fn zeros_like(net: &HashNet) -> Self {
        Self {
            w1: Array2::zeros(net.w1.raw_dim()),
            b1: Array1::zeros(net.b1.raw_dim()),
            w2: Array2::zeros(net.w2.raw_dim()),
            b2: Array1::zeros(net.b2.raw_dim()),
        }
    }

    fn all_finite(&self) -> bool {
        self.w1.iter().all(|v| v.is_finite())
            && self.b1.iter().all(|v| v.is_finite())
            && self.w2.iter().all(|v| v.is_finite())
            && self.b2.iter().all(|v| v.is_finite())
    }
}

/// Activations kept from [`HashNet::forward`] for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    input: Array2<f64>,
    z1: Array2<f64>,
    a1: Array2<f64>,
    out: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HashNet {
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
    velocity: NetGrads,
    pub hidden_act: HiddenActivation,
    pub output_act: OutputActivation,
}

impl HashNet {
    /// Xavier-uniform weights, zero biases, zero momentum.
    pub fn init(d_in: usize, hidden: usize, d_bits: usize, seed: u64) -> Result<Self> {
        if d_in == 0 || hidden == 0 || d_bits == 0 {
            return Err(Error::InvalidParameter("network dimensions must be >= 1".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut xavier = |rows: usize, cols: usize| {
            let limit = (6.0 / (rows + cols) as f64).sqrt();
            let dist = Uniform::new_inclusive(-limit, limit).expect("finite limit");
            Array2::from_shape_simple_fn((rows, cols), || dist.sample(&mut rng))
        };
        let w1 = xavier(hidden, d_in);
        let w2 = xavier(d_bits, hidden);
        Ok(Self::from_parts(w1, Array1::zeros(hidden), w2, Array1::zeros(d_bits)))
    }

    pub fn from_parts(w1: Array2<f64>, b1: Array1<f64>, w2: Array2<f64>, b2: Array1<f64>) -> Self {
        assert_eq!(w1.nrows(), b1.len(), "w1/b1 shape");
        assert_eq!(w2.ncols(), w1.nrows(), "w2/w1 shape");
        assert_eq!(w2.nrows(), b2.len(), "w2/b2 shape");
        let mut net = Self {
            velocity: NetGrads {
                w1: Array2::zeros(w1.raw_dim()),
                b1: Array1::zeros(b1.raw_dim()),
                w2: Array2::zeros(w2.raw_dim()),
                b2: Array1::zeros(b2.raw_dim()),
            },
            w1,
            b1,
            w2,
            b2,
            hidden_act: HiddenActivation::default(),
            output_act: OutputActivation::default(),
        };
        net.velocity = NetGrads::zeros_like(&net);
        net
    }

    pub fn with_activations(mut self, hidden: HiddenActivation, output: OutputActivation) -> Self {
        self.hidden_act = hidden;
        self.output_act = output;
        self
    }

    pub fn d_in(&self) -> usize {
        self.w1.ncols()
    }

    pub fn hidden(&self) -> usize {
        self.w1.nrows()
    }

    pub fn d_bits(&self) -> usize {
        self.w2.nrows()
    }

    pub fn velocity(&self) -> &NetGrads {
        &self.velocity
    }

    pub fn reset_velocity(&mut self) {
        self.velocity = NetGrads::zeros_like(self);
    }

    fn check_input(&self, f: &ArrayView2<f64>) -> Result<()> {
        if f.ncols() != self.d_in() {
            return Err(Error::DimensionMismatch(format!(
                "network expects {} input features, got {}",
                self.d_in(),
                f.ncols()
            )));
        }
        if let Some(((r, c), _)) = f.indexed_iter().find(|(_, v)| !v.is_finite()) {
            return Err(Error::NonFinite(format!("network input at ({r}, {c})")));
        }
        Ok(())
    }

    /// Relaxed codes `H` (one row per input row) plus the backward cache.
    pub fn forward(&self, f: ArrayView2<f64>) -> Result<(Array2<f64>, ForwardCache)> {
        self.check_input(&f)?;
        let z1 = f.dot(&self.w1.t()) + &self.b1;
        let a1 = match self.hidden_act {
            HiddenActivation::Relu => z1.mapv(|v| v.max(0.0)),
            HiddenActivation::Tanh => z1.mapv(f64::tanh),
        };
        let scale = self.output_act.scale();
        let z2 = a1.dot(&self.w2.t()) + &self.b2;
        let out = z2.mapv(|v| (scale * v).tanh());
        let cache = ForwardCache {
            input: f.to_owned(),
            z1,
            a1,
            out: out.clone(),
        };
        Ok((out, cache))
    }

    /// Forward pass without keeping activations.
    pub fn encode(&self, f: ArrayView2<f64>) -> Result<Array2<f64>> {
        Ok(self.forward(f)?.0)
    }

    /// Parameter gradients given `d_out = ∂L/∂H`.
    pub fn backward(&self, cache: &ForwardCache, d_out: ArrayView2<f64>) -> NetGrads {
        assert_eq!(d_out.dim(), cache.out.dim(), "gradient shape");
        let scale = self.output_act.scale();
        let mut dz2 = d_out.to_owned();
        Zip::from(&mut dz2)
            .and(&cache.out)
            .for_each(|g, &h| *g *= scale * (1.0 - h * h));
        let w2 = dz2.t().dot(&cache.a1);
        let b2 = dz2.sum_axis(Axis(0));
        let mut dz1 = dz2.dot(&self.w2);
        match self.hidden_act {
            HiddenActivation::Relu => Zip::from(&mut dz1)
                .and(&cache.z1)
                .for_each(|g, &z| {
                    if z <= 0.0 {
                        *g = 0.0;
                    }
                }),
            HiddenActivation::Tanh => Zip::from(&mut dz1)
                .and(&cache.a1)
                .for_each(|g, &a| *g *= 1.0 - a * a),
        }
        let w1 = dz1.t().dot(&cache.input);
        let b1 = dz1.sum_axis(Axis(0));
        NetGrads { w1, b1, w2, b2 }
    }

    /// Momentum SGD with L2 weight decay:
    /// `v <- μ v + g + λ p`, `p <- p - lr v`.
    ///
    /// Non-finite gradients abort the step before anything is modified.
    pub fn apply_grads(&mut self, grads: &NetGrads, cfg: &SgdConfig) -> Result<()> {
        if grads.w1.dim() != self.w1.dim()
            || grads.b1.dim() != self.b1.dim()
            || grads.w2.dim() != self.w2.dim()
            || grads.b2.dim() != self.b2.dim()
        {
            return Err(Error::DimensionMismatch("gradient shapes differ from parameters".into()));
        }
        if !grads.all_finite() {
            return Err(Error::NonFinite("gradient; update skipped".into()));
        }
        let (mu, wd, lr) = (cfg.momentum, cfg.weight_decay, cfg.lr);
        macro_rules! step {
            ($p:ident) => {
                Zip::from(&mut self.$p)
                    .and(&mut self.velocity.$p)
                    .and(&grads.$p)
                    .for_each(|p, v, &g| {
                        *v = mu * *v + g + wd * *p;
                        *p -= lr * *v;
                    })
            };
        }
        step!(w1);
        step!(b1);
        step!(w2);
        step!(b2);
        Ok(())
    }

    pub fn write_checkpoint<W: Write>(&self, modality: Modality, w: &mut W) -> Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        binio::write_u32(w, binio::dim_u32(self.d_in(), "d_in")?)?;
        binio::write_u32(w, binio::dim_u32(self.hidden(), "hidden")?)?;
        binio::write_u32(w, binio::dim_u32(self.d_bits(), "d_bits")?)?;
        let hidden_tag = match self.hidden_act {
            HiddenActivation::Relu => 0u8,
            HiddenActivation::Tanh => 1,
        };
        let output_tag = match self.output_act {
            OutputActivation::Tanh => 0u8,
            OutputActivation::ScaledTanh { .. } => 1,
        };
        let modality_tag = match modality {
            Modality::Image => 0u8,
            Modality::Text => 1,
        };
        w.write_all(&[modality_tag, hidden_tag, output_tag, 0])?;
        w.write_all(&(self.output_act.scale() as f32).to_le_bytes())?;
        let f32s = |a: &mut dyn Iterator<Item = &f64>| a.map(|&v| v as f32).collect::<Vec<_>>();
        binio::write_f32s(w, f32s(&mut self.w1.iter()))?;
        binio::write_f32s(w, f32s(&mut self.b1.iter()))?;
        binio::write_f32s(w, f32s(&mut self.w2.iter()))?;
        binio::write_f32s(w, f32s(&mut self.b2.iter()))?;
        Ok(())
    }

    pub fn read_checkpoint<R: Read>(r: &mut R) -> Result<(Modality, Self)> {
        binio::read_magic(r, CHECKPOINT_MAGIC)?;
        let d_in = binio::read_u32(r, "d_in")? as usize;
        let hidden = binio::read_u32(r, "hidden")? as usize;
        let d_bits = binio::read_u32(r, "d_bits")? as usize;
        if d_in == 0 || hidden == 0 || d_bits == 0 {
            return Err(Error::DimensionMismatch("zero dimension in checkpoint".into()));
        }
        let modality = match binio::read_u8(r, "modality")? {
            0 => Modality::Image,
            1 => Modality::Text,
            t => return Err(Error::Malformed(format!("unknown modality tag {t}"))),
        };
        let hidden_act = match binio::read_u8(r, "hidden activation")? {
            0 => HiddenActivation::Relu,
            1 => HiddenActivation::Tanh,
            t => return Err(Error::Malformed(format!("unknown hidden activation {t}"))),
        };
        let output_tag = binio::read_u8(r, "output activation")?;
        binio::read_u8(r, "reserved")?;
        let scale = f64::from(binio::read_f32s(r, 1, "output scale")?[0]);
        let output_act = match output_tag {
            0 => OutputActivation::Tanh,
            1 => OutputActivation::ScaledTanh { scale },
            t => return Err(Error::Malformed(format!("unknown output activation {t}"))),
        };
        let read = |r: &mut R, n: usize, what: &str| -> Result<Vec<f64>> {
            Ok(binio::read_f32s(r, n, what)?.into_iter().map(f64::from).collect())
        };
        let w1 = Array2::from_shape_vec((hidden, d_in), read(r, hidden * d_in, "w1")?)
            .expect("sized read");
        let b1 = Array1::from(read(r, hidden, "b1")?);
        let w2 = Array2::from_shape_vec((d_bits, hidden), read(r, d_bits * hidden, "w2")?)
            .expect("sized read");
        let b2 = Array1::from(read(r, d_bits, "b2")?);
        binio::expect_eof(r)?;
        let net = Self::from_parts(w1, b1, w2, b2).with_activations(hidden_act, output_act);
        Ok((modality, net))
    }
}

pub fn save_checkpoint(net: &HashNet, modality: Modality, path: impl AsRef<Path>) -> Result<()> {
    let mut buf = Vec::new();
    net.write_checkpoint(modality, &mut buf)?;
    binio::write_atomic(path.as_ref(), |w| w.write_all(&buf))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(Modality, HashNet)> {
    let mut r = binio::open(path.as_ref())?;
    HashNet::read_checkpoint(&mut r)
}
