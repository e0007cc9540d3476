//! The three parameterized networks and their checkpoint format.
//!
//! Generator: (noise ++ conditioning) -> hidden (LeakyReLU) -> visual dim,
//! with a ReLU or Tanh output head depending on the feature range.
//! Discriminator: shared hidden layer (ReLU) feeding an unbounded critic
//! scalar and an all-class logit head. Denoiser: one LeakyReLU layer that
//! compresses raw TF-IDF vectors before conditioning.

use std::fs;
use std::io::Read;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use crate::autodiff::{NodeId, Tape, Tensor};
use crate::error::{Error, Result};
use crate::rand_util::standard_normal;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OutputActivation {
    Relu,
    Tanh,
}

impl OutputActivation {
    pub fn as_str(self) -> &'static str {
        match self {
            OutputActivation::Relu => "relu",
            OutputActivation::Tanh => "tanh",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub noise_dim: usize,
    pub hidden_dim: usize,
    pub visual_dim: usize,
    /// Raw semantic dimension (attribute count or TF-IDF vocabulary size).
    pub semantic_dim: usize,
    pub class_count: usize,
    /// Denoiser output width; None disables the denoiser and conditions the
    /// generator on raw semantic vectors.
    pub denoiser_dim: Option<usize>,
    pub output_activation: OutputActivation,
    pub leaky_slope: f64,
}

impl ModelConfig {
    /// Width of the vector the generator is conditioned on.
    pub fn conditioning_dim(&self) -> usize {
        self.denoiser_dim.unwrap_or(self.semantic_dim)
    }

    fn validate(&self) -> Result<()> {
        let dims = [
            ("noise_dim", self.noise_dim),
            ("hidden_dim", self.hidden_dim),
            ("visual_dim", self.visual_dim),
            ("semantic_dim", self.semantic_dim),
            ("class_count", self.class_count),
            ("denoiser_dim", self.denoiser_dim.unwrap_or(1)),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        Ok(())
    }
}

/// Standard-normal noise input of a fixed width.
#[derive(Debug, Clone, Copy)]
pub struct NoiseSpec {
    pub dim: usize,
}

impl NoiseSpec {
    pub fn sample<R: Rng>(&self, batch: usize, rng: &mut R) -> Tensor {
        let data = (0..batch * self.dim)
            .map(|_| standard_normal(rng))
            .collect();
        Tensor::new(batch, self.dim, data).expect("noise shape")
    }
}

/// One fully connected layer: weight is input x output, bias a row.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseParams {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl DenseParams {
    fn init<R: Rng>(input: usize, output: usize, rng: &mut R) -> Self {
        let bound = (6.0 / (input + output) as f64).sqrt();
        let data = (0..input * output)
            .map(|_| rng.gen_range(-bound..=bound))
            .collect();
        DenseParams {
            weight: Tensor::new(input, output, data).expect("weight shape"),
            bias: Tensor::zeros(1, output),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    pub fn mount(&self, tape: &mut Tape, trainable: bool) -> DenseNodes {
        DenseNodes {
            weight: tape.leaf(&self.weight, trainable),
            bias: tape.leaf(&self.bias, trainable),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct DenseNodes {
    pub weight: NodeId,
    pub bias: NodeId,
}

impl DenseNodes {
    pub fn forward(&self, tape: &mut Tape, x: NodeId) -> Result<NodeId> {
        let h = tape.matmul(x, self.weight)?;
        tape.add_row(h, self.bias)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorNet {
    pub input: DenseParams,
    pub output: DenseParams,
    pub activation: OutputActivation,
    pub leaky_slope: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct GeneratorNodes {
    pub input: DenseNodes,
    pub output: DenseNodes,
}

impl GeneratorNet {
    pub fn mount(&self, tape: &mut Tape, trainable: bool) -> GeneratorNodes {
        GeneratorNodes {
            input: self.input.mount(tape, trainable),
            output: self.output.mount(tape, trainable),
        }
    }

    /// Graph forward from noise and an already-conditioned semantic batch.
    /// A single conditioning row is broadcast across the noise batch.
    pub fn forward(
        &self,
        tape: &mut Tape,
        nodes: &GeneratorNodes,
        z: NodeId,
        cond: NodeId,
    ) -> Result<NodeId> {
        let (m, zdim) = tape.shape(z);
        let (tm, tdim) = tape.shape(cond);
        if zdim != self.input.in_dim() - tdim {
            return Err(Error::ShapeMismatch {
                op: "generator_forward",
                detail: format!(
                    "noise {} + conditioning {} vs input layer {}",
                    zdim,
                    tdim,
                    self.input.in_dim()
                ),
            });
        }
        let cond = if tm == m {
            cond
        } else if tm == 1 {
            tape.broadcast_rows(cond, m)?
        } else {
            return Err(Error::ShapeMismatch {
                op: "generator_forward",
                detail: format!("{m} noise rows vs {tm} conditioning rows"),
            });
        };
        let joined = tape.concat_cols(z, cond)?;
        let pre = nodes.input.forward(tape, joined)?;
        let hidden = tape.leaky_relu(pre, self.leaky_slope);
        let out = nodes.output.forward(tape, hidden)?;
        Ok(match self.activation {
            OutputActivation::Relu => tape.relu(out),
            OutputActivation::Tanh => tape.tanh(out),
        })
    }

    /// Value-level generation on a scratch tape.
    pub fn generate(&self, z: &Tensor, cond: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let nodes = self.mount(&mut tape, false);
        let zn = tape.constant(z);
        let tn = tape.constant(cond);
        let out = self.forward(&mut tape, &nodes, zn, tn)?;
        Ok(tape.value_tensor(out))
    }

    pub fn param_count(&self) -> usize {
        self.input.param_count() + self.output.param_count()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiscriminatorNet {
    pub hidden: DenseParams,
    pub critic: DenseParams,
    pub classifier: DenseParams,
}

#[derive(Debug, Clone, Copy)]
pub struct DiscriminatorNodes {
    pub hidden: DenseNodes,
    pub critic: DenseNodes,
    pub classifier: DenseNodes,
}

impl DiscriminatorNet {
    pub fn mount(&self, tape: &mut Tape, trainable: bool) -> DiscriminatorNodes {
        DiscriminatorNodes {
            hidden: self.hidden.mount(tape, trainable),
            critic: self.critic.mount(tape, trainable),
            classifier: self.classifier.mount(tape, trainable),
        }
    }

    /// Like `mount`, but only the classifier head is trainable.
    pub fn mount_classifier_only(&self, tape: &mut Tape) -> DiscriminatorNodes {
        DiscriminatorNodes {
            hidden: self.hidden.mount(tape, false),
            critic: self.critic.mount(tape, false),
            classifier: self.classifier.mount(tape, true),
        }
    }

    /// Graph forward producing (critic scores Mx1, class logits MxC).
    pub fn forward(
        &self,
        tape: &mut Tape,
        nodes: &DiscriminatorNodes,
        x: NodeId,
    ) -> Result<(NodeId, NodeId)> {
        let (_, v) = tape.shape(x);
        if v != self.hidden.in_dim() {
            return Err(Error::ShapeMismatch {
                op: "discriminator_forward",
                detail: format!("input dim {} vs {}", v, self.hidden.in_dim()),
            });
        }
        let pre = nodes.hidden.forward(tape, x)?;
        let h = tape.relu(pre);
        let critic = nodes.critic.forward(tape, h)?;
        let logits = nodes.classifier.forward(tape, h)?;
        Ok((critic, logits))
    }

    /// Value-level critic scores and logits.
    pub fn discriminate(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let mut tape = Tape::new();
        let nodes = self.mount(&mut tape, false);
        let xn = tape.constant(x);
        let (critic, logits) = self.forward(&mut tape, &nodes, xn)?;
        Ok((tape.value_tensor(critic), tape.value_tensor(logits)))
    }

    pub fn param_count(&self) -> usize {
        self.hidden.param_count() + self.critic.param_count() + self.classifier.param_count()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserNet {
    pub layer: DenseParams,
    pub leaky_slope: f64,
}

impl DenoiserNet {
    pub fn mount(&self, tape: &mut Tape, trainable: bool) -> DenseNodes {
        self.layer.mount(tape, trainable)
    }

    pub fn forward(&self, tape: &mut Tape, nodes: &DenseNodes, t_raw: NodeId) -> Result<NodeId> {
        let pre = nodes.forward(tape, t_raw)?;
        Ok(tape.leaky_relu(pre, self.leaky_slope))
    }

    /// Value-level denoising of a batch of raw semantic rows.
    pub fn denoise(&self, t_raw: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let nodes = self.mount(&mut tape, false);
        let tn = tape.constant(t_raw);
        let out = self.forward(&mut tape, &nodes, tn)?;
        Ok(tape.value_tensor(out))
    }
}

/// The full model: generator, two-headed discriminator, optional denoiser.
#[derive(Debug, Clone, PartialEq)]
pub struct LsrGanModel {
    pub config: ModelConfig,
    pub generator: GeneratorNet,
    pub discriminator: DiscriminatorNet,
    pub denoiser: Option<DenoiserNet>,
    pub seed: u64,
    pub step: u64,
}

/// Scaled-uniform initialization, deterministic per seed: weights uniform in
/// [-s, s] with s = sqrt(6 / (fan_in + fan_out)), biases zero.
pub fn init_model(config: &ModelConfig, seed: u64) -> Result<LsrGanModel> {
    config.validate()?;
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let denoiser = config.denoiser_dim.map(|t_eff| DenoiserNet {
        layer: DenseParams::init(config.semantic_dim, t_eff, &mut rng),
        leaky_slope: config.leaky_slope,
    });
    let gen_in = config.noise_dim + config.conditioning_dim();
    let generator = GeneratorNet {
        input: DenseParams::init(gen_in, config.hidden_dim, &mut rng),
        output: DenseParams::init(config.hidden_dim, config.visual_dim, &mut rng),
        activation: config.output_activation,
        leaky_slope: config.leaky_slope,
    };
    let discriminator = DiscriminatorNet {
        hidden: DenseParams::init(config.visual_dim, config.hidden_dim, &mut rng),
        critic: DenseParams::init(config.hidden_dim, 1, &mut rng),
        classifier: DenseParams::init(config.hidden_dim, config.class_count, &mut rng),
    };
    Ok(LsrGanModel {
        config: config.clone(),
        generator,
        discriminator,
        denoiser,
        seed,
        step: 0,
    })
}

impl LsrGanModel {
    /// Applies the denoiser when present, otherwise passes raw rows through.
    pub fn condition(&self, t_raw: &Tensor) -> Result<Tensor> {
        match &self.denoiser {
            Some(d) => d.denoise(t_raw),
            None => Ok(t_raw.clone()),
        }
    }

    /// Named parameter tensors in checkpoint order.
    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        if let Some(d) = &self.denoiser {
            out.push(("denoiser.weight".to_string(), &d.layer.weight));
            out.push(("denoiser.bias".to_string(), &d.layer.bias));
        }
        out.push(("generator.input.weight".into(), &self.generator.input.weight));
        out.push(("generator.input.bias".into(), &self.generator.input.bias));
        out.push(("generator.output.weight".into(), &self.generator.output.weight));
        out.push(("generator.output.bias".into(), &self.generator.output.bias));
        out.push(("discriminator.hidden.weight".into(), &self.discriminator.hidden.weight));
        out.push(("discriminator.hidden.bias".into(), &self.discriminator.hidden.bias));
        out.push(("discriminator.critic.weight".into(), &self.discriminator.critic.weight));
        out.push(("discriminator.critic.bias".into(), &self.discriminator.critic.bias));
        out.push(("discriminator.classifier.weight".into(), &self.discriminator.classifier.weight));
        out.push(("discriminator.classifier.bias".into(), &self.discriminator.classifier.bias));
        out
    }

    pub fn param_count(&self) -> usize {
        self.generator.param_count()
            + self.discriminator.param_count()
            + self
                .denoiser
                .as_ref()
                .map_or(0, |d| d.layer.param_count())
    }
}

// ---------------------------------------------------------------------
// Checkpoint format: little-endian binary with named shape-prefixed f64
// tensors plus the config echo, seed and step count.
// ---------------------------------------------------------------------

const MAGIC: &[u8; 8] = b"LSRGANCK";
const VERSION: u32 = 1;

pub fn save_checkpoint(path: &Path, model: &LsrGanModel, config_echo: &str) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&model.seed.to_le_bytes());
    buf.extend_from_slice(&model.step.to_le_bytes());
    let echo = config_echo.as_bytes();
    buf.extend_from_slice(&(echo.len() as u32).to_le_bytes());
    buf.extend_from_slice(echo);
    let c = &model.config;
    for dim in [
        c.noise_dim,
        c.hidden_dim,
        c.visual_dim,
        c.semantic_dim,
        c.class_count,
        c.denoiser_dim.unwrap_or(0),
    ] {
        buf.extend_from_slice(&(dim as u64).to_le_bytes());
    }
    buf.push(match c.output_activation {
        OutputActivation::Relu => 0,
        OutputActivation::Tanh => 1,
    });
    buf.extend_from_slice(&c.leaky_slope.to_le_bytes());
    let params = model.named_params();
    buf.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, tensor) in params {
        let nb = name.as_bytes();
        buf.extend_from_slice(&(nb.len() as u32).to_le_bytes());
        buf.extend_from_slice(nb);
        buf.extend_from_slice(&(tensor.rows() as u64).to_le_bytes());
        buf.extend_from_slice(&(tensor.cols() as u64).to_le_bytes());
        for v in tensor.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, buf)?;
    Ok(())
}

struct ByteReader<'a> {
    path: String,
    data: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.data.len() {
            return Err(Error::data(&self.path, None, "checkpoint truncated"));
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let len = self.u32()? as usize;
        let bytes = self.take(len)?;
        String::from_utf8(bytes.to_vec())
            .map_err(|_| Error::data(&self.path, None, "invalid UTF-8 in checkpoint"))
    }
}

pub fn load_checkpoint(path: &Path) -> Result<(LsrGanModel, String)> {
    let mut raw = Vec::new();
    fs::File::open(path)?.read_to_end(&mut raw)?;
    let name = path.display().to_string();
    let mut r = ByteReader {
        path: name.clone(),
        data: &raw,
        pos: 0,
    };
    if r.take(8)? != MAGIC {
        return Err(Error::data(&name, None, "not a checkpoint file"));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::data(
            &name,
            None,
            format!("unsupported checkpoint version {version}"),
        ));
    }
    let seed = r.u64()?;
    let step = r.u64()?;
    let echo = r.string()?;
    let noise_dim = r.u64()? as usize;
    let hidden_dim = r.u64()? as usize;
    let visual_dim = r.u64()? as usize;
    let semantic_dim = r.u64()? as usize;
    let class_count = r.u64()? as usize;
    let denoiser_raw = r.u64()? as usize;
    let activation = match r.take(1)?[0] {
        0 => OutputActivation::Relu,
        1 => OutputActivation::Tanh,
        other => {
            return Err(Error::data(
                &name,
                None,
                format!("unknown activation tag {other}"),
            ))
        }
    };
    let leaky_slope = r.f64()?;
    let config = ModelConfig {
        noise_dim,
        hidden_dim,
        visual_dim,
        semantic_dim,
        class_count,
        denoiser_dim: (denoiser_raw > 0).then_some(denoiser_raw),
        output_activation: activation,
        leaky_slope,
    };

    let count = r.u32()? as usize;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let tname = r.string()?;
        let rows = r.u64()? as usize;
        let cols = r.u64()? as usize;
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows * cols {
            data.push(r.f64()?);
        }
        tensors.push((tname, Tensor::new(rows, cols, data)?));
    }

    let mut model = init_model(&config, seed)?;
    model.step = step;
    for (tname, tensor) in tensors {
        let slot: &mut Tensor = match tname.as_str() {
            "denoiser.weight" => {
                &mut model
                    .denoiser
                    .as_mut()
                    .ok_or_else(|| Error::data(&name, None, "unexpected denoiser tensor"))?
                    .layer
                    .weight
            }
            "denoiser.bias" => {
                &mut model
                    .denoiser
                    .as_mut()
                    .ok_or_else(|| Error::data(&name, None, "unexpected denoiser tensor"))?
                    .layer
                    .bias
            }
            "generator.input.weight" => &mut model.generator.input.weight,
            "generator.input.bias" => &mut model.generator.input.bias,
            "generator.output.weight" => &mut model.generator.output.weight,
            "generator.output.bias" => &mut model.generator.output.bias,
            "discriminator.hidden.weight" => &mut model.discriminator.hidden.weight,
            "discriminator.hidden.bias" => &mut model.discriminator.hidden.bias,
            "discriminator.critic.weight" => &mut model.discriminator.critic.weight,
            "discriminator.critic.bias" => &mut model.discriminator.critic.bias,
            "discriminator.classifier.weight" => &mut model.discriminator.classifier.weight,
            "discriminator.classifier.bias" => &mut model.discriminator.classifier.bias,
            other => return Err(Error::data(&name, None, format!("unknown tensor '{other}'"))),
        };
        if slot.shape() != tensor.shape() {
            return Err(Error::data(
                &name,
                None,
                format!(
                    "tensor '{}' has shape {:?}, expected {:?}",
                    tname,
                    tensor.shape(),
                    slot.shape()
                ),
            ));
        }
        *slot = tensor;
    }
    Ok((model, echo))
}
