//! Small trainable embedding backbones with an optional logit head, plain
//! SGD with momentum, and checkpointing.
//!
//! Two architectures cover the experiments: a two-layer MLP for flat or
//! small-image inputs, and a tiny two-block convnet (3x3 conv, relu, 2x2 max
//! pool, twice) for images. Both end in an affine embedding head and an
//! affine logit head sharing the last hidden layer.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{NodeId, Tape};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const HIDDEN1: usize = 128;
const HIDDEN2: usize = 64;
const CONV1: usize = 6;
const CONV2: usize = 12;

/// Backbone architecture.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum NetSpec {
    /// in_dim -> 128 -> 64 -> heads.
    MlpSmall { in_dim: usize },
    /// Two 3x3 conv + pool blocks over [h, w, channels] images -> heads.
    /// Height and width must be multiples of four.
    ConvTiny {
        height: usize,
        width: usize,
        channels: usize,
    },
}

impl NetSpec {
    fn validate(&self) -> Result<()> {
        match *self {
            NetSpec::MlpSmall { in_dim } => {
                if in_dim == 0 {
                    return Err(Error::Config("mlp input size must be positive".to_string()));
                }
            }
            NetSpec::ConvTiny {
                height,
                width,
                channels,
            } => {
                if height == 0 || width == 0 || channels == 0 {
                    return Err(Error::Config(
                        "conv input dimensions must be positive".to_string(),
                    ));
                }
                if height % 4 != 0 || width % 4 != 0 {
                    return Err(Error::Config(format!(
                        "conv input must pool twice: {height}x{width} is not a multiple of 4"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Flattened input size.
    pub fn input_numel(&self) -> usize {
        match *self {
            NetSpec::MlpSmall { in_dim } => in_dim,
            NetSpec::ConvTiny {
                height,
                width,
                channels,
            } => height * width * channels,
        }
    }

    /// Size of the last hidden layer feeding both heads.
    fn head_in(&self) -> usize {
        match *self {
            NetSpec::MlpSmall { .. } => HIDDEN2,
            NetSpec::ConvTiny { height, width, .. } => CONV2 * (height / 4) * (width / 4),
        }
    }

    /// Shapes of all parameter tensors in canonical order.
    fn param_shapes(&self, embed_dim: usize, num_classes: usize) -> Vec<Vec<usize>> {
        let head_in = self.head_in();
        let mut shapes = match *self {
            NetSpec::MlpSmall { in_dim } => vec![
                vec![in_dim, HIDDEN1],
                vec![HIDDEN1],
                vec![HIDDEN1, HIDDEN2],
                vec![HIDDEN2],
            ],
            NetSpec::ConvTiny { channels, .. } => vec![
                vec![9 * channels, CONV1],
                vec![CONV1],
                vec![9 * CONV1, CONV2],
                vec![CONV2],
            ],
        };
        shapes.push(vec![head_in, embed_dim]);
        shapes.push(vec![embed_dim]);
        shapes.push(vec![head_in, num_classes]);
        shapes.push(vec![num_classes]);
        shapes
    }
}

/// A backbone plus its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingNet {
    spec: NetSpec,
    embed_dim: usize,
    num_classes: usize,
    seed: u64,
    params: Vec<Tensor>,
}

impl EmbeddingNet {
    /// Builds a network with uniform fan-in-scaled weights (limit
    /// sqrt(6 / fan_in)) and zero biases, drawn deterministically from the
    /// seed in canonical parameter order.
    pub fn build(spec: NetSpec, embed_dim: usize, num_classes: usize, seed: u64) -> Result<Self> {
        spec.validate()?;
        if embed_dim == 0 {
            return Err(Error::Config("embedding size must be positive".to_string()));
        }
        if num_classes == 0 {
            return Err(Error::Config("class count must be positive".to_string()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::new();
        for shape in spec.param_shapes(embed_dim, num_classes) {
            let numel: usize = shape.iter().product();
            let data = if shape.len() == 2 {
                let limit = (6.0 / shape[0] as f64).sqrt();
                (0..numel)
                    .map(|_| (rng.gen::<f64>() * 2.0 - 1.0) * limit)
                    .collect()
            } else {
                vec![0.0; numel]
            };
            params.push(Tensor::new(shape, data)?);
        }
        Ok(EmbeddingNet {
            spec,
            embed_dim,
            num_classes,
            seed,
            params,
        })
    }

    pub fn spec(&self) -> &NetSpec {
        &self.spec
    }

    pub fn embed_dim(&self) -> usize {
        self.embed_dim
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.numel()).sum()
    }

    /// Pushes every parameter onto the tape, in canonical order.
    pub fn insert_params(&self, tape: &mut Tape, requires_grad: bool) -> Vec<NodeId> {
        self.params
            .iter()
            .map(|p| tape.leaf(p.clone(), requires_grad))
            .collect()
    }

    /// Runs the backbone over a batched input node. The input may arrive
    /// flattened or shaped; only its per-item size is checked. Returns the
    /// embedding rows and, if requested, the logit rows.
    pub fn forward_on(
        &self,
        tape: &mut Tape,
        param_ids: &[NodeId],
        inputs: NodeId,
        want_logits: bool,
    ) -> Result<(NodeId, Option<NodeId>)> {
        if param_ids.len() != self.params.len() {
            return Err(Error::InvalidArgument(format!(
                "expected {} parameter nodes, got {}",
                self.params.len(),
                param_ids.len()
            )));
        }
        let batch = *tape.shape(inputs).first().ok_or_else(|| {
            Error::InvalidArgument("forward needs a batched input".to_string())
        })?;
        if batch == 0 {
            return Err(Error::InvalidArgument("empty batch".to_string()));
        }
        let per_item = tape.data(inputs).len() / batch;
        if per_item != self.spec.input_numel() {
            return Err(Error::ShapeMismatch {
                op: "forward",
                lhs: tape.shape(inputs).to_vec(),
                rhs: vec![batch, self.spec.input_numel()],
            });
        }

        let hidden = match self.spec {
            NetSpec::MlpSmall { in_dim } => {
                let x = tape.reshape(inputs, vec![batch, in_dim])?;
                let a1 = tape.matmul(x, param_ids[0])?;
                let z1 = tape.add_rows(a1, param_ids[1])?;
                let h1 = tape.relu(z1)?;
                let a2 = tape.matmul(h1, param_ids[2])?;
                let z2 = tape.add_rows(a2, param_ids[3])?;
                tape.relu(z2)?
            }
            NetSpec::ConvTiny {
                height,
                width,
                channels,
            } => {
                let x = tape.reshape(inputs, vec![batch, height, width, channels])?;
                let p1 = tape.im2col3x3(x, batch, height, width, channels)?;
                let a1 = tape.matmul(p1, param_ids[0])?;
                let z1 = tape.add_rows(a1, param_ids[1])?;
                let r1 = tape.relu(z1)?;
                let m1 = tape.reshape(r1, vec![batch, height, width, CONV1])?;
                let pool1 = tape.max_pool2(m1, batch, height, width, CONV1)?;

                let (h2, w2) = (height / 2, width / 2);
                let p2 = tape.im2col3x3(pool1, batch, h2, w2, CONV1)?;
                let a2 = tape.matmul(p2, param_ids[2])?;
                let z2 = tape.add_rows(a2, param_ids[3])?;
                let r2 = tape.relu(z2)?;
                let m2 = tape.reshape(r2, vec![batch, h2, w2, CONV2])?;
                let pool2 = tape.max_pool2(m2, batch, h2, w2, CONV2)?;
                tape.reshape(pool2, vec![batch, self.spec.head_in()])?
            }
        };

        let ae = tape.matmul(hidden, param_ids[4])?;
        let emb = tape.add_rows(ae, param_ids[5])?;
        let logits = if want_logits {
            let al = tape.matmul(hidden, param_ids[6])?;
            Some(tape.add_rows(al, param_ids[7])?)
        } else {
            None
        };
        Ok((emb, logits))
    }

    /// Evaluation-only forward pass.
    pub fn forward(&self, inputs: &Tensor, want_logits: bool) -> Result<(Tensor, Option<Tensor>)> {
        let mut tape = Tape::new();
        let ids = self.insert_params(&mut tape, false);
        let x = tape.leaf(inputs.clone(), false);
        let (emb, logits) = self.forward_on(&mut tape, &ids, x, want_logits)?;
        Ok((tape.tensor(emb), logits.map(|l| tape.tensor(l))))
    }
}

/// Scales every row of a [b, d] node to unit Euclidean length. Rows of
/// near-zero norm keep a tiny floor under the square root and come out
/// unchanged in direction.
pub fn normalize_rows_node(tape: &mut Tape, rows: NodeId) -> Result<NodeId> {
    let sq = tape.mul(rows, rows)?;
    let sums = tape.sum_last_axis(sq)?;
    let floored = tape.clamp_min(sums, 1e-24)?;
    let norms = tape.sqrt(floored)?;
    tape.div_rows(rows, norms)
}

/// SGD with classical momentum and decoupled-style weight decay folded into
/// the update: `v = momentum * v + g; p = p - lr * (v + weight_decay * p)`.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(
        learning_rate: f64,
        momentum: f64,
        weight_decay: f64,
        param_sizes: &[usize],
    ) -> Result<Self> {
        if !(learning_rate > 0.0) || !learning_rate.is_finite() {
            return Err(Error::Config(format!(
                "learning rate must be positive and finite, got {learning_rate}"
            )));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::Config(format!(
                "momentum must lie in [0, 1), got {momentum}"
            )));
        }
        if !(weight_decay >= 0.0) || !weight_decay.is_finite() {
            return Err(Error::Config(format!(
                "weight decay must be non-negative and finite, got {weight_decay}"
            )));
        }
        Ok(Sgd {
            learning_rate,
            momentum,
            weight_decay,
            velocity: param_sizes.iter().map(|&n| vec![0.0; n]).collect(),
        })
    }

    /// One update over parallel slices of parameters and their gradients.
    pub fn step(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]]) -> Result<()> {
        if params.len() != self.velocity.len() || grads.len() != self.velocity.len() {
            return Err(Error::InvalidArgument(format!(
                "optimizer tracks {} tensors, got {} parameters and {} gradients",
                self.velocity.len(),
                params.len(),
                grads.len()
            )));
        }
        for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut self.velocity) {
            if p.len() != v.len() || g.len() != v.len() {
                return Err(Error::InvalidArgument(format!(
                    "parameter of {} values with gradient of {} (expected {})",
                    p.len(),
                    g.len(),
                    v.len()
                )));
            }
            for i in 0..v.len() {
                v[i] = self.momentum * v[i] + g[i];
                p[i] -= self.learning_rate * (v[i] + self.weight_decay * p[i]);
            }
        }
        Ok(())
    }
}

const NET_MAGIC: &[u8; 4] = b"KMNT";
const NET_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    net: NetSpec,
    embed_dim: usize,
    num_classes: usize,
    seed: u64,
    param_count: usize,
    /// SHA-256 of the little-endian parameter blob.
    checksum: String,
}

/// Writes magic, version, a length-prefixed JSON header, then the parameters
/// as little-endian f64s. The header carries a checksum of the blob.
pub fn save_net(path: &Path, net: &EmbeddingNet) -> Result<()> {
    let mut blob = Vec::with_capacity(net.param_count() * 8);
    for p in net.params() {
        for v in p.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    let checksum = hex::encode(Sha256::digest(&blob));
    let header = CheckpointHeader {
        net: net.spec.clone(),
        embed_dim: net.embed_dim,
        num_classes: net.num_classes,
        seed: net.seed,
        param_count: net.param_count(),
        checksum,
    };
    let header_json = serde_json::to_vec(&header)
        .map_err(|e| Error::Config(format!("could not encode checkpoint header: {e}")))?;

    let mut out = Vec::with_capacity(12 + header_json.len() + blob.len());
    out.extend_from_slice(NET_MAGIC);
    out.extend_from_slice(&NET_VERSION.to_le_bytes());
    out.extend_from_slice(&(header_json.len() as u32).to_le_bytes());
    out.extend_from_slice(&header_json);
    out.extend_from_slice(&blob);
    fs::write(path, out).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load_net(path: &Path) -> Result<EmbeddingNet> {
    let bytes = fs::read(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let fmt = |offset: u64, msg: String| Error::Format {
        path: path.to_path_buf(),
        offset,
        msg,
    };
    if bytes.len() < 12 {
        return Err(fmt(bytes.len() as u64, "file too short for a checkpoint header".to_string()));
    }
    if &bytes[0..4] != NET_MAGIC {
        return Err(fmt(0, "bad magic, expected KMNT".to_string()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != NET_VERSION {
        return Err(fmt(4, format!("unsupported version {version}")));
    }
    let header_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    if bytes.len() < 12 + header_len {
        return Err(fmt(12, format!("truncated header: wanted {header_len} bytes")));
    }
    let header: CheckpointHeader = serde_json::from_slice(&bytes[12..12 + header_len])
        .map_err(|e| fmt(12, format!("bad checkpoint header: {e}")))?;

    let blob = &bytes[12 + header_len..];
    if blob.len() != header.param_count * 8 {
        return Err(fmt(
            (12 + header_len) as u64,
            format!(
                "expected {} parameter bytes, found {}",
                header.param_count * 8,
                blob.len()
            ),
        ));
    }
    let checksum = hex::encode(Sha256::digest(blob));
    if checksum != header.checksum {
        return Err(fmt(
            (12 + header_len) as u64,
            "parameter checksum mismatch".to_string(),
        ));
    }

    let mut net = EmbeddingNet::build(header.net, header.embed_dim, header.num_classes, header.seed)?;
    if net.param_count() != header.param_count {
        return Err(fmt(
            12,
            format!(
                "architecture wants {} parameters but the file carries {}",
                net.param_count(),
                header.param_count
            ),
        ));
    }
    let mut at = 0;
    for p in net.params_mut() {
        for v in p.data_mut() {
            *v = f64::from_le_bytes(blob[at..at + 8].try_into().unwrap());
            at += 8;
        }
    }
    Ok(net)
}
