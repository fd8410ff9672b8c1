//! Neural components: representation encoder, outcome model, and treatment
//! classifier, all small MLPs over f64 tensors.
//!
//! The outcome model factors as an encoder `Phi: R^100 -> R^64` (tanh after
//! every layer) followed by a head that consumes `[Phi(x); one_hot(t)]` and
//! predicts the outcome mean in R^2. The classifier reads `[x; y]` and
//! produces logits over the three treatments. Layer widths live in
//! [`ModelConfig`] and can be overridden; the defaults match the reference
//! experiment.
//!
//! Every forward pass exists twice: a direct form on plain tensors for
//! evaluation, and a taped form for training. Both call the same tensor
//! kernels, so their outputs agree bitwise.
//!
//! # Checkpoint layout
//!
//! Checkpoints are JSON: `{"format": "cmle-model", "version": 1, "kind":
//! "outcome" | "classifier", "blocks": [{"name", "shape", "data"}, ...]}`.
//! Block names are `encoder.<i>.w`, `encoder.<i>.b`, `head.<i>.w`, ... for
//! the outcome model and `mlp.<i>.w`, ... for the classifier, with row-major
//! `data`. Floats serialize via the shortest decimal form that parses back
//! to the same 64-bit value, so a save/load round trip is exact.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, NodeId, Tape, Tensor};
use crate::rng::Prng;
use crate::scm::{N_TREATMENTS, X_DIM, Y_DIM};
use rand::Rng;

/// Encoder output width (the representation dimension).
pub const PHI_DIM: usize = 64;

pub const CHECKPOINT_FORMAT: &str = "cmle-model";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("not a model checkpoint (format {got:?})")]
    Format { got: String },
    #[error("unsupported checkpoint version {got}, expected {want}")]
    Version { got: u32, want: u32 },
    #[error("checkpoint holds a {got:?} model, expected {want:?}")]
    Kind { got: String, want: String },
    #[error("checkpoint block {name:?} is missing or malformed")]
    Block { name: String },
    #[error("bad architecture: {0}")]
    Architecture(String),
    #[error("treatment {t} out of range 1..={max}")]
    InvalidTreatment { t: u8, max: usize },
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

/// Layer widths for the three networks. `encoder_widths` runs from the
/// covariate dimension to the representation dimension with tanh after every
/// layer; the other two end in a linear layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoder_widths: Vec<usize>,
    pub head_widths: Vec<usize>,
    pub classifier_widths: Vec<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            encoder_widths: vec![X_DIM, 128, PHI_DIM],
            head_widths: vec![PHI_DIM + N_TREATMENTS, 64, Y_DIM],
            classifier_widths: vec![X_DIM + Y_DIM, 128, 64, N_TREATMENTS],
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let chain = |name: &str, w: &[usize]| -> Result<(), ModelError> {
            if w.len() < 2 || w.iter().any(|&n| n == 0) {
                return Err(ModelError::Architecture(format!(
                    "{name} widths {w:?} need at least two non-zero entries"
                )));
            }
            Ok(())
        };
        chain("encoder", &self.encoder_widths)?;
        chain("head", &self.head_widths)?;
        chain("classifier", &self.classifier_widths)?;
        if self.encoder_widths[0] != X_DIM {
            return Err(ModelError::Architecture(format!(
                "encoder input {} != covariate dimension {X_DIM}",
                self.encoder_widths[0]
            )));
        }
        let phi = *self.encoder_widths.last().unwrap();
        if self.head_widths[0] != phi + N_TREATMENTS {
            return Err(ModelError::Architecture(format!(
                "head input {} != encoder output {phi} + {N_TREATMENTS}",
                self.head_widths[0]
            )));
        }
        if *self.head_widths.last().unwrap() != Y_DIM {
            return Err(ModelError::Architecture(format!(
                "head output {} != outcome dimension {Y_DIM}",
                self.head_widths.last().unwrap()
            )));
        }
        if self.classifier_widths[0] != X_DIM + Y_DIM {
            return Err(ModelError::Architecture(format!(
                "classifier input {} != {}",
                self.classifier_widths[0],
                X_DIM + Y_DIM
            )));
        }
        if *self.classifier_widths.last().unwrap() != N_TREATMENTS {
            return Err(ModelError::Architecture(format!(
                "classifier output {} != {N_TREATMENTS} treatments",
                self.classifier_widths.last().unwrap()
            )));
        }
        Ok(())
    }
}

/// One fully connected layer, `w` stored `[fan_in, fan_out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    pub w: Tensor,
    pub b: Tensor,
}

/// A stack of dense layers with tanh between them. `tanh_output` also applies
/// tanh after the last layer (the encoder does; heads stay linear).
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    layers: Vec<Dense>,
    tanh_output: bool,
}

/// Tape ids of one registered MLP, in `w0, b0, w1, b1, ...` order.
#[derive(Clone, Debug)]
pub struct MlpNodes {
    layers: Vec<(NodeId, NodeId)>,
}

impl MlpNodes {
    pub fn ids(&self) -> Vec<NodeId> {
        self.layers
            .iter()
            .flat_map(|&(w, b)| [w, b])
            .collect()
    }

    /// Rebuilds the layer pairing from a flat list produced by [`MlpNodes::ids`].
    pub fn from_ids(ids: &[NodeId]) -> Self {
        assert!(ids.len() % 2 == 0, "ids come in (w, b) pairs");
        Self {
            layers: ids.chunks(2).map(|c| (c[0], c[1])).collect(),
        }
    }
}

impl Mlp {
    /// Fresh parameters: weights uniform in `±1/sqrt(fan_in)`, biases zero.
    /// Weight entries are drawn row-major, layer by layer.
    pub fn init(widths: &[usize], tanh_output: bool, rng: &mut Prng) -> Self {
        let layers = widths
            .windows(2)
            .map(|io| {
                let (fan_in, fan_out) = (io[0], io[1]);
                let bound = 1.0 / (fan_in as f64).sqrt();
                let data = (0..fan_in * fan_out)
                    .map(|_| rng.random_range(-bound..bound))
                    .collect();
                Dense {
                    w: Tensor::matrix(fan_in, fan_out, data).expect("sized above"),
                    b: Tensor::zeros(&[fan_out]),
                }
            })
            .collect();
        Self {
            layers,
            tanh_output,
        }
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn widths(&self) -> Vec<usize> {
        let mut w: Vec<usize> = self.layers.iter().map(|l| l.w.shape()[0]).collect();
        if let Some(last) = self.layers.last() {
            w.push(last.w.shape()[1]);
        }
        w
    }

    pub fn n_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.w.numel() + l.b.numel())
            .sum()
    }

    /// Parameter tensors in the same order as [`MlpNodes::ids`].
    pub fn param_tensors(&self) -> Vec<&Tensor> {
        self.layers.iter().flat_map(|l| [&l.w, &l.b]).collect()
    }

    pub fn param_tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.w, &mut l.b])
            .collect()
    }

    /// Direct forward pass on a batch `[n, fan_in]`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor, AutodiffError> {
        // PROBE: relu hidden activations.
        let relu = std::env::var("PROBE_RELU").is_ok();
        let mut h = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            h = h.matmul(&layer.w)?.add_bias(&layer.b)?;
            if i + 1 < self.layers.len() {
                h = if relu { h.map(|v| v.max(0.0)) } else { h.map(f64::tanh) };
            } else if self.tanh_output {
                h = h.map(f64::tanh);
            }
        }
        Ok(h)
    }

    /// Registers parameters as trainable tape nodes.
    pub fn register(&self, tape: &mut Tape) -> MlpNodes {
        self.register_with(tape, true)
    }

    /// Registers parameters as constants: values identical, gradients absent.
    pub fn register_frozen(&self, tape: &mut Tape) -> MlpNodes {
        self.register_with(tape, false)
    }

    fn register_with(&self, tape: &mut Tape, trainable: bool) -> MlpNodes {
        let layers = self
            .layers
            .iter()
            .map(|l| {
                if trainable {
                    (tape.param(l.w.clone()), tape.param(l.b.clone()))
                } else {
                    (tape.constant(l.w.clone()), tape.constant(l.b.clone()))
                }
            })
            .collect();
        MlpNodes { layers }
    }

    /// Taped forward pass; mirrors [`Mlp::forward`] op for op.
    pub fn tape_forward(
        &self,
        tape: &mut Tape,
        nodes: &MlpNodes,
        x: NodeId,
    ) -> Result<NodeId, AutodiffError> {
        // PROBE: relu hidden activations.
        let relu = std::env::var("PROBE_RELU").is_ok();
        let mut h = x;
        for (i, &(w, b)) in nodes.layers.iter().enumerate() {
            h = tape.matmul(h, w)?;
            h = tape.add_bias(h, b)?;
            if i + 1 < nodes.layers.len() {
                h = if relu { tape.relu(h)? } else { tape.tanh(h)? };
            } else if self.tanh_output {
                h = tape.tanh(h)?;
            }
        }
        Ok(h)
    }
}

/// One-hot rows for 1-based treatment labels.
pub fn one_hot(ts: &[u8], classes: usize) -> Result<Tensor, ModelError> {
    let mut out = Tensor::zeros(&[ts.len(), classes]);
    for (i, &t) in ts.iter().enumerate() {
        if t == 0 || t as usize > classes {
            return Err(ModelError::InvalidTreatment { t, max: classes });
        }
        out.data_mut()[i * classes + (t as usize - 1)] = 1.0;
    }
    Ok(out)
}

// ── Outcome model ────────────────────────────────────────────────────────

/// Output calibration fitted on training targets: the head's linear output
/// `v` maps to the predicted mean through `mu_d = sinh(std_d * v_d + mean_d)`.
///
/// Training standardizes targets as `u = (asinh(y) - mean) / std`, which
/// tames the heavy-tailed outcome (the exponential treatment term spans
/// three orders of magnitude) while staying linear near zero and invertible
/// everywhere. The calibration is the exact inverse of that transform, so a
/// calibrated model predicts raw-scale outcomes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OutputCalibration {
    pub mean: [f64; Y_DIM],
    pub std: [f64; Y_DIM],
}

impl OutputCalibration {
    /// Maps head outputs `[n, 2]` to raw-scale means.
    fn apply(&self, v: &Tensor) -> Result<Tensor, AutodiffError> {
        let (n, d) = v.dims2("calibration")?;
        let mut out = v.clone();
        for i in 0..n {
            for j in 0..d {
                let z = self.std[j] * v.data()[i * d + j] + self.mean[j];
                out.data_mut()[i * d + j] = z.sinh();
            }
        }
        Ok(out)
    }

    /// Taped form of [`OutputCalibration::apply`]:
    /// `sinh(z) = (exp(z) - exp(-z)) / 2` with `z = v * diag(std) + mean`.
    fn tape_apply(&self, tape: &mut Tape, v: NodeId) -> Result<NodeId, AutodiffError> {
        let mut diag = Tensor::zeros(&[Y_DIM, Y_DIM]);
        for d in 0..Y_DIM {
            diag.data_mut()[d * Y_DIM + d] = self.std[d];
        }
        let diag = tape.constant(diag);
        let mean = tape.constant(Tensor::vector(self.mean.to_vec()));
        let z = tape.matmul(v, diag)?;
        let z = tape.add_bias(z, mean)?;
        let pos = tape.exp(z)?;
        let minus_z = tape.scale(z, -1.0)?;
        let neg = tape.exp(minus_z)?;
        let diff = tape.sub(pos, neg)?;
        tape.scale(diff, 0.5)
    }
}

/// Encoder plus outcome head, optionally with an output calibration that
/// maps the head's output into raw outcome units.
#[derive(Clone, Debug, PartialEq)]
pub struct OutcomeModel {
    pub encoder: Mlp,
    pub head: Mlp,
    pub calibration: Option<OutputCalibration>,
}

/// Tape ids for a registered outcome model.
#[derive(Clone, Debug)]
pub struct OutcomeNodes {
    pub encoder: MlpNodes,
    pub head: MlpNodes,
}

impl OutcomeNodes {
    pub fn ids(&self) -> Vec<NodeId> {
        let mut ids = self.encoder.ids();
        ids.extend(self.head.ids());
        ids
    }

    /// Rebuilds the grouping from a flat list produced by [`OutcomeNodes::ids`].
    pub fn from_ids(model: &OutcomeModel, ids: &[NodeId]) -> Self {
        let split = model.encoder.layers().len() * 2;
        Self {
            encoder: MlpNodes::from_ids(&ids[..split]),
            head: MlpNodes::from_ids(&ids[split..]),
        }
    }
}

impl OutcomeModel {
    /// Draws the encoder's weights first, then the head's.
    pub fn init(config: &ModelConfig, rng: &mut Prng) -> Result<Self, ModelError> {
        config.validate()?;
        // PROBE: linear encoder output.
        let tanh_out = std::env::var("PROBE_LINEAR_PHI").is_err();
        Ok(Self {
            encoder: Mlp::init(&config.encoder_widths, tanh_out, rng),
            head: Mlp::init(&config.head_widths, false, rng),
            calibration: None,
        })
    }

    pub fn n_params(&self) -> usize {
        self.encoder.n_params() + self.head.n_params()
    }

    /// Parameter tensors in the same order as [`OutcomeNodes::ids`].
    pub fn param_tensors(&self) -> Vec<&Tensor> {
        let mut v = self.encoder.param_tensors();
        v.extend(self.head.param_tensors());
        v
    }

    pub fn param_tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = self.encoder.param_tensors_mut();
        v.extend(self.head.param_tensors_mut());
        v
    }

    /// The representation `Phi(x)` for a batch `[n, 100]`.
    pub fn encode(&self, x: &Tensor) -> Result<Tensor, ModelError> {
        Ok(self.encoder.forward(x)?)
    }

    /// Predicted outcome means for a batch under the given treatments.
    pub fn outcome_forward(&self, x: &Tensor, ts: &[u8]) -> Result<Tensor, ModelError> {
        let phi = self.encoder.forward(x)?;
        let t = one_hot(ts, N_TREATMENTS)?;
        let v = self.head.forward(&phi.concat_cols(&t)?)?;
        match &self.calibration {
            Some(c) => Ok(c.apply(&v)?),
            None => Ok(v),
        }
    }

    /// Per-example squared-error losses `‖y_i − μ_i‖²` (length-n vector).
    pub fn outcome_nll(&self, x: &Tensor, ts: &[u8], y: &Tensor) -> Result<Vec<f64>, ModelError> {
        let mu = self.outcome_forward(x, ts)?;
        let diff = y.sub(&mu)?;
        let (n, _) = diff.dims2("outcome_nll")?;
        Ok((0..n)
            .map(|i| diff.row(i).iter().map(|v| v * v).sum())
            .collect())
    }

    pub fn register(&self, tape: &mut Tape) -> OutcomeNodes {
        OutcomeNodes {
            encoder: self.encoder.register(tape),
            head: self.head.register(tape),
        }
    }

    pub fn register_frozen(&self, tape: &mut Tape) -> OutcomeNodes {
        OutcomeNodes {
            encoder: self.encoder.register_frozen(tape),
            head: self.head.register_frozen(tape),
        }
    }

    /// Taped forward pass returning the representation and the predicted
    /// mean. `t_onehot` must already be a `[n, 3]` node.
    pub fn tape_forward(
        &self,
        tape: &mut Tape,
        nodes: &OutcomeNodes,
        x: NodeId,
        t_onehot: NodeId,
    ) -> Result<(NodeId, NodeId), AutodiffError> {
        let phi = self.encoder.tape_forward(tape, &nodes.encoder, x)?;
        let joined = tape.concat(phi, t_onehot)?;
        let mut mu = self.head.tape_forward(tape, &nodes.head, joined)?;
        if let Some(c) = &self.calibration {
            mu = c.tape_apply(tape, mu)?;
        }
        Ok((phi, mu))
    }
}

// ── Treatment classifier ─────────────────────────────────────────────────

/// Posterior over treatments given covariates and outcome.
#[derive(Clone, Debug, PartialEq)]
pub struct TreatmentClassifier {
    pub mlp: Mlp,
}

impl TreatmentClassifier {
    pub fn init(config: &ModelConfig, rng: &mut Prng) -> Result<Self, ModelError> {
        config.validate()?;
        Ok(Self {
            mlp: Mlp::init(&config.classifier_widths, false, rng),
        })
    }

    pub fn n_params(&self) -> usize {
        self.mlp.n_params()
    }

    pub fn param_tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.mlp.param_tensors_mut()
    }

    /// Raw logits over treatments for a batch.
    pub fn logits(&self, x: &Tensor, y: &Tensor) -> Result<Tensor, ModelError> {
        Ok(self.mlp.forward(&x.concat_cols(y)?)?)
    }

    /// Softmax posterior `[n, 3]`.
    pub fn posterior(&self, x: &Tensor, y: &Tensor) -> Result<Tensor, ModelError> {
        Ok(self.logits(x, y)?.softmax_rows()?)
    }

    /// `log p(T = t_i | x_i, y_i)` per example; `J_φ` is the negation.
    pub fn classifier_logprob(
        &self,
        x: &Tensor,
        y: &Tensor,
        ts: &[u8],
    ) -> Result<Vec<f64>, ModelError> {
        let logp = self.logits(x, y)?.log_softmax_rows()?;
        ts.iter()
            .enumerate()
            .map(|(i, &t)| {
                if t == 0 || t as usize > N_TREATMENTS {
                    return Err(ModelError::InvalidTreatment {
                        t,
                        max: N_TREATMENTS,
                    });
                }
                Ok(logp.row(i)[t as usize - 1])
            })
            .collect()
    }

    pub fn register(&self, tape: &mut Tape) -> MlpNodes {
        self.mlp.register(tape)
    }

    pub fn register_frozen(&self, tape: &mut Tape) -> MlpNodes {
        self.mlp.register_frozen(tape)
    }

    /// Taped logits for `[x; y]` nodes.
    pub fn tape_logits(
        &self,
        tape: &mut Tape,
        nodes: &MlpNodes,
        x: NodeId,
        y: NodeId,
    ) -> Result<NodeId, AutodiffError> {
        let joined = tape.concat(x, y)?;
        self.mlp.tape_forward(tape, nodes, joined)
    }
}

// ── Checkpoints ──────────────────────────────────────────────────────────

#[derive(Serialize, Deserialize)]
struct Block {
    name: String,
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    format: String,
    version: u32,
    kind: String,
    blocks: Vec<Block>,
}

fn mlp_blocks(prefix: &str, mlp: &Mlp) -> Vec<Block> {
    mlp.layers
        .iter()
        .enumerate()
        .flat_map(|(i, l)| {
            [
                Block {
                    name: format!("{prefix}.{i}.w"),
                    shape: l.w.shape().to_vec(),
                    data: l.w.data().to_vec(),
                },
                Block {
                    name: format!("{prefix}.{i}.b"),
                    shape: l.b.shape().to_vec(),
                    data: l.b.data().to_vec(),
                },
            ]
        })
        .collect()
}

fn mlp_from_blocks(
    prefix: &str,
    blocks: &[Block],
    tanh_output: bool,
) -> Result<Mlp, ModelError> {
    let mut layers = Vec::new();
    for i in 0.. {
        let find = |suffix: &str| -> Option<&Block> {
            let name = format!("{prefix}.{i}.{suffix}");
            blocks.iter().find(|b| b.name == name)
        };
        let (Some(wb), Some(bb)) = (find("w"), find("b")) else {
            break;
        };
        let bad = |which: &Block| ModelError::Block {
            name: which.name.clone(),
        };
        let w = Tensor::new(wb.shape.clone(), wb.data.clone()).map_err(|_| bad(wb))?;
        let b = Tensor::new(bb.shape.clone(), bb.data.clone()).map_err(|_| bad(bb))?;
        if w.shape().len() != 2 || b.shape().len() != 1 || w.shape()[1] != b.shape()[0] {
            return Err(bad(wb));
        }
        if let Some(prev) = layers.last() {
            let prev: &Dense = prev;
            if prev.w.shape()[1] != w.shape()[0] {
                return Err(bad(wb));
            }
        }
        layers.push(Dense { w, b });
    }
    if layers.is_empty() {
        return Err(ModelError::Block {
            name: format!("{prefix}.0.w"),
        });
    }
    Ok(Mlp {
        layers,
        tanh_output,
    })
}

fn write_checkpoint(path: &Path, kind: &str, blocks: Vec<Block>) -> Result<(), ModelError> {
    let file = CheckpointFile {
        format: CHECKPOINT_FORMAT.to_string(),
        version: CHECKPOINT_VERSION,
        kind: kind.to_string(),
        blocks,
    };
    fs::write(path, serde_json::to_string(&file)?)?;
    Ok(())
}

fn read_checkpoint(path: &Path, kind: &str) -> Result<CheckpointFile, ModelError> {
    let file: CheckpointFile = serde_json::from_str(&fs::read_to_string(path)?)?;
    if file.format != CHECKPOINT_FORMAT {
        return Err(ModelError::Format { got: file.format });
    }
    if file.version != CHECKPOINT_VERSION {
        return Err(ModelError::Version {
            got: file.version,
            want: CHECKPOINT_VERSION,
        });
    }
    if file.kind != kind {
        return Err(ModelError::Kind {
            got: file.kind,
            want: kind.to_string(),
        });
    }
    Ok(file)
}

impl OutcomeModel {
    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        let mut blocks = mlp_blocks("encoder", &self.encoder);
        blocks.extend(mlp_blocks("head", &self.head));
        if let Some(c) = &self.calibration {
            blocks.push(Block {
                name: "calibration.mean".to_string(),
                shape: vec![Y_DIM],
                data: c.mean.to_vec(),
            });
            blocks.push(Block {
                name: "calibration.std".to_string(),
                shape: vec![Y_DIM],
                data: c.std.to_vec(),
            });
        }
        write_checkpoint(path, "outcome", blocks)
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        let file = read_checkpoint(path, "outcome")?;
        let vector2 = |name: &str| -> Result<Option<[f64; Y_DIM]>, ModelError> {
            match file.blocks.iter().find(|b| b.name == name) {
                None => Ok(None),
                Some(b) if b.shape == [Y_DIM] && b.data.len() == Y_DIM => {
                    Ok(Some([b.data[0], b.data[1]]))
                }
                Some(b) => Err(ModelError::Block {
                    name: b.name.clone(),
                }),
            }
        };
        let calibration = match (vector2("calibration.mean")?, vector2("calibration.std")?) {
            (Some(mean), Some(std)) => Some(OutputCalibration { mean, std }),
            (None, None) => None,
            _ => {
                return Err(ModelError::Block {
                    name: "calibration".to_string(),
                })
            }
        };
        Ok(Self {
            encoder: mlp_from_blocks("encoder", &file.blocks, true)?,
            head: mlp_from_blocks("head", &file.blocks, false)?,
            calibration,
        })
    }
}

impl TreatmentClassifier {
    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        write_checkpoint(path, "classifier", mlp_blocks("mlp", &self.mlp))
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        let file = read_checkpoint(path, "classifier")?;
        Ok(Self {
            mlp: mlp_from_blocks("mlp", &file.blocks, false)?,
        })
    }
}
