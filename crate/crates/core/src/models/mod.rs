//! Single-task and shared-backbone multi-task networks.
//!
//! A model is one backbone `E` followed by one affine head per task. In
//! multi mode the three heads (VA, expression, AU) read the same embedding,
//! so one backbone pass serves every task.

mod backbone;

use std::fmt;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Module, Tensor};
use candle_nn::{linear, Linear, VarBuilder, VarMap};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use backbone::{Backbone, ResNet50, TinyNet};

use crate::annotations::{AU_COUNT, EXPR_CLASSES};
use crate::error::{Error, Result};
use crate::images::{ImageBatch, Preprocess};
use crate::records::PredictionRecord;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Va,
    Expr,
    Au,
}

impl Task {
    pub const ALL: [Task; 3] = [Task::Va, Task::Expr, Task::Au];

    pub fn out_dim(self) -> usize {
        match self {
            Task::Va => 2,
            Task::Expr => EXPR_CLASSES,
            Task::Au => AU_COUNT,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Task::Va => "va",
            Task::Expr => "expr",
            Task::Au => "au",
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "va" => Ok(Task::Va),
            "expr" => Ok(Task::Expr),
            "au" => Ok(Task::Au),
            other => Err(Error::invalid(format!("unknown task {other:?} (expected va, expr or au)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    SingleVa,
    SingleExpr,
    SingleAu,
    #[default]
    Multi,
}

impl Mode {
    pub fn single(task: Task) -> Self {
        match task {
            Task::Va => Mode::SingleVa,
            Task::Expr => Mode::SingleExpr,
            Task::Au => Mode::SingleAu,
        }
    }

    pub fn tasks(self) -> &'static [Task] {
        match self {
            Mode::SingleVa => &[Task::Va],
            Mode::SingleExpr => &[Task::Expr],
            Mode::SingleAu => &[Task::Au],
            Mode::Multi => &Task::ALL,
        }
    }

    pub fn trains(self, task: Task) -> bool {
        self.tasks().contains(&task)
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::SingleVa => "single-va",
            Mode::SingleExpr => "single-expr",
            Mode::SingleAu => "single-au",
            Mode::Multi => "multi",
        })
    }
}

pub const TINY: &str = "tiny";
pub const RESNET50: &str = "resnet50-class";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneSpec {
    pub name: String,
    pub embedding_dim: usize,
    #[serde(default)]
    pub pretrained: bool,
    /// Safetensors file with backbone weights, used when `pretrained` is set.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weights: Option<PathBuf>,
}

impl BackboneSpec {
    pub fn tiny(embedding_dim: usize) -> Self {
        Self { name: TINY.into(), embedding_dim, pretrained: false, weights: None }
    }

    pub fn resnet50() -> Self {
        Self { name: RESNET50.into(), embedding_dim: ResNet50::FEATURES, pretrained: false, weights: None }
    }

    pub fn validate(&self) -> Result<()> {
        if self.embedding_dim == 0 {
            return Err(Error::invalid("embedding_dim must be positive"));
        }
        match self.name.as_str() {
            TINY => Ok(()),
            RESNET50 if self.embedding_dim != ResNet50::FEATURES => Err(Error::invalid(format!(
                "{RESNET50} produces {} features, not {}",
                ResNet50::FEATURES,
                self.embedding_dim
            ))),
            RESNET50 => Ok(()),
            other => Err(Error::UnknownBackbone(other.into())),
        }
    }
}

impl Default for BackboneSpec {
    fn default() -> Self {
        Self::resnet50()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadSpec {
    pub task: Task,
    pub out_dim: usize,
}

impl HeadSpec {
    pub fn for_task(task: Task) -> Self {
        Self { task, out_dim: task.out_dim() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelAssembly {
    pub mode: Mode,
    pub backbone: BackboneSpec,
    pub heads: Vec<HeadSpec>,
}

impl ModelAssembly {
    /// Backbone plus the canonical heads for `mode`.
    pub fn new(mode: Mode, backbone: BackboneSpec) -> Self {
        Self { mode, backbone, heads: mode.tasks().iter().map(|t| HeadSpec::for_task(*t)).collect() }
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        let tasks: Vec<Task> = self.heads.iter().map(|h| h.task).collect();
        if tasks != self.mode.tasks() {
            return Err(Error::invalid(format!(
                "{} mode needs heads {:?}, got {:?}",
                self.mode,
                self.mode.tasks(),
                tasks
            )));
        }
        for h in &self.heads {
            if h.out_dim != h.task.out_dim() {
                return Err(Error::invalid(format!(
                    "{} head must have {} outputs, got {}",
                    h.task,
                    h.task.out_dim(),
                    h.out_dim
                )));
            }
        }
        Ok(())
    }
}

/// Head outputs before probability normalization. VA is already squashed.
#[derive(Debug, Clone)]
pub struct RawOutputs {
    pub va: Option<Tensor>,
    pub expr_logits: Option<Tensor>,
    pub au_logits: Option<Tensor>,
}

impl RawOutputs {
    pub fn get(&self, task: Task) -> Option<&Tensor> {
        match task {
            Task::Va => self.va.as_ref(),
            Task::Expr => self.expr_logits.as_ref(),
            Task::Au => self.au_logits.as_ref(),
        }
    }
}

/// A built network and its parameters.
pub struct AffectModel {
    assembly: ModelAssembly,
    preprocess: Preprocess,
    varmap: VarMap,
    backbone: Backbone,
    heads: Vec<(Task, Linear)>,
    device: Device,
}

impl fmt::Debug for AffectModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("AffectModel")
            .field("assembly", &self.assembly)
            .field("preprocess", &self.preprocess)
            .field("parameters", &self.param_count())
            .finish()
    }
}

/// Builds a model with parameters drawn from a ChaCha8 stream seeded by `seed`.
pub fn build_model(assembly: &ModelAssembly, preprocess: &Preprocess, seed: u64) -> Result<AffectModel> {
    let mut model = AffectModel::build(assembly, preprocess, &Device::Cpu)?;
    model.reinitialize(seed)?;
    if assembly.backbone.pretrained {
        let path = assembly
            .backbone
            .weights
            .as_ref()
            .ok_or_else(|| Error::invalid("pretrained backbone requested but no weights file configured"))?;
        model.load_backbone(path)?;
    }
    Ok(model)
}

const WEIGHTS_FILE: &str = "model.safetensors";
const SIDECAR_FILE: &str = "model.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub assembly: ModelAssembly,
    pub preprocess: Preprocess,
}

impl AffectModel {
    fn build(assembly: &ModelAssembly, preprocess: &Preprocess, device: &Device) -> Result<Self> {
        assembly.validate()?;
        preprocess.validate()?;
        let varmap = VarMap::new();
        let vb = VarBuilder::from_varmap(&varmap, DType::F32, device);
        let spec = &assembly.backbone;
        let backbone = match spec.name.as_str() {
            TINY => Backbone::Tiny(TinyNet::new(vb.pp("backbone"), preprocess.resolution, spec.embedding_dim)?),
            RESNET50 => Backbone::ResNet50(ResNet50::new(vb.pp("backbone"), preprocess.resolution)?),
            other => return Err(Error::UnknownBackbone(other.into())),
        };
        let heads = assembly
            .heads
            .iter()
            .map(|h| Ok((h.task, linear(spec.embedding_dim, h.out_dim, vb.pp(format!("head_{}", h.task)))?)))
            .collect::<Result<_>>()?;
        Ok(Self {
            assembly: assembly.clone(),
            preprocess: preprocess.clone(),
            varmap,
            backbone,
            heads,
            device: device.clone(),
        })
    }

    /// Redraws every parameter from a seeded stream, in name order.
    /// Conv/linear weights: uniform, He bound in the backbone and
    /// `1/sqrt(fan_in)` in the heads. Biases and BN shifts: 0. BN scales: 1.
    fn reinitialize(&mut self, seed: u64) -> Result<()> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (name, var) in self.named_vars() {
            let dims = var.dims().to_vec();
            let n: usize = dims.iter().product();
            let values: Vec<f32> = if name.ends_with("running_mean") || name.ends_with("bias") {
                vec![0.0; n]
            } else if name.ends_with("running_var") || dims.len() == 1 {
                vec![1.0; n]
            } else {
                let fan_in: usize = dims[1..].iter().product();
                let bound =
                    if name.starts_with("head_") { 1.0 / (fan_in as f64).sqrt() } else { (6.0 / fan_in as f64).sqrt() };
                (0..n).map(|_| rng.random_range(-bound..bound) as f32).collect()
            };
            var.set(&Tensor::from_vec(values, dims, &self.device)?)?;
        }
        Ok(())
    }

    fn load_backbone(&mut self, path: &Path) -> Result<()> {
        let tensors = candle_core::safetensors::load(path, &self.device)?;
        for (name, var) in self.named_vars() {
            let Some(short) = name.strip_prefix("backbone.") else { continue };
            let t = tensors
                .get(&name)
                .or_else(|| tensors.get(short))
                .ok_or_else(|| Error::CheckpointMismatch(format!("{} has no tensor {name}", path.display())))?;
            var.set(&t.to_dtype(DType::F32)?).map_err(|e| Error::CheckpointMismatch(format!("{name}: {e}")))?;
        }
        Ok(())
    }

    /// Variables sorted by name.
    fn named_vars(&self) -> Vec<(String, candle_core::Var)> {
        let data = self.varmap.data().lock().expect("varmap lock");
        let mut vars: Vec<_> = data.iter().map(|(k, v)| (k.clone(), v.clone())).collect();
        vars.sort_by(|a, b| a.0.cmp(&b.0));
        vars
    }

    pub fn assembly(&self) -> &ModelAssembly {
        &self.assembly
    }

    pub fn preprocess(&self) -> &Preprocess {
        &self.preprocess
    }

    pub fn mode(&self) -> Mode {
        self.assembly.mode
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn trainable_vars(&self) -> Vec<candle_core::Var> {
        self.named_vars().into_iter().filter(|(n, _)| !n.contains("running_")).map(|(_, v)| v).collect()
    }

    /// Number of trainable scalars (batch-norm running statistics excluded).
    pub fn param_count(&self) -> usize {
        self.trainable_vars().iter().map(|v| v.elem_count()).sum()
    }

    fn check_input(&self, images: &Tensor) -> Result<()> {
        let r = self.preprocess.resolution;
        match images.dims() {
            [n, 3, h, w] if *n > 0 && *h == r && *w == r => Ok(()),
            dims => Err(Error::invalid(format!("expected an image batch of shape (N, 3, {r}, {r}), got {dims:?}"))),
        }
    }

    /// Backbone embedding `E(x)`, shape `(N, D)`.
    pub fn embed(&self, images: &Tensor, train: bool) -> Result<Tensor> {
        self.check_input(images)?;
        Ok(self.backbone.forward_t(images, train)?)
    }

    /// Applies the heads to an embedding.
    pub fn heads(&self, embedding: &Tensor) -> Result<RawOutputs> {
        let mut out = RawOutputs { va: None, expr_logits: None, au_logits: None };
        for (task, head) in &self.heads {
            let y = head.forward(embedding)?;
            match task {
                Task::Va => out.va = Some(y.tanh()?),
                Task::Expr => out.expr_logits = Some(y),
                Task::Au => out.au_logits = Some(y),
            }
        }
        Ok(out)
    }

    pub fn forward_t(&self, images: &Tensor, train: bool) -> Result<RawOutputs> {
        let emb = self.embed(images, train)?;
        self.heads(&emb)
    }

    /// Inference: softmax expression probabilities, sigmoid AU probabilities,
    /// VA in `[-1, 1]`.
    pub fn forward(&self, batch: &ImageBatch) -> Result<Vec<PredictionRecord>> {
        if batch.refs.len() != batch.tensor.dims().first().copied().unwrap_or(0) {
            return Err(Error::invalid("image batch references and tensor disagree"));
        }
        let raw = self.forward_t(&batch.tensor, false)?;
        let rows = |t: &Tensor| -> Result<Vec<Vec<f64>>> { Ok(t.to_dtype(DType::F64)?.to_vec2::<f64>()?) };
        let va = raw.va.as_ref().map(rows).transpose()?;
        let expr = raw
            .expr_logits
            .as_ref()
            .map(|t| candle_nn::ops::softmax_last_dim(&t.to_dtype(DType::F64)?).map_err(Error::from))
            .transpose()?
            .map(|t| rows(&t))
            .transpose()?;
        let au = raw
            .au_logits
            .as_ref()
            .map(|t| candle_nn::ops::sigmoid(&t.to_dtype(DType::F64)?).map_err(Error::from))
            .transpose()?
            .map(|t| rows(&t))
            .transpose()?;
        Ok(batch
            .refs
            .iter()
            .enumerate()
            .map(|(i, r)| PredictionRecord {
                image_ref: r.clone(),
                va: va.as_ref().map(|v| [v[i][0], v[i][1]]),
                expr_probs: expr.as_ref().map(|v| std::array::from_fn(|k| v[i][k])),
                au_probs: au.as_ref().map(|v| std::array::from_fn(|k| v[i][k])),
            })
            .collect())
    }

    /// Copies of every variable, for restoring later.
    pub fn snapshot(&self) -> Result<Vec<(String, Tensor)>> {
        self.named_vars().into_iter().map(|(n, v)| Ok((n, v.as_tensor().copy()?))).collect()
    }

    pub fn restore(&self, snapshot: &[(String, Tensor)]) -> Result<()> {
        let vars = self.named_vars();
        if vars.len() != snapshot.len() {
            return Err(Error::CheckpointMismatch("snapshot does not match model".into()));
        }
        for ((name, var), (sname, t)) in vars.iter().zip(snapshot) {
            if name != sname {
                return Err(Error::CheckpointMismatch(format!("snapshot has {sname}, model has {name}")));
            }
            var.set(t)?;
        }
        Ok(())
    }

    /// Writes `model.safetensors` and the `model.json` sidecar into `dir`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.varmap.save(dir.join(WEIGHTS_FILE))?;
        let meta = CheckpointMeta { assembly: self.assembly.clone(), preprocess: self.preprocess.clone() };
        let path = dir.join(SIDECAR_FILE);
        std::fs::write(&path, serde_json::to_string_pretty(&meta)?).map_err(|e| Error::io(&path, e))
    }

    /// Rebuilds a model from a checkpoint directory written by [`AffectModel::save`].
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let sidecar = dir.join(SIDECAR_FILE);
        let text = std::fs::read_to_string(&sidecar).map_err(|e| Error::io(&sidecar, e))?;
        let mut meta: CheckpointMeta = serde_json::from_str(&text)?;
        meta.assembly.backbone.pretrained = false;
        let model = Self::build(&meta.assembly, &meta.preprocess, &Device::Cpu)?;
        let weights = dir.join(WEIGHTS_FILE);
        let tensors = candle_core::safetensors::load(&weights, &model.device)?;
        let vars = model.named_vars();
        if tensors.len() != vars.len() {
            return Err(Error::CheckpointMismatch(format!(
                "{} holds {} tensors but the {} assembly has {}",
                weights.display(),
                tensors.len(),
                meta.assembly.mode,
                vars.len()
            )));
        }
        for (name, var) in vars {
            let t = tensors
                .get(&name)
                .ok_or_else(|| Error::CheckpointMismatch(format!("{} has no tensor {name}", weights.display())))?;
            if t.dims() != var.dims() {
                return Err(Error::CheckpointMismatch(format!(
                    "{name}: stored shape {:?}, assembly expects {:?}",
                    t.dims(),
                    var.dims()
                )));
            }
            var.set(t)?;
        }
        Ok(model)
    }
}
