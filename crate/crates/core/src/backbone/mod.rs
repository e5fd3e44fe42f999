//! Denoiser abstraction: named attention-bearing blocks, per-block
//! conditioning, feature hooks, plus the toy implementation used by every
//! test in the repo.

pub mod attention;
pub mod codec;
pub mod scheduler;
pub mod text;
pub mod toy;

use std::collections::BTreeMap;
use std::sync::Arc;

use ndarray::{Array1, Array2, Array3};

use crate::error::{Error, Result};
use crate::graph::{NodeId, Tape};
use crate::lora::LoraAdapter;

pub use attention::{attention_forward, AttentionLayer};
pub use codec::LatentCodec;
pub use scheduler::{DdimSampler, SchedulerState};
pub use text::ToyTextEncoder;
pub use toy::{ToyBackbone, ToyConfig};

/// Which stage of the UNet a block belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Down,
    Mid,
    Up,
}

/// A named attention-bearing block. `attention_layers` holds the adapter
/// target identifiers inside the block (one per projection matrix).
#[derive(Debug, Clone)]
pub struct BlockSpec {
    pub name: String,
    pub attention_layers: Vec<String>,
    pub stage: Stage,
}

impl BlockSpec {
    /// True when `layer` belongs to this block (layer ids are
    /// `<block>.<path>`).
    pub fn owns_layer(&self, layer: &str) -> bool {
        layer
            .strip_prefix(self.name.as_str())
            .is_some_and(|rest| rest.starts_with('.'))
    }
}

/// Text-condition embeddings routed per block.
pub type CondMap = BTreeMap<String, Array1<f64>>;

/// Builds a cond map that routes one embedding to every block.
pub fn uniform_cond(blocks: &[BlockSpec], embedding: &Array1<f64>) -> CondMap {
    blocks
        .iter()
        .map(|b| (b.name.clone(), embedding.clone()))
        .collect()
}

/// One denoiser invocation: noised latent, timestep, per-block conditioning.
#[derive(Debug, Clone)]
pub struct DenoiserInput {
    pub z_t: Array3<f64>,
    pub t: usize,
    pub cond: CondMap,
}

/// Auxiliary spatial conditioning branch kinds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum ControlBranchKind {
    /// Low-passed RGB guidance.
    Tile,
    /// Edge-map guidance.
    Canny,
}

/// Precomputed additive token biases, one per resolution level of the model.
#[derive(Debug, Clone)]
pub struct ControlBias {
    pub branch: ControlBranchKind,
    /// `biases[level]` is an `(tokens x channels)` matrix added at the entry
    /// of that resolution level (0 = full latent resolution).
    pub biases: Vec<Array2<f64>>,
}

/// Hook invoked with a block name and a matrix observed during the forward
/// pass.
pub type FeatureHook<'a> = &'a mut dyn FnMut(&str, &Array2<f64>);

/// Per-call options for a denoise pass.
pub struct DenoiseOptions<'a> {
    pub controls: &'a [ControlBias],
    /// Receives each block's self-attention output feature.
    pub feature_hook: Option<FeatureHook<'a>>,
    /// Receives each block's post-softmax attention probabilities.
    pub prob_hook: Option<FeatureHook<'a>>,
}

impl<'a> DenoiseOptions<'a> {
    pub fn none() -> Self {
        DenoiseOptions {
            controls: &[],
            feature_hook: None,
            prob_hook: None,
        }
    }

    pub fn with_controls(controls: &'a [ControlBias]) -> Self {
        DenoiseOptions {
            controls,
            feature_hook: None,
            prob_hook: None,
        }
    }
}

/// A latent diffusion denoiser exposing named blocks, per-block conditioning
/// and feature hooks. Implementations are immutable after construction and
/// safe to share across threads for read-only inference.
pub trait BlockedDenoiser: Send + Sync {
    fn name(&self) -> &str;

    /// Blocks in canonical order.
    fn blocks(&self) -> &[BlockSpec];

    /// Total diffusion steps the model was built for.
    fn steps(&self) -> usize;

    /// Latent channel count.
    fn latent_channels(&self) -> usize;

    /// Conditioning embedding width.
    fn cond_dim(&self) -> usize;

    /// Adapter target layer id -> (d_out, d_in).
    fn layer_dims(&self) -> BTreeMap<String, (usize, usize)>;

    /// Predicts the noise component of `z_t`. Pure: identical inputs give
    /// bit-identical outputs.
    fn denoise(
        &self,
        input: &DenoiserInput,
        adapter: Option<&LoraAdapter>,
        opts: &mut DenoiseOptions,
    ) -> Result<Array3<f64>>;

    /// Builds the additive bias stack for a control branch from a raw
    /// control image `(channels, H, W)`.
    fn control_bias(
        &self,
        branch: ControlBranchKind,
        channels: &Array3<f64>,
    ) -> Result<ControlBias>;
}

/// Adapter matrices lifted onto a tape, so losses can differentiate through
/// them. `entries` maps layer id -> (A node, B node).
pub struct AdapterVars {
    pub entries: BTreeMap<String, (NodeId, NodeId)>,
    pub scale: f64,
}

impl AdapterVars {
    /// Pushes every adapter entry onto the tape. `trainable` decides whether
    /// the matrices are gradient leaves or constants.
    pub fn from_adapter(tape: &mut Tape, adapter: &LoraAdapter, trainable: bool) -> Self {
        let mut entries = BTreeMap::new();
        for (key, entry) in adapter.entries() {
            let (a, b) = if trainable {
                (tape.var(entry.a.clone()), tape.var(entry.b.clone()))
            } else {
                (tape.constant(entry.a.clone()), tape.constant(entry.b.clone()))
            };
            entries.insert(key.clone(), (a, b));
        }
        AdapterVars {
            entries,
            scale: adapter.scale(),
        }
    }
}

/// Denoiser that can run its forward pass on a gradient tape. The toy
/// backbone implements this; real-model adapters typically cannot and only
/// offer the plain [`BlockedDenoiser`] surface.
pub trait DifferentiableDenoiser: BlockedDenoiser {
    fn denoise_graph(
        &self,
        tape: &mut Tape,
        input: &DenoiserInput,
        adapter: Option<&AdapterVars>,
        opts: &mut DenoiseOptions,
    ) -> Result<NodeId>;
}

/// Validates a denoiser input against a model: cond covers every block and
/// embeddings have the right width.
pub fn validate_input(model: &dyn BlockedDenoiser, input: &DenoiserInput) -> Result<()> {
    if input.t >= model.steps() {
        return Err(Error::InvalidArgument(format!(
            "timestep {} out of range [0, {})",
            input.t,
            model.steps()
        )));
    }
    for block in model.blocks() {
        match input.cond.get(&block.name) {
            None => {
                return Err(Error::InvalidArgument(format!(
                    "cond map missing block {:?}",
                    block.name
                )))
            }
            Some(e) if e.len() != model.cond_dim() => {
                return Err(Error::shape(
                    format!("cond[{}]", block.name),
                    format!("{}", model.cond_dim()),
                    format!("{}", e.len()),
                ));
            }
            _ => {}
        }
    }
    Ok(())
}

/// Registry settings for [`create_backbone`].
#[derive(Debug, Clone)]
pub struct BackboneSettings {
    pub seed: u64,
    pub steps: usize,
    pub image_size: usize,
    pub cond_dim: usize,
}

impl Default for BackboneSettings {
    fn default() -> Self {
        BackboneSettings {
            seed: 7,
            steps: 50,
            image_size: 64,
            cond_dim: 16,
        }
    }
}

/// Backbone registry keyed by string. `"toy"` is the only runnable entry;
/// `"sdxl-adapter"` documents the interface contract for a real model and
/// fails on use because no weights ship with the repo.
pub fn create_backbone(kind: &str, settings: &BackboneSettings) -> Result<Arc<dyn BlockedDenoiser>> {
    match kind {
        "toy" => Ok(Arc::new(ToyBackbone::new(ToyConfig {
            seed: settings.seed,
            steps: settings.steps,
            image_size: settings.image_size,
            cond_dim: settings.cond_dim,
            ..ToyConfig::default()
        })?)),
        "sdxl-adapter" => Ok(Arc::new(SdxlAdapterStub::new())),
        other => Err(Error::BackendUnavailable {
            name: other.to_string(),
            detail: "known backbones: toy, sdxl-adapter".into(),
        }),
    }
}

/// Canonical block names shared by the toy backbone and the stub adapter;
/// mirrors the 11 attention-bearing positions of an SDXL-class UNet.
pub fn canonical_block_names() -> Vec<&'static str> {
    vec![
        "down.1.0", "down.1.1", "down.2.0", "down.2.1", "mid", "up.0.0", "up.0.1", "up.0.2",
        "up.1.0", "up.1.1", "up.1.2",
    ]
}

fn stage_of(name: &str) -> Stage {
    if name.starts_with("down") {
        Stage::Down
    } else if name.starts_with("up") {
        Stage::Up
    } else {
        Stage::Mid
    }
}

/// Builds the canonical block specs with the four projection targets per
/// block.
pub fn canonical_blocks() -> Vec<BlockSpec> {
    canonical_block_names()
        .into_iter()
        .map(|name| BlockSpec {
            name: name.to_string(),
            attention_layers: ["q", "k", "v", "o"]
                .iter()
                .map(|p| format!("{name}.attn.{p}"))
                .collect(),
            stage: stage_of(name),
        })
        .collect()
}

/// Interface stub for an SDXL-class backbone. Construction succeeds so the
/// registry and checkpoint manifests can name it; any compute call reports
/// the backend as unavailable. A real integration implements
/// [`BlockedDenoiser`] with these block names and layer dims against an
/// actual runtime.
pub struct SdxlAdapterStub {
    blocks: Vec<BlockSpec>,
}

impl SdxlAdapterStub {
    pub fn new() -> Self {
        SdxlAdapterStub {
            blocks: canonical_blocks(),
        }
    }

    fn unavailable(what: &str) -> Error {
        Error::BackendUnavailable {
            name: "sdxl-adapter".into(),
            detail: format!("{what}: no weights ship with this repo"),
        }
    }
}

impl Default for SdxlAdapterStub {
    fn default() -> Self {
        Self::new()
    }
}

impl BlockedDenoiser for SdxlAdapterStub {
    fn name(&self) -> &str {
        "sdxl-adapter"
    }

    fn blocks(&self) -> &[BlockSpec] {
        &self.blocks
    }

    fn steps(&self) -> usize {
        50
    }

    fn latent_channels(&self) -> usize {
        4
    }

    fn cond_dim(&self) -> usize {
        2048
    }

    fn layer_dims(&self) -> BTreeMap<String, (usize, usize)> {
        // documented contract dims for an SDXL-class UNet's block channels
        let width = |name: &str| -> usize {
            if name.starts_with("down.1") || name.starts_with("up.1") {
                640
            } else {
                1280
            }
        };
        let mut dims = BTreeMap::new();
        for block in &self.blocks {
            let c = width(&block.name);
            for layer in &block.attention_layers {
                dims.insert(layer.clone(), (c, c));
            }
        }
        dims
    }

    fn denoise(
        &self,
        _input: &DenoiserInput,
        _adapter: Option<&LoraAdapter>,
        _opts: &mut DenoiseOptions,
    ) -> Result<Array3<f64>> {
        Err(Self::unavailable("denoise"))
    }

    fn control_bias(
        &self,
        _branch: ControlBranchKind,
        _channels: &Array3<f64>,
    ) -> Result<ControlBias> {
        Err(Self::unavailable("control_bias"))
    }
}
