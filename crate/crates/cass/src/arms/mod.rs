//! Model registry and the two-arm pairing.
//!
//! An [`Arm`] is one branch of the siamese pair: a small CNN or a small
//! ViT-style encoder ending in a logit head of configurable width. Arms are
//! built from an [`ArmSpec`] plus a seed, which fully determines the initial
//! parameters. Pairs never share parameter storage; each arm owns its own
//! [`ParamStore`], so optimizers, averaging, and checkpoints stay
//! per-arm by construction.

mod checkpoint;
mod micro_cnn;
mod resnet;
mod vit;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta};
pub use micro_cnn::MicroCnn;
pub use resnet::ResNetLike;
pub use vit::VitTiny;

use std::path::PathBuf;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CassError, Result};
use crate::loss::{ArmTag, EmbeddingBatch};
use crate::nn::ParamStore;
use crate::tensor::Tensor;

/// Error text raised when a forward pass yields non-finite logits.
pub(crate) const NON_FINITE_LOGITS_MSG: &str = "arm produced non-finite logits";

/// Remaps the non-finite-logits contract error to an abort. Training loops
/// route forward errors through this so a numeric blow-up mid-run counts as
/// divergence (recoverable, record preserved) rather than a caller bug.
pub(crate) fn divergence_abort(err: CassError, context: &str) -> CassError {
    match err {
        CassError::Contract(msg) if msg == NON_FINITE_LOGITS_MSG => {
            CassError::Aborted(format!("{msg} {context}"))
        }
        other => other,
    }
}

/// Architecture family of an arm.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Cnn,
    Vit,
}

/// How an arm's parameters start out.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum InitKind {
    #[default]
    Random,
    PretrainedFile {
        path: PathBuf,
    },
}

/// Everything needed to build one arm.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmSpec {
    pub family: Family,
    pub variant: String,
    pub head_dim: usize,
    #[serde(default)]
    pub init: InitKind,
    /// Expected input image size; fixes the ViT token count at build time.
    #[serde(default = "default_input_hw")]
    pub input_hw: (usize, usize),
}

fn default_input_hw() -> (usize, usize) {
    (32, 32)
}

impl ArmSpec {
    pub fn new(family: Family, variant: &str, head_dim: usize) -> Self {
        ArmSpec {
            family,
            variant: variant.to_string(),
            head_dim,
            init: InitKind::Random,
            input_hw: default_input_hw(),
        }
    }

    pub fn with_input_hw(mut self, h: usize, w: usize) -> Self {
        self.input_hw = (h, w);
        self
    }

    pub fn arm_tag(&self) -> ArmTag {
        match self.family {
            Family::Cnn => ArmTag::Cnn,
            Family::Vit => ArmTag::Transformer,
        }
    }
}

/// Which taps [`Arm::forward`] should populate.
#[derive(Debug, Clone, Copy, Default)]
pub struct TapFlags {
    pub feature_maps: bool,
    pub attention: bool,
}

impl TapFlags {
    pub fn none() -> Self {
        TapFlags::default()
    }

    pub fn all() -> Self {
        TapFlags {
            feature_maps: true,
            attention: true,
        }
    }
}

/// Logits plus any requested observation taps.
#[derive(Debug, Clone)]
pub struct ModelOutput {
    pub logits: EmbeddingBatch,
    pub feature_maps: Vec<(String, Tensor)>,
    /// Per-layer attention weights `(B, heads, T, T)`; ViT family only.
    pub attention: Vec<(String, Tensor)>,
}

pub(crate) enum ArmModel {
    MicroCnn(MicroCnn),
    ResNetLike(ResNetLike),
    VitTiny(VitTiny),
}

/// Opaque per-forward activation cache consumed by [`Arm::backward`].
pub enum ArmCache {
    MicroCnn(micro_cnn::MicroCnnCache),
    ResNetLike(resnet::ResNetLikeCache),
    VitTiny(vit::VitTinyCache),
}

/// One built branch of the pair.
pub struct Arm {
    pub spec: ArmSpec,
    pub seed: u64,
    pub(crate) model: ArmModel,
}

/// Registry of known variants: `(name, family)`.
pub const REGISTRY: &[(&str, Family)] = &[
    ("micro_cnn", Family::Cnn),
    ("resnet_like_18", Family::Cnn),
    ("vit_tiny_p4", Family::Vit),
];

/// Builds an arm with parameters fully determined by `(spec, seed)`.
pub fn build_arm(spec: &ArmSpec, seed: u64) -> Result<Arm> {
    build_arm_stream(spec, seed, 0)
}

/// Like [`build_arm`] but drawing from a distinct RNG stream; used so the
/// two arms of a pair initialize differently even with identical specs.
fn build_arm_stream(spec: &ArmSpec, seed: u64, stream: u64) -> Result<Arm> {
    let registered = REGISTRY
        .iter()
        .find(|(name, _)| *name == spec.variant)
        .ok_or_else(|| {
            CassError::Registry(format!(
                "unknown variant '{}'; known: {:?}",
                spec.variant,
                REGISTRY.iter().map(|(n, _)| *n).collect::<Vec<_>>()
            ))
        })?;
    if registered.1 != spec.family {
        return Err(CassError::Registry(format!(
            "variant '{}' belongs to family {:?}, spec says {:?}",
            spec.variant, registered.1, spec.family
        )));
    }
    if spec.head_dim == 0 {
        return Err(CassError::Contract("head_dim must be positive".into()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    let model = match spec.variant.as_str() {
        "micro_cnn" => ArmModel::MicroCnn(MicroCnn::new(&mut rng, spec)),
        "resnet_like_18" => ArmModel::ResNetLike(ResNetLike::new(&mut rng, spec)),
        "vit_tiny_p4" => ArmModel::VitTiny(VitTiny::new(&mut rng, spec)?),
        _ => unreachable!("registry membership checked above"),
    };
    let mut arm = Arm {
        spec: spec.clone(),
        seed,
        model,
    };
    if let InitKind::PretrainedFile { path } = &spec.init {
        let (loaded, _) = load_checkpoint(path)?;
        arm.store_mut().copy_values_from(loaded.store())?;
    }
    Ok(arm)
}

impl Arm {
    pub fn store(&self) -> &ParamStore {
        match &self.model {
            ArmModel::MicroCnn(m) => &m.store,
            ArmModel::ResNetLike(m) => &m.store,
            ArmModel::VitTiny(m) => &m.store,
        }
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        match &mut self.model {
            ArmModel::MicroCnn(m) => &mut m.store,
            ArmModel::ResNetLike(m) => &mut m.store,
            ArmModel::VitTiny(m) => &mut m.store,
        }
    }

    pub fn param_count(&self) -> usize {
        self.store().param_count()
    }

    fn check_input(&self, images: &Tensor) -> Result<()> {
        let shape = images.shape();
        let (h, w) = self.spec.input_hw;
        if shape.len() != 4 || shape[1] != 3 || shape[2] != h || shape[3] != w {
            return Err(CassError::Contract(format!(
                "expected input (B, 3, {h}, {w}), got {:?}",
                shape
            )));
        }
        Ok(())
    }

    /// Runs the arm on an image batch. Does not mutate parameters; the
    /// returned cache feeds [`Arm::backward`].
    pub fn forward(&self, images: &Tensor, taps: TapFlags) -> Result<(ModelOutput, ArmCache)> {
        self.check_input(images)?;
        let tag = self.spec.arm_tag();
        let (logits, cache, feature_maps, attention) = match &self.model {
            ArmModel::MicroCnn(m) => {
                let (l, c, f) = m.forward(images, taps);
                (l, ArmCache::MicroCnn(c), f, Vec::new())
            }
            ArmModel::ResNetLike(m) => {
                let (l, c, f) = m.forward(images, taps);
                (l, ArmCache::ResNetLike(c), f, Vec::new())
            }
            ArmModel::VitTiny(m) => {
                let (l, c, a) = m.forward(images, taps);
                (l, ArmCache::VitTiny(c), Vec::new(), a)
            }
        };
        if !logits.all_finite() {
            return Err(CassError::Contract(NON_FINITE_LOGITS_MSG.into()));
        }
        Ok((
            ModelOutput {
                logits: EmbeddingBatch::new(logits, tag)?,
                feature_maps,
                attention,
            },
            cache,
        ))
    }

    /// Accumulates parameter gradients from an upstream logit gradient.
    pub fn backward(&mut self, cache: &ArmCache, grad_logits: &Tensor) {
        match (&mut self.model, cache) {
            (ArmModel::MicroCnn(m), ArmCache::MicroCnn(c)) => m.backward(c, grad_logits),
            (ArmModel::ResNetLike(m), ArmCache::ResNetLike(c)) => m.backward(c, grad_logits),
            (ArmModel::VitTiny(m), ArmCache::VitTiny(c)) => m.backward(c, grad_logits),
            _ => panic!("cache does not match model variant"),
        }
    }
}

/// The pairing kinds the trainer supports.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairingKind {
    CnnVit,
    CnnCnn,
    VitVit,
}

/// Two independently parameterized arms trained against each other.
pub struct ArmPair {
    pub arm_a: Arm,
    pub arm_b: Arm,
    pub pairing_kind: PairingKind,
}

/// Builds both arms of a pair from one seed (distinct RNG streams).
pub fn pair_arms(a: &ArmSpec, b: &ArmSpec, seed: u64) -> Result<ArmPair> {
    if a.head_dim != b.head_dim {
        return Err(CassError::Contract(format!(
            "head_dim mismatch between arms: {} vs {}",
            a.head_dim, b.head_dim
        )));
    }
    if a.input_hw != b.input_hw {
        return Err(CassError::Contract(format!(
            "input size mismatch between arms: {:?} vs {:?}",
            a.input_hw, b.input_hw
        )));
    }
    let pairing_kind = match (a.family, b.family) {
        (Family::Cnn, Family::Vit) | (Family::Vit, Family::Cnn) => PairingKind::CnnVit,
        (Family::Cnn, Family::Cnn) => PairingKind::CnnCnn,
        (Family::Vit, Family::Vit) => PairingKind::VitVit,
    };
    Ok(ArmPair {
        arm_a: build_arm_stream(a, seed, 0)?,
        arm_b: build_arm_stream(b, seed, 1)?,
        pairing_kind,
    })
}
