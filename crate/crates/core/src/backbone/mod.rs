//! Small token-sequence transformer encoder with frozen weights and one
//! attachable parameter-efficient tuning mechanism.

pub mod encoder;
pub mod pet;
pub mod pretrain;
pub mod weights;

pub use encoder::{encode, encode_traced, Bound, Model};
pub use pet::{
    adapter_apply, ssf_apply, vpt_prepend, AdapterBlock, AdapterConfig, AdapterSpec, Pet, PetAttachment, PetConfig,
    PetKind, Placement, PromptMode, SsfPoint, SSF_POINTS,
};
pub use pretrain::{pretrain, PretrainReport};
pub use weights::{BackboneConfig, BlockWeights, EncoderWeights, FrozenWeights};
