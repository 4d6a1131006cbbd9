pub mod config;
pub mod init;
pub mod params;
pub mod vit;

pub use config::{MlaConfig, MlaVariant, ModelConfig, PatchInit, PosEmbed, Projection};
pub use init::{positional_table, sample_patches, trunc_normal, whitening_init, Whitening};
pub use params::{param_count, ParamCount, ParamStore};
pub use vit::{drop_path_mask, patchify, patchify_batch, Bound, BranchMasks, Mode, Vit};
