//! GAN branches and the two composite diagnosis networks.

mod composite;
mod gan;

pub use composite::{
    concatenate, pganc_forward, pgant_forward, ArchConfig, ConvStage, Fnn, FrontKind, Modes,
    ParamGroup, PgancModel, PgantModel, PgantVars, DEFAULT_FC1_WIDTH, STAGE_CHANNELS, STAGE_COLS,
    STAGE_LEN, STAGE_ROWS,
};
pub use gan::{
    batch_tensor, gan_forward, Branch, Decoder, Encoder, GanForwardTrace, GanModel, GanVars,
    PlainBranch, RESIDUAL_CHANNELS, RESIDUAL_COLS,
};
