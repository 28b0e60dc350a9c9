//! The dual-encoder denoiser and its ablation variants.
//!
//! A feature fusion sub-network squeezes the 12 auxiliary channels into a
//! 3-channel detail map. Two encoders (detail map and gamma-compressed noisy
//! colour) each reduce their input by 32× to a 512-channel latent. The decoder
//! up-samples the colour latent back to full resolution; at every level its
//! activation is fused with the matching taps from both encoders by a 1×1
//! convolution initialised to the identity sum.

mod model;
mod spec;

pub use model::{
    bilinear_kernel, latent_shape, EncoderOutput, Forward, Mode, Model, NetError, BN_EPS,
    BN_MOMENTUM, RESOLUTION_MULTIPLE,
};
pub use spec::{
    Init, ModelSpec, ParamDecl, Variant, COLOR_CHANNELS, DEFAULT_ENCODER, DEFAULT_FUSION,
    FEATURE_CHANNELS, LEVELS,
};
