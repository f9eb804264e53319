//! Minimal differentiable-layer core: tensors, the layers used by the GAN and
//! CNN stacks, a gradient tape and the Adam optimizer.

mod adam;
mod kernels;
mod layer;
mod tape;
mod tensor;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use layer::{
    activation, batchnorm, conv1d, conv2d, conv_transpose1d, fully_connected, update_running,
    Activation, BnMode, Hyper, LayerKind, LayerParams, RunningStats, BN_EPS, BN_MOMENTUM,
    DEFAULT_LEAKY_SLOPE,
};
pub use tape::{Gradients, StatUpdate, Tape, Var};
pub use tensor::Tensor;

pub(crate) use tape::concat_rows_value;

/// Numeric precision used for stored parameters.
///
/// All arithmetic runs in `f64`. `Standard` rounds parameters and running
/// statistics to the nearest `f32` after every update so that a model
/// survives 32-bit checkpointing bit-exactly; `High` keeps full precision
/// and is used for gradient checks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Precision {
    #[default]
    Standard,
    High,
}

/// Anything built from named layers.
pub trait Module {
    /// Layers in declaration order.
    fn layers(&self) -> Vec<&LayerParams>;
    fn layers_mut(&mut self) -> Vec<&mut LayerParams>;

    fn param_count(&self) -> usize {
        self.layers()
            .iter()
            .map(|l| l.weight.len() + l.bias.len())
            .sum()
    }

    /// Folds train-mode batch statistics recorded on a tape into the running
    /// statistics of matching layers.
    fn absorb_stats(&mut self, updates: &[StatUpdate]) {
        for layer in self.layers_mut() {
            let name = layer.name.clone();
            for u in updates.iter().filter(|u| u.layer == name) {
                update_running(layer, &u.mean, &u.var, u.count);
            }
        }
    }

    fn apply_precision(&mut self, precision: Precision) {
        if precision == Precision::Standard {
            for layer in self.layers_mut() {
                layer.weight.round_to_f32();
                layer.bias.round_to_f32();
                if let Some(rs) = layer.running.as_mut() {
                    for v in rs.mean.iter_mut().chain(rs.var.iter_mut()) {
                        *v = *v as f32 as f64;
                    }
                }
            }
        }
    }

    fn validate(&self) -> crate::Result<()> {
        self.layers().iter().try_for_each(|l| l.validate())
    }
}
