//! Small feedforward networks with hand-written reverse-mode gradients, plus
//! an Adam optimizer that works on anything exposing its parameters as flat
//! blocks.

mod adam;
mod mlp;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use mlp::{mlp_backward, mlp_forward, Activation, DenseLayer, MlpConfig, MlpParams, MlpTape};

/// A parameter container viewed as an ordered list of flat blocks.
///
/// Two values of the same type and shape must yield blocks of matching
/// lengths in the same order; gradients are stored in the same container type
/// as the parameters they belong to.
pub trait ParamBlocks<T> {
    fn blocks(&self) -> Vec<&[T]>;
    fn blocks_mut(&mut self) -> Vec<&mut [T]>;

    fn param_count(&self) -> usize {
        self.blocks().iter().map(|b| b.len()).sum()
    }

    /// Copies all parameters into one vector, block after block.
    fn flatten(&self) -> Vec<T>
    where
        T: Copy,
    {
        self.blocks().into_iter().flatten().copied().collect()
    }

    /// Overwrites parameters from a flat vector produced by [`flatten`](Self::flatten).
    fn assign_flat(&mut self, values: &[T])
    where
        T: Copy,
    {
        let mut it = values.iter();
        for block in self.blocks_mut() {
            for p in block.iter_mut() {
                *p = *it.next().expect("flat vector too short");
            }
        }
        assert!(it.next().is_none(), "flat vector too long");
    }
}
