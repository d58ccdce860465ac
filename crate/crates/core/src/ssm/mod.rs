//! Selective state-space layers.
//!
//! [`scan`] holds the recurrence and its `O(L²)` oracles (matrix form,
//! transfer matrix, half-sequence probe), [`block`] the gated block and its
//! ablation mixers on the tape, and [`infer`] forward-only kernels for
//! benchmarks.

pub mod block;
mod discretize;
pub mod infer;
pub mod scan;

pub use block::{
    block_forward, init_block, mamba_block, ssm_params, BlockConfig, BlockKind, BlockTrace,
};
pub use discretize::{phi, phi_prime, zoh_discretize};
pub use scan::{
    block_partition_probe, selective_parameters, selective_ssm_on_tape, ssm_hidden_states,
    ssm_matrix_form, ssm_scan, transfer_matrix, PartitionReport, SelectiveSsmParams, SsmVars,
    TransferMatrixView, TransferMode,
};
