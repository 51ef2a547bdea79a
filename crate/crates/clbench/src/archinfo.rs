//! Parameter and FLOP counts for an architecture.

use serde::Serialize;

use clbench_core::nn::{ArchSpec, Network};

#[derive(Debug, Clone, Serialize)]
pub struct ArchInfo {
    pub label: String,
    pub spec: ArchSpec,
    pub param_count: usize,
    /// Forward FLOPs for one sample, counting a multiply-add as two.
    pub flops: u64,
    pub macs: u64,
    pub weight_layers: usize,
    pub layers: Vec<String>,
}

pub fn arch_info(spec: &ArchSpec) -> clbench_core::Result<ArchInfo> {
    let net = Network::build(spec, 0)?;
    let mut input = vec![1];
    input.extend_from_slice(&spec.input_shape);
    let flops = net.flops_estimate(&input)?;
    Ok(ArchInfo {
        label: spec.label(),
        spec: spec.clone(),
        param_count: net.param_count(),
        flops,
        macs: flops / 2,
        weight_layers: net.weight_layer_depth(),
        layers: net.layer_summary(),
    })
}
