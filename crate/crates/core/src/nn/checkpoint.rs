use std::path::Path;

use super::spec::{FreezeUnit, NetworkSpec};
use super::state::{NetworkState, ParamTensor, UnitParams};
use crate::container::Container;
use crate::error::{FrzError, Result};

pub const CHECKPOINT_KIND: &str = "network";

pub fn to_container(state: &NetworkState) -> Container {
    let mut c = Container::new(CHECKPOINT_KIND);
    c.set_field("spec", &state.spec);
    c.set_field("units", &state.freeze_units());
    c.set_field("seed", &state.seed);
    for unit in &state.units {
        for (t, m) in unit.tensors.iter().zip(&unit.momentum) {
            c.push_tensor(&t.name, &t.shape, &t.data);
            c.push_tensor(&format!("{}.momentum", t.name), &t.shape, m);
        }
    }
    c
}

pub fn from_container(c: &Container) -> Result<NetworkState> {
    c.expect_kind(CHECKPOINT_KIND)?;
    let spec: NetworkSpec = c.header_field("spec")?;
    let units: Vec<FreezeUnit> = c.header_field("units")?;
    let seed: u64 = c.header_field("seed")?;
    spec.shapes().map_err(|e| FrzError::Format(format!("checkpoint spec invalid: {e}")))?;
    // Rebuild the layout from the spec, then overwrite every tensor.
    let mut state = super::state::build_network(&spec, &units, seed)
        .map_err(|e| FrzError::Format(format!("checkpoint units invalid: {e}")))?;
    let mut rebuilt = Vec::with_capacity(state.units.len());
    for unit in &state.units {
        let mut tensors = Vec::new();
        let mut momentum = Vec::new();
        for t in &unit.tensors {
            let (shape, data) = c.tensor(&t.name)?;
            let (mshape, mdata) = c.tensor(&format!("{}.momentum", t.name))?;
            if shape != t.shape || mshape != t.shape {
                return Err(FrzError::DimensionMismatch(format!("tensor {} has shape {shape:?}, expected {:?}", t.name, t.shape)));
            }
            tensors.push(ParamTensor { name: t.name.clone(), shape, data });
            momentum.push(mdata);
        }
        rebuilt.push(UnitParams { unit_id: unit.unit_id, layer_indices: unit.layer_indices.clone(), tensors, momentum });
    }
    state.units = rebuilt;
    Ok(state)
}

pub fn save_checkpoint(state: &NetworkState, path: &Path) -> Result<()> {
    to_container(state).write(path)
}

pub fn load_checkpoint(path: &Path) -> Result<NetworkState> {
    from_container(&Container::read(path)?)
}
