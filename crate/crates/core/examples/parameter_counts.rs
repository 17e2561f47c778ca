//! Parameter counts per group for each module configuration.

use std::collections::BTreeMap;

use masm::backbone::BackboneConfig;
use masm::model::param_group;
use masm::{Model, ModelConfig, Toggles};

fn main() -> anyhow::Result<()> {
    let cfg = BackboneConfig::desk();
    for toggles in Toggles::ALL {
        let model = Model::new(ModelConfig::new(cfg.clone(), toggles), 0)?;
        let mut groups: BTreeMap<&str, usize> = BTreeMap::new();
        for (_, name, t) in model.params.iter() {
            *groups.entry(param_group(name)).or_default() += t.numel();
        }
        println!("{:<12} total {:>7} {groups:?}", toggles.label(), model.parameter_count());
    }
    Ok(())
}
