//! Overfits two phantoms with the desk config and reports loss and evaluation Dice.
//!
//! Usage: `cargo run --release --example train_desk [-- key=value ...]`

use masm::data::{case_seed, gen_phantom, PhantomSpec};
use masm::train::{prepare, train, LOSS_TARGET};
use masm::RunConfig;

fn main() -> anyhow::Result<()> {
    let mut cfg = RunConfig::from_file(concat!(env!("CARGO_MANIFEST_DIR"), "/configs/desk_overfit.conf"))?;
    for kv in std::env::args().skip(1) {
        let (k, v) = kv.split_once('=').ok_or_else(|| anyhow::anyhow!("expected key=value, got {kv}"))?;
        cfg.set(k, v)?;
    }
    let cases: Vec<_> = (0..cfg.cases)
        .map(|i| gen_phantom(&PhantomSpec::new(case_seed(cfg.seed, i), cfg.volume_size)))
        .collect::<Result<_, _>>()?;
    let out = train(&cfg, &prepare(&cases)?, None)?;
    for r in out.log.records.iter().filter(|r| r.step % 25 == 0 || r.step == 1) {
        println!("step {:>4} lr {:.2e} loss {:.4}", r.step, r.lr, r.loss);
    }
    println!("steps to loss < {LOSS_TARGET}: {:?}", out.log.steps_to(LOSS_TARGET));
    if let Some(e) = &out.log.final_eval {
        print!("{}", e.to_key_value());
    }
    println!("seconds {:.1}", out.log.wall.iter().sum::<f64>());
    Ok(())
}
