//! Finite-difference gradient check of the tiny model in all four module configurations.

use std::time::Instant;

use masm::gradcheck::{gradcheck, GradcheckOptions};
use masm::Toggles;

fn main() -> anyhow::Result<()> {
    let opts = GradcheckOptions::default();
    let mut ok = true;
    for toggles in Toggles::ALL {
        let t = Instant::now();
        let report = gradcheck(toggles, &opts)?;
        print!("{}", report.render());
        println!("config={} passed={} seconds={:.1}", toggles.label(), report.passed(), t.elapsed().as_secs_f64());
        ok &= report.passed();
    }
    anyhow::ensure!(ok, "gradient check failed");
    Ok(())
}
