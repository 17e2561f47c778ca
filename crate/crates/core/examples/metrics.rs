//! Dice, HD95 and the soft Dice loss on a phantom and a perturbed copy of its label.

use masm::backbone::CLASS_NAMES;
use masm::data::{gen_phantom, mirror, PhantomSpec};
use masm::metrics::{evaluate_case, soft_dice_loss};
use masm::Tape;

fn main() -> anyhow::Result<()> {
    let vol = gen_phantom(&PhantomSpec::new(11, 32))?;
    let truth = vol.label.clone().unwrap();
    let flipped = mirror(&vol, 2).label.unwrap();
    let report = evaluate_case(&vol.case_id, &flipped, &truth)?;
    for (c, name) in CLASS_NAMES.iter().enumerate() {
        println!("{name}: dice {:.4} hd95 {:.3}", report.dice[c], report.hd95[c]);
    }
    let soft = flipped.map(|v| 0.1 + 0.8 * v);
    let tape = Tape::new();
    let (_, loss) = soft_dice_loss(tape.constant(soft), &truth)?;
    println!("soft dice loss {:.4}, per class {:.4?}", loss.total, loss.per_class);
    Ok(())
}
