//! One-step pruning of a full-size teacher to several MAC budgets.

use catpress::arch::{BlockKind, TemplateOptions};
use catpress::macs::total_macs;
use catpress::prune::{prune, PruneBudget, DEFAULT_FLOOR};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> catpress::Result<()> {
    let mut teacher = TemplateOptions::new(64, 9, 3, 3, BlockKind::IncRes).build()?;
    // stand-in for trained scales
    teacher.randomize_scales(&mut ChaCha8Rng::seed_from_u64(7), 1.0, 0.5);
    let full = total_macs(&teacher)?;
    println!("teacher: {:.3}G MACs", full as f64 / 1e9);
    for fraction in [0.5, 0.25, 0.1, 0.05] {
        let budget = PruneBudget::new((full as f64 * fraction) as u64, DEFAULT_FLOOR, teacher.input())?;
        let r = prune(&teacher, &budget)?;
        println!(
            "{:>4.0}%: tau {:.4}, {:.3}G MACs, {} channels and {} branches removed",
            fraction * 100.0,
            r.threshold,
            r.achieved_macs as f64 / 1e9,
            r.pruned_channel_count,
            r.removed_branch_count
        );
    }
    let tiny = PruneBudget::new(1_000_000, DEFAULT_FLOOR, teacher.input())?;
    if let Err(e) = prune(&teacher, &tiny) {
        println!("1M MACs: {e}");
    }
    Ok(())
}
