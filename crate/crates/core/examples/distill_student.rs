//! Train a small teacher, prune it to half its MACs and distill a student
//! with each distillation mode.

use catpress::arch::{BlockKind, TemplateOptions};
use catpress::config::{KdMode, RunConfig};
use catpress::gan::{train_student, train_teacher};
use catpress::macs::total_macs;
use catpress::prune::{prune, PruneBudget};

fn main() -> catpress::Result<()> {
    let cfg = RunConfig {
        epochs: 3,
        n_train: 32,
        n_val: 16,
        image_size: 16,
        ..RunConfig::default()
    };
    let arch = TemplateOptions::new(6, 3, 1, 3, BlockKind::IncRes).with_size(16, 16).build()?;
    let (teacher, report) = train_teacher(&arch, &cfg)?;
    println!("teacher: val L1 {:.4} -> {:.4}", report.initial.l1, report.final_metrics.l1);

    let full = total_macs(&teacher.arch)?;
    let pruned = prune(&teacher.arch, &PruneBudget::new(full / 2, 2, arch.input())?)?;
    println!("student: {} -> {} MACs at tau {:.4}", full, pruned.achieved_macs, pruned.threshold);

    for kd in [KdMode::Ka, KdMode::Mse, KdMode::None] {
        let (_, r) = train_student(&teacher, &pruned.arch, &RunConfig { kd, ..cfg.clone() })?;
        let dist = r.epochs.last().map_or(0.0, |e| e.loss_dist);
        println!("{kd:?}: val L1 {:.4}, psnr {:.2}, last dist loss {dist:.4}", r.final_metrics.l1, r.final_metrics.psnr);
    }
    Ok(())
}
