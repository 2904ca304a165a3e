//! Per-layer MACs of the plain and inception-residual templates.

use catpress::arch::{BlockKind, TemplateOptions};
use catpress::macs::arch_macs;

fn main() -> catpress::Result<()> {
    for kind in [BlockKind::Plain, BlockKind::IncRes] {
        let arch = TemplateOptions::new(64, 9, 3, 3, kind).build()?;
        let cost = arch_macs(&arch, arch.input())?;
        println!("{} at {:?}", arch.name, arch.input());
        for layer in cost.layers.iter().filter(|l| l.macs > 0).take(8) {
            println!("  {:<40} {:>14}", layer.id, layer.macs);
        }
        println!("  ... {} layers, total {:.3}G MACs\n", cost.layers.len(), cost.total as f64 / 1e9);
    }
    Ok(())
}
