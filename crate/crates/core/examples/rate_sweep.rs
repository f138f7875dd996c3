//! Rate–distortion sweep; writes `sweep.csv` and `sweep.svg` to the given directory.

use msvq::bitstream::bind_table;
use msvq::rate::BitMode;
use msvq::sweep::{even_grid, run_sweep};
use msvq::synth::{generate, SynthDist};
use msvq::{build_layout, build_table, compute_stats, train, AllocationPreset, TrainConfig};

fn main() -> msvq::Result<()> {
    let out = std::env::args().nth(1).map(std::path::PathBuf::from).unwrap_or_else(std::env::temp_dir);
    let data = generate(SynthDist::Gmm { components: 12 }, 4096, 32, 4)?;
    let stats = compute_stats(&data)?;
    let layout = build_layout(&stats, 4, 3, 8, &AllocationPreset::TypeI)?;
    let (model, _) = train(&data, &layout, &TrainConfig { seed: 4, ..Default::default() })?;
    let table = build_table(&model, &data, BitMode::Exact)?;
    let model = bind_table(model, &table)?;

    let report = run_sweep(&model, &table, &data, &even_grid(table.total_bits() as u32, 10))?;
    print!("{}", report.to_csv());
    std::fs::write(out.join("sweep.csv"), report.to_csv())?;
    std::fs::write(out.join("sweep.svg"), report.to_svg())?;
    println!("wrote sweep.csv and sweep.svg to {}", out.display());
    Ok(())
}
