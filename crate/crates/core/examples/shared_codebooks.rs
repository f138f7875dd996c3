//! Codebook sharing: memory against distortion for several group counts.

use msvq::synth::{generate, SynthDist};
use msvq::{build_layout, compute_stats, train, AllocationPreset, TrainConfig};

fn main() -> msvq::Result<()> {
    let data = generate(SynthDist::GaussCorr { rho: 0.9 }, 4096, 64, 5)?;
    let stats = compute_stats(&data)?;
    for groups in [1, 2, 4, 8, 16] {
        let layout = build_layout(&stats, 4, 2, groups, &AllocationPreset::TypeIII)?;
        let (model, report) = train(&data, &layout, &TrainConfig { seed: 5, ..Default::default() })?;
        println!(
            "G = {groups:>2}: {:>6} codeword parameters, final distortion {:.4}",
            model.codeword_parameter_count(),
            report.final_distortion()
        );
    }
    Ok(())
}
