//! Train a three-stage model and quantize a few vectors at different depths.

use msvq::quantizer::{decode, encode, squared_error, SelectionPlan};
use msvq::synth::{generate, SynthDist};
use msvq::{build_layout, compute_stats, train, AllocationPreset, TrainConfig};

fn main() -> msvq::Result<()> {
    let data = generate(SynthDist::GaussCorr { rho: 0.9 }, 4096, 32, 1)?;
    let stats = compute_stats(&data)?;
    let layout = build_layout(&stats, 4, 3, 8, &AllocationPreset::TypeI)?;
    let (model, report) = train(&data, &layout, &TrainConfig { seed: 1, ..Default::default() })?;

    println!("initial energy {:.4}", report.initial_distortion);
    for (t, d) in report.per_stage_distortion.iter().enumerate() {
        println!("after stage {}: {d:.4}", t + 1);
    }

    let z = data.row(0);
    for depth in 0..=3u8 {
        let plan = SelectionPlan::new(model.layout(), vec![depth; layout.n_sub()])?;
        let (enc, z_hat) = encode(&model, z, &plan)?;
        assert_eq!(decode(&model, &enc)?, z_hat);
        println!(
            "depth {depth}: {:>3} bits, squared error {:.4}",
            plan.exact_bits,
            squared_error(z, &z_hat)
        );
    }
    Ok(())
}
