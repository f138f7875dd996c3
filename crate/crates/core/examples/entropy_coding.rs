//! Entropy-constrained training: Huffman-coded indices and the lambda trade-off.

use msvq::bitstream::{bind_table, encode_batch};
use msvq::entropy::{attach_entropy_codes, avg_bits, group_index_counts, pmf_from_counts, HuffmanCode};
use msvq::rate::BitMode;
use msvq::synth::{generate, SynthDist};
use msvq::trainer::variance_scaled_lambda;
use msvq::{build_layout, build_table, compute_stats, train, AllocationPreset, TrainConfig};

fn main() -> msvq::Result<()> {
    let data = generate(SynthDist::GaussCorr { rho: 0.9 }, 4096, 32, 3)?;
    let stats = compute_stats(&data)?;
    let layout = build_layout(&stats, 4, 3, 1, &AllocationPreset::TypeIII)?;
    let fixed = layout.bits().total();

    for scale in [0.5, 2.0, 8.0] {
        let lambda = variance_scaled_lambda(stats.mean_variance(), scale, 3);
        let config = TrainConfig { seed: 3, ..Default::default() }.entropy_constrained(lambda);
        let (model, report) = train(&data, &layout, &config)?;
        let model = attach_entropy_codes(model, &data)?;

        let counts = group_index_counts(&model, &data)?;
        let pmf = pmf_from_counts(&counts[0][0]);
        let code = HuffmanCode::from_lengths(model.codebooks()[0][0].code_lengths().unwrap().to_vec())?;
        let stats0 = avg_bits(&pmf, &code)?;

        let table = build_table(&model, &data, BitMode::Average)?;
        let model = bind_table(model, &table)?;
        let batch = encode_batch(&model, &table, &data, fixed as u32, false)?;
        println!(
            "scale {scale}: distortion {:.4}, mean payload {:.1} of {fixed} fixed bits, stage-1 code {:.3} bits vs entropy {:.3}",
            report.final_distortion(),
            batch.mean_coded_bits(),
            stats0.avg_bits,
            stats0.entropy
        );
    }
    Ok(())
}
