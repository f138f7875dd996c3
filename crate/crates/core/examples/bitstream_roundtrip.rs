//! Serialize a model, encode a batch, and decode it from bytes alone.

use msvq::bitstream::{bind_table, decode_batch, encode_batch, read_model, write_model, PayloadHeader};
use msvq::entropy::attach_entropy_codes;
use msvq::rate::BitMode;
use msvq::synth::{generate, SynthDist};
use msvq::trainer::variance_scaled_lambda;
use msvq::{build_layout, build_table, compute_stats, train, AllocationPreset, MarginalLossTable, TrainConfig};

fn main() -> msvq::Result<()> {
    let data = generate(SynthDist::GaussCorr { rho: 0.9 }, 2000, 16, 6)?;
    let stats = compute_stats(&data)?;
    let layout = build_layout(&stats, 4, 2, 4, &AllocationPreset::TypeIII)?;
    let config = TrainConfig { seed: 6, ..Default::default() }
        .entropy_constrained(variance_scaled_lambda(stats.mean_variance(), 2.0, 2));
    let (model, _) = train(&data, &layout, &config)?;
    let model = attach_entropy_codes(model, &data)?;
    let table = build_table(&model, &data, BitMode::Average)?;
    let model = bind_table(model, &table)?;

    // Everything the receiver needs travels as bytes.
    let model_bytes = write_model(&model)?;
    let table_bytes = table.to_json_bytes()?;

    for strict in [false, true] {
        let tx = encode_batch(&model, &table, &data, 24, strict)?;
        let header = PayloadHeader::parse(&tx.bytes)?;
        let rx_model = read_model(&model_bytes)?;
        let rx_table = MarginalLossTable::from_json_bytes(&table_bytes)?;
        let rx = decode_batch(&rx_model, &rx_table, &tx.bytes)?;
        assert_eq!(rx.z_hat, tx.z_hat);
        println!(
            "strict={strict}: {:?} plan {:?}, {} bytes, mean {:.2} bits, max {} bits",
            header.mode,
            rx.plan.stages,
            tx.bytes.len(),
            tx.mean_coded_bits(),
            tx.coded_bits.iter().max().unwrap()
        );
    }
    println!("model file: {} bytes", model_bytes.len());
    Ok(())
}
