//! Build the marginal-loss table and compare greedy plans with the exhaustive optimum.

use msvq::oracle::exhaustive_select;
use msvq::rate::{select_stages, validate_convexity, BitMode, MarginalLossTable};
use msvq::synth::{generate, SynthDist};
use msvq::{build_layout, build_table, compute_stats, train, AllocationPreset, TrainConfig};

fn main() -> msvq::Result<()> {
    let data = generate(SynthDist::GaussCorr { rho: 0.8 }, 2048, 24, 2)?;
    let stats = compute_stats(&data)?;
    let layout = build_layout(&stats, 4, 3, 6, &AllocationPreset::TypeII)?;
    let (model, _) = train(&data, &layout, &TrainConfig { seed: 2, ..Default::default() })?;

    let table = build_table(&model, &data, BitMode::Exact)?;
    let shape = validate_convexity(&table);
    println!(
        "rows monotone: {}, convex: {}, greedy provably optimal: {}",
        shape.all_monotone(),
        shape.all_convex(),
        shape.greedy_optimal()
    );

    for b_cap in [0.0, 20.0, 45.0, 70.0, 96.0, table.total_bits()] {
        let plan = select_stages(&table, b_cap);
        let best = exhaustive_select(&table, b_cap)?;
        println!(
            "b_cap {b_cap:>5}: plan {:?} ({} bits), predicted MSE {:.4}, optimum {:?}{}",
            plan.stages,
            plan.exact_bits,
            table.predicted_mse(&plan.stages),
            best.best_plan,
            if table.total_loss(&plan.stages) == best.best_loss { "" } else { " (greedy suboptimal)" }
        );
    }

    // A hand-made table: three rows, 2-bit steps.
    let toy = MarginalLossTable::exact(
        vec![vec![11.0, 1.0, 0.0], vec![11.0, 5.0, 0.0], vec![5.0, 2.0, 0.0]],
        vec![vec![2, 2]; 3],
    )?;
    println!("toy plan at 6 bits: {:?}", select_stages(&toy, 6.0).stages);
    Ok(())
}
