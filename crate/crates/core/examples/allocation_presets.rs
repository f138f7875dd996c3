//! Bit-allocation presets and the variance-sorted layout they attach to.

use msvq::synth::{generate, SynthDist};
use msvq::{allocation_preset, build_layout, compute_stats, AllocationPreset, BitMatrix};

fn main() -> msvq::Result<()> {
    for (name, preset) in [
        ("TypeI", AllocationPreset::TypeI),
        ("TypeII", AllocationPreset::TypeII),
        ("TypeIII", AllocationPreset::TypeIII),
    ] {
        let m = allocation_preset(&preset, 128, 3)?;
        println!("{name:>7}: first row {:?}, last row {:?}, {} bits total", m.row(0), m.row(127), m.total());
    }

    let custom = BitMatrix::from_rows(&[vec![9, 6], vec![7, 6], vec![5, 4], vec![5, 2]])?;
    let data = generate(SynthDist::GaussCorr { rho: 0.5 }, 512, 8, 7)?;
    let stats = compute_stats(&data)?;
    let layout = build_layout(&stats, 2, 2, 4, &AllocationPreset::Custom(custom))?;
    for i in 0..layout.n_sub() {
        let var: Vec<String> = layout.coords(i).iter().map(|&c| format!("{:.3}", stats.variance[c])).collect();
        println!("sub-vector {i}: coordinates {:?}, variances {var:?}, bits {:?}", layout.coords(i), layout.bits().row(i));
    }

    // Increasing widths violate the allocation rules.
    assert!(BitMatrix::from_rows(&[vec![4, 6]]).is_err());
    Ok(())
}
