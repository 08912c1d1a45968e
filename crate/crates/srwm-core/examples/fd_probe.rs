// Scratch probe: margins of the shared gradcheck harness across seeds.
// Not part of the deliverable surface.
use srwm_core::fwp::{LayerKind, LrMode};
use srwm_core::oracle::{gradcheck_layer, GradCheckSizes};

fn main() {
    for seed in 0..8u64 {
        print!("seed {seed}:");
        for heads in [1usize, 2] {
            let sizes = GradCheckSizes { d_model: 8, heads, seq_len: 8 };
            for (kind, lr_mode, label) in [
                (LayerKind::Srwm, LrMode::Single, "srwm1"),
                (LayerKind::Srwm, LrMode::PerSubmatrix4, "srwm4"),
                (LayerKind::DeltaNet, LrMode::Single, "delta"),
                (LayerKind::SrDelta, LrMode::PerSubmatrix4, "srdelta"),
                (LayerKind::FakeSr, LrMode::Single, "fake"),
            ] {
                let report = gradcheck_layer(kind, lr_mode, sizes, seed, 1e-5).unwrap();
                print!(" {label}/h{heads} {:8.1e}", report.worst());
            }
        }
        println!();
    }
}
