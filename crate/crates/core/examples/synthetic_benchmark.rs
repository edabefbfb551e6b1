//! Compares the mean baseline, coupled DEFP4D and DGAE on a synthetic
//! corridor at several virtual-sensor fractions.
//!
//! `cargo run --release --example synthetic_benchmark -- [epochs] [seed]`

use std::time::Instant;

use dirinet::autoencoder::ModelConfig;
use dirinet::data::{generate_synthetic, SynthConfig};
use dirinet::evaluation::select_virtual_sensors;
use dirinet::experiment::{compare_estimators, SensorSplit};
use dirinet::training::{chronological_split, TrainConfig};
use dirinet::PropagationConfig;

fn main() -> dirinet::Result<()> {
    env_logger::init();
    let args: Vec<String> = std::env::args().collect();
    let epochs = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(100);
    let seed = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(7);
    let synth = SynthConfig {
        n_nodes: 60,
        days: 20,
        seed,
        ..SynthConfig::default()
    };
    let data = generate_synthetic(&synth)?;
    let g = data.graph()?;
    let (train, test) = chronological_split(&data.observed, 0.7, 12)?;
    let (_, truth) = chronological_split(&data.truth, 0.7, 12)?;
    let train_cfg = TrainConfig {
        max_epochs: epochs,
        seed,
        ..TrainConfig::default()
    };
    let template = ModelConfig::default();
    println!("fraction,mean_rmse,defp4d_rmse,dgae_rmse,epochs,seconds");
    for frac in [0.25, 0.5, 0.75] {
        let count = (frac * synth.n_nodes as f64).round() as usize;
        let vs = select_virtual_sensors(synth.n_nodes, count, seed)?;
        let split = SensorSplit::from_virtual(synth.n_nodes, &vs)?;
        let t0 = Instant::now();
        let c = compare_estimators(
            &g,
            &train,
            &test,
            &truth,
            &split,
            &template,
            &train_cfg,
            &PropagationConfig::default(),
        )?;
        println!(
            "{frac},{:.4},{:.4},{:.4},{},{:.1}",
            c.mean.rmse,
            c.defp4d.rmse,
            c.dgae.rmse,
            c.fit.history.len(),
            t0.elapsed().as_secs_f64()
        );
    }
    Ok(())
}
