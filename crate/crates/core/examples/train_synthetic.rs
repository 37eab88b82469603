//! Trains on an in-memory synthetic set and prints the run log as it goes.
//!
//! `train_synthetic [cases] [epochs] [key=value ...]`

use voxgraph::data::{generate_synthetic_case, synth_id, synth_seed};
use voxgraph::trainer::{runlog, MemoryDataset, TrainConfig, Trainer};

fn main() -> voxgraph::Result<()> {
    voxgraph::tune_allocator();
    let args: Vec<String> = std::env::args().skip(1).collect();
    let n: usize = args.first().and_then(|s| s.parse().ok()).unwrap_or(250);
    let epochs: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(30);
    let mut config = TrainConfig {
        max_epochs: epochs,
        ..TrainConfig::default()
    };
    for kv in args.iter().skip(2) {
        let (k, v) = kv.split_once('=').expect("key=value");
        config.set(k, v)?;
    }
    config.validate()?;
    let cases = (0..n)
        .map(|i| generate_synthetic_case(&synth_id(i), synth_seed(config.seed, i), 32, [1.0; 3]))
        .collect::<voxgraph::Result<Vec<_>>>()?;
    let data = MemoryDataset { cases };
    let mut trainer = Trainer::new(config)?;
    println!("{}", runlog::RUNLOG_HEADER);
    let outcome = trainer.fit(&data, None, |row| {
        print!("{}", runlog::to_csv(std::slice::from_ref(row)).lines().nth(1).unwrap_or(""));
        println!();
    })?;
    println!("best {:?}", outcome.best);
    Ok(())
}
