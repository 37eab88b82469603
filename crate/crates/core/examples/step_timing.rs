//! Times forward, backward and inference of the default network on one
//! synthetic 32³ case.

use std::time::Instant;

use voxgraph::data::{generate_synthetic_case, znormalize};
use voxgraph::losses::{combined_loss, LossConfig};
use voxgraph::segnet::{NetworkConfig, SegNet};
use voxgraph::tensor::Tape;

fn main() -> voxgraph::Result<()> {
    voxgraph::tune_allocator();
    let mut config = NetworkConfig::default();
    if let Ok(cap) = std::env::var("DENSE_CAP") {
        config.gca.dense_cap = cap.parse().expect("DENSE_CAP");
    }
    let (net, mut params) = SegNet::new::<f32>(config, 42)?;
    println!("parameters: {}", params.num_elements());
    let mut case = generate_synthetic_case("bench", 7, 32, [1.0; 3])?;
    znormalize(&mut case.image)?;
    let input = case.image.clone().reshape(&[1, 4, 32, 32, 32])?;
    for _ in 0..3 {
        let t0 = Instant::now();
        let mut tape = Tape::new();
        let x = tape.constant(input.clone());
        let out = net.forward(&mut tape, &params, x)?;
        let loss = combined_loss(&mut tape, out.logits, &out.aux, std::slice::from_ref(&case.labels), &LossConfig::default())?;
        let t1 = Instant::now();
        tape.backward(loss, &mut params)?;
        let t2 = Instant::now();
        println!(
            "loss {:.4}  forward {:.3}s  backward {:.3}s",
            tape.value(loss).data()[0],
            (t1 - t0).as_secs_f64(),
            (t2 - t1).as_secs_f64()
        );
    }
    let t0 = Instant::now();
    net.predict(&params, input)?;
    println!("predict {:.3}s", t0.elapsed().as_secs_f64());
    Ok(())
}
