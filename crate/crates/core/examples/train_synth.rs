//! Trains one method on the default synthetic scene and prints its metrics.
//!
//! `cargo run --release --example train_synth -- lora 20`

use hsi_peft::config::RunConfig;
use hsi_peft::harness::{prepare, train};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let method = args.next().unwrap_or_else(|| "lora".into());
    let epochs = args.next().unwrap_or_else(|| "20".into());
    let lr = args.next();
    let eval_every = std::env::var("EVAL_EVERY").unwrap_or_else(|_| "1".into());
    let mut text = format!("[adapter]\nmethod = {method}\n[train]\nepochs = {epochs}\neval_every = {eval_every}\n");
    if let Some(lr) = lr {
        text.push_str(&format!("[optim]\nlr = {lr}\n"));
    }
    let cfg = RunConfig::from_text(&text)?;
    let data = prepare(&cfg)?;
    let start = std::time::Instant::now();
    let result = train(&cfg, &data)?;
    print!("{}", result.log_csv());
    println!("best epoch {}, {:.1}s", result.best_epoch, start.elapsed().as_secs_f64());
    Ok(())
}
