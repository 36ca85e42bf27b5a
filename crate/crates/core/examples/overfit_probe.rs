//! Desk-scale overfit probe: trains on a small synthetic set and prints the
//! loss curve plus the final train-set Dice score. LR, EPOCHS, and BATCH
//! environment variables override the desk defaults for sweeps.

use fuseseg::config::ModelConfig;
use fuseseg::data::synth_generate;
use fuseseg::train_eval::{evaluate, train};

fn env_or<T: std::str::FromStr>(name: &str, fallback: T) -> T {
    std::env::var(name).ok().and_then(|v| v.parse().ok()).unwrap_or(fallback)
}

fn main() {
    let mut cfg = ModelConfig::desk();
    cfg.lr = env_or("LR", cfg.lr);
    cfg.epochs = env_or("EPOCHS", cfg.epochs);
    cfg.batch_size = env_or("BATCH", cfg.batch_size);
    let data = synth_generate(8, cfg.image_size, 1).expect("synth");
    let start = std::time::Instant::now();
    let out = train(&cfg, 0, &data, &[]).expect("train");
    let elapsed = start.elapsed();
    for l in out.log.iter().step_by(10) {
        println!("epoch {:3}  loss {:.5}  dsc {:.4}", l.epoch, l.mean_loss, l.val_dsc);
    }
    let report = evaluate(&cfg, &out.best.params, &data).expect("eval");
    for (id, m) in &report.per_image {
        println!("  {id}  dsc {:.4}", m.dsc);
    }
    println!(
        "lr {}  batch {}  steps {}  elapsed {:.1?}  best-epoch {}  final train DSC {:.4}",
        cfg.lr, cfg.batch_size, out.steps, elapsed, out.best.epoch, report.mean.dsc
    );
}
