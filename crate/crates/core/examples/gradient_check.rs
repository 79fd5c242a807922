//! Compares analytic gradients of every loss against central differences.
//!
//! ```text
//! cargo run --example gradient_check -- [seeds]
//! ```

use dual_align::gradcheck::{gradcheck, GradcheckConfig, LossKind, DEFAULT_TOLERANCE};

fn main() -> dual_align::Result<()> {
    let seeds: u64 = std::env::args().nth(1).map_or(5, |s| s.parse().expect("seed count"));
    let config = GradcheckConfig::default();
    println!("n = {}, d = {}, step = {:e}", config.n, config.d, config.step);
    println!("{:<8}{:>16}{:>10}", "loss", "worst rel err", "status");
    let mut failed = false;
    for kind in LossKind::ALL {
        let mut worst = 0.0f64;
        for seed in 0..seeds {
            worst = worst.max(gradcheck(kind, seed, &config)?.max_rel_error);
        }
        let ok = worst <= DEFAULT_TOLERANCE;
        failed |= !ok;
        println!("{:<8}{worst:>16.3e}{:>10}", kind.name(), if ok { "ok" } else { "FAIL" });
    }
    if failed {
        std::process::exit(2);
    }
    Ok(())
}
