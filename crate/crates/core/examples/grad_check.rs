//! Checks every variant's tape gradients against central differences in
//! double precision.
//!
//! Run with `cargo run --release --example grad_check`.

use msin::model::{model_grad_check, ModelConfig, Variant, GRAD_CHECK_SEED};

fn main() -> anyhow::Result<()> {
    for v in Variant::ALL {
        let report = model_grad_check(&ModelConfig::tiny(v), GRAD_CHECK_SEED)?;
        let worst = report
            .per_tensor
            .iter()
            .max_by(|a, b| a.worst_rel_err.total_cmp(&b.worst_rel_err))
            .expect("at least one tensor");
        println!(
            "{:<9} {} tensors, worst {:.2e} in {} (tape {:.4e}, numeric {:.4e})",
            v.name(),
            report.per_tensor.len(),
            report.max_rel_err,
            worst.name,
            worst.tape_grad,
            worst.fd_grad
        );
    }
    Ok(())
}
