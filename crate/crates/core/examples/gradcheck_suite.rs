//! Finite-difference gradient checks in 64-bit mode: every graph operation
//! and loss, then every network module. Pass `--full` to add the reduced
//! network end to end at 64×64 (about a minute).
//!
//! `cargo run --example gradcheck_suite [-- --full]`

use elgcnet::network::ModelConfig;
use elgcnet::verify::{end_to_end, format_table, module_suite, op_suite};

fn main() -> elgcnet::Result<()> {
    let mut rows = op_suite(0)?;
    rows.extend(module_suite(0)?);
    if std::env::args().any(|a| a == "--full") {
        rows.push(end_to_end(&ModelConfig::reduced(), 0, 1)?);
    }
    print!("{}", format_table(&rows));
    let failed = rows.iter().filter(|r| !r.passed).count();
    println!("{} checks, {failed} failed", rows.len());
    if failed > 0 {
        std::process::exit(1);
    }
    Ok(())
}
