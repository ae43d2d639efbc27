//! Wall-clock comparison of the prototype and per-sample shift estimators.

use cil_core::harness::{default_sizes, format_bench, shift_bench, ShiftConfig};

fn main() -> cil_core::Result<()> {
    let rows = shift_bench(&ShiftConfig::default(), &default_sizes(), 3, 0)?;
    print!("{}", format_bench(&rows));
    Ok(())
}
