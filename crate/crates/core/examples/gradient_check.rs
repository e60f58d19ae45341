//! Finite-difference checks of every autodiff op, and of focal loss through
//! a one-block transformer head, in double precision.
//!
//! `cargo run --example gradient_check`

use actiondiff::numerics::gradcheck::op_suite;
use actiondiff::numerics::{with_precision, Precision};
use actiondiff::selftest::{focal_transformer_grad_error, BoxError};

fn main() -> Result<(), BoxError> {
    let ops = with_precision(Precision::F64, || op_suite(0))?;
    for (name, err) in &ops {
        println!("{name:<28} {err:.2e}");
    }
    let (err, params) = focal_transformer_grad_error()?;
    println!("focal loss through transformer ({params} params): {err:.2e}");
    Ok(())
}
