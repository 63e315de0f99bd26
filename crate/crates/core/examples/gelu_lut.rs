//! GELU from a ReLU-minus-correction lookup table.

use emoe::approx::{gelu, gelu_error_report, gelu_reference, GeluTable};
use emoe::fixedpoint::{quantize, FormatCatalog, RunContext};

fn main() -> emoe::Result<()> {
    let table = GeluTable::shared();
    let fmt = FormatCatalog::default().activation;
    let mut ctx = RunContext::new();
    println!("step {}, {} entries, cutoff {}", table.step(), table.entries().len(), table.cutoff());
    for x in [-6.0, -2.0, -0.5, 0.0, 0.5, 1.0, 3.0, 6.0] {
        let y = gelu(quantize(x, fmt, &mut ctx), table, &mut ctx);
        println!("  gelu({x:>5}) = {:>12.8}   reference {:>12.8}", y.to_f64(), gelu_reference(x));
    }
    let r = gelu_error_report(table.step(), 100_000)?;
    println!(
        "max error: lut {:.3e}, tanh {:.3e}, sigmoid {:.3e}",
        r.lut.max_abs_error, r.tanh.max_abs_error, r.sigmoid.max_abs_error
    );
    Ok(())
}
