//! Dynamic-bias streaming softmax against the three-pass evaluation.

use emoe::approx::{softmax_error_report, softmax_single_pass, softmax_three_pass};
use emoe::fixedpoint::{quantize, FormatCatalog, FxValue, RunContext};

fn main() -> emoe::Result<()> {
    let fmt = FormatCatalog::default().activation;
    let mut ctx = RunContext::new();
    let x: Vec<FxValue> = [1.5, -3.0, 7.25, 7.0, 0.0, 900.0, -1000.0]
        .iter()
        .map(|&v| quantize(v, fmt, &mut ctx))
        .collect();
    let (state, probs) = softmax_single_pass(&x, &mut ctx)?;
    let three = softmax_three_pass(&x, &mut ctx)?;
    println!("b = {}, s = {}", state.bias().to_f64(), state.denominator().to_f64());
    println!("three-pass state identical: {}", three.state == state);
    for (v, p) in x.iter().zip(&probs) {
        println!("  x = {:>9.3}  p = {:.9}", v.to_f64(), p.to_f64());
    }
    println!("overflow events: {}", ctx.overflow_events());

    let report = softmax_error_report(128, 500, 0)?;
    println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
    Ok(())
}
