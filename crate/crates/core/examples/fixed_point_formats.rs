//! The format catalog, quantization policies and lossless bias widening.

use emoe::fixedpoint::{quantize, requantize, FormatCatalog, Overflow, QFormat, RunContext};

fn main() -> emoe::Result<()> {
    let cat = FormatCatalog::default();
    let mut ctx = RunContext::new();
    for (name, fmt) in [
        ("activation", cat.activation),
        ("bias_attention", cat.bias_attention),
        ("bias_mlp", cat.bias_mlp),
        ("bias_widened", cat.bias_widened),
        ("gelu_lut_entry", cat.gelu_lut_entry),
    ] {
        println!("{name:<15} {fmt}  range [{}, {}]  ulp {:e}", fmt.min_value(), fmt.max_value(), fmt.ulp());
    }

    let x = quantize(0.3, cat.activation, &mut ctx);
    println!("0.3 -> raw {} -> {:.12}", x.raw(), x.to_f64());

    let narrow = QFormat { overflow: Overflow::Saturate, ..cat.bias_attention };
    let e7 = quantize(7f64.exp(), narrow, &mut ctx);
    println!("exp(7) = {:.2} in {narrow} saturates to {}", 7f64.exp(), e7.to_f64());

    let b = quantize(63.5, cat.bias_attention, &mut ctx);
    let wide = requantize(b, cat.bias_widened, &mut ctx);
    let back = requantize(wide, cat.bias_attention, &mut ctx);
    println!("63.5 widened to {} and back: {}", wide.to_f64(), back == b);

    let w = cat.weight_format_for(0.07)?;
    println!("weights with max |w| = 0.07 use {w}");
    println!("saturation events {}, wrap events {}", ctx.saturation_events(), ctx.wrap_events());
    Ok(())
}
