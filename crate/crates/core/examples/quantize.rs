//! Uniform binning of continuous actions and the two ways a fine action can
//! be composed with its coarse token.

use hybrid_policy::action::{compose, dequantize, quantize, residual_target, ActionVector, ComposeMode, QuantizerConfig};

fn main() -> hybrid_policy::Result<()> {
    let a = ActionVector::new(vec![-0.93, 0.12, 0.71])?;
    for n in [2, 8, 32, 128] {
        let q = QuantizerConfig::new(n, 3)?;
        let tokens = quantize(&a, &q);
        let centers = dequantize(&tokens, &q)?;
        let err = a
            .as_slice()
            .iter()
            .zip(centers.as_slice())
            .map(|(x, c)| (x - c).abs())
            .fold(0.0, f64::max);
        let ids: Vec<u32> = tokens.iter().map(|t| t.0).collect();
        println!("N={n:<4} tokens {ids:?} centers {:.3?} max error {err:.4} (bound {:.4})", centers.as_slice(), 1.0 / n as f64);
    }

    // A residual refiner only has to produce the offset inside each bin.
    let q = QuantizerConfig::new(8, 3)?;
    let tokens = quantize(&a, &q);
    let fine = ActionVector::new(residual_target(&tokens, a.as_slice(), &q)?)?;
    let back = compose(&tokens, &fine, ComposeMode::Residual, &q)?;
    println!("residual {:.3?} recomposes to {:.3?}", fine.as_slice(), back.as_slice());
    Ok(())
}
