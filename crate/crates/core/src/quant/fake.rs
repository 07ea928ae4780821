use super::{QuantError, QuantSpec, QuantizedTensor};
use crate::autodiff::{Tape, Tensor, Var};
use crate::calibration::ClipRange;

/// `dequantize(quantize(w))` evaluated through the same path as packing.
pub fn fake_quantize_values(
    w: &Tensor,
    spec: &QuantSpec,
    clip: Option<&ClipRange>,
) -> Result<Tensor, QuantError> {
    Ok(QuantizedTensor::quantize(w, spec, clip)?.dequantize())
}

/// Straight-through mask: gradient passes inside `[alpha, beta]`, or
/// everywhere when unclipped.
pub fn ste_mask(w: &Tensor, clip: Option<&ClipRange>) -> Vec<bool> {
    match clip {
        Some(c) => w
            .data()
            .iter()
            .map(|&x| x >= c.alpha && x <= c.beta)
            .collect(),
        None => vec![true; w.numel()],
    }
}

/// Records fake quantization of `w` on the tape with a straight-through
/// backward rule.
pub fn fake_quantize(
    tape: &mut Tape,
    w: Var,
    spec: &QuantSpec,
    clip: Option<&ClipRange>,
) -> Result<Var, QuantError> {
    let value = tape.value(w);
    let q = fake_quantize_values(value, spec, clip)?;
    let mask = ste_mask(value, clip);
    Ok(tape.straight_through(w, q.into_data(), mask)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quant::{dequantize_group, quantize_group, GroupParams};

    fn w() -> Tensor {
        Tensor::new(
            vec![2, 6],
            vec![
                -1.2, 0.3, 0.9, 2.5, -0.4, 0.0, 0.7, -2.2, 1.1, 0.05, -0.6, 1.9,
            ],
        )
        .unwrap()
    }

    #[test]
    fn composes_group_quantizers() {
        let spec = QuantSpec::single(3, 4);
        let q = QuantizedTensor::quantize(&w(), &spec, None).unwrap();
        let fq = fake_quantize_values(&w(), &spec, None).unwrap();
        let params = q.group_params();
        for r in 0..2 {
            for (g, cols) in [(0usize, 0..4usize), (1, 4..6)] {
                let p: GroupParams = params[r * 2 + g];
                let group: Vec<f32> = cols.clone().map(|c| w().data()[r * 6 + c]).collect();
                let expect = dequantize_group(&quantize_group(&group, p, 3, spec.rounding), p);
                let got: Vec<f32> = cols.map(|c| fq.data()[r * 6 + c]).collect();
                assert_eq!(got, expect);
            }
        }
    }

    #[test]
    fn grid_weights_pass_unchanged() {
        let spec = QuantSpec::bilevel(2, 4, 8, 2);
        let once = fake_quantize_values(&w(), &spec, None).unwrap();
        let q = QuantizedTensor::quantize(&w(), &spec, None).unwrap();
        let again = q
            .clone()
            .with_codes(q.requantize(&once).unwrap())
            .unwrap()
            .dequantize();
        assert_eq!(again, once);
    }

    #[test]
    fn ste_gradient_is_clip_indicator() {
        let clip = ClipRange::new("w", -1.0, 1.0);
        let spec = QuantSpec::single(4, 4);
        let mut tape = Tape::new();
        let wv = tape.leaf(&w().with_grad());
        let fq = fake_quantize(&mut tape, wv, &spec, Some(&clip)).unwrap();
        let loss = tape.sum(fq);
        let g = tape.backward(loss).unwrap();
        let g = g.get(wv).unwrap();
        for (&x, &gi) in w().data().iter().zip(g) {
            let inside = (-1.0..=1.0).contains(&x);
            assert_eq!(gi, if inside { 1.0 } else { 0.0 }, "w={x}");
        }

        let mut tape = Tape::new();
        let wv = tape.leaf(&w().with_grad());
        let fq = fake_quantize(&mut tape, wv, &spec, None).unwrap();
        let loss = tape.sum(fq);
        assert!(tape
            .backward(loss)
            .unwrap()
            .get(wv)
            .unwrap()
            .iter()
            .all(|&g| g == 1.0));
    }
}
