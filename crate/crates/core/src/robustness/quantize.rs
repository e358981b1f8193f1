use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::ParamVector;

/// Symmetric per-segment quantization with half-away-from-zero rounding.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuantSpec {
    pub bits: u32,
}

impl QuantSpec {
    pub fn new(bits: u32) -> Result<Self> {
        if bits < 2 {
            return Err(Error::Config(format!("quantization needs at least 2 bits, got {bits}")));
        }
        Ok(Self { bits })
    }

    /// Widths of 32 and above leave f32 parameters untouched.
    pub fn is_identity(self) -> bool {
        self.bits >= 32
    }

    /// Largest code magnitude, `2^(b−1) − 1`.
    pub fn max_code(self) -> f64 {
        2f64.powi(self.bits as i32 - 1) - 1.0
    }
}

/// `max|w| / (2^(b−1) − 1)` for one segment's values; 0 for an all-zero segment.
pub fn segment_scale(values: &[f32], spec: QuantSpec) -> f64 {
    let max = values.iter().fold(0.0f32, |m, v| m.max(v.abs()));
    max as f64 / spec.max_code()
}

/// Integer codes of one segment and the scale that maps them back.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantizedSegment {
    pub name: String,
    pub scale: f64,
    pub codes: Vec<i64>,
}

impl QuantizedSegment {
    pub fn dequantized(&self) -> impl Iterator<Item = f32> + '_ {
        self.codes.iter().map(move |&c| (c as f64 * self.scale) as f32)
    }
}

/// Per-segment codes `round(w / scale)`, clipped to the code range.
/// All-zero segments get scale 0 and zero codes.
pub fn quantize_codes(params: &ParamVector, spec: QuantSpec) -> Result<Vec<QuantizedSegment>> {
    QuantSpec::new(spec.bits)?;
    let qmax = spec.max_code();
    Ok(params
        .layout()
        .segments()
        .iter()
        .map(|seg| {
            let values = params.segment_values(seg);
            let scale = segment_scale(values, spec);
            let codes = values
                .iter()
                .map(|&v| {
                    if scale == 0.0 {
                        0
                    } else {
                        (v as f64 / scale).round().clamp(-qmax, qmax) as i64
                    }
                })
                .collect();
            QuantizedSegment {
                name: seg.name.clone(),
                scale,
                codes,
            }
        })
        .collect())
}

/// Dequantized copy of `params` after clip-and-round to `spec.bits`.
pub fn quantize(params: &ParamVector, spec: QuantSpec) -> Result<ParamVector> {
    QuantSpec::new(spec.bits)?;
    if spec.is_identity() {
        return Ok(params.clone());
    }
    let mut out = params.clone();
    for (seg, q) in params.layout().segments().iter().zip(quantize_codes(params, spec)?) {
        for (dst, v) in out.values_mut()[seg.range()].iter_mut().zip(q.dequantized()) {
            *dst = v;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{Layout, Rng};
    use proptest::prelude::*;
    use std::sync::Arc;

    #[test]
    fn eight_bit_example() {
        let w = ParamVector::from_slice("w", &[-1.0, 0.0, 0.5]);
        let q = quantize(&w, QuantSpec::new(8).unwrap()).unwrap();
        let scale = 1.0 / 127.0;
        let expected: Vec<f32> = [-127.0, 0.0, 64.0].iter().map(|c| (c * scale) as f32).collect();
        assert_eq!(q.values(), expected.as_slice());
        assert!((q.values()[2] - 0.503937).abs() < 1e-6);
    }

    #[test]
    fn zero_segment_and_identity_widths() {
        let w = ParamVector::from_slice("w", &[0.0, 0.0]);
        assert_eq!(quantize(&w, QuantSpec::new(4).unwrap()).unwrap(), w);
        let w = ParamVector::from_slice("w", &[0.123, -7.5, 1e-3]);
        assert_eq!(quantize(&w, QuantSpec::new(32).unwrap()).unwrap(), w);
        let q = quantize(&w, QuantSpec::new(24).unwrap()).unwrap();
        for (a, b) in q.values().iter().zip(w.values()) {
            assert!((a - b).abs() <= 1e-6 * b.abs().max(7.5));
        }
        assert!(QuantSpec::new(1).is_err());
    }

    #[test]
    fn segments_use_their_own_scale() {
        let layout = Arc::new(Layout::new([("big", vec![2]), ("small", vec![2])]));
        let w = ParamVector::new(layout, vec![100.0, 1.0, 0.01, 0.004]).unwrap();
        let q = quantize(&w, QuantSpec::new(4).unwrap()).unwrap();
        // A global scale of 100/7 would flush the small segment to zero.
        assert_eq!(q.segment("small").unwrap()[0], 0.01);
        assert!(q.segment("small").unwrap()[1] != 0.0);
    }

    #[test]
    fn half_away_rounding() {
        // scale = 3/3 = 1 at 3 bits; 0.5 and −1.5 sit on ties.
        let w = ParamVector::from_slice("w", &[3.0, 0.5, -1.5]);
        let q = quantize(&w, QuantSpec::new(3).unwrap()).unwrap();
        assert_eq!(q.values(), &[3.0, 1.0, -2.0]);
    }

    proptest! {
        #[test]
        fn idempotent_and_bounded(seed in any::<u64>(), bits in 2u32..20, len in 1usize..64) {
            let mut rng = Rng::new(seed);
            let scale_mag = 10f64.powf(rng.uniform() * 6.0 - 3.0);
            let vals: Vec<f32> = (0..len).map(|_| (rng.normal() * scale_mag) as f32).collect();
            let w = ParamVector::from_slice("w", &vals);
            let spec = QuantSpec::new(bits).unwrap();
            let q = quantize(&w, spec).unwrap();
            let qq = quantize(&q, spec).unwrap();
            prop_assert_eq!(&q, &qq);
            let segs = quantize_codes(&w, spec).unwrap();
            let scale = segs[0].scale;
            for (a, c) in w.values().iter().zip(&segs[0].codes) {
                prop_assert!((*a as f64 / scale - *c as f64).abs() <= 0.5);
            }
            for (a, b) in w.values().iter().zip(q.values()) {
                // Half a quantization step plus the f32 rounding of the output.
                let tol = scale / 2.0 + f32::EPSILON as f64 * (*a as f64).abs();
                prop_assert!(((a - b) as f64).abs() <= tol);
            }
        }
    }
}
