//! Per-dimension int8 scalar quantization.

use crate::encoder::EmbeddingVector;

/// Codes for one vector; ranges live in the owning [`ScalarQuantizer`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QuantizedVector(pub Vec<u8>);

/// Global per-dimension `[min, max]` ranges mapped linearly onto `0..=255`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarQuantizer {
    mins: Vec<f32>,
    maxs: Vec<f32>,
}

impl ScalarQuantizer {
    pub fn new(mins: Vec<f32>, maxs: Vec<f32>) -> Self {
        assert_eq!(mins.len(), maxs.len());
        ScalarQuantizer { mins, maxs }
    }

    /// Ranges covering every vector in the collection.
    pub fn fit<'a>(dim: usize, vectors: impl IntoIterator<Item = &'a [f32]>) -> Self {
        let mut mins = vec![f32::INFINITY; dim];
        let mut maxs = vec![f32::NEG_INFINITY; dim];
        let mut any = false;
        for v in vectors {
            any = true;
            for j in 0..dim {
                mins[j] = mins[j].min(v[j]);
                maxs[j] = maxs[j].max(v[j]);
            }
        }
        if !any {
            mins.fill(0.0);
            maxs.fill(0.0);
        }
        ScalarQuantizer { mins, maxs }
    }

    pub fn dim(&self) -> usize {
        self.mins.len()
    }

    pub fn mins(&self) -> &[f32] {
        &self.mins
    }

    pub fn maxs(&self) -> &[f32] {
        &self.maxs
    }

    /// `round((v - min) / (max - min) * 255)`, clamped, rounding half away
    /// from zero. Flat dimensions encode as 0.
    pub fn quantize_slice(&self, v: &[f32]) -> QuantizedVector {
        let codes = v
            .iter()
            .zip(self.mins.iter().zip(&self.maxs))
            .map(|(&x, (&lo, &hi))| {
                if hi == lo {
                    return 0;
                }
                let (x, lo, hi) = (f64::from(x), f64::from(lo), f64::from(hi));
                ((x - lo) / (hi - lo) * 255.0).round().clamp(0.0, 255.0) as u8
            })
            .collect();
        QuantizedVector(codes)
    }

    pub fn quantize(&self, v: &EmbeddingVector) -> QuantizedVector {
        self.quantize_slice(v.as_slice())
    }

    /// `min + code * (max - min) / 255`.
    pub fn dequantize_into(&self, codes: &[u8], out: &mut [f32]) {
        for (j, (&c, o)) in codes.iter().zip(out.iter_mut()).enumerate() {
            let (lo, hi) = (f64::from(self.mins[j]), f64::from(self.maxs[j]));
            *o = (lo + f64::from(c) * (hi - lo) / 255.0) as f32;
        }
    }

    pub fn dequantize(&self, c: &QuantizedVector) -> EmbeddingVector {
        let mut out = vec![0.0; c.0.len()];
        self.dequantize_into(&c.0, &mut out);
        EmbeddingVector(out)
    }

    /// Largest reconstruction error per dimension: half a quantization step.
    pub fn half_step(&self, j: usize) -> f64 {
        (f64::from(self.maxs[j]) - f64::from(self.mins[j])) / 255.0 / 2.0
    }
}
