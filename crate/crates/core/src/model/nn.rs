//! Flat parameter storage and small numeric helpers shared by the layers.
//!
//! All weights of a network live in one `Vec<f64>`; layers hold
//! [`ParamRef`] handles (offset + length) into it. Gradients use a second
//! vector with the identical layout. This keeps the optimizer, checkpoint
//! writer, finite-difference checks and parameter counting trivial.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Handle to one named tensor inside a flat parameter vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamRef {
    pub offset: usize,
    pub len: usize,
}

impl ParamRef {
    pub fn slice<'a>(&self, params: &'a [f64]) -> &'a [f64] {
        &params[self.offset..self.offset + self.len]
    }

    pub fn slice_mut<'a>(&self, params: &'a mut [f64]) -> &'a mut [f64] {
        &mut params[self.offset..self.offset + self.len]
    }
}

/// Named tensor entry of a layout.
#[derive(Debug, Clone)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub r: ParamRef,
}

/// Ordered collection of named tensors backing one parameter vector.
#[derive(Debug, Clone, Default)]
pub struct ParamLayout {
    pub entries: Vec<ParamEntry>,
    total: usize,
}

impl ParamLayout {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, shape: &[usize]) -> ParamRef {
        let len: usize = shape.iter().product();
        let r = ParamRef {
            offset: self.total,
            len,
        };
        self.entries.push(ParamEntry {
            name: name.into(),
            shape: shape.to_vec(),
            r,
        });
        self.total += len;
        r
    }

    pub fn total_len(&self) -> usize {
        self.total
    }
}

/// Kaiming-normal fill for ReLU fan-in.
pub fn init_kaiming(rng: &mut ChaCha8Rng, out: &mut [f64], fan_in: usize) {
    let std = (2.0 / fan_in as f64).sqrt();
    for v in out.iter_mut() {
        *v = std * normal(rng);
    }
}

/// Xavier-normal fill (linear / attention projections).
pub fn init_xavier(rng: &mut ChaCha8Rng, out: &mut [f64], fan_in: usize, fan_out: usize) {
    let std = (2.0 / (fan_in + fan_out) as f64).sqrt();
    for v in out.iter_mut() {
        *v = std * normal(rng);
    }
}

/// Uniform fill in [-bound, bound] (recurrent weights).
pub fn init_uniform(rng: &mut ChaCha8Rng, out: &mut [f64], bound: f64) {
    for v in out.iter_mut() {
        *v = rng.gen_range(-bound..=bound);
    }
}

/// Standard normal via Box-Muller; consumes two uniform draws per value.
fn normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn layout_offsets_are_contiguous() {
        let mut layout = ParamLayout::new();
        let a = layout.push("a", &[2, 3]);
        let b = layout.push("b", &[4]);
        assert_eq!(a.offset, 0);
        assert_eq!(a.len, 6);
        assert_eq!(b.offset, 6);
        assert_eq!(layout.total_len(), 10);
        assert_eq!(layout.entries[1].name, "b");
    }

    #[test]
    fn init_is_deterministic_per_seed() {
        let mut a = vec![0.0; 16];
        let mut b = vec![0.0; 16];
        init_kaiming(&mut ChaCha8Rng::seed_from_u64(9), &mut a, 8);
        init_kaiming(&mut ChaCha8Rng::seed_from_u64(9), &mut b, 8);
        assert_eq!(a, b);
    }
}
