//! Non-streaming oracles: a floating-point forward pass and a direct
//! fixed-point forward pass.

mod direct;
mod dump;
mod float;

pub use direct::{forward_compiled, forward_fixed_direct, DirectOutput, FixedLayer};
pub use dump::{read_dump, write_dump, DumpData, TensorDump};
pub use float::{effective_weights, forward_float, image_to_float, FloatLayer};

use crate::error::{Error, Result};
use crate::tensor::{ActTensor, Shape3};

/// CHW tensor of doubles.
#[derive(Clone, Debug, PartialEq)]
pub struct FloatTensor {
    pub shape: Shape3,
    pub data: Vec<f64>,
}

impl FloatTensor {
    pub fn new(shape: Shape3, data: Vec<f64>) -> Result<Self> {
        if data.len() != shape.len() {
            return Err(Error::Shape(format!(
                "float tensor {shape} needs {} values, got {}",
                shape.len(),
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Shape("float tensor holds a non-finite value".into()));
        }
        Ok(FloatTensor { shape, data })
    }

    pub fn zeros(shape: Shape3) -> Self {
        FloatTensor {
            shape,
            data: vec![0.0; shape.len()],
        }
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[self.shape.index(c, y, x)]
    }
}

/// Zero-padded cross-correlation plus bias, stride 1.
///
/// `weights` is `[out][in][ky][kx]`. Output spatial size equals input size
/// when `padding == kernel / 2`.
pub fn conv2d_float(
    input: &FloatTensor,
    weights: &[f64],
    bias: &[f64],
    kernel: usize,
    padding: usize,
) -> Result<FloatTensor> {
    let Shape3 { c: cin, h, w } = input.shape;
    let cout = bias.len();
    if weights.len() != cout * cin * kernel * kernel {
        return Err(Error::Shape(format!(
            "{} weights for {cout}x{cin}x{kernel}x{kernel}",
            weights.len()
        )));
    }
    if kernel == 0 || 2 * padding + 1 != kernel {
        return Err(Error::Shape(format!(
            "kernel {kernel} with padding {padding}"
        )));
    }
    let out_shape = Shape3::new(cout, h, w);
    let mut out = vec![0.0; out_shape.len()];
    for o in 0..cout {
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for i in 0..cin {
                    for ky in 0..kernel {
                        let iy = (y + ky).wrapping_sub(padding);
                        if iy >= h {
                            continue;
                        }
                        for kx in 0..kernel {
                            let ix = (x + kx).wrapping_sub(padding);
                            if ix >= w {
                                continue;
                            }
                            acc += weights[((o * cin + i) * kernel + ky) * kernel + kx]
                                * input.get(i, iy, ix);
                        }
                    }
                }
                out[out_shape.index(o, y, x)] = acc + bias[o];
            }
        }
    }
    FloatTensor::new(out_shape, out)
}

/// Stride-2 2×2 window maximum per channel over CHW data.
pub fn maxpool2x2<T: Copy + PartialOrd>(shape: Shape3, data: &[T]) -> Result<(Shape3, Vec<T>)> {
    if !shape.h.is_multiple_of(2) || !shape.w.is_multiple_of(2) {
        return Err(Error::Shape(format!(
            "maxpool needs even dimensions, got {}x{}",
            shape.h, shape.w
        )));
    }
    if data.len() != shape.len() {
        return Err(Error::Shape(format!("{} values for {shape}", data.len())));
    }
    let out = Shape3::new(shape.c, shape.h / 2, shape.w / 2);
    let mut v = Vec::with_capacity(out.len());
    for c in 0..out.c {
        for y in 0..out.h {
            for x in 0..out.w {
                let mut m = data[shape.index(c, 2 * y, 2 * x)];
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let t = data[shape.index(c, 2 * y + dy, 2 * x + dx)];
                    if t > m {
                        m = t;
                    }
                }
                v.push(m);
            }
        }
    }
    Ok((out, v))
}

pub fn maxpool_act(t: &ActTensor) -> Result<ActTensor> {
    let (shape, data) = maxpool2x2(t.shape, &t.data)?;
    ActTensor::new(shape, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn delta_kernel_passes_value_through() {
        let input = FloatTensor::new(Shape3::new(1, 1, 1), vec![5.0]).unwrap();
        let mut k = vec![0.0; 9];
        k[4] = 1.0;
        let out = conv2d_float(&input, &k, &[0.0], 3, 1).unwrap();
        assert_eq!(out.data, [5.0]);
    }

    #[test]
    fn zero_weights_give_the_bias() {
        let input = FloatTensor::new(Shape3::new(2, 3, 3), vec![1.5; 18]).unwrap();
        let out = conv2d_float(&input, &[0.0; 2 * 2 * 9], &[0.25, -3.0], 3, 1).unwrap();
        assert_eq!(out.shape, Shape3::new(2, 3, 3));
        assert!(out.data[..9].iter().all(|&v| v == 0.25));
        assert!(out.data[9..].iter().all(|&v| v == -3.0));
    }

    #[test]
    fn conv_matches_padded_array_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (cin, cout, h, w) = (2, 3, 4, 4);
        let input = FloatTensor::new(
            Shape3::new(cin, h, w),
            (0..cin * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        let weights: Vec<f64> = (0..cout * cin * 9)
            .map(|_| rng.gen_range(-1.0..1.0))
            .collect();
        let bias: Vec<f64> = (0..cout).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let out = conv2d_float(&input, &weights, &bias, 3, 1).unwrap();

        // explicit zero-padded copy, then a bounds-free loop
        let mut padded = vec![vec![vec![0.0; w + 2]; h + 2]; cin];
        for (i, plane) in padded.iter_mut().enumerate() {
            for y in 0..h {
                for x in 0..w {
                    plane[y + 1][x + 1] = input.get(i, y, x);
                }
            }
        }
        for o in 0..cout {
            for y in 0..h {
                for x in 0..w {
                    let mut s = bias[o];
                    for (i, plane) in padded.iter().enumerate() {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                s += weights[o * cin * 9 + i * 9 + ky * 3 + kx]
                                    * plane[y + ky][x + kx];
                            }
                        }
                    }
                    assert!((s - out.get(o, y, x)).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn pooling_examples() {
        let (s, v) = maxpool2x2(Shape3::new(1, 2, 2), &[1u8, 2, 3, 4]).unwrap();
        assert_eq!((s, v), (Shape3::new(1, 1, 1), vec![4]));
        let (s, v) = maxpool2x2(Shape3::new(2, 4, 6), &[9u8; 48]).unwrap();
        assert_eq!(s, Shape3::new(2, 2, 3));
        assert!(v.iter().all(|&x| x == 9));
        assert!(maxpool2x2(Shape3::new(1, 3, 2), &[0u8; 6]).is_err());
    }

    #[test]
    fn pooling_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let shape = Shape3::new(3, 8, 8);
        let data: Vec<u8> = (0..shape.len()).map(|_| rng.gen()).collect();
        let (out, v) = maxpool2x2(shape, &data).unwrap();
        for c in 0..3 {
            for y in 0..4 {
                for x in 0..4 {
                    let block = [
                        data[shape.index(c, 2 * y, 2 * x)],
                        data[shape.index(c, 2 * y, 2 * x + 1)],
                        data[shape.index(c, 2 * y + 1, 2 * x)],
                        data[shape.index(c, 2 * y + 1, 2 * x + 1)],
                    ];
                    assert_eq!(v[out.index(c, y, x)], *block.iter().max().unwrap());
                }
            }
        }
    }
}
