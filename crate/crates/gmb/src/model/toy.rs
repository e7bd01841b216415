//! Trainable toy patch encoder.
//!
//! Two valid 3x3 convolutions with ReLU, global average pooling, and an
//! affine map to the embedding width. A minimal differentiable stand-in
//! for an end-to-end encoder: enough capacity to separate color/texture
//! classes on synthetic patches while keeping exact backpropagation short.

use super::linalg::{Affine, Matrix, Real};
use super::params::{ToyParams, TOY_C1, TOY_C2};

/// Channel-major (CHW) feature map / raw patch tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap<T> {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<T>,
}

impl<T: Real> FeatureMap<T> {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        FeatureMap {
            channels,
            height,
            width,
            data: vec![T::zero(); channels * height * width],
        }
    }

    /// Convert interleaved RGB bytes to a unit-range CHW tensor.
    pub fn from_rgb_bytes(width: u32, height: u32, pixels: &[u8]) -> Self {
        let (w, h) = (width as usize, height as usize);
        debug_assert_eq!(pixels.len(), w * h * 3);
        let mut data = vec![T::zero(); 3 * w * h];
        for y in 0..h {
            for x in 0..w {
                let src = 3 * (y * w + x);
                for c in 0..3 {
                    data[c * h * w + y * w + x] = T::from_f64_lossy(pixels[src + c] as f64 / 255.0);
                }
            }
        }
        FeatureMap {
            channels: 3,
            height: h,
            width: w,
            data,
        }
    }

    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> T {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    fn at_mut(&mut self, c: usize, y: usize, x: usize) -> &mut T {
        &mut self.data[(c * self.height + y) * self.width + x]
    }
}

/// Pre-activation valid 3x3 convolution. Weights are flattened
/// [c_out][c_in][3][3].
#[allow(clippy::needless_range_loop)]
fn conv3x3<T: Real>(input: &FeatureMap<T>, w: &[T], b: &[T], c_out: usize) -> FeatureMap<T> {
    let c_in = input.channels;
    let (oh, ow) = (input.height - 2, input.width - 2);
    let mut out = FeatureMap::zeros(c_out, oh, ow);
    for o in 0..c_out {
        for y in 0..oh {
            for x in 0..ow {
                let mut acc = b[o];
                for c in 0..c_in {
                    for ky in 0..3 {
                        for kx in 0..3 {
                            let wv = w[((o * c_in + c) * 3 + ky) * 3 + kx];
                            acc = acc + wv * input.at(c, y + ky, x + kx);
                        }
                    }
                }
                *out.at_mut(o, y, x) = acc;
            }
        }
    }
    out
}

fn relu<T: Real>(fm: &FeatureMap<T>) -> FeatureMap<T> {
    FeatureMap {
        channels: fm.channels,
        height: fm.height,
        width: fm.width,
        data: fm
            .data
            .iter()
            .map(|&v| if v > T::zero() { v } else { T::zero() })
            .collect(),
    }
}

/// Saved activations for one patch, enough to run the exact backward pass.
#[derive(Debug, Clone)]
pub struct ToyCache<T> {
    pub input: FeatureMap<T>,
    pub pre1: FeatureMap<T>,
    pub pre2: FeatureMap<T>,
    pub gap: Vec<T>,
}

/// Encode one patch; returns the embedding row and the cache.
#[allow(clippy::needless_range_loop)]
pub fn toy_forward<T: Real>(params: &ToyParams<T>, patch: &FeatureMap<T>) -> (Vec<T>, ToyCache<T>) {
    let pre1 = conv3x3(patch, &params.conv1_w, &params.conv1_b, TOY_C1);
    let act1 = relu(&pre1);
    let pre2 = conv3x3(&act1, &params.conv2_w, &params.conv2_b, TOY_C2);
    let act2 = relu(&pre2);
    // Global average pooling over the spatial grid.
    let spatial = (act2.height * act2.width) as f64;
    let mut gap = vec![T::zero(); TOY_C2];
    for (o, g) in gap.iter_mut().enumerate() {
        let mut acc = 0.0f64;
        for y in 0..act2.height {
            for x in 0..act2.width {
                acc += act2.at(o, y, x).as_f64();
            }
        }
        *g = T::from_f64_lossy(acc / spatial);
    }
    let gap_m = Matrix::from_vec(1, TOY_C2, gap.clone());
    let embed = params.out.forward(&gap_m);
    (
        embed.data,
        ToyCache {
            input: patch.clone(),
            pre1,
            pre2,
            gap,
        },
    )
}

/// Gradients of the toy encoder tensors for one patch, accumulated into the
/// provided buffers. `d_embed` is the loss gradient w.r.t. the patch's
/// embedding row.
#[allow(clippy::too_many_arguments, clippy::needless_range_loop)]
pub fn toy_backward<T: Real>(
    params: &ToyParams<T>,
    cache: &ToyCache<T>,
    d_embed: &[T],
    dw1: &mut [T],
    db1: &mut [T],
    dw2: &mut [T],
    db2: &mut [T],
    dout: &mut Affine<T>,
) {
    // Output affine.
    let gap_m = Matrix::from_vec(1, TOY_C2, cache.gap.clone());
    let dy = Matrix::from_vec(1, d_embed.len(), d_embed.to_vec());
    Affine::accumulate_grads(&gap_m, &dy, &mut dout.w, &mut dout.b);
    let dgap = params.out.backward_input(&dy);

    // Average pooling spreads the gradient uniformly; ReLU masks it.
    let (h2, w2) = (cache.pre2.height, cache.pre2.width);
    let spatial = T::from_f64_lossy((h2 * w2) as f64);
    let mut dpre2 = FeatureMap::zeros(TOY_C2, h2, w2);
    for o in 0..TOY_C2 {
        let per_cell = dgap.get(0, o) / spatial;
        for y in 0..h2 {
            for x in 0..w2 {
                if cache.pre2.at(o, y, x) > T::zero() {
                    *dpre2.at_mut(o, y, x) = per_cell;
                }
            }
        }
    }

    // conv2 backward against act1 = relu(pre1).
    let act1 = relu(&cache.pre1);
    let mut dact1 = FeatureMap::zeros(TOY_C1, act1.height, act1.width);
    for o in 0..TOY_C2 {
        for y in 0..h2 {
            for x in 0..w2 {
                let dv = dpre2.at(o, y, x);
                if dv == T::zero() {
                    continue;
                }
                db2[o] = db2[o] + dv;
                for c in 0..TOY_C1 {
                    for ky in 0..3 {
                        for kx in 0..3 {
                            let wi = ((o * TOY_C1 + c) * 3 + ky) * 3 + kx;
                            dw2[wi] = dw2[wi] + dv * act1.at(c, y + ky, x + kx);
                            *dact1.at_mut(c, y + ky, x + kx) =
                                dact1.at(c, y + ky, x + kx) + dv * params.conv2_w[wi];
                        }
                    }
                }
            }
        }
    }

    // conv1 backward against the raw input.
    let (h1, w1) = (cache.pre1.height, cache.pre1.width);
    for o in 0..TOY_C1 {
        for y in 0..h1 {
            for x in 0..w1 {
                if cache.pre1.at(o, y, x) <= T::zero() {
                    continue;
                }
                let dv = dact1.at(o, y, x);
                if dv == T::zero() {
                    continue;
                }
                db1[o] = db1[o] + dv;
                for c in 0..cache.input.channels {
                    for ky in 0..3 {
                        for kx in 0..3 {
                            let wi = ((o * cache.input.channels + c) * 3 + ky) * 3 + kx;
                            dw1[wi] = dw1[wi] + dv * cache.input.at(c, y + ky, x + kx);
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::params::{init_params, EncoderSpec, MilParams};

    fn random_patch(seed: u64, side: usize) -> FeatureMap<f64> {
        use rand::Rng;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(seed);
        let mut fm = FeatureMap::zeros(3, side, side);
        for v in fm.data.iter_mut() {
            *v = rng.random_range(0.0..1.0);
        }
        fm
    }

    #[test]
    fn forward_shapes() {
        let params: MilParams<f64> = init_params(&EncoderSpec::toy(12), 5);
        let toy = params.toy.as_ref().unwrap();
        let (embed, cache) = toy_forward(toy, &random_patch(1, 9));
        assert_eq!(embed.len(), 12);
        assert_eq!((cache.pre1.channels, cache.pre1.height), (TOY_C1, 7));
        assert_eq!((cache.pre2.channels, cache.pre2.height), (TOY_C2, 5));
    }

    #[test]
    fn constant_patch_constant_embedding() {
        // GAP over a translation-invariant input makes the embedding
        // independent of the patch size.
        let params: MilParams<f64> = init_params(&EncoderSpec::toy(6), 2);
        let toy = params.toy.as_ref().unwrap();
        let mut a = FeatureMap::zeros(3, 7, 7);
        for v in a.data.iter_mut() {
            *v = 0.4;
        }
        let mut b = FeatureMap::zeros(3, 11, 11);
        for v in b.data.iter_mut() {
            *v = 0.4;
        }
        let (ea, _) = toy_forward(toy, &a);
        let (eb, _) = toy_forward(toy, &b);
        for (x, y) in ea.iter().zip(&eb) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}
