//! Trainable tensors of the MIL network and their initialization.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use super::linalg::{Affine, Real};
use super::ModelError;

/// Projection width after the encoder.
pub const PROJ_DIM: usize = 1000;
/// Width of the per-patch representation entering the attention block and
/// of the pooled slide vector.
pub const ATTN_IN: usize = 512;
/// Hidden width of the gated attention branches.
pub const ATTN_HIDDEN: usize = 384;
/// Hidden width of the classifier.
pub const HEAD_HIDDEN: usize = 256;
/// Output classes per head: benign plus patterns 3, 4, 5.
pub const CLASSES: usize = 4;
/// Toy encoder channel widths.
pub const TOY_C1: usize = 8;
pub const TOY_C2: usize = 16;

/// How patch features are produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderMode {
    /// Precomputed embeddings read from files; no encoder parameters.
    FrozenFile,
    /// A small trainable convolutional encoder over raw patches.
    TrainableToy,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderSpec {
    pub mode: EncoderMode,
    pub embed_dim: usize,
}

impl EncoderSpec {
    pub fn frozen(embed_dim: usize) -> Self {
        EncoderSpec {
            mode: EncoderMode::FrozenFile,
            embed_dim,
        }
    }

    pub fn toy(embed_dim: usize) -> Self {
        EncoderSpec {
            mode: EncoderMode::TrainableToy,
            embed_dim,
        }
    }
}

impl Default for EncoderSpec {
    fn default() -> Self {
        EncoderSpec {
            mode: EncoderMode::TrainableToy,
            embed_dim: 64,
        }
    }
}

/// Toy encoder: two valid 3x3 convolutions with ReLU, global average
/// pooling, and an affine map to the embedding width.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyParams<T> {
    /// conv1 weights, flattened [TOY_C1][3][3][3].
    pub conv1_w: Vec<T>,
    pub conv1_b: Vec<T>,
    /// conv2 weights, flattened [TOY_C2][TOY_C1][3][3].
    pub conv2_w: Vec<T>,
    pub conv2_b: Vec<T>,
    pub out: Affine<T>,
}

/// All trainable tensors of the network.
#[derive(Debug, Clone, PartialEq)]
pub struct MilParams<T> {
    pub spec: EncoderSpec,
    pub toy: Option<ToyParams<T>>,
    pub proj: Affine<T>,
    pub attn_pre: Affine<T>,
    pub attn_tanh: Affine<T>,
    pub attn_sigm: Affine<T>,
    pub attn_w: Affine<T>,
    pub head_hidden: Affine<T>,
    pub head_primary: Affine<T>,
    pub head_secondary: Affine<T>,
}

fn xavier_fill<T: Real>(rng: &mut ChaCha12Rng, fan_in: usize, fan_out: usize, out: &mut [T]) {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    for v in out.iter_mut() {
        *v = T::from_f64_lossy(rng.random_range(-bound..bound));
    }
}

/// Xavier-uniform weights, zero biases; bitwise deterministic per seed.
pub fn init_params<T: Real>(spec: &EncoderSpec, seed: u64) -> MilParams<T> {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let affine = |fan_in: usize, fan_out: usize, rng: &mut ChaCha12Rng| {
        let mut a = Affine::zeros(fan_in, fan_out);
        xavier_fill(rng, fan_in, fan_out, &mut a.w.data);
        a
    };
    let toy = match spec.mode {
        EncoderMode::FrozenFile => None,
        EncoderMode::TrainableToy => {
            let mut conv1_w = vec![T::zero(); TOY_C1 * 3 * 3 * 3];
            xavier_fill(&mut rng, 3 * 9, TOY_C1 * 9, &mut conv1_w);
            let mut conv2_w = vec![T::zero(); TOY_C2 * TOY_C1 * 3 * 3];
            xavier_fill(&mut rng, TOY_C1 * 9, TOY_C2 * 9, &mut conv2_w);
            let out = affine(TOY_C2, spec.embed_dim, &mut rng);
            Some(ToyParams {
                conv1_w,
                conv1_b: vec![T::zero(); TOY_C1],
                conv2_w,
                conv2_b: vec![T::zero(); TOY_C2],
                out,
            })
        }
    };
    MilParams {
        spec: *spec,
        toy,
        proj: affine(spec.embed_dim, PROJ_DIM, &mut rng),
        attn_pre: affine(PROJ_DIM, ATTN_IN, &mut rng),
        attn_tanh: affine(ATTN_IN, ATTN_HIDDEN, &mut rng),
        attn_sigm: affine(ATTN_IN, ATTN_HIDDEN, &mut rng),
        attn_w: affine(ATTN_HIDDEN, 1, &mut rng),
        head_hidden: affine(ATTN_IN, HEAD_HIDDEN, &mut rng),
        head_primary: affine(HEAD_HIDDEN, CLASSES, &mut rng),
        head_secondary: affine(HEAD_HIDDEN, CLASSES, &mut rng),
    }
}

impl<T: Real> MilParams<T> {
    /// Canonical tensor order; encoder tensors first when trainable.
    pub fn tensor_names(&self) -> Vec<&'static str> {
        let mut names = Vec::new();
        if self.toy.is_some() {
            names.extend([
                "toy.conv1.w",
                "toy.conv1.b",
                "toy.conv2.w",
                "toy.conv2.b",
                "toy.out.w",
                "toy.out.b",
            ]);
        }
        names.extend([
            "proj.w",
            "proj.b",
            "attn_pre.w",
            "attn_pre.b",
            "attn_tanh.w",
            "attn_tanh.b",
            "attn_sigm.w",
            "attn_sigm.b",
            "attn_w.w",
            "attn_w.b",
            "head_hidden.w",
            "head_hidden.b",
            "head_primary.w",
            "head_primary.b",
            "head_secondary.w",
            "head_secondary.b",
        ]);
        names
    }

    pub fn tensor(&self, name: &str) -> &[T] {
        match name {
            "toy.conv1.w" => &self.toy.as_ref().unwrap().conv1_w,
            "toy.conv1.b" => &self.toy.as_ref().unwrap().conv1_b,
            "toy.conv2.w" => &self.toy.as_ref().unwrap().conv2_w,
            "toy.conv2.b" => &self.toy.as_ref().unwrap().conv2_b,
            "toy.out.w" => &self.toy.as_ref().unwrap().out.w.data,
            "toy.out.b" => &self.toy.as_ref().unwrap().out.b,
            "proj.w" => &self.proj.w.data,
            "proj.b" => &self.proj.b,
            "attn_pre.w" => &self.attn_pre.w.data,
            "attn_pre.b" => &self.attn_pre.b,
            "attn_tanh.w" => &self.attn_tanh.w.data,
            "attn_tanh.b" => &self.attn_tanh.b,
            "attn_sigm.w" => &self.attn_sigm.w.data,
            "attn_sigm.b" => &self.attn_sigm.b,
            "attn_w.w" => &self.attn_w.w.data,
            "attn_w.b" => &self.attn_w.b,
            "head_hidden.w" => &self.head_hidden.w.data,
            "head_hidden.b" => &self.head_hidden.b,
            "head_primary.w" => &self.head_primary.w.data,
            "head_primary.b" => &self.head_primary.b,
            "head_secondary.w" => &self.head_secondary.w.data,
            "head_secondary.b" => &self.head_secondary.b,
            other => panic!("unknown tensor {other}"),
        }
    }

    pub fn tensor_mut(&mut self, name: &str) -> &mut Vec<T> {
        match name {
            "toy.conv1.w" => &mut self.toy.as_mut().unwrap().conv1_w,
            "toy.conv1.b" => &mut self.toy.as_mut().unwrap().conv1_b,
            "toy.conv2.w" => &mut self.toy.as_mut().unwrap().conv2_w,
            "toy.conv2.b" => &mut self.toy.as_mut().unwrap().conv2_b,
            "toy.out.w" => &mut self.toy.as_mut().unwrap().out.w.data,
            "toy.out.b" => &mut self.toy.as_mut().unwrap().out.b,
            "proj.w" => &mut self.proj.w.data,
            "proj.b" => &mut self.proj.b,
            "attn_pre.w" => &mut self.attn_pre.w.data,
            "attn_pre.b" => &mut self.attn_pre.b,
            "attn_tanh.w" => &mut self.attn_tanh.w.data,
            "attn_tanh.b" => &mut self.attn_tanh.b,
            "attn_sigm.w" => &mut self.attn_sigm.w.data,
            "attn_sigm.b" => &mut self.attn_sigm.b,
            "attn_w.w" => &mut self.attn_w.w.data,
            "attn_w.b" => &mut self.attn_w.b,
            "head_hidden.w" => &mut self.head_hidden.w.data,
            "head_hidden.b" => &mut self.head_hidden.b,
            "head_primary.w" => &mut self.head_primary.w.data,
            "head_primary.b" => &mut self.head_primary.b,
            "head_secondary.w" => &mut self.head_secondary.w.data,
            "head_secondary.b" => &mut self.head_secondary.b,
            other => panic!("unknown tensor {other}"),
        }
    }

    /// Logical shape of a tensor (biases report one row).
    pub fn tensor_shape(&self, name: &str) -> (usize, usize) {
        let embed = self.spec.embed_dim;
        match name {
            "toy.conv1.w" => (TOY_C1, 3 * 3 * 3),
            "toy.conv1.b" => (1, TOY_C1),
            "toy.conv2.w" => (TOY_C2, TOY_C1 * 3 * 3),
            "toy.conv2.b" => (1, TOY_C2),
            "toy.out.w" => (TOY_C2, embed),
            "toy.out.b" => (1, embed),
            "proj.w" => (embed, PROJ_DIM),
            "proj.b" => (1, PROJ_DIM),
            "attn_pre.w" => (PROJ_DIM, ATTN_IN),
            "attn_pre.b" => (1, ATTN_IN),
            "attn_tanh.w" => (ATTN_IN, ATTN_HIDDEN),
            "attn_tanh.b" => (1, ATTN_HIDDEN),
            "attn_sigm.w" => (ATTN_IN, ATTN_HIDDEN),
            "attn_sigm.b" => (1, ATTN_HIDDEN),
            "attn_w.w" => (ATTN_HIDDEN, 1),
            "attn_w.b" => (1, 1),
            "head_hidden.w" => (ATTN_IN, HEAD_HIDDEN),
            "head_hidden.b" => (1, HEAD_HIDDEN),
            "head_primary.w" => (HEAD_HIDDEN, CLASSES),
            "head_primary.b" => (1, CLASSES),
            "head_secondary.w" => (HEAD_HIDDEN, CLASSES),
            "head_secondary.b" => (1, CLASSES),
            other => panic!("unknown tensor {other}"),
        }
    }

    pub fn check_finite(&self) -> Result<(), ModelError> {
        for name in self.tensor_names() {
            if self.tensor(name).iter().any(|v| !v.is_finite()) {
                return Err(ModelError::NonFinite {
                    tensor: name.to_string(),
                });
            }
        }
        Ok(())
    }
}

/// Gradients in the same tensor order as the owning [`MilParams`].
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    pub entries: Vec<(&'static str, Vec<T>)>,
}

impl<T: Real> Gradients<T> {
    pub fn zeros_like(params: &MilParams<T>) -> Self {
        Gradients {
            entries: params
                .tensor_names()
                .into_iter()
                .map(|name| (name, vec![T::zero(); params.tensor(name).len()]))
                .collect(),
        }
    }

    pub fn get(&self, name: &str) -> Option<&[T]> {
        self.entries
            .iter()
            .find(|(n, _)| *n == name)
            .map(|(_, v)| v.as_slice())
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Vec<T> {
        &mut self
            .entries
            .iter_mut()
            .find(|(n, _)| *n == name)
            .unwrap_or_else(|| panic!("unknown gradient tensor {name}"))
            .1
    }
}

/// f64 accumulator for summing per-WSI gradients order-independently.
#[derive(Debug, Clone)]
pub struct GradAccumulator {
    pub entries: Vec<(&'static str, Vec<f64>)>,
    pub count: usize,
}

impl GradAccumulator {
    pub fn zeros_like<T: Real>(params: &MilParams<T>) -> Self {
        GradAccumulator {
            entries: params
                .tensor_names()
                .into_iter()
                .map(|name| (name, vec![0.0f64; params.tensor(name).len()]))
                .collect(),
            count: 0,
        }
    }

    pub fn add<T: Real>(&mut self, grads: &Gradients<T>) {
        debug_assert_eq!(self.entries.len(), grads.entries.len());
        for ((_, acc), (_, g)) in self.entries.iter_mut().zip(&grads.entries) {
            for (a, v) in acc.iter_mut().zip(g) {
                *a += v.as_f64();
            }
        }
        self.count += 1;
    }

    /// Scale and convert to the target element type.
    pub fn finish<T: Real>(&self, scale: f64) -> Gradients<T> {
        Gradients {
            entries: self
                .entries
                .iter()
                .map(|(name, acc)| {
                    (
                        *name,
                        acc.iter().map(|&v| T::from_f64_lossy(v * scale)).collect(),
                    )
                })
                .collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_deterministic_per_seed() {
        let spec = EncoderSpec::toy(16);
        let a: MilParams<f32> = init_params(&spec, 7);
        let b: MilParams<f32> = init_params(&spec, 7);
        assert_eq!(a, b);
        let c: MilParams<f32> = init_params(&spec, 8);
        assert_ne!(a, c);
    }

    #[test]
    fn xavier_bound_holds_and_biases_are_zero() {
        let spec = EncoderSpec::frozen(32);
        let params: MilParams<f64> = init_params(&spec, 3);
        for name in params.tensor_names() {
            let (rows, cols) = params.tensor_shape(name);
            assert_eq!(params.tensor(name).len(), rows * cols, "{name}");
            if name.ends_with(".b") {
                assert!(params.tensor(name).iter().all(|&v| v == 0.0), "{name}");
            }
        }
        let bound = (6.0 / (params.spec.embed_dim + PROJ_DIM) as f64).sqrt();
        assert!(params.proj.w.data.iter().all(|&v| v.abs() <= bound));
        // Weights actually spread over the interval rather than collapsing.
        let max = params
            .proj
            .w
            .data
            .iter()
            .cloned()
            .fold(0.0f64, |a, v| a.max(v.abs()));
        assert!(max > bound * 0.5);
    }

    #[test]
    fn frozen_mode_has_no_encoder_tensors() {
        let params: MilParams<f32> = init_params(&EncoderSpec::frozen(8), 0);
        assert!(params.toy.is_none());
        assert!(params.tensor_names().iter().all(|n| !n.starts_with("toy.")));
        let toy: MilParams<f32> = init_params(&EncoderSpec::toy(8), 0);
        assert!(toy.tensor_names().iter().any(|n| n.starts_with("toy.")));
    }

    #[test]
    fn accumulator_matches_sequential_sum() {
        let spec = EncoderSpec::frozen(4);
        let params: MilParams<f64> = init_params(&spec, 1);
        let mut acc = GradAccumulator::zeros_like(&params);
        let mut g = Gradients::zeros_like(&params);
        for v in g.get_mut("proj.w").iter_mut() {
            *v = 0.25;
        }
        acc.add(&g);
        acc.add(&g);
        let out: Gradients<f64> = acc.finish(0.5);
        assert!(out.get("proj.w").unwrap().iter().all(|&v| v == 0.25));
        assert_eq!(acc.count, 2);
    }
}
