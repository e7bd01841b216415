//! Forward pass of the gated attention MIL network.
//!
//! Per patch: embedding (file lookup or toy encoder) -> projection to 1000
//! dims -> 512-dim representation u. Gated attention scores each patch with
//! tanh/sigmoid branches through 384-dim hidden maps combined by
//! element-wise multiplication; softmax turns scores into weights; the
//! slide vector is the attention-weighted mean of the u vectors. Two
//! 4-class heads (primary/secondary pattern) read the slide vector through
//! a shared ReLU hidden layer.
//!
//! Dropout (p = 0.2, inverted scaling) applies to the input embeddings,
//! to u, to each attention branch output, and to the classifier hidden
//! layer, only when a seeded dropout mode is requested.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use crate::grading::{correct_pattern_pair, GleasonPattern, GleasonScore};

use super::linalg::{softmax, Matrix, Real};
use super::params::{EncoderMode, MilParams, ATTN_HIDDEN, ATTN_IN, CLASSES};
use super::toy::{toy_forward, FeatureMap, ToyCache};
use super::ModelError;

pub const DROPOUT_P: f64 = 0.2;

/// A bag of instances: either precomputed embeddings (one row per patch)
/// or raw patch tensors for the trainable encoder.
#[derive(Debug, Clone)]
pub enum Bag<T> {
    Embeddings(Matrix<T>),
    Patches(Vec<FeatureMap<T>>),
}

impl<T: Real> Bag<T> {
    pub fn len(&self) -> usize {
        match self {
            Bag::Embeddings(m) => m.rows,
            Bag::Patches(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn one_embedding(row: Vec<T>) -> Self {
        let cols = row.len();
        Bag::Embeddings(Matrix::from_vec(1, cols, row))
    }

    pub fn one_patch(patch: FeatureMap<T>) -> Self {
        Bag::Patches(vec![patch])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DropoutMode {
    Off,
    Seeded(u64),
}

/// Output of a slide-level forward pass.
#[derive(Debug, Clone)]
pub struct SlideForward<T> {
    /// Per-patch attention weights; non-negative, summing to one.
    pub attention: Vec<T>,
    /// The pooled 512-dim slide vector.
    pub slide_vec: Vec<T>,
    pub logits_primary: Vec<T>,
    pub logits_secondary: Vec<T>,
    pub probs_primary: Vec<T>,
    pub probs_secondary: Vec<T>,
}

/// Dropout masks holding pre-scaled keep factors (0 or 1/(1-p)).
pub(crate) struct DropoutMasks<T> {
    pub e: Matrix<T>,
    pub u: Matrix<T>,
    pub t: Matrix<T>,
    pub s: Matrix<T>,
    pub hid: Vec<T>,
}

/// Intermediate activations kept for the backward pass.
pub(crate) struct Trace<T> {
    pub e: Matrix<T>,
    pub h: Matrix<T>,
    pub u: Matrix<T>,
    pub t_act: Matrix<T>,
    pub s_act: Matrix<T>,
    pub td: Matrix<T>,
    pub sd: Matrix<T>,
    pub g: Matrix<T>,
    pub attention: Vec<T>,
    pub slide_vec: Vec<T>,
    pub hid_pre: Vec<T>,
    pub hid_drop: Vec<T>,
    pub masks: Option<DropoutMasks<T>>,
    pub toy_caches: Option<Vec<ToyCache<T>>>,
}

fn sample_mask<T: Real>(rng: &mut ChaCha12Rng, len: usize) -> Vec<T> {
    let keep_scale = T::from_f64_lossy(1.0 / (1.0 - DROPOUT_P));
    (0..len)
        .map(|_| {
            if rng.random::<f64>() < DROPOUT_P {
                T::zero()
            } else {
                keep_scale
            }
        })
        .collect()
}

fn apply_mask<T: Real>(values: &Matrix<T>, mask: &Matrix<T>) -> Matrix<T> {
    let mut out = values.clone();
    for (v, m) in out.data.iter_mut().zip(&mask.data) {
        *v = *v * *m;
    }
    out
}

type Encoded<T> = (Matrix<T>, Option<Vec<ToyCache<T>>>);

/// Encode the bag into an N x embed_dim matrix (plus toy caches when the
/// encoder is trainable).
fn encode<T: Real>(params: &MilParams<T>, bag: &Bag<T>) -> Result<Encoded<T>, ModelError> {
    match (params.spec.mode, bag) {
        (EncoderMode::FrozenFile, Bag::Embeddings(m)) => {
            if m.cols != params.spec.embed_dim {
                return Err(ModelError::ShapeMismatch {
                    what: "embedding width",
                    expected: params.spec.embed_dim,
                    found: m.cols,
                });
            }
            Ok((m.clone(), None))
        }
        (EncoderMode::TrainableToy, Bag::Patches(patches)) => {
            let toy = params.toy.as_ref().expect("toy params in toy mode");
            let mut rows = Vec::with_capacity(patches.len() * params.spec.embed_dim);
            let mut caches = Vec::with_capacity(patches.len());
            for patch in patches {
                if patch.channels != 3 || patch.height < 5 || patch.width < 5 {
                    return Err(ModelError::ShapeMismatch {
                        what: "toy patch (needs 3 channels, side >= 5)",
                        expected: 5,
                        found: patch.height.min(patch.width),
                    });
                }
                let (embed, cache) = toy_forward(toy, patch);
                rows.extend_from_slice(&embed);
                caches.push(cache);
            }
            Ok((
                Matrix::from_vec(patches.len(), params.spec.embed_dim, rows),
                Some(caches),
            ))
        }
        (EncoderMode::FrozenFile, Bag::Patches(_)) => Err(ModelError::WrongBagKind {
            expected: "embeddings",
        }),
        (EncoderMode::TrainableToy, Bag::Embeddings(_)) => Err(ModelError::WrongBagKind {
            expected: "raw patches",
        }),
    }
}

pub(crate) type ForwardWithTrace<T> = (SlideForward<T>, Trace<T>);

#[allow(clippy::needless_range_loop)]
pub(crate) fn forward_trace<T: Real>(
    params: &MilParams<T>,
    bag: &Bag<T>,
    dropout: DropoutMode,
) -> Result<ForwardWithTrace<T>, ModelError> {
    if bag.is_empty() {
        return Err(ModelError::EmptyBag);
    }
    let (e0, toy_caches) = encode(params, bag)?;
    let n = e0.rows;

    let masks = match dropout {
        DropoutMode::Off => None,
        DropoutMode::Seeded(seed) => {
            let mut rng = ChaCha12Rng::seed_from_u64(seed);
            Some(DropoutMasks {
                e: Matrix::from_vec(n, e0.cols, sample_mask(&mut rng, n * e0.cols)),
                u: Matrix::from_vec(n, ATTN_IN, sample_mask(&mut rng, n * ATTN_IN)),
                t: Matrix::from_vec(n, ATTN_HIDDEN, sample_mask(&mut rng, n * ATTN_HIDDEN)),
                s: Matrix::from_vec(n, ATTN_HIDDEN, sample_mask(&mut rng, n * ATTN_HIDDEN)),
                hid: sample_mask(&mut rng, super::params::HEAD_HIDDEN),
            })
        }
    };

    let e = match &masks {
        Some(m) => apply_mask(&e0, &m.e),
        None => e0,
    };
    let h = params.proj.forward(&e);
    let u0 = params.attn_pre.forward(&h);
    let u = match &masks {
        Some(m) => apply_mask(&u0, &m.u),
        None => u0,
    };

    let t_act = {
        let mut t = params.attn_tanh.forward(&u);
        for v in t.data.iter_mut() {
            *v = v.tanh();
        }
        t
    };
    let s_act = {
        let mut s = params.attn_sigm.forward(&u);
        for v in s.data.iter_mut() {
            *v = T::one() / (T::one() + (-*v).exp());
        }
        s
    };
    let td = match &masks {
        Some(m) => apply_mask(&t_act, &m.t),
        None => t_act.clone(),
    };
    let sd = match &masks {
        Some(m) => apply_mask(&s_act, &m.s),
        None => s_act.clone(),
    };
    let mut g = Matrix::zeros(n, ATTN_HIDDEN);
    for ((gv, tv), sv) in g.data.iter_mut().zip(&td.data).zip(&sd.data) {
        *gv = *tv * *sv;
    }

    let scores_m = params.attn_w.forward(&g);
    let scores: Vec<T> = (0..n).map(|i| scores_m.get(i, 0)).collect();
    let attention = softmax(&scores);

    // Attention-weighted mean of the u vectors; f64 accumulation keeps the
    // result effectively order-independent.
    let mut slide_vec = vec![T::zero(); ATTN_IN];
    for (j, sv) in slide_vec.iter_mut().enumerate() {
        let mut acc = 0.0f64;
        for i in 0..n {
            acc += attention[i].as_f64() * u.get(i, j).as_f64();
        }
        *sv = T::from_f64_lossy(acc);
    }

    let z = Matrix::from_vec(1, ATTN_IN, slide_vec.clone());
    let hid_pre = params.head_hidden.forward(&z).data;
    let hid_relu: Vec<T> = hid_pre
        .iter()
        .map(|&v| if v > T::zero() { v } else { T::zero() })
        .collect();
    let hid_drop: Vec<T> = match &masks {
        Some(m) => hid_relu.iter().zip(&m.hid).map(|(&v, &k)| v * k).collect(),
        None => hid_relu,
    };
    let hid_m = Matrix::from_vec(1, hid_drop.len(), hid_drop.clone());
    let logits_primary = params.head_primary.forward(&hid_m).data;
    let logits_secondary = params.head_secondary.forward(&hid_m).data;
    debug_assert_eq!(logits_primary.len(), CLASSES);

    let fwd = SlideForward {
        attention: attention.clone(),
        slide_vec: slide_vec.clone(),
        probs_primary: softmax(&logits_primary),
        probs_secondary: softmax(&logits_secondary),
        logits_primary,
        logits_secondary,
    };
    let trace = Trace {
        e,
        h,
        u,
        t_act,
        s_act,
        td,
        sd,
        g,
        attention,
        slide_vec,
        hid_pre,
        hid_drop,
        masks,
        toy_caches,
    };
    Ok((fwd, trace))
}

/// Run the network on a bag of patches or embeddings.
///
/// ```
/// use gmb::model::{forward_slide, init_params, Bag, DropoutMode, EncoderSpec, Matrix};
///
/// let params = init_params::<f32>(&EncoderSpec::frozen(16), 7);
/// let bag = Bag::Embeddings(Matrix::from_vec(3, 16, vec![0.1; 48]));
/// let fwd = forward_slide(&params, &bag, DropoutMode::Off).unwrap();
/// // Identical patches share the attention mass equally.
/// assert!(fwd.attention.iter().all(|&a| (a - 1.0 / 3.0).abs() < 1e-6));
/// let p: f32 = fwd.probs_primary.iter().sum();
/// assert!((p - 1.0).abs() < 1e-6);
/// ```
pub fn forward_slide<T: Real>(
    params: &MilParams<T>,
    bag: &Bag<T>,
    dropout: DropoutMode,
) -> Result<SlideForward<T>, ModelError> {
    forward_trace(params, bag, dropout).map(|(fwd, _)| fwd)
}

/// Classify a single patch by bypassing the attention pooling: identical to
/// a singleton-bag slide forward with dropout off.
pub fn forward_patch<T: Real>(
    params: &MilParams<T>,
    bag: &Bag<T>,
) -> Result<SlideForward<T>, ModelError> {
    if bag.len() != 1 {
        return Err(ModelError::NotSingleton { found: bag.len() });
    }
    forward_slide(params, bag, DropoutMode::Off)
}

/// Sign pattern of every ReLU pre-activation in the graph. A central
/// finite difference only approximates the gradient when the perturbed
/// points lie on the same smooth piece, i.e. when this pattern is stable
/// across the probe window.
pub fn relu_pattern<T: Real>(
    params: &MilParams<T>,
    bag: &Bag<T>,
    dropout: DropoutMode,
) -> Result<Vec<bool>, ModelError> {
    let (_, trace) = forward_trace(params, bag, dropout)?;
    let mut pattern = Vec::new();
    if let Some(caches) = &trace.toy_caches {
        for cache in caches {
            pattern.extend(cache.pre1.data.iter().map(|v| *v > T::zero()));
            pattern.extend(cache.pre2.data.iter().map(|v| *v > T::zero()));
        }
    }
    pattern.extend(trace.hid_pre.iter().map(|v| *v > T::zero()));
    Ok(pattern)
}

/// Argmax each head (ties toward the lower ordinal code) and correct the
/// raw pair into a valid score.
pub fn predict_patterns<T: Real>(fwd: &SlideForward<T>) -> GleasonScore {
    let argmax = |probs: &[T]| -> u8 {
        let mut best = 0usize;
        for (i, &p) in probs.iter().enumerate() {
            if p > probs[best] {
                best = i;
            }
        }
        best as u8
    };
    let p = GleasonPattern::new(argmax(&fwd.probs_primary)).expect("argmax in 0..4");
    let s = GleasonPattern::new(argmax(&fwd.probs_secondary)).expect("argmax in 0..4");
    correct_pattern_pair(p, s)
}
