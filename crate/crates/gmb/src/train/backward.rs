//! Exact gradients of the bag loss with respect to every trainable tensor.
//!
//! Hand-derived reverse pass over the forward graph: softmax cross-entropy
//! on both heads, the classifier, the attention-weighted mean (which
//! couples the softmax over patch scores with the pooled vector), both
//! gated branches, the projection, and the toy encoder when it is
//! trainable. Dropout masks recorded by the forward pass replay exactly.

use crate::grading::GleasonScore;
use crate::model::{
    forward_trace, toy_backward, Bag, DropoutMode, Gradients, Matrix, MilParams, Real, Trace,
    ATTN_HIDDEN, ATTN_IN, CLASSES,
};

use super::loss::loss_from_logits;
use super::TrainError;

fn softmax_ce_grad<T: Real>(logits: &[T], target: u8, scale: f64) -> Vec<T> {
    let probs = crate::model::softmax(logits);
    probs
        .iter()
        .enumerate()
        .map(|(j, &p)| {
            let indicator = if j == target as usize { 1.0 } else { 0.0 };
            T::from_f64_lossy((p.as_f64() - indicator) * scale)
        })
        .collect()
}

/// Elementwise product with an optional dropout mask (identity when off).
fn masked<T: Real>(values: Matrix<T>, mask: Option<&Matrix<T>>) -> Matrix<T> {
    match mask {
        None => values,
        Some(m) => {
            let mut out = values;
            for (v, k) in out.data.iter_mut().zip(&m.data) {
                *v = *v * *k;
            }
            out
        }
    }
}

/// Gradient of the accumulated bag loss. Returns the loss value alongside
/// the gradients; the encoder entries exist only in trainable-toy mode.
pub fn backward<T: Real>(
    params: &MilParams<T>,
    bag: &Bag<T>,
    label: GleasonScore,
    dropout: DropoutMode,
    accumulation_interval: u32,
) -> Result<(f64, Gradients<T>), TrainError> {
    let (fwd, trace) = forward_trace(params, bag, dropout)?;
    let loss = loss_from_logits(
        &fwd.logits_primary,
        &fwd.logits_secondary,
        label,
        accumulation_interval,
    );
    let mut grads = Gradients::zeros_like(params);
    let Trace {
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
    } = trace;
    let n = u.rows;
    let scale = 1.0 / accumulation_interval as f64;

    // Heads.
    let dlogits_p = Matrix::from_vec(
        1,
        CLASSES,
        softmax_ce_grad(&fwd.logits_primary, label.primary().code(), scale),
    );
    let dlogits_s = Matrix::from_vec(
        1,
        CLASSES,
        softmax_ce_grad(&fwd.logits_secondary, label.secondary().code(), scale),
    );
    let hid_m = Matrix::from_vec(1, hid_drop.len(), hid_drop.clone());
    {
        let mut dw = Matrix::zeros(hid_drop.len(), CLASSES);
        let mut db = vec![T::zero(); CLASSES];
        crate::model::Affine::accumulate_grads(&hid_m, &dlogits_p, &mut dw, &mut db);
        grads.get_mut("head_primary.w").copy_from_slice(&dw.data);
        grads.get_mut("head_primary.b").copy_from_slice(&db);
    }
    {
        let mut dw = Matrix::zeros(hid_drop.len(), CLASSES);
        let mut db = vec![T::zero(); CLASSES];
        crate::model::Affine::accumulate_grads(&hid_m, &dlogits_s, &mut dw, &mut db);
        grads.get_mut("head_secondary.w").copy_from_slice(&dw.data);
        grads.get_mut("head_secondary.b").copy_from_slice(&db);
    }
    let mut dhid_drop = params.head_primary.backward_input(&dlogits_p);
    let dhid_s = params.head_secondary.backward_input(&dlogits_s);
    for (a, b) in dhid_drop.data.iter_mut().zip(&dhid_s.data) {
        *a = *a + *b;
    }

    // Hidden layer: dropout, then ReLU, then the affine.
    let mut dhid_pre = dhid_drop;
    if let Some(m) = &masks {
        for (v, k) in dhid_pre.data.iter_mut().zip(&m.hid) {
            *v = *v * *k;
        }
    }
    for (dv, &pre) in dhid_pre.data.iter_mut().zip(&hid_pre) {
        if pre <= T::zero() {
            *dv = T::zero();
        }
    }
    let z_m = Matrix::from_vec(1, ATTN_IN, slide_vec.clone());
    {
        let mut dw = Matrix::zeros(ATTN_IN, hid_pre.len());
        let mut db = vec![T::zero(); hid_pre.len()];
        crate::model::Affine::accumulate_grads(&z_m, &dhid_pre, &mut dw, &mut db);
        grads.get_mut("head_hidden.w").copy_from_slice(&dw.data);
        grads.get_mut("head_hidden.b").copy_from_slice(&db);
    }
    let dz = params.head_hidden.backward_input(&dhid_pre); // 1 x ATTN_IN

    // Weighted mean z = sum_i a_i u_i.
    let mut da = vec![0.0f64; n];
    let mut du = Matrix::zeros(n, ATTN_IN);
    for i in 0..n {
        let a_i = attention[i];
        let u_row = u.row(i);
        let du_row = du.row_mut(i);
        let mut dot = 0.0f64;
        for (j, (&uv, d)) in u_row.iter().zip(du_row.iter_mut()).enumerate() {
            let dz_j = dz.get(0, j);
            *d = a_i * dz_j;
            dot += uv.as_f64() * dz_j.as_f64();
        }
        da[i] = dot;
    }

    // Softmax over attention scores.
    let weighted: f64 = attention
        .iter()
        .zip(&da)
        .map(|(&a, &d)| a.as_f64() * d)
        .sum();
    let dscores = Matrix::from_vec(
        n,
        1,
        attention
            .iter()
            .zip(&da)
            .map(|(&a, &d)| T::from_f64_lossy(a.as_f64() * (d - weighted)))
            .collect(),
    );

    // Attention head: scores = g . w + b.
    {
        let mut dw = Matrix::zeros(ATTN_HIDDEN, 1);
        let mut db = vec![T::zero(); 1];
        crate::model::Affine::accumulate_grads(&g, &dscores, &mut dw, &mut db);
        grads.get_mut("attn_w.w").copy_from_slice(&dw.data);
        grads.get_mut("attn_w.b").copy_from_slice(&db);
    }
    let dg = params.attn_w.backward_input(&dscores); // n x ATTN_HIDDEN

    // Gate product g = td * sd.
    let mut dtd = Matrix::zeros(n, ATTN_HIDDEN);
    let mut dsd = Matrix::zeros(n, ATTN_HIDDEN);
    for ((dt, ds), ((dgv, tdv), sdv)) in dtd
        .data
        .iter_mut()
        .zip(dsd.data.iter_mut())
        .zip(dg.data.iter().zip(&td.data).zip(&sd.data))
    {
        *dt = *dgv * *sdv;
        *ds = *dgv * *tdv;
    }
    let dt_act = masked(dtd, masks.as_ref().map(|m| &m.t));
    let ds_act = masked(dsd, masks.as_ref().map(|m| &m.s));

    // Branch activations.
    let mut dt_pre = dt_act;
    for (dv, &t) in dt_pre.data.iter_mut().zip(&t_act.data) {
        *dv = *dv * (T::one() - t * t);
    }
    let mut ds_pre = ds_act;
    for (dv, &s) in ds_pre.data.iter_mut().zip(&s_act.data) {
        *dv = *dv * s * (T::one() - s);
    }
    {
        let mut dw = Matrix::zeros(ATTN_IN, ATTN_HIDDEN);
        let mut db = vec![T::zero(); ATTN_HIDDEN];
        crate::model::Affine::accumulate_grads(&u, &dt_pre, &mut dw, &mut db);
        grads.get_mut("attn_tanh.w").copy_from_slice(&dw.data);
        grads.get_mut("attn_tanh.b").copy_from_slice(&db);
    }
    {
        let mut dw = Matrix::zeros(ATTN_IN, ATTN_HIDDEN);
        let mut db = vec![T::zero(); ATTN_HIDDEN];
        crate::model::Affine::accumulate_grads(&u, &ds_pre, &mut dw, &mut db);
        grads.get_mut("attn_sigm.w").copy_from_slice(&dw.data);
        grads.get_mut("attn_sigm.b").copy_from_slice(&db);
    }
    // u receives gradient from both branches and from the weighted mean.
    let du_tanh = params.attn_tanh.backward_input(&dt_pre);
    let du_sigm = params.attn_sigm.backward_input(&ds_pre);
    for ((a, b), c) in du.data.iter_mut().zip(&du_tanh.data).zip(&du_sigm.data) {
        *a = *a + *b + *c;
    }

    // Pre-attention dropout, then the 1000 -> 512 map.
    let du0 = masked(du, masks.as_ref().map(|m| &m.u));
    {
        let mut dw = Matrix::zeros(crate::model::PROJ_DIM, ATTN_IN);
        let mut db = vec![T::zero(); ATTN_IN];
        crate::model::Affine::accumulate_grads(&h, &du0, &mut dw, &mut db);
        grads.get_mut("attn_pre.w").copy_from_slice(&dw.data);
        grads.get_mut("attn_pre.b").copy_from_slice(&db);
    }
    let dh = params.attn_pre.backward_input(&du0);

    // Projection.
    {
        let mut dw = Matrix::zeros(params.spec.embed_dim, crate::model::PROJ_DIM);
        let mut db = vec![T::zero(); crate::model::PROJ_DIM];
        crate::model::Affine::accumulate_grads(&e, &dh, &mut dw, &mut db);
        grads.get_mut("proj.w").copy_from_slice(&dw.data);
        grads.get_mut("proj.b").copy_from_slice(&db);
    }

    // Encoder, when trainable.
    if let Some(caches) = &toy_caches {
        let de = params.proj.backward_input(&dh);
        let de0 = masked(de, masks.as_ref().map(|m| &m.e));
        let toy = params.toy.as_ref().expect("toy params present");
        let embed = params.spec.embed_dim;
        let mut dw1 = vec![T::zero(); toy.conv1_w.len()];
        let mut db1 = vec![T::zero(); toy.conv1_b.len()];
        let mut dw2 = vec![T::zero(); toy.conv2_w.len()];
        let mut db2 = vec![T::zero(); toy.conv2_b.len()];
        let mut dout = crate::model::Affine::zeros(crate::model::TOY_C2, embed);
        for (i, cache) in caches.iter().enumerate() {
            toy_backward(
                toy,
                cache,
                de0.row(i),
                &mut dw1,
                &mut db1,
                &mut dw2,
                &mut db2,
                &mut dout,
            );
        }
        grads.get_mut("toy.conv1.w").copy_from_slice(&dw1);
        grads.get_mut("toy.conv1.b").copy_from_slice(&db1);
        grads.get_mut("toy.conv2.w").copy_from_slice(&dw2);
        grads.get_mut("toy.conv2.b").copy_from_slice(&db2);
        grads.get_mut("toy.out.w").copy_from_slice(&dout.w.data);
        grads.get_mut("toy.out.b").copy_from_slice(&dout.b);
    }

    Ok((loss, grads))
}
