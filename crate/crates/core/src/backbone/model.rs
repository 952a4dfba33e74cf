//! Batched forward and backward passes. A batch stacks `n` windows of
//! `L` hours into an (n·L) × d matrix; attention runs per window and head.

use ndarray::{s, Array1, Array2, Axis, Zip};

use super::params::{c, AdapterParams, BackboneParams, LayerParams, Scalar};

pub const LN_EPS: f64 = 1e-5;

/// Which rows of each window a layer must produce.
#[derive(Debug, Clone)]
pub enum Rows {
    All,
    /// One row per window at the given in-window position.
    One(Vec<usize>),
}

impl Rows {
    fn per_window(&self, len: usize) -> usize {
        match self {
            Rows::All => len,
            Rows::One(_) => 1,
        }
    }

    fn global(&self, n: usize, len: usize) -> Vec<usize> {
        match self {
            Rows::All => (0..n * len).collect(),
            Rows::One(pos) => pos.iter().enumerate().map(|(w, &p)| w * len + p).collect(),
        }
    }
}

struct LnCache<T> {
    xhat: Array2<T>,
    inv_std: Array1<T>,
}

fn ln_forward<T: Scalar>(x: &Array2<T>, g: &Array1<T>, b: &Array1<T>) -> (Array2<T>, LnCache<T>) {
    let d = T::from_usize(x.ncols()).unwrap();
    let eps: T = c(LN_EPS);
    let mut xhat = x.clone();
    let mut inv_std = Array1::zeros(x.nrows());
    for (mut row, is) in xhat.rows_mut().into_iter().zip(inv_std.iter_mut()) {
        let mean = row.sum() / d;
        row.mapv_inplace(|v| v - mean);
        let var = row.iter().fold(T::zero(), |a, &v| a + v * v) / d;
        *is = T::one() / (var + eps).sqrt();
        let s = *is;
        row.mapv_inplace(|v| v * s);
    }
    let y = &xhat * g + b;
    (y, LnCache { xhat, inv_std })
}

fn ln_backward<T: Scalar>(
    dy: &Array2<T>,
    g: &Array1<T>,
    cache: &LnCache<T>,
    dg: &mut Array1<T>,
    db: &mut Array1<T>,
) -> Array2<T> {
    *dg += &(dy * &cache.xhat).sum_axis(Axis(0));
    *db += &dy.sum_axis(Axis(0));
    let d = T::from_usize(dy.ncols()).unwrap();
    let mut dx = dy * g;
    for ((mut row, xh), &is) in dx.rows_mut().into_iter().zip(cache.xhat.rows()).zip(&cache.inv_std) {
        let m1 = row.sum() / d;
        let m2 = row.iter().zip(xh).fold(T::zero(), |a, (&u, &v)| a + u * v) / d;
        Zip::from(&mut row)
            .and(&xh)
            .for_each(|r, &x| *r = (*r - m1 - x * m2) * is);
    }
    dx
}

fn add_bias<T: Scalar>(mut x: Array2<T>, b: &Array1<T>) -> Array2<T> {
    x += b;
    x
}

fn relu<T: Scalar>(x: &Array2<T>) -> Array2<T> {
    x.mapv(|v| if v > T::zero() { v } else { T::zero() })
}

fn relu_backward<T: Scalar>(mut d: Array2<T>, pre: &Array2<T>) -> Array2<T> {
    Zip::from(&mut d).and(pre).for_each(|g, &z| {
        if z <= T::zero() {
            *g = T::zero();
        }
    });
    d
}

fn softmax_rows<T: Scalar>(s: &mut Array2<T>) {
    for mut row in s.rows_mut() {
        let max = row.fold(T::neg_infinity(), |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
}

pub struct LayerCache<T> {
    rows: Rows,
    qidx: Vec<usize>,
    ln1: LnCache<T>,
    a: Array2<T>,
    q_in: Array2<T>,
    q: Array2<T>,
    k: Array2<T>,
    v: Array2<T>,
    probs: Vec<Array2<T>>,
    attn: Array2<T>,
    ln2: LnCache<T>,
    b: Array2<T>,
    z1: Array2<T>,
    r1: Array2<T>,
}

pub fn layer_forward<T: Scalar>(
    p: &LayerParams<T>,
    h: &Array2<T>,
    n: usize,
    len: usize,
    heads: usize,
    rows: Rows,
) -> (Array2<T>, LayerCache<T>) {
    let d = h.ncols();
    let dh = d / heads;
    let scale: T = c(1.0 / (dh as f64).sqrt());
    let lq = rows.per_window(len);
    let qidx = rows.global(n, len);
    let (a, ln1) = ln_forward(h, &p.ln1_g, &p.ln1_b);
    let q_in = match rows {
        Rows::All => a.clone(),
        Rows::One(_) => a.select(Axis(0), &qidx),
    };
    let q = add_bias(q_in.dot(&p.wq), &p.bq);
    let k = add_bias(a.dot(&p.wk), &p.bk);
    let v = add_bias(a.dot(&p.wv), &p.bv);
    let mut attn = Array2::zeros((n * lq, d));
    let mut probs = Vec::with_capacity(n * heads);
    for w in 0..n {
        for hd in 0..heads {
            let cols = hd * dh..(hd + 1) * dh;
            let qs = q.slice(s![w * lq..(w + 1) * lq, cols.clone()]);
            let ks = k.slice(s![w * len..(w + 1) * len, cols.clone()]);
            let vs = v.slice(s![w * len..(w + 1) * len, cols.clone()]);
            let mut sc = qs.dot(&ks.t());
            sc.mapv_inplace(|x| x * scale);
            softmax_rows(&mut sc);
            attn.slice_mut(s![w * lq..(w + 1) * lq, cols]).assign(&sc.dot(&vs));
            probs.push(sc);
        }
    }
    let h_sel = match rows {
        Rows::All => h.clone(),
        Rows::One(_) => h.select(Axis(0), &qidx),
    };
    let h_res = h_sel + add_bias(attn.dot(&p.wo), &p.bo);
    let (b, ln2) = ln_forward(&h_res, &p.ln2_g, &p.ln2_b);
    let z1 = add_bias(b.dot(&p.w1), &p.b1);
    let r1 = relu(&z1);
    let out = &h_res + &add_bias(r1.dot(&p.w2), &p.b2);
    let cache = LayerCache {
        rows,
        qidx,
        ln1,
        a,
        q_in,
        q,
        k,
        v,
        probs,
        attn,
        ln2,
        b,
        z1,
        r1,
    };
    (out, cache)
}

/// Accumulates parameter gradients into `g` and returns d(input).
pub fn layer_backward<T: Scalar>(
    p: &LayerParams<T>,
    cache: &LayerCache<T>,
    dout: &Array2<T>,
    n: usize,
    len: usize,
    heads: usize,
    g: &mut LayerParams<T>,
) -> Array2<T> {
    let d = dout.ncols();
    let dh = d / heads;
    let scale: T = c(1.0 / (dh as f64).sqrt());
    let lq = cache.rows.per_window(len);

    // feed-forward sublayer
    g.w2 += &cache.r1.t().dot(dout);
    g.b2 += &dout.sum_axis(Axis(0));
    let dz1 = relu_backward(dout.dot(&p.w2.t()), &cache.z1);
    g.w1 += &cache.b.t().dot(&dz1);
    g.b1 += &dz1.sum_axis(Axis(0));
    let db = dz1.dot(&p.w1.t());
    let dres = dout + &ln_backward(&db, &p.ln2_g, &cache.ln2, &mut g.ln2_g, &mut g.ln2_b);

    // attention sublayer
    g.wo += &cache.attn.t().dot(&dres);
    g.bo += &dres.sum_axis(Axis(0));
    let dattn = dres.dot(&p.wo.t());
    let mut dq = Array2::zeros(cache.q.raw_dim());
    let mut dk = Array2::zeros(cache.k.raw_dim());
    let mut dv = Array2::zeros(cache.v.raw_dim());
    for w in 0..n {
        for hd in 0..heads {
            let cols = hd * dh..(hd + 1) * dh;
            let pr = &cache.probs[w * heads + hd];
            let qrows = w * lq..(w + 1) * lq;
            let krows = w * len..(w + 1) * len;
            let dout_h = dattn.slice(s![qrows.clone(), cols.clone()]);
            let vs = cache.v.slice(s![krows.clone(), cols.clone()]);
            let ks = cache.k.slice(s![krows.clone(), cols.clone()]);
            let qs = cache.q.slice(s![qrows.clone(), cols.clone()]);
            dv.slice_mut(s![krows.clone(), cols.clone()])
                .assign(&pr.t().dot(&dout_h));
            let mut ds = dout_h.dot(&vs.t());
            for (mut drow, prow) in ds.rows_mut().into_iter().zip(pr.rows()) {
                let dot = drow.iter().zip(prow).fold(T::zero(), |a, (&x, &y)| a + x * y);
                Zip::from(&mut drow)
                    .and(&prow)
                    .for_each(|x, &pv| *x = pv * (*x - dot) * scale);
            }
            dq.slice_mut(s![qrows, cols.clone()]).assign(&ds.dot(&ks));
            dk.slice_mut(s![krows, cols]).assign(&ds.t().dot(&qs));
        }
    }
    g.wq += &cache.q_in.t().dot(&dq);
    g.bq += &dq.sum_axis(Axis(0));
    g.wk += &cache.a.t().dot(&dk);
    g.bk += &dk.sum_axis(Axis(0));
    g.wv += &cache.a.t().dot(&dv);
    g.bv += &dv.sum_axis(Axis(0));
    let dq_in = dq.dot(&p.wq.t());
    let mut da = dk.dot(&p.wk.t()) + dv.dot(&p.wv.t());
    for (r, &gi) in cache.qidx.iter().enumerate() {
        let mut row = da.row_mut(gi);
        row += &dq_in.row(r);
    }
    let mut dh_in = ln_backward(&da, &p.ln1_g, &cache.ln1, &mut g.ln1_g, &mut g.ln1_b);
    match cache.rows {
        Rows::All => dh_in += &dres,
        Rows::One(_) => {
            for (r, &gi) in cache.qidx.iter().enumerate() {
                let mut row = dh_in.row_mut(gi);
                row += &dres.row(r);
            }
        }
    }
    dh_in
}

pub struct EncoderCache<T> {
    x: Array2<T>,
    layers: Vec<LayerCache<T>>,
}

/// Run the encoder on stacked windows `x` ((n·L) × features). With
/// `Rows::One`, the last layer emits only the selected row per window.
pub fn encoder_forward<T: Scalar>(
    p: &BackboneParams<T>,
    x: &Array2<T>,
    n: usize,
    rows: Rows,
) -> (Array2<T>, EncoderCache<T>) {
    let len = p.cfg.window_len;
    let mut h = add_bias(x.dot(&p.w_in), &p.b_in);
    for w in 0..n {
        let mut blk = h.slice_mut(s![w * len..(w + 1) * len, ..]);
        blk += &p.pos;
    }
    let mut caches = Vec::with_capacity(p.layers.len());
    let last = p.layers.len() - 1;
    for (i, layer) in p.layers.iter().enumerate() {
        let r = if i == last { rows.clone() } else { Rows::All };
        let (out, cache) = layer_forward(layer, &h, n, len, p.cfg.n_heads, r);
        h = out;
        caches.push(cache);
    }
    (
        h,
        EncoderCache {
            x: x.clone(),
            layers: caches,
        },
    )
}

pub fn encoder_backward<T: Scalar>(
    p: &BackboneParams<T>,
    cache: &EncoderCache<T>,
    dout: &Array2<T>,
    n: usize,
    g: &mut BackboneParams<T>,
) {
    let len = p.cfg.window_len;
    let mut dh = dout.clone();
    for (i, layer) in p.layers.iter().enumerate().rev() {
        dh = layer_backward(layer, &cache.layers[i], &dh, n, len, p.cfg.n_heads, &mut g.layers[i]);
    }
    g.w_in += &cache.x.t().dot(&dh);
    g.b_in += &dh.sum_axis(Axis(0));
}

pub struct AdapterCache<T> {
    h: Array2<T>,
    z: Array2<T>,
    r: Array2<T>,
}

/// Adapter delta MLP(h) = relu(h·w1 + b1)·w2 + b2, row-wise.
pub fn adapter_delta<T: Scalar>(a: &AdapterParams<T>, h: &Array2<T>) -> Array2<T> {
    add_bias(relu(&add_bias(h.dot(&a.w1), &a.b1)).dot(&a.w2), &a.b2)
}

pub fn adapter_forward<T: Scalar>(a: &AdapterParams<T>, h: &Array2<T>) -> (Array2<T>, AdapterCache<T>) {
    let z = add_bias(h.dot(&a.w1), &a.b1);
    let r = relu(&z);
    let out = h + &add_bias(r.dot(&a.w2), &a.b2);
    (out, AdapterCache { h: h.clone(), z, r })
}

pub fn adapter_backward<T: Scalar>(
    a: &AdapterParams<T>,
    cache: &AdapterCache<T>,
    dout: &Array2<T>,
    g: &mut AdapterParams<T>,
) -> Array2<T> {
    g.w2 += &cache.r.t().dot(dout);
    g.b2 += &dout.sum_axis(Axis(0));
    let dz = relu_backward(dout.dot(&a.w2.t()), &cache.z);
    g.w1 += &cache.h.t().dot(&dz);
    g.b1 += &dz.sum_axis(Axis(0));
    dout + &dz.dot(&a.w1.t())
}

/// A batch of masked windows ready for the network.
pub struct MaskedBatch<T> {
    /// (n·L) × features with each masked row zeroed.
    pub x: Array2<T>,
    /// n × features: original features at the masked positions.
    pub targets: Array2<T>,
    pub mask: Vec<usize>,
}

impl<T: Scalar> MaskedBatch<T> {
    /// Build from unmasked stacked windows.
    pub fn new(mut x: Array2<T>, mask: Vec<usize>, len: usize) -> Self {
        let idx: Vec<usize> = mask.iter().enumerate().map(|(w, &m)| w * len + m).collect();
        let targets = x.select(Axis(0), &idx);
        for &i in &idx {
            x.row_mut(i).fill(T::zero());
        }
        MaskedBatch { x, targets, mask }
    }

    pub fn len(&self) -> usize {
        self.mask.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mask.is_empty()
    }
}

/// Per-window losses (mean over feature dims) and the mean batch loss.
pub fn head_loss<T: Scalar>(pred: &Array2<T>, targets: &Array2<T>) -> (Vec<T>, T) {
    let k = T::from_usize(pred.ncols()).unwrap();
    let per: Vec<T> = pred
        .rows()
        .into_iter()
        .zip(targets.rows())
        .map(|(p, t)| p.iter().zip(t).fold(T::zero(), |a, (&x, &y)| a + (x - y) * (x - y)) / k)
        .collect();
    let mean = per.iter().fold(T::zero(), |a, &b| a + b) / T::from_usize(per.len()).unwrap();
    (per, mean)
}

pub struct StepOutput<T> {
    pub per_window_loss: Vec<T>,
    pub loss: T,
}

/// Masked-reconstruction loss and its gradients. Backbone gradients are
/// accumulated into `g_backbone` when given; adapter gradients into
/// `g_adapter` when an adapter is used.
pub fn loss_and_grad<T: Scalar>(
    p: &BackboneParams<T>,
    adapter: Option<&AdapterParams<T>>,
    batch: &MaskedBatch<T>,
    g_backbone: Option<&mut BackboneParams<T>>,
    g_adapter: Option<&mut AdapterParams<T>>,
) -> StepOutput<T> {
    let n = batch.len();
    let (h, enc_cache) = encoder_forward(p, &batch.x, n, Rows::One(batch.mask.clone()));
    let (h2, ad_cache) = match adapter {
        Some(a) => {
            let (o, cch) = adapter_forward(a, &h);
            (o, Some(cch))
        }
        None => (h.clone(), None),
    };
    let pred = add_bias(h2.dot(&p.w_head), &p.b_head);
    let (per, loss) = head_loss(&pred, &batch.targets);
    if g_backbone.is_none() && g_adapter.is_none() {
        return StepOutput {
            per_window_loss: per,
            loss,
        };
    }
    let scale: T = c::<T>(2.0) / T::from_usize(n * pred.ncols()).unwrap();
    let dpred = (&pred - &batch.targets) * scale;
    let mut g_backbone = g_backbone;
    if let Some(g) = g_backbone.as_deref_mut() {
        g.w_head += &h2.t().dot(&dpred);
        g.b_head += &dpred.sum_axis(Axis(0));
    }
    let dh2 = dpred.dot(&p.w_head.t());
    let dh = match (adapter, ad_cache, g_adapter) {
        (Some(a), Some(cch), Some(ga)) => adapter_backward(a, &cch, &dh2, ga),
        (Some(a), Some(cch), None) => {
            let mut scratch = AdapterParams::zeros(a.d_model());
            adapter_backward(a, &cch, &dh2, &mut scratch)
        }
        _ => dh2,
    };
    if let Some(g) = g_backbone {
        encoder_backward(p, &enc_cache, &dh, n, g);
    }
    StepOutput {
        per_window_loss: per,
        loss,
    }
}

/// Backbone prediction at each window's masked position, optionally adapted.
pub fn predict_masked<T: Scalar>(
    p: &BackboneParams<T>,
    adapter: Option<&AdapterParams<T>>,
    batch: &MaskedBatch<T>,
) -> Array2<T> {
    let (h, _) = encoder_forward(p, &batch.x, batch.len(), Rows::One(batch.mask.clone()));
    let h = match adapter {
        Some(a) => adapter_forward(a, &h).0,
        None => h,
    };
    add_bias(h.dot(&p.w_head), &p.b_head)
}
