use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, ArrayView3, ArrayView4, ArrayViewD, ArrayViewMutD, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::lora::{LoraParams, Target};
use super::nn::{gelu, gelu_grad, layer_norm, layer_norm_backward, softmax_backward_rows, LnCache};
use super::EncoderConfig;
use crate::error::{Error, Result};
use crate::par::{map_indexed, Exec};
use crate::scalar::Real;
use crate::sphere::{normalize_rows, EmbeddingBatch};

/// One pre-norm transformer block. Linear weights are stored `in x out` and applied
/// to row-major token matrices (`y = x W + b`).
#[derive(Debug, Clone, PartialEq)]
pub struct Block<T> {
    pub ln1_g: Array1<T>,
    pub ln1_b: Array1<T>,
    pub wq: Array2<T>,
    pub bq: Array1<T>,
    pub wk: Array2<T>,
    pub bk: Array1<T>,
    pub wv: Array2<T>,
    pub bv: Array1<T>,
    pub wo: Array2<T>,
    pub bo: Array1<T>,
    pub ln2_g: Array1<T>,
    pub ln2_b: Array1<T>,
    pub w1: Array2<T>,
    pub b1: Array1<T>,
    pub w2: Array2<T>,
    pub b2: Array1<T>,
}

impl<T: Real> Block<T> {
    fn zeros(cfg: &EncoderConfig) -> Self {
        let d = cfg.width;
        let h = cfg.hidden();
        Self {
            ln1_g: Array1::zeros(d),
            ln1_b: Array1::zeros(d),
            wq: Array2::zeros((d, d)),
            bq: Array1::zeros(d),
            wk: Array2::zeros((d, d)),
            bk: Array1::zeros(d),
            wv: Array2::zeros((d, d)),
            bv: Array1::zeros(d),
            wo: Array2::zeros((d, d)),
            bo: Array1::zeros(d),
            ln2_g: Array1::zeros(d),
            ln2_b: Array1::zeros(d),
            w1: Array2::zeros((d, h)),
            b1: Array1::zeros(h),
            w2: Array2::zeros((h, d)),
            b2: Array1::zeros(d),
        }
    }

    pub fn weight(&self, t: Target) -> &Array2<T> {
        match t {
            Target::Q => &self.wq,
            Target::K => &self.wk,
            Target::V => &self.wv,
        }
    }

    pub fn weight_mut(&mut self, t: Target) -> &mut Array2<T> {
        match t {
            Target::Q => &mut self.wq,
            Target::K => &mut self.wk,
            Target::V => &mut self.wv,
        }
    }
}

/// Frozen encoder weights.
#[derive(Debug, Clone, PartialEq)]
pub struct StemWeights<T = f32> {
    pub config: EncoderConfig,
    pub patch_w: Array2<T>,
    pub patch_b: Array1<T>,
    pub cls: Array1<T>,
    pub pos: Array2<T>,
    pub blocks: Vec<Block<T>>,
    pub lnf_g: Array1<T>,
    pub lnf_b: Array1<T>,
    pub proj: Array2<T>,
}

impl<T: Real> StemWeights<T> {
    /// All-zero weights with the shapes implied by `config` (used for gradients).
    pub fn zeros(config: EncoderConfig) -> Self {
        let d = config.width;
        Self {
            config,
            patch_w: Array2::zeros((config.patch_dim(), d)),
            patch_b: Array1::zeros(d),
            cls: Array1::zeros(d),
            pos: Array2::zeros((config.num_tokens(), d)),
            blocks: (0..config.depth).map(|_| Block::zeros(&config)).collect(),
            lnf_g: Array1::zeros(d),
            lnf_b: Array1::zeros(d),
            proj: Array2::zeros((d, config.embed_dim)),
        }
    }

    /// Randomly initialized weights; Gaussian with variance `1/fan_in` for linear maps.
    pub fn init(config: EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut w = Self::zeros(config);
        let mut fill = |a: &mut Array2<T>, std: f64| {
            let n = Normal::new(0.0, std).expect("positive std");
            a.mapv_inplace(|_| T::lit(n.sample(&mut rng)));
        };
        let d = config.width as f64;
        fill(&mut w.patch_w, (1.0 / config.patch_dim() as f64).sqrt());
        fill(&mut w.pos, 0.02);
        let mut cls = Array2::zeros((1, config.width));
        fill(&mut cls, 0.02);
        w.cls = cls.row(0).to_owned();
        for b in &mut w.blocks {
            fill(&mut b.wq, (1.0 / d).sqrt());
            fill(&mut b.wk, (1.0 / d).sqrt());
            fill(&mut b.wv, (1.0 / d).sqrt());
            fill(&mut b.wo, (1.0 / d).sqrt());
            fill(&mut b.w1, (1.0 / d).sqrt());
            fill(&mut b.w2, (1.0 / config.hidden() as f64).sqrt());
            b.ln1_g.fill(T::one());
            b.ln2_g.fill(T::one());
        }
        fill(&mut w.proj, (1.0 / d).sqrt());
        w.lnf_g.fill(T::one());
        Ok(w)
    }

    /// Named views of every tensor, in a fixed order.
    pub fn tensors(&self) -> Vec<(String, ArrayViewD<'_, T>)> {
        let mut out = vec![
            ("patch_w".to_string(), self.patch_w.view().into_dyn()),
            ("patch_b".to_string(), self.patch_b.view().into_dyn()),
            ("cls".to_string(), self.cls.view().into_dyn()),
            ("pos".to_string(), self.pos.view().into_dyn()),
        ];
        for (l, b) in self.blocks.iter().enumerate() {
            let p = |n: &str| format!("blocks.{l}.{n}");
            out.extend([
                (p("ln1_g"), b.ln1_g.view().into_dyn()),
                (p("ln1_b"), b.ln1_b.view().into_dyn()),
                (p("wq"), b.wq.view().into_dyn()),
                (p("bq"), b.bq.view().into_dyn()),
                (p("wk"), b.wk.view().into_dyn()),
                (p("bk"), b.bk.view().into_dyn()),
                (p("wv"), b.wv.view().into_dyn()),
                (p("bv"), b.bv.view().into_dyn()),
                (p("wo"), b.wo.view().into_dyn()),
                (p("bo"), b.bo.view().into_dyn()),
                (p("ln2_g"), b.ln2_g.view().into_dyn()),
                (p("ln2_b"), b.ln2_b.view().into_dyn()),
                (p("w1"), b.w1.view().into_dyn()),
                (p("b1"), b.b1.view().into_dyn()),
                (p("w2"), b.w2.view().into_dyn()),
                (p("b2"), b.b2.view().into_dyn()),
            ]);
        }
        out.extend([
            ("lnf_g".to_string(), self.lnf_g.view().into_dyn()),
            ("lnf_b".to_string(), self.lnf_b.view().into_dyn()),
            ("proj".to_string(), self.proj.view().into_dyn()),
        ]);
        out
    }

    /// Mutable counterpart of [`StemWeights::tensors`], same order.
    pub fn tensors_mut(&mut self) -> Vec<(String, ArrayViewMutD<'_, T>)> {
        let mut out = vec![
            ("patch_w".to_string(), self.patch_w.view_mut().into_dyn()),
            ("patch_b".to_string(), self.patch_b.view_mut().into_dyn()),
            ("cls".to_string(), self.cls.view_mut().into_dyn()),
            ("pos".to_string(), self.pos.view_mut().into_dyn()),
        ];
        for (l, b) in self.blocks.iter_mut().enumerate() {
            let p = |n: &str| format!("blocks.{l}.{n}");
            out.extend([
                (p("ln1_g"), b.ln1_g.view_mut().into_dyn()),
                (p("ln1_b"), b.ln1_b.view_mut().into_dyn()),
                (p("wq"), b.wq.view_mut().into_dyn()),
                (p("bq"), b.bq.view_mut().into_dyn()),
                (p("wk"), b.wk.view_mut().into_dyn()),
                (p("bk"), b.bk.view_mut().into_dyn()),
                (p("wv"), b.wv.view_mut().into_dyn()),
                (p("bv"), b.bv.view_mut().into_dyn()),
                (p("wo"), b.wo.view_mut().into_dyn()),
                (p("bo"), b.bo.view_mut().into_dyn()),
                (p("ln2_g"), b.ln2_g.view_mut().into_dyn()),
                (p("ln2_b"), b.ln2_b.view_mut().into_dyn()),
                (p("w1"), b.w1.view_mut().into_dyn()),
                (p("b1"), b.b1.view_mut().into_dyn()),
                (p("w2"), b.w2.view_mut().into_dyn()),
                (p("b2"), b.b2.view_mut().into_dyn()),
            ]);
        }
        out.extend([
            ("lnf_g".to_string(), self.lnf_g.view_mut().into_dyn()),
            ("lnf_b".to_string(), self.lnf_b.view_mut().into_dyn()),
            ("proj".to_string(), self.proj.view_mut().into_dyn()),
        ]);
        out
    }

    /// `self += other * alpha`, tensor by tensor.
    pub fn add_scaled(&mut self, other: &Self, alpha: T) {
        for ((_, mut a), (_, b)) in self.tensors_mut().into_iter().zip(other.tensors()) {
            a.scaled_add(alpha, &b);
        }
    }

    pub fn cast<U: Real>(&self) -> StemWeights<U> {
        let mut out = StemWeights::<U>::zeros(self.config);
        for ((_, mut dst), (_, src)) in out.tensors_mut().into_iter().zip(self.tensors()) {
            dst.zip_mut_with(&src, |d, &s| *d = U::lit(s.as_f64()));
        }
        out
    }
}

#[derive(Debug, Clone)]
struct LayerCache<T> {
    ln1: LnCache<T>,
    u: Array2<T>,
    q: Array2<T>,
    k: Array2<T>,
    v: Array2<T>,
    attn: Vec<Array2<T>>,
    o: Array2<T>,
    ln2: LnCache<T>,
    u2: Array2<T>,
    hpre: Array2<T>,
    act: Array2<T>,
}

/// Activations kept from a forward pass for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache<T> {
    patches: Array2<T>,
    layers: Vec<LayerCache<T>>,
    lnf: LnCache<T>,
    cls_out: Array1<T>,
}

/// Gradients of the effective Q/K/V weights, per layer.
#[derive(Debug, Clone, PartialEq)]
pub struct QkvGrads<T> {
    pub layers: Vec<[Array2<T>; 3]>,
}

impl<T: Real> QkvGrads<T> {
    pub fn zeros(cfg: &EncoderConfig) -> Self {
        let d = cfg.width;
        Self {
            layers: (0..cfg.depth)
                .map(|_| std::array::from_fn(|_| Array2::zeros((d, d))))
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Self) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradMode {
    /// Only gradients of the effective Q/K/V weights (enough for adapters).
    Qkv,
    /// Gradients of every stem tensor.
    Full,
}

#[derive(Debug, Clone)]
pub struct Grads<T> {
    pub qkv: QkvGrads<T>,
    pub full: Option<StemWeights<T>>,
}

impl<T: Real> Grads<T> {
    fn add_assign(&mut self, other: &Self) {
        self.qkv.add_assign(&other.qkv);
        if let (Some(a), Some(b)) = (self.full.as_mut(), other.full.as_ref()) {
            a.add_scaled(b, T::one());
        }
    }
}

/// A stem plus (optional) adapters, with the effective Q/K/V weights materialized.
#[derive(Debug, Clone)]
pub struct Encoder<'a, T: Real> {
    stem: &'a StemWeights<T>,
    qkv: Vec<[Array2<T>; 3]>,
}

/// Fixed pixel scale applied after per-image mean removal.
const PIXEL_SCALE: f64 = 4.0;

/// Splits an image into flattened patches after removing the image's mean pixel
/// value.
fn patchify<T: Real>(img: ArrayView3<'_, f32>, cfg: &EncoderConfig) -> Array2<T> {
    let mean = img.iter().map(|&v| v as f64).sum::<f64>() / img.len() as f64;
    let inv = PIXEL_SCALE;
    let ps = cfg.patch_size;
    let side = cfg.patches_per_side();
    let mut out = Array2::zeros((cfg.num_patches(), cfg.patch_dim()));
    for py in 0..side {
        for px in 0..side {
            let mut row = out.row_mut(py * side + px);
            let mut k = 0;
            for dy in 0..ps {
                for dx in 0..ps {
                    for ch in 0..3 {
                        let v = img[[py * ps + dy, px * ps + dx, ch]] as f64;
                        row[k] = T::lit((v - mean) * inv);
                        k += 1;
                    }
                }
            }
        }
    }
    out
}

impl<'a, T: Real> Encoder<'a, T> {
    pub fn new(stem: &'a StemWeights<T>, lora: Option<&LoraParams<T>>) -> Result<Self> {
        let qkv = stem
            .blocks
            .iter()
            .enumerate()
            .map(|(l, b)| {
                let mut out: [Array2<T>; 3] = [b.wq.clone(), b.wk.clone(), b.wv.clone()];
                if let Some(lora) = lora {
                    for t in Target::ALL {
                        if let Some(pair) = lora.get(l, t) {
                            let delta = pair.a.dot(&pair.b);
                            out[t.index()].scaled_add(lora.scale(), &delta);
                        }
                    }
                }
                out
            })
            .collect();
        if let Some(lora) = lora {
            lora.check_against(&stem.config)?;
        }
        Ok(Self { stem, qkv })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.stem.config
    }

    pub fn stem(&self) -> &StemWeights<T> {
        self.stem
    }

    fn check_image(&self, img: &ArrayView3<'_, f32>) -> Result<()> {
        let s = self.stem.config.image_size;
        if img.dim() != (s, s, 3) {
            return Err(Error::BadImageShape(format!(
                "expected {s}x{s}x3, got {:?}",
                img.dim()
            )));
        }
        Ok(())
    }

    /// Raw (pre-normalization) embedding of one `H x W x 3` image.
    pub fn forward(&self, img: ArrayView3<'_, f32>) -> Result<Array1<T>> {
        self.check_image(&img)?;
        Ok(self.run(img, false).0)
    }

    /// Raw embedding plus the activations needed by [`Encoder::backward`].
    pub fn forward_cached(&self, img: ArrayView3<'_, f32>) -> Result<(Array1<T>, ForwardCache<T>)> {
        self.check_image(&img)?;
        let (e, cache) = self.run(img, true);
        Ok((e, cache.expect("cache requested")))
    }

    fn run(&self, img: ArrayView3<'_, f32>, keep: bool) -> (Array1<T>, Option<ForwardCache<T>>) {
        let cfg = &self.stem.config;
        let st = self.stem;
        let n = cfg.num_tokens();
        let d = cfg.width;
        let dh = cfg.head_dim();
        let scale = T::one() / T::lit(dh as f64).sqrt();

        let patches = patchify::<T>(img, cfg);
        let mut x = Array2::<T>::zeros((n, d));
        x.row_mut(0).assign(&st.cls);
        x.slice_mut(s![1.., ..])
            .assign(&(patches.dot(&st.patch_w) + &st.patch_b));
        x += &st.pos;

        let mut layers = Vec::with_capacity(if keep { cfg.depth } else { 0 });
        for (blk, w) in st.blocks.iter().zip(&self.qkv) {
            let (u, ln1) = layer_norm(x.view(), blk.ln1_g.view(), blk.ln1_b.view());
            let q = u.dot(&w[0]) + &blk.bq;
            let k = u.dot(&w[1]) + &blk.bk;
            let v = u.dot(&w[2]) + &blk.bv;
            let mut o = Array2::<T>::zeros((n, d));
            let mut attn = Vec::with_capacity(if keep { cfg.heads } else { 0 });
            for h in 0..cfg.heads {
                let cols = s![.., h * dh..(h + 1) * dh];
                let mut sc = q.slice(cols).dot(&k.slice(cols).t());
                sc.mapv_inplace(|a| a * scale);
                let p = crate::sphere::softmax_rows(sc.view());
                o.slice_mut(cols).assign(&p.dot(&v.slice(cols)));
                if keep {
                    attn.push(p);
                }
            }
            x += &(o.dot(&blk.wo) + &blk.bo);

            let (u2, ln2) = layer_norm(x.view(), blk.ln2_g.view(), blk.ln2_b.view());
            let hpre = u2.dot(&blk.w1) + &blk.b1;
            let act = hpre.mapv(gelu);
            x += &(act.dot(&blk.w2) + &blk.b2);

            if keep {
                layers.push(LayerCache {
                    ln1,
                    u,
                    q,
                    k,
                    v,
                    attn,
                    o,
                    ln2,
                    u2,
                    hpre,
                    act,
                });
            }
        }

        let (c, lnf) = layer_norm(x.slice(s![0..1, ..]), st.lnf_g.view(), st.lnf_b.view());
        let cls_out = c.row(0).to_owned();
        let e = cls_out.dot(&st.proj);
        let cache = keep.then(|| ForwardCache {
            patches,
            layers,
            lnf,
            cls_out,
        });
        (e, cache)
    }

    /// Backpropagates `d_embed` (gradient on the raw embedding) through the network.
    pub fn backward(&self, cache: &ForwardCache<T>, d_embed: ArrayView1<'_, T>, mode: GradMode) -> Grads<T> {
        let cfg = &self.stem.config;
        let st = self.stem;
        let n = cfg.num_tokens();
        let d = cfg.width;
        let dh = cfg.head_dim();
        let scale = T::one() / T::lit(dh as f64).sqrt();
        let mut full = (mode == GradMode::Full).then(|| StemWeights::zeros(*cfg));
        let mut qkv = QkvGrads::zeros(cfg);

        // readout
        let de = d_embed.insert_axis(Axis(0));
        if let Some(g) = full.as_mut() {
            g.proj += &cache.cls_out.view().insert_axis(Axis(1)).dot(&de);
        }
        let dc = de.dot(&st.proj.t());
        let dcls = layer_norm_backward(
            dc.view(),
            &cache.lnf,
            st.lnf_g.view(),
            full.as_mut().map(|g| (&mut g.lnf_g, &mut g.lnf_b)),
        );
        let mut dx = Array2::<T>::zeros((n, d));
        dx.row_mut(0).assign(&dcls.row(0));

        for l in (0..cfg.depth).rev() {
            let blk = &st.blocks[l];
            let c = &cache.layers[l];
            let w = &self.qkv[l];
            let mut gb = full.as_mut().map(|g| &mut g.blocks[l]);

            // MLP branch
            let dact = dx.dot(&blk.w2.t());
            if let Some(g) = gb.as_deref_mut() {
                g.w2 += &c.act.t().dot(&dx);
                g.b2 += &dx.sum_axis(Axis(0));
            }
            let mut dh_pre = dact;
            dh_pre.zip_mut_with(&c.hpre, |g, &h| *g = *g * gelu_grad(h));
            if let Some(g) = gb.as_deref_mut() {
                g.w1 += &c.u2.t().dot(&dh_pre);
                g.b1 += &dh_pre.sum_axis(Axis(0));
            }
            let du2 = dh_pre.dot(&blk.w1.t());
            dx += &layer_norm_backward(
                du2.view(),
                &c.ln2,
                blk.ln2_g.view(),
                gb.as_deref_mut().map(|g| (&mut g.ln2_g, &mut g.ln2_b)),
            );

            // attention branch
            let d_o = dx.dot(&blk.wo.t());
            if let Some(g) = gb.as_deref_mut() {
                g.wo += &c.o.t().dot(&dx);
                g.bo += &dx.sum_axis(Axis(0));
            }
            let mut dq = Array2::<T>::zeros((n, d));
            let mut dk = Array2::<T>::zeros((n, d));
            let mut dv = Array2::<T>::zeros((n, d));
            for h in 0..cfg.heads {
                let cols = s![.., h * dh..(h + 1) * dh];
                let p = &c.attn[h];
                let doh = d_o.slice(cols);
                let dp = doh.dot(&c.v.slice(cols).t());
                dv.slice_mut(cols).assign(&p.t().dot(&doh));
                let mut ds = softmax_backward_rows(p.view(), dp.view());
                ds.mapv_inplace(|a| a * scale);
                dq.slice_mut(cols).assign(&ds.dot(&c.k.slice(cols)));
                dk.slice_mut(cols).assign(&ds.t().dot(&c.q.slice(cols)));
            }
            let ut = c.u.t();
            qkv.layers[l][0] = ut.dot(&dq);
            qkv.layers[l][1] = ut.dot(&dk);
            qkv.layers[l][2] = ut.dot(&dv);
            if let Some(g) = gb.as_deref_mut() {
                g.wq += &qkv.layers[l][0];
                g.wk += &qkv.layers[l][1];
                g.wv += &qkv.layers[l][2];
                g.bq += &dq.sum_axis(Axis(0));
                g.bk += &dk.sum_axis(Axis(0));
                g.bv += &dv.sum_axis(Axis(0));
            }
            let du = dq.dot(&w[0].t()) + dk.dot(&w[1].t()) + dv.dot(&w[2].t());
            dx += &layer_norm_backward(
                du.view(),
                &c.ln1,
                blk.ln1_g.view(),
                gb.map(|g| (&mut g.ln1_g, &mut g.ln1_b)),
            );
        }

        if let Some(g) = full.as_mut() {
            g.pos += &dx;
            g.cls += &dx.row(0);
            let dpatch = dx.slice(s![1.., ..]);
            g.patch_w += &cache.patches.t().dot(&dpatch);
            g.patch_b += &dpatch.sum_axis(Axis(0));
        }
        Grads { qkv, full }
    }

    fn check_batch(&self, images: &ArrayView4<'_, f32>) -> Result<()> {
        let s = self.stem.config.image_size;
        let (_, h, w, c) = images.dim();
        if (h, w, c) != (s, s, 3) {
            return Err(Error::BadImageShape(format!(
                "expected Bx{s}x{s}x3, got {:?}",
                images.dim()
            )));
        }
        Ok(())
    }

    /// Raw embeddings of a `B x H x W x 3` batch.
    pub fn embed_raw(&self, images: ArrayView4<'_, f32>, exec: Exec) -> Result<Array2<T>> {
        self.check_batch(&images)?;
        let rows = map_indexed(exec, images.len_of(Axis(0)), |i| {
            self.run(images.index_axis(Axis(0), i), false).0
        });
        Ok(stack_rows(&rows, self.stem.config.embed_dim))
    }

    /// Unit-norm embeddings of a batch.
    pub fn embed(&self, images: ArrayView4<'_, f32>, exec: Exec) -> Result<EmbeddingBatch<T>> {
        normalize_rows(self.embed_raw(images, exec)?.view())
    }

    /// Raw embeddings of a batch plus per-image caches.
    pub fn forward_batch_cached(
        &self,
        images: ArrayView4<'_, f32>,
        exec: Exec,
    ) -> Result<(Array2<T>, Vec<ForwardCache<T>>)> {
        self.check_batch(&images)?;
        let out = map_indexed(exec, images.len_of(Axis(0)), |i| {
            let (e, c) = self.run(images.index_axis(Axis(0), i), true);
            (e, c.expect("cache requested"))
        });
        let rows: Vec<Array1<T>> = out.iter().map(|(e, _)| e.clone()).collect();
        let caches = out.into_iter().map(|(_, c)| c).collect();
        Ok((stack_rows(&rows, self.stem.config.embed_dim), caches))
    }

    /// Sum over the batch of per-image gradients, accumulated in index order.
    pub fn backward_batch(
        &self,
        caches: &[ForwardCache<T>],
        d_raw: ArrayView2<'_, T>,
        mode: GradMode,
        exec: Exec,
    ) -> Grads<T> {
        let per = map_indexed(exec, caches.len(), |i| {
            self.backward(&caches[i], d_raw.row(i), mode)
        });
        let mut iter = per.into_iter();
        let mut acc = iter.next().unwrap_or_else(|| Grads {
            qkv: QkvGrads::zeros(&self.stem.config),
            full: (mode == GradMode::Full).then(|| StemWeights::zeros(self.stem.config)),
        });
        for g in iter {
            acc.add_assign(&g);
        }
        acc
    }
}

fn stack_rows<T: Real>(rows: &[Array1<T>], dim: usize) -> Array2<T> {
    let mut out = Array2::zeros((rows.len(), dim));
    for (mut dst, src) in out.rows_mut().into_iter().zip(rows) {
        dst.assign(src);
    }
    out
}
