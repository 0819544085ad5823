//! Small U-Net ε-predictor with cross-attention at both resolutions.

use ndarray::{Array2, Axis};

use super::latent::LatentTensor;
use super::nn::{
    affine, attention, attention_back, avgpool2, avgpool2_back, col2im3, im2col3, silu_back, silu_map, sinusoid, upsample2,
    upsample2_back, AttentionCache,
};
use super::params::{DenoiserParams, GradRequest, Grads, Partition};
use super::text::TextCondition;
use crate::error::{Error, Result};

struct ResTrace {
    name: &'static str,
    x: Array2<f64>,
    cols1: Array2<f64>,
    u: Array2<f64>,
    cols2: Array2<f64>,
    h: usize,
    w: usize,
}

struct XattnTrace {
    name: &'static str,
    h_in: Array2<f64>,
    attn_out: Array2<f64>,
    cache: AttentionCache,
}

/// Everything the backward pass needs from one forward evaluation.
pub struct UnetTrace {
    h: usize,
    w: usize,
    y: Array2<f64>,
    time_code: Array2<f64>,
    time_pre: Array2<f64>,
    temb: Array2<f64>,
    cols_in: Array2<f64>,
    res1: ResTrace,
    xattn1: XattnTrace,
    pooled: Array2<f64>,
    res2: ResTrace,
    xattn2: XattnTrace,
    res3: ResTrace,
    r3_out: Array2<f64>,
    res4: ResTrace,
    xattn3: XattnTrace,
    x3: Array2<f64>,
    cols_out: Array2<f64>,
}

fn bias<'a>(p: &'a DenoiserParams, name: &str) -> ndarray::ArrayView1<'a, f64> {
    p.get(name).row(0)
}

fn res_forward(p: &DenoiserParams, name: &'static str, x: Array2<f64>, temb: &Array2<f64>, h: usize, w: usize) -> (Array2<f64>, ResTrace) {
    let cols1 = im2col3(silu_map(&x).view(), h, w);
    let mut u = affine(cols1.view(), p.get(&format!("{name}.conv1.w")).view(), bias(p, &format!("{name}.conv1.b")));
    let tproj = affine(temb.view(), p.get(&format!("{name}.temb.w")).view(), bias(p, &format!("{name}.temb.b")));
    u += &tproj.row(0);
    let cols2 = im2col3(silu_map(&u).view(), h, w);
    let v = affine(cols2.view(), p.get(&format!("{name}.conv2.w")).view(), bias(p, &format!("{name}.conv2.b")));
    let out = &x + &v;
    (out, ResTrace { name, x, cols1, u, cols2, h, w })
}

/// Returns `(dx, dtemb)`; parameter gradients only when OTHER is requested.
fn res_backward(p: &DenoiserParams, tr: &ResTrace, dout: &Array2<f64>, temb: &Array2<f64>, want: bool, g: &mut Grads) -> (Array2<f64>, Array2<f64>) {
    let n = tr.name;
    let w2 = p.get(&format!("{n}.conv2.w"));
    let dcols2 = dout.dot(&w2.t());
    let du = silu_back(&tr.u, &col2im3(&dcols2, tr.h, tr.w, tr.u.ncols()));
    let du_sum = du.sum_axis(Axis(0)).insert_axis(Axis(0));
    let dtemb = du_sum.dot(&p.get(&format!("{n}.temb.w")).t());
    let w1 = p.get(&format!("{n}.conv1.w"));
    let dcols1 = du.dot(&w1.t());
    let dx = dout + &silu_back(&tr.x, &col2im3(&dcols1, tr.h, tr.w, tr.x.ncols()));
    if want {
        g.add_param(p.id(&format!("{n}.conv2.w")), tr.cols2.t().dot(dout));
        g.add_param(p.id(&format!("{n}.conv2.b")), dout.sum_axis(Axis(0)).insert_axis(Axis(0)));
        g.add_param(p.id(&format!("{n}.temb.w")), temb.t().dot(&du_sum));
        g.add_param(p.id(&format!("{n}.temb.b")), du_sum.clone());
        g.add_param(p.id(&format!("{n}.conv1.w")), tr.cols1.t().dot(&du));
        g.add_param(p.id(&format!("{n}.conv1.b")), du_sum);
    }
    (dx, dtemb)
}

fn xattn_forward(p: &DenoiserParams, name: &'static str, h_in: Array2<f64>, y: &Array2<f64>) -> (Array2<f64>, XattnTrace) {
    let q = h_in.dot(p.get(&format!("{name}.q")));
    let k = y.dot(p.get(&format!("{name}.k")));
    let v = y.dot(p.get(&format!("{name}.v")));
    let (attn_out, cache) = attention(q, k, v, p.config.heads);
    let out = &h_in + &affine(attn_out.view(), p.get(&format!("{name}.o.w")).view(), bias(p, &format!("{name}.o.b")));
    (out, XattnTrace { name, h_in, attn_out, cache })
}

/// Returns `dh`; adds `dy` into `dy_acc` when given.
fn xattn_backward(p: &DenoiserParams, tr: &XattnTrace, y: &Array2<f64>, dout: &Array2<f64>, req: &GradRequest, g: &mut Grads, dy_acc: Option<&mut Array2<f64>>) -> Array2<f64> {
    let n = tr.name;
    let (wq, wk, wv, wo) = (p.get(&format!("{n}.q")), p.get(&format!("{n}.k")), p.get(&format!("{n}.v")), p.get(&format!("{n}.o.w")));
    let da = dout.dot(&wo.t());
    let (dq, dk, dv) = attention_back(&da, &tr.cache);
    if req.wants(Partition::Other) {
        g.add_param(p.id(&format!("{n}.o.w")), tr.attn_out.t().dot(dout));
        g.add_param(p.id(&format!("{n}.o.b")), dout.sum_axis(Axis(0)).insert_axis(Axis(0)));
    }
    if req.wants(Partition::Query) {
        g.add_param(p.id(&format!("{n}.q")), tr.h_in.t().dot(&dq));
    }
    if req.wants(Partition::Key) {
        g.add_param(p.id(&format!("{n}.k")), y.t().dot(&dk));
    }
    if req.wants(Partition::Value) {
        g.add_param(p.id(&format!("{n}.v")), y.t().dot(&dv));
    }
    if let Some(dy) = dy_acc {
        *dy += &dk.dot(&wk.t());
        *dy += &dv.dot(&wv.t());
    }
    dout + &dq.dot(&wq.t())
}

impl DenoiserParams {
    fn check_input(&self, z_t: &LatentTensor, y: &TextCondition) -> Result<()> {
        let c = self.config;
        if z_t.channels() != c.latent_channels || z_t.height % 2 != 0 || z_t.width % 2 != 0 || z_t.height == 0 || z_t.width == 0 {
            return Err(Error::Shape { expected: vec![0, 0, c.latent_channels], got: z_t.shape().to_vec() });
        }
        if y.rows.dim() != (c.seq_len, c.text_dim) {
            return Err(Error::Shape { expected: vec![c.seq_len, c.text_dim], got: y.rows.shape().to_vec() });
        }
        Ok(())
    }

    /// ε-prediction for `z_t` at step `t` under condition `y`.
    pub fn denoise(&self, z_t: &LatentTensor, t: usize, y: &TextCondition) -> Result<LatentTensor> {
        self.denoise_traced(z_t, t, y).map(|(o, _)| o)
    }

    pub fn denoise_traced(&self, z_t: &LatentTensor, t: usize, y: &TextCondition) -> Result<(LatentTensor, UnetTrace)> {
        self.check_input(z_t, y)?;
        let p = self;
        let (h, w) = (z_t.height, z_t.width);
        let (h2, w2) = (h / 2, w / 2);
        let time_code = sinusoid(t as f64, p.config.width).insert_axis(Axis(0));
        let time_pre = affine(time_code.view(), p.get("time.w").view(), bias(p, "time.b"));
        let temb = silu_map(&time_pre);

        let cols_in = im2col3(z_t.data.view(), h, w);
        let a = affine(cols_in.view(), p.get("conv_in.w").view(), bias(p, "conv_in.b"));
        let (r1, res1) = res_forward(p, "res1", a, &temb, h, w);
        let (x1, xattn1) = xattn_forward(p, "xattn1", r1, &y.rows);
        let pooled = avgpool2(&x1, h, w);
        let d = affine(pooled.view(), p.get("down.w").view(), bias(p, "down.b"));
        let (r2, res2) = res_forward(p, "res2", d, &temb, h2, w2);
        let (x2, xattn2) = xattn_forward(p, "xattn2", r2, &y.rows);
        let (r3_out, res3) = res_forward(p, "res3", x2, &temb, h2, w2);
        let u = affine(r3_out.view(), p.get("up.w").view(), bias(p, "up.b"));
        let up = upsample2(&u, h2, w2) + &x1;
        let (r4, res4) = res_forward(p, "res4", up, &temb, h, w);
        let (x3, xattn3) = xattn_forward(p, "xattn3", r4, &y.rows);
        let cols_out = im2col3(silu_map(&x3).view(), h, w);
        let out = affine(cols_out.view(), p.get("conv_out.w").view(), bias(p, "conv_out.b"));
        let trace = UnetTrace {
            h,
            w,
            y: y.rows.clone(),
            time_code,
            time_pre,
            temb,
            cols_in,
            res1,
            xattn1,
            pooled,
            res2,
            xattn2,
            res3,
            r3_out,
            res4,
            xattn3,
            x3,
            cols_out,
        };
        Ok((LatentTensor::new(h, w, out)?, trace))
    }

    /// Vector-Jacobian product of the denoiser output with `d_out`.
    ///
    /// Returns the gradient with respect to the condition rows when slots or
    /// OTHER gradients are requested (both need it to reach the text encoder).
    pub fn denoise_backward(&self, tr: &UnetTrace, d_out: &Array2<f64>, req: &GradRequest, g: &mut Grads) -> Option<Array2<f64>> {
        let p = self;
        let other = req.wants(Partition::Other);
        let mut dy = (req.slots || other).then(|| Array2::zeros(tr.y.raw_dim()));
        let mut dtemb = Array2::zeros(tr.temb.raw_dim());
        let (h, w) = (tr.h, tr.w);
        let (h2, w2) = (h / 2, w / 2);

        let dcols = d_out.dot(&p.get("conv_out.w").t());
        let dx3 = silu_back(&tr.x3, &col2im3(&dcols, h, w, tr.x3.ncols()));
        if other {
            g.add_param(p.id("conv_out.w"), tr.cols_out.t().dot(d_out));
            g.add_param(p.id("conv_out.b"), d_out.sum_axis(Axis(0)).insert_axis(Axis(0)));
        }
        let dr4 = xattn_backward(p, &tr.xattn3, &tr.y, &dx3, req, g, dy.as_mut());
        let (dup, dt) = res_backward(p, &tr.res4, &dr4, &tr.temb, other, g);
        dtemb += &dt;
        let du = upsample2_back(&dup, h2, w2);
        if other {
            g.add_param(p.id("up.w"), tr.r3_out.t().dot(&du));
            g.add_param(p.id("up.b"), du.sum_axis(Axis(0)).insert_axis(Axis(0)));
        }
        let dr3 = du.dot(&p.get("up.w").t());
        let (dx2, dt) = res_backward(p, &tr.res3, &dr3, &tr.temb, other, g);
        dtemb += &dt;
        let dr2 = xattn_backward(p, &tr.xattn2, &tr.y, &dx2, req, g, dy.as_mut());
        let (dd, dt) = res_backward(p, &tr.res2, &dr2, &tr.temb, other, g);
        dtemb += &dt;
        if other {
            g.add_param(p.id("down.w"), tr.pooled.t().dot(&dd));
            g.add_param(p.id("down.b"), dd.sum_axis(Axis(0)).insert_axis(Axis(0)));
        }
        let dx1 = avgpool2_back(&dd.dot(&p.get("down.w").t()), h, w) + &dup;
        let dr1 = xattn_backward(p, &tr.xattn1, &tr.y, &dx1, req, g, dy.as_mut());
        if other {
            let (da, dt) = res_backward(p, &tr.res1, &dr1, &tr.temb, true, g);
            dtemb += &dt;
            g.add_param(p.id("conv_in.w"), tr.cols_in.t().dot(&da));
            g.add_param(p.id("conv_in.b"), da.sum_axis(Axis(0)).insert_axis(Axis(0)));
            let dpre = silu_back(&tr.time_pre, &dtemb);
            g.add_param(p.id("time.w"), tr.time_code.t().dot(&dpre));
            g.add_param(p.id("time.b"), dpre);
        }
        dy
    }
}
