use super::{DropoutMasks, LevelParams, TcnModel};
use crate::error::{Error, Result};
use crate::linalg::Matrix;

/// Causal dilated convolution of a `time x in` input. `weight` is
/// `out x in x kernel`, tap `j` reads `x[t - dilation * j]` with zeros
/// before the start; the output has the input's length.
pub fn causal_conv(input: &Matrix, weight: &[f64], bias: &[f64], kernel: usize, dilation: usize) -> Result<Matrix> {
    let in_ch = input.cols();
    let out_ch = bias.len();
    if kernel == 0 || dilation == 0 || weight.len() != out_ch * in_ch * kernel {
        return Err(Error::ShapeMismatch(format!(
            "weight of {} values for {out_ch}x{in_ch}x{kernel}, dilation {dilation}",
            weight.len()
        )));
    }
    let y = conv_forward(input.as_slice(), input.rows(), in_ch, weight, bias, kernel, dilation);
    Matrix::from_vec(input.rows(), out_ch, y)
}

pub(super) fn conv_forward(
    x: &[f64],
    steps: usize,
    in_ch: usize,
    w: &[f64],
    b: &[f64],
    k: usize,
    d: usize,
) -> Vec<f64> {
    let out_ch = b.len();
    let mut y = vec![0.0; steps * out_ch];
    for t in 0..steps {
        let yt = &mut y[t * out_ch..(t + 1) * out_ch];
        yt.copy_from_slice(b);
        for j in 0..k {
            let Some(src) = t.checked_sub(d * j) else { break };
            let xs = &x[src * in_ch..(src + 1) * in_ch];
            for (o, yo) in yt.iter_mut().enumerate() {
                let wo = &w[o * in_ch * k..(o + 1) * in_ch * k];
                let mut acc = 0.0;
                for (i, &xi) in xs.iter().enumerate() {
                    acc += wo[i * k + j] * xi;
                }
                *yo += acc;
            }
        }
    }
    y
}

/// Accumulates weight and bias gradients and returns the input gradient.
#[allow(clippy::too_many_arguments)]
pub(super) fn conv_backward(
    x: &[f64],
    steps: usize,
    in_ch: usize,
    w: &[f64],
    out_ch: usize,
    k: usize,
    d: usize,
    gy: &[f64],
    gw: &mut [f64],
    gb: &mut [f64],
) -> Vec<f64> {
    let mut gx = vec![0.0; steps * in_ch];
    for t in 0..steps {
        for o in 0..out_ch {
            let g = gy[t * out_ch + o];
            if g == 0.0 {
                continue;
            }
            gb[o] += g;
            for j in 0..k {
                let Some(src) = t.checked_sub(d * j) else { break };
                for i in 0..in_ch {
                    let widx = (o * in_ch + i) * k + j;
                    gw[widx] += g * x[src * in_ch + i];
                    gx[src * in_ch + i] += g * w[widx];
                }
            }
        }
    }
    gx
}

pub(super) struct BlockCache {
    pub input: Vec<f64>,
    pub z1: Vec<f64>,
    pub a1: Vec<f64>,
    pub z2: Vec<f64>,
    pub sum: Vec<f64>,
    pub output: Vec<f64>,
    pub masks: Option<DropoutMasks>,
}

pub(super) fn block_forward(x: &[f64], steps: usize, lp: &LevelParams<'_>, masks: Option<&DropoutMasks>) -> BlockCache {
    let (in_ch, k, d) = (lp.in_channels, lp.kernel_size, lp.dilation);
    let out_ch = lp.out_channels;
    let z1 = conv_forward(x, steps, in_ch, lp.conv1_weight, lp.conv1_bias, k, d);
    let mut a1: Vec<f64> = z1.iter().map(|v| v.max(0.0)).collect();
    if let Some(m) = masks {
        a1.iter_mut().zip(&m.first).for_each(|(a, s)| *a *= s);
    }
    let z2 = conv_forward(&a1, steps, out_ch, lp.conv2_weight, lp.conv2_bias, k, d);
    let mut sum: Vec<f64> = z2.iter().map(|v| v.max(0.0)).collect();
    if let Some(m) = masks {
        sum.iter_mut().zip(&m.second).for_each(|(a, s)| *a *= s);
    }
    match lp.downsample {
        Some((w, b)) => {
            let res = conv_forward(x, steps, in_ch, w, b, 1, 1);
            sum.iter_mut().zip(&res).for_each(|(s, r)| *s += r);
        }
        None => sum.iter_mut().zip(x).for_each(|(s, r)| *s += r),
    }
    let output = sum.iter().map(|v| v.max(0.0)).collect();
    BlockCache {
        input: x.to_vec(),
        z1,
        a1,
        z2,
        sum,
        output,
        masks: masks.cloned(),
    }
}

/// Forward pass keeping every block's cache. Returns the prediction.
pub(super) fn forward_cached(model: &TcnModel, window: &Matrix, masks: Option<&[DropoutMasks]>) -> (f64, Vec<BlockCache>) {
    let steps = window.rows();
    let mut x = window.as_slice().to_vec();
    let mut caches = Vec::with_capacity(model.layout.levels.len());
    for l in 0..model.layout.levels.len() {
        let lp = model.level(l);
        let cache = block_forward(&x, steps, &lp, masks.map(|m| &m[l]));
        x = cache.output.clone();
        caches.push(cache);
    }
    let width = model.layout.head_weight.len();
    let last = &x[(steps - 1) * width..steps * width];
    let hw = &model.params[model.layout.head_weight.clone()];
    let hb = model.params[model.layout.head_bias.start];
    let y = hb + last.iter().zip(hw).map(|(a, b)| a * b).sum::<f64>();
    (y, caches)
}

/// Adds `dL/dparams` for one sample into `grads`, given `dL/dy`.
pub(super) fn backward(model: &TcnModel, steps: usize, caches: &[BlockCache], dy: f64, grads: &mut [f64]) {
    let layout = &model.layout;
    let width = layout.head_weight.len();
    let last_out = &caches.last().expect("at least one level").output;
    let hw = &model.params[layout.head_weight.clone()];
    for (g, a) in grads[layout.head_weight.clone()]
        .iter_mut()
        .zip(&last_out[(steps - 1) * width..])
    {
        *g += dy * a;
    }
    grads[layout.head_bias.start] += dy;

    let mut g_out = vec![0.0; steps * width];
    for (g, w) in g_out[(steps - 1) * width..].iter_mut().zip(hw) {
        *g = dy * w;
    }

    for (l, cache) in caches.iter().enumerate().rev() {
        let lvl = &layout.levels[l];
        let lp = model.level(l);
        let (in_ch, out_ch, k, d) = (lvl.in_channels, lvl.out_channels, lp.kernel_size, lvl.dilation);
        let g_sum: Vec<f64> = g_out
            .iter()
            .zip(&cache.sum)
            .map(|(g, s)| if *s > 0.0 { *g } else { 0.0 })
            .collect();

        let mut g_z2: Vec<f64> = g_sum
            .iter()
            .zip(&cache.z2)
            .map(|(g, z)| if *z > 0.0 { *g } else { 0.0 })
            .collect();
        if let Some(m) = &cache.masks {
            g_z2.iter_mut().zip(&m.second).for_each(|(g, s)| *g *= s);
        }
        let (gw2, gb2) = split_pair(grads, &lvl.conv2_weight, &lvl.conv2_bias);
        let g_a1 = conv_backward(&cache.a1, steps, out_ch, lp.conv2_weight, out_ch, k, d, &g_z2, gw2, gb2);

        let mut g_z1: Vec<f64> = g_a1
            .iter()
            .zip(&cache.z1)
            .map(|(g, z)| if *z > 0.0 { *g } else { 0.0 })
            .collect();
        if let Some(m) = &cache.masks {
            g_z1.iter_mut().zip(&m.first).for_each(|(g, s)| *g *= s);
        }
        let (gw1, gb1) = split_pair(grads, &lvl.conv1_weight, &lvl.conv1_bias);
        let mut g_x = conv_backward(&cache.input, steps, in_ch, lp.conv1_weight, out_ch, k, d, &g_z1, gw1, gb1);

        match (&lvl.downsample, lp.downsample) {
            (Some((wr, br)), Some((w, _))) => {
                let (gwd, gbd) = split_pair(grads, wr, br);
                let g_res = conv_backward(&cache.input, steps, in_ch, w, out_ch, 1, 1, &g_sum, gwd, gbd);
                g_x.iter_mut().zip(&g_res).for_each(|(a, b)| *a += b);
            }
            _ => g_x.iter_mut().zip(&g_sum).for_each(|(a, b)| *a += b),
        }
        g_out = g_x;
    }
}

/// Disjoint mutable slices for a weight range followed by its bias range.
fn split_pair<'a>(
    grads: &'a mut [f64],
    w: &std::ops::Range<usize>,
    b: &std::ops::Range<usize>,
) -> (&'a mut [f64], &'a mut [f64]) {
    debug_assert_eq!(w.end, b.start);
    let (head, tail) = grads[w.start..b.end].split_at_mut(w.len());
    (head, tail)
}
