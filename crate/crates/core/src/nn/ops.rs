//! Batched forward/backward kernels over HWC activations.

use super::gemm::{gemm, Strides};
use super::{GradientVector, ParameterSegment};

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeom {
    pub layer: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub kernel: usize,
    pub filters: usize,
}

impl ConvGeom {
    fn out_h(&self) -> usize {
        self.height + 1 - self.kernel
    }

    fn out_w(&self) -> usize {
        self.width + 1 - self.kernel
    }

    fn patch_len(&self) -> usize {
        self.kernel * self.kernel * self.channels
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) enum Op {
    Dense {
        layer: usize,
        input: usize,
        output: usize,
    },
    Conv(ConvGeom),
    Relu,
    MaxPool {
        height: usize,
        width: usize,
        channels: usize,
    },
}

impl Op {
    /// `(layer, weight shape, bias length)` for parametric ops.
    pub(crate) fn parameter_shapes(&self) -> Option<(usize, Vec<usize>, usize)> {
        match *self {
            Op::Dense {
                layer,
                input,
                output,
            } => Some((layer, vec![output, input], output)),
            Op::Conv(g) => Some((
                g.layer,
                vec![g.filters, g.kernel, g.kernel, g.channels],
                g.filters,
            )),
            Op::Relu | Op::MaxPool { .. } => None,
        }
    }
}

enum Aux {
    None,
    Patches(Vec<f64>),
    Argmax(Vec<usize>),
}

/// Activations recorded by a forward pass. `acts[i]` is the input of op `i`.
pub(crate) struct Trace {
    acts: Vec<Vec<f64>>,
    aux: Vec<Aux>,
}

impl Trace {
    pub(crate) fn output(&self) -> &[f64] {
        self.acts.last().expect("trace holds the input")
    }

    pub(crate) fn into_output(mut self) -> Vec<f64> {
        self.acts.pop().expect("trace holds the input")
    }
}

fn weight(segments: &[ParameterSegment], layer: usize) -> &[f64] {
    segments[2 * layer].values.data()
}

fn bias(segments: &[ParameterSegment], layer: usize) -> &[f64] {
    segments[2 * layer + 1].values.data()
}

fn broadcast_rows(bias: &[f64], rows: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(rows * bias.len());
    for _ in 0..rows {
        out.extend_from_slice(bias);
    }
    out
}

fn im2col(g: &ConvGeom, input: &[f64], batch: usize) -> Vec<f64> {
    let (oh, ow, k, c) = (g.out_h(), g.out_w(), g.kernel, g.channels);
    let span = k * c;
    let mut patches = Vec::with_capacity(batch * oh * ow * g.patch_len());
    for b in 0..batch {
        for oy in 0..oh {
            for ox in 0..ow {
                for ky in 0..k {
                    let start = ((b * g.height + oy + ky) * g.width + ox) * c;
                    patches.extend_from_slice(&input[start..start + span]);
                }
            }
        }
    }
    patches
}

fn col2im(g: &ConvGeom, dpatches: &[f64], batch: usize) -> Vec<f64> {
    let (oh, ow, k, c) = (g.out_h(), g.out_w(), g.kernel, g.channels);
    let span = k * c;
    let mut dx = vec![0.0; batch * g.height * g.width * c];
    let mut rows = dpatches.chunks_exact(span);
    for b in 0..batch {
        for oy in 0..oh {
            for ox in 0..ow {
                for ky in 0..k {
                    let start = ((b * g.height + oy + ky) * g.width + ox) * c;
                    let src = rows.next().expect("patch rows cover the output");
                    dx[start..start + span]
                        .iter_mut()
                        .zip(src)
                        .for_each(|(d, s)| *d += s);
                }
            }
        }
    }
    dx
}

pub(crate) fn forward(plan: &[Op], segments: &[ParameterSegment], input: &[f64], batch: usize) -> Trace {
    let mut acts = Vec::with_capacity(plan.len() + 1);
    let mut aux = Vec::with_capacity(plan.len());
    acts.push(input.to_vec());
    for op in plan {
        let x = acts.last().expect("non-empty");
        let (y, a) = match *op {
            Op::Dense {
                layer,
                input,
                output,
            } => {
                let mut y = broadcast_rows(bias(segments, layer), batch);
                gemm(
                    batch,
                    input,
                    output,
                    x,
                    Strides::row_major(input),
                    weight(segments, layer),
                    Strides::transposed(input),
                    1.0,
                    &mut y,
                );
                (y, Aux::None)
            }
            Op::Conv(g) => {
                let patches = im2col(&g, x, batch);
                let rows = batch * g.out_h() * g.out_w();
                let mut y = broadcast_rows(bias(segments, g.layer), rows);
                gemm(
                    rows,
                    g.patch_len(),
                    g.filters,
                    &patches,
                    Strides::row_major(g.patch_len()),
                    weight(segments, g.layer),
                    Strides::transposed(g.patch_len()),
                    1.0,
                    &mut y,
                );
                (y, Aux::Patches(patches))
            }
            Op::Relu => (x.iter().map(|&v| v.max(0.0)).collect(), Aux::None),
            Op::MaxPool {
                height,
                width,
                channels,
            } => {
                let (oh, ow) = (height / 2, width / 2);
                let mut y = Vec::with_capacity(batch * oh * ow * channels);
                let mut arg = Vec::with_capacity(y.capacity());
                for b in 0..batch {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            for ch in 0..channels {
                                let at = |dy: usize, dx: usize| {
                                    ((b * height + 2 * oy + dy) * width + 2 * ox + dx) * channels + ch
                                };
                                let mut best = at(0, 0);
                                for idx in [at(0, 1), at(1, 0), at(1, 1)] {
                                    if x[idx] > x[best] {
                                        best = idx;
                                    }
                                }
                                y.push(x[best]);
                                arg.push(best);
                            }
                        }
                    }
                }
                (y, Aux::Argmax(arg))
            }
        };
        acts.push(y);
        aux.push(a);
    }
    Trace { acts, aux }
}

/// Backpropagate `delta` (gradient w.r.t. the logits). With one accumulator
/// the per-example contributions are summed; with `batch` accumulators each
/// example's gradient lands in its own slot.
pub(crate) fn backward(
    plan: &[Op],
    segments: &[ParameterSegment],
    trace: &Trace,
    mut delta: Vec<f64>,
    batch: usize,
    grads: &mut [GradientVector],
) {
    let per_example = grads.len() == batch && batch > 1;
    debug_assert!(per_example || grads.len() == 1);
    for (i, op) in plan.iter().enumerate().rev() {
        let x = &trace.acts[i];
        let need_dx = i > 0;
        match *op {
            Op::Dense {
                layer,
                input,
                output,
            } => {
                let (wi, bi) = (2 * layer, 2 * layer + 1);
                if per_example {
                    for (b, g) in grads.iter_mut().enumerate() {
                        let d = &delta[b * output..(b + 1) * output];
                        gemm(
                            output,
                            1,
                            input,
                            d,
                            Strides::transposed(output),
                            &x[b * input..(b + 1) * input],
                            Strides::row_major(input),
                            1.0,
                            &mut g.values[wi],
                        );
                        g.values[bi].iter_mut().zip(d).for_each(|(gb, d)| *gb += d);
                    }
                } else {
                    let g = &mut grads[0];
                    gemm(
                        output,
                        batch,
                        input,
                        &delta,
                        Strides::transposed(output),
                        x,
                        Strides::row_major(input),
                        1.0,
                        &mut g.values[wi],
                    );
                    for d in delta.chunks_exact(output) {
                        g.values[bi].iter_mut().zip(d).for_each(|(gb, d)| *gb += d);
                    }
                }
                if need_dx {
                    let mut dx = vec![0.0; batch * input];
                    gemm(
                        batch,
                        output,
                        input,
                        &delta,
                        Strides::row_major(output),
                        weight(segments, layer),
                        Strides::row_major(input),
                        0.0,
                        &mut dx,
                    );
                    delta = dx;
                }
            }
            Op::Conv(geom) => {
                let Aux::Patches(patches) = &trace.aux[i] else {
                    unreachable!("conv records its patches")
                };
                let (wi, bi) = (2 * geom.layer, 2 * geom.layer + 1);
                let (f, kl) = (geom.filters, geom.patch_len());
                let per = geom.out_h() * geom.out_w();
                let chunks: Vec<(&mut GradientVector, std::ops::Range<usize>)> = if per_example {
                    grads
                        .iter_mut()
                        .enumerate()
                        .map(|(b, g)| (g, b * per..(b + 1) * per))
                        .collect()
                } else {
                    vec![(&mut grads[0], 0..batch * per)]
                };
                for (g, rows) in chunks {
                    gemm(
                        f,
                        rows.len(),
                        kl,
                        &delta[rows.start * f..rows.end * f],
                        Strides::transposed(f),
                        &patches[rows.start * kl..rows.end * kl],
                        Strides::row_major(kl),
                        1.0,
                        &mut g.values[wi],
                    );
                    for d in delta[rows.start * f..rows.end * f].chunks_exact(f) {
                        g.values[bi].iter_mut().zip(d).for_each(|(gb, d)| *gb += d);
                    }
                }
                if need_dx {
                    let mut dpatches = vec![0.0; batch * per * kl];
                    gemm(
                        batch * per,
                        f,
                        kl,
                        &delta,
                        Strides::row_major(f),
                        weight(segments, geom.layer),
                        Strides::row_major(kl),
                        0.0,
                        &mut dpatches,
                    );
                    delta = col2im(&geom, &dpatches, batch);
                }
            }
            Op::Relu => {
                let y = &trace.acts[i + 1];
                delta
                    .iter_mut()
                    .zip(y)
                    .for_each(|(d, &y)| {
                        if y <= 0.0 {
                            *d = 0.0;
                        }
                    });
            }
            Op::MaxPool { .. } => {
                let Aux::Argmax(arg) = &trace.aux[i] else {
                    unreachable!("pool records its argmax")
                };
                if need_dx {
                    let mut dx = vec![0.0; x.len()];
                    for (&src, d) in arg.iter().zip(&delta) {
                        dx[src] += d;
                    }
                    delta = dx;
                }
            }
        }
    }
}
