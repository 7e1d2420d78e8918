//! Layer kernels and the execution plan compiled from a [`ModelSpec`].
//!
//! Activations and deltas live in channel-major flat buffers, so the flatten
//! between the pooled feature map and the first dense layer is a no-op. The
//! backward kernels accumulate (`+=`) into the caller's gradient buffer; the
//! caller decides when to zero and how to reduce over a batch.

use crate::linalg::{axpy, dot};
use crate::scalar::Scalar;

use super::{ModelSpec, NnError, ParamLayout};

#[derive(Clone, Debug)]
pub(crate) enum LayerDesc {
    Dense {
        in_dim: usize,
        out_dim: usize,
        w_off: usize,
        b_off: usize,
    },
    Conv3x3 {
        in_h: usize,
        in_w: usize,
        in_ch: usize,
        out_ch: usize,
        w_off: usize,
        b_off: usize,
    },
    Relu {
        dim: usize,
    },
    MeanPool2 {
        in_h: usize,
        in_w: usize,
        ch: usize,
    },
}

impl LayerDesc {
    fn out_len(&self) -> usize {
        match *self {
            LayerDesc::Dense { out_dim, .. } => out_dim,
            LayerDesc::Conv3x3 {
                in_h, in_w, out_ch, ..
            } => (in_h - 2) * (in_w - 2) * out_ch,
            LayerDesc::Relu { dim } => dim,
            LayerDesc::MeanPool2 { in_h, in_w, ch } => (in_h / 2) * (in_w / 2) * ch,
        }
    }
}

/// Execution plan: ordered layers plus the activation size at every stage.
#[derive(Clone, Debug)]
pub(crate) struct Network {
    pub layers: Vec<LayerDesc>,
    pub stage_dims: Vec<usize>,
    pub param_len: usize,
}

impl Network {
    pub fn compile(spec: &ModelSpec) -> Result<Self, NnError> {
        spec.validate()?;
        let layout = ParamLayout::for_spec(spec)?;
        let mut layers = Vec::new();
        match spec.arch {
            super::ArchKind::Mlp => {
                let chain = &spec.widths;
                let mut entry = 0;
                for i in 0..chain.len() - 1 {
                    let (w, b) = (&layout.entries()[entry], &layout.entries()[entry + 1]);
                    entry += 2;
                    layers.push(LayerDesc::Dense {
                        in_dim: chain[i],
                        out_dim: chain[i + 1],
                        w_off: w.offset,
                        b_off: b.offset,
                    });
                    if i + 2 < chain.len() {
                        layers.push(LayerDesc::Relu { dim: chain[i + 1] });
                    }
                }
            }
            super::ArchKind::SmallConv => {
                let img = spec.image.as_ref().expect("validated");
                let (ch, hidden, k) = (spec.widths[0], spec.widths[1], spec.widths[2]);
                let (conv_h, conv_w) = (img.height - 2, img.width - 2);
                let (pool_h, pool_w) = (conv_h / 2, conv_w / 2);
                let flat = ch * pool_h * pool_w;
                let e = layout.entries();
                layers.push(LayerDesc::Conv3x3 {
                    in_h: img.height,
                    in_w: img.width,
                    in_ch: img.channels,
                    out_ch: ch,
                    w_off: e[0].offset,
                    b_off: e[1].offset,
                });
                layers.push(LayerDesc::Relu {
                    dim: conv_h * conv_w * ch,
                });
                layers.push(LayerDesc::MeanPool2 {
                    in_h: conv_h,
                    in_w: conv_w,
                    ch,
                });
                layers.push(LayerDesc::Dense {
                    in_dim: flat,
                    out_dim: hidden,
                    w_off: e[2].offset,
                    b_off: e[3].offset,
                });
                layers.push(LayerDesc::Relu { dim: hidden });
                layers.push(LayerDesc::Dense {
                    in_dim: hidden,
                    out_dim: k,
                    w_off: e[4].offset,
                    b_off: e[5].offset,
                });
            }
        }
        let mut stage_dims = vec![spec.input_dim];
        for l in &layers {
            stage_dims.push(l.out_len());
        }
        Ok(Network {
            layers,
            stage_dims,
            param_len: layout.total(),
        })
    }
}

/// Reusable activation and delta buffers for one network.
#[derive(Clone, Debug)]
pub(crate) struct Workspace<T> {
    pub acts: Vec<Vec<T>>,
    pub deltas: Vec<Vec<T>>,
}

impl<T: Scalar> Workspace<T> {
    pub fn new(net: &Network) -> Self {
        let acts = net.stage_dims.iter().map(|&d| vec![T::zero(); d]).collect();
        let deltas = net.stage_dims.iter().map(|&d| vec![T::zero(); d]).collect();
        Workspace { acts, deltas }
    }
}

fn split_stage<T>(stages: &mut [Vec<T>], i: usize) -> (&mut Vec<T>, &mut Vec<T>) {
    let (lo, hi) = stages.split_at_mut(i + 1);
    (&mut lo[i], &mut hi[0])
}

/// Forward pass; logits end up in `ws.acts.last()`.
pub(crate) fn forward_pass<T: Scalar>(net: &Network, params: &[T], ws: &mut Workspace<T>) {
    debug_assert_eq!(params.len(), net.param_len);
    for (i, layer) in net.layers.iter().enumerate() {
        let (input, output) = split_stage(&mut ws.acts, i);
        apply_forward(layer, params, input, output);
    }
}

fn apply_forward<T: Scalar>(layer: &LayerDesc, params: &[T], input: &[T], output: &mut [T]) {
    match *layer {
        LayerDesc::Dense {
            in_dim,
            out_dim,
            w_off,
            b_off,
        } => {
            for o in 0..out_dim {
                let row = &params[w_off + o * in_dim..w_off + (o + 1) * in_dim];
                output[o] = params[b_off + o] + dot(row, input);
            }
        }
        LayerDesc::Conv3x3 {
            in_h,
            in_w,
            in_ch,
            out_ch,
            w_off,
            b_off,
        } => {
            let (oh, ow) = (in_h - 2, in_w - 2);
            for oc in 0..out_ch {
                let bias = params[b_off + oc];
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = bias;
                        for ic in 0..in_ch {
                            let w_base = w_off + ((oc * in_ch + ic) * 9);
                            let plane = &input[ic * in_h * in_w..(ic + 1) * in_h * in_w];
                            for ky in 0..3 {
                                let row = &plane[(oy + ky) * in_w + ox..(oy + ky) * in_w + ox + 3];
                                let wt = &params[w_base + ky * 3..w_base + ky * 3 + 3];
                                acc = acc + wt[0] * row[0] + wt[1] * row[1] + wt[2] * row[2];
                            }
                        }
                        output[(oc * oh + oy) * ow + ox] = acc;
                    }
                }
            }
        }
        LayerDesc::Relu { dim } => {
            for i in 0..dim {
                output[i] = if input[i] > T::zero() {
                    input[i]
                } else {
                    T::zero()
                };
            }
        }
        LayerDesc::MeanPool2 { in_h, in_w, ch } => {
            let (ph, pw) = (in_h / 2, in_w / 2);
            let quarter = T::from_f64(0.25);
            for c in 0..ch {
                let plane = &input[c * in_h * in_w..(c + 1) * in_h * in_w];
                for py in 0..ph {
                    for px in 0..pw {
                        let (y, x) = (2 * py, 2 * px);
                        let s = plane[y * in_w + x]
                            + plane[y * in_w + x + 1]
                            + plane[(y + 1) * in_w + x]
                            + plane[(y + 1) * in_w + x + 1];
                        output[(c * ph + py) * pw + px] = s * quarter;
                    }
                }
            }
        }
    }
}

/// Backward pass from the delta already placed in `ws.deltas.last()`.
///
/// Accumulates parameter gradients into `grad` (`+=`); input deltas of the
/// first layer are not materialized.
pub(crate) fn backward_pass<T: Scalar>(
    net: &Network,
    params: &[T],
    ws: &mut Workspace<T>,
    grad: &mut [T],
) {
    debug_assert_eq!(grad.len(), net.param_len);
    for (i, layer) in net.layers.iter().enumerate().rev() {
        let input = &ws.acts[i];
        let (delta_in, delta_out) = split_stage(&mut ws.deltas, i);
        apply_backward(
            layer,
            params,
            input,
            delta_out,
            if i > 0 { Some(delta_in) } else { None },
            grad,
        );
    }
}

fn apply_backward<T: Scalar>(
    layer: &LayerDesc,
    params: &[T],
    input: &[T],
    delta_out: &[T],
    delta_in: Option<&mut Vec<T>>,
    grad: &mut [T],
) {
    match *layer {
        LayerDesc::Dense {
            in_dim,
            out_dim,
            w_off,
            b_off,
        } => {
            for o in 0..out_dim {
                let d = delta_out[o];
                grad[b_off + o] += d;
                axpy(
                    d,
                    input,
                    &mut grad[w_off + o * in_dim..w_off + (o + 1) * in_dim],
                );
            }
            if let Some(delta_in) = delta_in {
                delta_in.iter_mut().for_each(|v| *v = T::zero());
                for o in 0..out_dim {
                    let row = &params[w_off + o * in_dim..w_off + (o + 1) * in_dim];
                    axpy(delta_out[o], row, delta_in);
                }
            }
        }
        LayerDesc::Conv3x3 {
            in_h,
            in_w,
            in_ch,
            out_ch,
            w_off,
            b_off,
        } => {
            let (oh, ow) = (in_h - 2, in_w - 2);
            for oc in 0..out_ch {
                let dplane = &delta_out[oc * oh * ow..(oc + 1) * oh * ow];
                let mut dbias = T::zero();
                for &d in dplane {
                    dbias += d;
                }
                grad[b_off + oc] += dbias;
                for ic in 0..in_ch {
                    let w_base = w_off + ((oc * in_ch + ic) * 9);
                    let plane = &input[ic * in_h * in_w..(ic + 1) * in_h * in_w];
                    for ky in 0..3 {
                        for kx in 0..3 {
                            let mut acc = T::zero();
                            for oy in 0..oh {
                                let drow = &dplane[oy * ow..(oy + 1) * ow];
                                let irow = &plane[(oy + ky) * in_w + kx..(oy + ky) * in_w + kx + ow];
                                acc = acc + dot(drow, irow);
                            }
                            grad[w_base + ky * 3 + kx] += acc;
                        }
                    }
                }
            }
            if let Some(delta_in) = delta_in {
                delta_in.iter_mut().for_each(|v| *v = T::zero());
                for oc in 0..out_ch {
                    let dplane = &delta_out[oc * oh * ow..(oc + 1) * oh * ow];
                    for ic in 0..in_ch {
                        let w_base = w_off + ((oc * in_ch + ic) * 9);
                        let target = &mut delta_in[ic * in_h * in_w..(ic + 1) * in_h * in_w];
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let d = dplane[oy * ow + ox];
                                if d == T::zero() {
                                    continue;
                                }
                                for ky in 0..3 {
                                    let wt = &params[w_base + ky * 3..w_base + ky * 3 + 3];
                                    let row = &mut target
                                        [(oy + ky) * in_w + ox..(oy + ky) * in_w + ox + 3];
                                    row[0] += d * wt[0];
                                    row[1] += d * wt[1];
                                    row[2] += d * wt[2];
                                }
                            }
                        }
                    }
                }
            }
        }
        LayerDesc::Relu { dim } => {
            if let Some(delta_in) = delta_in {
                for i in 0..dim {
                    delta_in[i] = if input[i] > T::zero() {
                        delta_out[i]
                    } else {
                        T::zero()
                    };
                }
            }
        }
        LayerDesc::MeanPool2 { in_h, in_w, ch } => {
            if let Some(delta_in) = delta_in {
                delta_in.iter_mut().for_each(|v| *v = T::zero());
                let (ph, pw) = (in_h / 2, in_w / 2);
                let quarter = T::from_f64(0.25);
                for c in 0..ch {
                    let target = &mut delta_in[c * in_h * in_w..(c + 1) * in_h * in_w];
                    for py in 0..ph {
                        for px in 0..pw {
                            let d = delta_out[(c * ph + py) * pw + px] * quarter;
                            let (y, x) = (2 * py, 2 * px);
                            target[y * in_w + x] += d;
                            target[y * in_w + x + 1] += d;
                            target[(y + 1) * in_w + x] += d;
                            target[(y + 1) * in_w + x + 1] += d;
                        }
                    }
                }
            }
        }
    }
}
