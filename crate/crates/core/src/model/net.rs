//! Layer kernels: forward and reverse passes over a flat list of ops,
//! generic over [`Scalar`].

use crate::scalar::Scalar;

use super::{Activation, Arch};

/// 3x3 convolution with zero padding 1.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub in_c: usize,
    pub out_c: usize,
    pub h: usize,
    pub w: usize,
    pub stride: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    fn new(in_c: usize, out_c: usize, h: usize, w: usize, stride: usize) -> Self {
        Self {
            in_c,
            out_c,
            h,
            w,
            stride,
            oh: (h + 2 - 3) / stride + 1,
            ow: (w + 2 - 3) / stride + 1,
        }
    }

    fn in_len(&self) -> usize {
        self.in_c * self.h * self.w
    }

    fn patch(&self) -> usize {
        self.in_c * 9
    }

    fn positions(&self) -> usize {
        self.oh * self.ow
    }

    fn out_len(&self) -> usize {
        self.out_c * self.positions()
    }

    /// `cols[q, p]` with `q = c*9 + ky*3 + kx` and `p = oy*ow + ox`.
    fn im2col<S: Scalar>(&self, x: &[S], cols: &mut [S]) {
        let p_len = self.positions();
        for c in 0..self.in_c {
            let plane = &x[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ky in 0..3 {
                for kx in 0..3 {
                    let row = &mut cols[(c * 9 + ky * 3 + kx) * p_len..][..p_len];
                    for oy in 0..self.oh {
                        let iy = (oy * self.stride + ky) as isize - 1;
                        for ox in 0..self.ow {
                            let ix = (ox * self.stride + kx) as isize - 1;
                            row[oy * self.ow + ox] =
                                if iy >= 0 && ix >= 0 && (iy as usize) < self.h && (ix as usize) < self.w {
                                    plane[iy as usize * self.w + ix as usize]
                                } else {
                                    S::zero()
                                };
                        }
                    }
                }
            }
        }
    }

    fn col2im_add<S: Scalar>(&self, cols: &[S], dx: &mut [S]) {
        let p_len = self.positions();
        for c in 0..self.in_c {
            let plane = &mut dx[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ky in 0..3 {
                for kx in 0..3 {
                    let row = &cols[(c * 9 + ky * 3 + kx) * p_len..][..p_len];
                    for oy in 0..self.oh {
                        let iy = (oy * self.stride + ky) as isize - 1;
                        if iy < 0 || iy as usize >= self.h {
                            continue;
                        }
                        for ox in 0..self.ow {
                            let ix = (ox * self.stride + kx) as isize - 1;
                            if ix >= 0 && (ix as usize) < self.w {
                                plane[iy as usize * self.w + ix as usize] += row[oy * self.ow + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub(crate) enum Op {
    Dense { inp: usize, out: usize },
    Conv(ConvGeom),
    Act(Activation),
}

/// Ops of a backbone plus head, with the weight/bias array indices of each
/// parameterized op. Array indices count φ arrays first, then θ.
#[derive(Clone, Debug)]
pub(crate) struct Plan {
    pub ops: Vec<Op>,
    pub params: Vec<Option<(usize, usize)>>,
    /// First op of the head.
    pub head_op: usize,
    /// Op that produces the designated last feature layer weights.
    pub feature_op: usize,
    pub feature_len: usize,
    pub head_width: usize,
    /// `(name, shape)` of every array, φ then θ.
    pub arrays: Vec<(String, Vec<usize>)>,
    pub num_phi: usize,
}

impl Plan {
    pub fn new(arch: &Arch, head_width: usize) -> Plan {
        let mut ops = Vec::new();
        let mut params = Vec::new();
        let mut arrays: Vec<(String, Vec<usize>)> = Vec::new();
        fn push_param(
            ops: &mut Vec<Op>,
            params: &mut Vec<Option<(usize, usize)>>,
            arrays: &mut Vec<(String, Vec<usize>)>,
            op: Op,
            w_shape: Vec<usize>,
            b_len: usize,
        ) {
            let layer = arrays.len() / 2;
            let w = arrays.len();
            arrays.push((format!("phi.{layer}.weight"), w_shape));
            arrays.push((format!("phi.{layer}.bias"), vec![b_len]));
            ops.push(op);
            params.push(Some((w, w + 1)));
        }
        let feature_len = match arch {
            Arch::Mlp {
                input,
                hidden,
                activation,
            } => {
                let mut width = *input;
                for &h in hidden {
                    push_param(
                        &mut ops,
                        &mut params,
                        &mut arrays,
                        Op::Dense { inp: width, out: h },
                        vec![h, width],
                        h,
                    );
                    ops.push(Op::Act(*activation));
                    params.push(None);
                    width = h;
                }
                width
            }
            Arch::SmallCnn {
                channels,
                height,
                width,
                filters,
                strides,
            } => {
                let (mut c, mut h, mut w) = (*channels, *height, *width);
                for (&f, &s) in filters.iter().zip(strides) {
                    let g = ConvGeom::new(c, f, h, w, s);
                    push_param(&mut ops, &mut params, &mut arrays, Op::Conv(g), vec![f, c, 3, 3], f);
                    ops.push(Op::Act(Activation::Relu));
                    params.push(None);
                    c = f;
                    h = g.oh;
                    w = g.ow;
                }
                c * h * w
            }
        };
        let feature_op = params
            .iter()
            .rposition(Option::is_some)
            .expect("backbone has at least one layer");
        let num_phi = arrays.len();
        let head_op = ops.len();
        arrays.push(("theta.head.weight".into(), vec![head_width, feature_len]));
        arrays.push(("theta.head.bias".into(), vec![head_width]));
        ops.push(Op::Dense {
            inp: feature_len,
            out: head_width,
        });
        params.push(Some((num_phi, num_phi + 1)));
        Plan {
            ops,
            params,
            head_op,
            feature_op,
            feature_len,
            head_width,
            arrays,
            num_phi,
        }
    }

    /// Array index of the designated last feature layer weights.
    pub fn feature_array(&self) -> usize {
        self.params[self.feature_op].expect("feature op is parameterized").0
    }
}

/// Activations of one forward pass: `acts[0]` is the input, `acts[i + 1]`
/// the output of op `i`.
pub(crate) struct Trace<S> {
    pub batch: usize,
    pub acts: Vec<Vec<S>>,
}

impl<S: Scalar> Trace<S> {
    pub fn logits(&self) -> &[S] {
        self.acts.last().expect("non-empty trace")
    }

    pub fn features(&self, plan: &Plan) -> &[S] {
        &self.acts[plan.head_op]
    }
}

pub(crate) fn forward<S: Scalar, P: AsRef<[S]>>(plan: &Plan, params: &[P], x: Vec<S>, batch: usize) -> Trace<S> {
    let mut acts = Vec::with_capacity(plan.ops.len() + 1);
    acts.push(x);
    for (op, p) in plan.ops.iter().zip(&plan.params) {
        let input = acts.last().expect("input present");
        let out = match op {
            Op::Dense { inp, out } => {
                let (wi, bi) = p.expect("dense has params");
                let (w, b) = (params[wi].as_ref(), params[bi].as_ref());
                let mut y = vec![S::zero(); batch * out];
                S::gemm(batch, *inp, *out, input, false, w, true, &mut y, false);
                for row in y.chunks_mut(*out) {
                    for (v, &bj) in row.iter_mut().zip(b) {
                        *v += bj;
                    }
                }
                y
            }
            Op::Conv(g) => {
                let (wi, bi) = p.expect("conv has params");
                let (w, b) = (params[wi].as_ref(), params[bi].as_ref());
                let p_len = g.positions();
                let mut cols = vec![S::zero(); g.patch() * p_len];
                let mut y = vec![S::zero(); batch * g.out_len()];
                for (xb, yb) in input.chunks(g.in_len()).zip(y.chunks_mut(g.out_len())) {
                    g.im2col(xb, &mut cols);
                    S::gemm(g.out_c, g.patch(), p_len, w, false, &cols, false, yb, false);
                    for (plane, &bo) in yb.chunks_mut(p_len).zip(b) {
                        for v in plane {
                            *v += bo;
                        }
                    }
                }
                y
            }
            Op::Act(a) => input.iter().map(|&v| a.apply(v)).collect(),
        };
        acts.push(out);
    }
    Trace { batch, acts }
}

/// Reverse pass from `dlogits`, stopping after op `min_op`. Returns one
/// gradient per array; arrays of ops below `min_op` come back empty.
pub(crate) fn backward<S: Scalar, P: AsRef<[S]>>(
    plan: &Plan,
    params: &[P],
    trace: &Trace<S>,
    dlogits: Vec<S>,
    min_op: usize,
) -> Vec<Vec<S>> {
    let batch = trace.batch;
    let mut grads: Vec<Vec<S>> = vec![Vec::new(); plan.arrays.len()];
    let mut dout = dlogits;
    for i in (min_op..plan.ops.len()).rev() {
        let input = &trace.acts[i];
        let need_dx = i > min_op;
        match &plan.ops[i] {
            Op::Dense { inp, out } => {
                let (wi, bi) = plan.params[i].expect("dense has params");
                let w = params[wi].as_ref();
                let mut dw = vec![S::zero(); out * inp];
                S::gemm(*out, batch, *inp, &dout, true, input, false, &mut dw, false);
                let mut db = vec![S::zero(); *out];
                for row in dout.chunks(*out) {
                    for (d, &v) in db.iter_mut().zip(row) {
                        *d += v;
                    }
                }
                grads[wi] = dw;
                grads[bi] = db;
                if need_dx {
                    let mut dx = vec![S::zero(); batch * inp];
                    S::gemm(batch, *out, *inp, &dout, false, w, false, &mut dx, false);
                    dout = dx;
                }
            }
            Op::Conv(g) => {
                let (wi, bi) = plan.params[i].expect("conv has params");
                let w = params[wi].as_ref();
                let p_len = g.positions();
                let mut dw = vec![S::zero(); g.out_c * g.patch()];
                let mut db = vec![S::zero(); g.out_c];
                let mut cols = vec![S::zero(); g.patch() * p_len];
                let mut dcols = vec![S::zero(); g.patch() * p_len];
                let mut dx = if need_dx {
                    vec![S::zero(); batch * g.in_len()]
                } else {
                    Vec::new()
                };
                for b in 0..batch {
                    let xb = &input[b * g.in_len()..(b + 1) * g.in_len()];
                    let db_out = &dout[b * g.out_len()..(b + 1) * g.out_len()];
                    g.im2col(xb, &mut cols);
                    S::gemm(g.out_c, p_len, g.patch(), db_out, false, &cols, true, &mut dw, true);
                    for (d, plane) in db.iter_mut().zip(db_out.chunks(p_len)) {
                        for &v in plane {
                            *d += v;
                        }
                    }
                    if need_dx {
                        S::gemm(g.patch(), g.out_c, p_len, w, true, db_out, false, &mut dcols, false);
                        g.col2im_add(&dcols, &mut dx[b * g.in_len()..(b + 1) * g.in_len()]);
                    }
                }
                grads[wi] = dw;
                grads[bi] = db;
                if need_dx {
                    dout = dx;
                }
            }
            Op::Act(a) => {
                let y = &trace.acts[i + 1];
                for (d, &yv) in dout.iter_mut().zip(y) {
                    *d = a.backward(*d, yv);
                }
            }
        }
    }
    grads
}
