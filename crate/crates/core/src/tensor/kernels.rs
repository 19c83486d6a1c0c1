//! Loop kernels behind the tape primitives. All accumulation is sequential
//! in a fixed order, so results are bit-reproducible.

/// Indices `i` in `0..n_in` with `stride * i + off` inside `0..n_out`.
#[inline]
fn valid_range(n_in: usize, n_out: usize, stride: isize, off: isize) -> (usize, usize) {
    let n_in = n_in as isize;
    let n_out = n_out as isize;
    // stride * i + off >= 0  and  stride * i + off <= n_out - 1
    let lo = if off >= 0 { 0 } else { (-off + stride - 1) / stride };
    let hi_num = n_out - 1 - off;
    let hi = if hi_num < 0 { -1 } else { hi_num / stride };
    let lo = lo.max(0);
    let hi = (hi + 1).min(n_in);
    if hi <= lo {
        (0, 0)
    } else {
        (lo as usize, hi as usize)
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct Dims4 {
    pub c: usize,
    pub z: usize,
    pub y: usize,
    pub x: usize,
}

impl Dims4 {
    pub fn from_shape(s: &[usize]) -> Self {
        Dims4 {
            c: s[0],
            z: s[1],
            y: s[2],
            x: s[3],
        }
    }
    #[inline]
    fn plane(&self) -> usize {
        self.z * self.y * self.x
    }
    #[inline]
    fn at(&self, c: usize, z: usize, y: usize) -> usize {
        ((c * self.z + z) * self.y + y) * self.x
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct Kernel5 {
    pub co: usize,
    pub ci: usize,
    pub kz: usize,
    pub ky: usize,
    pub kx: usize,
}

impl Kernel5 {
    pub fn from_shape(s: &[usize]) -> Self {
        Kernel5 {
            co: s[0],
            ci: s[1],
            kz: s[2],
            ky: s[3],
            kx: s[4],
        }
    }
    #[inline]
    fn at(&self, o: usize, i: usize, a: usize, b: usize, c: usize) -> usize {
        (((o * self.ci + i) * self.kz + a) * self.ky + b) * self.kx + c
    }
}

/// Iterates the kernel taps of a stride-1 "same" convolution together with
/// the output index ranges for which the tap reads inside the input.
#[inline]
fn same_taps(
    d: Dims4,
    k: Kernel5,
    mut f: impl FnMut(usize, usize, usize, isize, isize, isize, (usize, usize), (usize, usize), (usize, usize)),
) {
    let (pz, py, px) = ((k.kz / 2) as isize, (k.ky / 2) as isize, (k.kx / 2) as isize);
    for a in 0..k.kz {
        let dz = a as isize - pz;
        let rz = valid_range(d.z, d.z, 1, dz);
        for b in 0..k.ky {
            let dy = b as isize - py;
            let ry = valid_range(d.y, d.y, 1, dy);
            for c in 0..k.kx {
                let dx = c as isize - px;
                let rx = valid_range(d.x, d.x, 1, dx);
                f(a, b, c, dz, dy, dx, rz, ry, rx);
            }
        }
    }
}

/// Stride-1 convolution with zero "same" padding (odd kernels).
/// `x`: `[ci, z, y, x]`, `w`: `[co, ci, kz, ky, kx]`, result `[co, z, y, x]`.
pub(crate) fn conv3d(x: &[f64], d: Dims4, w: &[f64], k: Kernel5, bias: Option<&[f64]>) -> Vec<f64> {
    let od = Dims4 { c: k.co, ..d };
    let mut out = vec![0.0; od.c * od.plane()];
    for o in 0..k.co {
        if let Some(b) = bias {
            out[o * od.plane()..(o + 1) * od.plane()].fill(b[o]);
        }
        for i in 0..k.ci {
            same_taps(d, k, |a, b, c, dz, dy, dx, rz, ry, rx| {
                let wv = w[k.at(o, i, a, b, c)];
                if wv == 0.0 || rx.1 == rx.0 {
                    return;
                }
                let len = rx.1 - rx.0;
                for z in rz.0..rz.1 {
                    let zi = (z as isize + dz) as usize;
                    for y in ry.0..ry.1 {
                        let yi = (y as isize + dy) as usize;
                        let ob = od.at(o, z, y) + rx.0;
                        let ib = (d.at(i, zi, yi) as isize + rx.0 as isize + dx) as usize;
                        let orow = &mut out[ob..ob + len];
                        let irow = &x[ib..ib + len];
                        for (ov, iv) in orow.iter_mut().zip(irow) {
                            *ov += wv * iv;
                        }
                    }
                }
            });
        }
    }
    out
}

/// Gradients of [`conv3d`] with respect to input, weights and bias.
pub(crate) fn conv3d_backward(
    x: &[f64],
    d: Dims4,
    w: &[f64],
    k: Kernel5,
    g: &[f64],
    need_x: bool,
    need_w: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>, Vec<f64>) {
    let od = Dims4 { c: k.co, ..d };
    let mut gx = need_x.then(|| vec![0.0; x.len()]);
    let mut gw = need_w.then(|| vec![0.0; w.len()]);
    let gb: Vec<f64> = (0..k.co)
        .map(|o| g[o * od.plane()..(o + 1) * od.plane()].iter().sum())
        .collect();
    for o in 0..k.co {
        for i in 0..k.ci {
            same_taps(d, k, |a, b, c, dz, dy, dx, rz, ry, rx| {
                if rx.1 == rx.0 {
                    return;
                }
                let widx = k.at(o, i, a, b, c);
                let wv = w[widx];
                let len = rx.1 - rx.0;
                let mut acc = 0.0;
                for z in rz.0..rz.1 {
                    let zi = (z as isize + dz) as usize;
                    for y in ry.0..ry.1 {
                        let yi = (y as isize + dy) as usize;
                        let ob = od.at(o, z, y) + rx.0;
                        let ib = (d.at(i, zi, yi) as isize + rx.0 as isize + dx) as usize;
                        let grow = &g[ob..ob + len];
                        if let Some(gx) = gx.as_mut() {
                            if wv != 0.0 {
                                for (xv, gv) in gx[ib..ib + len].iter_mut().zip(grow) {
                                    *xv += wv * gv;
                                }
                            }
                        }
                        if gw.is_some() {
                            acc += grow.iter().zip(&x[ib..ib + len]).map(|(a, b)| a * b).sum::<f64>();
                        }
                    }
                }
                if let Some(gw) = gw.as_mut() {
                    gw[widx] += acc;
                }
            });
        }
    }
    (gx, gw, gb)
}

/// Stride-2 transposed convolution doubling every spatial extent.
/// `x`: `[ci, z, y, x]`, `w`: `[ci, co, kz, ky, kx]`, result `[co, 2z, 2y, 2x]`.
/// Tap `t` of an axis with kernel size `K` lands at `2 i + t - (K - 1) / 2`.
pub(crate) fn conv_transpose3d(x: &[f64], d: Dims4, w: &[f64], k: Kernel5, bias: Option<&[f64]>) -> Vec<f64> {
    // Kernel5 fields are (ci, co) for the transposed layout.
    let (ci_n, co_n) = (k.co, k.ci);
    let od = Dims4 {
        c: co_n,
        z: 2 * d.z,
        y: 2 * d.y,
        x: 2 * d.x,
    };
    let mut out = vec![0.0; od.c * od.plane()];
    if let Some(b) = bias {
        for o in 0..co_n {
            out[o * od.plane()..(o + 1) * od.plane()].fill(b[o]);
        }
    }
    let (pz, py, px) = (((k.kz - 1) / 2) as isize, ((k.ky - 1) / 2) as isize, ((k.kx - 1) / 2) as isize);
    for i in 0..ci_n {
        for o in 0..co_n {
            for a in 0..k.kz {
                let rz = valid_range(d.z, od.z, 2, a as isize - pz);
                for b in 0..k.ky {
                    let ry = valid_range(d.y, od.y, 2, b as isize - py);
                    for c in 0..k.kx {
                        let offx = c as isize - px;
                        let rx = valid_range(d.x, od.x, 2, offx);
                        let wv = w[k.at(i, o, a, b, c)];
                        if wv == 0.0 {
                            continue;
                        }
                        for z in rz.0..rz.1 {
                            let zo = (2 * z as isize + a as isize - pz) as usize;
                            for y in ry.0..ry.1 {
                                let yo = (2 * y as isize + b as isize - py) as usize;
                                let ib = d.at(i, z, y);
                                let ob = od.at(o, zo, yo);
                                for xx in rx.0..rx.1 {
                                    let xo = (2 * xx as isize + offx) as usize;
                                    out[ob + xo] += wv * x[ib + xx];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

pub(crate) fn conv_transpose3d_backward(
    x: &[f64],
    d: Dims4,
    w: &[f64],
    k: Kernel5,
    g: &[f64],
    need_x: bool,
    need_w: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>, Vec<f64>) {
    let (ci_n, co_n) = (k.co, k.ci);
    let od = Dims4 {
        c: co_n,
        z: 2 * d.z,
        y: 2 * d.y,
        x: 2 * d.x,
    };
    let mut gx = need_x.then(|| vec![0.0; x.len()]);
    let mut gw = need_w.then(|| vec![0.0; w.len()]);
    let gb: Vec<f64> = (0..co_n)
        .map(|o| g[o * od.plane()..(o + 1) * od.plane()].iter().sum())
        .collect();
    let (pz, py, px) = (((k.kz - 1) / 2) as isize, ((k.ky - 1) / 2) as isize, ((k.kx - 1) / 2) as isize);
    for i in 0..ci_n {
        for o in 0..co_n {
            for a in 0..k.kz {
                let rz = valid_range(d.z, od.z, 2, a as isize - pz);
                for b in 0..k.ky {
                    let ry = valid_range(d.y, od.y, 2, b as isize - py);
                    for c in 0..k.kx {
                        let offx = c as isize - px;
                        let rx = valid_range(d.x, od.x, 2, offx);
                        let widx = k.at(i, o, a, b, c);
                        let wv = w[widx];
                        let mut acc = 0.0;
                        for z in rz.0..rz.1 {
                            let zo = (2 * z as isize + a as isize - pz) as usize;
                            for y in ry.0..ry.1 {
                                let yo = (2 * y as isize + b as isize - py) as usize;
                                let ib = d.at(i, z, y);
                                let ob = od.at(o, zo, yo);
                                for xx in rx.0..rx.1 {
                                    let xo = (2 * xx as isize + offx) as usize;
                                    let gv = g[ob + xo];
                                    if let Some(gx) = gx.as_mut() {
                                        gx[ib + xx] += wv * gv;
                                    }
                                    acc += gv * x[ib + xx];
                                }
                            }
                        }
                        if let Some(gw) = gw.as_mut() {
                            gw[widx] += acc;
                        }
                    }
                }
            }
        }
    }
    (gx, gw, gb)
}

/// Nearest-neighbour upsampling by two along z, y and x.
pub(crate) fn upsample2(x: &[f64], d: Dims4) -> Vec<f64> {
    let od = Dims4 {
        c: d.c,
        z: 2 * d.z,
        y: 2 * d.y,
        x: 2 * d.x,
    };
    let mut out = vec![0.0; od.c * od.plane()];
    for c in 0..d.c {
        for z in 0..od.z {
            for y in 0..od.y {
                let ib = d.at(c, z / 2, y / 2);
                let ob = od.at(c, z, y);
                for xx in 0..od.x {
                    out[ob + xx] = x[ib + xx / 2];
                }
            }
        }
    }
    out
}

pub(crate) fn upsample2_backward(g: &[f64], d: Dims4) -> Vec<f64> {
    let od = Dims4 {
        c: d.c,
        z: 2 * d.z,
        y: 2 * d.y,
        x: 2 * d.x,
    };
    let mut gx = vec![0.0; d.c * d.plane()];
    for c in 0..d.c {
        for z in 0..od.z {
            for y in 0..od.y {
                let ib = d.at(c, z / 2, y / 2);
                let ob = od.at(c, z, y);
                for xx in 0..od.x {
                    gx[ib + xx / 2] += g[ob + xx];
                }
            }
        }
    }
    gx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn valid_range_matches_brute_force() {
        for n_in in 1..6 {
            for n_out in 1..12 {
                for stride in 1..3 {
                    for off in -4..4 {
                        let (lo, hi) = valid_range(n_in, n_out, stride, off);
                        let brute: Vec<usize> = (0..n_in)
                            .filter(|&i| {
                                let p = stride * i as isize + off;
                                p >= 0 && p < n_out as isize
                            })
                            .collect();
                        let got: Vec<usize> = (lo..hi).collect();
                        assert_eq!(got, brute, "n_in={n_in} n_out={n_out} s={stride} off={off}");
                    }
                }
            }
        }
    }
}
