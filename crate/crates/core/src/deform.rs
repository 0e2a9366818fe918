//! Dense deformation fields: trilinear warping and its derivative,
//! nearest-neighbour label warping, bending energy and Jacobian diagnostics.
//!
//! Displacements are in voxel units and act as `warped(x) = moving(x + d(x))`.
//! Samples outside the moving image are clamped to the border.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::scalar::{dot, Real};
use crate::volume::{Dims, LabelMap, Volume};

/// One displacement 3-vector per voxel, stored as three component planes.
#[derive(Clone, Debug, PartialEq)]
pub struct Ddf<T> {
    dims: Dims,
    comps: [Vec<T>; 3],
}

impl<T: Real> Ddf<T> {
    pub fn zeros(dims: Dims) -> Self {
        Ddf { dims, comps: [vec![T::zero(); dims.len()], vec![T::zero(); dims.len()], vec![T::zero(); dims.len()]] }
    }

    pub fn from_components(dims: Dims, comps: [Vec<T>; 3]) -> Result<Self> {
        if comps.iter().any(|c| c.len() != dims.len()) {
            return Err(Error::Shape(format!("DDF components must each hold {} voxels", dims.len())));
        }
        Ok(Ddf { dims, comps })
    }

    /// Builds a field from a function of voxel coordinates.
    pub fn from_fn(dims: Dims, mut f: impl FnMut(usize, usize, usize) -> [T; 3]) -> Self {
        let mut out = Self::zeros(dims);
        for z in 0..dims.nz {
            for y in 0..dims.ny {
                for x in 0..dims.nx {
                    let i = dims.index(x, y, z);
                    let d = f(x, y, z);
                    for c in 0..3 {
                        out.comps[c][i] = d[c];
                    }
                }
            }
        }
        out
    }

    /// `[dx0, dy0, dz0, dx1, ...]` layout, as stored on disk.
    pub fn from_interleaved(dims: Dims, data: &[T]) -> Result<Self> {
        if data.len() != 3 * dims.len() {
            return Err(Error::Shape(format!("interleaved DDF {dims} needs {} values, got {}", 3 * dims.len(), data.len())));
        }
        let mut out = Self::zeros(dims);
        for (i, v) in data.chunks_exact(3).enumerate() {
            for c in 0..3 {
                out.comps[c][i] = v[c];
            }
        }
        Ok(out)
    }

    pub fn to_interleaved(&self) -> Vec<T> {
        let mut out = Vec::with_capacity(3 * self.dims.len());
        for i in 0..self.dims.len() {
            out.extend_from_slice(&[self.comps[0][i], self.comps[1][i], self.comps[2][i]]);
        }
        out
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn component(&self, c: usize) -> &[T] {
        &self.comps[c]
    }

    pub fn component_mut(&mut self, c: usize) -> &mut [T] {
        &mut self.comps[c]
    }

    pub fn components(&self) -> &[Vec<T>; 3] {
        &self.comps
    }

    pub fn components_mut(&mut self) -> &mut [Vec<T>; 3] {
        &mut self.comps
    }

    #[inline]
    pub fn at(&self, i: usize) -> [T; 3] {
        [self.comps[0][i], self.comps[1][i], self.comps[2][i]]
    }

    pub fn set(&mut self, i: usize, d: [T; 3]) {
        for c in 0..3 {
            self.comps[c][i] = d[c];
        }
    }

    pub fn is_finite(&self) -> bool {
        self.comps.iter().all(|c| c.iter().all(|v| v.is_finite()))
    }

    /// Largest displacement magnitude.
    pub fn max_norm(&self) -> f64 {
        (0..self.dims.len())
            .map(|i| self.at(i).iter().map(|v| v.as_f64() * v.as_f64()).sum::<f64>().sqrt())
            .fold(0.0, f64::max)
    }

    /// Largest absolute component.
    pub fn max_abs(&self) -> f64 {
        self.comps.iter().flat_map(|c| c.iter()).map(|v| v.as_f64().abs()).fold(0.0, f64::max)
    }

    pub fn cast<U: Real>(&self) -> Ddf<U> {
        let conv = |c: &Vec<T>| c.iter().map(|&v| U::lit(v.as_f64())).collect::<Vec<U>>();
        Ddf { dims: self.dims, comps: [conv(&self.comps[0]), conv(&self.comps[1]), conv(&self.comps[2])] }
    }

    fn check_finite(&self) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite("deformation field"))
        }
    }
}

#[derive(Clone, Copy)]
struct AxisSample<T> {
    /// Lower corner index along the axis.
    i0: usize,
    /// 1 for an interior cell, 0 on a single-voxel axis.
    step: usize,
    frac: T,
    /// Zero when the coordinate was clamped, so the derivative vanishes there.
    slope: T,
}

#[inline(always)]
fn axis_sample<T: Real>(p: T, n: usize, hi: T) -> AxisSample<T> {
    if n == 1 {
        return AxisSample { i0: 0, step: 0, frac: T::zero(), slope: T::zero() };
    }
    let (pc, slope) = if p < T::zero() {
        (T::zero(), T::zero())
    } else if p > hi {
        (hi, T::zero())
    } else {
        (p, T::one())
    };
    let i0 = pc.as_index().min(n - 2);
    AxisSample { i0, step: 1, frac: pc - T::from_index(i0), slope }
}

#[inline(always)]
fn lerp<T: Real>(a: T, b: T, t: T) -> T {
    a + (b - a) * t
}

/// The eight corner values of the cell containing `p`, plus the axis samples.
#[inline(always)]
fn corners<T: Real>(img: &[T], dims: Dims, p: [T; 3]) -> ([T; 8], [AxisSample<T>; 3]) {
    let hi = |n: usize| T::from_index(n.max(1) - 1);
    let sx = axis_sample(p[0], dims.nx, hi(dims.nx));
    let sy = axis_sample(p[1], dims.ny, hi(dims.ny));
    let sz = axis_sample(p[2], dims.nz, hi(dims.nz));
    let base = dims.index(sx.i0, sy.i0, sz.i0);
    let (ox, oy, oz) = (sx.step, sy.step * dims.nx, sz.step * dims.nx * dims.ny);
    let c = &img[base..=base + ox + oy + oz];
    (
        [c[0], c[ox], c[oy], c[ox + oy], c[oz], c[ox + oz], c[oy + oz], c[ox + oy + oz]],
        [sx, sy, sz],
    )
}

/// Trilinear value and spatial gradient of `img` at continuous index `p`.
#[inline(always)]
fn sample_with_grad<T: Real>(img: &[T], dims: Dims, p: [T; 3]) -> (T, [T; 3]) {
    let ([c000, c100, c010, c110, c001, c101, c011, c111], [sx, sy, sz]) = corners(img, dims, p);
    let (fx, fy, fz) = (sx.frac, sy.frac, sz.frac);

    let c00 = lerp(c000, c100, fx);
    let c10 = lerp(c010, c110, fx);
    let c01 = lerp(c001, c101, fx);
    let c11 = lerp(c011, c111, fx);
    let c0 = lerp(c00, c10, fy);
    let c1 = lerp(c01, c11, fy);
    let value = lerp(c0, c1, fz);

    let gx = lerp(lerp(c100 - c000, c110 - c010, fy), lerp(c101 - c001, c111 - c011, fy), fz) * sx.slope;
    let gy = lerp(c10 - c00, c11 - c01, fz) * sy.slope;
    let gz = (c1 - c0) * sz.slope;
    (value, [gx, gy, gz])
}

#[inline(always)]
fn sample<T: Real>(img: &[T], dims: Dims, p: [T; 3]) -> T {
    let ([c000, c100, c010, c110, c001, c101, c011, c111], [sx, sy, sz]) = corners(img, dims, p);
    let c00 = lerp(c000, c100, sx.frac);
    let c10 = lerp(c010, c110, sx.frac);
    let c01 = lerp(c001, c101, sx.frac);
    let c11 = lerp(c011, c111, sx.frac);
    lerp(lerp(c00, c10, sy.frac), lerp(c01, c11, sy.frac), sz.frac)
}

/// `out(x) = moving(x + d(x))` with trilinear interpolation.
pub fn warp_trilinear<T: Real>(moving: &Volume<T>, ddf: &Ddf<T>) -> Result<Volume<T>> {
    ddf.check_finite()?;
    let dims = ddf.dims;
    let (nx, plane) = (dims.nx, dims.nx * dims.ny);
    let mdims = moving.dims();
    let img = moving.data();
    let [dx, dy, dz] = &ddf.comps;
    let mut out = vec![T::zero(); dims.len()];
    out.par_chunks_mut(plane).enumerate().for_each(|(z, chunk)| {
        let zf = T::from_index(z);
        for (y, row) in chunk.chunks_exact_mut(nx).enumerate() {
            let yf = T::from_index(y);
            let r = z * plane + y * nx;
            let (rx, ry, rz) = (&dx[r..r + nx], &dy[r..r + nx], &dz[r..r + nx]);
            for x in 0..nx {
                let p = [T::from_index(x) + rx[x], yf + ry[x], zf + rz[x]];
                row[x] = sample(img, mdims, p);
            }
        }
    });
    Volume::new(dims, moving.spacing(), out)
}

/// Warped image together with `∇moving` evaluated at the warped positions.
pub fn warp_with_image_gradient<T: Real>(moving: &Volume<T>, ddf: &Ddf<T>) -> Result<(Volume<T>, Ddf<T>)> {
    ddf.check_finite()?;
    let dims = ddf.dims;
    let (nx, plane) = (dims.nx, dims.nx * dims.ny);
    let mdims = moving.dims();
    let img = moving.data();
    let [dx, dy, dz] = &ddf.comps;
    let mut out = vec![T::zero(); dims.len()];
    let mut grad = Ddf::zeros(dims);
    {
        let [g0, g1, g2] = &mut grad.comps;
        out.par_chunks_mut(plane)
            .zip(g0.par_chunks_mut(plane))
            .zip(g1.par_chunks_mut(plane))
            .zip(g2.par_chunks_mut(plane))
            .enumerate()
            .for_each(|(z, (((o, a), b), c))| {
                let zf = T::from_index(z);
                for y in 0..dims.ny {
                    let yf = T::from_index(y);
                    let k = y * nx;
                    let r = z * plane + k;
                    let (rx, ry, rz) = (&dx[r..r + nx], &dy[r..r + nx], &dz[r..r + nx]);
                    let (o, a, b, c) = (&mut o[k..k + nx], &mut a[k..k + nx], &mut b[k..k + nx], &mut c[k..k + nx]);
                    for x in 0..nx {
                        let p = [T::from_index(x) + rx[x], yf + ry[x], zf + rz[x]];
                        let (v, g) = sample_with_grad(img, mdims, p);
                        o[x] = v;
                        a[x] = g[0];
                        b[x] = g[1];
                        c[x] = g[2];
                    }
                }
            });
    }
    Ok((Volume::new(dims, moving.spacing(), out)?, grad))
}

/// Chain rule through the warp: `upstream(x) · ∇moving(x + d(x))` per voxel.
pub fn warp_gradient<T: Real>(moving: &Volume<T>, ddf: &Ddf<T>, upstream: &Volume<T>) -> Result<Ddf<T>> {
    ddf.dims.check_same(upstream.dims())?;
    let (_, mut g) = warp_with_image_gradient(moving, ddf)?;
    apply_upstream(&mut g, upstream.data());
    Ok(g)
}

pub(crate) fn apply_upstream<T: Real>(image_grad: &mut Ddf<T>, upstream: &[T]) {
    for comp in image_grad.comps.iter_mut() {
        comp.par_iter_mut().zip(upstream.par_iter()).for_each(|(g, &u)| *g *= u);
    }
}

/// `out(x) = labels(round(x + d(x)))`, clamped to the label grid.
pub fn warp_labels_nn<T: Real>(labels: &LabelMap, ddf: &Ddf<T>) -> Result<LabelMap> {
    ddf.check_finite()?;
    let dims = ddf.dims;
    let ldims = labels.dims();
    let src = labels.data();
    let round = |p: T, n: usize| -> usize {
        let r = p.round();
        if r <= T::zero() {
            0
        } else {
            r.to_usize().unwrap_or(usize::MAX).min(n - 1)
        }
    };
    let mut out = vec![0u8; dims.len()];
    let plane = dims.nx * dims.ny;
    out.par_chunks_mut(plane).enumerate().for_each(|(z, chunk)| {
        for y in 0..dims.ny {
            for x in 0..dims.nx {
                let i = dims.index(x, y, z);
                let d = ddf.at(i);
                let px = round(T::lit(x as f64) + d[0], ldims.nx);
                let py = round(T::lit(y as f64) + d[1], ldims.ny);
                let pz = round(T::lit(z as f64) + d[2], ldims.nz);
                chunk[x + dims.nx * y] = src[ldims.index(px, py, pz)];
            }
        }
    });
    LabelMap::new(dims, out)
}

fn check_bending_dims(dims: Dims) -> Result<()> {
    if dims.min_axis() < 3 {
        return Err(Error::TooSmall { dims, min: 3 });
    }
    Ok(())
}

/// How many voxels share the stencil centred at `c` along an axis of length
/// `n`: face voxels borrow the neighbouring interior centre. 0 off the interior.
#[inline]
fn centre_weight(c: usize, n: usize) -> usize {
    if c == 0 || c + 1 >= n {
        0
    } else {
        1 + (c == 1) as usize + (c + 2 == n) as usize
    }
}

#[inline]
fn axpy<T: Real>(dst: &mut [T], k: T, src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += k * s;
    }
}

/// Shared kernel; when `grad` is given `scale · ∇E` is accumulated into it.
/// Works one x row at a time: each second difference is formed for the row,
/// weighted, then pushed back through the transposed stencil.
fn bending_kernel<T: Real>(ddf: &Ddf<T>, mut grad: Option<&mut Ddf<T>>, scale: f64) -> Result<f64> {
    let dims = ddf.dims;
    check_bending_dims(dims)?;
    let (nx, ny, nz) = (dims.nx, dims.ny, dims.nz);
    let norm = 1.0 / (3.0 * dims.len() as f64);
    let (sy, sz) = (nx, nx * ny);
    let inner = nx - 2;
    // x weights for stencils centred on interior x
    let wx: Vec<T> = (1..nx - 1).map(|x| T::from_index(centre_weight(x, nx))).collect();
    let mut t = vec![T::zero(); nx];
    let mut u = vec![T::zero(); nx];
    let (two, quarter) = (T::lit(2.0), T::lit(0.25));
    let mut energy = 0.0f64;
    for comp in 0..3 {
        let f = &ddf.comps[comp];
        for z in 0..nz {
            let wz = centre_weight(z, nz);
            for y in 0..ny {
                let wy = centre_weight(y, ny);
                let row = dims.index(0, y, z);
                let r = |o: usize| &f[o..o + nx];
                let want_grad = grad.is_some();
                // accumulates w·Σ m t² and leaves the scattered weights in u
                let mut line = |t: &[T], w: f64, x_inner: bool, u: &mut [T]| {
                    let n = t.len();
                    let k = T::lit(2.0 * w * norm * scale);
                    if x_inner {
                        for i in 0..n {
                            u[i] = wx[i] * t[i];
                        }
                        energy += w * dot(&u[..n], t).as_f64();
                        if want_grad {
                            u[..n].iter_mut().for_each(|v| *v *= k);
                        }
                    } else {
                        energy += w * dot(t, t).as_f64();
                        if want_grad {
                            for i in 0..n {
                                u[i] = k * t[i];
                            }
                        }
                    }
                };

                // f_xx on every line
                {
                    let c = r(row);
                    for i in 0..inner {
                        t[i] = c[i] - two * c[i + 1] + c[i + 2];
                    }
                    line(&t[..inner], 1.0, true, &mut u[..inner]);
                    if let Some(g) = grad.as_deref_mut() {
                        let g = &mut g.comps[comp];
                        let u = &u[..inner];
                        axpy(&mut g[row..row + inner], T::one(), u);
                        axpy(&mut g[row + 1..row + 1 + inner], -two, u);
                        axpy(&mut g[row + 2..row + 2 + inner], T::one(), u);
                    }
                }
                // pure second differences along y and z, full x rows
                for (w, s) in [(wy, sy), (wz, sz)] {
                    if w == 0 {
                        continue;
                    }
                    let (m, c, p) = (r(row - s), r(row), r(row + s));
                    for i in 0..nx {
                        t[i] = m[i] - two * c[i] + p[i];
                    }
                    line(&t, w as f64, false, &mut u);
                    if let Some(g) = grad.as_deref_mut() {
                        let g = &mut g.comps[comp];
                        axpy(&mut g[row - s..row - s + nx], T::one(), &u);
                        axpy(&mut g[row..row + nx], -two, &u);
                        axpy(&mut g[row + s..row + s + nx], T::one(), &u);
                    }
                }
                // mixed xy and xz, x-interior lines
                for (w, s) in [(wy, sy), (wz, sz)] {
                    if w == 0 {
                        continue;
                    }
                    let (m, p) = (r(row - s), r(row + s));
                    for i in 0..inner {
                        t[i] = quarter * ((p[i + 2] - m[i + 2]) - (p[i] - m[i]));
                    }
                    line(&t[..inner], 2.0 * w as f64, true, &mut u[..inner]);
                    if let Some(g) = grad.as_deref_mut() {
                        let g = &mut g.comps[comp];
                        let u = &u[..inner];
                        axpy(&mut g[row + s + 2..row + s + 2 + inner], quarter, u);
                        axpy(&mut g[row - s + 2..row - s + 2 + inner], -quarter, u);
                        axpy(&mut g[row + s..row + s + inner], -quarter, u);
                        axpy(&mut g[row - s..row - s + inner], quarter, u);
                    }
                }
                // mixed yz, full x rows
                if wy > 0 && wz > 0 {
                    let (pp, mp) = (r(row + sy + sz), r(row - sy + sz));
                    let (pm, mm) = (r(row + sy - sz), r(row - sy - sz));
                    for i in 0..nx {
                        t[i] = quarter * ((pp[i] - mp[i]) - (pm[i] - mm[i]));
                    }
                    line(&t, 2.0 * (wy * wz) as f64, false, &mut u);
                    if let Some(g) = grad.as_deref_mut() {
                        let g = &mut g.comps[comp];
                        for (o, sign) in [(row + sy + sz, quarter), (row - sy + sz, -quarter), (row + sy - sz, -quarter), (row - sy - sz, quarter)] {
                            axpy(&mut g[o..o + nx], sign, &u);
                        }
                    }
                }
            }
        }
    }
    Ok(energy * norm)
}

/// Mean over all voxels and the three components of
/// `f_xx² + f_yy² + f_zz² + 2 f_xy² + 2 f_xz² + 2 f_yz²`.
///
/// Second derivatives are central differences in voxel units. On the faces the
/// stencil is shifted inward by one voxel, so every voxel is covered and affine
/// fields still cost nothing.
pub fn bending_energy<T: Real>(ddf: &Ddf<T>) -> Result<f64> {
    bending_kernel(ddf, None, 1.0)
}

/// Exact gradient of [`bending_energy`] with respect to every displacement.
pub fn bending_energy_grad<T: Real>(ddf: &Ddf<T>) -> Result<Ddf<T>> {
    Ok(bending_energy_and_grad(ddf)?.1)
}

pub fn bending_energy_and_grad<T: Real>(ddf: &Ddf<T>) -> Result<(f64, Ddf<T>)> {
    let mut g = Ddf::zeros(ddf.dims);
    let e = bending_kernel(ddf, Some(&mut g), 1.0)?;
    Ok((e, g))
}

/// Adds `scale · ∇E` into `grad` and returns the energy `E`.
pub(crate) fn bending_energy_accumulate<T: Real>(ddf: &Ddf<T>, grad: &mut Ddf<T>, scale: f64) -> Result<f64> {
    ddf.dims.check_same(grad.dims)?;
    bending_kernel(ddf, Some(grad), scale)
}

/// Minimum of `det(I + ∇d)` over all voxels. Central differences inside,
/// one-sided differences on the faces.
pub fn jacobian_determinant_min<T: Real>(ddf: &Ddf<T>) -> Result<f64> {
    let dims = ddf.dims;
    if dims.min_axis() < 2 {
        return Err(Error::TooSmall { dims, min: 2 });
    }
    let n = dims.as_array();
    let strides = [1usize, dims.nx, dims.nx * dims.ny];
    let deriv = |comp: &[T], i: usize, coord: usize, axis: usize| -> f64 {
        let s = strides[axis];
        if coord == 0 {
            comp[i + s].as_f64() - comp[i].as_f64()
        } else if coord == n[axis] - 1 {
            comp[i].as_f64() - comp[i - s].as_f64()
        } else {
            0.5 * (comp[i + s].as_f64() - comp[i - s].as_f64())
        }
    };
    let plane_mins: Vec<f64> = (0..dims.nz)
        .into_par_iter()
        .map(|z| {
            let mut lo = f64::INFINITY;
            for y in 0..dims.ny {
                for x in 0..dims.nx {
                    let i = dims.index(x, y, z);
                    let coords = [x, y, z];
                    let mut j = [[0.0f64; 3]; 3];
                    for c in 0..3 {
                        for a in 0..3 {
                            j[c][a] = deriv(&ddf.comps[c], i, coords[a], a) + if a == c { 1.0 } else { 0.0 };
                        }
                    }
                    let det = j[0][0] * (j[1][1] * j[2][2] - j[1][2] * j[2][1]) - j[0][1] * (j[1][0] * j[2][2] - j[1][2] * j[2][0])
                        + j[0][2] * (j[1][0] * j[2][1] - j[1][1] * j[2][0]);
                    lo = lo.min(det);
                }
            }
            lo
        })
        .collect();
    Ok(plane_mins.into_iter().fold(f64::INFINITY, f64::min))
}

/// 2× mean-pooling; odd trailing voxels are averaged on their own.
pub fn downsample_mean<T: Real>(v: &Volume<T>) -> Volume<T> {
    let d = v.dims();
    let cd = Dims::new(d.nx.div_ceil(2), d.ny.div_ceil(2), d.nz.div_ceil(2));
    let out = Volume::from_fn(cd, |x, y, z| {
        let mut sum = T::zero();
        let mut cnt = 0usize;
        for fz in 2 * z..(2 * z + 2).min(d.nz) {
            for fy in 2 * y..(2 * y + 2).min(d.ny) {
                for fx in 2 * x..(2 * x + 2).min(d.nx) {
                    sum += v.get(fx, fy, fz);
                    cnt += 1;
                }
            }
        }
        sum / T::lit(cnt as f64)
    });
    let sp = v.spacing();
    out.with_spacing([sp[0] * 2.0, sp[1] * 2.0, sp[2] * 2.0])
}

/// Resamples a coarse field onto `fine` dims (voxel-centre aligned) and scales
/// each displacement component by the grid ratio along its axis.
pub fn upsample_ddf<T: Real>(coarse: &Ddf<T>, fine: Dims) -> Ddf<T> {
    let cd = coarse.dims;
    let ratio = [
        fine.nx as f64 / cd.nx as f64,
        fine.ny as f64 / cd.ny as f64,
        fine.nz as f64 / cd.nz as f64,
    ];
    let map = |x: usize, a: usize| T::lit((x as f64 + 0.5) / ratio[a] - 0.5);
    let mut out = Ddf::zeros(fine);
    for c in 0..3 {
        let src = &coarse.comps[c];
        let scale = T::lit(ratio[c]);
        let dst = &mut out.comps[c];
        for z in 0..fine.nz {
            for y in 0..fine.ny {
                for x in 0..fine.nx {
                    let p = [map(x, 0), map(y, 1), map(z, 2)];
                    dst[fine.index(x, y, z)] = sample(src, cd, p) * scale;
                }
            }
        }
    }
    out
}
