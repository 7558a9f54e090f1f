//! Numeric kernels: sparse (dilated) valid convolution in direct and FFT
//! forms, max-filtering with argmax tracking, their backward passes, and the
//! per-layer direct/FFT self-tuning probe.
//!
//! Conventions, shared by every oracle in the test suite:
//! - cross-correlation (no tap flip); the FFT path flips internally
//! - valid-only outputs: per axis `out = n - (k - 1) * s`
//! - per output element, taps accumulate in ascending linear kernel order
//! - argmax ties break toward the lowest linear input index

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::fft;
use crate::tensor::{dims_len, Dims, Volume};
use crate::{Error, Result};

/// Integer sampling strides applied to filter taps per axis. `(1,1,1)` is
/// ordinary dense filtering.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Sparsity(pub [usize; 3]);

impl Sparsity {
    pub const DENSE: Sparsity = Sparsity([1, 1, 1]);

    pub fn check(&self) -> Result<()> {
        if self.0.iter().any(|&s| s == 0) {
            return Err(Error::Config(format!("sparsity components must be >= 1, got {:?}", self.0)));
        }
        Ok(())
    }

    /// Extent of the sparse footprint of a size-`k` filter along one axis.
    pub fn footprint(&self, axis: usize, k: usize) -> usize {
        (k - 1) * self.0[axis] + 1
    }
}

/// Dense filter taps in the same x-fastest layout as [`Volume`].
#[derive(Clone, Debug, PartialEq)]
pub struct Kernel {
    pub shape: Dims,
    pub taps: Vec<f32>,
}

impl Kernel {
    pub fn new(shape: Dims, taps: Vec<f32>) -> Result<Self> {
        if shape.iter().any(|&k| k == 0) {
            return Err(Error::Shape(format!("kernel shape must be >= 1, got {shape:?}")));
        }
        if taps.len() != dims_len(shape) {
            return Err(Error::Shape(format!(
                "kernel of shape {shape:?} needs {} taps, got {}",
                dims_len(shape),
                taps.len()
            )));
        }
        Ok(Kernel { shape, taps })
    }

    pub fn zeros(shape: Dims) -> Self {
        Kernel { shape, taps: vec![0.0; dims_len(shape)] }
    }
}

/// Valid-output dims for `input` filtered by a `kshape` window at sparsity `s`.
pub fn valid_out_dims(input: Dims, kshape: Dims, s: Sparsity) -> Result<Dims> {
    s.check()?;
    let mut out = [0usize; 3];
    for a in 0..3 {
        let fp = s.footprint(a, kshape[a]);
        if input[a] < fp {
            return Err(Error::Shape(format!(
                "input dims {input:?} smaller than sparse footprint {fp} of kernel {kshape:?} \
                 at sparsity {:?} on axis {a}",
                s.0
            )));
        }
        out[a] = input[a] - fp + 1;
    }
    Ok(out)
}

/// Sparse valid cross-correlation: `out(p) = sum_q taps(q) * input(p + q*s)`.
pub fn conv_direct(input: &Volume, k: &Kernel, s: Sparsity) -> Result<Volume> {
    let mut out = Volume::zeros(valid_out_dims(input.dims(), k.shape, s)?);
    conv_accumulate(&mut out, input, k, s)?;
    Ok(out)
}

/// Adds the sparse valid cross-correlation of `input` with `k` into `out`,
/// which must already have the valid output dims. Taps accumulate in
/// ascending linear kernel order so results are bit-reproducible.
pub fn conv_accumulate(out: &mut Volume, input: &Volume, k: &Kernel, s: Sparsity) -> Result<()> {
    let expect = valid_out_dims(input.dims(), k.shape, s)?;
    if out.dims() != expect {
        return Err(Error::Shape(format!(
            "accumulator dims {:?} do not match valid output dims {expect:?}",
            out.dims()
        )));
    }
    let [onx, ony, onz] = expect;
    let [inx, iny, _] = input.dims();
    let [kx, ky, kz] = k.shape;
    let [sx, sy, sz] = s.0;
    let in_vals = input.values();
    let plane = onx * ony;

    let run_plane = |oz: usize, out_plane: &mut [f32]| {
        for qz in 0..kz {
            let iz = oz + qz * sz;
            for qy in 0..ky {
                for qx in 0..kx {
                    let w = k.taps[qx + kx * (qy + ky * qz)];
                    if w == 0.0 {
                        continue;
                    }
                    for oy in 0..ony {
                        let iy = oy + qy * sy;
                        let in_row = &in_vals[qx * sx + inx * (iy + iny * iz)..][..onx];
                        let out_row = &mut out_plane[oy * onx..(oy + 1) * onx];
                        for (o, i) in out_row.iter_mut().zip(in_row) {
                            *o += w * *i;
                        }
                    }
                }
            }
        }
    };

    if onz > 1 {
        out.values_mut()
            .par_chunks_mut(plane)
            .enumerate()
            .for_each(|(oz, out_plane)| run_plane(oz, out_plane));
    } else {
        run_plane(0, out.values_mut());
    }
    Ok(())
}

/// FFT-based sparse valid cross-correlation; equal to [`conv_direct`] within
/// floating-point tolerance. Transforms run in f64 and sizes are padded up to
/// the next 7-smooth length.
pub fn conv_fft(input: &Volume, k: &Kernel, s: Sparsity) -> Result<Volume> {
    let out_dims = valid_out_dims(input.dims(), k.shape, s)?;
    fft::conv_valid_f64(input, k, s, out_dims)
}

/// How a convolution is evaluated.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ConvMethod {
    Direct,
    Fft,
}

impl ConvMethod {
    pub fn apply(self, input: &Volume, k: &Kernel, s: Sparsity) -> Result<Volume> {
        match self {
            ConvMethod::Direct => conv_direct(input, k, s),
            ConvMethod::Fft => conv_fft(input, k, s),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ConvMethod::Direct => "direct",
            ConvMethod::Fft => "fft",
        }
    }
}

/// Exact adjoints of [`conv_direct`]: gradient with respect to the input and
/// the kernel taps, given the gradient at the valid output.
pub fn conv_backward(
    input: &Volume,
    k: &Kernel,
    s: Sparsity,
    grad_out: &Volume,
) -> Result<(Volume, Kernel)> {
    let expect = valid_out_dims(input.dims(), k.shape, s)?;
    if grad_out.dims() != expect {
        return Err(Error::Shape(format!(
            "grad_out dims {:?} do not match valid output dims {expect:?}",
            grad_out.dims()
        )));
    }
    let mut grad_input = Volume::zeros(input.dims());
    conv_backward_input_accumulate(&mut grad_input, k, s, grad_out)?;
    let grad_k = conv_grad_kernel(input, k.shape, s, grad_out)?;
    Ok((grad_input, grad_k))
}

/// Adds the transpose map `grad_input(p + q*s) += taps(q) * grad_out(p)` into
/// `grad_input`, which must have the forward input dims.
pub fn conv_backward_input_accumulate(
    grad_input: &mut Volume,
    k: &Kernel,
    s: Sparsity,
    grad_out: &Volume,
) -> Result<()> {
    let in_dims = grad_input.dims();
    let expect = valid_out_dims(in_dims, k.shape, s)?;
    if grad_out.dims() != expect {
        return Err(Error::Shape(format!(
            "grad_out dims {:?} do not match valid output dims {expect:?}",
            grad_out.dims()
        )));
    }
    let [onx, ony, onz] = expect;
    let [inx, iny, _] = in_dims;
    let [kx, ky, kz] = k.shape;
    let [sx, sy, sz] = s.0;
    let in_plane = inx * iny;
    let out_plane = onx * ony;
    let gout = grad_out.values();

    // taps run sequentially; within a tap the written z-planes are disjoint
    for qz in 0..kz {
        for qy in 0..ky {
            for qx in 0..kx {
                let w = k.taps[qx + kx * (qy + ky * qz)];
                if w == 0.0 {
                    continue;
                }
                let z0 = qz * sz;
                let target = &mut grad_input.values_mut()[z0 * in_plane..(z0 + onz) * in_plane];
                let write_plane = |oz: usize, gin_plane: &mut [f32]| {
                    let gout_plane = &gout[oz * out_plane..(oz + 1) * out_plane];
                    for oy in 0..ony {
                        let iy = oy + qy * sy;
                        let gin_row = &mut gin_plane[qx * sx + inx * iy..][..onx];
                        let gout_row = &gout_plane[oy * onx..(oy + 1) * onx];
                        for (gi, go) in gin_row.iter_mut().zip(gout_row) {
                            *gi += w * *go;
                        }
                    }
                };
                if onz > 1 {
                    target
                        .par_chunks_mut(in_plane)
                        .enumerate()
                        .for_each(|(oz, gin_plane)| write_plane(oz, gin_plane));
                } else {
                    write_plane(0, target);
                }
            }
        }
    }
    Ok(())
}

/// Kernel-tap gradient `grad_k(q) = sum_p grad_out(p) * input(p + q*s)`.
/// Accumulation runs in f64 per tap.
pub fn conv_grad_kernel(
    input: &Volume,
    kshape: Dims,
    s: Sparsity,
    grad_out: &Volume,
) -> Result<Kernel> {
    let expect = valid_out_dims(input.dims(), kshape, s)?;
    if grad_out.dims() != expect {
        return Err(Error::Shape(format!(
            "grad_out dims {:?} do not match valid output dims {expect:?}",
            grad_out.dims()
        )));
    }
    let [onx, ony, onz] = expect;
    let [inx, iny, _] = input.dims();
    let [kx, ky, _] = kshape;
    let [sx, sy, sz] = s.0;
    let in_vals = input.values();
    let gout = grad_out.values();

    let taps: Vec<f32> = (0..dims_len(kshape))
        .into_par_iter()
        .map(|qidx| {
            let qx = qidx % kx;
            let qy = (qidx / kx) % ky;
            let qz = qidx / (kx * ky);
            let mut acc = 0.0f64;
            for oz in 0..onz {
                let iz = oz + qz * sz;
                for oy in 0..ony {
                    let iy = oy + qy * sy;
                    let in_row = &in_vals[qx * sx + inx * (iy + iny * iz)..][..onx];
                    let gout_row = &gout[onx * (oy + ony * oz)..][..onx];
                    for (i, g) in in_row.iter().zip(gout_row) {
                        acc += (*i as f64) * (*g as f64);
                    }
                }
            }
            acc as f32
        })
        .collect();
    Kernel::new(kshape, taps)
}

/// Argmax record of a max-filtering pass: one winning absolute input index per
/// output voxel.
#[derive(Clone, Debug)]
pub struct ArgmaxMap {
    pub out_dims: Dims,
    pub input_dims: Dims,
    pub indices: Vec<u32>,
}

/// Sliding maximum over a sparse window: the dense variant of max-pooling.
/// Returns the filtered volume and the argmax record for the backward pass.
pub fn max_filter(input: &Volume, window: Dims, s: Sparsity) -> Result<(Volume, ArgmaxMap)> {
    let out_dims = valid_out_dims(input.dims(), window, s)?;
    if input.len() > u32::MAX as usize {
        return Err(Error::Shape("volume too large for argmax tracking".into()));
    }
    let [onx, ony, onz] = out_dims;
    let [inx, iny, _] = input.dims();
    let [wx, wy, wz] = window;
    let [sx, sy, sz] = s.0;
    let in_vals = input.values();
    let plane = onx * ony;

    let mut out = Volume::zeros(out_dims);
    let mut indices = vec![0u32; dims_len(out_dims)];

    let run_plane = |oz: usize, out_plane: &mut [f32], idx_plane: &mut [u32]| {
        for oy in 0..ony {
            for ox in 0..onx {
                let mut best = f32::NEG_INFINITY;
                let mut best_idx = 0u32;
                // ascending (qz,qy,qx) visits input indices in increasing
                // order, so strict improvement keeps the lowest index on ties
                for qz in 0..wz {
                    let iz = oz + qz * sz;
                    for qy in 0..wy {
                        let iy = oy + qy * sy;
                        let row = ox + inx * (iy + iny * iz);
                        for qx in 0..wx {
                            let idx = row + qx * sx;
                            let v = in_vals[idx];
                            if v > best {
                                best = v;
                                best_idx = idx as u32;
                            }
                        }
                    }
                }
                out_plane[oy * onx + ox] = best;
                idx_plane[oy * onx + ox] = best_idx;
            }
        }
    };

    if onz > 1 {
        out.values_mut()
            .par_chunks_mut(plane)
            .zip(indices.par_chunks_mut(plane))
            .enumerate()
            .for_each(|(oz, (op, ip))| run_plane(oz, op, ip));
    } else {
        run_plane(0, out.values_mut(), &mut indices);
    }

    let argmax = ArgmaxMap { out_dims, input_dims: input.dims(), indices };
    Ok((out, argmax))
}

/// Routes each output gradient to its recorded argmax index, accumulating
/// collisions by addition.
pub fn max_filter_backward(argmax: &ArgmaxMap, grad_out: &Volume, input_dims: Dims) -> Result<Volume> {
    if grad_out.dims() != argmax.out_dims {
        return Err(Error::Shape(format!(
            "grad_out dims {:?} do not match argmax output dims {:?}",
            grad_out.dims(),
            argmax.out_dims
        )));
    }
    if input_dims != argmax.input_dims {
        return Err(Error::Internal(format!(
            "input dims {input_dims:?} do not match argmax input dims {:?}",
            argmax.input_dims
        )));
    }
    let mut grad_in = Volume::zeros(input_dims);
    let n = grad_in.len();
    let gin = grad_in.values_mut();
    for (idx, g) in argmax.indices.iter().zip(grad_out.values()) {
        let i = *idx as usize;
        if i >= n {
            return Err(Error::Internal(format!(
                "argmax index {i} outside input of {n} voxels"
            )));
        }
        gin[i] += *g;
    }
    Ok(grad_in)
}

/// Outcome of timing one layer's convolution both ways.
#[derive(Clone, Debug)]
pub struct TuneOutcome {
    pub choice: ConvMethod,
    pub direct_ms: Option<f64>,
    pub fft_ms: Option<f64>,
    /// Largest |direct - fft| on the probe, scaled by the direct output's
    /// largest magnitude.
    pub rel_err: Option<f64>,
}

/// Times direct against FFT convolution on synthetic data of the given shape
/// and picks the faster by median wall time. `trials == 0` skips timing and
/// returns direct; any failure also falls back to direct.
pub fn tune_layer(input_shape: Dims, kernel_shape: Dims, s: Sparsity, trials: usize) -> TuneOutcome {
    let direct_only = TuneOutcome {
        choice: ConvMethod::Direct,
        direct_ms: None,
        fft_ms: None,
        rel_err: None,
    };
    if trials == 0 {
        return direct_only;
    }
    if valid_out_dims(input_shape, kernel_shape, s).is_err() {
        return direct_only;
    }

    let mut rng = ChaCha8Rng::seed_from_u64(0x7a6e_6e00);
    let input = Volume::new(
        input_shape,
        (0..dims_len(input_shape)).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )
    .expect("probe volume");
    let kernel = Kernel::new(
        kernel_shape,
        (0..dims_len(kernel_shape)).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )
    .expect("probe kernel");

    // correctness cross-check before timing anything
    let direct = match conv_direct(&input, &kernel, s) {
        Ok(v) => v,
        Err(_) => return direct_only,
    };
    let fft_out = match conv_fft(&input, &kernel, s) {
        Ok(v) => v,
        Err(_) => return direct_only,
    };
    let scale = direct.max_abs().max(1.0) as f64;
    let rel_err = direct
        .max_abs_diff(&fft_out)
        .map(|d| d as f64 / scale)
        .unwrap_or(f64::INFINITY);
    if rel_err > 1e-4 {
        return TuneOutcome { rel_err: Some(rel_err), ..direct_only };
    }

    let time_method = |m: ConvMethod| -> Option<f64> {
        let mut samples = Vec::with_capacity(trials);
        for _ in 0..trials {
            let t0 = Instant::now();
            m.apply(&input, &kernel, s).ok()?;
            samples.push(t0.elapsed().as_secs_f64() * 1e3);
        }
        samples.sort_by(f64::total_cmp);
        Some(samples[samples.len() / 2])
    };

    let direct_ms = time_method(ConvMethod::Direct);
    let fft_ms = time_method(ConvMethod::Fft);
    let choice = match (direct_ms, fft_ms) {
        (Some(d), Some(f)) if f < d => ConvMethod::Fft,
        _ => ConvMethod::Direct,
    };
    TuneOutcome { choice, direct_ms, fft_ms, rel_err: Some(rel_err) }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vol(dims: Dims, values: &[f32]) -> Volume {
        Volume::new(dims, values.to_vec()).unwrap()
    }

    fn naive_conv(input: &Volume, k: &Kernel, s: Sparsity) -> Volume {
        let out_dims = valid_out_dims(input.dims(), k.shape, s).unwrap();
        let mut out = Volume::zeros(out_dims);
        for oz in 0..out_dims[2] {
            for oy in 0..out_dims[1] {
                for ox in 0..out_dims[0] {
                    let mut acc = 0.0f32;
                    for qz in 0..k.shape[2] {
                        for qy in 0..k.shape[1] {
                            for qx in 0..k.shape[0] {
                                let w = k.taps[qx + k.shape[0] * (qy + k.shape[1] * qz)];
                                acc += w
                                    * input.at(ox + qx * s.0[0], oy + qy * s.0[1], oz + qz * s.0[2]);
                            }
                        }
                    }
                    out.set(ox, oy, oz, acc);
                }
            }
        }
        out
    }

    #[test]
    fn identity_kernel_any_sparsity() {
        let v = vol([4, 3, 2], &(0..24).map(|i| i as f32).collect::<Vec<_>>());
        let k = Kernel::new([1, 1, 1], vec![1.0]).unwrap();
        for s in [Sparsity::DENSE, Sparsity([2, 3, 1])] {
            assert_eq!(conv_direct(&v, &k, s).unwrap(), v);
        }
    }

    #[test]
    fn dense_1d_example() {
        let v = vol([4, 1, 1], &[1.0, 2.0, 3.0, 4.0]);
        let k = Kernel::new([2, 1, 1], vec![1.0, 1.0]).unwrap();
        let out = conv_direct(&v, &k, Sparsity::DENSE).unwrap();
        assert_eq!(out.values(), &[3.0, 5.0, 7.0]);
    }

    #[test]
    fn sparse_1d_example() {
        let v = vol([4, 1, 1], &[1.0, 2.0, 3.0, 4.0]);
        let k = Kernel::new([2, 1, 1], vec![1.0, 1.0]).unwrap();
        let out = conv_direct(&v, &k, Sparsity([2, 1, 1])).unwrap();
        assert_eq!(out.values(), &[4.0, 6.0]);
    }

    #[test]
    fn direct_matches_naive_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let dims = [
                rng.random_range(3..9usize),
                rng.random_range(3..9usize),
                rng.random_range(1..5usize),
            ];
            let kshape = [
                rng.random_range(1..4usize).min(dims[0]),
                rng.random_range(1..4usize).min(dims[1]),
                rng.random_range(1..3usize).min(dims[2]),
            ];
            let max_s = |n: usize, k: usize| if k > 1 { ((n - 1) / (k - 1)).min(3) } else { 3 };
            let s = Sparsity([
                rng.random_range(1..=max_s(dims[0], kshape[0])),
                rng.random_range(1..=max_s(dims[1], kshape[1])),
                rng.random_range(1..=max_s(dims[2], kshape[2])),
            ]);
            let v = Volume::new(dims, (0..dims_len(dims)).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
            let k = Kernel::new(kshape, (0..dims_len(kshape)).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
            let got = conv_direct(&v, &k, s).unwrap();
            let want = naive_conv(&v, &k, s);
            assert!(got.max_abs_diff(&want).unwrap() <= 1e-5);
        }
    }

    #[test]
    fn undersized_input_rejected() {
        let v = vol([3, 1, 1], &[1.0, 2.0, 3.0]);
        let k = Kernel::new([2, 1, 1], vec![1.0, 1.0]).unwrap();
        assert!(matches!(conv_direct(&v, &k, Sparsity([3, 1, 1])), Err(Error::Shape(_))));
    }

    #[test]
    fn fft_identity_tap() {
        let v = vol([5, 4, 3], &(0..60).map(|i| (i as f32).sin()).collect::<Vec<_>>());
        let k = Kernel::new([1, 1, 1], vec![1.0]).unwrap();
        let out = conv_fft(&v, &k, Sparsity::DENSE).unwrap();
        assert!(out.max_abs_diff(&v).unwrap() <= 1e-5);
    }

    #[test]
    fn fft_matches_direct_random() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..25 {
            let dims = [
                rng.random_range(4..17usize),
                rng.random_range(4..17usize),
                rng.random_range(1..9usize),
            ];
            let kshape = [
                rng.random_range(1..4usize),
                rng.random_range(1..4usize),
                rng.random_range(1..3usize).min(dims[2]),
            ];
            let max_s = |n: usize, k: usize| if k > 1 { ((n - 1) / (k - 1)).min(3) } else { 2 };
            let s = Sparsity([
                rng.random_range(1..=max_s(dims[0], kshape[0])),
                rng.random_range(1..=max_s(dims[1], kshape[1])),
                rng.random_range(1..=max_s(dims[2], kshape[2])),
            ]);
            let v = Volume::new(dims, (0..dims_len(dims)).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
            let k = Kernel::new(kshape, (0..dims_len(kshape)).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
            let d = conv_direct(&v, &k, s).unwrap();
            let f = conv_fft(&v, &k, s).unwrap();
            let tol = 1e-4 * dims_len(kshape) as f32;
            assert!(
                d.max_abs_diff(&f).unwrap() <= tol,
                "fft/direct disagree beyond {tol} for dims {dims:?} k {kshape:?} s {:?}",
                s.0
            );
        }
    }

    #[test]
    fn fft_anisotropic_case() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let dims = [12, 11, 5];
        let v = Volume::new(dims, (0..dims_len(dims)).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let k = Kernel::new([3, 3, 2], (0..18).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let s = Sparsity([2, 2, 1]);
        let d = conv_direct(&v, &k, s).unwrap();
        let f = conv_fft(&v, &k, s).unwrap();
        assert!(d.max_abs_diff(&f).unwrap() <= 1e-4 * 18.0);
    }

    #[test]
    fn backward_zero_grad_is_zero() {
        let v = vol([4, 1, 1], &[1.0, 2.0, 3.0, 4.0]);
        let k = Kernel::new([2, 1, 1], vec![0.5, -0.25]).unwrap();
        let gout = Volume::zeros([3, 1, 1]);
        let (gin, gk) = conv_backward(&v, &k, Sparsity::DENSE, &gout).unwrap();
        assert!(gin.values().iter().all(|&g| g == 0.0));
        assert!(gk.taps.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn backward_1d_hand_sum() {
        // input [1,2,3], k=[w], grad_out [1,1,1]: grad_k = 1+2+3
        let v = vol([3, 1, 1], &[1.0, 2.0, 3.0]);
        let k = Kernel::new([1, 1, 1], vec![0.7]).unwrap();
        let gout = vol([3, 1, 1], &[1.0, 1.0, 1.0]);
        let (gin, gk) = conv_backward(&v, &k, Sparsity::DENSE, &gout).unwrap();
        assert_eq!(gk.taps, vec![6.0]);
        assert_eq!(gin.values(), &[0.7, 0.7, 0.7]);
    }

    #[test]
    fn adjoint_identity_random() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..10 {
            let dims = [rng.random_range(4..8usize), rng.random_range(4..8usize), rng.random_range(2..5usize)];
            let kshape = [2, rng.random_range(1..3usize), rng.random_range(1..3usize)];
            let s = Sparsity([rng.random_range(1..3usize), 1, 1]);
            if valid_out_dims(dims, kshape, s).is_err() {
                continue;
            }
            let x = Volume::new(dims, (0..dims_len(dims)).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
            let k = Kernel::new(kshape, (0..dims_len(kshape)).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
            let y = conv_direct(&x, &k, s).unwrap();
            let u = Volume::new(y.dims(), (0..y.len()).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
            let (gin, gk) = conv_backward(&x, &k, s, &u).unwrap();

            let dot = |a: &[f32], b: &[f32]| -> f64 {
                a.iter().zip(b).map(|(p, q)| *p as f64 * *q as f64).sum()
            };
            let lhs = dot(y.values(), u.values());
            let via_input = dot(x.values(), gin.values());
            let via_kernel = dot(&k.taps, &gk.taps);
            assert!((lhs - via_input).abs() <= 1e-4 * lhs.abs().max(1.0));
            assert!((lhs - via_kernel).abs() <= 1e-4 * lhs.abs().max(1.0));
        }
    }

    #[test]
    fn max_filter_identity_window() {
        let v = vol([3, 2, 1], &[1.0, -2.0, 3.0, 0.0, 5.0, -1.0]);
        let (out, _) = max_filter(&v, [1, 1, 1], Sparsity::DENSE).unwrap();
        assert_eq!(out, v);
    }

    #[test]
    fn max_filter_1d_examples() {
        let v = vol([4, 1, 1], &[1.0, 3.0, 2.0, 5.0]);
        let (dense, am) = max_filter(&v, [2, 1, 1], Sparsity::DENSE).unwrap();
        assert_eq!(dense.values(), &[3.0, 3.0, 5.0]);
        assert_eq!(am.indices, vec![1, 1, 3]);
        let (sparse, _) = max_filter(&v, [2, 1, 1], Sparsity([2, 1, 1])).unwrap();
        assert_eq!(sparse.values(), &[2.0, 5.0]);
    }

    #[test]
    fn max_filter_tie_takes_lowest_index() {
        let v = vol([3, 1, 1], &[2.0, 2.0, 2.0]);
        let (_, am) = max_filter(&v, [2, 1, 1], Sparsity::DENSE).unwrap();
        assert_eq!(am.indices, vec![0, 1]);
    }

    #[test]
    fn max_filter_backward_hand_trace() {
        let v = vol([4, 1, 1], &[1.0, 3.0, 2.0, 5.0]);
        let (_, am) = max_filter(&v, [2, 1, 1], Sparsity::DENSE).unwrap();
        let gout = vol([3, 1, 1], &[1.0, 2.0, 4.0]);
        let gin = max_filter_backward(&am, &gout, v.dims()).unwrap();
        assert_eq!(gin.values(), &[0.0, 3.0, 0.0, 4.0]);
    }

    #[test]
    fn max_filter_backward_zero() {
        let v = vol([4, 1, 1], &[1.0, 3.0, 2.0, 5.0]);
        let (_, am) = max_filter(&v, [2, 1, 1], Sparsity::DENSE).unwrap();
        let gin = max_filter_backward(&am, &Volume::zeros([3, 1, 1]), v.dims()).unwrap();
        assert!(gin.values().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn max_filter_backward_rejects_bad_dims() {
        let v = vol([4, 1, 1], &[1.0, 3.0, 2.0, 5.0]);
        let (_, am) = max_filter(&v, [2, 1, 1], Sparsity::DENSE).unwrap();
        let gout = vol([3, 1, 1], &[1.0, 1.0, 1.0]);
        assert!(max_filter_backward(&am, &gout, [5, 1, 1]).is_err());
    }

    #[test]
    fn max_filter_dense_equivalence_with_pooling() {
        // sparse max-filter output gathers ordinary max-pooling applied at
        // every offset
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let dims = [9, 8, 3];
        let v = Volume::new(dims, (0..dims_len(dims)).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let window = [2, 2, 1];
        let s = Sparsity([2, 2, 1]);
        let (filtered, _) = max_filter(&v, window, s).unwrap();
        let out = filtered.dims();
        for oz in 0..out[2] {
            for oy in 0..out[1] {
                for ox in 0..out[0] {
                    // pooling with stride == window on the sub-grid at offset
                    // (ox % s, oy % s), first pool window starting at (ox, oy)
                    let mut best = f32::NEG_INFINITY;
                    for qy in 0..window[1] {
                        for qx in 0..window[0] {
                            best = best.max(v.at(ox + qx * s.0[0], oy + qy * s.0[1], oz));
                        }
                    }
                    assert_eq!(filtered.at(ox, oy, oz), best);
                }
            }
        }
    }

    #[test]
    fn tune_zero_trials_is_direct() {
        let out = tune_layer([16, 16, 4], [3, 3, 1], Sparsity::DENSE, 0);
        assert_eq!(out.choice, ConvMethod::Direct);
        assert!(out.direct_ms.is_none() && out.fft_ms.is_none());
    }

    #[test]
    fn tune_reports_agreeing_methods() {
        let out = tune_layer([20, 18, 4], [3, 3, 2], Sparsity([2, 2, 1]), 2);
        assert!(out.direct_ms.is_some());
        assert!(out.fft_ms.is_some());
        assert!(out.rel_err.unwrap() <= 1e-4);
    }

    #[test]
    fn tune_bad_shape_falls_back_to_direct() {
        let out = tune_layer([2, 2, 1], [3, 3, 1], Sparsity::DENSE, 3);
        assert_eq!(out.choice, ConvMethod::Direct);
        assert!(out.direct_ms.is_none());
    }
}
