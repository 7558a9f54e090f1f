//! FFT backend for sparse valid convolution.
//!
//! Cross-correlation is computed as circular convolution with the kernel
//! flipped and zero-upsampled to its sparse footprint. Each axis is padded to
//! the next 7-smooth length; with padded length >= input length the wrapped
//! tail of the circular product never reaches the valid region, so only the
//! kernel footprint (not the full linear-convolution length) constrains
//! padding. All transforms and products run in f64.

use rayon::prelude::*;
use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftDirection, FftPlanner};
use std::sync::Arc;

use crate::conv::{Kernel, Sparsity};
use crate::tensor::{Dims, Volume};
use crate::Result;

/// Smallest integer >= `n` whose prime factors are all <= 7.
fn next_smooth(n: usize) -> usize {
    fn is_smooth(mut m: usize) -> bool {
        for p in [2usize, 3, 5, 7] {
            while m % p == 0 {
                m /= p;
            }
        }
        m == 1
    }
    let mut m = n.max(1);
    while !is_smooth(m) {
        m += 1;
    }
    m
}

/// In-place 3D FFT over an x-fastest buffer of dims `n`.
fn fft3(buf: &mut [Complex64], n: Dims, planner: &mut FftPlanner<f64>, dir: FftDirection) {
    let [nx, ny, nz] = n;

    // x axis: contiguous lines
    if nx > 1 {
        let fft = planner.plan_fft(nx, dir);
        let scratch_len = fft.get_inplace_scratch_len();
        buf.par_chunks_mut(nx).for_each_init(
            || vec![Complex64::default(); scratch_len],
            |scratch, line| fft.process_with_scratch(line, scratch),
        );
    }

    // y axis: stride-nx lines, independent per z-plane
    if ny > 1 {
        let fft = planner.plan_fft(ny, dir);
        let scratch_len = fft.get_inplace_scratch_len();
        buf.par_chunks_mut(nx * ny).for_each_init(
            || (vec![Complex64::default(); ny], vec![Complex64::default(); scratch_len]),
            |(line, scratch), plane| {
                for x in 0..nx {
                    for y in 0..ny {
                        line[y] = plane[x + nx * y];
                    }
                    fft.process_with_scratch(line, scratch);
                    for y in 0..ny {
                        plane[x + nx * y] = line[y];
                    }
                }
            },
        );
    }

    // z axis: stride-(nx*ny) lines; z extents are short, gather sequentially
    if nz > 1 {
        let fft: Arc<dyn Fft<f64>> = planner.plan_fft(nz, dir);
        let mut line = vec![Complex64::default(); nz];
        let mut scratch = vec![Complex64::default(); fft.get_inplace_scratch_len()];
        let plane = nx * ny;
        for xy in 0..plane {
            for z in 0..nz {
                line[z] = buf[xy + plane * z];
            }
            fft.process_with_scratch(&mut line, &mut scratch);
            for z in 0..nz {
                buf[xy + plane * z] = line[z];
            }
        }
    }
}

pub(crate) fn conv_valid_f64(
    input: &Volume,
    k: &Kernel,
    s: Sparsity,
    out_dims: Dims,
) -> Result<Volume> {
    let in_dims = input.dims();
    let keff = [
        s.footprint(0, k.shape[0]),
        s.footprint(1, k.shape[1]),
        s.footprint(2, k.shape[2]),
    ];
    let n = [
        next_smooth(in_dims[0]),
        next_smooth(in_dims[1]),
        next_smooth(in_dims[2]),
    ];
    let total = n[0] * n[1] * n[2];

    let mut xbuf = vec![Complex64::default(); total];
    for z in 0..in_dims[2] {
        for y in 0..in_dims[1] {
            let src = &input.values()[in_dims[0] * (y + in_dims[1] * z)..][..in_dims[0]];
            let dst = &mut xbuf[n[0] * (y + n[1] * z)..][..in_dims[0]];
            for (d, v) in dst.iter_mut().zip(src) {
                d.re = *v as f64;
            }
        }
    }

    // reversed, zero-upsampled kernel
    let mut hbuf = vec![Complex64::default(); total];
    let [kx, ky, kz] = k.shape;
    for qz in 0..kz {
        for qy in 0..ky {
            for qx in 0..kx {
                let mx = keff[0] - 1 - qx * s.0[0];
                let my = keff[1] - 1 - qy * s.0[1];
                let mz = keff[2] - 1 - qz * s.0[2];
                hbuf[mx + n[0] * (my + n[1] * mz)].re =
                    k.taps[qx + kx * (qy + ky * qz)] as f64;
            }
        }
    }

    let mut planner = FftPlanner::new();
    fft3(&mut xbuf, n, &mut planner, FftDirection::Forward);
    fft3(&mut hbuf, n, &mut planner, FftDirection::Forward);
    xbuf.par_iter_mut().zip(hbuf.par_iter()).for_each(|(a, b)| *a *= *b);
    fft3(&mut xbuf, n, &mut planner, FftDirection::Inverse);

    let scale = 1.0 / total as f64;
    let mut out = Volume::zeros(out_dims);
    let [onx, ony, onz] = out_dims;
    for z in 0..onz {
        for y in 0..ony {
            let src = &xbuf
                [(keff[0] - 1) + n[0] * ((y + keff[1] - 1) + n[1] * (z + keff[2] - 1))..][..onx];
            let dst = &mut out.values_mut()[onx * (y + ony * z)..][..onx];
            for (d, v) in dst.iter_mut().zip(src) {
                *d = (v.re * scale) as f32;
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn smooth_sizes() {
        assert_eq!(next_smooth(1), 1);
        assert_eq!(next_smooth(7), 7);
        assert_eq!(next_smooth(11), 12);
        assert_eq!(next_smooth(13), 14);
        assert_eq!(next_smooth(121), 125);
        assert_eq!(next_smooth(0), 1);
    }

    #[test]
    fn roundtrip_fft3() {
        let n = [4, 3, 2];
        let orig: Vec<Complex64> = (0..24).map(|i| Complex64::new(i as f64, -(i as f64))).collect();
        let mut buf = orig.clone();
        let mut planner = FftPlanner::new();
        fft3(&mut buf, n, &mut planner, FftDirection::Forward);
        fft3(&mut buf, n, &mut planner, FftDirection::Inverse);
        for (a, b) in buf.iter().zip(&orig) {
            assert!((a.re / 24.0 - b.re).abs() < 1e-9);
            assert!((a.im / 24.0 - b.im).abs() < 1e-9);
        }
    }
}
