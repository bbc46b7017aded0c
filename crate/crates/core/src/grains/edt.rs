//! Exact squared Euclidean distance transform (separable lower-envelope method).

use crate::volume::Dims;

const FAR: f64 = 1e20;

/// Squared distance from every voxel to the nearest voxel where `inside` is
/// false. Voxels beyond the grid do not count as background.
pub fn squared_edt(inside: &[bool], dims: Dims) -> Vec<f64> {
    assert_eq!(inside.len(), dims.len());
    let mut d: Vec<f64> = inside.iter().map(|&m| if m { FAR } else { 0.0 }).collect();
    let n = dims.x.max(dims.y).max(dims.z);
    let mut f = vec![0.0; n];
    let mut out = vec![0.0; n];
    let mut v = vec![0usize; n];
    let mut z = vec![0.0; n + 1];
    // z axis (stride 1)
    for x in 0..dims.x {
        for y in 0..dims.y {
            let base = dims.index(x, y, 0);
            pass(&mut d, base, 1, dims.z, &mut f, &mut out, &mut v, &mut z);
        }
    }
    for x in 0..dims.x {
        for zz in 0..dims.z {
            let base = dims.index(x, 0, zz);
            pass(&mut d, base, dims.z, dims.y, &mut f, &mut out, &mut v, &mut z);
        }
    }
    for y in 0..dims.y {
        for zz in 0..dims.z {
            let base = dims.index(0, y, zz);
            pass(&mut d, base, dims.y * dims.z, dims.x, &mut f, &mut out, &mut v, &mut z);
        }
    }
    d
}

#[allow(clippy::too_many_arguments)]
fn pass(
    d: &mut [f64],
    base: usize,
    stride: usize,
    len: usize,
    f: &mut [f64],
    out: &mut [f64],
    v: &mut [usize],
    z: &mut [f64],
) {
    for i in 0..len {
        f[i] = d[base + i * stride];
    }
    lower_envelope(&f[..len], &mut out[..len], v, z);
    for i in 0..len {
        d[base + i * stride] = out[i];
    }
}

/// 1D squared distance transform of sampled function `f`.
fn lower_envelope(f: &[f64], out: &mut [f64], v: &mut [usize], z: &mut [f64]) {
    let n = f.len();
    if n == 0 {
        return;
    }
    let mut k = 0usize;
    v[0] = 0;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in 1..n {
        let fq = f[q] + (q * q) as f64;
        let mut s = intersect(f, v[k], q, fq);
        // z[0] is -inf, so this stops at k = 0 at the latest.
        while s <= z[k] {
            k -= 1;
            s = intersect(f, v[k], q, fq);
        }
        k += 1;
        v[k] = q;
        z[k] = s;
        z[k + 1] = f64::INFINITY;
    }
    let mut k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let p = v[k];
        let dq = q as f64 - p as f64;
        *o = dq * dq + f[p];
    }
}

#[inline]
fn intersect(f: &[f64], p: usize, q: usize, fq: f64) -> f64 {
    (fq - (f[p] + (p * p) as f64)) / (2.0 * (q as f64 - p as f64))
}
