//! File I/O (raw volumes with plain-text sidecars, self-describing
//! checkpoints) and the synthetic anisotropic dataset generator.
//!
//! On-disk conventions: payload `<name>.raw` is little-endian, x-fastest;
//! sidecar `<name>.meta` is text, one `key = value` per line with keys
//! `dims`, `dtype`, `voxel_size_nm`, `role`. Checkpoints start with the magic
//! `ZNNCKPT1`, then a version word, the length-prefixed network spec text,
//! name-tagged per-node f32 arrays (weights, biases and their momenta) in
//! spec order, the update counter, and the sampler RNG state.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::eval::Segmentation;
use crate::net::{NetworkSpec, NodeKind, ParamState};
use crate::tensor::{dims_len, Dims, Volume};
use crate::train::derive_boundary_labels;
use crate::{Error, Result};

/// Payload element type.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Dtype {
    U8,
    F32,
    U32,
}

impl Dtype {
    pub fn width(self) -> usize {
        match self {
            Dtype::U8 => 1,
            Dtype::F32 | Dtype::U32 => 4,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Dtype::U8 => "u8",
            Dtype::F32 => "f32",
            Dtype::U32 => "u32",
        }
    }

    fn parse(s: &str) -> Result<Self> {
        match s {
            "u8" => Ok(Dtype::U8),
            "f32" => Ok(Dtype::F32),
            "u32" => Ok(Dtype::U32),
            other => Err(Error::Format(format!("unknown dtype `{other}`"))),
        }
    }
}

/// What a stack holds, recorded in the sidecar for humans and tooling.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Role {
    Image,
    Labels,
    BoundaryMap,
}

impl Role {
    pub fn name(self) -> &'static str {
        match self {
            Role::Image => "image",
            Role::Labels => "labels",
            Role::BoundaryMap => "boundary_map",
        }
    }

    fn parse(s: &str) -> Result<Self> {
        match s {
            "image" => Ok(Role::Image),
            "labels" => Ok(Role::Labels),
            "boundary_map" => Ok(Role::BoundaryMap),
            other => Err(Error::Format(format!("unknown role `{other}`"))),
        }
    }
}

/// Sidecar metadata of one stack.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StackMeta {
    pub dims: Dims,
    pub dtype: Dtype,
    pub voxel_size_nm: [f32; 3],
    pub role: Role,
}

impl StackMeta {
    pub fn new(dims: Dims, dtype: Dtype, voxel_size_nm: [f32; 3], role: Role) -> Self {
        StackMeta { dims, dtype, voxel_size_nm, role }
    }

    fn to_text(self) -> String {
        format!(
            "dims = {} {} {}\ndtype = {}\nvoxel_size_nm = {} {} {}\nrole = {}\n",
            self.dims[0],
            self.dims[1],
            self.dims[2],
            self.dtype.name(),
            self.voxel_size_nm[0],
            self.voxel_size_nm[1],
            self.voxel_size_nm[2],
            self.role.name()
        )
    }
}

fn raw_path(path: &Path) -> PathBuf {
    path.with_extension("raw")
}

fn meta_path(path: &Path) -> PathBuf {
    path.with_extension("meta")
}

/// Reads and parses a sidecar. `path` may point at the payload, the sidecar,
/// or the common stem.
pub fn read_meta(path: &Path) -> Result<StackMeta> {
    let mp = meta_path(path);
    let text = fs::read_to_string(&mp).map_err(|e| {
        Error::io(&mp, e)
    })?;
    let mut dims: Option<Dims> = None;
    let mut dtype: Option<Dtype> = None;
    let mut voxel = [1.0f32; 3];
    let mut role = Role::Image;
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(Error::Format(format!(
                "{}:{}: expected `key = value`, got `{line}`",
                mp.display(),
                lineno + 1
            )));
        };
        let (key, value) = (key.trim(), value.trim());
        match key {
            "dims" => {
                let parts: Vec<usize> = value
                    .split_whitespace()
                    .map(|p| p.parse::<usize>())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|_| Error::Format(format!("bad dims `{value}`")))?;
                if parts.len() != 3 || parts.iter().any(|&d| d == 0) {
                    return Err(Error::Format(format!("bad dims `{value}`")));
                }
                dims = Some([parts[0], parts[1], parts[2]]);
            }
            "dtype" => dtype = Some(Dtype::parse(value)?),
            "voxel_size_nm" => {
                let parts: Vec<f32> = value
                    .split_whitespace()
                    .map(|p| p.parse::<f32>())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|_| Error::Format(format!("bad voxel_size_nm `{value}`")))?;
                if parts.len() != 3 {
                    return Err(Error::Format(format!("bad voxel_size_nm `{value}`")));
                }
                voxel = [parts[0], parts[1], parts[2]];
            }
            "role" => role = Role::parse(value)?,
            _ => {} // tolerate unknown keys
        }
    }
    let dims = dims.ok_or_else(|| Error::Format(format!("{}: missing `dims`", mp.display())))?;
    let dtype =
        dtype.ok_or_else(|| Error::Format(format!("{}: missing `dtype`", mp.display())))?;
    Ok(StackMeta { dims, dtype, voxel_size_nm: voxel, role })
}

fn read_payload(path: &Path, meta: &StackMeta) -> Result<Vec<u8>> {
    let rp = raw_path(path);
    let bytes = fs::read(&rp).map_err(|e| Error::io(&rp, e))?;
    let expect = dims_len(meta.dims) * meta.dtype.width();
    if bytes.len() != expect {
        return Err(Error::Format(format!(
            "{}: payload size mismatch: expected {expect} bytes for dims {:?} dtype {}, got {}",
            rp.display(),
            meta.dims,
            meta.dtype.name(),
            bytes.len()
        )));
    }
    Ok(bytes)
}

/// Loads an f32 or u8 stack; u8 samples are normalized to `[0, 1]` (255 maps
/// to exactly 1.0). The sidecar's voxel size is carried on the volume.
pub fn read_volume(path: &Path) -> Result<Volume> {
    let meta = read_meta(path)?;
    let bytes = read_payload(path, &meta)?;
    let values: Vec<f32> = match meta.dtype {
        Dtype::U8 => bytes.iter().map(|&b| b as f32 / 255.0).collect(),
        Dtype::F32 => bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect(),
        Dtype::U32 => {
            return Err(Error::Format(format!(
                "{}: dtype u32 holds segmentation labels; use read_segmentation",
                raw_path(path).display()
            )))
        }
    };
    let mut v = Volume::new(meta.dims, values)?;
    v.voxel_size_nm = Some(meta.voxel_size_nm);
    Ok(v)
}

/// Writes payload + sidecar. For dtype u8 the values are clamped to `[0, 1]`
/// and quantized to 255 levels (round-tripping exactly for u8-loaded data).
pub fn write_volume(path: &Path, v: &Volume, meta: &StackMeta) -> Result<()> {
    if meta.dims != v.dims() {
        return Err(Error::Shape(format!(
            "meta dims {:?} do not match volume dims {:?}",
            meta.dims,
            v.dims()
        )));
    }
    let bytes: Vec<u8> = match meta.dtype {
        Dtype::U8 => v
            .values()
            .iter()
            .map(|&x| (x.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect(),
        Dtype::F32 => v.values().iter().flat_map(|x| x.to_le_bytes()).collect(),
        Dtype::U32 => {
            return Err(Error::Format(
                "dtype u32 holds segmentation labels; use write_segmentation".into(),
            ))
        }
    };
    let rp = raw_path(path);
    fs::write(&rp, bytes).map_err(|e| Error::io(&rp, e))?;
    let mp = meta_path(path);
    fs::write(&mp, meta.to_text()).map_err(|e| Error::io(&mp, e))?;
    Ok(())
}

/// Loads a u32 label stack.
pub fn read_segmentation(path: &Path) -> Result<Segmentation> {
    let meta = read_meta(path)?;
    if meta.dtype != Dtype::U32 {
        return Err(Error::Format(format!(
            "{}: expected dtype u32 for a segmentation, got {}",
            raw_path(path).display(),
            meta.dtype.name()
        )));
    }
    let bytes = read_payload(path, &meta)?;
    let labels: Vec<u32> = bytes
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Segmentation::new(meta.dims, labels)
}

pub fn write_segmentation(path: &Path, seg: &Segmentation, voxel_size_nm: [f32; 3]) -> Result<()> {
    let meta = StackMeta::new(seg.dims(), Dtype::U32, voxel_size_nm, Role::Labels);
    let bytes: Vec<u8> = seg.labels().iter().flat_map(|l| l.to_le_bytes()).collect();
    let rp = raw_path(path);
    fs::write(&rp, bytes).map_err(|e| Error::io(&rp, e))?;
    let mp = meta_path(path);
    fs::write(&mp, meta.to_text()).map_err(|e| Error::io(&mp, e))?;
    Ok(())
}

const CKPT_MAGIC: &[u8; 8] = b"ZNNCKPT1";
const CKPT_VERSION: u32 = 1;

/// A loaded checkpoint: the embedded (re-validated) spec, parameters with
/// momenta, the update counter, and the sampler RNG state.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub spec: NetworkSpec,
    pub params: ParamState,
    pub update: u64,
    pub rng_seed: [u8; 32],
    pub rng_word_pos: u128,
}

impl Checkpoint {
    /// Rebuilds the sampler RNG exactly where it stopped.
    pub fn restore_rng(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.rng_seed);
        rng.set_word_pos(self.rng_word_pos);
        rng
    }
}

fn put_arr(out: &mut Vec<u8>, data: &[f32]) {
    out.extend_from_slice(&(data.len() as u64).to_le_bytes());
    for x in data {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Format(format!(
                "{}: truncated checkpoint (wanted {n} bytes at offset {}, file has {})",
                self.path.display(),
                self.pos,
                self.buf.len()
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u64(&mut self) -> Result<u64> {
        let b = self.take(8)?;
        Ok(u64::from_le_bytes(b.try_into().unwrap()))
    }

    fn arr(&mut self, expect: usize, what: &str) -> Result<Vec<f32>> {
        let n = self.u64()? as usize;
        if n != expect {
            return Err(Error::Format(format!(
                "{}: {what} has {n} values, the embedded spec implies {expect}",
                self.path.display()
            )));
        }
        let b = self.take(4 * n)?;
        Ok(b.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect())
    }
}

/// Serializes spec text, parameters (with momenta, so training resumes
/// bit-for-bit), update counter, and RNG state.
pub fn save_checkpoint(
    path: &Path,
    spec: &NetworkSpec,
    params: &ParamState,
    update: u64,
    rng_seed: [u8; 32],
    rng_word_pos: u128,
) -> Result<()> {
    let mut out = Vec::new();
    out.extend_from_slice(CKPT_MAGIC);
    out.extend_from_slice(&CKPT_VERSION.to_le_bytes());
    let spec_bytes = spec.source().as_bytes();
    out.extend_from_slice(&(spec_bytes.len() as u64).to_le_bytes());
    out.extend_from_slice(spec_bytes);
    for (node, p) in spec.nodes().iter().zip(&params.nodes) {
        let Some(p) = p else { continue };
        let name = node.name.as_bytes();
        out.extend_from_slice(&(name.len() as u64).to_le_bytes());
        out.extend_from_slice(name);
        put_arr(&mut out, &p.w);
        put_arr(&mut out, &p.b);
        put_arr(&mut out, &p.vw);
        put_arr(&mut out, &p.vb);
    }
    out.extend_from_slice(&update.to_le_bytes());
    out.extend_from_slice(&rng_seed);
    out.extend_from_slice(&rng_word_pos.to_le_bytes());
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&out).map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = Reader { buf: &buf, pos: 0, path };
    let magic = r.take(8)?;
    if magic != CKPT_MAGIC {
        return Err(Error::Format(format!(
            "{}: not a checkpoint (bad magic {:?})",
            path.display(),
            &magic[..magic.len().min(8)]
        )));
    }
    let version = r.u32()?;
    if version != CKPT_VERSION {
        return Err(Error::Format(format!(
            "{}: unsupported checkpoint version {version} (expected {CKPT_VERSION})",
            path.display()
        )));
    }
    let spec_len = r.u64()? as usize;
    let spec_text = std::str::from_utf8(r.take(spec_len)?)
        .map_err(|_| Error::Format(format!("{}: spec text is not UTF-8", path.display())))?
        .to_string();
    let spec = NetworkSpec::parse(&spec_text)?;
    let mut params = ParamState::zeros(&spec);
    for (i, node) in spec.nodes().iter().enumerate() {
        if !matches!(node.kind, NodeKind::Conv { .. }) {
            continue;
        }
        let name_len = r.u64()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| Error::Format(format!("{}: node name is not UTF-8", path.display())))?;
        if name != node.name {
            return Err(Error::Format(format!(
                "{}: parameter block `{name}` does not match spec node `{}`",
                path.display(),
                node.name
            )));
        }
        let p = params.nodes[i].as_mut().expect("conv node");
        let (wn, bn) = (p.w.len(), p.b.len());
        p.w = r.arr(wn, &format!("`{name}` weights"))?;
        p.b = r.arr(bn, &format!("`{name}` biases"))?;
        p.vw = r.arr(wn, &format!("`{name}` weight momenta"))?;
        p.vb = r.arr(bn, &format!("`{name}` bias momenta"))?;
    }
    let update = r.u64()?;
    let mut rng_seed = [0u8; 32];
    rng_seed.copy_from_slice(r.take(32)?);
    let pos_bytes = r.take(16)?;
    let rng_word_pos = u128::from_le_bytes(pos_bytes.try_into().unwrap());
    if r.pos != buf.len() {
        return Err(Error::Format(format!(
            "{}: {} trailing bytes after checkpoint payload",
            path.display(),
            buf.len() - r.pos
        )));
    }
    Ok(Checkpoint { spec, params, update, rng_seed, rng_word_pos })
}

/// In-plane / z voxel pitch ratio the generator mimics (7 nm in-plane, 40 nm
/// section spacing), giving cells a columnar elongation along z.
const Z_ANISOTROPY: f64 = 40.0 / 7.0;
const MEMBRANE_VALUE: f32 = 0.05;

/// Generates an aligned (image, truth) pair: an anisotropic 3D Voronoi
/// partition of `n_cells` seeds, imaged as dark membranes on per-cell gray
/// levels with in-plane smoothing, per-slice intensity jitter and sub-pixel
/// shifts of magnitude `z_blur`, and additive Gaussian noise. Deterministic
/// in `seed`.
pub fn synth_generate(
    seed: u64,
    dims: Dims,
    n_cells: usize,
    z_blur: f64,
    noise_sd: f64,
) -> Result<(Volume, Segmentation)> {
    if n_cells < 2 {
        return Err(Error::Config(format!("n_cells must be >= 2, got {n_cells}")));
    }
    if dims[0] < 32 || dims[1] < 32 || dims[2] == 0 {
        return Err(Error::Config(format!(
            "dims must be at least 32x32 in-plane and nonzero in z, got {dims:?}"
        )));
    }
    if !(0.0..=8.0).contains(&z_blur) || !(0.0..=1.0).contains(&noise_sd) {
        return Err(Error::Config(format!(
            "degenerate parameters: z_blur {z_blur} (0..=8), noise_sd {noise_sd} (0..=1)"
        )));
    }
    let [nx, ny, nz] = dims;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let seeds: Vec<[f64; 3]> = (0..n_cells)
        .map(|_| {
            [
                rng.random_range(0.0..nx as f64),
                rng.random_range(0.0..ny as f64),
                rng.random_range(0.0..nz as f64),
            ]
        })
        .collect();

    // nearest seed under the anisotropic metric (z distances shrunk, so cells
    // stretch across sections)
    let mut truth = Segmentation::zeros(dims);
    truth
        .labels_mut()
        .par_chunks_mut(nx * ny)
        .enumerate()
        .for_each(|(z, plane)| {
            for y in 0..ny {
                for x in 0..nx {
                    let px = x as f64 + 0.5;
                    let py = y as f64 + 0.5;
                    let pz = z as f64 + 0.5;
                    let mut best = f64::INFINITY;
                    let mut best_i = 0usize;
                    for (i, s) in seeds.iter().enumerate() {
                        let dx = px - s[0];
                        let dy = py - s[1];
                        let dz = (pz - s[2]) / Z_ANISOTROPY;
                        let d = dx * dx + dy * dy + dz * dz;
                        if d < best {
                            best = d;
                            best_i = i;
                        }
                    }
                    plane[y * nx + x] = best_i as u32 + 1;
                }
            }
        });

    let grays: Vec<f32> = (0..n_cells).map(|_| rng.random_range(0.6..0.9)).collect();
    let membranes = derive_boundary_labels(&truth);

    let mut img = Volume::zeros(dims);
    for (i, v) in img.values_mut().iter_mut().enumerate() {
        *v = if membranes.values()[i] >= 0.5 {
            MEMBRANE_VALUE
        } else {
            grays[truth.labels()[i] as usize - 1]
        };
    }

    // separable in-plane smoothing with the [0.2, 0.6, 0.2] kernel
    let smooth_axis = |img: &mut Volume, axis: usize| {
        let [nx, ny, nz] = img.dims();
        let vals = img.values().to_vec();
        let at = |x: usize, y: usize, z: usize| vals[x + nx * (y + ny * z)];
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    let (a, b) = match axis {
                        0 => (at(x.saturating_sub(1), y, z), at((x + 1).min(nx - 1), y, z)),
                        _ => (at(x, y.saturating_sub(1), z), at(x, (y + 1).min(ny - 1), z)),
                    };
                    img.values_mut()[x + nx * (y + ny * z)] = 0.2 * a + 0.6 * at(x, y, z) + 0.2 * b;
                }
            }
        }
    };
    smooth_axis(&mut img, 0);
    smooth_axis(&mut img, 1);

    // z-degradation: per-slice brightness jitter and sub-pixel shifts
    for z in 0..nz {
        let jitter: f32 = rng.random_range(-0.05..0.05);
        let dx: f64 = rng.random_range(-z_blur..=z_blur);
        let dy: f64 = rng.random_range(-z_blur..=z_blur);
        let plane: Vec<f32> =
            img.values()[nx * ny * z..nx * ny * (z + 1)].to_vec();
        let sample = |x: f64, y: f64| -> f32 {
            let xc = x.clamp(0.0, (nx - 1) as f64);
            let yc = y.clamp(0.0, (ny - 1) as f64);
            let (x0, y0) = (xc.floor() as usize, yc.floor() as usize);
            let (x1, y1) = ((x0 + 1).min(nx - 1), (y0 + 1).min(ny - 1));
            let (fx, fy) = ((xc - x0 as f64) as f32, (yc - y0 as f64) as f32);
            let v00 = plane[x0 + nx * y0];
            let v10 = plane[x1 + nx * y0];
            let v01 = plane[x0 + nx * y1];
            let v11 = plane[x1 + nx * y1];
            (v00 * (1.0 - fx) + v10 * fx) * (1.0 - fy) + (v01 * (1.0 - fx) + v11 * fx) * fy
        };
        for y in 0..ny {
            for x in 0..nx {
                let v = sample(x as f64 + dx, y as f64 + dy) + jitter;
                img.values_mut()[x + nx * (y + ny * z)] = v;
            }
        }
    }

    // additive Gaussian noise via Box-Muller, sequential for determinism
    if noise_sd > 0.0 {
        for v in img.values_mut() {
            let u1: f64 = 1.0 - rng.random::<f64>();
            let u2: f64 = rng.random();
            let n = (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos();
            *v += (n * noise_sd) as f32;
        }
    }
    for v in img.values_mut() {
        *v = v.clamp(0.0, 1.0);
    }
    img.voxel_size_nm = Some([7.0, 7.0, 40.0]);
    Ok((img, truth))
}
