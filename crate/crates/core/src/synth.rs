//! Deterministic ray-cast RGB-D scenes: analytic primitives in front of a
//! tilted background plane, Lambertian shading, seeded pixel noise.

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, FormatError, Result};
use crate::image::{DepthMap, Image};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PrimitiveKind {
    Plane,
    Sphere,
    Box,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneSpec {
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    pub min_primitives: usize,
    pub max_primitives: usize,
    pub kinds: Vec<PrimitiveKind>,
    pub depth_min: f64,
    pub depth_max: f64,
    pub light_dir: [f64; 3],
    pub noise_sigma: f64,
    pub fov_degrees: f64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            height: 64,
            width: 64,
            min_primitives: 3,
            max_primitives: 8,
            kinds: vec![PrimitiveKind::Plane, PrimitiveKind::Sphere, PrimitiveKind::Box],
            depth_min: 0.5,
            depth_max: 10.0,
            light_dir: normalize([-0.4, 0.6, -0.7]),
            noise_sigma: 0.01,
            fov_degrees: 60.0,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.depth_min > 0.0 && self.depth_min < self.depth_max) {
            return Err(Error::Config(format!(
                "depth range [{}, {}] must be positive and increasing",
                self.depth_min, self.depth_max
            )));
        }
        if self.min_primitives > self.max_primitives {
            return Err(Error::Config("min_primitives > max_primitives".into()));
        }
        if self.max_primitives > 0 && self.kinds.is_empty() {
            return Err(Error::Config("no primitive kinds enabled".into()));
        }
        if self.height == 0 || self.width == 0 {
            return Err(Error::Config("zero resolution".into()));
        }
        let n = norm(self.light_dir);
        if (n - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("light direction has norm {n}, expected 1")));
        }
        Ok(())
    }
}

type Vec3 = [f64; 3];

fn dot3(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn sub3(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn scale3(a: Vec3, s: f64) -> Vec3 {
    [a[0] * s, a[1] * s, a[2] * s]
}

fn cross3(a: Vec3, b: Vec3) -> Vec3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn norm(a: Vec3) -> f64 {
    dot3(a, a).sqrt()
}

fn normalize(a: Vec3) -> Vec3 {
    scale3(a, 1.0 / norm(a))
}

/// Infinite plane through `point` with unit `normal`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Plane {
    pub point: Vec3,
    pub normal: Vec3,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Primitive {
    /// Square patch of half-size `half` spanned by `u`, `v` around `center`.
    Plane {
        center: Vec3,
        normal: Vec3,
        u: Vec3,
        v: Vec3,
        half: f64,
        albedo: Vec3,
    },
    Sphere {
        center: Vec3,
        radius: f64,
        albedo: Vec3,
    },
    /// Axis-aligned box.
    Box {
        min: Vec3,
        max: Vec3,
        albedo: Vec3,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneLayout {
    pub background: Plane,
    pub background_albedo: Vec3,
    pub primitives: Vec<Primitive>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub rgb: Image,
    pub depth: DepthMap,
    pub layout: SceneLayout,
}

/// Ray direction with unit z component, so the hit parameter is the
/// z-depth of the hit point.
pub fn pixel_ray(spec: &SceneSpec, y: usize, x: usize) -> Vec3 {
    let f = (spec.width as f64 / 2.0) / (spec.fov_degrees.to_radians() / 2.0).tan();
    [
        (x as f64 + 0.5 - spec.width as f64 / 2.0) / f,
        -(y as f64 + 0.5 - spec.height as f64 / 2.0) / f,
        1.0,
    ]
}

struct Hit {
    t: f64,
    normal: Vec3,
    albedo: Vec3,
}

fn intersect(p: &Primitive, d: Vec3) -> Option<Hit> {
    match p {
        Primitive::Plane {
            center,
            normal,
            u,
            v,
            half,
            albedo,
        } => {
            let denom = dot3(*normal, d);
            if denom.abs() < 1e-12 {
                return None;
            }
            let t = dot3(*normal, *center) / denom;
            if t <= 0.0 {
                return None;
            }
            let rel = sub3(scale3(d, t), *center);
            if dot3(rel, *u).abs() <= *half && dot3(rel, *v).abs() <= *half {
                Some(Hit {
                    t,
                    normal: *normal,
                    albedo: *albedo,
                })
            } else {
                None
            }
        }
        Primitive::Sphere {
            center,
            radius,
            albedo,
        } => {
            // |t·d - c|² = r²
            let a = dot3(d, d);
            let b = -2.0 * dot3(d, *center);
            let c = dot3(*center, *center) - radius * radius;
            let disc = b * b - 4.0 * a * c;
            if disc < 0.0 {
                return None;
            }
            let t = (-b - disc.sqrt()) / (2.0 * a);
            if t <= 0.0 {
                return None;
            }
            let hit = scale3(d, t);
            Some(Hit {
                t,
                normal: normalize(sub3(hit, *center)),
                albedo: *albedo,
            })
        }
        Primitive::Box { min, max, albedo } => {
            let mut t_near = f64::NEG_INFINITY;
            let mut t_far = f64::INFINITY;
            let mut axis = 0;
            for i in 0..3 {
                if d[i].abs() < 1e-12 {
                    if 0.0 < min[i] || 0.0 > max[i] {
                        return None;
                    }
                    continue;
                }
                let (mut t0, mut t1) = (min[i] / d[i], max[i] / d[i]);
                if t0 > t1 {
                    std::mem::swap(&mut t0, &mut t1);
                }
                if t0 > t_near {
                    t_near = t0;
                    axis = i;
                }
                t_far = t_far.min(t1);
            }
            if t_near > t_far || t_near <= 0.0 {
                return None;
            }
            let mut normal = [0.0; 3];
            normal[axis] = -d[axis].signum();
            Some(Hit {
                t: t_near,
                normal,
                albedo: *albedo,
            })
        }
    }
}

fn uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * rng.gen::<f64>()
}

fn random_albedo(rng: &mut ChaCha8Rng) -> Vec3 {
    [uniform(rng, 0.2, 1.0), uniform(rng, 0.2, 1.0), uniform(rng, 0.2, 1.0)]
}

fn scene_rng(spec: &SceneSpec, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(index);
    rng
}

fn sample_layout(spec: &SceneSpec, rng: &mut ChaCha8Rng) -> SceneLayout {
    let tilt = [uniform(rng, -0.3, 0.3), uniform(rng, -0.3, 0.3), -1.0];
    let background = Plane {
        point: [0.0, 0.0, uniform(rng, 6.0, 9.0)],
        normal: normalize(tilt),
    };
    let background_albedo = random_albedo(rng);
    let count = if spec.max_primitives == 0 {
        0
    } else {
        rng.gen_range(spec.min_primitives..=spec.max_primitives)
    };
    let half_fov = (spec.fov_degrees.to_radians() / 2.0).tan();
    let mut primitives = Vec::with_capacity(count);
    for _ in 0..count {
        let kind = spec.kinds[rng.gen_range(0..spec.kinds.len())];
        let z = uniform(rng, 1.5, 6.5);
        let reach = 0.8 * z * half_fov;
        let center = [uniform(rng, -reach, reach), uniform(rng, -reach, reach), z];
        let albedo = random_albedo(rng);
        let prim = match kind {
            PrimitiveKind::Sphere => Primitive::Sphere {
                center,
                radius: uniform(rng, 0.3, 1.2),
                albedo,
            },
            PrimitiveKind::Box => {
                let h = [uniform(rng, 0.2, 0.9), uniform(rng, 0.2, 0.9), uniform(rng, 0.2, 0.9)];
                Primitive::Box {
                    min: sub3(center, h),
                    max: [center[0] + h[0], center[1] + h[1], center[2] + h[2]],
                    albedo,
                }
            }
            PrimitiveKind::Plane => {
                let normal = normalize([uniform(rng, -0.8, 0.8), uniform(rng, -0.8, 0.8), -1.0]);
                let helper = if normal[0].abs() < 0.9 { [1.0, 0.0, 0.0] } else { [0.0, 1.0, 0.0] };
                let u = normalize(cross3(normal, helper));
                let v = cross3(normal, u);
                Primitive::Plane {
                    center,
                    normal,
                    u,
                    v,
                    half: uniform(rng, 0.4, 1.2),
                    albedo,
                }
            }
        };
        primitives.push(prim);
    }
    SceneLayout {
        background,
        background_albedo,
        primitives,
    }
}

/// Renders scene `index` of `spec`. Output is a pure function of
/// `(spec, index)`.
pub fn generate_scene(spec: &SceneSpec, index: u64) -> Result<Scene> {
    spec.validate()?;
    let mut rng = scene_rng(spec, index);
    let layout = sample_layout(spec, &mut rng);
    let (h, w) = (spec.height, spec.width);
    let mut depth = vec![0.0; h * w];
    let mut rgb = vec![0.0; h * w * 3];
    let bg = &layout.background;
    for y in 0..h {
        for x in 0..w {
            let d = pixel_ray(spec, y, x);
            let t_bg = dot3(bg.normal, bg.point) / dot3(bg.normal, d);
            let mut best = Hit {
                t: if t_bg > 0.0 { t_bg } else { f64::INFINITY },
                normal: bg.normal,
                albedo: layout.background_albedo,
            };
            for p in &layout.primitives {
                if let Some(hit) = intersect(p, d) {
                    if hit.t < best.t {
                        best = hit;
                    }
                }
            }
            let mut n = best.normal;
            if dot3(n, d) > 0.0 {
                n = scale3(n, -1.0);
            }
            let shade = 0.15 + 0.85 * dot3(n, spec.light_dir).max(0.0);
            let i = y * w + x;
            depth[i] = best.t.clamp(spec.depth_min, spec.depth_max);
            for ch in 0..3 {
                rgb[3 * i + ch] = best.albedo[ch] * shade;
            }
        }
    }
    for v in rgb.iter_mut() {
        let z: f64 = rng.sample(StandardNormal);
        *v = (*v + spec.noise_sigma * z).clamp(0.0, 1.0);
    }
    Ok(Scene {
        rgb: Image::new(h, w, rgb)?,
        depth: DepthMap::new(h, w, depth)?,
        layout,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub index: u64,
    pub seed: u64,
    pub rgb: String,
    pub depth: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub spec: SceneSpec,
    pub train: Vec<ManifestEntry>,
    pub val: Vec<ManifestEntry>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

fn entry(spec: &SceneSpec, index: u64) -> ManifestEntry {
    ManifestEntry {
        index,
        seed: spec.seed,
        rgb: format!("scene_{index:05}.ppm"),
        depth: format!("scene_{index:05}.depth"),
    }
}

/// Train scenes take indices `0..n_train`, validation scenes the next
/// `n_val` indices.
pub fn plan_split(spec: &SceneSpec, n_train: usize, n_val: usize) -> Result<Manifest> {
    if n_train == 0 || n_val == 0 {
        return Err(Error::Config("split counts must be >= 1".into()));
    }
    spec.validate()?;
    let train = (0..n_train as u64).map(|i| entry(spec, i)).collect();
    let val = (n_train as u64..(n_train + n_val) as u64).map(|i| entry(spec, i)).collect();
    Ok(Manifest {
        spec: spec.clone(),
        train,
        val,
    })
}

/// Renders every scene of `manifest` into `dir` and writes the manifest.
pub fn write_dataset(manifest: &Manifest, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for e in manifest.train.iter().chain(&manifest.val) {
        let mut spec = manifest.spec.clone();
        spec.seed = e.seed;
        let scene = generate_scene(&spec, e.index)?;
        write_ppm(&scene.rgb, &dir.join(&e.rgb))?;
        write_depth(&scene.depth, &dir.join(&e.depth))?;
    }
    let path = dir.join(MANIFEST_FILE);
    let json = serde_json::to_string_pretty(manifest)?;
    std::fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))
}

pub fn generate_split(spec: &SceneSpec, n_train: usize, n_val: usize, dir: &Path) -> Result<Manifest> {
    let manifest = plan_split(spec, n_train, n_val)?;
    write_dataset(&manifest, dir)?;
    Ok(manifest)
}

pub fn read_manifest(path: &Path) -> Result<Manifest> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// A loaded dataset split.
#[derive(Clone, Debug)]
pub struct Sample {
    pub index: u64,
    pub rgb: Image,
    pub depth: DepthMap,
}

pub fn load_entries(dir: &Path, entries: &[ManifestEntry]) -> Result<Vec<Sample>> {
    entries
        .iter()
        .map(|e| {
            Ok(Sample {
                index: e.index,
                rgb: read_ppm(&dir.join(&e.rgb))?,
                depth: read_depth(&dir.join(&e.depth))?,
            })
        })
        .collect()
}

/// Resolves a manifest argument that may name the file or its directory.
pub fn manifest_location(path: &Path) -> (PathBuf, PathBuf) {
    if path.is_dir() {
        (path.join(MANIFEST_FILE), path.to_path_buf())
    } else {
        let dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        (path.to_path_buf(), dir)
    }
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn encode_ppm(img: &Image) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend(img.data.iter().map(|v| to_u8(*v)));
    out
}

pub fn write_ppm(img: &Image, path: &Path) -> Result<()> {
    std::fs::write(path, encode_ppm(img)).map_err(|e| Error::io(path, e))
}

/// Splits a binary PNM header into its whitespace-separated fields.
pub(crate) fn parse_pnm_header(bytes: &[u8], fields: usize) -> Result<(Vec<String>, usize)> {
    let mut out = Vec::new();
    let mut i = 0;
    while out.len() < fields {
        while i < bytes.len() && bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        let start = i;
        while i < bytes.len() && !bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if start == i {
            return Err(FormatError::Malformed("short PNM header".into()).into());
        }
        out.push(String::from_utf8_lossy(&bytes[start..i]).into_owned());
    }
    // single whitespace byte before the raster
    Ok((out, i + 1))
}

pub fn read_ppm(path: &Path) -> Result<Image> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let (fields, offset) = parse_pnm_header(&bytes, 4)?;
    if fields[0] != "P6" || fields[3] != "255" {
        return Err(FormatError::Malformed(format!("{}: unsupported PPM header", path.display())).into());
    }
    let parse = |s: &str| {
        s.parse::<usize>()
            .map_err(|_| Error::from(FormatError::Malformed(format!("bad PPM extent {s}"))))
    };
    let (w, h) = (parse(&fields[1])?, parse(&fields[2])?);
    let needed = offset + w * h * 3;
    if bytes.len() < needed {
        return Err(FormatError::TruncatedPayload {
            needed,
            available: bytes.len(),
        }
        .into());
    }
    let data = bytes[offset..needed].iter().map(|b| *b as f64 / 255.0).collect();
    Image::new(h, w, data)
}

/// Raw depth: `u32 H`, `u32 W` little-endian, then `H·W` little-endian f32.
pub fn encode_depth(depth: &DepthMap) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + depth.len() * 4);
    out.extend_from_slice(&(depth.height as u32).to_le_bytes());
    out.extend_from_slice(&(depth.width as u32).to_le_bytes());
    for v in &depth.depth {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    out
}

pub fn write_depth(depth: &DepthMap, path: &Path) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&encode_depth(depth)).map_err(|e| Error::io(path, e))
}

pub fn decode_depth(bytes: &[u8]) -> Result<DepthMap> {
    if bytes.len() < 8 {
        return Err(FormatError::TruncatedPayload {
            needed: 8,
            available: bytes.len(),
        }
        .into());
    }
    let h = u32::from_le_bytes(bytes[0..4].try_into().expect("4 bytes")) as usize;
    let w = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
    let needed = 8 + h * w * 4;
    if bytes.len() != needed {
        return Err(FormatError::TruncatedPayload {
            needed,
            available: bytes.len(),
        }
        .into());
    }
    let depth = bytes[8..]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64)
        .collect();
    DepthMap::new(h, w, depth)
}

pub fn read_depth(path: &Path) -> Result<DepthMap> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_depth(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_and_index_is_bitwise_identical() {
        let spec = SceneSpec::default();
        let a = generate_scene(&spec, 7).unwrap();
        let b = generate_scene(&spec, 7).unwrap();
        assert_eq!(a, b);
        let c = generate_scene(&spec, 8).unwrap();
        assert_ne!(a.depth, c.depth);
    }

    #[test]
    fn empty_scene_is_background_plane() {
        let spec = SceneSpec {
            min_primitives: 0,
            max_primitives: 0,
            ..SceneSpec::default()
        };
        let scene = generate_scene(&spec, 3).unwrap();
        assert!(scene.layout.primitives.is_empty());
        let bg = &scene.layout.background;
        for y in [0, 17, 63] {
            for x in [0, 40, 63] {
                let d = pixel_ray(&spec, y, x);
                let t = (bg.normal[0] * bg.point[0] + bg.normal[1] * bg.point[1] + bg.normal[2] * bg.point[2])
                    / (bg.normal[0] * d[0] + bg.normal[1] * d[1] + bg.normal[2] * d[2]);
                assert_eq!(scene.depth.at(y, x), t.clamp(0.5, 10.0));
            }
        }
    }

    #[test]
    fn depths_within_range_and_rgb_in_unit_interval() {
        let spec = SceneSpec::default();
        for i in 0..5 {
            let s = generate_scene(&spec, i).unwrap();
            assert!(s.depth.depth.iter().all(|d| (0.5..=10.0).contains(d)));
            assert!(s.rgb.data.iter().all(|v| (0.0..=1.0).contains(v)));
            assert_eq!(s.depth.valid_count(), 64 * 64);
        }
    }

    #[test]
    fn depth_is_never_constant() {
        let spec = SceneSpec {
            min_primitives: 0,
            max_primitives: 0,
            ..SceneSpec::default()
        };
        for i in 0..10 {
            let s = generate_scene(&spec, i).unwrap();
            let first = s.depth.depth[0];
            assert!(s.depth.depth.iter().any(|d| *d != first));
        }
    }

    #[test]
    fn invalid_spec_rejected() {
        let spec = SceneSpec {
            depth_min: 5.0,
            depth_max: 1.0,
            ..SceneSpec::default()
        };
        assert!(matches!(generate_scene(&spec, 0), Err(Error::Config(_))));
    }

    #[test]
    fn depth_codec_round_trip() {
        let d = DepthMap::new(2, 3, vec![0.5, 1.0, 2.25, 3.5, 9.75, 10.0]).unwrap();
        let bytes = encode_depth(&d);
        assert_eq!(bytes.len(), 8 + 24);
        assert_eq!(decode_depth(&bytes).unwrap(), d);
        assert!(decode_depth(&bytes[..20]).is_err());
    }

    #[test]
    fn split_indices_are_disjoint() {
        let m = plan_split(&SceneSpec::default(), 8, 2).unwrap();
        let mut idx: Vec<u64> = m.train.iter().chain(&m.val).map(|e| e.index).collect();
        idx.sort();
        idx.dedup();
        assert_eq!(idx.len(), 10);
        assert!(plan_split(&SceneSpec::default(), 0, 2).is_err());
    }
}
