//! On-disk datasets: binary PPM/PGM images, a flat binary vertex-animation
//! file ("NBAN"), OBJ rest meshes, and a plain-text manifest tying frames,
//! cameras and the train/test split together.

use crate::camera::Camera;
use crate::error::{Error, Result};
use crate::mesh::{load_obj, save_obj, TriMesh};
use crate::raster::FeatureImage;
use crate::synth::{animate, gt_render, make_scene, SceneKind};
use nalgebra::{Matrix3, Vector3};
use rayon::prelude::*;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

pub const DEFAULT_LIGHT: [f64; 3] = [0.35, 0.9, -0.6];

/// `n` cameras on a ring around the origin, all aimed at the center, with a
/// small alternating elevation so views are not coplanar.
pub fn ring_cameras(n: usize, radius: f64, width: usize, height: usize) -> Vec<Camera> {
    (0..n)
        .map(|i| {
            let angle = 2.0 * std::f64::consts::PI * i as f64 / n as f64;
            let elev = if i % 2 == 0 { 0.25 } else { -0.2 };
            let eye = Vector3::new(
                radius * angle.cos(),
                radius * elev,
                radius * angle.sin(),
            );
            Camera::look_at(
                eye,
                Vector3::zeros(),
                Vector3::new(0.0, 1.0, 0.0),
                45.0,
                width,
                height,
            )
        })
        .collect()
}

pub fn write_ppm(path: &Path, img: &FeatureImage) -> Result<()> {
    if img.channels != 3 {
        return Err(Error::ShapeError("PPM needs 3 channels".into()));
    }
    let mut f = BufWriter::new(std::fs::File::create(path)?);
    write!(f, "P6\n{} {}\n255\n", img.width, img.height)?;
    let bytes: Vec<u8> = img
        .data
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    f.write_all(&bytes)?;
    Ok(())
}

pub fn write_pgm(path: &Path, img: &FeatureImage) -> Result<()> {
    if img.channels != 1 {
        return Err(Error::ShapeError("PGM needs 1 channel".into()));
    }
    let mut f = BufWriter::new(std::fs::File::create(path)?);
    write!(f, "P5\n{} {}\n255\n", img.width, img.height)?;
    let bytes: Vec<u8> = img
        .data
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    f.write_all(&bytes)?;
    Ok(())
}

fn read_netpbm_header<R: BufRead>(r: &mut R, magic: &str) -> Result<(usize, usize)> {
    let mut tokens = Vec::new();
    let mut line = String::new();
    while tokens.len() < 4 {
        line.clear();
        if r.read_line(&mut line)? == 0 {
            return Err(Error::DataError("truncated netpbm header".into()));
        }
        let body = line.split('#').next().unwrap_or("");
        tokens.extend(body.split_whitespace().map(str::to_string));
    }
    if tokens[0] != magic {
        return Err(Error::DataError(format!(
            "expected {magic}, found {}",
            tokens[0]
        )));
    }
    let w: usize = tokens[1]
        .parse()
        .map_err(|_| Error::DataError("bad width".into()))?;
    let h: usize = tokens[2]
        .parse()
        .map_err(|_| Error::DataError("bad height".into()))?;
    if tokens[3] != "255" {
        return Err(Error::DataError("only maxval 255 supported".into()));
    }
    Ok((w, h))
}

pub fn read_ppm(path: &Path) -> Result<FeatureImage> {
    let mut r = BufReader::new(std::fs::File::open(path)?);
    let (w, h) = read_netpbm_header(&mut r, "P6")?;
    let mut bytes = vec![0u8; w * h * 3];
    r.read_exact(&mut bytes)?;
    let mut img = FeatureImage::zeros(w, h, 3);
    for (v, &b) in img.data.iter_mut().zip(bytes.iter()) {
        *v = b as f64 / 255.0;
    }
    Ok(img)
}

pub fn read_pgm(path: &Path) -> Result<FeatureImage> {
    let mut r = BufReader::new(std::fs::File::open(path)?);
    let (w, h) = read_netpbm_header(&mut r, "P5")?;
    let mut bytes = vec![0u8; w * h];
    r.read_exact(&mut bytes)?;
    let mut img = FeatureImage::zeros(w, h, 1);
    for (v, &b) in img.data.iter_mut().zip(bytes.iter()) {
        *v = b as f64 / 255.0;
    }
    Ok(img)
}

/// Vertex animation file: magic "NBAN", u32 frame count, u32 vertex count,
/// then f32 xyz per vertex per frame, little-endian.
pub fn write_nban(path: &Path, frames: &[Vec<Vector3<f64>>]) -> Result<()> {
    let mut f = BufWriter::new(std::fs::File::create(path)?);
    f.write_all(b"NBAN")?;
    f.write_all(&(frames.len() as u32).to_le_bytes())?;
    let n = frames.first().map_or(0, |f| f.len());
    f.write_all(&(n as u32).to_le_bytes())?;
    for frame in frames {
        if frame.len() != n {
            return Err(Error::DataError("inconsistent frame vertex counts".into()));
        }
        for v in frame {
            for c in 0..3 {
                f.write_all(&(v[c] as f32).to_le_bytes())?;
            }
        }
    }
    Ok(())
}

pub fn read_nban(path: &Path) -> Result<Vec<Vec<Vector3<f64>>>> {
    let mut r = BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != b"NBAN" {
        return Err(Error::DataError("bad NBAN magic".into()));
    }
    let mut word = [0u8; 4];
    r.read_exact(&mut word)?;
    let n_frames = u32::from_le_bytes(word) as usize;
    r.read_exact(&mut word)?;
    let n_verts = u32::from_le_bytes(word) as usize;
    let mut frames = Vec::with_capacity(n_frames);
    for _ in 0..n_frames {
        let mut verts = Vec::with_capacity(n_verts);
        for _ in 0..n_verts {
            let mut c = [0.0f64; 3];
            for slot in &mut c {
                r.read_exact(&mut word)?;
                *slot = f32::from_le_bytes(word) as f64;
            }
            verts.push(Vector3::new(c[0], c[1], c[2]));
        }
        frames.push(verts);
    }
    Ok(frames)
}

/// A fully loaded multi-view sequence.
pub struct Dataset {
    pub width: usize,
    pub height: usize,
    pub cameras: Vec<Camera>,
    pub holdout_cam: usize,
    pub rest: TriMesh,
    pub frames: Vec<Vec<Vector3<f64>>>,
    /// images[frame][cam], RGB in [0,1].
    pub images: Vec<Vec<FeatureImage>>,
    /// masks[frame][cam], binary.
    pub masks: Vec<Vec<FeatureImage>>,
}

impl Dataset {
    pub fn n_frames(&self) -> usize {
        self.frames.len()
    }

    pub fn train_cams(&self) -> Vec<usize> {
        (0..self.cameras.len())
            .filter(|&c| c != self.holdout_cam)
            .collect()
    }

    /// Posed mesh of one frame.
    pub fn posed_mesh(&self, frame: usize) -> Result<TriMesh> {
        self.rest.posed(self.frames[frame].clone())
    }
}

pub struct GenerateParams {
    pub kind: SceneKind,
    pub subdiv: usize,
    pub n_frames: usize,
    pub n_cams: usize,
    pub width: usize,
    pub height: usize,
    pub seed: u64,
    pub holdout_cam: Option<usize>,
}

fn image_name(frame: usize, cam: usize) -> String {
    format!("f{frame:04}_c{cam}.ppm")
}

fn mask_name(frame: usize, cam: usize) -> String {
    format!("f{frame:04}_c{cam}.pgm")
}

/// Renders and writes a full synthetic dataset; bit-identical for identical
/// (seed, params).
pub fn generate(params: &GenerateParams, out_dir: &Path) -> Result<()> {
    std::fs::create_dir_all(out_dir)?;
    std::fs::create_dir_all(out_dir.join("frames"))?;
    std::fs::create_dir_all(out_dir.join("masks"))?;
    let (mesh, colors) = make_scene(params.kind, params.subdiv, params.seed);
    let cameras = ring_cameras(params.n_cams, 3.0, params.width, params.height);
    let holdout = params.holdout_cam.unwrap_or(params.n_cams - 1);
    if holdout >= params.n_cams {
        return Err(Error::DataError(format!(
            "holdout camera {holdout} out of {} cameras",
            params.n_cams
        )));
    }
    let frames: Vec<Vec<Vector3<f64>>> = (0..params.n_frames)
        .map(|f| animate(&mesh, f, params.n_frames))
        .collect();
    save_obj(&out_dir.join("rest.obj"), &mesh.rest_vertices, &mesh.triangles)?;
    write_nban(&out_dir.join("anim.nban"), &frames)?;

    // The NBAN file quantizes poses to f32; render from the quantized
    // vertices so images and reloaded poses agree exactly.
    let frames = read_nban(&out_dir.join("anim.nban"))?;
    let light = Vector3::new(DEFAULT_LIGHT[0], DEFAULT_LIGHT[1], DEFAULT_LIGHT[2]);

    let jobs: Vec<(usize, usize)> = (0..params.n_frames)
        .flat_map(|f| (0..params.n_cams).map(move |c| (f, c)))
        .collect();
    let renders: Vec<(FeatureImage, FeatureImage)> = jobs
        .par_iter()
        .map(|&(f, c)| {
            let posed = mesh.posed(frames[f].clone()).expect("valid pose");
            gt_render(&posed, &colors, &cameras[c], light)
        })
        .collect();
    for (&(f, c), (rgb, mask)) in jobs.iter().zip(renders.iter()) {
        write_ppm(&out_dir.join("frames").join(image_name(f, c)), rgb)?;
        write_pgm(&out_dir.join("masks").join(mask_name(f, c)), mask)?;
    }

    let mut m = BufWriter::new(std::fs::File::create(out_dir.join("manifest.txt"))?);
    writeln!(m, "# synthetic multi-view sequence")?;
    writeln!(m, "width {}", params.width)?;
    writeln!(m, "height {}", params.height)?;
    writeln!(m, "frames {}", params.n_frames)?;
    writeln!(m, "cams {}", params.n_cams)?;
    writeln!(m, "holdout_cam {holdout}")?;
    writeln!(m, "seed {}", params.seed)?;
    writeln!(m, "rest_mesh rest.obj")?;
    writeln!(m, "anim anim.nban")?;
    writeln!(m, "# image naming: frames/fFFFF_cC.ppm, masks/fFFFF_cC.pgm")?;
    for (i, c) in cameras.iter().enumerate() {
        write!(m, "camera {i} {} {} {} {}", c.fx, c.fy, c.cx, c.cy)?;
        for r in 0..3 {
            for col in 0..3 {
                write!(m, " {}", c.rot[(r, col)])?;
            }
        }
        writeln!(m, " {} {} {}", c.trans.x, c.trans.y, c.trans.z)?;
    }
    Ok(())
}

pub fn load(dir: &Path) -> Result<Dataset> {
    let manifest = dir.join("manifest.txt");
    let file = std::fs::File::open(&manifest)
        .map_err(|e| Error::DataError(format!("cannot open {}: {e}", manifest.display())))?;
    let mut width = 0;
    let mut height = 0;
    let mut n_frames = 0;
    let mut n_cams = 0;
    let mut holdout = 0;
    let mut rest_path = PathBuf::from("rest.obj");
    let mut anim_path = PathBuf::from("anim.nban");
    let mut cameras: Vec<(usize, Camera)> = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line?;
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let mut it = line.split_whitespace();
        let key = it.next().unwrap();
        let rest: Vec<&str> = it.collect();
        let one = |rest: &[&str]| -> Result<String> {
            rest.first()
                .map(|s| s.to_string())
                .ok_or_else(|| Error::DataError(format!("manifest key '{key}' missing value")))
        };
        match key {
            "width" => width = one(&rest)?.parse().map_err(bad("width"))?,
            "height" => height = one(&rest)?.parse().map_err(bad("height"))?,
            "frames" => n_frames = one(&rest)?.parse().map_err(bad("frames"))?,
            "cams" => n_cams = one(&rest)?.parse().map_err(bad("cams"))?,
            "holdout_cam" => holdout = one(&rest)?.parse().map_err(bad("holdout_cam"))?,
            "seed" => {}
            "rest_mesh" => rest_path = PathBuf::from(one(&rest)?),
            "anim" => anim_path = PathBuf::from(one(&rest)?),
            "camera" => {
                if rest.len() != 17 {
                    return Err(Error::DataError("camera line needs 17 fields".into()));
                }
                let vals: Vec<f64> = rest[1..]
                    .iter()
                    .map(|s| s.parse().map_err(bad("camera")))
                    .collect::<Result<_>>()?;
                let idx: usize = rest[0].parse().map_err(bad("camera index"))?;
                let rot = Matrix3::new(
                    vals[4], vals[5], vals[6], vals[7], vals[8], vals[9], vals[10], vals[11],
                    vals[12],
                );
                cameras.push((
                    idx,
                    Camera::new(
                        vals[0],
                        vals[1],
                        vals[2],
                        vals[3],
                        rot,
                        Vector3::new(vals[13], vals[14], vals[15]),
                        width,
                        height,
                    ),
                ));
            }
            other => {
                return Err(Error::DataError(format!("unknown manifest key '{other}'")));
            }
        }
    }
    if cameras.len() != n_cams {
        return Err(Error::DataError(format!(
            "manifest declares {n_cams} cameras, found {}",
            cameras.len()
        )));
    }
    cameras.sort_by_key(|(i, _)| *i);
    let cameras: Vec<Camera> = cameras.into_iter().map(|(_, c)| c).collect();
    if holdout >= cameras.len() {
        return Err(Error::DataError("holdout camera out of range".into()));
    }

    let (rest_v, tris) = load_obj(&dir.join(&rest_path))?;
    let rest = TriMesh::new(rest_v, tris)?;
    let frames = read_nban(&dir.join(&anim_path))?;
    if frames.len() != n_frames {
        return Err(Error::DataError(format!(
            "manifest declares {n_frames} frames, animation has {}",
            frames.len()
        )));
    }
    for f in &frames {
        if f.len() != rest.n_vertices() {
            return Err(Error::ConnectivityMismatch(format!(
                "animation frame has {} vertices, rest mesh {}",
                f.len(),
                rest.n_vertices()
            )));
        }
    }

    let mut images = Vec::with_capacity(n_frames);
    let mut masks = Vec::with_capacity(n_frames);
    for f in 0..n_frames {
        let mut row_i = Vec::with_capacity(n_cams);
        let mut row_m = Vec::with_capacity(n_cams);
        for c in 0..n_cams {
            let img = read_ppm(&dir.join("frames").join(image_name(f, c)))?;
            let msk = read_pgm(&dir.join("masks").join(mask_name(f, c)))?;
            if img.width != width || img.height != height {
                return Err(Error::DataError(format!(
                    "image f{f} c{c} is {}x{}, expected {width}x{height}",
                    img.width, img.height
                )));
            }
            row_i.push(img);
            row_m.push(msk);
        }
        images.push(row_i);
        masks.push(row_m);
    }
    Ok(Dataset {
        width,
        height,
        cameras,
        holdout_cam: holdout,
        rest,
        frames,
        images,
        masks,
    })
}

fn bad<E>(field: &'static str) -> impl Fn(E) -> Error {
    move |_| Error::DataError(format!("bad {field} in manifest"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn ppm_pgm_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(111);
        let dir = tempfile::tempdir().unwrap();
        let mut rgb = FeatureImage::zeros(9, 7, 3);
        for v in rgb.data.iter_mut() {
            *v = (rng.gen::<f64>() * 255.0).round() / 255.0; // representable
        }
        let p = dir.path().join("img.ppm");
        write_ppm(&p, &rgb).unwrap();
        let back = read_ppm(&p).unwrap();
        assert!(rgb.max_abs_diff(&back) < 1e-12);

        let mut gray = FeatureImage::zeros(5, 4, 1);
        for v in gray.data.iter_mut() {
            *v = if rng.gen::<f64>() > 0.5 { 1.0 } else { 0.0 };
        }
        let p = dir.path().join("img.pgm");
        write_pgm(&p, &gray).unwrap();
        let back = read_pgm(&p).unwrap();
        assert_eq!(gray.data, back.data);
    }

    #[test]
    fn nban_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let frames: Vec<Vec<Vector3<f64>>> = (0..3)
            .map(|f| {
                (0..5)
                    .map(|v| {
                        // f32-representable values round-trip exactly.
                        Vector3::new(
                            (f as f32 * 0.5) as f64,
                            (v as f32 * 0.25) as f64,
                            ((f * v) as f32) as f64,
                        )
                    })
                    .collect()
            })
            .collect();
        let p = dir.path().join("a.nban");
        write_nban(&p, &frames).unwrap();
        let back = read_nban(&p).unwrap();
        assert_eq!(frames.len(), back.len());
        for (a, b) in frames.iter().zip(back.iter()) {
            for (x, y) in a.iter().zip(b.iter()) {
                assert_eq!(x, y);
            }
        }
    }

    #[test]
    fn generate_writes_expected_files_and_loads_back() {
        let dir = tempfile::tempdir().unwrap();
        let params = GenerateParams {
            kind: SceneKind::Sphere,
            subdiv: 1,
            n_frames: 2,
            n_cams: 2,
            width: 32,
            height: 32,
            seed: 3,
            holdout_cam: None,
        };
        generate(&params, dir.path()).unwrap();
        let ppms = std::fs::read_dir(dir.path().join("frames")).unwrap().count();
        let pgms = std::fs::read_dir(dir.path().join("masks")).unwrap().count();
        assert_eq!(ppms, 4);
        assert_eq!(pgms, 4);
        assert!(dir.path().join("manifest.txt").exists());

        let ds = load(dir.path()).unwrap();
        assert_eq!(ds.n_frames(), 2);
        assert_eq!(ds.cameras.len(), 2);
        assert_eq!(ds.holdout_cam, 1);
        assert_eq!(ds.train_cams(), vec![0]);
        assert_eq!(ds.rest.n_vertices(), 42);
        assert!(ds.masks[0][0].data.iter().any(|&m| m > 0.0));
    }

    #[test]
    fn generate_is_deterministic() {
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        let params = GenerateParams {
            kind: SceneKind::Cube,
            subdiv: 1,
            n_frames: 2,
            n_cams: 2,
            width: 24,
            height: 24,
            seed: 9,
            holdout_cam: Some(0),
        };
        generate(&params, d1.path()).unwrap();
        generate(&params, d2.path()).unwrap();
        for sub in ["frames/f0000_c0.ppm", "frames/f0001_c1.ppm", "anim.nban"] {
            let a = std::fs::read(d1.path().join(sub)).unwrap();
            let b = std::fs::read(d2.path().join(sub)).unwrap();
            assert_eq!(a, b, "{sub} differs");
        }
    }
}
