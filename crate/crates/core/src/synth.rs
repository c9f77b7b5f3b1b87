//! Analytic Lambertian test scenes: textured planes and spheres lit by one
//! directional light per view, ray traced in closed form.

use std::path::Path;

use nalgebra::{Vector2, Vector3};

use crate::camera::{Camera, Ray};
use crate::error::{Error, Result};
use crate::io::{self, ColmapView, DepthMap, Image, KvFile};

/// Tolerance of the occlusion oracle, in scene units.
pub const OCCLUSION_TOL: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub enum Texture {
    Constant([f64; 3]),
    /// Alternating squares of side `period` in surface coordinates.
    Checker { a: [f64; 3], b: [f64; 3], period: f64 },
    /// Linear blend from `a` to `b` along the first surface coordinate.
    Gradient { a: [f64; 3], b: [f64; 3] },
}

impl Texture {
    /// Albedo at surface coordinates in `[0, 1]²`, clamped into `(0, 1]`.
    fn eval(&self, s: f64, t: f64, extent: (f64, f64)) -> [f64; 3] {
        let v = match self {
            Texture::Constant(c) => *c,
            Texture::Checker { a, b, period } => {
                let i = (s * 2.0 * extent.0 / period).floor() as i64 + (t * 2.0 * extent.1 / period).floor() as i64;
                if i.rem_euclid(2) == 0 {
                    *a
                } else {
                    *b
                }
            }
            Texture::Gradient { a, b } => {
                let u = s.clamp(0.0, 1.0);
                [0, 1, 2].map(|k| a[k] + (b[k] - a[k]) * u)
            }
        };
        v.map(|x| x.clamp(1e-3, 1.0))
    }

    fn to_cfg(&self) -> String {
        let rgb = |c: &[f64; 3]| format!("{} {} {}", c[0], c[1], c[2]);
        match self {
            Texture::Constant(c) => format!("constant {}", rgb(c)),
            Texture::Checker { a, b, period } => format!("checker {} {} {period}", rgb(a), rgb(b)),
            Texture::Gradient { a, b } => format!("gradient {} {}", rgb(a), rgb(b)),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Shape {
    /// Rectangle centred at `center` spanning `±half_extent` along the unit
    /// in-plane axes `u` and `normal × u`.
    Plane {
        center: Vector3<f64>,
        normal: Vector3<f64>,
        u: Vector3<f64>,
        half_extent: (f64, f64),
    },
    Sphere { center: Vector3<f64>, radius: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Primitive {
    pub shape: Shape,
    pub texture: Texture,
}

/// Directional light; `direction` points from the surface toward the light.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Light {
    pub direction: Vector3<f64>,
    pub intensity: [f64; 3],
    pub ambient: [f64; 3],
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneView {
    pub name: String,
    pub camera: Camera,
    pub light: Light,
    pub train: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticScene {
    pub name: String,
    pub primitives: Vec<Primitive>,
    pub views: Vec<SceneView>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hit {
    /// Distance along the unit ray.
    pub t: f64,
    pub point: Vector3<f64>,
    /// Unit normal facing the ray origin.
    pub normal: Vector3<f64>,
    pub albedo: [f64; 3],
    pub primitive: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruthView {
    pub color: Image,
    /// Camera-z depth, 0 where nothing is hit.
    pub depth: Vec<f64>,
    pub albedo: Image,
    pub shading: Image,
    pub hit: Vec<bool>,
    pub camera: Camera,
}

impl GroundTruthView {
    pub fn depth_map(&self) -> DepthMap {
        DepthMap {
            width: self.camera.width,
            height: self.camera.height,
            data: self.depth.iter().map(|d| *d as f32).collect(),
        }
    }
}

fn intersect(p: &Primitive, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<(f64, Vector3<f64>, [f64; 3])> {
    match &p.shape {
        Shape::Plane { center, normal, u, half_extent } => {
            let denom = normal.dot(dir);
            if denom.abs() < 1e-12 {
                return None;
            }
            let t = normal.dot(&(center - origin)) / denom;
            if t <= 0.0 {
                return None;
            }
            let x = origin + dir * t;
            let v = normal.cross(u);
            let rel = x - center;
            let (a, b) = (rel.dot(u), rel.dot(&v));
            if a.abs() > half_extent.0 || b.abs() > half_extent.1 {
                return None;
            }
            let s = (a + half_extent.0) / (2.0 * half_extent.0);
            let tt = (b + half_extent.1) / (2.0 * half_extent.1);
            Some((t, *normal, p.texture.eval(s, tt, *half_extent)))
        }
        Shape::Sphere { center, radius } => {
            let oc = origin - center;
            let b = oc.dot(dir);
            let c = oc.norm_squared() - radius * radius;
            let disc = b * b - c;
            if disc < 0.0 {
                return None;
            }
            let sq = disc.sqrt();
            let t = if -b - sq > 0.0 { -b - sq } else { -b + sq };
            if t <= 0.0 {
                return None;
            }
            let n = (origin + dir * t - center) / *radius;
            let s = 0.5 + n.z.atan2(n.x) / (2.0 * std::f64::consts::PI);
            let tt = n.y.clamp(-1.0, 1.0).acos() / std::f64::consts::PI;
            let ext = (std::f64::consts::PI * radius, 0.5 * std::f64::consts::PI * radius);
            Some((t, n, p.texture.eval(s, tt, ext)))
        }
    }
}

/// `clamp(albedo ⊙ (max(0, n·l)·I + ambient), 0, 1)` with shading returned
/// separately.
pub fn shade(albedo: [f64; 3], normal: &Vector3<f64>, light: &Light) -> ([f64; 3], [f64; 3]) {
    let lambert = normal.dot(&light.direction.normalize()).max(0.0);
    let shading = [0, 1, 2].map(|k| lambert * light.intensity[k] + light.ambient[k]);
    let color = [0, 1, 2].map(|k| (albedo[k] * shading[k]).clamp(0.0, 1.0));
    (color, shading)
}

impl SyntheticScene {
    /// Nearest intersection along a ray with unit direction.
    pub fn trace_ray(&self, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<Hit> {
        let mut best: Option<Hit> = None;
        for (i, p) in self.primitives.iter().enumerate() {
            if let Some((t, n, albedo)) = intersect(p, origin, dir) {
                if best.is_none_or(|b| t < b.t) {
                    let normal = if n.dot(dir) > 0.0 { -n } else { n };
                    best = Some(Hit {
                        t,
                        point: origin + dir * t,
                        normal,
                        albedo,
                        primitive: i,
                    });
                }
            }
        }
        best
    }

    /// Hit through a real-valued pixel.
    pub fn trace_pixel(&self, cam: &Camera, x: Vector2<f64>) -> Option<Hit> {
        let ray: Ray = cam.pixel_to_ray(x).ok()?;
        self.trace_ray(&ray.origin, &ray.direction)
    }

    pub fn trace_view(&self, cam: &Camera, light: &Light) -> GroundTruthView {
        let (w, h) = (cam.width, cam.height);
        let mut color = Image::new(w, h);
        let mut albedo = Image::new(w, h);
        let mut shading = Image::new(w, h);
        let mut depth = vec![0.0; w * h];
        let mut hit = vec![false; w * h];
        for r in 0..h {
            for c in 0..w {
                let ray = cam.pixel_ray(c, r);
                if let Some(hp) = self.trace_ray(&ray.origin, &ray.direction) {
                    let (col, sh) = shade(hp.albedo, &hp.normal, light);
                    color.set_pixel(c, r, col);
                    albedo.set_pixel(c, r, hp.albedo);
                    shading.set_pixel(c, r, sh);
                    depth[r * w + c] = hp.t * cam.axis_cosine(ray.pixel);
                    hit[r * w + c] = true;
                }
            }
        }
        GroundTruthView {
            color,
            depth,
            albedo,
            shading,
            hit,
            camera: cam.clone(),
        }
    }

    pub fn trace(&self, view: &SceneView) -> GroundTruthView {
        self.trace_view(&view.camera, &view.light)
    }

    pub fn train_views(&self) -> impl Iterator<Item = &SceneView> {
        self.views.iter().filter(|v| v.train)
    }

    pub fn test_views(&self) -> impl Iterator<Item = &SceneView> {
        self.views.iter().filter(|v| !v.train)
    }

    /// True when the source point at pixel `x`, depth `d` is the first
    /// surface seen from the target camera centre.
    pub fn occlusion_oracle(&self, src: &Camera, tgt: &Camera, x: Vector2<f64>, d: f64) -> Result<bool> {
        let p = src.backproject(x, d)?;
        let o = tgt.center();
        let seg = p - o;
        let len = seg.norm();
        if len < OCCLUSION_TOL {
            return Ok(true);
        }
        let dir = seg / len;
        Ok(match self.trace_ray(&o, &dir) {
            Some(hit) => hit.t >= len - OCCLUSION_TOL,
            None => true,
        })
    }

    /// Writes the scene in the dataset layout understood by
    /// [`io::load_scene`].
    pub fn emit_dataset(&self, out_dir: &Path) -> Result<()> {
        if self.views.is_empty() {
            return Err(Error::InvalidArgument("scene has no views".into()));
        }
        let mut split = String::new();
        let mut colmap = Vec::new();
        for v in &self.views {
            let gt = self.trace(v);
            let stem = Path::new(&v.name)
                .file_stem()
                .and_then(|s| s.to_str())
                .unwrap_or(&v.name)
                .to_string();
            io::write_png(&out_dir.join("images").join(&v.name), &gt.color)?;
            io::write_png(&io::albedo_path(out_dir, &v.name), &gt.albedo)?;
            io::write_depth(&io::depth_path(out_dir, &v.name), &gt.depth_map())?;
            io::write_gray_png(
                &out_dir.join("depth").join(format!("{stem}_mask.png")),
                v.camera.width,
                v.camera.height,
                &gt.hit.iter().map(|h| if *h { 1.0 } else { 0.0 }).collect::<Vec<_>>(),
            )?;
            split.push_str(&format!("{} {}\n", v.name, if v.train { "train" } else { "test" }));
            colmap.push(ColmapView {
                name: v.name.clone(),
                camera: v.camera.clone(),
            });
        }
        io::write_colmap(out_dir, &colmap)?;
        io::write_atomic(&out_dir.join("split.txt"), split.as_bytes())?;
        io::write_atomic(&out_dir.join("scene.cfg"), self.to_cfg().to_text().as_bytes())
    }

    /// Declarative description; cameras live in the COLMAP files.
    pub fn to_cfg(&self) -> KvFile {
        let v3 = |v: &Vector3<f64>| format!("{} {} {}", v.x, v.y, v.z);
        let mut kv = KvFile::default();
        kv.push("name", &self.name);
        let cam = &self.views[0].camera;
        kv.push("near", cam.near);
        kv.push("far", cam.far);
        kv.push("primitives", self.primitives.len());
        for (i, p) in self.primitives.iter().enumerate() {
            let geom = match &p.shape {
                Shape::Plane { center, normal, u, half_extent } => format!(
                    "plane {} {} {} {} {}",
                    v3(center),
                    v3(normal),
                    v3(u),
                    half_extent.0,
                    half_extent.1
                ),
                Shape::Sphere { center, radius } => format!("sphere {} {radius}", v3(center)),
            };
            kv.push(&format!("prim.{i}"), format!("{geom} {}", p.texture.to_cfg()));
        }
        for v in &self.views {
            let l = &v.light;
            kv.push(
                &format!("light.{}", v.name),
                format!(
                    "{} {} {} {} {} {} {}",
                    v3(&l.direction),
                    l.intensity[0],
                    l.intensity[1],
                    l.intensity[2],
                    l.ambient[0],
                    l.ambient[1],
                    l.ambient[2]
                ),
            );
        }
        kv
    }

    /// Rebuilds a scene from its description and COLMAP views; views absent
    /// from `train_names` are test views.
    pub fn from_cfg(kv: &KvFile, views: &[ColmapView], train_names: &[String]) -> Result<Self> {
        let bad = |m: String| Error::InvalidData(format!("scene.cfg: {m}"));
        let nums = |s: &str| -> Result<Vec<f64>> {
            s.split_whitespace()
                .map(|t| t.parse().map_err(|_| bad(format!("`{t}` is not a number"))))
                .collect()
        };
        let count: usize = kv
            .get("primitives")
            .ok_or_else(|| bad("missing `primitives`".into()))?
            .parse()
            .map_err(|_| bad("bad primitive count".into()))?;
        let mut primitives = Vec::with_capacity(count);
        for i in 0..count {
            let line = kv.get(&format!("prim.{i}")).ok_or_else(|| bad(format!("missing prim.{i}")))?;
            let (kind, rest) = line.split_once(' ').ok_or_else(|| bad(format!("prim.{i} is empty")))?;
            let (geom_n, shape_of): (usize, fn(&[f64]) -> Shape) = match kind {
                "plane" => (11, |g| Shape::Plane {
                    center: Vector3::new(g[0], g[1], g[2]),
                    normal: Vector3::new(g[3], g[4], g[5]).normalize(),
                    u: Vector3::new(g[6], g[7], g[8]).normalize(),
                    half_extent: (g[9], g[10]),
                }),
                "sphere" => (4, |g| Shape::Sphere {
                    center: Vector3::new(g[0], g[1], g[2]),
                    radius: g[3],
                }),
                other => return Err(bad(format!("unknown primitive `{other}`"))),
            };
            let toks: Vec<&str> = rest.split_whitespace().collect();
            if toks.len() < geom_n + 1 {
                return Err(bad(format!("prim.{i} is too short")));
            }
            let geom = nums(&toks[..geom_n].join(" "))?;
            let tex_vals = nums(&toks[geom_n + 1..].join(" "))?;
            let rgb = |o: usize| [tex_vals[o], tex_vals[o + 1], tex_vals[o + 2]];
            let texture = match (toks[geom_n], tex_vals.len()) {
                ("constant", 3) => Texture::Constant(rgb(0)),
                ("checker", 7) => Texture::Checker { a: rgb(0), b: rgb(3), period: tex_vals[6] },
                ("gradient", 6) => Texture::Gradient { a: rgb(0), b: rgb(3) },
                (t, _) => return Err(bad(format!("bad texture `{t}` in prim.{i}"))),
            };
            primitives.push(Primitive { shape: shape_of(&geom), texture });
        }
        let near = kv.get_f64("near")?.unwrap_or(io::DEFAULT_NEAR);
        let far = kv.get_f64("far")?.unwrap_or(io::DEFAULT_FAR);
        let mut out = Vec::with_capacity(views.len());
        for v in views {
            let l = nums(kv.get(&format!("light.{}", v.name)).ok_or_else(|| bad(format!("no light for `{}`", v.name)))?)?;
            if l.len() != 9 {
                return Err(bad(format!("light.{} needs 9 numbers", v.name)));
            }
            out.push(SceneView {
                name: v.name.clone(),
                camera: v.camera.with_bounds(near, far)?,
                light: Light {
                    direction: Vector3::new(l[0], l[1], l[2]),
                    intensity: [l[3], l[4], l[5]],
                    ambient: [l[6], l[7], l[8]],
                },
                train: train_names.contains(&v.name),
            });
        }
        Ok(Self {
            name: kv.get("name").unwrap_or("scene").to_string(),
            primitives,
            views: out,
        })
    }
}

/// Layout of the built-in two-planes scene.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TwoPlanesConfig {
    pub train_views: usize,
    pub test_views: usize,
    pub width: usize,
    pub height: usize,
}

impl Default for TwoPlanesConfig {
    fn default() -> Self {
        Self {
            train_views: 3,
            test_views: 2,
            width: 64,
            height: 64,
        }
    }
}

const TRAIN_LIGHTS: [Light; 3] = [
    Light {
        direction: Vector3::new(-0.6, -0.5, -1.0),
        intensity: [1.0, 0.8, 0.55],
        ambient: [0.15, 0.12, 0.1],
    },
    Light {
        direction: Vector3::new(0.7, -0.3, -1.0),
        intensity: [0.5, 0.7, 1.0],
        ambient: [0.1, 0.12, 0.18],
    },
    Light {
        direction: Vector3::new(0.0, 0.8, -1.0),
        intensity: [0.75, 0.75, 0.7],
        ambient: [0.2, 0.2, 0.2],
    },
];

/// Evaluation light: the average of the three training lights.
pub fn neutral_light() -> Light {
    let mut dir = Vector3::zeros();
    let (mut i, mut a) = ([0.0; 3], [0.0; 3]);
    for l in &TRAIN_LIGHTS {
        dir += l.direction.normalize();
        for k in 0..3 {
            i[k] += l.intensity[k] / 3.0;
            a[k] += l.ambient[k] / 3.0;
        }
    }
    Light {
        direction: dir.normalize(),
        intensity: i,
        ambient: a,
    }
}

/// Light of train view `i`; lighting cycles through three conditions.
pub fn train_light(i: usize) -> Light {
    TRAIN_LIGHTS[i % TRAIN_LIGHTS.len()]
}

/// A large checkered plane at z = 3 behind a small tilted gradient plane at
/// z ≈ 2, seen by a horizontal row of inward-looking cameras.
pub fn two_planes(cfg: &TwoPlanesConfig) -> Result<SyntheticScene> {
    if cfg.train_views == 0 {
        return Err(Error::InvalidArgument("two-planes needs at least one train view".into()));
    }
    let primitives = vec![
        Primitive {
            shape: Shape::Plane {
                center: Vector3::new(0.0, 0.0, 3.0),
                normal: Vector3::new(0.0, 0.0, -1.0),
                u: Vector3::x(),
                half_extent: (3.0, 3.0),
            },
            texture: Texture::Checker {
                a: [0.9, 0.75, 0.3],
                b: [0.2, 0.35, 0.75],
                period: 0.5,
            },
        },
        Primitive {
            shape: Shape::Plane {
                center: Vector3::new(0.1, 0.05, 2.0),
                normal: Vector3::new(0.25, -0.1, -1.0).normalize(),
                u: Vector3::new(1.0, 0.0, 0.25).normalize(),
                half_extent: (0.5, 0.5),
            },
            texture: Texture::Gradient {
                a: [0.85, 0.25, 0.2],
                b: [0.3, 0.85, 0.45],
            },
        },
    ];
    let focal = cfg.width as f64;
    let target = Vector3::new(0.0, 0.0, 2.5);
    let up = -Vector3::y();
    let (near, far) = (1.0, 4.5);
    let cam = |x: f64, y: f64| -> Result<Camera> {
        Camera::look_at(Vector3::new(x, y, 0.0), target, up, focal, cfg.width, cfg.height, near, far)
    };
    let mut views = Vec::new();
    let spread = |i: usize, n: usize| if n <= 1 { 0.0 } else { -0.5 + i as f64 / (n - 1) as f64 };
    for i in 0..cfg.train_views {
        views.push(SceneView {
            name: format!("view_{i:03}.png"),
            camera: cam(spread(i, cfg.train_views), 0.0)?,
            light: train_light(i),
            train: true,
        });
    }
    for j in 0..cfg.test_views {
        // Between the train cameras and slightly raised.
        let x = -0.35 + 0.7 * (j as f64 + 0.5) / cfg.test_views as f64;
        views.push(SceneView {
            name: format!("test_{j:03}.png"),
            camera: cam(x, 0.08)?,
            light: neutral_light(),
            train: false,
        });
    }
    Ok(SyntheticScene {
        name: "two-planes".into(),
        primitives,
        views,
    })
}

/// Built-in scenes by name.
pub fn preset(name: &str, cfg: &TwoPlanesConfig) -> Result<SyntheticScene> {
    match name {
        "two-planes" => two_planes(cfg),
        other => Err(Error::InvalidArgument(format!("unknown scene preset `{other}` (two-planes)"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::camera::pose_from_parts;
    use nalgebra::Matrix3;

    fn axis_cam(w: usize, h: usize, z: f64) -> Camera {
        let pose = pose_from_parts(&Matrix3::identity(), &Vector3::new(0.0, 0.0, z));
        Camera::new(w as f64, w as f64, (w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0, pose, w, h, 0.1, 10.0).unwrap()
    }

    fn white() -> Light {
        Light {
            direction: Vector3::new(0.0, 0.0, -1.0),
            intensity: [1.0; 3],
            ambient: [0.0; 3],
        }
    }

    #[test]
    fn fronto_parallel_plane_has_constant_depth() {
        let scene = SyntheticScene {
            name: "p".into(),
            primitives: vec![Primitive {
                shape: Shape::Plane {
                    center: Vector3::new(0.0, 0.0, 2.0),
                    normal: -Vector3::z(),
                    u: Vector3::x(),
                    half_extent: (10.0, 10.0),
                },
                texture: Texture::Constant([0.5; 3]),
            }],
            views: vec![],
        };
        let gt = scene.trace_view(&axis_cam(16, 12, 0.0), &white());
        assert!(gt.hit.iter().all(|h| *h));
        assert!(gt.depth.iter().all(|d| (d - 2.0).abs() < 1e-9), "{:?}", &gt.depth[..4]);
        assert!(gt.color.data.iter().all(|c| (c - 0.5).abs() < 1e-12));
    }

    #[test]
    fn sphere_centre_depth() {
        let scene = SyntheticScene {
            name: "s".into(),
            primitives: vec![Primitive {
                shape: Shape::Sphere { center: Vector3::new(0.0, 0.0, 5.0), radius: 1.5 },
                texture: Texture::Constant([0.7; 3]),
            }],
            views: vec![],
        };
        let gt = scene.trace_view(&axis_cam(9, 9, 0.0), &white());
        assert!((gt.depth[4 * 9 + 4] - 3.5).abs() < 1e-12);
        assert!(!gt.hit[0]);
    }

    #[test]
    fn lighting_changes_color_not_albedo() {
        let scene = two_planes(&TwoPlanesConfig::default()).unwrap();
        let cam = &scene.views[0].camera;
        let a = scene.trace_view(cam, &train_light(0));
        let b = scene.trace_view(cam, &train_light(1));
        assert_eq!(a.albedo, b.albedo);
        assert_ne!(a.color, b.color);
        for i in 0..a.hit.len() {
            for k in 0..3 {
                let c = a.albedo.data[3 * i + k] * a.shading.data[3 * i + k];
                assert!((a.color.data[3 * i + k] - c.clamp(0.0, 1.0)).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn oracle_sees_unoccluded_plane() {
        let scene = SyntheticScene {
            name: "p".into(),
            primitives: vec![Primitive {
                shape: Shape::Plane {
                    center: Vector3::new(0.0, 0.0, 2.0),
                    normal: -Vector3::z(),
                    u: Vector3::x(),
                    half_extent: (10.0, 10.0),
                },
                texture: Texture::Constant([0.5; 3]),
            }],
            views: vec![],
        };
        let src = axis_cam(8, 8, 0.0);
        let tgt = src.with_pose(pose_from_parts(&Matrix3::identity(), &Vector3::new(0.3, 0.0, 0.0))).unwrap();
        let gt = scene.trace_view(&src, &white());
        for r in 0..8 {
            for c in 0..8 {
                let x = Vector2::new(c as f64, r as f64);
                assert!(scene.occlusion_oracle(&src, &tgt, x, gt.depth[r * 8 + c]).unwrap());
            }
        }
    }

    #[test]
    fn near_plane_blocks_far_plane() {
        let scene = two_planes(&TwoPlanesConfig::default()).unwrap();
        let (src, tgt) = (&scene.views[0].camera, &scene.views[2].camera);
        let gt = scene.trace_view(src, &train_light(0));
        let (mut blocked, mut visible) = (0, 0);
        for r in 0..64 {
            for c in 0..64 {
                let x = Vector2::new(c as f64, r as f64);
                let d = gt.depth[r * 64 + c];
                let seen = scene.occlusion_oracle(src, tgt, x, d).unwrap();
                // Analytic check: the first hit from the target centre is the point itself.
                let p = src.backproject(x, d).unwrap();
                let dir = (p - tgt.center()).normalize();
                let first = scene.trace_ray(&tgt.center(), &dir).unwrap();
                assert_eq!(seen, (first.point - p).norm() < 1e-6);
                if seen { visible += 1 } else { blocked += 1 }
            }
        }
        assert!(blocked > 50 && visible > 2000, "blocked {blocked}, visible {visible}");
    }

    #[test]
    fn oracle_is_symmetric_for_mutual_visibility() {
        let scene = two_planes(&TwoPlanesConfig::default()).unwrap();
        let (a, b) = (&scene.views[0].camera, &scene.views[1].camera);
        let ga = scene.trace_view(a, &train_light(0));
        for r in (0..64).step_by(3) {
            for c in (0..64).step_by(3) {
                let x = Vector2::new(c as f64, r as f64);
                let d = ga.depth[r * 64 + c];
                let t = a.transfer(b, x, d).unwrap();
                if !t.in_bounds || !scene.occlusion_oracle(a, b, x, d).unwrap() {
                    continue;
                }
                let back = scene.trace_pixel(b, t.pixel).unwrap();
                let db = back.t * b.axis_cosine(t.pixel);
                assert!(scene.occlusion_oracle(b, a, t.pixel, db).unwrap());
            }
        }
    }

    #[test]
    fn cfg_round_trip() {
        let scene = two_planes(&TwoPlanesConfig::default()).unwrap();
        let views: Vec<ColmapView> = scene
            .views
            .iter()
            .map(|v| ColmapView { name: v.name.clone(), camera: v.camera.clone() })
            .collect();
        let train: Vec<String> = scene.train_views().map(|v| v.name.clone()).collect();
        let text = scene.to_cfg().to_text();
        let back = SyntheticScene::from_cfg(&KvFile::parse(&text, "scene.cfg").unwrap(), &views, &train).unwrap();
        assert_eq!(back.primitives.len(), 2);
        let cam = &scene.views[1].camera;
        assert_eq!(back.trace_view(cam, &train_light(1)).color, scene.trace_view(cam, &train_light(1)).color);
        assert_eq!(back.views.iter().filter(|v| v.train).count(), 3);
    }
}
