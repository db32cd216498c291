//! Reference surfaces: analytic parametric shapes and triangle meshes, with
//! exact point-to-surface distance and uniform area sampling.

use std::f64::consts::{PI, TAU};
use std::fmt;
use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};
use crate::geometry::{dist2, Point};

#[derive(Clone, Debug, PartialEq)]
pub struct TriangleMesh {
    pub vertices: Vec<Point>,
    pub faces: Vec<[usize; 3]>,
    /// Path the mesh was loaded from, echoed back in surface specs.
    pub source: Option<String>,
}

/// Minimum triangle area accepted for meshes.
pub const MIN_TRIANGLE_AREA: f64 = 1e-12;

fn sub(a: &Point, b: &Point) -> Point {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn cross(a: &Point, b: &Point) -> Point {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn dot(a: &Point, b: &Point) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn norm(a: &Point) -> f64 {
    dot(a, a).sqrt()
}

impl TriangleMesh {
    pub fn new(vertices: Vec<Point>, faces: Vec<[usize; 3]>) -> Result<Self> {
        let mesh = TriangleMesh {
            vertices,
            faces,
            source: None,
        };
        mesh.validate()?;
        Ok(mesh)
    }

    pub fn validate(&self) -> Result<()> {
        if self.faces.is_empty() {
            return Err(Error::Surface("mesh has no triangles".into()));
        }
        for (t, f) in self.faces.iter().enumerate() {
            if f.iter().any(|&i| i >= self.vertices.len()) {
                return Err(Error::Surface(format!("triangle {t} references a missing vertex")));
            }
            let area = self.area(t);
            if area.is_nan() || area <= MIN_TRIANGLE_AREA {
                return Err(Error::Surface(format!("triangle {t} is degenerate (area {area:e})")));
            }
        }
        Ok(())
    }

    fn corners(&self, t: usize) -> [Point; 3] {
        let f = self.faces[t];
        [self.vertices[f[0]], self.vertices[f[1]], self.vertices[f[2]]]
    }

    pub fn area(&self, t: usize) -> f64 {
        let [a, b, c] = self.corners(t);
        0.5 * norm(&cross(&sub(&b, &a), &sub(&c, &a)))
    }

    /// Exact distance from `p` to the closest point of any triangle.
    pub fn distance(&self, p: &Point) -> f64 {
        (0..self.faces.len())
            .map(|t| {
                let [a, b, c] = self.corners(t);
                dist2(p, &closest_point_on_triangle(p, &a, &b, &c))
            })
            .fold(f64::INFINITY, f64::min)
            .sqrt()
    }
}

/// Closest point to `p` on triangle `abc` (Voronoi-region case analysis).
pub fn closest_point_on_triangle(p: &Point, a: &Point, b: &Point, c: &Point) -> Point {
    let ab = sub(b, a);
    let ac = sub(c, a);
    let ap = sub(p, a);
    let d1 = dot(&ab, &ap);
    let d2 = dot(&ac, &ap);
    if d1 <= 0.0 && d2 <= 0.0 {
        return *a;
    }
    let bp = sub(p, b);
    let d3 = dot(&ab, &bp);
    let d4 = dot(&ac, &bp);
    if d3 >= 0.0 && d4 <= d3 {
        return *b;
    }
    let vc = d1 * d4 - d3 * d2;
    if vc <= 0.0 && d1 >= 0.0 && d3 <= 0.0 {
        let v = d1 / (d1 - d3);
        return [a[0] + v * ab[0], a[1] + v * ab[1], a[2] + v * ab[2]];
    }
    let cp = sub(p, c);
    let d5 = dot(&ab, &cp);
    let d6 = dot(&ac, &cp);
    if d6 >= 0.0 && d5 <= d6 {
        return *c;
    }
    let vb = d5 * d2 - d1 * d6;
    if vb <= 0.0 && d2 >= 0.0 && d6 <= 0.0 {
        let w = d2 / (d2 - d6);
        return [a[0] + w * ac[0], a[1] + w * ac[1], a[2] + w * ac[2]];
    }
    let va = d3 * d6 - d5 * d4;
    if va <= 0.0 && (d4 - d3) >= 0.0 && (d5 - d6) >= 0.0 {
        let w = (d4 - d3) / ((d4 - d3) + (d5 - d6));
        return [
            b[0] + w * (c[0] - b[0]),
            b[1] + w * (c[1] - b[1]),
            b[2] + w * (c[2] - b[2]),
        ];
    }
    let denom = 1.0 / (va + vb + vc);
    let v = vb * denom;
    let w = vc * denom;
    [
        a[0] + ab[0] * v + ac[0] * w,
        a[1] + ab[1] * v + ac[1] * w,
        a[2] + ab[2] * v + ac[2] * w,
    ]
}

/// Ground-truth surface for point-to-surface distances and data generation.
///
/// Parametric kinds are centred at the origin with the z axis as their axis
/// of symmetry (the sphere may be offset).
#[derive(Clone, Debug, PartialEq)]
pub enum SurfaceRef {
    Sphere { center: Point, radius: f64 },
    /// Ring of major radius `major` around z, tube radius `minor`.
    Torus { major: f64, minor: f64 },
    /// Open cylinder (no caps) of the given radius, `z ∈ [−height/2, height/2]`.
    Cylinder { radius: f64, height: f64 },
    /// `z = amplitude · sin(π·frequency·x) · sin(π·frequency·y)` over `[−1, 1]²`.
    HeightField { amplitude: f64, frequency: f64 },
    Mesh(TriangleMesh),
}

impl SurfaceRef {
    pub fn unit_sphere() -> Self {
        SurfaceRef::Sphere {
            center: [0.0; 3],
            radius: 1.0,
        }
    }

    /// Sphere, torus (R=1, ρ=0.4), cylinder and a sinusoidal height field.
    pub fn default_zoo() -> Vec<SurfaceRef> {
        vec![
            SurfaceRef::unit_sphere(),
            SurfaceRef::Torus {
                major: 1.0,
                minor: 0.4,
            },
            SurfaceRef::Cylinder {
                radius: 0.5,
                height: 2.0,
            },
            SurfaceRef::HeightField {
                amplitude: 0.25,
                frequency: 1.0,
            },
        ]
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::Surface(format!("{name} must be positive, got {v}")))
            }
        };
        match self {
            SurfaceRef::Sphere { center, radius } => {
                if center.iter().any(|v| !v.is_finite()) {
                    return Err(Error::Surface("sphere center must be finite".into()));
                }
                positive("sphere radius", *radius)
            }
            SurfaceRef::Torus { major, minor } => {
                positive("torus major radius", *major)?;
                positive("torus minor radius", *minor)?;
                if minor >= major {
                    return Err(Error::Surface("torus tube radius must be below the ring radius".into()));
                }
                Ok(())
            }
            SurfaceRef::Cylinder { radius, height } => {
                positive("cylinder radius", *radius)?;
                positive("cylinder height", *height)
            }
            SurfaceRef::HeightField {
                amplitude,
                frequency,
            } => {
                positive("height field amplitude", *amplitude)?;
                positive("height field frequency", *frequency)
            }
            SurfaceRef::Mesh(m) => m.validate(),
        }
    }

    /// Parses `sphere:R[,cx,cy,cz]`, `torus:R,r`, `cylinder:R,h`,
    /// `heightfield:A,f` or `mesh:<path.obj>` (relative paths resolve
    /// against `base`).
    pub fn parse(spec: &str, base: Option<&Path>) -> Result<Self> {
        let bad = |msg: String| Error::Parse { line: 1, msg };
        let (kind, args) = spec
            .split_once(':')
            .ok_or_else(|| bad(format!("surface spec {spec:?} lacks ':'")))?;
        if kind == "mesh" {
            let path = Path::new(args);
            let full = match base {
                Some(b) if path.is_relative() => b.join(path),
                _ => path.to_path_buf(),
            };
            let mut mesh = crate::data::read_obj(&full)?;
            mesh.source = Some(args.to_string());
            return Ok(SurfaceRef::Mesh(mesh));
        }
        let nums = args
            .split(',')
            .map(|a| {
                a.trim()
                    .parse::<f64>()
                    .map_err(|_| bad(format!("bad number {a:?} in surface spec")))
            })
            .collect::<Result<Vec<f64>>>()?;
        let surf = match (kind, nums.as_slice()) {
            ("sphere", [r]) => SurfaceRef::Sphere {
                center: [0.0; 3],
                radius: *r,
            },
            ("sphere", [r, x, y, z]) => SurfaceRef::Sphere {
                center: [*x, *y, *z],
                radius: *r,
            },
            ("torus", [a, b]) => SurfaceRef::Torus {
                major: *a,
                minor: *b,
            },
            ("cylinder", [r, h]) => SurfaceRef::Cylinder {
                radius: *r,
                height: *h,
            },
            ("heightfield", [a, f]) => SurfaceRef::HeightField {
                amplitude: *a,
                frequency: *f,
            },
            _ => return Err(bad(format!("unknown surface spec {spec:?}"))),
        };
        surf.validate()?;
        Ok(surf)
    }

    /// Exact Euclidean distance from `p` to the surface.
    pub fn distance(&self, p: &Point) -> f64 {
        match self {
            SurfaceRef::Sphere { center, radius } => (dist2(p, center).sqrt() - radius).abs(),
            SurfaceRef::Torus { major, minor } => {
                let ring = (p[0] * p[0] + p[1] * p[1]).sqrt() - major;
                ((ring * ring + p[2] * p[2]).sqrt() - minor).abs()
            }
            SurfaceRef::Cylinder { radius, height } => {
                let radial = (p[0] * p[0] + p[1] * p[1]).sqrt() - radius;
                let over = (p[2].abs() - height / 2.0).max(0.0);
                (radial * radial + over * over).sqrt()
            }
            SurfaceRef::HeightField {
                amplitude,
                frequency,
            } => height_field_distance(p, *amplitude, *frequency),
            SurfaceRef::Mesh(m) => m.distance(p),
        }
    }

    /// `n` points uniformly distributed by area.
    pub fn sample_uniform<R: Rng>(&self, n: usize, rng: &mut R) -> Vec<Point> {
        let mut out = Vec::with_capacity(n);
        match self {
            SurfaceRef::Sphere { center, radius } => {
                for _ in 0..n {
                    let z: f64 = rng.random_range(-1.0..1.0);
                    let phi: f64 = rng.random_range(0.0..TAU);
                    let r = (1.0 - z * z).max(0.0).sqrt();
                    out.push([
                        center[0] + radius * r * phi.cos(),
                        center[1] + radius * r * phi.sin(),
                        center[2] + radius * z,
                    ]);
                }
            }
            SurfaceRef::Torus { major, minor } => {
                // area element ∝ (R + ρ cos v); rejection on v
                while out.len() < n {
                    let u: f64 = rng.random_range(0.0..TAU);
                    let v: f64 = rng.random_range(0.0..TAU);
                    let accept: f64 = rng.random_range(0.0..1.0);
                    let ring = major + minor * v.cos();
                    if accept * (major + minor) <= ring {
                        out.push([ring * u.cos(), ring * u.sin(), minor * v.sin()]);
                    }
                }
            }
            SurfaceRef::Cylinder { radius, height } => {
                for _ in 0..n {
                    let t: f64 = rng.random_range(0.0..TAU);
                    let z: f64 = rng.random_range(-height / 2.0..height / 2.0);
                    out.push([radius * t.cos(), radius * t.sin(), z]);
                }
            }
            SurfaceRef::HeightField {
                amplitude,
                frequency,
            } => {
                let slope = amplitude * PI * frequency;
                let max_area = (1.0 + 2.0 * slope * slope).sqrt();
                while out.len() < n {
                    let x: f64 = rng.random_range(-1.0..1.0);
                    let y: f64 = rng.random_range(-1.0..1.0);
                    let accept: f64 = rng.random_range(0.0..1.0);
                    let (z, hx, hy) = height_field_eval(x, y, *amplitude, *frequency);
                    if accept * max_area <= (1.0 + hx * hx + hy * hy).sqrt() {
                        out.push([x, y, z]);
                    }
                }
            }
            SurfaceRef::Mesh(m) => {
                let mut cumulative = Vec::with_capacity(m.faces.len());
                let mut total = 0.0;
                for t in 0..m.faces.len() {
                    total += m.area(t);
                    cumulative.push(total);
                }
                for _ in 0..n {
                    let pick: f64 = rng.random_range(0.0..total);
                    let t = cumulative.partition_point(|&c| c <= pick).min(m.faces.len() - 1);
                    let [a, b, c] = m.corners(t);
                    let r1: f64 = rng.random_range(0.0f64..1.0).sqrt();
                    let r2: f64 = rng.random_range(0.0..1.0);
                    let (wa, wb, wc) = (1.0 - r1, r1 * (1.0 - r2), r1 * r2);
                    out.push([
                        wa * a[0] + wb * b[0] + wc * c[0],
                        wa * a[1] + wb * b[1] + wc * c[1],
                        wa * a[2] + wb * b[2] + wc * c[2],
                    ]);
                }
            }
        }
        out
    }
}

impl fmt::Display for SurfaceRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SurfaceRef::Sphere { center, radius } if *center == [0.0; 3] => write!(f, "sphere:{radius}"),
            SurfaceRef::Sphere { center, radius } => {
                write!(f, "sphere:{radius},{},{},{}", center[0], center[1], center[2])
            }
            SurfaceRef::Torus { major, minor } => write!(f, "torus:{major},{minor}"),
            SurfaceRef::Cylinder { radius, height } => write!(f, "cylinder:{radius},{height}"),
            SurfaceRef::HeightField {
                amplitude,
                frequency,
            } => write!(f, "heightfield:{amplitude},{frequency}"),
            SurfaceRef::Mesh(m) => write!(f, "mesh:{}", m.source.as_deref().unwrap_or("<memory>")),
        }
    }
}

/// Height and gradient of the sinusoidal field at `(x, y)`.
fn height_field_eval(x: f64, y: f64, amplitude: f64, frequency: f64) -> (f64, f64, f64) {
    let w = PI * frequency;
    let (sx, cx) = (w * x).sin_cos();
    let (sy, cy) = (w * y).sin_cos();
    (amplitude * sx * sy, amplitude * w * cx * sy, amplitude * w * sx * cy)
}

/// Distance to the height field: coarse grid search over the parameter
/// square, then projected Newton refinement of the best candidates.
fn height_field_distance(p: &Point, amplitude: f64, frequency: f64) -> f64 {
    const GRID: usize = 48;
    let w = PI * frequency;
    let sq = |u: f64, v: f64| {
        let (z, _, _) = height_field_eval(u, v, amplitude, frequency);
        (u - p[0]).powi(2) + (v - p[1]).powi(2) + (z - p[2]).powi(2)
    };
    let mut seeds: Vec<(f64, f64, f64)> = Vec::with_capacity((GRID + 1) * (GRID + 1));
    for i in 0..=GRID {
        for j in 0..=GRID {
            let u = -1.0 + 2.0 * i as f64 / GRID as f64;
            let v = -1.0 + 2.0 * j as f64 / GRID as f64;
            seeds.push((sq(u, v), u, v));
        }
    }
    seeds.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut best = seeds[0].0;
    for &(_, mut u, mut v) in seeds.iter().take(16) {
        for _ in 0..200 {
            let (sx, cx) = (w * u).sin_cos();
            let (sy, cy) = (w * v).sin_cos();
            let z = amplitude * sx * sy;
            let hu = amplitude * w * cx * sy;
            let hv = amplitude * w * sx * cy;
            let huu = -amplitude * w * w * sx * sy;
            let hvv = huu;
            let huv = amplitude * w * w * cx * cy;
            let r = z - p[2];
            // f = ½[(u−px)² + (v−py)² + r²]
            let gu = (u - p[0]) + r * hu;
            let gv = (v - p[1]) + r * hv;
            let a = 1.0 + hu * hu + r * huu;
            let b = hu * hv + r * huv;
            let c = 1.0 + hv * hv + r * hvv;
            let det = a * c - b * b;
            // Coordinates pinned at the boundary with the gradient pointing outward stay fixed.
            let pin_u = (u <= -1.0 && gu > 0.0) || (u >= 1.0 && gu < 0.0);
            let pin_v = (v <= -1.0 && gv > 0.0) || (v >= 1.0 && gv < 0.0);
            let newton1 = |g: f64, h: f64| if h > 0.0 { g / h } else { g };
            let (du, dv) = match (pin_u, pin_v) {
                (true, true) => break,
                (true, false) => (0.0, newton1(gv, c)),
                (false, true) => (newton1(gu, a), 0.0),
                _ if a > 0.0 && det > 0.0 => ((c * gu - b * gv) / det, (a * gv - b * gu) / det),
                _ => (gu, gv),
            };
            let current = sq(u, v);
            let mut step = 1.0;
            let mut moved = false;
            for _ in 0..30 {
                let nu = (u - step * du).clamp(-1.0, 1.0);
                let nv = (v - step * dv).clamp(-1.0, 1.0);
                if sq(nu, nv) <= current {
                    moved = (nu - u).abs() + (nv - v).abs() > 1e-15;
                    u = nu;
                    v = nv;
                    break;
                }
                step *= 0.5;
            }
            if !moved {
                break;
            }
        }
        best = best.min(sq(u, v));
    }
    best.sqrt()
}
