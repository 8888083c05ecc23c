//! Differentiable point splatting.
//!
//! Points are moved into view space (`X_view = R·X + T`), projected to NDC,
//! splatted as discs of radius `r` (NDC units) and composited front to back:
//!
//! ```text
//! w_i = 1 − d_i² / r²
//! C   = Σ_i w_i · Π_{j<i} (1 − w_j) · A_i + Π_i (1 − w_i) · background
//! ```
//!
//! Geometry is fixed, so the image is linear in the colors `A` and the
//! backward pass only scatters weights back to the points.

use std::sync::Arc;

use rayon::prelude::*;

use crate::diff::{BackwardCtx, Real, Tape, Tensor, Var};
use crate::error::{Error, Result};

pub type Mat3 = [[f64; 3]; 3];
pub type Vec3 = [f64; 3];

/// Points at or behind this view-space depth are culled.
pub const CULL_Z: f64 = 1e-9;

fn sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn cross(a: Vec3, b: Vec3) -> Vec3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn dot3(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn normalize(a: Vec3) -> Vec3 {
    let n = dot3(a, a).sqrt();
    [a[0] / n, a[1] / n, a[2] / n]
}

pub fn mat_vec(m: &Mat3, v: Vec3) -> Vec3 {
    [dot3(m[0], v), dot3(m[1], v), dot3(m[2], v)]
}

/// Sine and cosine of an angle in degrees, exact at multiples of 90°.
fn sin_cos_deg(deg: f64) -> (f64, f64) {
    let r = deg.rem_euclid(360.0);
    if r == 0.0 {
        (0.0, 1.0)
    } else if r == 90.0 {
        (1.0, 0.0)
    } else if r == 180.0 {
        (0.0, -1.0)
    } else if r == 270.0 {
        (-1.0, 0.0)
    } else {
        r.to_radians().sin_cos()
    }
}

/// Tangent of an angle in degrees, exact at multiples of 45°.
pub fn tan_deg(deg: f64) -> f64 {
    let r = deg.rem_euclid(180.0);
    if r == 0.0 {
        0.0
    } else if r == 45.0 {
        1.0
    } else if r == 135.0 {
        -1.0
    } else {
        r.to_radians().tan()
    }
}

/// Camera on a sphere of radius `distance` about the origin, looking at it.
///
/// Azimuth turns about world +Y starting from +Z; elevation is measured from
/// the XZ plane (degrees). Up is +Y, or +Z when looking straight down or up.
/// The origin lands at view-space `(0, 0, distance)`.
pub fn look_at(distance: f64, elevation: f64, azimuth: f64) -> (Mat3, Vec3) {
    let (se, ce) = sin_cos_deg(elevation);
    let (sa, ca) = sin_cos_deg(azimuth);
    let eye = [distance * ce * sa, distance * se, distance * ce * ca];
    let up = if ce.abs() < 1e-12 {
        [0.0, 0.0, 1.0]
    } else {
        [0.0, 1.0, 0.0]
    };
    let z = normalize(sub([0.0; 3], eye));
    let x = normalize(cross(up, z));
    let y = cross(z, x);
    let r = [x, y, z];
    let re = mat_vec(&r, eye);
    (r, [-re[0], -re[1], -re[2]])
}

/// Extrinsics and frustum. `fov` is the vertical field of view in degrees.
#[derive(Clone, Debug, PartialEq)]
pub struct Camera {
    pub r: Mat3,
    pub t: Vec3,
    pub fov: f64,
    pub near: f64,
    pub far: f64,
    /// Width over height.
    pub aspect: f64,
    pub width: usize,
    pub height: usize,
}

impl Camera {
    /// Camera for a view direction with the default frustum
    /// (`near = 0.1·d`, `far = 4·d`).
    pub fn orbit(view: View, distance: f64, fov: f64, width: usize, height: usize) -> Result<Self> {
        if !(distance > 0.0) {
            return Err(Error::Invalid(format!(
                "camera distance {distance} must be positive"
            )));
        }
        if !(fov > 0.0 && fov < 180.0) {
            return Err(Error::Invalid(format!("fov {fov} outside (0, 180)")));
        }
        if width == 0 || height == 0 {
            return Err(Error::Invalid("image size must be nonzero".into()));
        }
        let (r, t) = look_at(distance, view.elevation, view.azimuth);
        Ok(Camera {
            r,
            t,
            fov,
            near: 0.1 * distance,
            far: 4.0 * distance,
            aspect: width as f64 / height as f64,
            width,
            height,
        })
    }

    pub fn to_view(&self, p: Vec3) -> Vec3 {
        let v = mat_vec(&self.r, p);
        [v[0] + self.t[0], v[1] + self.t[1], v[2] + self.t[2]]
    }

    /// NDC position, or `None` when culled.
    pub fn project(&self, v: Vec3) -> Option<Vec3> {
        project(v, self.fov, self.aspect, self.near, self.far)
    }

    /// Position of the camera center in world space.
    pub fn center(&self) -> Vec3 {
        // R is orthonormal, so C = −Rᵀ·T.
        let mut c = [0.0; 3];
        for (i, ci) in c.iter_mut().enumerate() {
            *ci = -(0..3).map(|k| self.r[k][i] * self.t[k]).sum::<f64>();
        }
        c
    }
}

/// Perspective projection of a view-space point.
pub fn project(v: Vec3, fov: f64, aspect: f64, near: f64, far: f64) -> Option<Vec3> {
    let [x, y, z] = v;
    if z <= CULL_Z {
        return None;
    }
    let t = tan_deg(fov / 2.0);
    Some([
        x / (z * t * aspect),
        y / (z * t),
        far * (z - near) / (z * (far - near)),
    ])
}

/// NDC to pixel coordinates; pixel `(i, j)` has its center at `(i, j)`.
/// NDC `x = +1` is the left image edge.
pub fn viewport(ndc_x: f64, ndc_y: f64, width: usize, height: usize) -> (f64, f64) {
    (
        (1.0 - ndc_x) * width as f64 / 2.0 - 0.5,
        (1.0 - ndc_y) * height as f64 / 2.0 - 0.5,
    )
}

/// NDC position of the center of pixel `(i, j)`.
pub fn pixel_ndc(i: usize, j: usize, width: usize, height: usize) -> (f64, f64) {
    (
        1.0 - 2.0 * (i as f64 + 0.5) / width as f64,
        1.0 - 2.0 * (j as f64 + 0.5) / height as f64,
    )
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RasterSettings {
    /// Splat radius in NDC units.
    pub radius: f64,
    /// Fragments kept per pixel.
    pub k: usize,
    pub background: [f64; 3],
}

impl RasterSettings {
    /// Radius of 1.5 pixels, 10 fragments, white background.
    pub fn for_size(width: usize, height: usize) -> Self {
        RasterSettings {
            radius: 2.0 / width.min(height) as f64 * 1.5,
            k: 10,
            background: [1.0; 3],
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.radius > 0.0) || self.k == 0 {
            return Err(Error::Invalid(format!(
                "raster settings need r > 0 and K ≥ 1, got r = {}, K = {}",
                self.radius, self.k
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Fragment {
    pub point: u32,
    /// NDC distance from the splat center to the pixel center.
    pub dist: f64,
    /// NDC depth.
    pub depth: f64,
}

/// Per-pixel fragment lists, closest first, pixels in row-major order.
#[derive(Clone, Debug, PartialEq)]
pub struct FragmentBuffer {
    pub width: usize,
    pub height: usize,
    starts: Vec<usize>,
    frags: Vec<Fragment>,
}

impl FragmentBuffer {
    pub fn pixel(&self, i: usize, j: usize) -> &[Fragment] {
        let p = j * self.width + i;
        &self.frags[self.starts[p]..self.starts[p + 1]]
    }

    pub fn pixel_index(&self, p: usize) -> &[Fragment] {
        &self.frags[self.starts[p]..self.starts[p + 1]]
    }

    pub fn len(&self) -> usize {
        self.frags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frags.is_empty()
    }

    /// Builds a buffer from unsorted per-pixel candidates, keeping the `k`
    /// closest of each (ties by point row).
    pub fn from_candidates(
        width: usize,
        height: usize,
        k: usize,
        mut cand: Vec<(u32, Fragment)>,
    ) -> Self {
        cand.par_sort_unstable_by(|a, b| {
            a.0.cmp(&b.0)
                .then(a.1.depth.total_cmp(&b.1.depth))
                .then(a.1.point.cmp(&b.1.point))
        });
        let mut starts = Vec::with_capacity(width * height + 1);
        let mut frags = Vec::with_capacity(cand.len());
        let mut c = 0;
        for p in 0..(width * height) as u32 {
            starts.push(frags.len());
            let mut kept = 0;
            while c < cand.len() && cand[c].0 == p {
                if kept < k {
                    frags.push(cand[c].1);
                    kept += 1;
                }
                c += 1;
            }
        }
        starts.push(frags.len());
        FragmentBuffer {
            width,
            height,
            starts,
            frags,
        }
    }
}

/// Splat distance between a projected point and a pixel center, in NDC units.
#[inline]
pub fn splat_distance(px: f64, py: f64, nx: f64, ny: f64) -> f64 {
    ((px - nx) * (px - nx) + (py - ny) * (py - ny)).sqrt()
}

/// Per-pixel K-nearest-in-depth splats of `points` (world space).
pub fn rasterize(
    points: &[Vec3],
    cam: &Camera,
    settings: &RasterSettings,
) -> Result<FragmentBuffer> {
    settings.validate()?;
    let (w, h) = (cam.width, cam.height);
    let r = settings.radius;
    // Pixel half-extent of a splat, padded so the box never clips a disc.
    let (rx, ry) = (r * w as f64 / 2.0 + 1.0, r * h as f64 / 2.0 + 1.0);
    let cand: Vec<(u32, Fragment)> = points
        .par_iter()
        .enumerate()
        .flat_map_iter(|(idx, &p)| {
            let mut out = Vec::new();
            if let Some([nx, ny, nz]) = cam.project(cam.to_view(p)) {
                let (u, v) = viewport(nx, ny, w, h);
                let i0 = (u - rx).floor().max(0.0);
                let i1 = (u + rx).ceil().min(w as f64 - 1.0);
                let j0 = (v - ry).floor().max(0.0);
                let j1 = (v + ry).ceil().min(h as f64 - 1.0);
                if i0 <= i1 && j0 <= j1 {
                    for j in j0 as usize..=j1 as usize {
                        for i in i0 as usize..=i1 as usize {
                            let (px, py) = pixel_ndc(i, j, w, h);
                            let d = splat_distance(px, py, nx, ny);
                            if d < r {
                                out.push((
                                    (j * w + i) as u32,
                                    Fragment {
                                        point: idx as u32,
                                        dist: d,
                                        depth: nz,
                                    },
                                ));
                            }
                        }
                    }
                }
            }
            out.into_iter()
        })
        .collect();
    Ok(FragmentBuffer::from_candidates(w, h, settings.k, cand))
}

/// Blending coefficients for a fixed fragment buffer.
#[derive(Clone, Debug)]
pub struct CompositePlan {
    pub width: usize,
    pub height: usize,
    pub points: usize,
    starts: Vec<usize>,
    /// `(point, w_i · Π_{j<i}(1 − w_j))` per fragment.
    coeffs: Vec<(u32, f64)>,
    /// Residual transmittance times background, per pixel.
    base: Vec<[f64; 3]>,
}

impl CompositePlan {
    pub fn new(frags: &FragmentBuffer, points: usize, settings: &RasterSettings) -> Self {
        let n = frags.width * frags.height;
        let r2 = settings.radius * settings.radius;
        let mut starts = Vec::with_capacity(n + 1);
        let mut coeffs = Vec::with_capacity(frags.len());
        let mut base = Vec::with_capacity(n);
        for p in 0..n {
            starts.push(coeffs.len());
            let mut trans = 1.0;
            for f in frags.pixel_index(p) {
                let w = 1.0 - f.dist * f.dist / r2;
                coeffs.push((f.point, w * trans));
                trans *= 1.0 - w;
            }
            base.push(settings.background.map(|b| trans * b));
        }
        starts.push(coeffs.len());
        CompositePlan {
            width: frags.width,
            height: frags.height,
            points,
            starts,
            coeffs,
            base,
        }
    }

    pub fn pixel(&self, p: usize) -> &[(u32, f64)] {
        &self.coeffs[self.starts[p]..self.starts[p + 1]]
    }

    /// Image as a `(H·W) × 3` tensor from `N × 3` colors.
    pub fn forward<T: Real>(&self, colors: &Tensor<T>) -> Tensor<T> {
        assert_eq!(colors.shape(), (self.points, 3), "composite: color shape");
        let n = self.width * self.height;
        let mut out = vec![T::zero(); n * 3];
        out.par_chunks_mut(3).enumerate().for_each(|(p, px)| {
            let mut acc = self.base[p];
            for &(pt, c) in self.pixel(p) {
                let a = colors.row(pt as usize);
                for k in 0..3 {
                    acc[k] += c * a[k].f64();
                }
            }
            for k in 0..3 {
                px[k] = T::of(acc[k]);
            }
        });
        Tensor::from_vec(n, 3, out)
    }

    /// `∂L/∂A` from `∂L/∂C`; per-point sums run in pixel order.
    pub fn backward<T: Real>(&self, grad: &Tensor<T>) -> Tensor<T> {
        let mut g = vec![0.0f64; self.points * 3];
        for p in 0..self.width * self.height {
            let gp = grad.row(p);
            for &(pt, c) in self.pixel(p) {
                let dst = &mut g[pt as usize * 3..pt as usize * 3 + 3];
                for k in 0..3 {
                    dst[k] += c * gp[k].f64();
                }
            }
        }
        Tensor::from_vec(self.points, 3, g.into_iter().map(T::of).collect())
    }
}

/// Records compositing of `colors` (`N × 3`) under a fixed plan.
pub fn composite<T: Real>(tape: &mut Tape<T>, colors: Var, plan: Arc<CompositePlan>) -> Var {
    let out = plan.forward(tape.value(colors));
    tape.push_op(
        &[colors],
        out,
        Box::new(move |ctx: &BackwardCtx<T>| vec![Some(plan.backward(ctx.grad))]),
    )
}

/// Orbit direction in degrees.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct View {
    pub elevation: f64,
    pub azimuth: f64,
}

/// A set of views sharing distance, field of view and image size.
#[derive(Clone, Debug, PartialEq)]
pub struct Rig {
    pub views: Vec<View>,
    /// `None` fits the distance to the cloud.
    pub distance: Option<f64>,
    pub fov: f64,
    pub width: usize,
    pub height: usize,
}

impl Rig {
    pub fn new(views: Vec<View>, width: usize, height: usize) -> Self {
        Rig {
            views,
            distance: None,
            fov: 60.0,
            width,
            height,
        }
    }

    /// Six azimuths 60° apart at elevation 0° plus top and bottom views.
    pub fn training(size: usize) -> Self {
        let mut views: Vec<View> = (0..6)
            .map(|i| View {
                elevation: 0.0,
                azimuth: 60.0 * i as f64,
            })
            .collect();
        views.push(View {
            elevation: 90.0,
            azimuth: 0.0,
        });
        views.push(View {
            elevation: 270.0,
            azimuth: 0.0,
        });
        Rig::new(views, size, size)
    }

    /// Six azimuths from 30° spaced 60° at elevation 0°.
    pub fn test(size: usize) -> Self {
        Self::ring(
            0.0,
            &(0..6).map(|i| 30.0 + 60.0 * i as f64).collect::<Vec<_>>(),
            size,
        )
    }

    pub fn ring(elevation: f64, azimuths: &[f64], size: usize) -> Self {
        Rig::new(
            azimuths
                .iter()
                .map(|&azimuth| View { elevation, azimuth })
                .collect(),
            size,
            size,
        )
    }

    /// Parses `elev:az,az,...`.
    pub fn parse(spec: &str, size: usize) -> Result<Self> {
        let bad = || {
            Error::Invalid(format!(
                "rig spec {spec:?} is not of the form elev:az,az,..."
            ))
        };
        let (e, azs) = spec.split_once(':').ok_or_else(bad)?;
        let elevation: f64 = e.trim().parse().map_err(|_| bad())?;
        let azimuths = azs
            .split(',')
            .map(|a| a.trim().parse::<f64>().map_err(|_| bad()))
            .collect::<Result<Vec<_>>>()?;
        if azimuths.is_empty() {
            return Err(bad());
        }
        Ok(Self::ring(elevation, &azimuths, size))
    }

    pub fn cameras(&self, radius: f64) -> Result<Vec<Camera>> {
        if self.views.is_empty() {
            return Err(Error::Invalid("rig has no views".into()));
        }
        let d = self
            .distance
            .unwrap_or_else(|| fit_distance(radius, self.fov));
        self.views
            .iter()
            .map(|&v| Camera::orbit(v, d, self.fov, self.width, self.height))
            .collect()
    }
}

/// Distance at which a sphere of `radius` spans 90% of the vertical fov.
pub fn fit_distance(radius: f64, fov: f64) -> f64 {
    let radius = if radius > 0.0 { radius } else { 0.5 };
    radius / (0.45 * fov).to_radians().sin()
}

/// Integer voxel coordinates moved so their bounding-box center is the origin,
/// plus the radius of the enclosing sphere.
pub fn center_points(coords: &[[i32; 3]]) -> (Vec<Vec3>, f64) {
    if coords.is_empty() {
        return (Vec::new(), 0.0);
    }
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for c in coords {
        for k in 0..3 {
            lo[k] = lo[k].min(c[k] as f64);
            hi[k] = hi[k].max(c[k] as f64);
        }
    }
    let mid = [0, 1, 2].map(|k| 0.5 * (lo[k] + hi[k]));
    let pts: Vec<Vec3> = coords
        .iter()
        .map(|c| [0, 1, 2].map(|k| c[k] as f64 - mid[k]))
        .collect();
    let radius = pts.iter().map(|p| dot3(*p, *p)).fold(0.0, f64::max).sqrt();
    (pts, radius)
}

/// A cloud prepared for rendering from every view of a rig.
#[derive(Clone, Debug)]
pub struct RigPlans {
    pub cameras: Vec<Camera>,
    pub plans: Vec<Arc<CompositePlan>>,
}

impl RigPlans {
    pub fn build(coords: &[[i32; 3]], rig: &Rig, settings: Option<RasterSettings>) -> Result<Self> {
        let (pts, radius) = center_points(coords);
        let settings = settings.unwrap_or_else(|| RasterSettings::for_size(rig.width, rig.height));
        let cameras = rig.cameras(radius)?;
        let plans = cameras
            .iter()
            .map(|cam| {
                let frags = rasterize(&pts, cam, &settings)?;
                Ok(Arc::new(CompositePlan::new(&frags, pts.len(), &settings)))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(RigPlans { cameras, plans })
    }

    pub fn render(&self, colors: &Tensor) -> Vec<Image> {
        self.plans
            .par_iter()
            .map(|p| Image::from_tensor(p.width, p.height, &p.forward(colors)))
            .collect()
    }
}

/// RGB image with values nominally in `[0, 1]`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn filled(width: usize, height: usize, rgb: [f32; 3]) -> Self {
        Image {
            width,
            height,
            data: rgb
                .iter()
                .copied()
                .cycle()
                .take(width * height * 3)
                .collect(),
        }
    }

    pub fn from_tensor(width: usize, height: usize, t: &Tensor) -> Self {
        assert_eq!(t.shape(), (width * height, 3));
        Image {
            width,
            height,
            data: t.data().to_vec(),
        }
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_vec(self.width * self.height, 3, self.data.clone())
    }

    pub fn pixel(&self, i: usize, j: usize) -> [f32; 3] {
        let o = (j * self.width + i) * 3;
        [self.data[o], self.data[o + 1], self.data[o + 2]]
    }

    pub fn clamped(&self) -> Image {
        Image {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|v| v.clamp(0.0, 1.0)).collect(),
        }
    }
}

/// Renders `colors` (`N × 3`) at world positions `points` from one camera.
pub fn render(
    points: &[Vec3],
    colors: &Tensor,
    cam: &Camera,
    settings: &RasterSettings,
) -> Result<Image> {
    if colors.shape() != (points.len(), 3) {
        return Err(Error::Shape(format!(
            "{} points but colors of shape {:?}",
            points.len(),
            colors.shape()
        )));
    }
    let frags = rasterize(points, cam, settings)?;
    let plan = CompositePlan::new(&frags, points.len(), settings);
    Ok(Image::from_tensor(
        cam.width,
        cam.height,
        &plan.forward(colors),
    ))
}
