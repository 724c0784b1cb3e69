//! Front-to-back volume ray marching through the `[-1, 1]^3` box, either by
//! evaluating the network at every sample or by trilinear lookup in a grid.
//!
//! Rays of one image row advance together: at each step every active ray's
//! sample position is evaluated as a batch, then composited.

use std::fs;
use std::io::Write;
use std::path::Path;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::field_net::{Evaluator, Tape};
use crate::quantizer::{dequantize_model, QuantizedModel};
use crate::volume::{ValueRange, Volume};

/// Step length at which transfer-function opacities are defined.
pub const REFERENCE_STEP: f64 = 0.01;
/// Rays stop once accumulated opacity exceeds this.
pub const TERMINATION_ALPHA: f64 = 0.99;

type Vec3 = [f64; 3];

fn sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn cross(a: Vec3, b: Vec3) -> Vec3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn scale(a: Vec3, s: f64) -> Vec3 {
    [a[0] * s, a[1] * s, a[2] * s]
}

fn norm(a: Vec3) -> f64 {
    dot(a, a).sqrt()
}

fn normalize(a: Vec3) -> Vec3 {
    scale(a, 1.0 / norm(a))
}

/// Pinhole camera in normalized volume coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct Camera {
    pub eye: Vec3,
    pub look_at: Vec3,
    pub up: Vec3,
    /// Vertical field of view in degrees.
    pub fov_deg: f64,
    pub width: usize,
    pub height: usize,
}

impl Default for Camera {
    fn default() -> Self {
        Camera {
            eye: [2.2, 1.6, 2.6],
            look_at: [0.0, 0.0, 0.0],
            up: [0.0, 1.0, 0.0],
            fov_deg: 50.0,
            width: 256,
            height: 256,
        }
    }
}

struct Basis {
    forward: Vec3,
    right: Vec3,
    up: Vec3,
    tan_half: f64,
    aspect: f64,
}

impl Camera {
    pub fn validate(&self) -> Result<()> {
        let view = sub(self.look_at, self.eye);
        if self.width == 0 || self.height == 0 {
            return Err(Error::Config("image size must be at least 1x1".into()));
        }
        if !(self.fov_deg > 0.0 && self.fov_deg < 180.0) {
            return Err(Error::Config(format!("fov must be in (0, 180), got {}", self.fov_deg)));
        }
        if norm(view) < 1e-12 {
            return Err(Error::Config("camera eye coincides with look_at".into()));
        }
        if norm(cross(normalize(view), self.up)) < 1e-9 {
            return Err(Error::Config("camera up vector is parallel to the view direction".into()));
        }
        Ok(())
    }

    fn basis(&self) -> Basis {
        let forward = normalize(sub(self.look_at, self.eye));
        let right = normalize(cross(forward, self.up));
        let up = cross(right, forward);
        Basis {
            forward,
            right,
            up,
            tan_half: (self.fov_deg.to_radians() * 0.5).tan(),
            aspect: self.width as f64 / self.height as f64,
        }
    }

    /// Unit direction through screen position `(sx, sy)` in `[-1, 1]^2`
    /// (`sy = 1` is the top edge).
    pub fn direction(&self, sx: f64, sy: f64) -> Vec3 {
        let b = self.basis();
        let u = sx * b.tan_half * b.aspect;
        let v = sy * b.tan_half;
        normalize([
            b.forward[0] + u * b.right[0] + v * b.up[0],
            b.forward[1] + u * b.right[1] + v * b.up[1],
            b.forward[2] + u * b.right[2] + v * b.up[2],
        ])
    }

    /// Direction through the center of pixel `(px, py)`; row 0 is the top.
    pub fn pixel_direction(&self, px: usize, py: usize) -> Vec3 {
        let sx = 2.0 * (px as f64 + 0.5) / self.width as f64 - 1.0;
        let sy = 1.0 - 2.0 * (py as f64 + 0.5) / self.height as f64;
        self.direction(sx, sy)
    }
}

/// Piecewise-linear map from `[0, 1]` to RGBA.
#[derive(Clone, Debug, PartialEq)]
pub struct TransferFunction {
    points: Vec<(f64, [f64; 4])>,
}

impl TransferFunction {
    pub fn new(points: Vec<(f64, [f64; 4])>) -> Result<Self> {
        if points.len() < 2 {
            return Err(Error::Config("transfer function needs at least two points".into()));
        }
        if points[0].0 != 0.0 || points[points.len() - 1].0 != 1.0 {
            return Err(Error::Config("transfer function must span positions 0 to 1".into()));
        }
        if points.windows(2).any(|w| !(w[0].0 < w[1].0)) {
            return Err(Error::Config("transfer function positions must strictly increase".into()));
        }
        if points.iter().any(|(_, c)| c.iter().any(|v| !(0.0..=1.0).contains(v))) {
            return Err(Error::Config("transfer function RGBA must lie in [0, 1]".into()));
        }
        Ok(TransferFunction { points })
    }

    /// Parses `position r g b a` lines; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut points = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let nums: Vec<f64> = line
                .split_whitespace()
                .map(str::parse)
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::Config(format!("transfer function line {}: {e}", n + 1)))?;
            let [p, r, g, b, a] = nums[..] else {
                return Err(Error::Config(format!(
                    "transfer function line {}: expected 5 numbers, got {}",
                    n + 1,
                    nums.len()
                )));
            };
            points.push((p, [r, g, b, a]));
        }
        TransferFunction::new(points)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        TransferFunction::parse(&text)
    }

    /// Blue-to-orange ramp with opacity increasing with value.
    pub fn default_ramp() -> Self {
        TransferFunction::new(vec![
            (0.0, [0.05, 0.1, 0.6, 0.0]),
            (0.35, [0.1, 0.5, 0.9, 0.02]),
            (0.65, [0.9, 0.9, 0.3, 0.08]),
            (1.0, [1.0, 0.4, 0.1, 0.3]),
        ])
        .expect("valid ramp")
    }

    pub fn lookup(&self, s: f64) -> [f64; 4] {
        let s = s.clamp(0.0, 1.0);
        let i = self.points.partition_point(|(p, _)| *p <= s);
        if i == 0 {
            return self.points[0].1;
        }
        if i == self.points.len() {
            return self.points[i - 1].1;
        }
        let (p0, c0) = self.points[i - 1];
        let (p1, c1) = self.points[i];
        let t = (s - p0) / (p1 - p0);
        std::array::from_fn(|c| c0[c] + (c1[c] - c0[c]) * t)
    }
}

/// 8-bit RGB image, rows top to bottom.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<[u8; 3]>,
}

impl Image {
    pub fn from_radiance(width: usize, height: usize, radiance: &[Vec3]) -> Self {
        let to_u8 = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
        Image {
            width,
            height,
            pixels: radiance
                .iter()
                .map(|c| [to_u8(c[0]), to_u8(c[1]), to_u8(c[2])])
                .collect(),
        }
    }
}

/// Binary PPM (`P6`).
pub fn write_ppm(img: &Image, mut out: impl Write) -> std::io::Result<()> {
    write!(out, "P6\n{} {}\n255\n", img.width, img.height)?;
    let bytes: Vec<u8> = img.pixels.iter().flatten().copied().collect();
    out.write_all(&bytes)?;
    out.flush()
}

pub fn write_image(img: &Image, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_ppm(img, std::io::BufWriter::new(file)).map_err(|e| Error::io(path, e))
}

/// Reads a binary PPM as written by [`write_ppm`].
pub fn read_ppm(bytes: &[u8]) -> Result<Image> {
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::format(pos, "truncated PPM header"));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    pos += 1;
    if fields[0] != "P6" || fields[3] != "255" {
        return Err(Error::format(0, "not an 8-bit P6 image"));
    }
    let parse = |s: &str| s.parse::<usize>().map_err(|_| Error::format(0, format!("bad PPM size {s:?}")));
    let (width, height) = (parse(&fields[1])?, parse(&fields[2])?);
    let data = bytes.get(pos..).unwrap_or_default();
    if data.len() != width * height * 3 {
        return Err(Error::format(pos, "PPM payload size mismatch"));
    }
    Ok(Image {
        width,
        height,
        pixels: data.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect(),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct MarchOptions {
    pub step: f64,
    /// Lambertian plus Blinn-Phong shading from analytic gradients.
    pub shaded: bool,
    /// Fourth network input for time-varying models.
    pub time: Option<f64>,
    /// Keep every ray's accumulated-opacity trajectory.
    pub record_alpha: bool,
}

impl Default for MarchOptions {
    fn default() -> Self {
        MarchOptions {
            step: 0.005,
            shaded: false,
            time: None,
            record_alpha: false,
        }
    }
}

/// Rendered image plus the unquantized per-pixel radiance.
#[derive(Clone, Debug)]
pub struct Render {
    pub image: Image,
    pub radiance: Vec<Vec3>,
    pub alpha_traces: Option<Vec<Vec<f64>>>,
}

/// One scalar-field sample: transfer-function coordinate and, when
/// requested, the field gradient.
struct FieldSample {
    s: f64,
    grad: Option<Vec3>,
}

trait Field: Sync {
    /// Evaluates a batch of positions inside the box.
    fn sample(&self, points: &[Vec3], with_grad: bool, out: &mut Vec<FieldSample>);
}

struct NeuralField {
    eval: Evaluator,
    time: Option<f64>,
}

impl Field for NeuralField {
    fn sample(&self, points: &[Vec3], with_grad: bool, out: &mut Vec<FieldSample>) {
        out.clear();
        let mut x = [0.0; 4];
        let d = if self.time.is_some() { 4 } else { 3 };
        x[3] = self.time.unwrap_or(0.0);
        let mut tape = with_grad.then(|| Tape::new(self.eval.arch()));
        for p in points {
            x[..3].copy_from_slice(p);
            // (y + 1) / 2 equals (v - vmin) / (vmax - vmin) for v = denormalize(y).
            let sample = match tape.as_mut() {
                Some(tape) => {
                    let (y, g) = self.eval.value_and_gradient(&x[..d], tape);
                    FieldSample {
                        s: 0.5 * (y + 1.0),
                        grad: Some([g[0], g[1], g[2]]),
                    }
                }
                None => FieldSample {
                    s: 0.5 * (self.eval.forward(&x[..d]) + 1.0),
                    grad: None,
                },
            };
            out.push(sample);
        }
    }
}

struct GridField<'a> {
    volume: &'a Volume,
    range: ValueRange,
}

impl Field for GridField<'_> {
    fn sample(&self, points: &[Vec3], _with_grad: bool, out: &mut Vec<FieldSample>) {
        out.clear();
        let span = self.range.span();
        for p in points {
            let v = self.volume.sample_trilinear(*p).unwrap_or(self.range.vmin as f64);
            let s = if span > 0.0 { (v - self.range.vmin as f64) / span } else { 0.0 };
            out.push(FieldSample { s, grad: None });
        }
    }
}

/// Ray parameter interval inside `[-1, 1]^3`, clipped to `t >= 0`.
fn box_interval(origin: Vec3, dir: Vec3) -> Option<(f64, f64)> {
    let (mut t0, mut t1) = (0.0f64, f64::INFINITY);
    for j in 0..3 {
        if dir[j].abs() < 1e-15 {
            if origin[j].abs() > 1.0 {
                return None;
            }
            continue;
        }
        let a = (-1.0 - origin[j]) / dir[j];
        let b = (1.0 - origin[j]) / dir[j];
        t0 = t0.max(a.min(b));
        t1 = t1.min(a.max(b));
    }
    (t0 < t1).then_some((t0, t1))
}

/// Opacity of one step of length `step` for a transfer-function opacity
/// defined at [`REFERENCE_STEP`].
pub fn corrected_alpha(alpha_tf: f64, step: f64) -> f64 {
    1.0 - (1.0 - alpha_tf).powf(step / REFERENCE_STEP)
}

/// Front-to-back "over" accumulation of one sample.
pub fn composite(color: &mut Vec3, alpha: &mut f64, rgb: Vec3, sample_alpha: f64) {
    let w = (1.0 - *alpha) * sample_alpha;
    for c in 0..3 {
        color[c] += w * rgb[c];
    }
    *alpha += w;
}

fn shade(rgb: Vec3, grad: Vec3, view: Vec3) -> Vec3 {
    const AMBIENT: f64 = 0.3;
    const DIFFUSE: f64 = 0.7;
    const SPECULAR: f64 = 0.3;
    const SHININESS: i32 = 32;
    let len = norm(grad);
    if len < 1e-8 {
        return rgb;
    }
    let normal = scale(grad, -1.0 / len);
    // Headlight: light and viewer both sit along -view, so the half vector is the light.
    let light = scale(view, -1.0);
    let diffuse = dot(normal, light).max(0.0);
    let specular = diffuse.powi(SHININESS);
    std::array::from_fn(|c| rgb[c] * (AMBIENT + DIFFUSE * diffuse) + SPECULAR * specular)
}

struct RayState {
    pixel: usize,
    dir: Vec3,
    t: f64,
    t_end: f64,
    color: Vec3,
    alpha: f64,
    trace: Vec<f64>,
}

fn march<F: Field>(field: &F, cam: &Camera, tf: &TransferFunction, opts: &MarchOptions) -> Result<Render> {
    cam.validate()?;
    if !(opts.step > 0.0) || !opts.step.is_finite() {
        return Err(Error::Config(format!("step must be > 0, got {}", opts.step)));
    }
    let (w, h) = (cam.width, cam.height);
    let step = opts.step;
    let rows: Vec<Vec<RayState>> = (0..h)
        .into_par_iter()
        .map(|py| {
            let mut rays: Vec<RayState> = (0..w)
                .map(|px| {
                    let dir = cam.pixel_direction(px, py);
                    let (t, t_end) = box_interval(cam.eye, dir).unwrap_or((0.0, 0.0));
                    RayState {
                        pixel: px,
                        dir,
                        // First sample half a step inside the box.
                        t: t + 0.5 * step,
                        t_end,
                        color: [0.0; 3],
                        alpha: 0.0,
                        trace: Vec::new(),
                    }
                })
                .collect();
            let mut active: Vec<usize> = (0..w).filter(|&i| rays[i].t < rays[i].t_end).collect();
            let mut points = Vec::with_capacity(w);
            let mut samples = Vec::with_capacity(w);
            while !active.is_empty() {
                points.clear();
                points.extend(active.iter().map(|&i| {
                    let r = &rays[i];
                    std::array::from_fn(|c| cam.eye[c] + r.t * r.dir[c])
                }));
                field.sample(&points, opts.shaded, &mut samples);
                for (&i, sample) in active.iter().zip(&samples) {
                    let r = &mut rays[i];
                    let rgba = tf.lookup(sample.s);
                    let mut rgb = [rgba[0], rgba[1], rgba[2]];
                    if let Some(g) = sample.grad {
                        rgb = shade(rgb, g, r.dir);
                    }
                    composite(&mut r.color, &mut r.alpha, rgb, corrected_alpha(rgba[3], step));
                    if opts.record_alpha {
                        r.trace.push(r.alpha);
                    }
                    r.t += step;
                }
                active.retain(|&i| rays[i].t < rays[i].t_end && rays[i].alpha <= TERMINATION_ALPHA);
            }
            rays
        })
        .collect();
    let mut radiance = Vec::with_capacity(w * h);
    let mut traces = opts.record_alpha.then(Vec::new);
    for row in rows {
        for r in row {
            debug_assert_eq!(r.pixel, radiance.len() % w);
            radiance.push(r.color);
            if let Some(t) = traces.as_mut() {
                t.push(r.trace);
            }
        }
    }
    Ok(Render {
        image: Image::from_radiance(w, h, &radiance),
        radiance,
        alpha_traces: traces,
    })
}

/// Renders by evaluating the decoded network at every ray sample.
pub fn raymarch_neural_detailed(
    qm: &QuantizedModel,
    cam: &Camera,
    tf: &TransferFunction,
    opts: &MarchOptions,
) -> Result<Render> {
    match (qm.arch.d, opts.time) {
        (3, Some(_)) => return Err(Error::Config("time given for a 3D model".into())),
        (4, None) => return Err(Error::Config("a 4D model needs a time value".into())),
        _ => {}
    }
    if let Some(t) = opts.time {
        if !(-1.0..=1.0).contains(&t) {
            return Err(Error::Config(format!("time must lie in [-1, 1], got {t}")));
        }
    }
    let field = NeuralField {
        eval: Evaluator::new(&dequantize_model(qm)?),
        time: opts.time,
    };
    march(&field, cam, tf, opts)
}

pub fn raymarch_neural(
    qm: &QuantizedModel,
    cam: &Camera,
    tf: &TransferFunction,
    step: f64,
    shaded: bool,
    time: Option<f64>,
) -> Result<Image> {
    let opts = MarchOptions {
        step,
        shaded,
        time,
        record_alpha: false,
    };
    Ok(raymarch_neural_detailed(qm, cam, tf, &opts)?.image)
}

/// Renders a 3D grid with trilinear lookup, mapping values through `range`.
pub fn raymarch_grid_detailed(
    volume: &Volume,
    range: ValueRange,
    cam: &Camera,
    tf: &TransferFunction,
    opts: &MarchOptions,
) -> Result<Render> {
    if volume.dims() != 3 {
        return Err(Error::Config("grid ray marching needs a 3D volume".into()));
    }
    let plain = MarchOptions {
        shaded: false,
        time: None,
        ..opts.clone()
    };
    march(&GridField { volume, range }, cam, tf, &plain)
}

pub fn raymarch_grid(volume: &Volume, cam: &Camera, tf: &TransferFunction, step: f64) -> Result<Image> {
    let opts = MarchOptions {
        step,
        ..MarchOptions::default()
    };
    Ok(raymarch_grid_detailed(volume, volume.value_range(), cam, tf, &opts)?.image)
}
