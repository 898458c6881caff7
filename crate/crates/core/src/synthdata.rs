//! Synthetic two-view cardiac phantom.
//!
//! Anatomy is a continuous model in millimetre world coordinates: a left
//! ventricular cavity (ellipsoid, class 1) wrapped in a concentric myocardial
//! shell (class 2), plus a right-ventricular crescent (class 3) hugging the
//! outer wall, built as a partial elliptic torus. Every boundary carries
//! smooth per-sample wobble along the long axis (random low harmonics on the
//! cavity cross-section and on the crescent's ring and tube radius), so a
//! corrupted stretch of boundary cannot be completed from the visible part
//! and population priors alone; the view that still sees it holds real
//! information. Both acquired views sample the continuous model directly, so
//! their label maps agree up to voxel discretisation:
//!
//! * `sa`: a short-axis stack of 8 slices, 64x64 at (8, 1.25, 1.25) mm. The
//!   end slices (apex and base) are independently corrupted with probability
//!   0.5 each: blurred, contrast-crushed and drowned in noise, which is the
//!   failure mode a second view is supposed to rescue.
//! * `la`: one long-axis plane, 64x64 at 1.25 mm, containing the tilted long
//!   axis of the ventricle, so it covers the apex and base regions the stack
//!   samples poorly. With probability 0.75 a horizontal band of the plane
//!   is degraded the same way the stack ends are, often swallowing the RV
//!   blob whole; the stack crosses the band, so it keeps what the band
//!   destroys.
//!
//! Images get per-sample tissue intensities, a smooth multiplicative bias
//! ramp within +-15% and additive Gaussian noise. Everything is drawn from a
//! name-keyed stream, so sample `i` of a dataset depends only on `(seed, i)`.

use std::fs;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rng::{Rng, RNG_ALGORITHM};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::tft::{self, path_str};

/// Short-axis grid: [through-plane, row, column].
pub const SA_SHAPE: [usize; 3] = [8, 64, 64];
/// Short-axis voxel spacing in mm.
pub const SA_SPACING_MM: [f64; 3] = [8.0, 1.25, 1.25];
/// Long-axis grid: [row, column].
pub const LA_SHAPE: [usize; 2] = [64, 64];
/// Long-axis pixel spacing in mm.
pub const LA_SPACING_MM: [f64; 2] = [1.25, 1.25];
/// Background, LV cavity, myocardium, RV.
pub const CLASSES: usize = 4;
pub const CLASS_NAMES: [&str; 4] = ["background", "lv", "myo", "rv"];

const DEG: f64 = std::f64::consts::PI / 180.0;

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn normalize(a: [f64; 3]) -> [f64; 3] {
    let n = dot(a, a).sqrt();
    [a[0] / n, a[1] / n, a[2] / n]
}

/// One drawn anatomy plus its acquisition artefacts. World coordinates are
/// (z, y, x) in mm with the short-axis stack spanning [0,64]x[0,80]x[0,80].
#[derive(Clone, Debug)]
pub struct Phantom {
    /// LV centre in mm.
    pub center: [f64; 3],
    /// Unit long-axis direction, tilted at most 20 degrees from z.
    pub axis: [f64; 3],
    /// In-plane frame; `e_u` points at the middle of the RV crescent.
    pub e_u: [f64; 3],
    pub e_v: [f64; 3],
    /// Cavity semi-axes (longitudinal, u, v) in mm.
    pub radii: [f64; 3],
    /// Myocardial shell thickness in mm.
    pub thickness: f64,
    /// RV crescent: centreline circle radius, tube radii, half arc, offset.
    pub rv_ring: f64,
    pub rv_tube_rho: f64,
    pub rv_tube_long: f64,
    pub rv_arc_half: f64,
    pub rv_t_offset: f64,
    /// Boundary wobble along the long axis: two harmonics (amp, phase) that
    /// scale the cavity cross-section, and (amp mm, phase) + (frac, phase)
    /// that sway the crescent ring and its tube radius. These make a hidden
    /// stretch of boundary unknowable from the visible part alone.
    pub lv_prof: [f64; 4],
    pub rv_ring_wobble: [f64; 2],
    pub rv_rho_wobble: [f64; 2],
    /// Long-axis plane azimuth around the long axis, relative to `e_u`.
    pub la_psi: f64,
    /// Tissue intensities: background, cavity, myocardium, RV.
    pub intensity: [f64; 4],
    /// Bias ramp direction (unit) and amplitude.
    pub bias_dir: [f64; 3],
    pub bias_amp: f64,
    /// Additive noise level.
    pub noise_sigma: f64,
    /// Whether the end slices of the stack get degraded.
    pub corrupt_apex: bool,
    pub corrupt_base: bool,
    /// Whether a horizontal band of the long-axis plane gets degraded, and
    /// its row extent. The stack crosses the band, so the other view keeps
    /// the information the band destroys.
    pub corrupt_la: bool,
    pub la_band_row: usize,
    pub la_band_rows: usize,
}

impl Phantom {
    /// Draws an anatomy. Field order below is the draw order; changing it
    /// changes every dataset, so treat it as part of the format.
    pub fn sample(rng: &mut Rng) -> Phantom {
        let center = [
            rng.range(26.0, 30.0),
            rng.range(37.0, 43.0),
            rng.range(37.0, 43.0),
        ];
        let tilt = rng.range(8.0, 20.0) * DEG;
        let azimuth = rng.range(0.0, std::f64::consts::TAU);
        let axis = [
            tilt.cos(),
            tilt.sin() * azimuth.cos(),
            tilt.sin() * azimuth.sin(),
        ];
        let helper = [0.0, 1.0, 0.0];
        let e_u0 = normalize([
            helper[0] - dot(helper, axis) * axis[0],
            helper[1] - dot(helper, axis) * axis[1],
            helper[2] - dot(helper, axis) * axis[2],
        ]);
        let e_v0 = cross(axis, e_u0);
        let rv_azimuth = rng.range(0.0, std::f64::consts::TAU);
        let (sa, ca) = rv_azimuth.sin_cos();
        let e_u = [
            ca * e_u0[0] + sa * e_v0[0],
            ca * e_u0[1] + sa * e_v0[1],
            ca * e_u0[2] + sa * e_v0[2],
        ];
        let e_v = [
            -sa * e_u0[0] + ca * e_v0[0],
            -sa * e_u0[1] + ca * e_v0[1],
            -sa * e_u0[2] + ca * e_v0[2],
        ];

        let radii = [
            rng.range(24.0, 29.0),
            rng.range(13.0, 16.0),
            rng.range(13.0, 16.0),
        ];
        let thickness = rng.range(5.0, 8.0);
        let rv_tube_rho = rng.range(4.0, 8.0);
        let rv_ring = (radii[1] + radii[2]) / 2.0 + thickness + 0.4 * rv_tube_rho;
        let rv_tube_long = rng.range(6.0, 14.0);
        let rv_arc_half = rng.range(70.0, 100.0) * DEG;
        let rv_t_offset = rng.range(-12.0, 12.0);
        let lv_prof = [
            rng.range(0.08, 0.18),
            rng.range(0.0, std::f64::consts::TAU),
            rng.range(0.04, 0.10),
            rng.range(0.0, std::f64::consts::TAU),
        ];
        let rv_ring_wobble = [rng.range(1.5, 3.5), rng.range(0.0, std::f64::consts::TAU)];
        let rv_rho_wobble = [rng.range(0.15, 0.30), rng.range(0.0, std::f64::consts::TAU)];
        let la_psi = rng.range(-25.0, 25.0) * DEG;

        let intensity = [
            0.15 + rng.range(-0.02, 0.02),
            0.85 + rng.range(-0.02, 0.02),
            0.45 + rng.range(-0.02, 0.02),
            rng.range(0.75, 0.85),
        ];
        let bias_dir = normalize([rng.normal(), rng.normal(), rng.normal()]);
        let bias_amp = rng.range(0.05, 0.15);
        let noise_sigma = rng.range(0.02, 0.08);
        let corrupt_apex = rng.flag(0.5);
        let corrupt_base = rng.flag(0.5);
        let corrupt_la = rng.flag(0.75);
        let la_band_row = rng.range(10.0, 28.0) as usize;
        let la_band_rows = rng.range(24.0, 32.0) as usize;

        Phantom {
            center,
            axis,
            e_u,
            e_v,
            radii,
            thickness,
            rv_ring,
            rv_tube_rho,
            rv_tube_long,
            rv_arc_half,
            rv_t_offset,
            lv_prof,
            rv_ring_wobble,
            rv_rho_wobble,
            la_psi,
            intensity,
            bias_dir,
            bias_amp,
            noise_sigma,
            corrupt_apex,
            corrupt_base,
            corrupt_la,
            la_band_row,
            la_band_rows,
        }
    }

    fn local(&self, p: [f64; 3]) -> (f64, f64, f64) {
        let d = [
            p[0] - self.center[0],
            p[1] - self.center[1],
            p[2] - self.center[2],
        ];
        (dot(d, self.axis), dot(d, self.e_u), dot(d, self.e_v))
    }

    /// Cross-section scale of the cavity at normalised height `s` in [-1,1].
    pub fn lv_profile(&self, s: f64) -> f64 {
        let s = s.clamp(-1.0, 1.0);
        let [a1, p1, a2, p2] = self.lv_prof;
        1.0 + a1 * (std::f64::consts::PI * s + p1).sin()
            + a2 * (2.0 * std::f64::consts::PI * s + p2).sin()
    }

    /// Class of a world point: cavity over shell over crescent.
    pub fn label_at(&self, p: [f64; 3]) -> u8 {
        let (t, u, v) = self.local(p);
        let q = |rl: f64, ru: f64, rv: f64| {
            let s = t / rl;
            let prof = self.lv_profile(s);
            s * s + ((u / ru).powi(2) + (v / rv).powi(2)) / (prof * prof)
        };
        if q(self.radii[0], self.radii[1], self.radii[2]) <= 1.0 {
            return 1;
        }
        let th = self.thickness;
        if q(self.radii[0] + th, self.radii[1] + th, self.radii[2] + th) <= 1.0 {
            return 2;
        }
        let rho = (u * u + v * v).sqrt();
        if rho > 1e-9 && v.atan2(u).abs() <= self.rv_arc_half {
            let b = (t - self.rv_t_offset) / self.rv_tube_long;
            let sb = std::f64::consts::PI * b.clamp(-1.0, 1.0);
            let ring = self.rv_ring + self.rv_ring_wobble[0] * (sb + self.rv_ring_wobble[1]).sin();
            let tube = self.rv_tube_rho
                * (1.0 + self.rv_rho_wobble[0] * (sb + self.rv_rho_wobble[1]).sin());
            let a = (rho - ring) / tube;
            if a * a + b * b <= 1.0 {
                return 3;
            }
        }
        0
    }

    fn bias_at(&self, p: [f64; 3]) -> f64 {
        let offset = [p[0] - 32.0, p[1] - 40.0, p[2] - 40.0];
        1.0 + self.bias_amp * dot(offset, self.bias_dir) / 70.0
    }

    /// Clean image value at a world point: tissue intensity times bias.
    pub fn intensity_at(&self, p: [f64; 3]) -> f64 {
        self.intensity[self.label_at(p) as usize] * self.bias_at(p)
    }

    /// Volume of one profiled ellipsoid: slices of area pi*ru*rv*(1-s^2)*prof^2.
    fn profiled_volume(&self, rl: f64, ru: f64, rv: f64) -> f64 {
        let n = 256;
        let h = 2.0 / n as f64;
        let mut acc = 0.0;
        for i in 0..n {
            let s = -1.0 + (i as f64 + 0.5) * h;
            let prof = self.lv_profile(s);
            acc += (1.0 - s * s) * prof * prof;
        }
        std::f64::consts::PI * ru * rv * rl * acc * h
    }

    /// Cavity volume in mm^3, integrating the boundary profile.
    pub fn cavity_volume_mm3(&self) -> f64 {
        self.profiled_volume(self.radii[0], self.radii[1], self.radii[2])
    }

    /// Shell volume in mm^3, integrating the boundary profile.
    pub fn myo_volume_mm3(&self) -> f64 {
        let th = self.thickness;
        let outer = self.profiled_volume(
            self.radii[0] + th,
            self.radii[1] + th,
            self.radii[2] + th,
        );
        outer - self.cavity_volume_mm3()
    }

    /// Long-axis tilt from the stack normal, in degrees.
    pub fn tilt_deg(&self) -> f64 {
        self.axis[0].clamp(-1.0, 1.0).acos() / DEG
    }

    /// World point of long-axis pixel (r, c); rows run along the long axis.
    pub fn la_point(&self, r: f64, c: f64) -> [f64; 3] {
        let (s, co) = self.la_psi.sin_cos();
        let w = [
            co * self.e_u[0] + s * self.e_v[0],
            co * self.e_u[1] + s * self.e_v[1],
            co * self.e_u[2] + s * self.e_v[2],
        ];
        let dr = (r + 0.5 - LA_SHAPE[0] as f64 / 2.0) * LA_SPACING_MM[0];
        let dc = (c + 0.5 - LA_SHAPE[1] as f64 / 2.0) * LA_SPACING_MM[1];
        [
            self.center[0] + dr * self.axis[0] + dc * w[0],
            self.center[1] + dr * self.axis[1] + dc * w[1],
            self.center[2] + dr * self.axis[2] + dc * w[2],
        ]
    }

    /// World point of short-axis voxel centre (k, j, i).
    pub fn sa_point(k: f64, j: f64, i: f64) -> [f64; 3] {
        [
            (k + 0.5) * SA_SPACING_MM[0],
            (j + 0.5) * SA_SPACING_MM[1],
            (i + 0.5) * SA_SPACING_MM[2],
        ]
    }

    /// Renders both views; consumes `rng` for noise and slice degradation.
    pub fn render<T: Scalar>(&self, rng: &mut Rng) -> SampleBundle<T> {
        let [sd, sh, sw] = SA_SHAPE;
        let mut sa_img = vec![0.0f64; sd * sh * sw];
        let mut sa_lab = vec![0u8; sd * sh * sw];
        for k in 0..sd {
            for j in 0..sh {
                for i in 0..sw {
                    let p = Self::sa_point(k as f64, j as f64, i as f64);
                    let o = (k * sh + j) * sw + i;
                    sa_lab[o] = self.label_at(p);
                    sa_img[o] = self.intensity_at(p);
                }
            }
        }
        for x in sa_img.iter_mut() {
            *x += self.noise_sigma * rng.normal();
        }
        if self.corrupt_apex {
            degrade_slice(&mut sa_img[..sh * sw], sh, sw, rng);
        }
        if self.corrupt_base {
            let lo = (sd - 1) * sh * sw;
            degrade_slice(&mut sa_img[lo..], sh, sw, rng);
        }

        let [lh, lw] = LA_SHAPE;
        let mut la_img = vec![0.0f64; lh * lw];
        let mut la_lab = vec![0u8; lh * lw];
        for r in 0..lh {
            for c in 0..lw {
                let p = self.la_point(r as f64, c as f64);
                la_lab[r * lw + c] = self.label_at(p);
                la_img[r * lw + c] = self.intensity_at(p);
            }
        }
        for x in la_img.iter_mut() {
            *x += self.noise_sigma * rng.normal();
        }
        if self.corrupt_la {
            let lo = self.la_band_row * lw;
            let hi = (self.la_band_row + self.la_band_rows) * lw;
            degrade_slice(&mut la_img[lo..hi], self.la_band_rows, lw, rng);
        }

        SampleBundle {
            views: vec![
                ViewData {
                    name: "sa".into(),
                    image: Tensor::from_f64(&SA_SHAPE, &sa_img).unwrap(),
                    labels: sa_lab,
                },
                ViewData {
                    name: "la".into(),
                    image: Tensor::from_f64(&LA_SHAPE, &la_img).unwrap(),
                    labels: la_lab,
                },
            ],
        }
    }
}

/// Blur twice with a 3x3 binomial kernel, crush contrast, bury in noise.
fn degrade_slice(img: &mut [f64], h: usize, w: usize, rng: &mut Rng) {
    for _ in 0..2 {
        let src = img.to_vec();
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (dy, wy) in [(-1i64, 1.0), (0, 2.0), (1, 1.0)] {
                    for (dx, wx) in [(-1i64, 1.0), (0, 2.0), (1, 1.0)] {
                        let sy = (y as i64 + dy).clamp(0, h as i64 - 1) as usize;
                        let sx = (x as i64 + dx).clamp(0, w as i64 - 1) as usize;
                        acc += wy * wx * src[sy * w + sx];
                    }
                }
                img[y * w + x] = acc / 16.0;
            }
        }
    }
    let mean = img.iter().sum::<f64>() / img.len() as f64;
    for x in img.iter_mut() {
        *x = mean + 0.02 * (*x - mean) + 0.32 * rng.normal();
    }
}

/// One view of one sample; `labels` matches the image shape.
#[derive(Clone, Debug)]
pub struct ViewData<T: Scalar> {
    pub name: String,
    pub image: Tensor<T>,
    pub labels: Vec<u8>,
}

/// All views of one sample, in dataset view order (`sa`, `la`).
#[derive(Clone, Debug)]
pub struct SampleBundle<T: Scalar> {
    pub views: Vec<ViewData<T>>,
}

/// Draws the anatomy and renders it; depends only on `(seed, index)`.
pub fn generate_sample<T: Scalar>(seed: u64, index: usize) -> (Phantom, SampleBundle<T>) {
    let mut rng = Rng::for_name(seed, &format!("sample-{index}"));
    let phantom = Phantom::sample(&mut rng);
    let bundle = phantom.render(&mut rng);
    (phantom, bundle)
}

/// Label agreement along the lines where the long-axis plane crosses each
/// slice plane of the stack. On those lines both views sample the same world
/// points up to in-plane rounding, so any disagreement is discretisation at
/// structure boundaries.
pub fn cross_view_agreement<T: Scalar>(phantom: &Phantom, bundle: &SampleBundle<T>) -> f64 {
    let sa = &bundle.views[0].labels;
    let la = &bundle.views[1].labels;
    let [sd, sh, sw] = SA_SHAPE;
    let [lh, lw] = LA_SHAPE;
    let (s_psi, c_psi) = phantom.la_psi.sin_cos();
    let w = [
        c_psi * phantom.e_u[0] + s_psi * phantom.e_v[0],
        c_psi * phantom.e_u[1] + s_psi * phantom.e_v[1],
        c_psi * phantom.e_u[2] + s_psi * phantom.e_v[2],
    ];
    // plane coords (a, b): p = center + a*axis + b*w, orthonormal in mm
    let az = phantom.axis[0];
    let wz = w[0];
    let norm = (az * az + wz * wz).sqrt();
    let dir = [-wz / norm, az / norm];

    let mut same = 0usize;
    let mut total = 0usize;
    for k in 0..sd {
        let zk = (k as f64 + 0.5) * SA_SPACING_MM[0];
        let rhs = zk - phantom.center[0];
        let a0 = az * rhs / (norm * norm);
        let b0 = wz * rhs / (norm * norm);
        let mut s = -60.0;
        while s <= 60.0 {
            let a = a0 + s * dir[0];
            let b = b0 + s * dir[1];
            s += 1.25;
            let r = (a / LA_SPACING_MM[0] + lh as f64 / 2.0 - 0.5).round();
            let c = (b / LA_SPACING_MM[1] + lw as f64 / 2.0 - 0.5).round();
            if r < 0.0 || c < 0.0 || r >= lh as f64 || c >= lw as f64 {
                continue;
            }
            let p = [
                zk,
                phantom.center[1] + a * phantom.axis[1] + b * w[1],
                phantom.center[2] + a * phantom.axis[2] + b * w[2],
            ];
            let j = (p[1] / SA_SPACING_MM[1] - 0.5).round();
            let i = (p[2] / SA_SPACING_MM[2] - 0.5).round();
            if j < 0.0 || i < 0.0 || j >= sh as f64 || i >= sw as f64 {
                continue;
            }
            total += 1;
            let sa_label = sa[(k * sh + j as usize) * sw + i as usize];
            let la_label = la[r as usize * lw + c as usize];
            if sa_label == la_label {
                same += 1;
            }
        }
    }
    if total == 0 {
        0.0
    } else {
        same as f64 / total as f64
    }
}

// -- augmentation --------------------------------------------------------------

/// In-plane geometric and intensity jitter, drawn once per sample and applied
/// to every view so the views keep telling one story.
#[derive(Clone, Copy, Debug)]
pub struct AugmentDraw {
    /// Rotation in radians, at most +-10 degrees when drawn.
    pub angle: f64,
    /// Mirror the column axis.
    pub flip: bool,
    /// In-plane shift in voxels (row, column), at most +-4 when drawn.
    pub shift: [f64; 2],
    /// Multiplicative intensity factor in [0.9, 1.1] when drawn.
    pub gain: f64,
}

impl AugmentDraw {
    pub fn identity() -> AugmentDraw {
        AugmentDraw { angle: 0.0, flip: false, shift: [0.0, 0.0], gain: 1.0 }
    }

    pub fn sample(rng: &mut Rng) -> AugmentDraw {
        AugmentDraw {
            angle: rng.range(-10.0, 10.0) * DEG,
            flip: rng.flag(0.5),
            shift: [rng.range(-4.0, 4.0), rng.range(-4.0, 4.0)],
            gain: rng.range(0.9, 1.1),
        }
    }
}

/// Resamples every in-plane slice of every view: bilinear for the image,
/// nearest for labels, clamped at the borders. The identity draw reproduces
/// the input bit for bit.
pub fn augment_with<T: Scalar>(bundle: &SampleBundle<T>, draw: &AugmentDraw) -> SampleBundle<T> {
    let views = bundle
        .views
        .iter()
        .map(|view| {
            let shape = view.image.shape().to_vec();
            let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
            let slices: usize = shape[..shape.len() - 2].iter().product();
            let src_img = view.image.data();
            let mut img = vec![T::zero(); src_img.len()];
            let mut lab = vec![0u8; view.labels.len()];
            let (sn, cs) = draw.angle.sin_cos();
            let cy = (h as f64 - 1.0) / 2.0;
            let cx = (w as f64 - 1.0) / 2.0;
            for s in 0..slices {
                let base = s * h * w;
                let im = &src_img[base..base + h * w];
                let lb = &view.labels[base..base + h * w];
                for y in 0..h {
                    for x in 0..w {
                        let dy = y as f64 - cy - draw.shift[0];
                        let mut dx = x as f64 - cx - draw.shift[1];
                        if draw.flip {
                            dx = -dx;
                        }
                        let sy = cs * dy + sn * dx + cy;
                        let sx = -sn * dy + cs * dx + cx;
                        let o = base + y * w + x;
                        img[o] = T::from_f64(
                            draw.gain * bilinear(im, h, w, sy, sx),
                        );
                        lab[o] = nearest(lb, h, w, sy, sx);
                    }
                }
            }
            ViewData {
                name: view.name.clone(),
                image: Tensor::new(shape, img).unwrap(),
                labels: lab,
            }
        })
        .collect();
    SampleBundle { views }
}

/// Draws jitter from `rng` and applies it.
pub fn augment<T: Scalar>(bundle: &SampleBundle<T>, rng: &mut Rng) -> SampleBundle<T> {
    augment_with(bundle, &AugmentDraw::sample(rng))
}

fn bilinear<T: Scalar>(img: &[T], h: usize, w: usize, y: f64, x: f64) -> f64 {
    let y = y.clamp(0.0, h as f64 - 1.0);
    let x = x.clamp(0.0, w as f64 - 1.0);
    let y0 = y.floor() as usize;
    let x0 = x.floor() as usize;
    let y1 = (y0 + 1).min(h - 1);
    let x1 = (x0 + 1).min(w - 1);
    let fy = y - y0 as f64;
    let fx = x - x0 as f64;
    let at = |r: usize, c: usize| img[r * w + c].to_f64();
    (1.0 - fy) * ((1.0 - fx) * at(y0, x0) + fx * at(y0, x1))
        + fy * ((1.0 - fx) * at(y1, x0) + fx * at(y1, x1))
}

fn nearest(lab: &[u8], h: usize, w: usize, y: f64, x: f64) -> u8 {
    let y = y.round().clamp(0.0, h as f64 - 1.0) as usize;
    let x = x.round().clamp(0.0, w as f64 - 1.0) as usize;
    lab[y * w + x]
}

// -- on-disk datasets ----------------------------------------------------------

/// Per-view geometry recorded in `meta.json`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ViewMeta {
    pub name: String,
    pub shape: Vec<usize>,
    pub spacing_mm: Vec<f64>,
}

/// Dataset description written next to the samples.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub schema: String,
    pub n: usize,
    pub seed: u64,
    pub classes: usize,
    pub class_names: Vec<String>,
    pub image_dtype: String,
    pub rng_algorithm: String,
    pub views: Vec<ViewMeta>,
    pub sha256: String,
}

/// One line of `manifest.jsonl`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub index: usize,
    pub dir: String,
    pub tilt_deg: f64,
    pub cavity_mm3: f64,
    pub myo_mm3: f64,
    pub corrupt_apex: bool,
    pub corrupt_base: bool,
    pub corrupt_la: bool,
}

pub const DATASET_SCHEMA: &str = "phantom-dataset/1";

fn view_metas() -> Vec<ViewMeta> {
    vec![
        ViewMeta {
            name: "sa".into(),
            shape: SA_SHAPE.to_vec(),
            spacing_mm: SA_SPACING_MM.to_vec(),
        },
        ViewMeta {
            name: "la".into(),
            shape: LA_SHAPE.to_vec(),
            spacing_mm: LA_SPACING_MM.to_vec(),
        },
    ]
}

/// Generates `n` samples under `root`: `meta.json`, `manifest.jsonl` with one
/// line per sample, and a directory of tensor files per sample. The recorded
/// sha256 digests every tensor file in manifest order.
pub fn make_dataset<T: Scalar>(root: &Path, n: usize, seed: u64) -> Result<DatasetMeta> {
    make_dataset_slice::<T>(root, 0, n, seed)
}

/// [`make_dataset`] over sample indices `start..start + n`, so disjoint
/// index ranges under one seed yield disjoint splits of the same population.
pub fn make_dataset_slice<T: Scalar>(
    root: &Path,
    start: usize,
    n: usize,
    seed: u64,
) -> Result<DatasetMeta> {
    fs::create_dir_all(root)?;
    let mut manifest = Vec::with_capacity(n);
    let mut hasher = Sha256::new();
    for index in start..start + n {
        let (phantom, bundle) = generate_sample::<T>(seed, index);
        let dir_name = format!("sample-{index:04}");
        let dir = root.join(&dir_name);
        fs::create_dir_all(&dir)?;
        for view in &bundle.views {
            let img_path = dir.join(format!("{}.tft", view.name));
            let lab_path = dir.join(format!("{}_labels.tft", view.name));
            tft::write_tensor(&img_path, &view.image)?;
            tft::write_labels(&lab_path, view.image.shape(), &view.labels)?;
            hasher.update(fs::read(&img_path)?);
            hasher.update(fs::read(&lab_path)?);
        }
        manifest.push(ManifestEntry {
            index,
            dir: dir_name,
            tilt_deg: phantom.tilt_deg(),
            cavity_mm3: phantom.cavity_volume_mm3(),
            myo_mm3: phantom.myo_volume_mm3(),
            corrupt_apex: phantom.corrupt_apex,
            corrupt_base: phantom.corrupt_base,
            corrupt_la: phantom.corrupt_la,
        });
    }
    let meta = DatasetMeta {
        schema: DATASET_SCHEMA.into(),
        n,
        seed,
        classes: CLASSES,
        class_names: CLASS_NAMES.iter().map(|s| s.to_string()).collect(),
        image_dtype: T::DTYPE.name().into(),
        rng_algorithm: RNG_ALGORITHM.into(),
        views: view_metas(),
        sha256: format!("{:x}", hasher.finalize()),
    };

    let mut mf = fs::File::create(root.join("manifest.jsonl"))?;
    for entry in &manifest {
        serde_json::to_writer(&mut mf, entry)?;
        mf.write_all(b"\n")?;
    }
    fs::write(root.join("meta.json"), serde_json::to_vec_pretty(&meta)?)?;
    Ok(meta)
}

/// An opened dataset directory.
pub struct Dataset {
    pub root: PathBuf,
    pub meta: DatasetMeta,
    pub entries: Vec<ManifestEntry>,
}

impl Dataset {
    pub fn open(root: &Path) -> Result<Dataset> {
        let meta_path = root.join("meta.json");
        let bytes = fs::read(&meta_path)
            .map_err(|e| Error::format(path_str(&meta_path), format!("cannot read: {e}")))?;
        let meta: DatasetMeta = serde_json::from_slice(&bytes)
            .map_err(|e| Error::format(path_str(&meta_path), e.to_string()))?;
        if meta.schema != DATASET_SCHEMA {
            return Err(Error::format(
                path_str(&meta_path),
                format!("schema {} is not {}", meta.schema, DATASET_SCHEMA),
            ));
        }
        let mf_path = root.join("manifest.jsonl");
        let file = fs::File::open(&mf_path)
            .map_err(|e| Error::format(path_str(&mf_path), format!("cannot read: {e}")))?;
        let mut entries = Vec::new();
        for line in std::io::BufReader::new(file).lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            entries.push(
                serde_json::from_str(&line).map_err(|e| Error::format(path_str(&mf_path), e.to_string()))?,
            );
        }
        if entries.len() != meta.n {
            return Err(Error::format(
                path_str(&mf_path),
                format!("{} manifest lines for n = {}", entries.len(), meta.n),
            ));
        }
        Ok(Dataset { root: root.to_path_buf(), meta, entries })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn load<T: Scalar>(&self, index: usize) -> Result<SampleBundle<T>> {
        let entry = self
            .entries
            .get(index)
            .ok_or_else(|| Error::config(format!("sample {index} out of range")))?;
        let dir = self.root.join(&entry.dir);
        let mut views = Vec::with_capacity(self.meta.views.len());
        for vm in &self.meta.views {
            let image = tft::read_tensor::<T>(&dir.join(format!("{}.tft", vm.name)))?;
            let (lshape, labels) = tft::read_labels(&dir.join(format!("{}_labels.tft", vm.name)))?;
            if lshape != *image.shape() {
                return Err(Error::format(
                    path_str(&dir),
                    format!("label shape {lshape:?} vs image {:?}", image.shape()),
                ));
            }
            views.push(ViewData { name: vm.name.clone(), image, labels });
        }
        Ok(SampleBundle { views })
    }

    /// Loads every sample into memory.
    pub fn load_all<T: Scalar>(&self) -> Result<Vec<SampleBundle<T>>> {
        (0..self.len()).map(|i| self.load(i)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;


    #[test]
    fn generation_is_deterministic() {
        let (_, a) = generate_sample::<f32>(7, 3);
        let (_, b) = generate_sample::<f32>(7, 3);
        for (va, vb) in a.views.iter().zip(&b.views) {
            assert_eq!(va.image.data(), vb.image.data());
            assert_eq!(va.labels, vb.labels);
        }
        let (_, c) = generate_sample::<f32>(8, 3);
        assert_ne!(a.views[0].image.data(), c.views[0].image.data());
    }

    #[test]
    fn continuous_volumes_match_the_ellipsoid_formulas() {
        for seed in [1u64, 2, 3] {
            let mut rng = Rng::for_name(seed, "volume-check");
            let ph = Phantom::sample(&mut rng);
            let m = ph.radii[0] + ph.thickness + 4.0;
            let step = 1.0;
            let n = (2.0 * m / step).ceil() as usize;
            let mut counts = [0usize; 4];
            for a in 0..n {
                for b in 0..n {
                    for c in 0..n {
                        let p = [
                            ph.center[0] - m + (a as f64 + 0.5) * step,
                            ph.center[1] - m + (b as f64 + 0.5) * step,
                            ph.center[2] - m + (c as f64 + 0.5) * step,
                        ];
                        counts[ph.label_at(p) as usize] += 1;
                    }
                }
            }
            let cell = step * step * step;
            let cavity = counts[1] as f64 * cell;
            let myo = counts[2] as f64 * cell;
            assert!(
                (cavity - ph.cavity_volume_mm3()).abs() < 0.1 * ph.cavity_volume_mm3(),
                "cavity {} vs {}",
                cavity,
                ph.cavity_volume_mm3()
            );
            assert!(
                (myo - ph.myo_volume_mm3()).abs() < 0.1 * ph.myo_volume_mm3(),
                "myo {} vs {}",
                myo,
                ph.myo_volume_mm3()
            );
        }
    }

    #[test]
    fn both_views_see_every_structure() {
        let mut sa_seen = [false; 4];
        let mut la_seen = [false; 4];
        for index in 0..8 {
            let (_, bundle) = generate_sample::<f32>(11, index);
            for &l in &bundle.views[0].labels {
                sa_seen[l as usize] = true;
            }
            for &l in &bundle.views[1].labels {
                la_seen[l as usize] = true;
            }
        }
        assert_eq!(sa_seen, [true; 4], "short-axis misses a class");
        assert_eq!(la_seen, [true; 4], "long-axis misses a class");
    }

    #[test]
    fn views_agree_along_their_intersection() {
        for index in 0..6 {
            let (ph, bundle) = generate_sample::<f32>(21, index);
            let agree = cross_view_agreement(&ph, &bundle);
            assert!(agree >= 0.95, "sample {index}: agreement {agree}");
        }
    }

    #[test]
    fn identity_augmentation_is_bit_exact() {
        let (_, bundle) = generate_sample::<f32>(5, 0);
        let same = augment_with(&bundle, &AugmentDraw::identity());
        for (a, b) in bundle.views.iter().zip(&same.views) {
            assert_eq!(a.image.data(), b.image.data());
            assert_eq!(a.labels, b.labels);
        }
    }

    #[test]
    fn augmentation_is_seeded_and_label_safe() {
        let (_, bundle) = generate_sample::<f32>(5, 1);
        let mut r1 = Rng::for_name(42, "augment-1");
        let mut r2 = Rng::for_name(42, "augment-1");
        let a = augment(&bundle, &mut r1);
        let b = augment(&bundle, &mut r2);
        for (va, vb) in a.views.iter().zip(&b.views) {
            assert_eq!(va.image.data(), vb.image.data());
            assert_eq!(va.labels, vb.labels);
        }
        assert!(a.views[0].labels.iter().all(|&l| l < CLASSES as u8));
        assert_ne!(a.views[0].image.data(), bundle.views[0].image.data());
    }

    #[test]
    fn degraded_slices_lose_their_structure() {
        let mut rng = Rng::for_name(3, "degrade");
        let ph = Phantom::sample(&mut rng);
        let clean: SampleBundle<f64> = ph.render(&mut rng);
        let [_, h, w] = SA_SHAPE;
        let mut slice: Vec<f64> =
            clean.views[0].image.data()[..h * w].iter().copied().collect();
        let before = slice.clone();
        degrade_slice(&mut slice, h, w, &mut rng);
        let diff: f64 =
            slice.iter().zip(&before).map(|(a, b)| (a - b).abs()).sum::<f64>() / slice.len() as f64;
        assert!(diff > 0.05, "degradation barely changed the slice: {diff}");
    }

    #[test]
    fn dataset_round_trips_and_hashes_deterministically() {
        let tmp = tempfile::tempdir().unwrap();
        let root_a = tmp.path().join("a");
        let root_b = tmp.path().join("b");
        let meta_a = make_dataset::<f32>(&root_a, 4, 123).unwrap();
        let meta_b = make_dataset::<f32>(&root_b, 4, 123).unwrap();
        assert_eq!(meta_a.sha256, meta_b.sha256);
        assert_eq!(meta_a.n, 4);

        let lines = std::fs::read_to_string(root_a.join("manifest.jsonl")).unwrap();
        assert_eq!(lines.lines().count(), 4);

        let ds = Dataset::open(&root_a).unwrap();
        assert_eq!(ds.len(), 4);
        let loaded = ds.load::<f32>(2).unwrap();
        let (_, fresh) = generate_sample::<f32>(123, 2);
        for (a, b) in loaded.views.iter().zip(&fresh.views) {
            assert_eq!(a.image.data(), b.image.data());
            assert_eq!(a.labels, b.labels);
        }

        let other = make_dataset::<f32>(&tmp.path().join("c"), 4, 124).unwrap();
        assert_ne!(meta_a.sha256, other.sha256);
    }
}
