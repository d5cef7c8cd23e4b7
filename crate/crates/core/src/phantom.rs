//! Synthetic head-CT studies with injected traits and exact ground truth.
//!
//! Each study is an elliptical skull ring (~1000 HU) enclosing brain tissue
//! (20-45 HU) with ventricles (~5 HU) and an anterior air sinus, stacked as
//! axial slices over an air background. Positive traits are realized as
//! geometric/HU perturbations; slice labels mark exactly the slices each
//! lesion touches. Voxels are rounded to integer HU so disk export through
//! the DICOM writer is lossless.

use std::io::{BufRead, Write};
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dicom::{self, DicomHeader, HuVolume, RawPixels};
use crate::seeded::{derive_seed, rng_for};
use crate::taxonomy::{LabelVector, Taxonomy};

/// RNG stream tag for study rendering.
const STREAM_STUDY: u64 = 0x5748;
/// RNG stream tag for the oversampling coin.
const STREAM_BALANCE: u64 = 0xBA1A;

#[derive(Debug, Error)]
pub enum PhantomError {
    #[error("slice_size must be at least 32, got {0}")]
    SliceTooSmall(usize),
    #[error("trait probability {0} outside [0,1]")]
    BadProbability(f32),
    #[error("spec vectors must have one entry per trait ({expected}), got {got}")]
    BadLength { expected: usize, got: usize },
    #[error("n_studies must be at least 1")]
    EmptyCorpus,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// `P(then | given)`: when `given` is positive, `then` is redrawn at `prob`.
/// If several rules fire on the same target, the largest probability wins.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CooccurrenceRule {
    pub given: usize,
    pub then: usize,
    pub prob: f32,
}

/// Sampler configuration for one corpus.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub seed: u64,
    /// Square slice edge in pixels.
    pub slice_size: usize,
    pub n_slices: usize,
    /// Per-trait base probability, aligned with the taxonomy.
    pub trait_probs: Vec<f32>,
    pub cooccurrence: Vec<CooccurrenceRule>,
    /// Per-trait severity range; severity scales lesion size/contrast.
    pub severity_range: Vec<(f32, f32)>,
    /// When set, corpus generation resamples labels so the fraction of
    /// studies carrying at least one positive trait approaches this target.
    pub oversample_positive: Option<f32>,
}

impl PhantomSpec {
    /// Defaults for the desk taxonomy: probabilities keyed by trait name,
    /// zero for traits the renderer does not know.
    pub fn desk_default(tax: &Taxonomy) -> Self {
        let prob_for = |name: &str| -> f32 {
            match name {
                "intracranial_hemorrhage" => 0.16,
                "depressed_skull_fracture" => 0.12,
                "acute_infarct" => 0.14,
                "intracranial_mass" => 0.14,
                "midline_shift" => 0.05,
                "hydrocephalus" => 0.07,
                "pneumocephalus" => 0.07,
                "skull_fracture" => 0.09,
                "sinus_disease" => 0.09,
                "atrophy" => 0.08,
                "scalp_swelling" => 0.07,
                "calcification" => 0.08,
                _ => 0.0,
            }
        };
        let trait_probs = tax.traits().iter().map(|t| prob_for(&t.name)).collect();
        let mut cooccurrence = Vec::new();
        if let (Some(mass), Some(shift), Some(ich)) = (
            tax.by_name("intracranial_mass"),
            tax.by_name("midline_shift"),
            tax.by_name("intracranial_hemorrhage"),
        ) {
            cooccurrence.push(CooccurrenceRule {
                given: mass.id,
                then: shift.id,
                prob: 0.6,
            });
            cooccurrence.push(CooccurrenceRule {
                given: ich.id,
                then: shift.id,
                prob: 0.3,
            });
        }
        Self {
            seed: 0,
            slice_size: 64,
            n_slices: 16,
            trait_probs,
            cooccurrence,
            severity_range: vec![(0.5, 1.0); tax.len()],
            oversample_positive: None,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self, tax: &Taxonomy) -> Result<(), PhantomError> {
        if self.slice_size < 32 {
            return Err(PhantomError::SliceTooSmall(self.slice_size));
        }
        for v in self
            .trait_probs
            .iter()
            .chain(self.cooccurrence.iter().map(|r| &r.prob))
        {
            if !(0.0..=1.0).contains(v) {
                return Err(PhantomError::BadProbability(*v));
            }
        }
        for len in [self.trait_probs.len(), self.severity_range.len()] {
            if len != tax.len() {
                return Err(PhantomError::BadLength {
                    expected: tax.len(),
                    got: len,
                });
            }
        }
        Ok(())
    }
}

/// One synthesized study with its ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledStudy {
    pub volume: HuVolume,
    pub study_labels: LabelVector,
    /// One vector per slice; study labels are their elementwise OR.
    pub slice_labels: Vec<LabelVector>,
}

// ---------------------------------------------------------------------------
// label sampling
// ---------------------------------------------------------------------------

/// Lesions the renderer can realize, keyed by taxonomy trait name.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Lesion {
    Hemorrhage,
    DepressedFracture,
    Infarct,
    Mass,
    MidlineShift,
    Hydrocephalus,
    Pneumocephalus,
    SkullFracture,
    SinusDisease,
    Atrophy,
    ScalpSwelling,
    Calcification,
}

fn lesion_for(name: &str) -> Option<Lesion> {
    Some(match name {
        "intracranial_hemorrhage" => Lesion::Hemorrhage,
        "depressed_skull_fracture" => Lesion::DepressedFracture,
        "acute_infarct" => Lesion::Infarct,
        "intracranial_mass" => Lesion::Mass,
        "midline_shift" => Lesion::MidlineShift,
        "hydrocephalus" => Lesion::Hydrocephalus,
        "pneumocephalus" => Lesion::Pneumocephalus,
        "skull_fracture" => Lesion::SkullFracture,
        "sinus_disease" => Lesion::SinusDisease,
        "atrophy" => Lesion::Atrophy,
        "scalp_swelling" => Lesion::ScalpSwelling,
        "calcification" => Lesion::Calcification,
        _ => return None,
    })
}

/// Draw a study's trait set: independent base Bernoullis, then cooccurrence
/// redraws. Traits without a renderable lesion are never positive.
pub fn sample_labels(spec: &PhantomSpec, tax: &Taxonomy, rng: &mut ChaCha8Rng) -> Vec<bool> {
    let renderable: Vec<bool> = tax
        .traits()
        .iter()
        .map(|t| lesion_for(&t.name).is_some())
        .collect();
    let mut positive: Vec<bool> = (0..tax.len())
        .map(|k| rng.gen::<f64>() < spec.trait_probs[k] as f64 && renderable[k])
        .collect();
    // strongest firing rule per target, applied in target order
    for target in 0..tax.len() {
        let p = spec
            .cooccurrence
            .iter()
            .filter(|r| r.then == target && r.given < positive.len() && positive[r.given])
            .map(|r| r.prob)
            .fold(f32::NAN, f32::max);
        if p.is_finite() {
            positive[target] = rng.gen::<f64>() < p as f64 && renderable[target];
        }
    }
    positive
}

// ---------------------------------------------------------------------------
// geometry
// ---------------------------------------------------------------------------

/// Per-study anatomy, fixed before rendering.
#[derive(Debug, Clone)]
pub struct HeadGeometry {
    pub width: usize,
    pub n_slices: usize,
    cx: f32,
    cy: f32,
    rx: f32,
    ry: f32,
    skull_t: f32,
    brain_hu: f32,
    vent_sep: f32,
    vent_w: f32,
    vent_h: f32,
}

impl HeadGeometry {
    fn sample(spec: &PhantomSpec, rng: &mut ChaCha8Rng) -> Self {
        let w = spec.slice_size as f32;
        let mut u = |lo: f32, hi: f32| lo + (hi - lo) * rng.gen::<f32>();
        Self {
            width: spec.slice_size,
            n_slices: spec.n_slices,
            cx: w * 0.5 + u(-0.02, 0.02) * w,
            cy: w * 0.5 + u(-0.02, 0.02) * w,
            rx: u(0.33, 0.36) * w,
            ry: u(0.38, 0.41) * w,
            skull_t: (0.045 * w).max(2.0),
            brain_hu: u(29.0, 34.0),
            vent_sep: 0.10 * w,
            vent_w: (0.036 * w).max(1.6),
            vent_h: 0.086 * w,
        }
    }

    /// Cross-section scale of the head ellipsoid at slice `z`.
    fn z_scale(&self, z: usize) -> f32 {
        let zc = (self.n_slices as f32 - 1.0) * 0.5;
        let zr = self.n_slices as f32 * 0.5 + 2.0;
        let d = (z as f32 - zc) / zr;
        (1.0 - d * d).max(0.2).sqrt()
    }

    fn outer_radii(&self, z: usize) -> (f32, f32) {
        let s = self.z_scale(z);
        (self.rx * s, self.ry * s)
    }

    fn inner_radii(&self, z: usize) -> (f32, f32) {
        let (arx, ary) = self.outer_radii(z);
        (arx - self.skull_t, ary - self.skull_t)
    }

    /// True if the voxel center lies strictly inside the brain compartment.
    pub fn brain_contains(&self, z: usize, x: usize, y: usize) -> bool {
        let (brx, bry) = self.inner_radii(z);
        let dx = (x as f32 - self.cx) / brx;
        let dy = (y as f32 - self.cy) / bry;
        dx * dx + dy * dy < 1.0
    }

    /// Central slice band where interior lesions live.
    fn central_band(&self) -> std::ops::Range<usize> {
        let n = self.n_slices;
        n / 4..n - n / 4
    }

    fn sinus_band(&self) -> std::ops::Range<usize> {
        0..(self.n_slices / 3).max(1)
    }
}

/// One planned lesion instance, interpreted by the per-slice renderer.
#[derive(Debug, Clone)]
struct Planned {
    trait_id: usize,
    kind: Lesion,
    /// Placement as fractions of the brain radii (interior lesions) or an
    /// angle (skull/scalp lesions).
    fx: f32,
    fy: f32,
    angle: f32,
    arc: f32,
    radius: f32,
    hu: f32,
    z: std::ops::Range<usize>,
    shift: f32,
    scale: f32,
    dots: Vec<(f32, f32, f32)>,
}

fn plan_lesions(
    geom: &HeadGeometry,
    labels: &[bool],
    spec: &PhantomSpec,
    tax: &Taxonomy,
    rng: &mut ChaCha8Rng,
) -> Vec<Planned> {
    let w = geom.width as f32;
    let band = geom.central_band();
    let mut planned = Vec::new();
    for k in 0..tax.len() {
        if !labels[k] {
            continue;
        }
        let Some(kind) = lesion_for(&tax.get(k).name) else {
            continue;
        };
        let (lo, hi) = spec.severity_range[k];
        let sev = lo + (hi - lo) * rng.gen::<f32>();
        let zspan =
            |rng: &mut ChaCha8Rng, band: &std::ops::Range<usize>, max_len: usize, min_len: usize| {
                let len = (min_len + (rng.gen::<f32>() * (max_len - min_len + 1) as f32) as usize)
                    .min(band.end - band.start);
                let z0 = band.start + (rng.gen::<f32>() * (band.len() - len + 1) as f32) as usize;
                z0..z0 + len
            };
        let mut p = Planned {
            trait_id: k,
            kind,
            fx: 0.0,
            fy: 0.0,
            angle: 0.0,
            arc: 0.0,
            radius: 0.0,
            hu: 0.0,
            z: band.clone(),
            shift: 0.0,
            scale: 1.0,
            dots: Vec::new(),
        };
        // interior placement: polar fraction of the brain radii
        let place = rng.gen::<f32>() * std::f32::consts::TAU;
        let rfrac = 0.1 + 0.4 * rng.gen::<f32>();
        p.fx = rfrac * place.cos();
        p.fy = rfrac * place.sin();
        p.angle = rng.gen::<f32>() * std::f32::consts::TAU;
        match kind {
            Lesion::Hemorrhage => {
                p.radius = (0.04 * w + 0.055 * w * sev).max(2.6);
                p.hu = 55.0 + 30.0 * sev;
                p.z = zspan(rng, &band, 5, 2);
            }
            Lesion::DepressedFracture => {
                p.arc = (35.0 + 30.0 * sev).to_radians();
                p.z = zspan(rng, &band, 5, 2);
            }
            Lesion::Infarct => {
                p.arc = (40.0 + 30.0 * sev).to_radians();
                p.hu = 9.0 + 7.0 * sev;
                p.z = zspan(rng, &band, 5, 2);
            }
            Lesion::Mass => {
                p.radius = (0.047 * w + 0.047 * w * sev).max(3.0);
                p.hu = 28.0 + 10.0 * sev;
                p.z = zspan(rng, &band, 5, 2);
            }
            Lesion::MidlineShift => {
                p.shift =
                    (0.03 * w + 0.045 * w * sev) * if rng.gen::<bool>() { 1.0 } else { -1.0 };
            }
            Lesion::Hydrocephalus => {
                p.scale = 2.0 + 0.8 * sev;
            }
            Lesion::Pneumocephalus => {
                p.radius = (0.031 * w + 0.031 * w * sev).max(2.0);
                p.hu = -1000.0;
                let upper = (band.start + band.len() / 2)..band.end;
                p.z = zspan(rng, &upper, 3, 1);
            }
            Lesion::SkullFracture => {
                p.arc = (8.0 + 8.0 * sev).to_radians();
                p.z = zspan(rng, &band, 4, 2);
            }
            Lesion::SinusDisease => {
                p.hu = 30.0 + 10.0 * sev;
                p.z = geom.sinus_band();
            }
            Lesion::Atrophy => {
                p.scale = 1.45 + 0.35 * sev;
                let n_dots = 8 + (6.0 * sev) as usize;
                for _ in 0..n_dots {
                    let a = rng.gen::<f32>() * std::f32::consts::TAU;
                    let r = 0.72 + 0.18 * rng.gen::<f32>();
                    p.dots
                        .push((r * a.cos(), r * a.sin(), 1.0 + 0.4 * rng.gen::<f32>()));
                }
            }
            Lesion::ScalpSwelling => {
                p.radius = (0.034 * w + 0.020 * w * sev).clamp(2.2, 3.5);
                p.hu = 45.0 + 10.0 * sev;
                p.z = zspan(rng, &band, 5, 2);
            }
            Lesion::Calcification => {
                p.radius = 1.1 + 0.5 * sev;
                p.hu = 180.0 + 100.0 * sev;
                p.fx *= 0.3;
                p.fy *= 0.3;
                p.z = zspan(rng, &band, 3, 1);
            }
        }
        planned.push(p);
    }
    planned
}

// ---------------------------------------------------------------------------
// rendering
// ---------------------------------------------------------------------------

struct Canvas<'a> {
    w: usize,
    px: &'a mut [f32],
}

impl Canvas<'_> {
    /// Fill an ellipse; `f` maps (x, y) to a value or skips the voxel.
    /// Returns the number of voxels written.
    fn ellipse(
        &mut self,
        cx: f32,
        cy: f32,
        rx: f32,
        ry: f32,
        mut f: impl FnMut(usize, usize) -> Option<f32>,
    ) -> usize {
        if rx <= 0.0 || ry <= 0.0 {
            return 0;
        }
        let mut wrote = 0;
        let (x0, x1) = ((cx - rx).floor() as i64, (cx + rx).ceil() as i64);
        let (y0, y1) = ((cy - ry).floor() as i64, (cy + ry).ceil() as i64);
        for y in y0.max(0)..=y1.min(self.w as i64 - 1) {
            for x in x0.max(0)..=x1.min(self.w as i64 - 1) {
                let dx = (x as f32 - cx) / rx;
                let dy = (y as f32 - cy) / ry;
                if dx * dx + dy * dy < 1.0 {
                    if let Some(v) = f(x as usize, y as usize) {
                        self.px[y as usize * self.w + x as usize] = v;
                        wrote += 1;
                    }
                }
            }
        }
        wrote
    }
}

fn inside(cx: f32, cy: f32, rx: f32, ry: f32, x: usize, y: usize) -> bool {
    if rx <= 0.0 || ry <= 0.0 {
        return false;
    }
    let dx = (x as f32 - cx) / rx;
    let dy = (y as f32 - cy) / ry;
    dx * dx + dy * dy < 1.0
}

fn angle_in_window(a: f32, start: f32, width: f32) -> bool {
    let tau = std::f32::consts::TAU;
    let d = (a - start).rem_euclid(tau);
    d < width
}

fn render_study(
    spec: &PhantomSpec,
    tax: &Taxonomy,
    labels: Vec<bool>,
    rng: &mut ChaCha8Rng,
) -> LabeledStudy {
    let geom = HeadGeometry::sample(spec, rng);
    let planned = plan_lesions(&geom, &labels, spec, tax, rng);
    let w = spec.slice_size;
    let (cx, cy) = (geom.cx, geom.cy);

    let vent_scale: f32 = planned.iter().map(|p| p.scale).product::<f32>().min(3.2);
    let vent_shift: f32 = planned.iter().map(|p| p.shift).sum();
    let vent_band = geom.central_band();

    let mut slices = Vec::with_capacity(spec.n_slices);
    let mut slice_labels = vec![LabelVector::zeros(tax.len()); spec.n_slices];

    for z in 0..spec.n_slices {
        let mut px = vec![-1000.0f32; w * w];
        let mut c = Canvas { w, px: &mut px };
        let (arx, ary) = geom.outer_radii(z);
        let (brx, bry) = geom.inner_radii(z);
        let in_brain = |x: usize, y: usize| inside(cx, cy, brx, bry, x, y);

        // scalp swelling sits outside the skull; draw first so the ring wins
        for p in planned.iter().filter(|p| p.kind == Lesion::ScalpSwelling) {
            if !p.z.contains(&z) {
                continue;
            }
            let sx = cx + (arx + 2.5) * p.angle.cos();
            let sy = cy + (ary + 2.5) * p.angle.sin();
            let wrote = c.ellipse(sx, sy, p.radius, p.radius, |x, y| {
                (!inside(cx, cy, arx, ary, x, y)).then_some(p.hu)
            });
            if wrote > 0 {
                slice_labels[z].set(p.trait_id, 1.0);
            }
        }

        // skull ring
        c.ellipse(cx, cy, arx, ary, |x, y| {
            if inside(cx, cy, brx, bry, x, y) {
                None
            } else {
                Some(1000.0)
            }
        });

        // brain tissue with uniform noise
        c.ellipse(cx, cy, brx, bry, |_, _| {
            Some(geom.brain_hu + 5.0 * (rng.gen::<f32>() - 0.5) * 2.0)
        });

        // ventricles
        if vent_band.contains(&z) {
            let s = geom.z_scale(z);
            let (vw, vh) = (geom.vent_w * vent_scale * s, geom.vent_h * vent_scale * s);
            let mut wrote = 0;
            for side in [-1.0f32, 1.0] {
                wrote += c.ellipse(
                    cx + side * geom.vent_sep * s + vent_shift,
                    cy,
                    vw,
                    vh,
                    |x, y| in_brain(x, y).then_some(5.0),
                );
            }
            if wrote > 0 {
                for p in &planned {
                    if matches!(
                        p.kind,
                        Lesion::MidlineShift | Lesion::Hydrocephalus | Lesion::Atrophy
                    ) {
                        slice_labels[z].set(p.trait_id, 1.0);
                    }
                }
            }
        }

        // anterior sinus pocket: air when healthy, opacified when diseased
        if geom.sinus_band().contains(&z) {
            let s = geom.z_scale(z);
            let diseased = planned.iter().find(|p| p.kind == Lesion::SinusDisease);
            let hu = diseased.map_or(-1000.0, |p| p.hu);
            let wrote = c.ellipse(cx, cy - 0.55 * bry, 3.5 * s, 2.5 * s, |x, y| {
                in_brain(x, y).then_some(hu)
            });
            if wrote > 0 {
                if let Some(p) = diseased {
                    slice_labels[z].set(p.trait_id, 1.0);
                }
            }
        }

        // interior lesions and skull modifications
        for p in &planned {
            if !p.z.contains(&z) {
                continue;
            }
            let lx = cx + p.fx * brx;
            let ly = cy + p.fy * bry;
            let wrote = match p.kind {
                Lesion::Hemorrhage | Lesion::Pneumocephalus => {
                    c.ellipse(lx, ly, p.radius, p.radius, |x, y| {
                        in_brain(x, y).then_some(p.hu)
                    })
                }
                Lesion::Mass => {
                    let rim = c.ellipse(lx, ly, p.radius + 1.8, p.radius + 1.8, |x, y| {
                        in_brain(x, y).then_some(8.0)
                    });
                    let core = c.ellipse(lx, ly, p.radius, p.radius, |x, y| {
                        in_brain(x, y).then_some(p.hu)
                    });
                    rim + core
                }
                Lesion::Infarct => c.ellipse(cx, cy, brx, bry, |x, y| {
                    let a = (y as f32 - cy).atan2(x as f32 - cx);
                    let dx = (x as f32 - cx) / brx;
                    let dy = (y as f32 - cy) / bry;
                    let rho = (dx * dx + dy * dy).sqrt();
                    (angle_in_window(a, p.angle, p.arc) && (0.35..0.85).contains(&rho))
                        .then_some(p.hu)
                }),
                Lesion::Calcification => {
                    let mut n = c.ellipse(lx, ly, p.radius, p.radius, |x, y| {
                        in_brain(x, y).then_some(p.hu)
                    });
                    n += c.ellipse(
                        cx - p.fx * brx,
                        cy - p.fy * bry * 0.5,
                        p.radius,
                        p.radius,
                        |x, y| in_brain(x, y).then_some(p.hu),
                    );
                    n
                }
                Lesion::Atrophy => {
                    let mut n = 0;
                    for &(dx, dy, r) in &p.dots {
                        n += c.ellipse(cx + dx * brx, cy + dy * bry, r, r, |x, y| {
                            in_brain(x, y).then_some(10.0)
                        });
                    }
                    n
                }
                Lesion::SkullFracture => c.ellipse(cx, cy, arx, ary, |x, y| {
                    let a = (y as f32 - cy).atan2(x as f32 - cx);
                    (!inside(cx, cy, brx, bry, x, y) && angle_in_window(a, p.angle, p.arc))
                        .then_some(30.0)
                }),
                Lesion::DepressedFracture => {
                    // clear the ring in the window, then redraw it depressed
                    let cleared = c.ellipse(cx, cy, arx, ary, |x, y| {
                        let a = (y as f32 - cy).atan2(x as f32 - cx);
                        (!inside(cx, cy, brx, bry, x, y) && angle_in_window(a, p.angle, p.arc))
                            .then_some(30.0)
                    });
                    let (drx, dry) = (arx * 0.85, ary * 0.85);
                    let (dirx, diry) = (drx - geom.skull_t, dry - geom.skull_t);
                    c.ellipse(cx, cy, drx, dry, |x, y| {
                        let a = (y as f32 - cy).atan2(x as f32 - cx);
                        (!inside(cx, cy, dirx, diry, x, y) && angle_in_window(a, p.angle, p.arc))
                            .then_some(1000.0)
                    });
                    cleared
                }
                // handled above
                Lesion::MidlineShift
                | Lesion::Hydrocephalus
                | Lesion::SinusDisease
                | Lesion::ScalpSwelling => 0,
            };
            if wrote > 0 {
                slice_labels[z].set(p.trait_id, 1.0);
            }
        }

        // integer HU so the DICOM export is lossless
        px.iter_mut().for_each(|v| *v = v.round());
        slices.push(px);
    }

    let mut study_labels = LabelVector::zeros(tax.len());
    for sl in &slice_labels {
        study_labels.or_with(sl);
    }
    debug_assert!(
        (0..tax.len()).all(|k| (study_labels.get(k) == 1.0) == labels[k]),
        "every sampled-positive trait must be realized on some slice"
    );

    LabeledStudy {
        volume: HuVolume {
            study_uid: format!("2.25.{}", derive_seed(spec.seed, &[STREAM_STUDY])),
            rows: w,
            cols: w,
            slices,
        },
        study_labels,
        slice_labels,
    }
}

/// Generate one study, deterministic in `spec.seed`.
pub fn generate_study(spec: &PhantomSpec, tax: &Taxonomy) -> LabeledStudy {
    let mut rng = rng_for(spec.seed, &[STREAM_STUDY]);
    let labels = sample_labels(spec, tax, &mut rng);
    render_study(spec, tax, labels, &mut rng)
}

// ---------------------------------------------------------------------------
// corpus
// ---------------------------------------------------------------------------

/// One manifest line: a study's files and its ground truth.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ManifestRecord {
    pub study_uid: String,
    /// Slice files in instance order; empty until the corpus is exported.
    pub files: Vec<String>,
    pub labels: Vec<u8>,
    pub slice_labels: Vec<Vec<u8>>,
}

impl ManifestRecord {
    pub fn from_study(study: &LabeledStudy) -> Self {
        Self {
            study_uid: study.volume.study_uid.clone(),
            files: Vec::new(),
            labels: study.study_labels.to_bits(),
            slice_labels: study
                .slice_labels
                .iter()
                .map(LabelVector::to_bits)
                .collect(),
        }
    }

    pub fn study_labels(&self) -> LabelVector {
        LabelVector::from_bits(&self.labels)
    }
}

/// Line-delimited manifest of a generated corpus.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Manifest {
    pub records: Vec<ManifestRecord>,
}

impl Manifest {
    pub fn write(&self, path: &Path) -> Result<(), PhantomError> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        for r in &self.records {
            serde_json::to_writer(&mut f, r).map_err(std::io::Error::other)?;
            f.write_all(b"\n")?;
        }
        f.flush()?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self, PhantomError> {
        let f = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut records = Vec::new();
        for line in f.lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            records.push(serde_json::from_str(&line).map_err(std::io::Error::other)?);
        }
        Ok(Self { records })
    }
}

/// Spec for study `index` of a corpus: studies are seeded `seed + index`.
pub fn study_spec(spec: &PhantomSpec, index: u64) -> PhantomSpec {
    let mut s = spec.clone();
    s.seed = spec.seed.wrapping_add(index);
    s
}

fn generate_indexed(spec: &PhantomSpec, tax: &Taxonomy, index: u64) -> LabeledStudy {
    let spec_i = study_spec(spec, index);
    match spec.oversample_positive {
        None => generate_study(&spec_i, tax),
        Some(target) => {
            let mut coin = rng_for(spec.seed, &[STREAM_BALANCE, index]);
            let want_positive = coin.gen::<f64>() < target as f64;
            let mut rng = rng_for(spec_i.seed, &[STREAM_STUDY]);
            let mut labels = sample_labels(&spec_i, tax, &mut rng);
            for _ in 0..200 {
                if labels.iter().any(|&b| b) == want_positive {
                    break;
                }
                labels = sample_labels(&spec_i, tax, &mut rng);
            }
            if labels.iter().any(|&b| b) != want_positive && !want_positive {
                labels.iter_mut().for_each(|b| *b = false);
            }
            render_study(&spec_i, tax, labels, &mut rng)
        }
    }
}

/// Stream a corpus without holding every volume in memory.
pub fn generate_corpus_with(
    spec: &PhantomSpec,
    tax: &Taxonomy,
    n_studies: usize,
    mut sink: impl FnMut(usize, LabeledStudy),
) -> Result<Manifest, PhantomError> {
    spec.validate(tax)?;
    if n_studies == 0 {
        return Err(PhantomError::EmptyCorpus);
    }
    let mut manifest = Manifest::default();
    for i in 0..n_studies {
        let study = generate_indexed(spec, tax, i as u64);
        manifest.records.push(ManifestRecord::from_study(&study));
        sink(i, study);
    }
    Ok(manifest)
}

/// Generate and keep the full corpus.
pub fn generate_corpus(
    spec: &PhantomSpec,
    tax: &Taxonomy,
    n_studies: usize,
) -> Result<(Vec<LabeledStudy>, Manifest), PhantomError> {
    let mut studies = Vec::with_capacity(n_studies);
    let manifest = generate_corpus_with(spec, tax, n_studies, |_, s| studies.push(s))?;
    Ok((studies, manifest))
}

/// Study-anatomy probe for tests and oracles: the geometry `generate_study`
/// would use for this spec.
pub fn geometry(spec: &PhantomSpec, tax: &Taxonomy) -> HeadGeometry {
    let mut rng = rng_for(spec.seed, &[STREAM_STUDY]);
    let _ = sample_labels(spec, tax, &mut rng);
    HeadGeometry::sample(spec, &mut rng)
}

/// Export a study as one DICOM file per slice; returns the file names.
pub fn write_study_files(study: &LabeledStudy, dir: &Path) -> Result<Vec<String>, PhantomError> {
    std::fs::create_dir_all(dir)?;
    let v = &study.volume;
    let mut names = Vec::with_capacity(v.slices.len());
    for (z, slice) in v.slices.iter().enumerate() {
        let header = DicomHeader {
            modality: "CT".into(),
            study_uid: v.study_uid.clone(),
            series_uid: format!("{}.1", v.study_uid),
            instance_number: z as i32 + 1,
            image_orientation: [1.0, 0.0, 0.0, 0.0, 1.0, 0.0],
            rows: v.rows as u16,
            cols: v.cols as u16,
            bits_allocated: 16,
            rescale_slope: 1.0,
            rescale_intercept: -1024.0,
        };
        let raw = RawPixels {
            rows: v.rows,
            cols: v.cols,
            data: slice
                .iter()
                .map(|&hu| (hu + 1024.0).round().clamp(0.0, 65535.0) as u16)
                .collect(),
        };
        let bytes =
            dicom::write_file(&header, &raw).map_err(|e| std::io::Error::other(e.to_string()))?;
        let name = format!("{:03}.dcm", z + 1);
        std::fs::write(dir.join(&name), bytes)?;
        names.push(name);
    }
    Ok(names)
}
