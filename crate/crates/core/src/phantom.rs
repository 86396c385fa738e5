//! Synthetic whole-body PET/CT phantoms with known lesions.
//!
//! Organs are axis-aligned ellipsoids at fixed fractional positions inside
//! an elliptic body cylinder. FDG phantoms are hot in brain and bladder,
//! PSMA phantoms in kidneys and salivary glands. Lesions are small spheres
//! placed outside every organ. All numbers are arbitrary constants chosen
//! to produce those orderings, not measured values.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::classifier::TracerClass;
use crate::error::{Error, Result};
use crate::volume::{base_vocabulary, BinaryMask, Geometry, LabelVolume, VoxelGrid};

pub const MAX_LESIONS: usize = 8;
/// Lower bound on lesion SUV: every lesion must stay hotter than this.
pub const MIN_LESION_SUV: f64 = 2.0;
const PLACEMENT_ATTEMPTS: usize = 1000;

pub const CT_AIR: f32 = -1000.0;
pub const CT_SOFT_TISSUE: f32 = 40.0;
pub const CT_BONE: f32 = 700.0;

/// Anatomy label ids written to the label volume.
pub const ORGAN_LABELS: [(u32, &str); 12] = [
    (2, "brain"),
    (3, "urinary_bladder"),
    (4, "spleen"),
    (5, "liver"),
    (6, "heart"),
    (7, "kidneys"),
    (8, "duodenum"),
    (9, "prostate"),
    (10, "small_bowel"),
    (11, "esophagus"),
    (12, "submandibular_glands"),
    (13, "parotid_glands"),
];

pub fn organ_label(name: &str) -> Option<u32> {
    ORGAN_LABELS.iter().find(|(_, n)| *n == name).map(|(id, _)| *id)
}

/// Vocabulary of anatomy volumes: background, lesion and every organ.
pub fn anatomy_vocabulary() -> BTreeMap<u32, String> {
    let mut v = base_vocabulary();
    for (id, name) in ORGAN_LABELS {
        v.insert(id, name.to_string());
    }
    v
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrganSpec {
    pub name: String,
    /// Center as a fraction of `dims - 1` along each axis.
    pub center: [f64; 3],
    /// Semi-axes in voxels.
    pub radii: [f64; 3],
    pub mean_suv: f64,
    pub suv_sigma: f64,
}

impl OrganSpec {
    fn center_voxels(&self, dims: [usize; 3]) -> [f64; 3] {
        std::array::from_fn(|k| self.center[k] * (dims[k] - 1) as f64)
    }

    fn contains(&self, c: [f64; 3], p: [usize; 3]) -> bool {
        (0..3)
            .map(|k| ((p[k] as f64 - c[k]) / self.radii[k]).powi(2))
            .sum::<f64>()
            <= 1.0
    }

    /// Inclusive voxel bounding box.
    fn bounds(&self, dims: [usize; 3]) -> [(usize, usize); 3] {
        let c = self.center_voxels(dims);
        std::array::from_fn(|k| {
            let lo = (c[k] - self.radii[k]).ceil().max(0.0) as usize;
            let hi = ((c[k] + self.radii[k]).floor() as usize).min(dims[k] - 1);
            (lo, hi)
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LesionSpec {
    /// Lesions inserted by [`generate_phantom`].
    pub count: usize,
    /// Inclusive range from which cohort members draw `count`.
    pub count_range: [usize; 2],
    /// Sphere radius range in voxels.
    pub radius_range: [f64; 2],
    pub suv_range: [f64; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub tracer: TracerClass,
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub organs: Vec<OrganSpec>,
    pub lesions: LesionSpec,
    pub background_suv: f64,
    pub background_sigma: f64,
    /// Additive Gaussian noise on every voxel.
    pub noise_sigma: f64,
    pub rng_seed: u64,
}

fn organ(name: &str, center: [f64; 3], radii: [f64; 3], mean_suv: f64) -> OrganSpec {
    OrganSpec {
        name: name.into(),
        center,
        radii,
        mean_suv,
        suv_sigma: 0.1 * mean_suv,
    }
}

/// (name, center, radii, FDG mean SUV, PSMA mean SUV)
type OrganRow = (&'static str, [f64; 3], [f64; 3], f64, f64);

const ORGAN_TABLE: [OrganRow; 15] = [
    ("brain", [0.5, 0.5, 0.90], [9.0, 11.0, 8.0], 6.0, 0.3),
    ("parotid_glands", [0.36, 0.48, 0.80], [2.5, 3.0, 3.5], 1.5, 6.0),
    ("parotid_glands", [0.64, 0.48, 0.80], [2.5, 3.0, 3.5], 1.5, 6.0),
    ("submandibular_glands", [0.42, 0.62, 0.77], [2.0, 2.0, 2.0], 1.5, 6.0),
    ("submandibular_glands", [0.58, 0.62, 0.77], [2.0, 2.0, 2.0], 1.5, 6.0),
    ("esophagus", [0.5, 0.45, 0.68], [1.5, 1.5, 6.0], 1.5, 1.0),
    ("heart", [0.55, 0.6, 0.60], [7.0, 6.0, 6.0], 3.0, 1.2),
    ("liver", [0.36, 0.55, 0.48], [10.0, 9.0, 7.0], 2.5, 5.0),
    ("spleen", [0.70, 0.45, 0.50], [4.0, 4.0, 5.0], 2.0, 4.0),
    ("kidneys", [0.36, 0.35, 0.40], [3.0, 4.0, 6.0], 2.5, 8.0),
    ("kidneys", [0.64, 0.35, 0.40], [3.0, 4.0, 6.0], 2.5, 8.0),
    ("duodenum", [0.56, 0.58, 0.38], [3.0, 2.0, 3.0], 1.8, 3.0),
    ("small_bowel", [0.5, 0.55, 0.28], [9.0, 6.0, 5.0], 1.8, 2.5),
    ("urinary_bladder", [0.5, 0.55, 0.15], [5.0, 4.0, 4.0], 8.0, 3.0),
    ("prostate", [0.5, 0.5, 0.07], [2.0, 2.0, 2.0], 1.5, 2.0),
];

impl PhantomSpec {
    /// Default 64x64x128 phantom at 4 mm for the given tracer.
    pub fn default_for(tracer: TracerClass, rng_seed: u64) -> Self {
        let organs = ORGAN_TABLE
            .iter()
            .map(|&(name, center, radii, fdg, psma)| {
                organ(name, center, radii, if tracer == TracerClass::Fdg { fdg } else { psma })
            })
            .collect();
        PhantomSpec {
            tracer,
            dims: [64, 64, 128],
            spacing: [4.0, 4.0, 4.0],
            organs,
            lesions: LesionSpec {
                count: 3,
                count_range: [0, 6],
                radius_range: [1.0, 2.5],
                suv_range: [3.0, 10.0],
            },
            background_suv: 0.8,
            background_sigma: 0.2,
            noise_sigma: 0.05,
            rng_seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        Geometry::new(self.dims, self.spacing)?;
        let l = &self.lesions;
        if l.count > MAX_LESIONS || l.count_range[0] > l.count_range[1] || l.count_range[1] > MAX_LESIONS {
            return Err(Error::param(format!(
                "lesion count {} / range {:?} must lie within [0, {MAX_LESIONS}]",
                l.count, l.count_range
            )));
        }
        if !(l.suv_range[0] > MIN_LESION_SUV && l.suv_range[0] <= l.suv_range[1] && l.suv_range[1].is_finite()) {
            return Err(Error::param(format!(
                "lesion SUV range {:?} must be ordered with minimum above {MIN_LESION_SUV}",
                l.suv_range
            )));
        }
        if !(l.radius_range[0] >= 0.0 && l.radius_range[0] <= l.radius_range[1] && l.radius_range[1].is_finite()) {
            return Err(Error::param(format!("lesion radius range {:?} is invalid", l.radius_range)));
        }
        for s in [self.background_suv, self.background_sigma, self.noise_sigma] {
            if !(s >= 0.0 && s.is_finite()) {
                return Err(Error::param("background SUV and noise levels must be non-negative"));
            }
        }
        for o in &self.organs {
            if organ_label(&o.name).is_none() {
                return Err(Error::param(format!("unknown organ '{}'", o.name)));
            }
            if !(o.mean_suv >= 0.0 && o.suv_sigma >= 0.0) || o.radii.iter().any(|r| !(*r > 0.0)) {
                return Err(Error::param(format!("organ '{}' has invalid parameters", o.name)));
            }
            let c = o.center_voxels(self.dims);
            for k in 0..3 {
                if c[k] - o.radii[k] < 0.0 || c[k] + o.radii[k] > (self.dims[k] - 1) as f64 {
                    return Err(Error::param(format!("organ '{}' extends outside the volume", o.name)));
                }
            }
        }
        Ok(())
    }

    pub fn organ_mean(&self, name: &str) -> Option<f64> {
        self.organs.iter().find(|o| o.name == name).map(|o| o.mean_suv)
    }
}

/// Generated volumes sharing one geometry.
#[derive(Debug, Clone, PartialEq)]
pub struct Phantom {
    pub pet: VoxelGrid,
    pub ct: VoxelGrid,
    pub gt: BinaryMask,
    pub anatomy: LabelVolume,
}

fn in_body(dims: [usize; 3], x: usize, y: usize) -> bool {
    let cx = (dims[0] - 1) as f64 / 2.0;
    let cy = (dims[1] - 1) as f64 / 2.0;
    let (rx, ry) = (0.42 * dims[0] as f64, 0.36 * dims[1] as f64);
    ((x as f64 - cx) / rx).powi(2) + ((y as f64 - cy) / ry).powi(2) <= 1.0
}

fn in_spine(dims: [usize; 3], x: usize, y: usize) -> bool {
    let cx = (dims[0] - 1) as f64 / 2.0;
    let cy = 0.28 * (dims[1] - 1) as f64;
    let r = 0.06 * dims[0] as f64;
    (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2) <= r * r
}

fn normal(sigma: f64) -> Normal<f64> {
    Normal::new(0.0, sigma).expect("sigma validated non-negative")
}

pub fn generate_phantom(spec: &PhantomSpec) -> Result<Phantom> {
    spec.validate()?;
    let geometry = Geometry::new(spec.dims, spec.spacing)?;
    let dims = spec.dims;
    let n = geometry.len();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.rng_seed);

    let mut pet = vec![0f64; n];
    let mut ct = vec![CT_AIR; n];
    let mut anatomy = vec![0u32; n];
    let mut body = vec![false; n];

    let bg = normal(spec.background_sigma);
    for z in 0..dims[2] {
        for y in 0..dims[1] {
            for x in 0..dims[0] {
                let i = geometry.index(x, y, z);
                if in_body(dims, x, y) {
                    body[i] = true;
                    pet[i] = spec.background_suv + bg.sample(&mut rng);
                    ct[i] = if in_spine(dims, x, y) { CT_BONE } else { CT_SOFT_TISSUE };
                }
            }
        }
    }

    for o in &spec.organs {
        let id = organ_label(&o.name).expect("validated");
        let c = o.center_voxels(dims);
        let [bx, by, bz] = o.bounds(dims);
        let dist = normal(o.suv_sigma);
        for z in bz.0..=bz.1 {
            for y in by.0..=by.1 {
                for x in bx.0..=bx.1 {
                    if o.contains(c, [x, y, z]) {
                        let i = geometry.index(x, y, z);
                        anatomy[i] = id;
                        pet[i] = o.mean_suv + dist.sample(&mut rng);
                        ct[i] = CT_SOFT_TISSUE;
                    }
                }
            }
        }
    }

    let mut gt = vec![false; n];
    let l = &spec.lesions;
    for lesion in 0..l.count {
        let radius = rng.gen_range(l.radius_range[0]..=l.radius_range[1]);
        let suv = rng.gen_range(l.suv_range[0]..=l.suv_range[1]);
        let reach = radius.floor() as isize;
        let mut placed = None;
        for _ in 0..PLACEMENT_ATTEMPTS {
            let center: [isize; 3] = std::array::from_fn(|k| rng.gen_range(0..dims[k]) as isize);
            let mut voxels = Vec::new();
            let mut ok = true;
            'scan: for dz in -reach..=reach {
                for dy in -reach..=reach {
                    for dx in -reach..=reach {
                        if ((dx * dx + dy * dy + dz * dz) as f64) > radius * radius {
                            continue;
                        }
                        let p = [center[0] + dx, center[1] + dy, center[2] + dz];
                        if (0..3).any(|k| p[k] < 0 || p[k] >= dims[k] as isize) {
                            ok = false;
                            break 'scan;
                        }
                        let i = geometry.index(p[0] as usize, p[1] as usize, p[2] as usize);
                        if !body[i] || anatomy[i] != 0 || gt[i] {
                            ok = false;
                            break 'scan;
                        }
                        voxels.push(i);
                    }
                }
            }
            if ok {
                placed = Some(voxels);
                break;
            }
        }
        let voxels = placed.ok_or_else(|| {
            Error::Generation(format!(
                "could not place lesion {} of {} after {PLACEMENT_ATTEMPTS} attempts",
                lesion + 1,
                l.count
            ))
        })?;
        for i in voxels {
            gt[i] = true;
            pet[i] = suv;
        }
    }

    let noise = normal(spec.noise_sigma);
    let pet: Vec<f32> = pet
        .into_iter()
        .zip(&gt)
        .map(|(v, &lesion)| {
            let v = (v + noise.sample(&mut rng)).max(0.0);
            // Lesions never fall below the lesion SUV floor.
            if lesion {
                v.max(l.suv_range[0]) as f32
            } else {
                v as f32
            }
        })
        .collect();

    Ok(Phantom {
        pet: VoxelGrid::new(geometry, pet)?,
        ct: VoxelGrid::new(geometry, ct)?,
        gt: BinaryMask::new(geometry, gt)?,
        anatomy: LabelVolume::new(geometry, anatomy, anatomy_vocabulary())?,
    })
}

/// Base specs for both tracers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortSpec {
    pub fdg: PhantomSpec,
    pub psma: PhantomSpec,
}

impl Default for CohortSpec {
    fn default() -> Self {
        CohortSpec {
            fdg: PhantomSpec::default_for(TracerClass::Fdg, 0),
            psma: PhantomSpec::default_for(TracerClass::Psma, 0),
        }
    }
}

/// Jittered member specs: `n` FDG followed by `n` PSMA. Member `i` uses
/// seed `seed + i`; organ means are scaled by U(0.8, 1.2) and the lesion
/// count is drawn from the base spec's count range.
pub fn cohort_specs(n_per_class: usize, base: &CohortSpec, seed: u64) -> Result<Vec<PhantomSpec>> {
    if n_per_class == 0 {
        return Err(Error::param("cohort needs at least one phantom per class"));
    }
    Ok((0..2 * n_per_class)
        .map(|i| {
            let template = if i < n_per_class { &base.fdg } else { &base.psma };
            let member_seed = seed.wrapping_add(i as u64);
            let mut rng = ChaCha8Rng::seed_from_u64(member_seed);
            rng.set_stream(7);
            let mut spec = template.clone();
            spec.rng_seed = member_seed;
            for o in &mut spec.organs {
                let scale = rng.gen_range(0.8..1.2);
                o.mean_suv *= scale;
                o.suv_sigma *= scale;
            }
            let [lo, hi] = spec.lesions.count_range;
            spec.lesions.count = rng.gen_range(lo..=hi);
            spec
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct CohortMember {
    pub spec: PhantomSpec,
    pub phantom: Phantom,
}

pub fn generate_cohort(n_per_class: usize, base: &CohortSpec, seed: u64) -> Result<Vec<CohortMember>> {
    cohort_specs(n_per_class, base, seed)?
        .into_par_iter()
        .map(|spec| {
            let phantom = generate_phantom(&spec)?;
            Ok(CohortMember { spec, phantom })
        })
        .collect()
}

/// Mean PET value over the voxels labeled `organ`.
pub fn region_mean(pet: &VoxelGrid, anatomy: &LabelVolume, organ: &str) -> Option<f64> {
    let id = anatomy.label_id(organ)?;
    let (sum, n) = pet
        .data()
        .iter()
        .zip(anatomy.labels())
        .filter(|(_, &l)| l == id)
        .fold((0.0, 0usize), |(s, n), (&v, _)| (s + v as f64, n + 1));
    (n > 0).then(|| sum / n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(tracer: TracerClass, seed: u64) -> PhantomSpec {
        let mut s = PhantomSpec::default_for(tracer, seed);
        s.dims = [32, 32, 64];
        for o in &mut s.organs {
            for r in &mut o.radii {
                *r /= 2.0;
            }
        }
        s
    }

    #[test]
    fn default_specs_are_valid() {
        for t in TracerClass::ALL {
            PhantomSpec::default_for(t, 0).validate().unwrap();
            small(t, 0).validate().unwrap();
        }
        let fdg = PhantomSpec::default_for(TracerClass::Fdg, 0);
        let psma = PhantomSpec::default_for(TracerClass::Psma, 0);
        assert_eq!(fdg.organ_mean("brain"), Some(6.0));
        assert_eq!(fdg.organ_mean("urinary_bladder"), Some(8.0));
        assert_eq!(psma.organ_mean("kidneys"), Some(8.0));
        assert_eq!(psma.organ_mean("submandibular_glands"), Some(6.0));
        assert_eq!(psma.organ_mean("parotid_glands"), Some(6.0));
        assert_eq!(psma.organ_mean("brain"), Some(0.3));
    }

    #[test]
    fn invalid_specs_rejected() {
        let mut s = small(TracerClass::Fdg, 0);
        s.lesions.suv_range = [1.5, 4.0];
        assert!(s.validate().is_err());
        let mut s = small(TracerClass::Fdg, 0);
        s.lesions.count = 9;
        assert!(s.validate().is_err());
        let mut s = small(TracerClass::Fdg, 0);
        s.organs[0].radii = [40.0; 3];
        assert!(s.validate().is_err());
        let mut s = small(TracerClass::Fdg, 0);
        s.organs[0].name = "appendix".into();
        assert!(s.validate().is_err());
    }

    #[test]
    fn no_lesions_gives_empty_gt() {
        let mut s = small(TracerClass::Psma, 1);
        s.lesions.count = 0;
        assert!(generate_phantom(&s).unwrap().gt.is_empty());
    }

    #[test]
    fn deterministic_given_seed() {
        let s = small(TracerClass::Fdg, 42);
        assert_eq!(generate_phantom(&s).unwrap(), generate_phantom(&s).unwrap());
        let other = small(TracerClass::Fdg, 43);
        assert_ne!(generate_phantom(&s).unwrap().pet, generate_phantom(&other).unwrap().pet);
    }

    #[test]
    fn structural_invariants() {
        let mut s = small(TracerClass::Psma, 5);
        s.lesions.count = MAX_LESIONS;
        let p = generate_phantom(&s).unwrap();
        assert!(p.gt.count() > 0);
        // Lesions never touch organs.
        for (&g, &a) in p.gt.data().iter().zip(p.anatomy.labels()) {
            assert!(!(g && a != 0));
        }
        assert!(p.pet.data().iter().all(|v| v.is_finite() && *v >= 0.0));
        for (&g, &v) in p.gt.data().iter().zip(p.pet.data()) {
            if g {
                assert!(v as f64 >= s.lesions.suv_range[0] - 1e-6);
            }
        }
        let ct_values: std::collections::BTreeSet<i32> = p.ct.data().iter().map(|&v| v as i32).collect();
        assert_eq!(ct_values, [-1000, 40, 700].into_iter().collect());
        assert!(p.anatomy.labels().contains(&organ_label("kidneys").unwrap()));
    }

    #[test]
    fn placement_failure_is_reported() {
        let mut s = small(TracerClass::Fdg, 0);
        s.lesions.radius_range = [20.0, 20.0];
        assert!(matches!(generate_phantom(&s), Err(Error::Generation(_))));
    }

    #[test]
    fn brain_uptake_ordering_over_seeds() {
        for seed in 0..20 {
            let f = generate_phantom(&small(TracerClass::Fdg, seed)).unwrap();
            let p = generate_phantom(&small(TracerClass::Psma, seed)).unwrap();
            let fb = region_mean(&f.pet, &f.anatomy, "brain").unwrap();
            let pb = region_mean(&p.pet, &p.anatomy, "brain").unwrap();
            assert!(fb > 5.0 * pb, "seed {seed}: {fb} vs {pb}");
        }
    }

    #[test]
    fn cohort_shape_and_determinism() {
        let base = CohortSpec {
            fdg: small(TracerClass::Fdg, 0),
            psma: small(TracerClass::Psma, 0),
        };
        let c = generate_cohort(1, &base, 9).unwrap();
        assert_eq!(c.len(), 2);
        assert_eq!(c[0].spec.tracer, TracerClass::Fdg);
        assert_eq!(c[1].spec.tracer, TracerClass::Psma);
        assert_eq!(c, generate_cohort(1, &base, 9).unwrap());
        assert!(generate_cohort(0, &base, 9).is_err());
        let specs = cohort_specs(5, &base, 3).unwrap();
        for s in &specs {
            let template = if s.tracer == TracerClass::Fdg { &base.fdg } else { &base.psma };
            for (a, b) in s.organs.iter().zip(&template.organs) {
                let r = a.mean_suv / b.mean_suv;
                assert!((0.8..1.2).contains(&r));
            }
        }
    }
}
