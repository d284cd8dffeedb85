//! Training triplets `(coarse values over a patch, location, fine observation)`.

use std::fmt::Write as _;
use std::io::BufRead;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::grid::{fmt_f64, write_lines, Grid, GridField};

/// A centred `p^d` lattice of sensor offsets with spacing `δ`.
///
/// Sensors falling outside the domain are clamped to the boundary, so every
/// patch has the same cardinality.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PatchSpec {
    size: usize,
    spacing: f64,
}

impl PatchSpec {
    pub fn new(size: usize, spacing: f64) -> Result<Self> {
        if size == 0 || size % 2 == 0 {
            return Err(Error::invalid(format!("patch size must be odd, got {size}")));
        }
        if !(spacing > 0.0 && spacing.is_finite()) {
            return Err(Error::invalid(format!("patch spacing must be positive, got {spacing}")));
        }
        Ok(PatchSpec { size, spacing })
    }

    /// The single-sensor patch of the vanilla algorithm.
    pub fn vanilla() -> Self {
        PatchSpec { size: 1, spacing: 1.0 }
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn spacing(&self) -> f64 {
        self.spacing
    }

    /// Sensors per patch, `p^d`.
    pub fn sensors(&self, dim: usize) -> usize {
        self.size.pow(dim as u32)
    }
}

/// Patch sensor locations around `x` in lexicographic offset order
/// (first axis slowest), clamped to the bounds of `domain`.
pub fn patch_points(x: &[f64], spec: &PatchSpec, domain: &Grid) -> Vec<Vec<f64>> {
    let dim = x.len();
    let half = (spec.size / 2) as isize;
    let offsets: Vec<f64> = (-half..=half).map(|k| k as f64 * spec.spacing).collect();
    let clamp = |axis: usize, v: f64| v.clamp(domain.lo(axis), domain.hi(axis));
    if dim == 1 {
        offsets.iter().map(|o| vec![clamp(0, x[0] + o)]).collect()
    } else {
        let mut out = Vec::with_capacity(offsets.len() * offsets.len());
        for o1 in &offsets {
            for o2 in &offsets {
                out.push(vec![clamp(0, x[0] + o1), clamp(1, x[1] + o2)]);
            }
        }
        out
    }
}

/// Coarse-field values over the patch around `x`.
pub fn branch_input(coarse: &GridField, x: &[f64], spec: &PatchSpec) -> Result<Vec<f64>> {
    patch_points(x, spec, coarse.grid())
        .iter()
        .map(|p| coarse.interpolate(p))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObservationTriplet {
    pub branch_input: Vec<f64>,
    pub location: Vec<f64>,
    pub label: f64,
    pub clean_label: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObservationSet {
    pub triplets: Vec<ObservationTriplet>,
    pub spec: PatchSpec,
    pub noise_sigma: f64,
    pub rng_seed: u64,
}

impl ObservationSet {
    pub fn new(triplets: Vec<ObservationTriplet>, spec: PatchSpec, noise_sigma: f64, rng_seed: u64) -> Result<Self> {
        let first = triplets
            .first()
            .ok_or_else(|| Error::invalid("observation set needs at least one triplet"))?;
        let dim = first.location.len();
        let width = spec.sensors(dim);
        for (i, t) in triplets.iter().enumerate() {
            if t.location.len() != dim || t.branch_input.len() != width {
                return Err(Error::shape(format!(
                    "triplet {i}: expected {dim}D location and {width} branch values"
                )));
            }
        }
        for i in 0..triplets.len() {
            for j in 0..i {
                if triplets[i].location == triplets[j].location {
                    return Err(Error::invalid(format!("triplets {j} and {i} share a location")));
                }
            }
        }
        Ok(ObservationSet {
            triplets,
            spec,
            noise_sigma,
            rng_seed,
        })
    }

    pub fn len(&self) -> usize {
        self.triplets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triplets.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.triplets[0].location.len()
    }

    pub fn branch_width(&self) -> usize {
        self.triplets[0].branch_input.len()
    }

    /// Branch inputs, labels and noise level multiplied by `factor`.
    pub fn scaled(&self, factor: f64) -> ObservationSet {
        let mut out = self.clone();
        for t in &mut out.triplets {
            t.branch_input.iter_mut().for_each(|v| *v *= factor);
            t.label *= factor;
            t.clean_label *= factor;
        }
        out.noise_sigma *= factor;
        out
    }

    /// The same inputs with labels replaced by the clean observations.
    pub fn with_clean_labels(&self) -> ObservationSet {
        let mut out = self.clone();
        for t in &mut out.triplets {
            t.label = t.clean_label;
        }
        out.noise_sigma = 0.0;
        out
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut s = format!(
            "# observations: dim={},p={},delta={},sigma={},seed={}\n",
            self.dim(),
            self.spec.size,
            fmt_f64(self.spec.spacing),
            fmt_f64(self.noise_sigma),
            self.rng_seed
        );
        let dim = self.dim();
        let mut cols: Vec<String> = (0..dim).map(|a| format!("x{a}")).collect();
        cols.extend((0..self.branch_width()).map(|k| format!("u{k}")));
        cols.push("label".into());
        cols.push("clean_label".into());
        writeln!(s, "{}", cols.join(",")).unwrap();
        for t in &self.triplets {
            let row: Vec<String> = t
                .location
                .iter()
                .chain(&t.branch_input)
                .chain([&t.label, &t.clean_label])
                .map(|v| fmt_f64(*v))
                .collect();
            writeln!(s, "{}", row.join(",")).unwrap();
        }
        write_lines(path, &s)
    }

    pub fn read_csv(path: impl AsRef<Path>) -> Result<ObservationSet> {
        let file = std::fs::File::open(path)?;
        let mut lines = std::io::BufReader::new(file).lines();
        let header = lines.next().ok_or_else(|| Error::Parse("empty dataset".into()))??;
        let body = header
            .strip_prefix("# observations:")
            .ok_or_else(|| Error::Parse("missing `# observations:` header".into()))?;
        let mut dim = 0usize;
        let (mut p, mut delta, mut sigma, mut seed) = (0usize, 0.0, 0.0, 0u64);
        for kv in body.split(',') {
            let (k, v) = kv
                .trim()
                .split_once('=')
                .ok_or_else(|| Error::Parse(format!("bad header field `{kv}`")))?;
            let bad = |e: &dyn std::fmt::Display| Error::Parse(format!("{k}: {e}"));
            match k {
                "dim" => dim = v.parse().map_err(|e| bad(&e))?,
                "p" => p = v.parse().map_err(|e| bad(&e))?,
                "delta" => delta = v.parse().map_err(|e| bad(&e))?,
                "sigma" => sigma = v.parse().map_err(|e| bad(&e))?,
                "seed" => seed = v.parse().map_err(|e| bad(&e))?,
                _ => return Err(Error::Parse(format!("unknown header field `{k}`"))),
            }
        }
        let spec = PatchSpec::new(p, delta)?;
        let width = spec.sensors(dim);
        let mut triplets = Vec::new();
        for line in lines.skip(1) {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let vals = line
                .split(',')
                .map(|v| v.trim().parse::<f64>().map_err(|e| Error::Parse(format!("`{v}`: {e}"))))
                .collect::<Result<Vec<_>>>()?;
            if vals.len() != dim + width + 2 {
                return Err(Error::Parse(format!("row has {} columns", vals.len())));
            }
            triplets.push(ObservationTriplet {
                location: vals[..dim].to_vec(),
                branch_input: vals[dim..dim + width].to_vec(),
                label: vals[dim + width],
                clean_label: vals[dim + width + 1],
            });
        }
        ObservationSet::new(triplets, spec, sigma, seed)
    }
}

/// Samples the patch inputs from `coarse` and the labels from `fine_ref` at
/// each location; labels get `σ z` with `z ~ N(0,1)` drawn from a ChaCha8 stream seeded by `seed`.
pub fn build_observation_set(
    coarse: &GridField,
    fine_ref: &GridField,
    locations: &[Vec<f64>],
    spec: &PatchSpec,
    noise_sigma: f64,
    seed: u64,
) -> Result<ObservationSet> {
    if !(noise_sigma >= 0.0) {
        return Err(Error::invalid("noise sigma must be non-negative"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut triplets = Vec::with_capacity(locations.len());
    for x in locations {
        fine_ref.grid().check_point(x)?;
        coarse.grid().check_point(x)?;
        let clean_label = fine_ref.interpolate(x)?;
        let z: f64 = StandardNormal.sample(&mut rng);
        let label = if noise_sigma == 0.0 {
            clean_label
        } else {
            clean_label + noise_sigma * z
        };
        triplets.push(ObservationTriplet {
            branch_input: branch_input(coarse, x, spec)?,
            location: x.clone(),
            label,
            clean_label,
        });
    }
    ObservationSet::new(triplets, *spec, noise_sigma, seed)
}

/// Interior-uniform observation locations: `lo + j (hi − lo)/(count + 1)`, `j = 1..=count`.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationLattice {
    axes: Vec<Vec<f64>>,
}

impl ObservationLattice {
    pub fn axes(&self) -> &[Vec<f64>] {
        &self.axes
    }

    pub fn len(&self) -> usize {
        self.axes.iter().map(Vec::len).product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Locations in lexicographic order (first axis slowest).
    pub fn points(&self) -> Vec<Vec<f64>> {
        match self.axes.len() {
            1 => self.axes[0].iter().map(|&x| vec![x]).collect(),
            _ => self.axes[0]
                .iter()
                .flat_map(|&x| self.axes[1].iter().map(move |&y| vec![x, y]))
                .collect(),
        }
    }
}

pub fn observation_grid(domain: &Grid, count_per_axis: usize) -> Result<ObservationLattice> {
    if count_per_axis == 0 {
        return Err(Error::invalid("need at least one observation per axis"));
    }
    let axes = (0..domain.dim())
        .map(|a| {
            let (lo, hi) = (domain.lo(a), domain.hi(a));
            (1..=count_per_axis)
                .map(|j| lo + j as f64 * (hi - lo) / (count_per_axis + 1) as f64)
                .collect()
        })
        .collect();
    Ok(ObservationLattice { axes })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vanilla_patch_is_the_point() {
        let d = Grid::unit(2, 4).unwrap();
        let pts = patch_points(&[0.3, 0.6], &PatchSpec::vanilla(), &d);
        assert_eq!(pts, vec![vec![0.3, 0.6]]);
    }

    #[test]
    fn three_point_patch_1d() {
        let d = Grid::unit(1, 4).unwrap();
        let pts = patch_points(&[0.5], &PatchSpec::new(3, 0.01).unwrap(), &d);
        let expect = [0.49, 0.50, 0.51];
        assert_eq!(pts.len(), 3);
        for (p, e) in pts.iter().zip(expect) {
            assert!((p[0] - e).abs() < 1e-15);
        }
        assert_eq!(pts[1][0], 0.5);
    }

    #[test]
    fn corner_patch_clamps() {
        let d = Grid::unit(2, 4).unwrap();
        let pts = patch_points(&[0.0, 0.0], &PatchSpec::new(3, 0.1).unwrap(), &d);
        assert_eq!(pts.len(), 9);
        assert!(pts.iter().flatten().all(|&v| v >= 0.0));
        let mut distinct: Vec<Vec<f64>> = Vec::new();
        for p in &pts {
            if !distinct.contains(p) {
                distinct.push(p.clone());
            }
        }
        assert_eq!(distinct.len(), 4);
    }

    #[test]
    fn even_patch_rejected() {
        assert!(PatchSpec::new(4, 0.1).is_err());
        assert!(PatchSpec::new(3, 0.0).is_err());
    }

    #[test]
    fn observation_lattices() {
        let d = Grid::unit(2, 8).unwrap();
        let l = observation_grid(&d, 3).unwrap();
        assert_eq!(l.len(), 9);
        assert_eq!(l.axes()[0], vec![0.25, 0.5, 0.75]);
        let l = observation_grid(&d, 7).unwrap();
        assert_eq!(l.len(), 49);
        assert_eq!(l.axes()[1][0], 0.125);
        assert_eq!(l.axes()[1][6], 0.875);
        let l = observation_grid(&d, 1).unwrap();
        assert_eq!(l.points(), vec![vec![0.5, 0.5]]);
        assert!(observation_grid(&d, 0).is_err());
    }

    fn fields() -> (GridField, GridField) {
        let g = Grid::unit(2, 16).unwrap();
        let coarse = GridField::from_fn(g.clone(), |p| p[0] * (1.0 - p[0]) * p[1]);
        let fine = GridField::from_fn(g, |p| p[0] * (1.0 - p[0]) * p[1] + 0.01 * (20.0 * p[0]).sin());
        (coarse, fine)
    }

    #[test]
    fn noiseless_labels_are_clean() {
        let (coarse, fine) = fields();
        let locs = observation_grid(coarse.grid(), 3).unwrap().points();
        let set = build_observation_set(&coarse, &fine, &locs, &PatchSpec::new(3, 0.02).unwrap(), 0.0, 5).unwrap();
        assert_eq!(set.len(), 9);
        assert!(set.triplets.iter().all(|t| t.label == t.clean_label));
        assert!(set.triplets.iter().all(|t| t.branch_input.len() == 9));
    }

    #[test]
    fn identity_coarse_gives_lookup_dataset() {
        let (_, fine) = fields();
        let locs = observation_grid(fine.grid(), 4).unwrap().points();
        let spec = PatchSpec::new(5, 0.01).unwrap();
        let set = build_observation_set(&fine, &fine, &locs, &spec, 0.0, 1).unwrap();
        for t in &set.triplets {
            assert_eq!(t.branch_input[12], t.label);
        }
    }

    #[test]
    fn outside_location_is_an_error() {
        let (coarse, fine) = fields();
        let r = build_observation_set(&coarse, &fine, &[vec![0.5, 1.5]], &PatchSpec::vanilla(), 0.0, 1);
        assert!(matches!(r, Err(Error::Domain { axis: 1, .. })));
    }

    #[test]
    fn seeded_noise_is_reproducible() {
        let (coarse, fine) = fields();
        let locs = observation_grid(coarse.grid(), 5).unwrap().points();
        let a = build_observation_set(&coarse, &fine, &locs, &PatchSpec::vanilla(), 0.005, 42).unwrap();
        let b = build_observation_set(&coarse, &fine, &locs, &PatchSpec::vanilla(), 0.005, 42).unwrap();
        assert_eq!(a, b);
        let c = build_observation_set(&coarse, &fine, &locs, &PatchSpec::vanilla(), 0.005, 43).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn noise_statistics() {
        let g = Grid::unit(2, 4).unwrap();
        let zero = GridField::zeros(g.clone());
        let n = 120;
        let locs = observation_grid(&g, n).unwrap().points();
        let sigma = 0.005;
        let set = build_observation_set(&zero, &zero, &locs, &PatchSpec::vanilla(), sigma, 7).unwrap();
        let samples: Vec<f64> = set.triplets.iter().map(|t| t.label - t.clean_label).collect();
        let count = samples.len() as f64;
        assert!(count >= 1e4);
        let mean = samples.iter().sum::<f64>() / count;
        let sd = (samples.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (count - 1.0)).sqrt();
        assert!(mean.abs() <= 4.0 * sigma / count.sqrt());
        assert!((sd - sigma).abs() <= 0.05 * sigma);
    }

    #[test]
    fn csv_round_trip() {
        let (coarse, fine) = fields();
        let locs = observation_grid(coarse.grid(), 3).unwrap().points();
        let set = build_observation_set(&coarse, &fine, &locs, &PatchSpec::new(3, 0.03).unwrap(), 0.01, 9).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("obs.csv");
        set.write_csv(&path).unwrap();
        assert_eq!(ObservationSet::read_csv(&path).unwrap(), set);
    }
}
