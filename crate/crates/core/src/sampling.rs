//! Training distribution `p` (vMF mixture over surface regions, cuboid
//! displacements), its two-grasper conditional, and the regularization
//! distribution `q` (uniform surface node, displacement in a cone about the
//! outward normal).

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::Vec3;
use crate::kelvinlet::Grasp;
use crate::mesh::{Region, RegionSpec, TetMesh};

/// Per-axis displacement bounds `[lo, hi]` (m).
pub type Cuboid = [[f64; 2]; 3];

/// Displacement cuboid of the liver experiments, in meters.
pub const DEFAULT_CUBOID: Cuboid = [[-0.090, 0.050], [-0.090, 0.050], [-0.060, 0.090]];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplingConfig {
    pub regions: Vec<RegionSpec>,
    pub cuboid: Cuboid,
    /// Half-angle of the `q` displacement cone (rad).
    pub alpha_max: f64,
    /// Upper bound of the `q` displacement magnitude (m).
    pub u_max: f64,
    pub seed: u64,
}

impl SamplingConfig {
    /// Config with the default cone (60°) and `u_max` = largest cuboid
    /// half-extent.
    pub fn new(regions: Vec<RegionSpec>, cuboid: Cuboid, seed: u64) -> Self {
        let u_max = cuboid.iter().map(|b| 0.5 * (b[1] - b[0])).fold(0.0, f64::max);
        Self {
            regions,
            cuboid,
            alpha_max: 60f64.to_radians(),
            u_max,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        RegionSpec::validate(&self.regions)?;
        for (axis, b) in self.cuboid.iter().enumerate() {
            if !(b[0] <= b[1]) || !b[0].is_finite() || !b[1].is_finite() {
                return Err(Error::InvalidParam(format!(
                    "cuboid axis {axis}: need finite lo <= hi, got {b:?}"
                )));
            }
        }
        if !(self.alpha_max > 0.0 && self.alpha_max <= std::f64::consts::FRAC_PI_2) {
            return Err(Error::InvalidParam(format!(
                "alpha_max must be in (0, pi/2], got {}",
                self.alpha_max
            )));
        }
        if !(self.u_max >= 0.0) || !self.u_max.is_finite() {
            return Err(Error::InvalidParam(format!("u_max must be >= 0, got {}", self.u_max)));
        }
        Ok(())
    }
}

/// Experiment scale: regions, single-grasper samples per region, and
/// two-grasper region pairs with samples per pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScalePreset {
    pub name: &'static str,
    pub regions: usize,
    pub single_per_region: usize,
    pub pairs: usize,
    pub per_pair: usize,
}

pub const FULL_SCALE: ScalePreset = ScalePreset {
    name: "paper-scale",
    regions: 10,
    single_per_region: 250,
    pairs: 6,
    per_pair: 30,
};

pub const DESK_SCALE: ScalePreset = ScalePreset {
    name: "desk-scale",
    regions: 4,
    single_per_region: 50,
    pairs: 3,
    per_pair: 10,
};

pub fn preset(name: &str) -> Option<ScalePreset> {
    [FULL_SCALE, DESK_SCALE].into_iter().find(|p| p.name == name)
}

impl ScalePreset {
    pub fn single_count(&self) -> usize {
        self.regions * self.single_per_region
    }

    pub fn multi_count(&self) -> usize {
        self.pairs * self.per_pair
    }
}

/// RNG of sample `stream` under `seed`. Streams are independent.
pub fn sample_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Precomputed node pmfs of every region.
#[derive(Debug, Clone)]
pub struct SourceSampler {
    region_weights: Vec<f64>,
    /// Candidate nodes and their vMF pmf per region (empty if none).
    candidates: Vec<(Vec<usize>, Option<WeightedIndex<f64>>)>,
    /// Config region of every mesh node (None if not a candidate).
    node_region: Vec<Option<usize>>,
}

impl SourceSampler {
    /// Candidate nodes of config region `r` are the non-fixed surface nodes
    /// whose mesh label equals the region id.
    pub fn new(mesh: &TetMesh, cfg: &SamplingConfig) -> Result<Self> {
        RegionSpec::validate(&cfg.regions)?;
        let centroid = mesh.centroid();
        let mut node_region = vec![None; mesh.node_count()];
        let mut candidates = Vec::with_capacity(cfg.regions.len());
        for (r, spec) in cfg.regions.iter().enumerate() {
            let nodes = match mesh.region_index(&spec.id) {
                Some(m) => mesh.region_nodes(m),
                None => Vec::new(),
            };
            let mu = spec.center_vec();
            let cos: Vec<f64> = nodes
                .iter()
                .map(|&s| mesh.direction_from_centroid(s, &centroid).dot(&mu))
                .collect();
            let top = cos.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let w: Vec<f64> = cos.iter().map(|c| (spec.kappa * (c - top)).exp()).collect();
            let pmf = if nodes.is_empty() {
                None
            } else {
                Some(WeightedIndex::new(&w).map_err(|e| Error::InvalidParam(format!("region {}: {e}", spec.id)))?)
            };
            for &s in &nodes {
                node_region[s] = Some(r);
            }
            candidates.push((nodes, pmf));
        }
        Ok(Self {
            region_weights: cfg.regions.iter().map(|s| s.weight).collect(),
            candidates,
            node_region,
        })
    }

    /// Config region of a candidate node.
    pub fn region_of(&self, node: usize) -> Option<usize> {
        self.node_region.get(node).copied().flatten()
    }

    fn draw(&self, weights: &[f64], rng: &mut impl Rng) -> Result<usize> {
        let usable: Vec<f64> = weights
            .iter()
            .zip(&self.candidates)
            .map(|(&w, c)| if c.1.is_some() { w } else { 0.0 })
            .collect();
        let pick = WeightedIndex::new(&usable).map_err(|_| {
            Error::EmptyCandidates("no region with positive weight has surface nodes".into())
        })?;
        let r = pick.sample(rng);
        let (nodes, pmf) = &self.candidates[r];
        let pmf = pmf.as_ref().expect("usable region has a pmf");
        Ok(nodes[pmf.sample(rng)])
    }

    pub fn sample(&self, rng: &mut impl Rng) -> Result<usize> {
        self.draw(&self.region_weights, rng)
    }

    /// Two nodes from different regions: the second region is drawn with
    /// the first one's weight set to zero.
    pub fn sample_pair(&self, rng: &mut impl Rng) -> Result<(usize, usize)> {
        let positive = self
            .region_weights
            .iter()
            .zip(&self.candidates)
            .filter(|(w, c)| **w > 0.0 && c.1.is_some())
            .count();
        if positive < 2 {
            return Err(Error::InvalidParam(format!(
                "two-grasper sampling needs at least 2 positively weighted regions, found {positive}"
            )));
        }
        let first = self.sample(rng)?;
        let r = self.region_of(first).expect("sampled node has a region");
        let mut w = self.region_weights.clone();
        w[r] = 0.0;
        Ok((first, self.draw(&w, rng)?))
    }
}

/// Source node drawn from the region mixture.
pub fn sample_source(mesh: &TetMesh, cfg: &SamplingConfig, rng: &mut impl Rng) -> Result<usize> {
    SourceSampler::new(mesh, cfg)?.sample(rng)
}

/// Node pair from distinct regions.
pub fn sample_multi(mesh: &TetMesh, cfg: &SamplingConfig, rng: &mut impl Rng) -> Result<(usize, usize)> {
    SourceSampler::new(mesh, cfg)?.sample_pair(rng)
}

/// Displacement uniform in the config cuboid.
pub fn sample_displacement_p(cfg: &SamplingConfig, rng: &mut impl Rng) -> Vec3 {
    let mut u = Vec3::zeros();
    for (axis, [lo, hi]) in cfg.cuboid.iter().enumerate() {
        u[axis] = if lo == hi { *lo } else { lo + (hi - lo) * rng.random::<f64>() };
    }
    u
}

/// Sampler of the regularization distribution.
#[derive(Debug, Clone)]
pub struct QSampler {
    nodes: Vec<usize>,
    normals: Vec<Vec3>,
    cos_max: f64,
    u_max: f64,
}

impl QSampler {
    /// Candidates are the non-fixed surface nodes.
    pub fn new(mesh: &TetMesh, cfg: &SamplingConfig) -> Result<Self> {
        let all_normals = mesh.surface_normals()?;
        let mut nodes = Vec::new();
        let mut normals = Vec::new();
        for (k, &s) in mesh.surface_nodes().iter().enumerate() {
            if mesh.region(s) != Region::Fixed {
                nodes.push(s);
                normals.push(all_normals[k]);
            }
        }
        if nodes.is_empty() {
            return Err(Error::EmptyCandidates("no free surface nodes".into()));
        }
        Ok(Self {
            nodes,
            normals,
            cos_max: cfg.alpha_max.cos(),
            u_max: cfg.u_max,
        })
    }

    /// Grasp at a uniform node with a direction uniform over the cap about
    /// the outward normal and a magnitude uniform in `[0, u_max]`.
    pub fn sample(&self, mesh: &TetMesh, rng: &mut impl Rng) -> Grasp {
        let k = rng.random_range(0..self.nodes.len());
        let n = self.normals[k];
        let cos_t = 1.0 - rng.random::<f64>() * (1.0 - self.cos_max);
        let sin_t = (1.0 - cos_t * cos_t).max(0.0).sqrt();
        let phi = std::f64::consts::TAU * rng.random::<f64>();
        let (t1, t2) = tangent_basis(&n);
        let dir = n * cos_t + (t1 * phi.cos() + t2 * phi.sin()) * sin_t;
        let mag = self.u_max * rng.random::<f64>();
        let node = self.nodes[k];
        Grasp {
            source: mesh.node(node),
            displacement: dir * mag,
            node: Some(node),
        }
    }

    /// Outward normal of the `k`-th candidate.
    pub fn normal_of(&self, node: usize) -> Option<Vec3> {
        self.nodes.iter().position(|&s| s == node).map(|k| self.normals[k])
    }
}

pub fn sample_q(mesh: &TetMesh, cfg: &SamplingConfig, rng: &mut impl Rng) -> Result<Grasp> {
    Ok(QSampler::new(mesh, cfg)?.sample(mesh, rng))
}

/// Two unit vectors completing `n` to an orthonormal frame.
fn tangent_basis(n: &Vec3) -> (Vec3, Vec3) {
    let helper = if n.x.abs() < 0.9 { Vec3::x() } else { Vec3::y() };
    let t1 = n.cross(&helper).normalize();
    (t1, n.cross(&t1))
}

#[cfg(test)]
mod tests {
    use statrs::distribution::{ChiSquared, ContinuousCDF};

    use super::*;
    use crate::mesh::synth;

    fn spec(id: &str, center: Vec3, kappa: f64, weight: f64) -> RegionSpec {
        let c = center.normalize();
        RegionSpec {
            id: id.into(),
            center: [c.x, c.y, c.z],
            kappa,
            weight,
        }
    }

    fn chi2_p(observed: &[usize], expected: &[f64]) -> f64 {
        let stat: f64 = observed
            .iter()
            .zip(expected)
            .map(|(&o, &e)| (o as f64 - e).powi(2) / e)
            .sum();
        let dof = (observed.len() - 1) as f64;
        1.0 - ChiSquared::new(dof).unwrap().cdf(stat)
    }

    fn ball_with(specs: &[RegionSpec]) -> TetMesh {
        synth::icosphere_ball(2, 1.0)
            .with_directional_regions(specs, |_, _| false)
            .unwrap()
    }

    #[test]
    fn flat_kernel_is_uniform_over_surface() {
        let specs = vec![spec("all", Vec3::z(), 1e-12, 1.0)];
        let mesh = ball_with(&specs);
        let cfg = SamplingConfig::new(specs, DEFAULT_CUBOID, 1);
        let s = SourceSampler::new(&mesh, &cfg).unwrap();
        let mut rng = sample_rng(1, 0);
        let surf = mesh.surface_nodes();
        let mut counts = vec![0usize; mesh.node_count()];
        let draws = 100_000;
        for _ in 0..draws {
            counts[s.sample(&mut rng).unwrap()] += 1;
        }
        let obs: Vec<usize> = surf.iter().map(|&i| counts[i]).collect();
        assert_eq!(obs.iter().sum::<usize>(), draws);
        let e = vec![draws as f64 / surf.len() as f64; surf.len()];
        let p = chi2_p(&obs, &e);
        assert!(p > 0.01, "p = {p}");
    }

    #[test]
    fn zero_weight_region_never_drawn() {
        let specs = vec![spec("a", Vec3::z(), 2.0, 1.0), spec("b", -Vec3::z(), 2.0, 0.0)];
        let mesh = ball_with(&specs);
        let cfg = SamplingConfig::new(specs, DEFAULT_CUBOID, 1);
        let s = SourceSampler::new(&mesh, &cfg).unwrap();
        let mut rng = sample_rng(2, 0);
        for _ in 0..2000 {
            assert_eq!(s.region_of(s.sample(&mut rng).unwrap()), Some(0));
        }
    }

    #[test]
    fn concentrated_kernel_centers_on_mu() {
        let mu = Vec3::new(1.0, 1.0, 0.5).normalize();
        let specs = vec![spec("one", mu, 50.0, 1.0)];
        let mesh = ball_with(&specs);
        let cfg = SamplingConfig::new(specs, DEFAULT_CUBOID, 1);
        let s = SourceSampler::new(&mesh, &cfg).unwrap();
        let mut rng = sample_rng(3, 0);
        let c = mesh.centroid();
        let mut mean = Vec3::zeros();
        for _ in 0..10_000 {
            mean += mesh.direction_from_centroid(s.sample(&mut rng).unwrap(), &c);
        }
        let angle = mean.normalize().dot(&mu).clamp(-1.0, 1.0).acos().to_degrees();
        assert!(angle < 10.0, "angle {angle}");
    }

    #[test]
    fn equal_kappa_mixture_matches_weights() {
        let w = [0.1, 0.2, 0.3, 0.4];
        let dirs = [Vec3::x(), -Vec3::x(), Vec3::y(), -Vec3::y()];
        let specs: Vec<_> = (0..4).map(|i| spec(&format!("r{i}"), dirs[i], 3.0, w[i])).collect();
        let mesh = ball_with(&specs);
        let cfg = SamplingConfig::new(specs, DEFAULT_CUBOID, 1);
        let s = SourceSampler::new(&mesh, &cfg).unwrap();
        let mut rng = sample_rng(4, 0);
        let n = 40_000;
        let mut counts = [0usize; 4];
        for _ in 0..n {
            counts[s.region_of(s.sample(&mut rng).unwrap()).unwrap()] += 1;
        }
        for i in 0..4 {
            let sigma = (n as f64 * w[i] * (1.0 - w[i])).sqrt();
            assert!((counts[i] as f64 - n as f64 * w[i]).abs() <= 3.0 * sigma);
        }
    }

    #[test]
    fn degenerate_cuboid_is_a_point() {
        let cfg = SamplingConfig::new(vec![], [[0.01, 0.01], [-0.02, -0.02], [0.0, 0.0]], 0);
        let mut rng = sample_rng(5, 0);
        for _ in 0..100 {
            assert_eq!(sample_displacement_p(&cfg, &mut rng), Vec3::new(0.01, -0.02, 0.0));
        }
    }

    #[test]
    fn default_cuboid_means_and_support() {
        let cfg = SamplingConfig::new(vec![], DEFAULT_CUBOID, 0);
        let mut rng = sample_rng(6, 0);
        let n = 100_000;
        let mut sum = Vec3::zeros();
        for _ in 0..n {
            let u = sample_displacement_p(&cfg, &mut rng);
            for a in 0..3 {
                assert!(u[a] >= DEFAULT_CUBOID[a][0] && u[a] <= DEFAULT_CUBOID[a][1]);
            }
            sum += u;
        }
        for a in 0..3 {
            let [lo, hi] = DEFAULT_CUBOID[a];
            let sigma = (hi - lo) / 12f64.sqrt() / (n as f64).sqrt();
            assert!((sum[a] / n as f64 - 0.5 * (lo + hi)).abs() <= 3.0 * sigma);
        }
    }

    #[test]
    fn pair_from_two_regions_alternates() {
        let specs = vec![spec("a", Vec3::z(), 2.0, 0.5), spec("b", -Vec3::z(), 2.0, 0.5)];
        let mesh = ball_with(&specs);
        let cfg = SamplingConfig::new(specs, DEFAULT_CUBOID, 1);
        let s = SourceSampler::new(&mesh, &cfg).unwrap();
        let mut rng = sample_rng(7, 0);
        for _ in 0..2000 {
            let (a, b) = s.sample_pair(&mut rng).unwrap();
            assert_ne!(s.region_of(a), s.region_of(b));
        }
    }

    #[test]
    fn pair_frequencies_match_conditional() {
        let dirs = [Vec3::x(), -Vec3::x(), Vec3::y(), -Vec3::y(), Vec3::z()];
        let specs: Vec<_> = (0..5).map(|i| spec(&format!("r{i}"), dirs[i], 3.0, 0.2)).collect();
        let mesh = ball_with(&specs);
        let cfg = SamplingConfig::new(specs, DEFAULT_CUBOID, 1);
        let s = SourceSampler::new(&mesh, &cfg).unwrap();
        let mut rng = sample_rng(8, 0);
        let n = 100_000;
        let mut counts = vec![0usize; 25];
        for _ in 0..n {
            let (a, b) = s.sample_pair(&mut rng).unwrap();
            counts[5 * s.region_of(a).unwrap() + s.region_of(b).unwrap()] += 1;
        }
        // Enumerated pmf: P(i, j) = g_i · g_j / (1 − g_i) for i ≠ j.
        let mut obs = Vec::new();
        let mut exp = Vec::new();
        for i in 0..5 {
            for j in 0..5 {
                if i == j {
                    assert_eq!(counts[5 * i + j], 0);
                } else {
                    obs.push(counts[5 * i + j]);
                    exp.push(n as f64 * 0.2 * 0.2 / 0.8);
                }
            }
        }
        let p = chi2_p(&obs, &exp);
        assert!(p > 0.01, "p = {p}");
    }

    #[test]
    fn pair_needs_two_regions() {
        let specs = vec![spec("a", Vec3::z(), 2.0, 1.0)];
        let mesh = ball_with(&specs);
        let cfg = SamplingConfig::new(specs, DEFAULT_CUBOID, 1);
        assert!(sample_multi(&mesh, &cfg, &mut sample_rng(0, 0)).is_err());
    }

    #[test]
    fn narrow_cone_follows_normal() {
        let specs = vec![spec("all", Vec3::z(), 1.0, 1.0)];
        let mesh = ball_with(&specs);
        let mut cfg = SamplingConfig::new(specs, DEFAULT_CUBOID, 1);
        cfg.alpha_max = 1e-9;
        let q = QSampler::new(&mesh, &cfg).unwrap();
        let mut rng = sample_rng(9, 0);
        for _ in 0..1000 {
            let g = q.sample(&mesh, &mut rng);
            let n = q.normal_of(g.node.unwrap()).unwrap();
            if g.displacement.norm() > 0.0 {
                assert!((g.displacement.normalize() - n).amax() <= 1e-12);
            }
        }
    }

    #[test]
    fn hemisphere_cone_mean_cosine() {
        let specs = vec![spec("all", Vec3::z(), 1.0, 1.0)];
        let mesh = ball_with(&specs);
        let mut cfg = SamplingConfig::new(specs, DEFAULT_CUBOID, 1);
        cfg.alpha_max = std::f64::consts::FRAC_PI_2;
        cfg.u_max = 1.0;
        let q = QSampler::new(&mesh, &cfg).unwrap();
        let mut rng = sample_rng(10, 0);
        let n = 100_000;
        let mut sum = 0.0;
        for _ in 0..n {
            let g = q.sample(&mesh, &mut rng);
            let d = g.displacement.normalize();
            sum += d.dot(&q.normal_of(g.node.unwrap()).unwrap());
        }
        // cos θ uniform on [0, 1]: mean 1/2, std 1/√12.
        let sigma = (1.0 / 12f64).sqrt() / (n as f64).sqrt();
        assert!((sum / n as f64 - 0.5).abs() <= 3.0 * sigma);
    }

    #[test]
    fn cone_directions_point_outward() {
        let specs = vec![spec("all", Vec3::z(), 1.0, 1.0)];
        let mesh = ball_with(&specs);
        let cfg = SamplingConfig::new(specs, DEFAULT_CUBOID, 1);
        let q = QSampler::new(&mesh, &cfg).unwrap();
        let mut rng = sample_rng(11, 0);
        for _ in 0..5000 {
            let g = q.sample(&mesh, &mut rng);
            assert!(mesh.is_surface(g.node.unwrap()));
            let n = q.normal_of(g.node.unwrap()).unwrap();
            assert!(g.displacement.norm() <= cfg.u_max);
            if g.displacement.norm() > 0.0 {
                assert!(g.displacement.dot(&n) > 0.0);
            }
        }
    }

    #[test]
    fn zero_u_max_gives_zero_displacement() {
        let specs = vec![spec("all", Vec3::z(), 1.0, 1.0)];
        let mesh = ball_with(&specs);
        let mut cfg = SamplingConfig::new(specs, DEFAULT_CUBOID, 1);
        cfg.u_max = 0.0;
        let mut rng = sample_rng(12, 0);
        for _ in 0..100 {
            assert_eq!(sample_q(&mesh, &cfg, &mut rng).unwrap().displacement, Vec3::zeros());
        }
    }

    #[test]
    fn same_seed_same_stream() {
        let (mesh, specs) = synth::organ(synth::OrganShape::desk());
        let cfg = SamplingConfig::new(specs, DEFAULT_CUBOID, 1);
        let s = SourceSampler::new(&mesh, &cfg).unwrap();
        let draw = |stream| {
            let mut rng = sample_rng(42, stream);
            (0..50)
                .map(|_| (s.sample(&mut rng).unwrap(), sample_displacement_p(&cfg, &mut rng)))
                .collect::<Vec<_>>()
        };
        assert_eq!(draw(3), draw(3));
        assert_ne!(draw(3), draw(4));
    }

    #[test]
    fn organ_sources_are_free_surface_nodes() {
        let (mesh, specs) = synth::organ(synth::OrganShape::desk());
        let cfg = SamplingConfig::new(specs, DEFAULT_CUBOID, 1);
        let s = SourceSampler::new(&mesh, &cfg).unwrap();
        let mut rng = sample_rng(1, 0);
        for _ in 0..1000 {
            let n = s.sample(&mut rng).unwrap();
            assert!(mesh.is_surface(n));
            assert!(matches!(mesh.region(n), Region::Surface(_)));
        }
    }

    #[test]
    fn presets_and_validation() {
        assert_eq!(preset("desk-scale").unwrap().single_count(), 200);
        assert_eq!(preset("paper-scale").unwrap().multi_count(), 180);
        assert!(preset("huge").is_none());
        let mut cfg = SamplingConfig::new(synth::organ_region_specs(), DEFAULT_CUBOID, 0);
        assert!((cfg.u_max - 0.075).abs() < 1e-15);
        cfg.validate().unwrap();
        cfg.alpha_max = 2.0;
        assert!(cfg.validate().is_err());
        let json = serde_json::to_string(&cfg).unwrap();
        assert_eq!(serde_json::from_str::<SamplingConfig>(&json).unwrap(), cfg);
    }
}
