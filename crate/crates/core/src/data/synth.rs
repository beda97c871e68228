//! Synthetic multi-domain identity data.
//!
//! Identities are standard-normal prototypes in a shared latent space. A
//! fixed embedding maps a prototype to `(κ − 1) × d_in` tokens; each domain
//! then applies its own affine map per token, each camera another one, and
//! finally Gaussian noise is added.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::checkpoint::{index_tensor, read_indices, Checkpoint};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAX_CONDITION: f64 = 100.0;

/// `row ↦ row · matrix + bias`.
#[derive(Debug, Clone, PartialEq)]
pub struct Affine {
    pub matrix: Tensor,
    pub bias: Vec<f64>,
}

impl Affine {
    pub fn identity(d: usize) -> Self {
        Self {
            matrix: Tensor::identity(d),
            bias: vec![0.0; d],
        }
    }

    /// Random rotation whose angle grows with `rotation`, column-rescaled by
    /// factors in `[1/stretch, stretch]`, plus a Gaussian bias.
    pub fn random(rng: &mut ChaCha8Rng, d: usize, rotation: f64, stretch: f64, bias_sigma: f64) -> Self {
        let mut m = cayley_rotation(rng, d, rotation);
        let log_s = stretch.max(1.0).ln();
        let scales: Vec<f64> = (0..d).map(|_| (rng.random_range(-1.0..=1.0) * log_s).exp()).collect();
        for i in 0..d {
            for (j, s) in scales.iter().enumerate() {
                m.set(i, j, m.get(i, j) * s);
            }
        }
        let bias = (0..d).map(|_| bias_sigma * gaussian(rng)).collect();
        Self { matrix: m, bias }
    }

    pub fn dim(&self) -> usize {
        self.bias.len()
    }

    pub fn apply_row(&self, row: &[f64]) -> Vec<f64> {
        let d = self.dim();
        let mut out = self.bias.clone();
        for (k, &x) in row.iter().enumerate() {
            let w = &self.matrix.data()[k * d..(k + 1) * d];
            for (o, wv) in out.iter_mut().zip(w) {
                *o += x * wv;
            }
        }
        out
    }

    /// Ratio of extreme singular values.
    pub fn condition_number(&self) -> f64 {
        let d = self.dim();
        let m = DMatrix::from_row_slice(d, d, self.matrix.data());
        let sv = m.singular_values();
        let max = sv.max();
        let min = sv.min();
        if min == 0.0 {
            f64::INFINITY
        } else {
            max / min
        }
    }

    fn validate(&self, what: &str) -> Result<()> {
        let d = self.dim();
        if self.matrix.shape() != [d, d] || !self.matrix.is_finite() || self.bias.iter().any(|b| !b.is_finite()) {
            return Err(Error::Config(format!("{what}: malformed affine map")));
        }
        let cond = self.condition_number();
        if !(cond <= MAX_CONDITION) {
            return Err(Error::Config(format!("{what}: condition number {cond:.1} exceeds {MAX_CONDITION}")));
        }
        Ok(())
    }
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Cayley transform `(I − S)⁻¹ (I + S)` of a random skew-symmetric `S`
/// scaled by `strength`; exactly orthogonal.
fn cayley_rotation(rng: &mut ChaCha8Rng, d: usize, strength: f64) -> Tensor {
    let mut s = DMatrix::<f64>::zeros(d, d);
    for i in 0..d {
        for j in i + 1..d {
            let v = gaussian(rng) * strength / (d as f64).sqrt();
            s[(i, j)] = v;
            s[(j, i)] = -v;
        }
    }
    let eye = DMatrix::<f64>::identity(d, d);
    let q = (&eye - &s)
        .lu()
        .solve(&(&eye + &s))
        .expect("I − S is invertible for skew-symmetric S");
    Tensor::from_fn(d, d, |i, j| q[(i, j)])
}

#[derive(Debug, Clone, PartialEq)]
pub struct DomainSpec {
    pub n_identities: usize,
    /// Identities held out for query/gallery; the rest form the train split.
    pub eval_identities: usize,
    pub samples_per_identity: usize,
    pub n_cameras: usize,
    pub domain_transform: Affine,
    pub camera_transforms: Vec<Affine>,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl DomainSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_identities == 0 || self.samples_per_identity == 0 || self.n_cameras == 0 {
            return Err(Error::Config("domain needs identities, samples and cameras".into()));
        }
        if self.eval_identities > self.n_identities {
            return Err(Error::Config("more held-out identities than identities".into()));
        }
        if self.eval_identities > 0 && (self.samples_per_identity < 2 || self.n_cameras < 2) {
            return Err(Error::Config(
                "query/gallery splits need at least two samples and two cameras per identity".into(),
            ));
        }
        if self.camera_transforms.len() != self.n_cameras {
            return Err(Error::Config(format!(
                "{} camera transforms for {} cameras",
                self.camera_transforms.len(),
                self.n_cameras
            )));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(Error::Config(format!("noise sigma {} must be nonnegative", self.noise_sigma)));
        }
        self.domain_transform.validate("domain transform")?;
        let d = self.domain_transform.dim();
        for (c, cam) in self.camera_transforms.iter().enumerate() {
            if cam.dim() != d {
                return Err(Error::Config(format!("camera {c} transform has dim {}", cam.dim())));
            }
            cam.validate(&format!("camera {c} transform"))?;
        }
        Ok(())
    }

    pub fn train_identities(&self) -> usize {
        self.n_identities - self.eval_identities
    }
}

/// Generator knobs for one domain; transforms are drawn from `seed`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DomainRecipe {
    pub n_identities: usize,
    pub eval_identities: usize,
    pub samples_per_identity: usize,
    pub n_cameras: usize,
    /// Rotation strength of the domain map.
    pub shift: f64,
    /// Column rescaling range of the domain map.
    pub stretch: f64,
    pub bias_sigma: f64,
    pub camera_shift: f64,
    pub camera_bias_sigma: f64,
    pub noise_sigma: f64,
}

impl DomainRecipe {
    pub fn build(&self, d_in: usize, seed: u64) -> Result<DomainSpec> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let domain_transform = Affine::random(&mut rng, d_in, self.shift, self.stretch, self.bias_sigma);
        let camera_transforms = (0..self.n_cameras)
            .map(|_| Affine::random(&mut rng, d_in, self.camera_shift, 1.0, self.camera_bias_sigma))
            .collect();
        let spec = DomainSpec {
            n_identities: self.n_identities,
            eval_identities: self.eval_identities,
            samples_per_identity: self.samples_per_identity,
            n_cameras: self.n_cameras,
            domain_transform,
            camera_transforms,
            noise_sigma: self.noise_sigma,
            seed,
        };
        spec.validate()?;
        Ok(spec)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// `(κ − 1) × d_in`.
    pub tokens: Tensor,
    /// Globally unique across domains.
    pub identity: usize,
    pub camera: usize,
    pub domain: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDataset {
    pub domain: usize,
    pub train: Vec<Sample>,
    pub query: Vec<Sample>,
    pub gallery: Vec<Sample>,
    /// Latent prototype of every identity, indexed by `identity - first_identity`.
    pub prototypes: Vec<Vec<f64>>,
    pub first_identity: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Query,
    Gallery,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Query, Split::Gallery];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Query => "query",
            Split::Gallery => "gallery",
        }
    }
}

impl SyntheticDataset {
    pub fn split(&self, split: Split) -> &[Sample] {
        match split {
            Split::Train => &self.train,
            Split::Query => &self.query,
            Split::Gallery => &self.gallery,
        }
    }

    pub fn identity_count(&self, split: Split) -> usize {
        let mut ids: Vec<usize> = self.split(split).iter().map(|s| s.identity).collect();
        ids.sort_unstable();
        ids.dedup();
        ids.len()
    }

    pub fn camera_count(&self) -> usize {
        let mut cams: Vec<usize> = Split::ALL
            .iter()
            .flat_map(|&s| self.split(s).iter().map(|x| x.camera))
            .collect();
        cams.sort_unstable();
        cams.dedup();
        cams.len()
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut c = Checkpoint::new();
        c.set_meta("domain", self.domain as f64).expect("fresh container");
        c.set_meta("first_identity", self.first_identity as f64).expect("fresh container");
        if let Some(rows) = (!self.prototypes.is_empty()).then(|| Tensor::stack_rows(&self.prototypes)) {
            c.insert("prototypes", rows.expect("equal-length prototypes")).expect("fresh container");
        }
        for split in Split::ALL {
            let samples = self.split(split);
            let Some(first) = samples.first() else { continue };
            let (t, d) = (first.tokens.rows(), first.tokens.cols());
            let data: Vec<f64> = samples.iter().flat_map(|s| s.tokens.data().iter().copied()).collect();
            let tokens = Tensor::from_vec(vec![samples.len(), t, d], data).expect("uniform token shapes");
            let ids: Vec<usize> = samples.iter().map(|s| s.identity).collect();
            let cams: Vec<usize> = samples.iter().map(|s| s.camera).collect();
            let name = split.name();
            c.insert(format!("{name}/tokens"), tokens).expect("fresh container");
            c.insert(format!("{name}/ids"), index_tensor(&ids)).expect("fresh container");
            c.insert(format!("{name}/cams"), index_tensor(&cams)).expect("fresh container");
        }
        c
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        let domain = c.meta_usize("domain")?;
        let first_identity = c.meta_usize("first_identity")?;
        let prototypes = match c.get("prototypes") {
            Some(p) => (0..p.rows()).map(|r| p.row(r).to_vec()).collect(),
            None => Vec::new(),
        };
        let mut splits: [Vec<Sample>; 3] = Default::default();
        for (slot, split) in splits.iter_mut().zip(Split::ALL) {
            let name = split.name();
            let Some(tokens) = c.get(&format!("{name}/tokens")) else { continue };
            if tokens.rank() != 3 {
                return Err(Error::Data(format!("{name}/tokens must have rank 3")));
            }
            let ids = read_indices(c.require(&format!("{name}/ids"))?, "ids")?;
            let cams = read_indices(c.require(&format!("{name}/cams"))?, "cams")?;
            let (n, t, d) = (tokens.shape()[0], tokens.shape()[1], tokens.shape()[2]);
            if ids.len() != n || cams.len() != n {
                return Err(Error::Data(format!("{name}: {n} samples, {} ids, {} cams", ids.len(), cams.len())));
            }
            *slot = (0..n)
                .map(|i| Sample {
                    tokens: Tensor::matrix(t, d, tokens.data()[i * t * d..(i + 1) * t * d].to_vec())
                        .expect("slice of the right length"),
                    identity: ids[i],
                    camera: cams[i],
                    domain,
                })
                .collect();
        }
        let [train, query, gallery] = splits;
        Ok(Self {
            domain,
            train,
            query,
            gallery,
            prototypes,
            first_identity,
        })
    }

    /// One line of counts, in the order cameras, images, ids, train, query, gallery.
    pub fn manifest_line(&self, role: &str) -> String {
        let images = self.train.len() + self.query.len() + self.gallery.len();
        format!(
            "domain={} role={role} cameras={} images={images} ids={} train_ids={} train={} query={} gallery={}",
            self.domain,
            self.camera_count(),
            self.prototypes.len(),
            self.identity_count(Split::Train),
            self.train.len(),
            self.query.len(),
            self.gallery.len()
        )
    }
}

/// Shared latent-to-token embedding, `latent × (tokens · d_in)`.
pub fn shared_embedding(base_seed: u64, latent_dim: usize, tokens: usize, d_in: usize) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(base_seed);
    let scale = 1.0 / (latent_dim as f64).sqrt();
    Tensor::from_fn(latent_dim, tokens * d_in, |_, _| gaussian(&mut rng) * scale)
}

/// Draws every domain. Identity ids are offset so domains never share an id.
pub fn generate_domains(
    base_seed: u64,
    specs: &[DomainSpec],
    latent_dim: usize,
    tokens: usize,
) -> Result<Vec<SyntheticDataset>> {
    if latent_dim == 0 || tokens == 0 {
        return Err(Error::Config("latent dim and token count must be positive".into()));
    }
    let Some(first) = specs.first() else {
        return Ok(Vec::new());
    };
    let d_in = first.domain_transform.dim();
    for spec in specs {
        spec.validate()?;
        if spec.domain_transform.dim() != d_in {
            return Err(Error::Config("all domains must share the token width".into()));
        }
    }
    let embedding = shared_embedding(base_seed, latent_dim, tokens, d_in);
    let mut offset = 0;
    specs
        .iter()
        .enumerate()
        .map(|(domain, spec)| {
            let ds = generate_domain(base_seed, domain, offset, spec, &embedding, tokens);
            offset += spec.n_identities;
            ds
        })
        .collect()
}

fn generate_domain(
    base_seed: u64,
    domain: usize,
    first_identity: usize,
    spec: &DomainSpec,
    embedding: &Tensor,
    tokens: usize,
) -> Result<SyntheticDataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(base_seed);
    let latent_dim = embedding.rows();
    let d_in = spec.domain_transform.dim();
    let prototypes: Vec<Vec<f64>> = (0..spec.n_identities)
        .map(|_| (0..latent_dim).map(|_| gaussian(&mut rng)).collect())
        .collect();
    let mut ds = SyntheticDataset {
        domain,
        train: Vec::new(),
        query: Vec::new(),
        gallery: Vec::new(),
        prototypes,
        first_identity,
    };
    let train_ids = spec.train_identities();
    for local in 0..spec.n_identities {
        let z = &ds.prototypes[local];
        let flat: Vec<f64> = (0..tokens * d_in)
            .map(|c| (0..latent_dim).map(|k| z[k] * embedding.get(k, c)).sum())
            .collect();
        for j in 0..spec.samples_per_identity {
            let camera = (local + j) % spec.n_cameras;
            let cam = &spec.camera_transforms[camera];
            let mut data = Vec::with_capacity(tokens * d_in);
            for t in 0..tokens {
                let row = spec.domain_transform.apply_row(&flat[t * d_in..(t + 1) * d_in]);
                data.extend(cam.apply_row(&row));
            }
            if spec.noise_sigma > 0.0 {
                for v in &mut data {
                    *v += spec.noise_sigma * gaussian(&mut rng);
                }
            }
            let sample = Sample {
                tokens: Tensor::matrix(tokens, d_in, data)?,
                identity: first_identity + local,
                camera,
                domain,
            };
            if local < train_ids {
                ds.train.push(sample);
            } else if j == 0 {
                ds.query.push(sample);
            } else {
                ds.gallery.push(sample);
            }
        }
    }
    Ok(ds)
}
