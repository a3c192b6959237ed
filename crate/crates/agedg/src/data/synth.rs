//! Synthetic stand-in dataset with a controllable age-group shift.
//!
//! Each sample draws a uniform emotion class, places valence/arousal near
//! that class's position on the affect circumplex, and emits an input
//! vector built from a class prototype plus affect directions plus
//! Gaussian noise. Domains differ by a rotation whose angle grows
//! linearly with the domain ordinal, so adjacent age groups are more
//! alike than distant ones. Everything is a pure function of the seed.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::data::{
    mix_seed, split_by_domain, AffectAnnotation, AgeGroup, DomainSplit, EmotionClass, InputShape,
    Sample, DOMAIN_COUNT, EMOTION_CLASS_COUNT,
};
use crate::error::{AgedgError, Result};

/// Per-class (valence, arousal) means, indexed by emotion class.
const AFFECT_CENTERS: [(f64, f64); EMOTION_CLASS_COUNT] = [
    (0.00, 0.00),   // Neutral
    (0.80, 0.50),   // Happy
    (-0.70, -0.35), // Sad
    (0.25, 0.80),   // Surprise
    (-0.60, 0.70),  // Fear
    (-0.70, 0.30),  // Disgust
    (-0.65, 0.60),  // Anger
    (-0.50, 0.20),  // Contempt
];

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    /// Samples generated per domain before the val/test split.
    pub counts: [usize; DOMAIN_COUNT],
    /// Latent input dimension (also the emitted dimension in vector mode).
    pub input_dim: usize,
    /// When set, emit single-channel h x w images instead of raw vectors;
    /// the latent vector is projected to pixels and squashed into [0, 1].
    #[serde(skip_serializing_if = "Option::is_none")]
    pub image: Option<(usize, usize)>,
    /// Rotation angle per ordinal step between adjacent domains, radians.
    pub shift: f64,
    /// Std-dev of the additive input noise, per coordinate.
    pub noise: f64,
    /// Norm of each class prototype.
    pub class_scale: f64,
    /// Weight of the valence/arousal directions in the input.
    pub affect_scale: f64,
    /// Std-dev of the jitter around the class affect center.
    pub affect_noise: f64,
    pub val_fraction: f64,
    pub test_fraction: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            counts: [300; DOMAIN_COUNT],
            input_dim: 20,
            image: None,
            shift: 0.4,
            noise: 0.35,
            class_scale: 1.0,
            affect_scale: 0.5,
            affect_noise: 0.1,
            val_fraction: 0.15,
            test_fraction: 0.15,
        }
    }
}

impl SynthSpec {
    pub fn shape(&self) -> InputShape {
        match self.image {
            Some((h, w)) => InputShape::Image { c: 1, h, w },
            None => InputShape::Vector { dim: self.input_dim },
        }
    }

    fn validate(&self) -> Result<()> {
        if self.input_dim < 2 {
            return Err(AgedgError::Config(format!(
                "input_dim {} too small, need at least 2",
                self.input_dim
            )));
        }
        if self.counts.iter().any(|&c| c < 1) {
            return Err(AgedgError::Config(
                "every domain needs at least one sample".to_string(),
            ));
        }
        if !(self.shift.is_finite() && self.shift >= 0.0) {
            return Err(AgedgError::Config(format!("bad shift {}", self.shift)));
        }
        if let Some((h, w)) = self.image {
            if h < 4 || w < 4 {
                return Err(AgedgError::Config(format!(
                    "image shape {h}x{w} too small, need at least 4x4"
                )));
            }
        }
        Ok(())
    }
}

/// Fixed directions shared by all domains: one prototype per class, plus
/// a valence and an arousal direction, all unit norm.
struct Prototypes {
    class: Vec<Vec<f64>>,
    val_dir: Vec<f64>,
    ar_dir: Vec<f64>,
    /// Row-major (pixels x latent) projection, image mode only.
    pixel_proj: Option<Vec<f64>>,
}

fn unit_vector(d: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let normal = Normal::new(0.0, 1.0).unwrap();
    let mut v: Vec<f64> = (0..d).map(|_| normal.sample(rng)).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    for x in &mut v {
        *x /= norm;
    }
    v
}

fn make_prototypes(spec: &SynthSpec, seed: u64) -> Prototypes {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 0x9307));
    let d = spec.input_dim;
    let class = (0..EMOTION_CLASS_COUNT).map(|_| unit_vector(d, &mut rng)).collect();
    let val_dir = unit_vector(d, &mut rng);
    let ar_dir = unit_vector(d, &mut rng);
    let pixel_proj = spec.image.map(|(h, w)| {
        let normal = Normal::new(0.0, (1.0 / d as f64).sqrt()).unwrap();
        (0..h * w * d).map(|_| normal.sample(&mut rng)).collect()
    });
    Prototypes {
        class,
        val_dir,
        ar_dir,
        pixel_proj,
    }
}

/// Rotates consecutive coordinate pairs (0,1), (2,3), ... by `angle`;
/// a trailing odd coordinate stays put.
fn rotate_pairs(v: &mut [f64], angle: f64) {
    if angle == 0.0 {
        return;
    }
    let (sin, cos) = angle.sin_cos();
    for pair in v.chunks_exact_mut(2) {
        let (a, b) = (pair[0], pair[1]);
        pair[0] = cos * a - sin * b;
        pair[1] = sin * a + cos * b;
    }
}

pub fn synthesize_dataset(spec: &SynthSpec, seed: u64) -> Result<DomainSplit> {
    spec.validate()?;
    let protos = make_prototypes(spec, seed);
    let d = spec.input_dim;
    let normal = Normal::new(0.0, 1.0).unwrap();

    let mut samples = Vec::with_capacity(spec.counts.iter().sum());
    for g in AgeGroup::ALL {
        let o = g.ordinal();
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 0xD0A1 + o as u64));
        let angle = spec.shift * o as f64;
        let (lo, hi) = g.bounds();
        for i in 0..spec.counts[o] {
            let class = EmotionClass::from_index(rng.random_range(0..EMOTION_CLASS_COUNT)).unwrap();
            let (vc, ac) = AFFECT_CENTERS[class.index()];
            let valence = (vc + spec.affect_noise * normal.sample(&mut rng)).clamp(-1.0, 1.0);
            let arousal = (ac + spec.affect_noise * normal.sample(&mut rng)).clamp(-1.0, 1.0);

            let mut latent = vec![0.0; d];
            let proto = &protos.class[class.index()];
            for j in 0..d {
                latent[j] = spec.class_scale * proto[j]
                    + spec.affect_scale * (valence * protos.val_dir[j] + arousal * protos.ar_dir[j])
                    + spec.noise * normal.sample(&mut rng);
            }
            rotate_pairs(&mut latent, angle);

            let input = match (&protos.pixel_proj, spec.image) {
                (Some(proj), Some((h, w))) => {
                    let mut img = Vec::with_capacity(h * w);
                    for p in 0..h * w {
                        let z: f64 = (0..d).map(|j| proj[p * d + j] * latent[j]).sum();
                        img.push(0.5 * (1.0 + z.tanh()));
                    }
                    img
                }
                _ => latent,
            };

            // Ages drawn uniformly inside the bin keep the domain label
            // consistent with binning by construction.
            let age = rng.random_range(lo..hi);
            samples.push(Sample {
                id: format!("syn-{}-{i:04}", g.label()),
                input,
                apparent_age: age,
                annotation: AffectAnnotation {
                    emotion: class,
                    valence,
                    arousal,
                },
                domain: g,
            });
        }
    }

    split_by_domain(
        samples,
        spec.shape(),
        spec.val_fraction,
        spec.test_fraction,
        mix_seed(seed, 0x51E7),
    )
}
