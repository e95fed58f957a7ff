//! Two-domain synthetic video features with a controllable domain shift.
//!
//! Each class owns a temporal template: sinusoids of a class-specific
//! frequency with per-dimension phases, laid over a random signal subspace.
//! Target frames are rotated by `theta` in every plane of a random
//! orthonormal basis and translated; only `shifted_fraction` of each target
//! video's frames receive the shift, so frames differ in how transferable
//! they are. Gaussian noise is added to every frame of both domains.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{write_features, Domain, Matrix, VideoFeatures};
use crate::manifest::{Manifest, ManifestHeader, VideoRecord};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSpec {
    pub n_classes: usize,
    pub feat_dim: usize,
    pub frames_min: usize,
    pub frames_max: usize,
    /// Labeled source videos and unlabeled target training videos, per class.
    pub videos_per_class: usize,
    /// Labeled target test videos per class.
    pub test_videos_per_class: usize,
    /// Dimension of the subspace carrying the class templates.
    pub signal_dim: usize,
    pub amplitude: f64,
    /// Lowest template frequency (cycles per video); class `c` adds `c * freq_step`.
    pub freq_min: f64,
    pub freq_step: f64,
    /// Per-video random phase offset, uniform in `[-phase_jitter, phase_jitter]`.
    pub phase_jitter: f64,
    /// Rotation angle in degrees applied to shifted target frames.
    pub theta_deg: f64,
    /// Norm of the translation added to shifted target frames.
    pub translation: f64,
    /// Fraction of target frames that receive the rotation and translation.
    pub shifted_fraction: f64,
    pub noise: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            n_classes: 6,
            feat_dim: 64,
            frames_min: 40,
            frames_max: 40,
            videos_per_class: 60,
            test_videos_per_class: 30,
            signal_dim: 8,
            amplitude: 1.0,
            freq_min: 1.0,
            freq_step: 0.5,
            phase_jitter: 0.3,
            theta_deg: 60.0,
            translation: 1.0,
            shifted_fraction: 0.5,
            noise: 0.3,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.n_classes < 2 {
            return Err("synth.n_classes must be at least 2".into());
        }
        if self.feat_dim < 2 || self.signal_dim == 0 || self.signal_dim > self.feat_dim {
            return Err(format!(
                "synth.signal_dim must be in 1..={} and feat_dim >= 2",
                self.feat_dim
            ));
        }
        if self.frames_min == 0 || self.frames_max < self.frames_min {
            return Err("synth.frames_min must be >= 1 and <= frames_max".into());
        }
        if self.videos_per_class == 0 || self.test_videos_per_class == 0 {
            return Err("synth video counts must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.shifted_fraction) {
            return Err("synth.shifted_fraction must be in [0, 1]".into());
        }
        if !(self.noise >= 0.0 && self.translation >= 0.0 && self.amplitude >= 0.0) {
            return Err("synth.noise, translation and amplitude must be >= 0".into());
        }
        Ok(())
    }
}

/// One generated video with its pre-shift frames kept for probing.
#[derive(Debug, Clone)]
pub struct SynthVideo {
    pub features: VideoFeatures,
    pub class: usize,
    /// Template plus noise, before any domain shift.
    pub clean: Matrix,
}

#[derive(Debug, Clone)]
pub struct SynthData {
    pub source: Vec<SynthVideo>,
    pub target_train: Vec<SynthVideo>,
    pub target_test: Vec<SynthVideo>,
}

fn gaussian<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `n` orthonormal vectors of length `d` by Gram-Schmidt on Gaussian draws.
fn orthonormal<R: Rng + ?Sized>(rng: &mut R, n: usize, d: usize) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(n);
    while basis.len() < n {
        let mut v: Vec<f64> = (0..d).map(|_| gaussian(rng)).collect();
        for b in &basis {
            let p = dot(&v, b);
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= p * y);
        }
        let norm = dot(&v, &v).sqrt();
        if norm > 1e-8 {
            basis.push(v.into_iter().map(|x| x / norm).collect());
        }
    }
    basis
}

/// Rotation by `theta` in each plane `(u_2i, u_2i+1)` of an orthonormal basis.
struct PlaneRotation {
    basis: Vec<Vec<f64>>,
    cos: f64,
    sin: f64,
}

impl PlaneRotation {
    fn apply(&self, x: &mut [f64]) {
        let delta: Vec<f64> = {
            let mut delta = vec![0.0; x.len()];
            for pair in self.basis.chunks_exact(2) {
                let (u, w) = (&pair[0], &pair[1]);
                let (a, b) = (dot(x, u), dot(x, w));
                let da = (self.cos - 1.0) * a - self.sin * b;
                let db = self.sin * a + (self.cos - 1.0) * b;
                for i in 0..x.len() {
                    delta[i] += da * u[i] + db * w[i];
                }
            }
            delta
        };
        x.iter_mut().zip(delta).for_each(|(v, d)| *v += d);
    }
}

struct World {
    signal: Vec<Vec<f64>>,
    phases: Vec<Vec<f64>>,
    rotation: PlaneRotation,
    translation: Vec<f64>,
}

impl World {
    fn new(spec: &SynthSpec, rng: &mut ChaCha8Rng) -> Self {
        let d = spec.feat_dim;
        let signal = orthonormal(rng, spec.signal_dim, d);
        let phases = (0..spec.n_classes)
            .map(|_| (0..spec.signal_dim).map(|_| rng.random_range(0.0..2.0 * PI)).collect())
            .collect();
        let theta = spec.theta_deg.to_radians();
        let rotation = PlaneRotation {
            basis: orthonormal(rng, d - d % 2, d),
            cos: theta.cos(),
            sin: theta.sin(),
        };
        let dir = orthonormal(rng, 1, d).remove(0);
        let translation = dir.into_iter().map(|x| x * spec.translation).collect();
        World {
            signal,
            phases,
            rotation,
            translation,
        }
    }

    fn video(
        &self,
        spec: &SynthSpec,
        rng: &mut ChaCha8Rng,
        id: String,
        class: usize,
        domain: Domain,
        labeled: bool,
    ) -> SynthVideo {
        let d = spec.feat_dim;
        let n = rng.random_range(spec.frames_min..=spec.frames_max);
        let jitter = if spec.phase_jitter > 0.0 {
            rng.random_range(-spec.phase_jitter..=spec.phase_jitter)
        } else {
            0.0
        };
        let freq = spec.freq_min + class as f64 * spec.freq_step;
        let mut clean = Vec::with_capacity(n * d);
        for t in 0..n {
            let tau = t as f64 / n as f64;
            let mut frame: Vec<f64> = (0..d).map(|_| spec.noise * gaussian(rng)).collect();
            for (j, v) in self.signal.iter().enumerate() {
                let s = spec.amplitude * (2.0 * PI * freq * tau + self.phases[class][j] + jitter).sin();
                frame.iter_mut().zip(v).for_each(|(x, b)| *x += s * b);
            }
            clean.extend(frame);
        }
        let mut data = clean.clone();
        if domain == Domain::Target {
            let n_shift = (spec.shifted_fraction * n as f64).round() as usize;
            for t in sample(rng, n, n_shift).into_iter() {
                let frame = &mut data[t * d..(t + 1) * d];
                self.rotation.apply(frame);
                frame.iter_mut().zip(&self.translation).for_each(|(x, b)| *x += b);
            }
        }
        SynthVideo {
            features: VideoFeatures {
                video_id: id,
                domain,
                label: labeled.then_some(class),
                frames: Matrix { rows: n, cols: d, data },
            },
            class,
            clean: Matrix {
                rows: n,
                cols: d,
                data: clean,
            },
        }
    }
}

/// Generates the three splits in memory. Class balance is exact.
pub fn generate(spec: &SynthSpec) -> Result<SynthData> {
    spec.validate().map_err(Error::Config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let world = World::new(spec, &mut rng);
    let mut split = |prefix: &str, domain: Domain, per_class: usize, labeled: bool| {
        let mut out = Vec::with_capacity(per_class * spec.n_classes);
        for i in 0..per_class {
            for c in 0..spec.n_classes {
                let id = format!("{prefix}_{c:02}_{i:04}");
                out.push(world.video(spec, &mut rng, id, c, domain, labeled));
            }
        }
        out
    };
    let source = split("src", Domain::Source, spec.videos_per_class, true);
    let target_train = split("tgt", Domain::Target, spec.videos_per_class, false);
    let target_test = split("test", Domain::Target, spec.test_videos_per_class, true);
    Ok(SynthData {
        source,
        target_train,
        target_test,
    })
}

pub const SOURCE_MANIFEST: &str = "source_train.jsonl";
pub const TARGET_MANIFEST: &str = "target_train.jsonl";
pub const TEST_MANIFEST: &str = "target_test.jsonl";

/// Paths of the manifests written by [`write_dataset`].
#[derive(Debug, Clone)]
pub struct SynthPaths {
    pub source: PathBuf,
    pub target_train: PathBuf,
    pub target_test: PathBuf,
}

/// Generates the dataset and writes feature files plus three manifests under `out`.
pub fn write_dataset(spec: &SynthSpec, out: &Path) -> Result<SynthPaths> {
    let data = generate(spec)?;
    fs::create_dir_all(out.join("features"))?;
    let classes: Vec<String> = (0..spec.n_classes).map(|c| format!("class_{c:02}")).collect();
    let write = |name: &str, videos: &[SynthVideo]| -> Result<PathBuf> {
        let mut records = Vec::with_capacity(videos.len());
        for v in videos {
            let rel = format!("features/{}.tfat", v.features.video_id);
            write_features(&v.features, &out.join(&rel))?;
            records.push(VideoRecord {
                id: v.features.video_id.clone(),
                path: rel,
                domain: v.features.domain,
                n_frames: v.features.n_frames(),
                label: v.features.label,
            });
        }
        let header = ManifestHeader {
            dataset: format!("synthetic-{}", name.trim_end_matches(".jsonl")),
            feat_dim: spec.feat_dim,
            classes: classes.clone(),
        };
        let path = out.join(name);
        Manifest::new(header, records, out.to_path_buf()).save(&path)?;
        Ok(path)
    };
    Ok(SynthPaths {
        source: write(SOURCE_MANIFEST, &data.source)?,
        target_train: write(TARGET_MANIFEST, &data.target_train)?,
        target_test: write(TEST_MANIFEST, &data.target_test)?,
    })
}
