//! In-memory datasets and batch assembly.

use std::collections::HashMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::features::{Domain, VideoFeatures};
use crate::manifest::Manifest;
use crate::sampling::{segment_sample, SampleMode};
use crate::tensor::Tensor;

/// All videos of a manifest held in memory.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub feat_dim: usize,
    pub n_classes: usize,
    pub videos: Vec<VideoFeatures>,
    index: HashMap<String, usize>,
}

impl Dataset {
    pub fn new(feat_dim: usize, n_classes: usize, videos: Vec<VideoFeatures>) -> Result<Self> {
        let mut index = HashMap::new();
        for (i, v) in videos.iter().enumerate() {
            if v.feat_dim() != feat_dim {
                return Err(Error::Data(format!(
                    "video {} has feat_dim {}, dataset uses {feat_dim}",
                    v.video_id,
                    v.feat_dim()
                )));
            }
            if index.insert(v.video_id.clone(), i).is_some() {
                return Err(Error::Data(format!("duplicate video id {}", v.video_id)));
            }
        }
        Ok(Dataset {
            feat_dim,
            n_classes,
            videos,
            index,
        })
    }

    pub fn from_manifest(m: &Manifest) -> Result<Self> {
        Dataset::new(m.feat_dim(), m.n_classes(), m.load_all()?)
    }

    pub fn get(&self, id: &str) -> Result<&VideoFeatures> {
        self.index
            .get(id)
            .map(|&i| &self.videos[i])
            .ok_or_else(|| Error::Lookup(id.to_string()))
    }

    pub fn ids(&self) -> Vec<String> {
        self.videos.iter().map(|v| v.video_id.clone()).collect()
    }

    pub fn len(&self) -> usize {
        self.videos.len()
    }

    pub fn is_empty(&self) -> bool {
        self.videos.is_empty()
    }

    pub fn labeled_ids(&self) -> Vec<String> {
        self.videos
            .iter()
            .filter(|v| v.label.is_some())
            .map(|v| v.video_id.clone())
            .collect()
    }
}

/// `x` is `[B × k × feat_dim]`.
#[derive(Debug, Clone)]
pub struct Batch {
    pub x: Tensor,
    pub ids: Vec<String>,
    pub labels: Vec<Option<usize>>,
    pub domains: Vec<Domain>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn rows_of(&self, d: Domain) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.domains[i] == d).collect()
    }

    /// Stacks two batches along the video axis.
    pub fn concat(a: Batch, b: Batch) -> Result<Batch> {
        if a.x.shape()[1..] != b.x.shape()[1..] {
            return Err(Error::Data(format!(
                "cannot stack batches {:?} and {:?}",
                a.x.shape(),
                b.x.shape()
            )));
        }
        let mut shape = a.x.shape().to_vec();
        shape[0] += b.x.shape()[0];
        let mut data = a.x.into_data();
        data.extend(b.x.into_data());
        let mut ids = a.ids;
        ids.extend(b.ids);
        let mut labels = a.labels;
        labels.extend(b.labels);
        let mut domains = a.domains;
        domains.extend(b.domains);
        Ok(Batch {
            x: Tensor::new(shape, data)?,
            ids,
            labels,
            domains,
        })
    }
}

/// Samples `k` frames from each listed video and stacks them. Deterministic
/// in `(ids, rng state, mode)`.
pub fn make_batch<R: Rng + ?Sized>(
    data: &Dataset,
    ids: &[String],
    k: usize,
    mode: SampleMode,
    rng: &mut R,
) -> Result<Batch> {
    if ids.is_empty() {
        return Err(Error::Usage("empty batch".into()));
    }
    let d = data.feat_dim;
    let mut x = Vec::with_capacity(ids.len() * k * d);
    let mut labels = Vec::with_capacity(ids.len());
    let mut domains = Vec::with_capacity(ids.len());
    for id in ids {
        let v = data.get(id)?;
        for f in segment_sample(v.n_frames(), k, mode, rng) {
            x.extend_from_slice(v.frame(f));
        }
        labels.push(v.label);
        domains.push(v.domain);
    }
    Ok(Batch {
        x: Tensor::new(vec![ids.len(), k, d], x)?,
        ids: ids.to_vec(),
        labels,
        domains,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::Matrix;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toy(n_videos: usize, n_frames: usize, d: usize) -> Dataset {
        let videos = (0..n_videos)
            .map(|i| VideoFeatures {
                video_id: format!("v{i}"),
                domain: if i % 2 == 0 { Domain::Source } else { Domain::Target },
                label: Some(i % 3),
                frames: Matrix {
                    rows: n_frames,
                    cols: d,
                    data: (0..n_frames * d).map(|j| (i * 1000 + j) as f64).collect(),
                },
            })
            .collect();
        Dataset::new(d, 3, videos).unwrap()
    }

    #[test]
    fn shape_and_metadata() {
        let ds = toy(4, 10, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let ids = vec!["v0".to_string(), "v1".to_string()];
        let b = make_batch(&ds, &ids, 3, SampleMode::TrainRandom, &mut rng).unwrap();
        assert_eq!(b.x.shape(), &[2, 3, 5]);
        assert_eq!(b.domains, vec![Domain::Source, Domain::Target]);
        assert_eq!(b.labels, vec![Some(0), Some(1)]);
    }

    #[test]
    fn same_seed_same_batch() {
        let ds = toy(4, 50, 5);
        let ids = ds.ids();
        let a = make_batch(&ds, &ids, 6, SampleMode::TrainRandom, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = make_batch(&ds, &ids, 6, SampleMode::TrainRandom, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a.x, b.x);
    }

    #[test]
    fn different_seeds_give_different_frames() {
        let ds = toy(1, 1000, 1);
        let ids = ds.ids();
        let batches: Vec<Vec<f64>> = (0..100)
            .map(|s| {
                make_batch(&ds, &ids, 4, SampleMode::TrainRandom, &mut ChaCha8Rng::seed_from_u64(s))
                    .unwrap()
                    .x
                    .into_data()
            })
            .collect();
        let mut distinct = batches.clone();
        distinct.sort_by(|a, b| a.partial_cmp(b).unwrap());
        distinct.dedup();
        // 250^4 possible index sets; collisions among 100 draws are vanishingly rare.
        assert_eq!(distinct.len(), 100);
    }

    #[test]
    fn missing_id_is_lookup_error() {
        let ds = toy(2, 4, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let err = make_batch(&ds, &["nope".to_string()], 2, SampleMode::EvalCenter, &mut rng);
        assert!(matches!(err, Err(Error::Lookup(_))));
    }
}
