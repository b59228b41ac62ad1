use std::fs;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::domain::{generate_pretrain_sample, generate_sample, DomainSpec, Sample, IMAGE_SIZE};
use super::seed::{rng_for, sub_seed};
use crate::engine::{LabelMap, Tensor};
use crate::error::{Error, Result};

const STREAM_EXPERIMENT: u64 = 101;
const STREAM_PRETRAIN: u64 = 202;
const STREAM_SHUFFLE: u64 = 303;

/// Sizes, domains and master seed of a dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitConfig {
    pub seed: u64,
    pub classes: usize,
    pub size: usize,
    pub domains: Vec<DomainSpec>,
    pub labeled_domain: usize,
    pub labeled: usize,
    pub unlabeled: usize,
    pub test_per_domain: usize,
    pub pretrain_domains: Vec<DomainSpec>,
    pub pretrain_count: usize,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            seed: 2024,
            classes: 1,
            size: IMAGE_SIZE,
            domains: DomainSpec::experiment_defaults(),
            labeled_domain: 0,
            labeled: 10,
            unlabeled: 300,
            test_per_domain: 60,
            pretrain_domains: DomainSpec::pretrain_defaults(),
            pretrain_count: 512,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Role {
    Labeled,
    Unlabeled,
    Test,
    Pretrain,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Entry {
    pub id: u64,
    pub role: Role,
    /// Index into the experiment domains, or `domains.len() + j` for
    /// pretraining domain `j`.
    pub domain: usize,
    pub seed: u64,
}

/// Deterministic assignment of every sample id to a role and a domain.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub config: SplitConfig,
    pub entries: Vec<Entry>,
}

impl SplitManifest {
    pub fn ids(&self, role: Role) -> Vec<u64> {
        self.entries.iter().filter(|e| e.role == role).map(|e| e.id).collect()
    }

    pub fn test_ids(&self, domain: usize) -> Vec<u64> {
        self.entries
            .iter()
            .filter(|e| e.role == Role::Test && e.domain == domain)
            .map(|e| e.id)
            .collect()
    }

    pub fn domain_spec(&self, domain: usize) -> Option<&DomainSpec> {
        let k = self.config.domains.len();
        if domain < k {
            self.config.domains.get(domain)
        } else {
            self.config.pretrain_domains.get(domain - k)
        }
    }
}

/// Assign ids: labeled from one domain, a balanced shuffled unlabeled
/// mixture, per-domain test sets, then the pretraining corpus on its own
/// seed stream.
pub fn build_split(config: &SplitConfig) -> Result<SplitManifest> {
    let k = config.domains.len();
    if k < 2 {
        return Err(Error::Config(format!("{k} experiment domains, need at least 2")));
    }
    if config.labeled_domain >= k {
        return Err(Error::Config(format!("labeled domain {} of {k}", config.labeled_domain)));
    }
    if config.labeled == 0 || config.unlabeled < config.labeled || config.test_per_domain == 0 {
        return Err(Error::Config(format!(
            "insufficient samples: {} labeled, {} unlabeled, {} test per domain",
            config.labeled, config.unlabeled, config.test_per_domain
        )));
    }
    if !(1..=2).contains(&config.classes) || config.size % 8 != 0 || config.size < 16 {
        return Err(Error::Config(format!(
            "{} classes at size {}",
            config.classes, config.size
        )));
    }
    for d in config.domains.iter().chain(&config.pretrain_domains) {
        d.validate()?;
    }
    let mut entries = Vec::new();
    let mut push = |role, domain, stream| {
        let id = entries.len() as u64;
        entries.push(Entry {
            id,
            role,
            domain,
            seed: sub_seed(config.seed, &[stream, id]),
        });
    };
    for _ in 0..config.labeled {
        push(Role::Labeled, config.labeled_domain, STREAM_EXPERIMENT);
    }
    let mut mixture: Vec<usize> = (0..config.unlabeled).map(|i| i % k).collect();
    mixture.shuffle(&mut rng_for(config.seed, &[STREAM_SHUFFLE]));
    for d in mixture {
        push(Role::Unlabeled, d, STREAM_EXPERIMENT);
    }
    for d in 0..k {
        for _ in 0..config.test_per_domain {
            push(Role::Test, d, STREAM_EXPERIMENT);
        }
    }
    let p = config.pretrain_domains.len();
    if config.pretrain_count > 0 && p == 0 {
        return Err(Error::Config("pretraining corpus without domains".into()));
    }
    for i in 0..config.pretrain_count {
        push(Role::Pretrain, k + i % p.max(1), STREAM_PRETRAIN);
    }
    Ok(SplitManifest {
        config: config.clone(),
        entries,
    })
}

/// All samples of a manifest, indexed by id.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub manifest: SplitManifest,
    samples: Vec<Sample>,
}

impl Dataset {
    pub fn generate(manifest: SplitManifest) -> Result<Self> {
        let cfg = &manifest.config;
        let samples = manifest
            .entries
            .iter()
            .map(|e| {
                let spec = manifest
                    .domain_spec(e.domain)
                    .ok_or_else(|| Error::Config(format!("unknown domain {}", e.domain)))?;
                let generate = if e.role == Role::Pretrain {
                    generate_pretrain_sample
                } else {
                    generate_sample
                };
                let mut s = generate(e.seed, spec, e.domain, cfg.classes, cfg.size)?;
                s.id = e.id;
                Ok(s)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { manifest, samples })
    }

    pub fn build(config: &SplitConfig) -> Result<Self> {
        Self::generate(build_split(config)?)
    }

    pub fn get(&self, id: u64) -> &Sample {
        &self.samples[id as usize]
    }

    pub fn samples(&self, ids: &[u64]) -> Vec<&Sample> {
        ids.iter().map(|&id| self.get(id)).collect()
    }

    pub fn classes(&self) -> usize {
        self.manifest.config.classes
    }

    pub fn size(&self) -> usize {
        self.manifest.config.size
    }

    pub fn num_domains(&self) -> usize {
        self.manifest.config.domains.len()
    }

    /// `manifest.json`, `images/<id>.tnsr` and `labels/<id>.lbl`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        for sub in ["images", "labels"] {
            let p = dir.join(sub);
            fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
        }
        let mp = dir.join("manifest.json");
        let f = fs::File::create(&mp).map_err(|e| Error::io(&mp, e))?;
        serde_json::to_writer_pretty(BufWriter::new(f), &self.manifest)?;
        for s in &self.samples {
            let ip = dir.join("images").join(format!("{}.tnsr", s.id));
            let f = fs::File::create(&ip).map_err(|e| Error::io(&ip, e))?;
            s.image.write_tnsr(BufWriter::new(f)).map_err(|e| Error::io(&ip, e))?;
            let lp = dir.join("labels").join(format!("{}.lbl", s.id));
            fs::write(&lp, &s.label.data).map_err(|e| Error::io(&lp, e))?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let mp = dir.join("manifest.json");
        let f = fs::File::open(&mp).map_err(|e| Error::io(&mp, e))?;
        let manifest: SplitManifest = serde_json::from_reader(BufReader::new(f))?;
        let size = manifest.config.size;
        let classes = manifest.config.classes as u8;
        let mut samples = Vec::with_capacity(manifest.entries.len());
        for (i, e) in manifest.entries.iter().enumerate() {
            if e.id != i as u64 {
                return Err(Error::Format {
                    what: "manifest",
                    detail: format!("entry {i} has id {}", e.id),
                });
            }
            let ip = dir.join("images").join(format!("{}.tnsr", e.id));
            let f = fs::File::open(&ip).map_err(|e| Error::io(&ip, e))?;
            let image = Tensor::<f32>::read_tnsr(BufReader::new(f))?;
            let lp = dir.join("labels").join(format!("{}.lbl", e.id));
            let bytes = fs::read(&lp).map_err(|e| Error::io(&lp, e))?;
            if image.shape() != [1, size, size] || bytes.iter().any(|&b| b > classes) {
                return Err(Error::Format {
                    what: "sample",
                    detail: format!(
                        "sample {}: image {:?}, labels up to {:?}",
                        e.id,
                        image.shape(),
                        bytes.iter().max()
                    ),
                });
            }
            samples.push(Sample {
                id: e.id,
                image,
                label: LabelMap::new(size, size, bytes)?,
                domain_id: e.domain,
            });
        }
        Ok(Self { manifest, samples })
    }
}

/// Stack sample images into `N×1×H×W`.
pub fn stack_images(samples: &[&Sample]) -> Result<Tensor<f32>> {
    let parts = samples
        .iter()
        .map(|s| {
            let (h, w) = (s.label.height, s.label.width);
            s.image.clone().reshape(&[1, 1, h, w])
        })
        .collect::<Result<Vec<_>>>()?;
    Tensor::stack(&parts)
}
