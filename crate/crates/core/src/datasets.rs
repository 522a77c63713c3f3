//! Dataset representation, three-way splitting, label filtering, balanced
//! per-epoch resampling, poisoned-set assembly, synthetic dataset
//! generation, file loaders (IDX, PNG trees) and the leave-one-out
//! cross-subject protocol.

use std::collections::HashSet;
use std::fs::File;
use std::io::Read;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{self, clip, Image};
use crate::keys::PoisoningSample;
use crate::rng::Stream;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Pristine,
    Poison,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image: Image,
    pub label: usize,
    pub provenance: Provenance,
}

impl Sample {
    /// Sample identity: content hash of pixel bytes + label.
    pub fn identity(&self) -> String {
        format!("{}:{}", self.image.content_hash(), self.label)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    samples: Vec<Sample>,
    label_count: usize,
}

impl LabeledDataset {
    pub fn new(samples: Vec<(Image, usize)>, label_count: usize) -> Result<Self> {
        for (_, label) in &samples {
            if *label >= label_count {
                return Err(Error::Label {
                    label: *label,
                    label_count,
                });
            }
        }
        Ok(LabeledDataset {
            samples: samples
                .into_iter()
                .map(|(image, label)| Sample {
                    image,
                    label,
                    provenance: Provenance::Pristine,
                })
                .collect(),
            label_count,
        })
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn label_count(&self) -> usize {
        self.label_count
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn per_label_counts(&self) -> Vec<usize> {
        let mut counts = vec![0usize; self.label_count];
        for s in &self.samples {
            counts[s.label] += 1;
        }
        counts
    }

    pub fn entries(&self) -> Vec<(&Image, usize)> {
        self.samples.iter().map(|s| (&s.image, s.label)).collect()
    }

    pub fn images_of_label(&self, label: usize) -> Vec<Image> {
        self.samples
            .iter()
            .filter(|s| s.label == label)
            .map(|s| s.image.clone())
            .collect()
    }

    pub fn images(&self) -> Vec<Image> {
        self.samples.iter().map(|s| s.image.clone()).collect()
    }

    pub fn labeled_images(&self) -> Vec<(Image, usize)> {
        self.samples
            .iter()
            .map(|s| (s.image.clone(), s.label))
            .collect()
    }

    pub fn identity_set(&self) -> HashSet<String> {
        self.samples.iter().map(|s| s.identity()).collect()
    }

    /// Hash over all sample identities, order-sensitive; used as the
    /// provenance tag carried by evaluation reports.
    pub fn content_hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut hasher = Sha256::new();
        hasher.update((self.label_count as u64).to_le_bytes());
        for s in &self.samples {
            hasher.update(s.identity().as_bytes());
        }
        hex::encode(hasher.finalize())
    }
}

/// Pristine train / attacker pool / test, pairwise disjoint by sample
/// identity.
#[derive(Debug, Clone)]
pub struct SplitBundle {
    pub train: LabeledDataset,
    pub attacker_pool: LabeledDataset,
    pub test: LabeledDataset,
}

/// Pristine train set plus the injected poisoning samples.
#[derive(Debug, Clone)]
pub struct PoisonedDataset {
    base: LabeledDataset,
    poisons: Vec<PoisoningSample>,
}

impl PoisonedDataset {
    pub fn base(&self) -> &LabeledDataset {
        &self.base
    }

    pub fn poisons(&self) -> &[PoisoningSample] {
        &self.poisons
    }

    /// Pristine sample count N.
    pub fn pristine_count(&self) -> usize {
        self.base.len()
    }

    /// Poisoning sample count n.
    pub fn poison_count(&self) -> usize {
        self.poisons.len()
    }

    pub fn total(&self) -> usize {
        self.base.len() + self.poisons.len()
    }

    pub fn label_count(&self) -> usize {
        self.base.label_count
    }

    /// Advisory threat-model guard: true when n/N exceeds 1%.
    pub fn exceeds_injection_budget(&self) -> bool {
        self.poison_count() as f64 > 0.01 * self.pristine_count() as f64
    }

    /// All samples in dataset-index order: pristine base first, then the
    /// poisons. This order defines the tie-break indices used by pruning.
    pub fn entries(&self) -> Vec<(&Image, usize)> {
        let mut v: Vec<(&Image, usize)> = self.base.entries();
        v.extend(self.poisons.iter().map(|p| (&p.instance, p.label)));
        v
    }

    /// Provenance flag per dataset index, aligned with `entries()`.
    pub fn provenance(&self) -> Vec<Provenance> {
        let mut v = vec![Provenance::Pristine; self.base.len()];
        v.extend(std::iter::repeat(Provenance::Poison).take(self.poisons.len()));
        v
    }

    pub fn per_label_counts(&self) -> Vec<usize> {
        let mut counts = self.base.per_label_counts();
        for p in &self.poisons {
            counts[p.label] += 1;
        }
        counts
    }

    /// Copy without the given dataset indices (in `entries()` order); used
    /// by pruning defenses. The result may hold zero poisons.
    pub fn without_indices(&self, removed: &HashSet<usize>) -> PoisonedDataset {
        let base_samples = self
            .base
            .samples
            .iter()
            .enumerate()
            .filter(|(i, _)| !removed.contains(i))
            .map(|(_, s)| (s.image.clone(), s.label))
            .collect();
        let offset = self.base.len();
        let poisons = self
            .poisons
            .iter()
            .enumerate()
            .filter(|(i, _)| !removed.contains(&(offset + i)))
            .map(|(_, p)| p.clone())
            .collect();
        PoisonedDataset {
            base: LabeledDataset::new(base_samples, self.base.label_count)
                .expect("labels already validated"),
            poisons,
        }
    }
}

/// Unions the pristine train set with the poisoning samples, preserving
/// provenance flags. Never mutates the base samples.
pub fn assemble_poisoned(
    train: &LabeledDataset,
    poisons: Vec<PoisoningSample>,
) -> Result<PoisonedDataset> {
    if poisons.is_empty() {
        return Err(Error::InvalidParameter("poison list is empty".into()));
    }
    for p in &poisons {
        if p.label >= train.label_count {
            return Err(Error::Label {
                label: p.label,
                label_count: train.label_count,
            });
        }
    }
    Ok(PoisonedDataset {
        base: train.clone(),
        poisons,
    })
}

/// Removes labels with fewer than `min_count` samples and re-indexes the
/// remaining labels densely. Returns the dataset and the mapping from new
/// label id to original label id.
pub fn filter_infrequent(
    ds: &LabeledDataset,
    min_count: usize,
) -> Result<(LabeledDataset, Vec<usize>)> {
    if min_count < 1 {
        return Err(Error::InvalidParameter("min_count must be >= 1".into()));
    }
    let counts = ds.per_label_counts();
    let kept: Vec<usize> = (0..ds.label_count)
        .filter(|&l| counts[l] >= min_count)
        .collect();
    if kept.is_empty() {
        return Err(Error::EmptyDataset(
            "no label meets the frequency threshold".into(),
        ));
    }
    let mut new_of_old = vec![usize::MAX; ds.label_count];
    for (new, &old) in kept.iter().enumerate() {
        new_of_old[old] = new;
    }
    let samples = ds
        .samples
        .iter()
        .filter(|s| new_of_old[s.label] != usize::MAX)
        .map(|s| (s.image.clone(), new_of_old[s.label]))
        .collect();
    Ok((LabeledDataset::new(samples, kept.len())?, kept))
}

/// Splits into train / attacker pool / test, per label: exactly
/// `test_per_label` samples to test, `pool_per_label` to the attacker pool,
/// remainder to train.
pub fn split_three_way(
    ds: &LabeledDataset,
    test_per_label: usize,
    pool_per_label: usize,
    stream: &Stream,
) -> Result<SplitBundle> {
    let counts = ds.per_label_counts();
    let needed = test_per_label + pool_per_label + 1;
    for (label, &count) in counts.iter().enumerate() {
        if count < needed {
            return Err(Error::Split {
                label,
                available: count,
                needed,
            });
        }
    }
    let mut by_label: Vec<Vec<usize>> = vec![Vec::new(); ds.label_count];
    for (i, s) in ds.samples.iter().enumerate() {
        by_label[s.label].push(i);
    }
    let mut train = Vec::new();
    let mut pool = Vec::new();
    let mut test = Vec::new();
    for (label, indices) in by_label.iter_mut().enumerate() {
        let mut rng = stream.derive("split", label as u64).rng();
        indices.shuffle(&mut rng);
        for (pos, &idx) in indices.iter().enumerate() {
            let pair = (ds.samples[idx].image.clone(), label);
            if pos < test_per_label {
                test.push(pair);
            } else if pos < test_per_label + pool_per_label {
                pool.push(pair);
            } else {
                train.push(pair);
            }
        }
    }
    Ok(SplitBundle {
        train: LabeledDataset::new(train, ds.label_count)?,
        attacker_pool: LabeledDataset::new(pool, ds.label_count)?,
        test: LabeledDataset::new(test, ds.label_count)?,
    })
}

/// Draws exactly `per_label` samples for every label: without replacement
/// when the label has enough samples, with replacement otherwise. The
/// output order is shuffled.
pub fn balanced_epoch_sample<'a>(
    entries: &[(&'a Image, usize)],
    label_count: usize,
    per_label: usize,
    rng: &mut impl Rng,
) -> Vec<(&'a Image, usize)> {
    let mut by_label: Vec<Vec<usize>> = vec![Vec::new(); label_count];
    for (i, (_, label)) in entries.iter().enumerate() {
        by_label[*label].push(i);
    }
    let mut out = Vec::with_capacity(label_count * per_label);
    for members in by_label.iter().filter(|m| !m.is_empty()) {
        if members.len() >= per_label {
            for idx in rand::seq::index::sample(rng, members.len(), per_label) {
                out.push(entries[members[idx]]);
            }
        } else {
            for _ in 0..per_label {
                out.push(entries[members[rng.gen_range(0..members.len())]]);
            }
        }
    }
    out.shuffle(rng);
    out
}

// --- Synthetic dataset -------------------------------------------------------

/// Gaussian blob parameters for one procedural identity.
struct Blob {
    cy: f64,
    cx: f64,
    sigma: f64,
    amp: f64,
    weights: [f64; 3],
}

fn synth_template(label: usize, frame: (usize, usize, usize), stream: &Stream) -> Image {
    let (h, w, c) = frame;
    let mut rng = stream.derive("template", label as u64).rng();
    let base: Vec<f64> = (0..c).map(|_| rng.gen_range(30.0..=225.0)).collect();
    let blobs: Vec<Blob> = (0..6)
        .map(|_| Blob {
            cy: rng.gen_range(0.0..h as f64),
            cx: rng.gen_range(0.0..w as f64),
            sigma: rng.gen_range(h as f64 / 8.0..=h as f64 / 3.0),
            amp: rng.gen_range(-90.0..=90.0),
            weights: [rng.gen_range(0.0..=1.0), rng.gen_range(0.0..=1.0), rng.gen_range(0.0..=1.0)],
        })
        .collect();
    let mut pixels = vec![0.0f64; h * w * c];
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let mut v = base[ch];
                for b in &blobs {
                    let d2 = (y as f64 - b.cy).powi(2) + (x as f64 - b.cx).powi(2);
                    v += b.amp * b.weights[ch % 3] * (-d2 / (2.0 * b.sigma * b.sigma)).exp();
                }
                pixels[(y * w + x) * c + ch] = v;
            }
        }
    }
    clip(&crate::imaging::FloatImage::new(h, w, c, pixels).expect("shape consistent"))
}

/// Standard normal draw via Box-Muller.
fn gaussian(rng: &mut impl Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Renders one jittered sample of a template: brightness shift, integer
/// translation of at most 2 px (edge-replicated), Gaussian pixel noise σ=8.
pub fn synth_sample(template: &Image, stream: &Stream) -> Image {
    let (h, w, c) = template.shape();
    let mut rng = stream.rng();
    let brightness = rng.gen_range(-20.0..=20.0);
    let dy = rng.gen_range(-2i64..=2);
    let dx = rng.gen_range(-2i64..=2);
    let mut pixels = vec![0.0f64; h * w * c];
    for y in 0..h {
        let sy = (y as i64 + dy).clamp(0, h as i64 - 1) as usize;
        for x in 0..w {
            let sx = (x as i64 + dx).clamp(0, w as i64 - 1) as usize;
            for ch in 0..c {
                pixels[(y * w + x) * c + ch] =
                    f64::from(template.get(sy, sx, ch)) + brightness + 8.0 * gaussian(&mut rng);
            }
        }
    }
    clip(&crate::imaging::FloatImage::new(h, w, c, pixels).expect("shape consistent"))
}

/// Generates a desk-scale synthetic dataset: each label is a distinct
/// procedural identity (a smooth blob composition seeded by label id) with
/// per-sample jitter.
pub fn synth_generate(
    num_labels: usize,
    per_label: usize,
    frame: (usize, usize, usize),
    stream: &Stream,
) -> Result<LabeledDataset> {
    if num_labels < 2 {
        return Err(Error::InvalidParameter("num_labels must be >= 2".into()));
    }
    let mut samples = Vec::with_capacity(num_labels * per_label);
    for label in 0..num_labels {
        let template = synth_template(label, frame, stream);
        for i in 0..per_label {
            let sub = stream.derive("sample", (label * per_label + i) as u64);
            samples.push((synth_sample(&template, &sub), label));
        }
    }
    LabeledDataset::new(samples, num_labels)
}

/// A held-out identity that is not part of the classifier's label space,
/// used as an attacker face or cross-subject source.
pub fn synth_foreign_identity(
    tag: u64,
    count: usize,
    frame: (usize, usize, usize),
    stream: &Stream,
) -> Vec<Image> {
    let sub = stream.derive("foreign", tag);
    let template = synth_template(usize::MAX - tag as usize, frame, &sub);
    (0..count)
        .map(|i| synth_sample(&template, &sub.derive("sample", i as u64)))
        .collect()
}

/// Leave-one-out pools: all other subjects' images feed poisoning, the
/// held-out subject's images feed evaluation.
pub fn leave_one_out_pools(
    subject_pools: &[Vec<Image>],
    held_out: usize,
) -> Result<(Vec<Image>, Vec<Image>)> {
    if subject_pools.len() < 2 {
        return Err(Error::Protocol(
            "leave-one-out requires at least 2 subjects".into(),
        ));
    }
    if held_out >= subject_pools.len() {
        return Err(Error::Protocol(format!(
            "held_out {held_out} out of range for {} subjects",
            subject_pools.len()
        )));
    }
    let poison_source = subject_pools
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != held_out)
        .flat_map(|(_, imgs)| imgs.iter().cloned())
        .collect();
    Ok((poison_source, subject_pools[held_out].clone()))
}

// --- File loaders -------------------------------------------------------------

/// Loads an IDX image file (magic 0x00000803) paired with an IDX label file
/// (magic 0x00000801) into a grayscale dataset.
pub fn load_idx_pair(images_path: &Path, labels_path: &Path) -> Result<LabeledDataset> {
    let images = load_idx_images(images_path)?;
    let labels = load_idx_labels(labels_path)?;
    if images.len() != labels.len() {
        return Err(Error::Format {
            path: labels_path.to_path_buf(),
            message: format!("{} labels for {} images", labels.len(), images.len()),
        });
    }
    let label_count = labels.iter().copied().max().map_or(0, |m| m as usize + 1);
    LabeledDataset::new(
        images
            .into_iter()
            .zip(labels)
            .map(|(img, l)| (img, l as usize))
            .collect(),
        label_count,
    )
}

fn read_all(path: &Path) -> Result<Vec<u8>> {
    let mut bytes = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    Ok(bytes)
}

fn idx_header(bytes: &[u8], path: &Path, expect_dims: u8) -> Result<Vec<usize>> {
    if bytes.len() < 4 || bytes[0] != 0 || bytes[1] != 0 || bytes[2] != 0x08 {
        return Err(Error::Format {
            path: path.to_path_buf(),
            message: "not an unsigned-byte IDX file".into(),
        });
    }
    let ndims = bytes[3];
    if ndims != expect_dims {
        return Err(Error::Format {
            path: path.to_path_buf(),
            message: format!("expected {expect_dims} dimensions, found {ndims}"),
        });
    }
    let mut dims = Vec::with_capacity(ndims as usize);
    for d in 0..ndims as usize {
        let off = 4 + d * 4;
        if bytes.len() < off + 4 {
            return Err(Error::Format {
                path: path.to_path_buf(),
                message: "truncated header".into(),
            });
        }
        dims.push(u32::from_be_bytes(bytes[off..off + 4].try_into().unwrap()) as usize);
    }
    Ok(dims)
}

pub fn load_idx_images(path: &Path) -> Result<Vec<Image>> {
    let bytes = read_all(path)?;
    let dims = idx_header(&bytes, path, 3)?;
    let (count, h, w) = (dims[0], dims[1], dims[2]);
    let data = &bytes[16..];
    if data.len() != count * h * w {
        return Err(Error::Format {
            path: path.to_path_buf(),
            message: format!("expected {} pixel bytes, found {}", count * h * w, data.len()),
        });
    }
    (0..count)
        .map(|i| Image::new(h, w, 1, data[i * h * w..(i + 1) * h * w].to_vec()))
        .collect()
}

pub fn load_idx_labels(path: &Path) -> Result<Vec<u8>> {
    let bytes = read_all(path)?;
    let dims = idx_header(&bytes, path, 1)?;
    let data = &bytes[8..];
    if data.len() != dims[0] {
        return Err(Error::Format {
            path: path.to_path_buf(),
            message: format!("expected {} labels, found {}", dims[0], data.len()),
        });
    }
    Ok(data.to_vec())
}

/// Loads `root/<label>/<name>.png`; label directories are sorted by name
/// and assigned dense ids in that order.
pub fn load_png_tree(root: &Path) -> Result<LabeledDataset> {
    let mut dirs: Vec<_> = std::fs::read_dir(root)
        .map_err(|e| Error::io(root, e))?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_dir())
        .map(|e| e.path())
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(Error::EmptyDataset(format!("no label directories under {}", root.display())));
    }
    let mut samples = Vec::new();
    for (label, dir) in dirs.iter().enumerate() {
        let mut files: Vec<_> = std::fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .filter(|p| p.extension().is_some_and(|e| e == "png"))
            .collect();
        files.sort();
        for f in files {
            samples.push((imaging::read_png(&f)?, label));
        }
    }
    if samples.is_empty() {
        return Err(Error::EmptyDataset(format!("no png files under {}", root.display())));
    }
    let label_count = dirs.len();
    LabeledDataset::new(samples, label_count)
}

/// Writes a dataset as a PNG tree rooted at `root`.
pub fn write_png_tree(ds: &LabeledDataset, root: &Path) -> Result<()> {
    let mut counters = vec![0usize; ds.label_count()];
    for s in ds.samples() {
        let dir = root.join(format!("{:04}", s.label));
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let path = dir.join(format!("{:05}.png", counters[s.label]));
        counters[s.label] += 1;
        imaging::write_png(&s.image, &path)?;
    }
    Ok(())
}

// --- Manifest -------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub label_count: usize,
    pub total: usize,
    pub per_label_counts: Vec<usize>,
    pub pristine: usize,
    pub poison: usize,
    pub sample_identities: Vec<String>,
}

pub fn manifest_of(ds: &LabeledDataset) -> DatasetManifest {
    DatasetManifest {
        label_count: ds.label_count(),
        total: ds.len(),
        per_label_counts: ds.per_label_counts(),
        pristine: ds.len(),
        poison: 0,
        sample_identities: ds.samples().iter().map(|s| s.identity()).collect(),
    }
}

pub fn manifest_of_poisoned(ds: &PoisonedDataset) -> DatasetManifest {
    let mut identities: Vec<String> = ds
        .base()
        .samples()
        .iter()
        .map(|s| s.identity())
        .collect();
    identities.extend(
        ds.poisons()
            .iter()
            .map(|p| format!("{}:{}", p.instance.content_hash(), p.label)),
    );
    DatasetManifest {
        label_count: ds.label_count(),
        total: ds.total(),
        per_label_counts: ds.per_label_counts(),
        pristine: ds.pristine_count(),
        poison: ds.poison_count(),
        sample_identities: identities,
    }
}

pub fn write_manifest(manifest: &DatasetManifest, path: &Path) -> Result<()> {
    let json = serde_json::to_string_pretty(manifest)?;
    std::fs::write(path, json).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_dataset(stream: &Stream, labels: usize, per_label: usize) -> LabeledDataset {
        synth_generate(labels, per_label, (8, 8, 3), stream).unwrap()
    }

    #[test]
    fn filter_infrequent_identity_and_removal() {
        let s = Stream::new(20);
        let ds = tiny_dataset(&s, 3, 4);
        let (same, map) = filter_infrequent(&ds, 1).unwrap();
        assert_eq!(same.len(), ds.len());
        assert_eq!(map, vec![0, 1, 2]);

        // counts {120, 99, 100} at min_count 100 -> middle label removed
        let mut samples = Vec::new();
        let img = ds.samples()[0].image.clone();
        for _ in 0..120 {
            samples.push((img.clone(), 0));
        }
        for _ in 0..99 {
            samples.push((img.clone(), 1));
        }
        for _ in 0..100 {
            samples.push((img.clone(), 2));
        }
        let uneven = LabeledDataset::new(samples, 3).unwrap();
        let (kept, map) = filter_infrequent(&uneven, 100).unwrap();
        assert_eq!(kept.label_count(), 2);
        assert_eq!(map, vec![0, 2]);
        assert_eq!(kept.per_label_counts(), vec![120, 100]);

        assert!(matches!(
            filter_infrequent(&uneven, 1000),
            Err(Error::EmptyDataset(_))
        ));
    }

    #[test]
    fn split_partition_and_disjointness() {
        let s = Stream::new(21);
        let ds = tiny_dataset(&s, 4, 20);
        let bundle = split_three_way(&ds, 10, 5, &s.derive("split", 0)).unwrap();
        for count in bundle.test.per_label_counts() {
            assert_eq!(count, 10);
        }
        for count in bundle.attacker_pool.per_label_counts() {
            assert_eq!(count, 5);
        }
        assert_eq!(
            bundle.train.len() + bundle.attacker_pool.len() + bundle.test.len(),
            ds.len()
        );
        let a = bundle.train.identity_set();
        let b = bundle.attacker_pool.identity_set();
        let c = bundle.test.identity_set();
        assert!(a.is_disjoint(&b) && a.is_disjoint(&c) && b.is_disjoint(&c));

        // pool_per_label = 0 -> empty pool allowed
        let bundle0 = split_three_way(&ds, 10, 0, &s.derive("split", 1)).unwrap();
        assert!(bundle0.attacker_pool.is_empty());

        assert!(matches!(
            split_three_way(&ds, 15, 5, &s),
            Err(Error::Split { .. })
        ));
    }

    #[test]
    fn balanced_sample_exact_tallies() {
        let s = Stream::new(22);
        let ds = tiny_dataset(&s, 10, 12);
        let entries = ds.entries();
        let epoch = balanced_epoch_sample(&entries, 10, 50, &mut s.derive("ep", 0).rng());
        assert_eq!(epoch.len(), 500);
        let mut tally = vec![0usize; 10];
        for (_, l) in &epoch {
            tally[*l] += 1;
        }
        assert!(tally.iter().all(|&t| t == 50));
    }

    #[test]
    fn balanced_sample_with_replacement_when_scarce() {
        let s = Stream::new(23);
        let ds = tiny_dataset(&s, 2, 3);
        let entries = ds.entries();
        let epoch = balanced_epoch_sample(&entries, 2, 90, &mut s.derive("ep", 0).rng());
        assert_eq!(epoch.len(), 180);
        let mut tally = vec![0usize; 2];
        for (_, l) in &epoch {
            tally[*l] += 1;
        }
        assert_eq!(tally, vec![90, 90]);
    }

    #[test]
    fn assemble_bookkeeping() {
        use crate::keys::{PoisonOrigin, Strategy};
        let s = Stream::new(24);
        let ds = tiny_dataset(&s, 3, 5);
        let poison = PoisoningSample {
            instance: ds.samples()[0].image.clone(),
            label: 1,
            origin: PoisonOrigin {
                strategy: Strategy::InputInstance,
                source_hash: None,
                alpha: None,
            },
        };
        let before = ds.clone();
        let poisoned = assemble_poisoned(&ds, vec![poison.clone(), poison.clone()]).unwrap();
        assert_eq!(poisoned.pristine_count(), 15);
        assert_eq!(poisoned.poison_count(), 2);
        assert_eq!(poisoned.total(), 17);
        assert_eq!(*poisoned.base(), before);
        let prov = poisoned.provenance();
        assert_eq!(prov.iter().filter(|&&p| p == Provenance::Poison).count(), 2);

        let bad = PoisoningSample {
            label: 99,
            ..poison
        };
        assert!(matches!(
            assemble_poisoned(&ds, vec![bad]),
            Err(Error::Label { .. })
        ));
    }

    #[test]
    fn synth_deterministic_and_distinct() {
        let s = Stream::new(25);
        let a = synth_generate(3, 4, (12, 12, 3), &s).unwrap();
        let b = synth_generate(3, 4, (12, 12, 3), &s).unwrap();
        assert_eq!(a, b);
        // two samples of one label differ
        assert_ne!(a.samples()[0].image, a.samples()[1].image);

        let tiny = synth_generate(2, 1, (8, 8, 3), &s).unwrap();
        assert_eq!(tiny.len(), 2);
    }

    #[test]
    fn synth_templates_far_apart() {
        // templates of different labels differ in >= 10% of pixels by >= 32
        // levels, across many seeded generations
        for seed in 0..30 {
            let s = Stream::new(1000 + seed);
            let frame = (16, 16, 3);
            let t: Vec<Image> = (0..6).map(|l| synth_template(l, frame, &s)).collect();
            for i in 0..t.len() {
                for j in (i + 1)..t.len() {
                    let far = t[i]
                        .pixels()
                        .iter()
                        .zip(t[j].pixels())
                        .filter(|(&a, &b)| (f64::from(a) - f64::from(b)).abs() >= 32.0)
                        .count();
                    let frac = far as f64 / t[i].pixels().len() as f64;
                    assert!(frac >= 0.10, "seed {seed} pair ({i},{j}) frac {frac}");
                }
            }
        }
    }

    #[test]
    fn leave_one_out_partition() {
        let pools: Vec<Vec<Image>> = (0..5)
            .map(|s| {
                (0..10)
                    .map(|i| {
                        Image::new(2, 2, 1, vec![s as u8, i as u8, 0, 0]).unwrap()
                    })
                    .collect()
            })
            .collect();
        let (poison_src, eval_src) = leave_one_out_pools(&pools, 3).unwrap();
        assert_eq!(poison_src.len(), 40);
        assert_eq!(eval_src.len(), 10);
        for img in &poison_src {
            assert_ne!(img.pixels()[0], 3);
        }
        for held in 0..5 {
            let (_, ev) = leave_one_out_pools(&pools, held).unwrap();
            assert_eq!(ev[0].pixels()[0], held as u8);
        }
        assert!(matches!(
            leave_one_out_pools(&pools[..1], 0),
            Err(Error::Protocol(_))
        ));
    }

    #[test]
    fn idx_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let img_path = dir.path().join("im.idx3");
        let lbl_path = dir.path().join("lb.idx1");
        // 2 images of 2x3
        let mut img_bytes = vec![0, 0, 0x08, 3];
        img_bytes.extend_from_slice(&2u32.to_be_bytes());
        img_bytes.extend_from_slice(&2u32.to_be_bytes());
        img_bytes.extend_from_slice(&3u32.to_be_bytes());
        img_bytes.extend_from_slice(&[1, 2, 3, 4, 5, 6, 10, 20, 30, 40, 50, 60]);
        std::fs::write(&img_path, &img_bytes).unwrap();
        let mut lbl_bytes = vec![0, 0, 0x08, 1];
        lbl_bytes.extend_from_slice(&2u32.to_be_bytes());
        lbl_bytes.extend_from_slice(&[1, 0]);
        std::fs::write(&lbl_path, &lbl_bytes).unwrap();

        let ds = load_idx_pair(&img_path, &lbl_path).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.label_count(), 2);
        assert_eq!(ds.samples()[0].image.shape(), (2, 3, 1));
        assert_eq!(ds.samples()[0].label, 1);
        assert_eq!(ds.samples()[1].image.pixels()[0], 10);
    }

    #[test]
    fn png_tree_roundtrip() {
        let s = Stream::new(26);
        let ds = tiny_dataset(&s, 3, 2);
        let dir = tempfile::tempdir().unwrap();
        write_png_tree(&ds, dir.path()).unwrap();
        let loaded = load_png_tree(dir.path()).unwrap();
        assert_eq!(loaded.label_count(), 3);
        assert_eq!(loaded.identity_set(), ds.identity_set());
    }
}
