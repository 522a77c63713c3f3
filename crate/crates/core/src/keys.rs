//! Backdoor keys, the backdoor-instance-generation function, and the three
//! pattern-injection functions. Produces poisoning samples (injected into
//! training data) and backdoor instances (presented at test time).

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{self, add_noise, clip, place_at, resize_nearest, uniform_noise, Image};
use crate::rng::Stream;

/// Single-input-instance key: backdoor instances are the key plus bounded
/// uniform noise, clipped back to the pixel domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputInstanceKey {
    pub key_image: Image,
    pub noise_bound: f64,
}

impl InputInstanceKey {
    pub fn new(key_image: Image, noise_bound: f64) -> Result<Self> {
        if noise_bound < 0.0 {
            return Err(Error::InvalidParameter(format!(
                "noise_bound {noise_bound} must be >= 0"
            )));
        }
        Ok(InputInstanceKey {
            key_image,
            noise_bound,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scale {
    Small,
    Medium,
    Large,
}

/// Configured pixel sizes for the three pattern scale variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScaleSizes {
    pub small: (usize, usize),
    pub medium: (usize, usize),
    pub large: (usize, usize),
}

impl ScaleSizes {
    pub fn size_of(&self, scale: Scale) -> (usize, usize) {
        match scale {
            Scale::Small => self.small,
            Scale::Medium => self.medium,
            Scale::Large => self.large,
        }
    }

    /// All three variants at the same size; used for full-frame patterns.
    pub fn uniform(size: (usize, usize)) -> Self {
        ScaleSizes {
            small: size,
            medium: size,
            large: size,
        }
    }
}

/// A pattern key: the pattern image, its transparent-region mask (true marks
/// pixels where the underlying image shows through), a scale variant, and a
/// placement anchor within the full frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatternKey {
    pub pattern: Image,
    /// H×W, row-major; true = transparent.
    pub transparent_mask: Vec<bool>,
    pub scale: Scale,
    pub scale_sizes: ScaleSizes,
    pub anchor: (usize, usize),
}

impl PatternKey {
    pub fn new(
        pattern: Image,
        transparent_mask: Vec<bool>,
        scale: Scale,
        scale_sizes: ScaleSizes,
        anchor: (usize, usize),
    ) -> Result<Self> {
        if transparent_mask.len() != pattern.height() * pattern.width() {
            return Err(Error::ShapeMismatch {
                expected: format!("{} mask bits", pattern.height() * pattern.width()),
                got: format!("{}", transparent_mask.len()),
            });
        }
        Ok(PatternKey {
            pattern,
            transparent_mask,
            scale,
            scale_sizes,
            anchor,
        })
    }

    /// Full-frame pattern with no transparent region and anchor (0,0), the
    /// form used by the Blended Injection strategy.
    pub fn full_frame(pattern: Image) -> Self {
        let mask = vec![false; pattern.height() * pattern.width()];
        let size = (pattern.height(), pattern.width());
        PatternKey {
            pattern,
            transparent_mask: mask,
            scale: Scale::Medium,
            scale_sizes: ScaleSizes::uniform(size),
            anchor: (0, 0),
        }
    }

    /// Resizes pattern and mask to the configured scale and positions them
    /// in a frame of the given shape. Returns (overlay, opaque-footprint
    /// mask): true exactly where the placed pattern is opaque.
    pub fn placed(&self, frame_shape: (usize, usize, usize)) -> Result<(Image, Vec<bool>)> {
        let (th, tw) = self.scale_sizes.size_of(self.scale);
        let scaled = resize_nearest(&self.pattern, (th, tw))?;
        let scaled_mask = resize_mask(
            &self.transparent_mask,
            (self.pattern.height(), self.pattern.width()),
            (th, tw),
        );
        let (overlay, coverage) = place_at(frame_shape, &scaled, self.anchor)?;
        let (fh, fw, _) = frame_shape;
        let mut opaque = vec![false; fh * fw];
        for i in 0..th {
            for j in 0..tw {
                if !scaled_mask[i * tw + j] {
                    opaque[(self.anchor.0 + i) * fw + (self.anchor.1 + j)] = true;
                }
            }
        }
        debug_assert!(opaque
            .iter()
            .zip(&coverage)
            .all(|(&o, &c)| !o || c));
        Ok((overlay, opaque))
    }
}

/// Nearest-neighbor resize for a boolean mask, same index rule as images.
fn resize_mask(mask: &[bool], src: (usize, usize), target: (usize, usize)) -> Vec<bool> {
    let (sh, sw) = src;
    let (th, tw) = target;
    let mut out = Vec::with_capacity(th * tw);
    for i in 0..th {
        let si = i * sh / th;
        for j in 0..tw {
            let sj = j * sw / tw;
            out.push(mask[si * sw + sj]);
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    InputInstance,
    Blended,
    Accessory,
    BlendedAccessory,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BackdoorKey {
    InputInstance(InputInstanceKey),
    Pattern(PatternKey),
}

/// One attack's full definition: strategy, key, target label, blend ratios
/// and the poisoning sample count n.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackdoorSpec {
    pub strategy: Strategy,
    pub key: BackdoorKey,
    pub target_label: usize,
    pub alpha_train: f64,
    pub alpha_test: f64,
    pub n: usize,
}

impl BackdoorSpec {
    pub fn new(
        strategy: Strategy,
        key: BackdoorKey,
        target_label: usize,
        alpha_train: f64,
        alpha_test: f64,
        n: usize,
    ) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidParameter("n must be >= 1".into()));
        }
        for (name, a) in [("alpha_train", alpha_train), ("alpha_test", alpha_test)] {
            if !(0.0..=1.0).contains(&a) {
                return Err(Error::InvalidParameter(format!("{name} {a} outside [0,1]")));
            }
        }
        match (strategy, &key) {
            (Strategy::InputInstance, BackdoorKey::InputInstance(_)) => {}
            (Strategy::InputInstance, _) | (_, BackdoorKey::InputInstance(_)) => {
                return Err(Error::InvalidParameter(
                    "strategy/key mismatch: input-instance strategy requires an input-instance key and vice versa".into(),
                ))
            }
            _ => {}
        }
        // Alpha is unused (fixed 1) for input-instance and accessory.
        let (alpha_train, alpha_test) = match strategy {
            Strategy::InputInstance | Strategy::Accessory => (1.0, 1.0),
            _ => (alpha_train, alpha_test),
        };
        Ok(BackdoorSpec {
            strategy,
            key,
            target_label,
            alpha_train,
            alpha_test,
            n,
        })
    }

    pub fn pattern_key(&self) -> Result<&PatternKey> {
        match &self.key {
            BackdoorKey::Pattern(k) => Ok(k),
            BackdoorKey::InputInstance(_) => Err(Error::InvalidParameter(
                "operation requires a pattern key".into(),
            )),
        }
    }

    pub fn instance_key(&self) -> Result<&InputInstanceKey> {
        match &self.key {
            BackdoorKey::InputInstance(k) => Ok(k),
            BackdoorKey::Pattern(_) => Err(Error::InvalidParameter(
                "operation requires an input-instance key".into(),
            )),
        }
    }
}

/// Where a poisoning instance came from: the benign source (if any) and the
/// strategy parameters used to build it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoisonOrigin {
    pub strategy: Strategy,
    pub source_hash: Option<String>,
    pub alpha: Option<f64>,
}

/// Attacker-crafted training pair; its label is always the target label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoisoningSample {
    pub instance: Image,
    pub label: usize,
    pub origin: PoisonOrigin,
}

// --- Injection functions ----------------------------------------------------

#[inline]
fn blend_pixel(alpha: f64, k: u8, x: u8) -> u8 {
    let v = (alpha * f64::from(k) + (1.0 - alpha) * f64::from(x)).round();
    if v >= 255.0 {
        255
    } else if v <= 0.0 {
        0
    } else {
        v as u8
    }
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::InvalidParameter(format!("alpha {alpha} outside [0,1]")));
    }
    Ok(())
}

/// One draw of clip(k + δ) with δ uniform on [-bound, bound] per channel.
pub fn sample_backdoor_instance_rand(key: &InputInstanceKey, stream: &Stream) -> Image {
    let mut rng = stream.rng();
    let noise = uniform_noise(
        key.key_image.shape(),
        -key.noise_bound,
        key.noise_bound,
        &mut rng,
    )
    .expect("bound >= 0 by key invariant");
    clip(&add_noise(&key.key_image, &noise).expect("shapes match by construction"))
}

/// Blended Injection: per-pixel clip(α·k + (1−α)·x) over the full frame.
pub fn blend_inject(key: &PatternKey, x: &Image, alpha: f64) -> Result<Image> {
    check_alpha(alpha)?;
    if key.pattern.shape() != x.shape() {
        return Err(Error::ShapeMismatch {
            expected: format!("{:?}", x.shape()),
            got: format!("{:?}", key.pattern.shape()),
        });
    }
    let pixels = key
        .pattern
        .pixels()
        .iter()
        .zip(x.pixels())
        .map(|(&k, &xp)| blend_pixel(alpha, k, xp))
        .collect();
    let (h, w, c) = x.shape();
    Image::new(h, w, c, pixels)
}

/// Accessory Injection: pattern pixels on the opaque footprint, the benign
/// image everywhere else (transparent region and outside the footprint).
pub fn accessory_inject(key: &PatternKey, x: &Image) -> Result<Image> {
    blended_accessory_inject(key, x, 1.0)
}

/// Blended Accessory Injection: blend with ratio α on the opaque footprint,
/// pass-through elsewhere. Reduces exactly to `blend_inject` for a
/// full-frame all-opaque key and to `accessory_inject` at α = 1.
pub fn blended_accessory_inject(key: &PatternKey, x: &Image, alpha: f64) -> Result<Image> {
    check_alpha(alpha)?;
    let (overlay, opaque) = key.placed(x.shape())?;
    let (h, w, c) = x.shape();
    let mut out = x.clone();
    for i in 0..h {
        for j in 0..w {
            if opaque[i * w + j] {
                for ch in 0..c {
                    out.set(i, j, ch, blend_pixel(alpha, overlay.get(i, j, ch), x.get(i, j, ch)));
                }
            }
        }
    }
    Ok(out)
}

/// Applies a backdoor's injection strategy at the given blend ratio to one
/// benign image.
pub fn inject(spec: &BackdoorSpec, x: &Image, alpha: f64) -> Result<Image> {
    let key = spec.pattern_key()?;
    match spec.strategy {
        Strategy::Blended => blend_inject(key, x, alpha),
        Strategy::Accessory => accessory_inject(key, x),
        Strategy::BlendedAccessory => blended_accessory_inject(key, x, alpha),
        Strategy::InputInstance => unreachable!("pattern_key() rejects input-instance"),
    }
}

// --- Poison and backdoor-instance generation --------------------------------

/// Generates the n poisoning samples for the attack, all labeled with the
/// target label. Pattern strategies draw n distinct pool images without
/// replacement and inject at alpha_train; the input-instance strategy draws
/// n independent noisy copies of the key.
pub fn generate_poisons(
    spec: &BackdoorSpec,
    benign_pool: &[Image],
    stream: &Stream,
) -> Result<Vec<PoisoningSample>> {
    match spec.strategy {
        Strategy::InputInstance => {
            let key = spec.instance_key()?;
            (0..spec.n)
                .map(|i| {
                    let instance =
                        sample_backdoor_instance_rand(key, &stream.derive("poison", i as u64));
                    Ok(PoisoningSample {
                        instance,
                        label: spec.target_label,
                        origin: PoisonOrigin {
                            strategy: spec.strategy,
                            source_hash: None,
                            alpha: None,
                        },
                    })
                })
                .collect()
        }
        _ => {
            if benign_pool.len() < spec.n {
                return Err(Error::InsufficientPool {
                    needed: spec.n,
                    available: benign_pool.len(),
                });
            }
            let mut rng = stream.derive("poison-pick", 0).rng();
            let picks = rand::seq::index::sample(&mut rng, benign_pool.len(), spec.n);
            picks
                .iter()
                .map(|idx| {
                    let src = &benign_pool[idx];
                    let instance = inject(spec, src, spec.alpha_train)?;
                    Ok(PoisoningSample {
                        instance,
                        label: spec.target_label,
                        origin: PoisonOrigin {
                            strategy: spec.strategy,
                            source_hash: Some(src.content_hash()),
                            alpha: (spec.strategy != Strategy::Accessory)
                                .then_some(spec.alpha_train),
                        },
                    })
                })
                .collect()
        }
    }
}

/// Generates backdoor instances for evaluation. The input-instance strategy
/// draws `count` fresh noisy copies of the key (a sub-stream disjoint from
/// the poisoning draws); pattern strategies inject every eval-pool image at
/// alpha_test.
pub fn generate_backdoor_instances(
    spec: &BackdoorSpec,
    eval_pool: &[Image],
    stream: &Stream,
    count: usize,
) -> Result<Vec<Image>> {
    match spec.strategy {
        Strategy::InputInstance => {
            let key = spec.instance_key()?;
            Ok((0..count)
                .map(|i| sample_backdoor_instance_rand(key, &stream.derive("backdoor", i as u64)))
                .collect())
        }
        _ => {
            if eval_pool.is_empty() {
                return Err(Error::EmptyEval("backdoor eval pool".into()));
            }
            eval_pool
                .iter()
                .map(|x| inject(spec, x, spec.alpha_test))
                .collect()
        }
    }
}

/// Builds evaluation instances exactly as `generate_backdoor_instances` but
/// with a wrong key, recording each instance's ground-truth label. No
/// instance may have the target label as ground truth.
///
/// For an input-instance wrong key, `wrong_key_truth` must carry the ground
/// truth of the wrong key image.
pub fn wrong_key_instances(
    true_spec: &BackdoorSpec,
    wrong_key: &BackdoorKey,
    wrong_key_truth: Option<usize>,
    eval_pool: &[(Image, usize)],
    stream: &Stream,
    count: usize,
) -> Result<Vec<(Image, usize)>> {
    if *wrong_key == true_spec.key {
        return Err(Error::InvalidWrongKey);
    }
    let wrong_spec = BackdoorSpec {
        key: wrong_key.clone(),
        ..true_spec.clone()
    };
    match &wrong_spec.key {
        BackdoorKey::InputInstance(key) => {
            let truth = wrong_key_truth.ok_or_else(|| {
                Error::InvalidParameter(
                    "input-instance wrong key requires its ground-truth label".into(),
                )
            })?;
            if truth == true_spec.target_label {
                return Err(Error::InvalidParameter(
                    "wrong key ground truth equals the target label".into(),
                ));
            }
            Ok((0..count)
                .map(|i| {
                    (
                        sample_backdoor_instance_rand(key, &stream.derive("wrong-key", i as u64)),
                        truth,
                    )
                })
                .collect())
        }
        BackdoorKey::Pattern(_) => {
            let filtered: Vec<&(Image, usize)> = eval_pool
                .iter()
                .filter(|(_, y)| *y != true_spec.target_label)
                .collect();
            if filtered.is_empty() {
                return Err(Error::EmptyEval(
                    "wrong-key pool after excluding the target label".into(),
                ));
            }
            filtered
                .into_iter()
                .map(|(x, y)| Ok((inject(&wrong_spec, x, wrong_spec.alpha_test)?, *y)))
                .collect()
        }
    }
}

// --- Serialization -----------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct PatternKeySidecar {
    scale: Scale,
    scale_sizes: ScaleSizes,
    anchor: (usize, usize),
}

/// Writes a pattern key as pattern.png + mask.png (0 = opaque,
/// 255 = transparent) + key.json in `dir`.
pub fn save_pattern_key(key: &PatternKey, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    imaging::write_png(&key.pattern, &dir.join("pattern.png"))?;
    let mask_img = Image::new(
        key.pattern.height(),
        key.pattern.width(),
        1,
        key.transparent_mask
            .iter()
            .map(|&t| if t { 255 } else { 0 })
            .collect(),
    )?;
    imaging::write_png(&mask_img, &dir.join("mask.png"))?;
    let sidecar = PatternKeySidecar {
        scale: key.scale,
        scale_sizes: key.scale_sizes,
        anchor: key.anchor,
    };
    let json = serde_json::to_string_pretty(&sidecar)?;
    std::fs::write(dir.join("key.json"), json).map_err(|e| Error::io(dir.join("key.json"), e))?;
    Ok(())
}

pub fn load_pattern_key(dir: &Path) -> Result<PatternKey> {
    let pattern = imaging::read_png(&dir.join("pattern.png"))?;
    let mask_img = imaging::read_png(&dir.join("mask.png"))?;
    if (mask_img.height(), mask_img.width()) != (pattern.height(), pattern.width())
        || mask_img.channels() != 1
    {
        return Err(Error::Format {
            path: dir.join("mask.png"),
            message: "mask must be single-channel and pattern-sized".into(),
        });
    }
    let mask = mask_img.pixels().iter().map(|&p| p >= 128).collect();
    let raw = std::fs::read_to_string(dir.join("key.json"))
        .map_err(|e| Error::io(dir.join("key.json"), e))?;
    let sidecar: PatternKeySidecar = serde_json::from_str(&raw)?;
    PatternKey::new(pattern, mask, sidecar.scale, sidecar.scale_sizes, sidecar.anchor)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_image(h: usize, w: usize, c: usize, stream: &Stream) -> Image {
        let mut rng = stream.rng();
        Image::new(h, w, c, (0..h * w * c).map(|_| rng.gen()).collect()).unwrap()
    }

    #[test]
    fn sigma_rand_zero_bound_is_identity() {
        let s = Stream::new(5);
        let key_img = random_image(8, 8, 3, &s.derive("img", 0));
        let key = InputInstanceKey::new(key_img.clone(), 0.0).unwrap();
        assert_eq!(sample_backdoor_instance_rand(&key, &s), key_img);
    }

    #[test]
    fn sigma_rand_stays_within_bound() {
        let s = Stream::new(6);
        let key_img = random_image(8, 8, 3, &s.derive("img", 0));
        let key = InputInstanceKey::new(key_img.clone(), 5.0).unwrap();
        let out = sample_backdoor_instance_rand(&key, &s.derive("draw", 0));
        for (o, k) in out.pixels().iter().zip(key_img.pixels()) {
            assert!((f64::from(*o) - f64::from(*k)).abs() <= 5.0);
        }
    }

    #[test]
    fn sigma_rand_draws_differ_across_substreams() {
        let s = Stream::new(7);
        let key_img = random_image(47, 55, 3, &s.derive("img", 0));
        let key = InputInstanceKey::new(key_img, 5.0).unwrap();
        let mut prev = sample_backdoor_instance_rand(&key, &s.derive("draw", 0));
        for i in 1..100 {
            let cur = sample_backdoor_instance_rand(&key, &s.derive("draw", i));
            assert_ne!(prev, cur);
            prev = cur;
        }
    }

    #[test]
    fn blend_boundary_alphas() {
        let s = Stream::new(8);
        let x = random_image(6, 6, 3, &s.derive("x", 0));
        let k = PatternKey::full_frame(random_image(6, 6, 3, &s.derive("k", 0)));
        assert_eq!(blend_inject(&k, &x, 0.0).unwrap(), x);
        assert_eq!(blend_inject(&k, &x, 1.0).unwrap(), k.pattern);
    }

    #[test]
    fn blend_hand_value() {
        let x = Image::new(1, 1, 1, vec![200]).unwrap();
        let k = PatternKey::full_frame(Image::new(1, 1, 1, vec![100]).unwrap());
        // 0.2 * 100 + 0.8 * 200 = 180
        assert_eq!(blend_inject(&k, &x, 0.2).unwrap().pixels(), &[180]);
    }

    #[test]
    fn blend_rejects_bad_input() {
        let s = Stream::new(9);
        let x = random_image(6, 6, 3, &s.derive("x", 0));
        let k = PatternKey::full_frame(random_image(4, 4, 3, &s.derive("k", 0)));
        assert!(matches!(
            blend_inject(&k, &x, 0.5),
            Err(Error::ShapeMismatch { .. })
        ));
        let k2 = PatternKey::full_frame(x.clone());
        assert!(matches!(
            blend_inject(&k2, &x, 1.5),
            Err(Error::InvalidParameter(_))
        ));
    }

    #[test]
    fn accessory_transparency_cases() {
        let s = Stream::new(10);
        let x = random_image(6, 6, 3, &s.derive("x", 0));
        let pat = random_image(6, 6, 3, &s.derive("k", 0));

        // fully transparent -> x unchanged
        let all_transparent =
            PatternKey::new(pat.clone(), vec![true; 36], Scale::Medium, ScaleSizes::uniform((6, 6)), (0, 0))
                .unwrap();
        assert_eq!(accessory_inject(&all_transparent, &x).unwrap(), x);

        // fully opaque full frame -> pattern
        let all_opaque = PatternKey::full_frame(pat.clone());
        assert_eq!(accessory_inject(&all_opaque, &x).unwrap(), pat);

        // one opaque pixel -> differs from x only there
        let mut mask = vec![true; 36];
        mask[2 * 6 + 3] = false;
        let one = PatternKey::new(pat.clone(), mask, Scale::Medium, ScaleSizes::uniform((6, 6)), (0, 0))
            .unwrap();
        let out = accessory_inject(&one, &x).unwrap();
        for i in 0..6 {
            for j in 0..6 {
                for c in 0..3 {
                    if (i, j) == (2, 3) {
                        assert_eq!(out.get(i, j, c), pat.get(i, j, c));
                    } else {
                        assert_eq!(out.get(i, j, c), x.get(i, j, c));
                    }
                }
            }
        }
    }

    #[test]
    fn ba_reduction_identities() {
        let s = Stream::new(11);
        for trial in 0..50 {
            let x = random_image(8, 8, 3, &s.derive("x", trial));
            let pat = random_image(8, 8, 3, &s.derive("k", trial));
            let alpha = s.derive("a", trial).rng().gen_range(0.0..=1.0);
            let key = PatternKey::full_frame(pat);
            assert_eq!(
                blended_accessory_inject(&key, &x, alpha).unwrap(),
                blend_inject(&key, &x, alpha).unwrap()
            );
            assert_eq!(
                blended_accessory_inject(&key, &x, 1.0).unwrap(),
                accessory_inject(&key, &x).unwrap()
            );
            assert_eq!(blended_accessory_inject(&key, &x, 0.0).unwrap(), x);
        }
    }

    #[test]
    fn poisons_without_replacement_and_deterministic() {
        let s = Stream::new(12);
        let pool: Vec<Image> = (0..8).map(|i| random_image(6, 6, 3, &s.derive("pool", i))).collect();
        let key = PatternKey::full_frame(random_image(6, 6, 3, &s.derive("k", 0)));
        let spec = BackdoorSpec::new(
            Strategy::Blended,
            BackdoorKey::Pattern(key),
            2,
            0.2,
            0.5,
            8,
        )
        .unwrap();
        let a = generate_poisons(&spec, &pool, &s.derive("gen", 0)).unwrap();
        let b = generate_poisons(&spec, &pool, &s.derive("gen", 0)).unwrap();
        assert_eq!(a, b);
        assert!(a.iter().all(|p| p.label == 2));
        // n = |pool|: every pool image used exactly once
        let mut hashes: Vec<_> = a.iter().map(|p| p.origin.source_hash.clone().unwrap()).collect();
        hashes.sort();
        hashes.dedup();
        assert_eq!(hashes.len(), 8);

        let too_many = BackdoorSpec { n: 9, ..spec };
        assert!(matches!(
            generate_poisons(&too_many, &pool, &s),
            Err(Error::InsufficientPool { .. })
        ));
    }

    #[test]
    fn input_instance_poisons_and_backdoors_disjoint() {
        let s = Stream::new(13);
        let key_img = random_image(8, 8, 3, &s.derive("img", 0));
        let key = InputInstanceKey::new(key_img, 5.0).unwrap();
        let spec = BackdoorSpec::new(
            Strategy::InputInstance,
            BackdoorKey::InputInstance(key),
            3,
            1.0,
            1.0,
            5,
        )
        .unwrap();
        let poisons = generate_poisons(&spec, &[], &s.derive("run", 0)).unwrap();
        assert_eq!(poisons.len(), 5);
        let backdoors = generate_backdoor_instances(&spec, &[], &s.derive("run", 0), 20).unwrap();
        assert_eq!(backdoors.len(), 20);
        for b in &backdoors {
            assert!(poisons.iter().all(|p| p.instance != *b));
        }
    }

    #[test]
    fn blended_backdoors_alpha_zero_degenerate() {
        let s = Stream::new(14);
        let pool: Vec<Image> = (0..4).map(|i| random_image(6, 6, 3, &s.derive("pool", i))).collect();
        let key = PatternKey::full_frame(random_image(6, 6, 3, &s.derive("k", 0)));
        let spec = BackdoorSpec::new(
            Strategy::Blended,
            BackdoorKey::Pattern(key),
            0,
            0.2,
            0.0,
            2,
        )
        .unwrap();
        let out = generate_backdoor_instances(&spec, &pool, &s, 0).unwrap();
        assert_eq!(out, pool);
    }

    #[test]
    fn wrong_key_rules() {
        let s = Stream::new(15);
        let pat = random_image(6, 6, 3, &s.derive("k", 0));
        let spec = BackdoorSpec::new(
            Strategy::Blended,
            BackdoorKey::Pattern(PatternKey::full_frame(pat.clone())),
            1,
            0.2,
            0.5,
            2,
        )
        .unwrap();
        // identical key rejected
        assert!(matches!(
            wrong_key_instances(&spec, &spec.key.clone(), None, &[], &s, 4),
            Err(Error::InvalidWrongKey)
        ));
        // pool filtered to exclude target label, empty filtered pool errors
        let wrong = BackdoorKey::Pattern(PatternKey::full_frame(random_image(
            6,
            6,
            3,
            &s.derive("wk", 0),
        )));
        let only_target: Vec<(Image, usize)> =
            (0..3).map(|i| (random_image(6, 6, 3, &s.derive("e", i)), 1)).collect();
        assert!(matches!(
            wrong_key_instances(&spec, &wrong, None, &only_target, &s, 4),
            Err(Error::EmptyEval(_))
        ));
        let mixed: Vec<(Image, usize)> = (0..4)
            .map(|i| (random_image(6, 6, 3, &s.derive("e2", i)), (i % 3) as usize))
            .collect();
        let out = wrong_key_instances(&spec, &wrong, None, &mixed, &s, 4).unwrap();
        assert!(out.iter().all(|(_, y)| *y != 1));
        assert_eq!(out.len(), mixed.iter().filter(|(_, y)| *y != 1).count());
    }

    #[test]
    fn pattern_key_roundtrip() {
        let s = Stream::new(16);
        let pat = random_image(6, 8, 3, &s.derive("k", 0));
        let mask: Vec<bool> = (0..48).map(|i| i % 3 == 0).collect();
        let key = PatternKey::new(
            pat,
            mask,
            Scale::Small,
            ScaleSizes {
                small: (3, 4),
                medium: (6, 8),
                large: (12, 16),
            },
            (2, 1),
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_pattern_key(&key, dir.path()).unwrap();
        assert_eq!(load_pattern_key(dir.path()).unwrap(), key);
    }
}
