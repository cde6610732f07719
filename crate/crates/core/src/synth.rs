//! Small synthetic corpora for smoke runs, tests and benchmarks.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::imaging::{area_resize, save_png, tensor_to_image};
use crate::tensor::Tensor;
use crate::text::{Caption, MixedTokenizer, Vocabulary};

pub const COLOR_WORDS: [&str; 4] = ["red", "green", "blue", "yellow"];
const COLOR_RGB: [[f64; 3]; 4] = [[0.9, -0.8, -0.8], [-0.8, 0.9, -0.8], [-0.8, -0.8, 0.9], [0.9, 0.9, -0.8]];

fn fill(res: usize, f: impl Fn(usize, f64, f64) -> f64) -> Tensor {
    Tensor::from_fn(&[3, res, res], |i| {
        let c = i / (res * res);
        let y = (i / res) % res;
        let x = i % res;
        let u = (x as f64 + 0.5) / res as f64;
        let v = (y as f64 + 0.5) / res as f64;
        f(c, u, v).clamp(-1.0, 1.0)
    })
}

/// Paired images and captions with one class label per pair.
pub struct LabelledPairs {
    pub vocab: Vocabulary,
    pub pairs: Vec<(Tensor, Caption)>,
    pub labels: Vec<usize>,
}

/// Four solid-colour classes, each captioned "a <colour> face"; `per_class` noisy copies each.
pub fn color_toy_set(resolution: usize, per_class: usize, max_len: usize, seed: u64) -> Result<LabelledPairs> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let texts: Vec<String> = COLOR_WORDS.iter().map(|c| format!("a {c} face")).collect();
    let vocab = Vocabulary::build(texts.iter().map(String::as_str), &MixedTokenizer);
    let mut pairs = Vec::new();
    let mut labels = Vec::new();
    for (k, text) in texts.iter().enumerate() {
        let cap = vocab.caption(text, &MixedTokenizer, max_len)?;
        for _ in 0..per_class {
            let jitter: [f64; 3] = [rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1)];
            let noise: Vec<f64> = (0..3 * resolution * resolution).map(|_| rng.random_range(-0.05..0.05)).collect();
            let img = fill(resolution, |c, _, _| COLOR_RGB[k][c] + jitter[c]).zip_map(&Tensor::new(vec![3, resolution, resolution], noise), |a, b| (a + b).clamp(-1.0, 1.0));
            pairs.push((img, cap.clone()));
            labels.push(k);
        }
    }
    Ok(LabelledPairs { vocab, pairs, labels })
}

/// Two template families: a light disc on a dark field and a dark bar on a light field.
pub fn template_image(family: usize, resolution: usize) -> Tensor {
    match family % 2 {
        0 => fill(resolution, |c, u, v| {
            let d = ((u - 0.5).powi(2) + (v - 0.5).powi(2)).sqrt();
            if d < 0.3 {
                [0.8, 0.8, 0.7][c]
            } else {
                -0.7
            }
        }),
        _ => fill(resolution, |c, u, v| {
            if (0.35..0.65).contains(&v) && (0.15..0.85).contains(&u) {
                -0.8
            } else {
                [0.7, 0.6, 0.8][c]
            }
        }),
    }
}

/// Template with a coloured corner mark; `variant` picks colour and corner.
pub fn variant_image(family: usize, variant: usize, resolution: usize) -> Tensor {
    let base = template_image(family, resolution);
    let color = COLOR_RGB[variant % 4];
    let (cu, cv) = [(0.2, 0.2), (0.8, 0.2), (0.2, 0.8), (0.8, 0.8)][variant % 4];
    let mark = fill(resolution, |c, u, v| if (u - cu).abs() < 0.12 && (v - cv).abs() < 0.12 { color[c] } else { f64::NAN });
    base.zip_map(&mark, |b, m| if m.is_nan() { b } else { m })
}

pub const FAMILY_WORDS: [&str; 2] = ["panda", "doge"];

/// Training pairs for the overfit harness: `families × variants` captioned images plus their templates.
pub struct TemplateCorpus {
    pub vocab: Vocabulary,
    pub pairs: Vec<(Tensor, Caption)>,
    pub families: Vec<usize>,
    pub templates: Vec<Tensor>,
}

pub fn template_corpus(resolution: usize, variants: usize, max_len: usize) -> Result<TemplateCorpus> {
    let mut texts = Vec::new();
    for fam in FAMILY_WORDS {
        for v in 0..variants {
            texts.push(format!("{fam} {} mark", COLOR_WORDS[v % 4]));
        }
    }
    let vocab = Vocabulary::build(texts.iter().map(String::as_str), &MixedTokenizer);
    let mut pairs = Vec::new();
    let mut families = Vec::new();
    for (fam, _) in FAMILY_WORDS.iter().enumerate() {
        for v in 0..variants {
            let cap = vocab.caption(&texts[fam * variants + v], &MixedTokenizer, max_len)?;
            pairs.push((variant_image(fam, v, resolution), cap));
            families.push(fam);
        }
    }
    let templates = (0..FAMILY_WORDS.len()).map(|f| template_image(f, resolution)).collect();
    Ok(TemplateCorpus { vocab, pairs, families, templates })
}

const FILLER: [&str; 12] = [
    "when", "you", "see", "the", "code", "works", "on", "first", "try", "my", "face", "today",
];

/// A raw meme corpus on disk: `n` PNGs across four template families, each with a
/// caption band along the bottom, plus `captions.tsv` (`file<TAB>caption`).
///
/// Caption lengths span 1..=15 tokens so the length filter has work to do; every
/// seventh caption is a single repeated character.
pub fn write_raw_corpus(dir: &Path, n: usize, resolution: usize, seed: u64) -> Result<PathBuf> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(format!("create {}", dir.display()), e))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tsv = String::new();
    let band = (resolution as f64 * 0.2).round() as usize;
    for i in 0..n {
        let family = i % 4;
        let base = if family < 2 {
            template_image(family, resolution)
        } else {
            let t = template_image(family, resolution);
            let shift = if family == 2 { 0.6 } else { -0.6 };
            t.map(|v| (-v + shift * 0.3).clamp(-1.0, 1.0))
        };
        let noise = Tensor::from_fn(base.shape(), |_| rng.random_range(-0.08..0.08));
        let mut img = base.zip_map(&noise, |a, b| (a + b).clamp(-1.0, 1.0));
        let data = img.data_mut();
        for c in 0..3 {
            for y in resolution - band..resolution {
                for x in 0..resolution {
                    let stripe = if (x / 3 + y) % 4 == 0 { -1.0 } else { 1.0 };
                    data[(c * resolution + y) * resolution + x] = stripe;
                }
            }
        }
        let name = format!("meme_{i:04}.png");
        save_png(&tensor_to_image(&img), &dir.join(&name))?;
        let caption = if i % 7 == 6 {
            "哈".repeat(rng.random_range(4..8))
        } else {
            let len = 1 + (i * 5 + rng.random_range(0..3)) % 15;
            (0..len).map(|_| FILLER[rng.random_range(0..FILLER.len())]).collect::<Vec<_>>().join(" ")
        };
        writeln!(tsv, "{name}\t{caption}").expect("write to string");
    }
    let path = dir.join("captions.tsv");
    std::fs::write(&path, tsv).map_err(|e| Error::io(format!("write {}", path.display()), e))?;
    Ok(path)
}

/// Downsample a `[3, R, R]` image to `r`.
pub fn at_resolution(image: &Tensor, r: usize) -> Tensor {
    area_resize(image, r, r)
}
