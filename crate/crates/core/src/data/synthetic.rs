//! Deterministic generator of coloured-shape scenes and templated questions.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{
    write_jsonl, CandidateBox, QuestionType, SceneImage, SceneObject, Split, VqaExample, Vocab,
    COLORS, SHAPES, WORDS,
};
use crate::config::KvConfig;
use crate::error::{Error, Result};
use crate::numerics::{Real, Tensor};
use crate::region::{iou, BBox};

pub const ANNOTATORS: usize = 10;

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    /// Images are `3 × grid × grid`.
    pub grid: usize,
    pub num_shapes: usize,
    pub num_colors: usize,
    pub max_objects: usize,
    pub questions_per_image: usize,
    pub train_images: usize,
    pub val_images: usize,
    /// Size of the question token vocabulary.
    pub vocab_size: usize,
    /// Unlabeled random candidate boxes added per image.
    pub random_candidates: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            grid: 32,
            num_shapes: 3,
            num_colors: 3,
            max_objects: 3,
            questions_per_image: 2,
            train_images: 32,
            val_images: 16,
            vocab_size: 32,
            random_candidates: 4,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    /// Keys: `grid`, `shapes`, `colors`, `max_objects`,
    /// `questions_per_image`, `train_images`, `val_images`, `vocab_size`,
    /// `random_candidates`, `seed`.
    pub fn from_kv(kv: &mut KvConfig) -> Result<Self> {
        let d = Self::default();
        Ok(Self {
            grid: kv.take("grid", d.grid)?,
            num_shapes: kv.take("shapes", d.num_shapes)?,
            num_colors: kv.take("colors", d.num_colors)?,
            max_objects: kv.take("max_objects", d.max_objects)?,
            questions_per_image: kv.take("questions_per_image", d.questions_per_image)?,
            train_images: kv.take("train_images", d.train_images)?,
            val_images: kv.take("val_images", d.val_images)?,
            vocab_size: kv.take("vocab_size", d.vocab_size)?,
            random_candidates: kv.take("random_candidates", d.random_candidates)?,
            seed: kv.take("seed", d.seed)?,
        })
    }

    pub fn to_kv(&self) -> KvConfig {
        let mut kv = KvConfig::default();
        kv.set("grid", self.grid);
        kv.set("shapes", self.num_shapes);
        kv.set("colors", self.num_colors);
        kv.set("max_objects", self.max_objects);
        kv.set("questions_per_image", self.questions_per_image);
        kv.set("train_images", self.train_images);
        kv.set("val_images", self.val_images);
        kv.set("vocab_size", self.vocab_size);
        kv.set("random_candidates", self.random_candidates);
        kv.set("seed", self.seed);
        kv
    }

    /// Tokens the templates need: three specials, the template words, then
    /// shape and colour names.
    pub fn required_vocab(&self) -> usize {
        3 + WORDS.len() + self.num_shapes + self.num_colors
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("shapes", self.num_shapes),
            ("colors", self.num_colors),
            ("max_objects", self.max_objects),
            ("questions_per_image", self.questions_per_image),
            ("train_images", self.train_images),
            ("val_images", self.val_images),
        ];
        if let Some((k, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{k} must be at least 1")));
        }
        if self.num_shapes > SHAPES.len() || self.num_colors > COLORS.len() {
            return Err(Error::Config(format!(
                "at most {} shapes and {} colors are available",
                SHAPES.len(),
                COLORS.len()
            )));
        }
        if self.grid < 16 {
            return Err(Error::Config(format!("grid {} is below the minimum of 16", self.grid)));
        }
        if self.vocab_size < self.required_vocab() {
            return Err(Error::Config(format!(
                "vocab_size {} is too small for the question templates, which need {}",
                self.vocab_size,
                self.required_vocab()
            )));
        }
        Ok(())
    }

    pub fn vocab(&self) -> Vocab {
        let mut tokens: Vec<String> = ["[PAD]", "[CLS]", "[SEP]"].iter().map(|s| s.to_string()).collect();
        tokens.extend(WORDS.iter().map(|s| s.to_string()));
        tokens.extend(SHAPES[..self.num_shapes].iter().map(|s| s.to_string()));
        tokens.extend(COLORS[..self.num_colors].iter().map(|c| c.0.to_string()));
        for i in tokens.len()..self.vocab_size {
            tokens.push(format!("[unused{i}]"));
        }
        let mut answers = vec!["no".to_string(), "yes".to_string()];
        answers.extend((0..=self.max_objects).map(|n| n.to_string()));
        answers.extend(COLORS[..self.num_colors].iter().map(|c| c.0.to_string()));
        Vocab { tokens, answers }
    }
}

fn shape_token(s: u32) -> usize {
    3 + WORDS.len() + s as usize
}

fn word(w: &str) -> usize {
    3 + WORDS.iter().position(|x| *x == w).expect("template word")
}

/// Whether pixel centre `(u, v)`, in box-relative [0,1] coordinates, lies on
/// the shape.
fn inside(shape: u32, u: f32, v: f32) -> bool {
    let (a, b) = (2.0 * u - 1.0, 2.0 * v - 1.0);
    match shape {
        0 => true,
        1 => a * a + b * b <= 1.0,
        2 => v >= (2.0 * u - 1.0).abs(),
        3 => a.abs() < 0.34 || b.abs() < 0.34,
        4 => (0.36..=1.0).contains(&(a * a + b * b)),
        _ => a.abs() + b.abs() <= 1.0,
    }
}

/// Renders a scene as a 3×size×size map: shapes in their colour over a
/// faint noise background.
pub fn render<T: Real>(image: &SceneImage) -> Tensor<T> {
    let n = image.size;
    let mut rng = ChaCha8Rng::seed_from_u64(image.noise_seed);
    let noise = Normal::new(0.0, 0.05).expect("valid std");
    let mut data: Vec<f32> = (0..3 * n * n).map(|_| noise.sample(&mut rng) as f32).collect();
    for o in &image.objects {
        let [x1, y1, x2, y2] = o.bbox;
        let rgb = COLORS[o.color as usize].1;
        for py in (y1.floor() as usize)..(y2.ceil() as usize).min(n) {
            for px in (x1.floor() as usize)..(x2.ceil() as usize).min(n) {
                let u = (px as f32 + 0.5 - x1) / (x2 - x1);
                let v = (py as f32 + 0.5 - y1) / (y2 - y1);
                if (0.0..=1.0).contains(&u) && (0.0..=1.0).contains(&v) && inside(o.shape, u, v) {
                    for (c, &val) in rgb.iter().enumerate() {
                        data[c * n * n + py * n + px] = val;
                    }
                }
            }
        }
    }
    Tensor::new(&[3, n, n], data.into_iter().map(|x| T::of(x as f64)).collect())
        .expect("render shape is consistent")
}

fn to_bbox(b: [f32; 4]) -> BBox {
    BBox::region(b[0], b[1], b[2], b[3]).expect("generated boxes are valid")
}

fn place_objects(spec: &SyntheticSpec, rng: &mut ChaCha8Rng) -> Vec<SceneObject> {
    let n = rng.gen_range(1..=spec.max_objects);
    let g = spec.grid as f32;
    let (lo, hi) = ((g / 5.0).round() as u32, (g / 2.5).round() as u32);
    let mut objs: Vec<SceneObject> = Vec::with_capacity(n);
    let mut attempts = 0;
    while objs.len() < n && attempts < 200 {
        attempts += 1;
        let w = rng.gen_range(lo..=hi) as f32;
        let h = rng.gen_range(lo..=hi) as f32;
        let x = rng.gen_range(0..=(spec.grid as u32 - w as u32)) as f32;
        let y = rng.gen_range(0..=(spec.grid as u32 - h as u32)) as f32;
        let bbox = [x, y, x + w, y + h];
        if objs.iter().any(|o| iou(&to_bbox(o.bbox), &to_bbox(bbox)) > 0.0) {
            continue;
        }
        objs.push(SceneObject {
            bbox,
            shape: rng.gen_range(0..spec.num_shapes as u32),
            color: rng.gen_range(0..spec.num_colors as u32),
        });
    }
    objs
}

fn candidates(spec: &SyntheticSpec, objects: &[SceneObject], rng: &mut ChaCha8Rng) -> Vec<CandidateBox> {
    let g = spec.grid as f32;
    let clamp = |b: [f32; 4]| -> [f32; 4] {
        let x1 = b[0].clamp(0.0, g - 2.0);
        let y1 = b[1].clamp(0.0, g - 2.0);
        [x1, y1, b[2].clamp(x1 + 2.0, g), b[3].clamp(y1 + 2.0, g)]
    };
    let mut out = Vec::new();
    for o in objects {
        out.push(CandidateBox {
            bbox: o.bbox,
            category: Some(o.shape),
            attribute: Some(o.color),
        });
        for _ in 0..2 {
            let j: [f32; 4] = std::array::from_fn(|i| o.bbox[i] + rng.gen_range(-2i32..=2) as f32);
            let b = clamp(j);
            let matched = iou(&to_bbox(b), &to_bbox(o.bbox)) >= 0.5;
            out.push(CandidateBox {
                bbox: b,
                category: matched.then_some(o.shape),
                attribute: matched.then_some(o.color),
            });
        }
    }
    for _ in 0..spec.random_candidates {
        let w = rng.gen_range(3.0..g / 2.0f32).round();
        let h = rng.gen_range(3.0..g / 2.0f32).round();
        let x = rng.gen_range(0.0..g - w).round();
        let y = rng.gen_range(0.0..g - h).round();
        out.push(CandidateBox {
            bbox: clamp([x, y, x + w, y + h]),
            category: None,
            attribute: None,
        });
    }
    out
}

struct Question {
    tokens: Vec<usize>,
    text: String,
    qtype: QuestionType,
    answer: String,
}

fn ask(spec: &SyntheticSpec, objects: &[SceneObject], rng: &mut ChaCha8Rng) -> Question {
    let color_token = |c: u32| 3 + WORDS.len() + spec.num_shapes + c as usize;
    let unique: Vec<&SceneObject> = objects
        .iter()
        .filter(|o| objects.iter().filter(|p| p.shape == o.shape).count() == 1)
        .collect();
    let mut kind = rng.gen_range(0..3);
    if kind == 2 && unique.is_empty() {
        kind = 1;
    }
    match kind {
        0 => {
            let (shape, color) = if rng.gen_bool(0.5) {
                let o = objects.choose(rng).expect("scenes have objects");
                (o.shape, o.color)
            } else {
                (rng.gen_range(0..spec.num_shapes as u32), rng.gen_range(0..spec.num_colors as u32))
            };
            let yes = objects.iter().any(|o| o.shape == shape && o.color == color);
            Question {
                tokens: vec![word("is"), word("there"), word("a"), color_token(color), shape_token(shape)],
                text: format!("is there a {} {}", COLORS[color as usize].0, SHAPES[shape as usize]),
                qtype: QuestionType::YesNo,
                answer: if yes { "yes" } else { "no" }.into(),
            }
        }
        1 => {
            let shape = rng.gen_range(0..spec.num_shapes as u32);
            let count = objects.iter().filter(|o| o.shape == shape).count();
            Question {
                tokens: vec![word("how"), word("many"), shape_token(shape), word("are"), word("there")],
                text: format!("how many {}s are there", SHAPES[shape as usize]),
                qtype: QuestionType::Number,
                answer: count.to_string(),
            }
        }
        _ => {
            let o = unique.choose(rng).expect("checked non-empty");
            Question {
                tokens: vec![word("what"), word("color"), word("is"), word("the"), shape_token(o.shape)],
                text: format!("what color is the {}", SHAPES[o.shape as usize]),
                qtype: QuestionType::Other,
                answer: COLORS[o.color as usize].0.into(),
            }
        }
    }
}

/// Ten answers: at least four agree with the template answer, the rest do
/// so with probability 0.8 and otherwise give a same-type alternative.
fn annotate(spec: &SyntheticSpec, q: &Question, rng: &mut ChaCha8Rng) -> Vec<String> {
    (0..ANNOTATORS)
        .map(|i| {
            if i < 4 || rng.gen_bool(0.8) {
                return q.answer.clone();
            }
            match q.qtype {
                QuestionType::YesNo => if q.answer == "yes" { "no" } else { "yes" }.into(),
                QuestionType::Number => {
                    let n: usize = q.answer.parse().expect("count answer");
                    let alt = if n == 0 || (n < spec.max_objects && rng.gen_bool(0.5)) { n + 1 } else { n - 1 };
                    alt.to_string()
                }
                QuestionType::Other => COLORS[rng.gen_range(0..spec.num_colors)].0.into(),
            }
        })
        .collect()
}

/// Train and val records. A pure function of the spec (including its seed).
pub fn generate(spec: &SyntheticSpec) -> Result<(Vec<VqaExample>, Vec<VqaExample>)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut splits = (Vec::new(), Vec::new());
    let mut next_id = 0u32;
    for img in 0..(spec.train_images + spec.val_images) {
        let objects = place_objects(spec, &mut rng);
        let image = SceneImage {
            id: img as u32,
            size: spec.grid,
            noise_seed: rng.gen(),
            objects,
        };
        let cands = candidates(spec, &image.objects, &mut rng);
        for _ in 0..spec.questions_per_image {
            let q = ask(spec, &image.objects, &mut rng);
            let answers = annotate(spec, &q, &mut rng);
            let ex = VqaExample {
                id: next_id,
                image: image.clone(),
                candidates: cands.clone(),
                question: q.tokens,
                question_text: q.text,
                qtype: q.qtype,
                answer: q.answer,
                answers,
            };
            next_id += 1;
            if img < spec.train_images {
                splits.0.push(ex);
            } else {
                splits.1.push(ex);
            }
        }
    }
    Ok(splits)
}

/// Writes `train.jsonl`, `val.jsonl`, `vocab.json` and `spec.cfg` into `dir`.
pub fn write_dataset(spec: &SyntheticSpec, dir: &Path) -> Result<()> {
    let (train, val) = generate(spec)?;
    fs::create_dir_all(dir)?;
    write_jsonl(&Split::Train.file(dir), &train)?;
    write_jsonl(&Split::Val.file(dir), &val)?;
    fs::write(dir.join("vocab.json"), serde_json::to_string_pretty(&spec.vocab())?)?;
    fs::write(dir.join("spec.cfg"), spec.to_kv().render())?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_vocab_is_a_config_error() {
        let spec = SyntheticSpec {
            vocab_size: 10,
            ..SyntheticSpec::default()
        };
        assert!(matches!(generate(&spec), Err(Error::Config(m)) if m.contains("too small")));
    }

    #[test]
    fn shapes_fill_expected_pixels() {
        let img = SceneImage {
            id: 0,
            size: 16,
            noise_seed: 0,
            objects: vec![SceneObject { bbox: [2.0, 2.0, 10.0, 10.0], shape: 0, color: 2 }],
        };
        let t = render::<f32>(&img);
        assert_eq!(t.data()[2 * 256 + 5 * 16 + 5], 1.0);
        assert_eq!(t.data()[5 * 16 + 5], 0.0);
        assert!(t.data()[2 * 256 + 12 * 16 + 12].abs() < 0.5);
    }
}
