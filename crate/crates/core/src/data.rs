//! Images, image-text pairs, the synthetic shapes-and-colors generator,
//! augmentation and batching.

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

#[allow(unused_imports)]
use num_traits::Float;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::textproc::Vocabulary;

/// RGB image with values in `[0, 1]`, stored `[height × width × 3]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || data.len() != height * width * 3 {
            return Err(Error::shape("image", &[height, width, 3], &[data.len()]));
        }
        if data.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Data("image values must lie in [0, 1]".into()));
        }
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, rgb: [f64; 3]) -> Self {
        let data = rgb.iter().copied().cycle().take(height * width * 3).collect();
        Self { height, width, data }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn pixel(&self, y: usize, x: usize) -> &[f64] {
        let o = (y * self.width + x) * 3;
        &self.data[o..o + 3]
    }

    fn set(&mut self, y: usize, x: usize, rgb: [f64; 3]) {
        let o = (y * self.width + x) * 3;
        self.data[o..o + 3].copy_from_slice(&rgb);
    }

    pub fn flip_horizontal(&self) -> Image {
        let mut out = self.clone();
        for y in 0..self.height {
            for x in 0..self.width {
                out.set(y, x, self.rgb(y, self.width - 1 - x));
            }
        }
        out
    }

    fn rgb(&self, y: usize, x: usize) -> [f64; 3] {
        let p = self.pixel(y, x);
        [p[0], p[1], p[2]]
    }

    /// Bilinear sample at continuous coordinates (pixel centers at integers).
    fn sample(&self, y: f64, x: f64) -> [f64; 3] {
        let y = y.clamp(0.0, (self.height - 1) as f64);
        let x = x.clamp(0.0, (self.width - 1) as f64);
        let (y0, x0) = (y.floor() as usize, x.floor() as usize);
        let (y1, x1) = ((y0 + 1).min(self.height - 1), (x0 + 1).min(self.width - 1));
        let (fy, fx) = (y - y0 as f64, x - x0 as f64);
        let mut out = [0.0; 3];
        for (c, o) in out.iter_mut().enumerate() {
            let top = self.pixel(y0, x0)[c] * (1.0 - fx) + self.pixel(y0, x1)[c] * fx;
            let bottom = self.pixel(y1, x0)[c] * (1.0 - fx) + self.pixel(y1, x1)[c] * fx;
            *o = top * (1.0 - fy) + bottom * fy;
        }
        out
    }

    /// Bilinear resize of the window `[top, top+h) × [left, left+w)` to
    /// `size × size`.
    pub fn crop_resize(&self, top: f64, left: f64, h: f64, w: f64, size: usize) -> Image {
        let mut out = Image::filled(size, size, [0.0; 3]);
        for y in 0..size {
            for x in 0..size {
                let sy = top + (y as f64 + 0.5) * h / size as f64 - 0.5;
                let sx = left + (x as f64 + 0.5) * w / size as f64 - 0.5;
                out.set(y, x, self.sample(sy, sx));
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum Shape {
    Square,
    Circle,
    Triangle,
}

impl Shape {
    pub const ALL: [Shape; 3] = [Shape::Square, Shape::Circle, Shape::Triangle];

    pub fn word(self, count: u8) -> &'static str {
        match (self, count > 1) {
            (Shape::Square, false) => "square",
            (Shape::Square, true) => "squares",
            (Shape::Circle, false) => "circle",
            (Shape::Circle, true) => "circles",
            (Shape::Triangle, false) => "triangle",
            (Shape::Triangle, true) => "triangles",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum Color {
    Red,
    Green,
    Blue,
    Yellow,
}

impl Color {
    pub const ALL: [Color; 4] = [Color::Red, Color::Green, Color::Blue, Color::Yellow];

    pub fn word(self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Green => "green",
            Color::Blue => "blue",
            Color::Yellow => "yellow",
        }
    }

    pub fn rgb(self) -> [f64; 3] {
        match self {
            Color::Red => [0.9, 0.1, 0.1],
            Color::Green => [0.1, 0.75, 0.15],
            Color::Blue => [0.1, 0.2, 0.9],
            Color::Yellow => [0.95, 0.9, 0.1],
        }
    }
}

/// `count` copies of one shape in one color.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ObjectGroup {
    pub shape: Shape,
    pub color: Color,
    pub count: u8,
}

impl ObjectGroup {
    fn phrase(&self) -> String {
        let n = match self.count {
            1 => "a",
            2 => "two",
            _ => "three",
        };
        format!("{n} {} {}", self.color.word(), self.shape.word(self.count))
    }
}

/// Everything needed to re-render a synthetic image and recover its ground
/// truth: the object groups (canonically sorted) and the grid cell of every
/// object, in group order.
#[derive(Debug, Clone, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Scene {
    pub size: usize,
    pub groups: Vec<ObjectGroup>,
    pub cells: Vec<u8>,
}

const GRID: usize = 3;
const BACKGROUND: [f64; 3] = [0.5, 0.5, 0.5];

impl Scene {
    pub fn object_count(&self) -> usize {
        self.groups.iter().map(|g| g.count as usize).sum()
    }

    /// Color words and number-inflected shape words of every group; the
    /// content words any truthful caption must mention.
    /// Shape nouns in the inflection the captions use.
    pub fn object_words(&self) -> Vec<String> {
        self.groups.iter().map(|g| g.shape.word(g.count).to_string()).collect()
    }

    pub fn color_words(&self) -> Vec<String> {
        self.groups.iter().map(|g| g.color.word().to_string()).collect()
    }

    pub fn render(&self) -> Result<Image> {
        if self.cells.len() != self.object_count() || self.size < GRID * 4 {
            return Err(Error::Data("scene cells do not match its objects".into()));
        }
        let mut img = Image::filled(self.size, self.size, BACKGROUND);
        let cell = self.size / GRID;
        let margin = (self.size - cell * GRID) / 2;
        let shapes = self
            .groups
            .iter()
            .flat_map(|g| core::iter::repeat((g.shape, g.color)).take(g.count as usize));
        for ((shape, color), &c) in shapes.zip(&self.cells) {
            let c = c as usize;
            if c >= GRID * GRID {
                return Err(Error::Data(format!("cell {c} outside the {GRID}x{GRID} grid")));
            }
            let oy = margin + (c / GRID) * cell;
            let ox = margin + (c % GRID) * cell;
            // object occupies the cell minus a one-pixel border
            let extent = cell as f64 - 2.0;
            for y in 0..cell {
                for x in 0..cell {
                    let (py, px) = (y as f64 - 1.0 + 0.5, x as f64 - 1.0 + 0.5);
                    let inside = match shape {
                        Shape::Square => (0.0..extent).contains(&py) && (0.0..extent).contains(&px),
                        Shape::Circle => {
                            let r = extent / 2.0;
                            let (dy, dx) = (py - r, px - r);
                            dy * dy + dx * dx <= r * r
                        }
                        Shape::Triangle => {
                            // apex at the top center, base along the bottom
                            (0.0..extent).contains(&py) && (px - extent / 2.0).abs() <= py / 2.0
                        }
                    };
                    if inside {
                        img.set(oy + y, ox + x, color.rgb());
                    }
                }
            }
        }
        Ok(img)
    }

    /// Distinct captions that truthfully describe the scene, in template
    /// order.
    pub fn captions(&self) -> Vec<String> {
        let phrases: Vec<String> = self.groups.iter().map(ObjectGroup::phrase).collect();
        let verb = if self.groups[0].count > 1 { "are" } else { "is" };
        match phrases.as_slice() {
            [one] => vec![
                one.clone(),
                format!("there {verb} {one}"),
                format!("an image of {one}"),
                format!("a picture with {one}"),
                format!("{one} on a gray background"),
            ],
            [a, b] => vec![
                format!("{a} and {b}"),
                format!("there {verb} {a} and {b}"),
                format!("an image of {a} and {b}"),
                format!("{b} and {a}"),
                format!("a picture with {a} and {b}"),
            ],
            _ => phrases.join(" and ").lines().map(String::from).collect(),
        }
    }
}

/// Inventory and layout for the synthetic generator.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct SyntheticSpec {
    pub grid_size: usize,
    pub shapes: Vec<Shape>,
    pub colors: Vec<Color>,
    pub max_count: u8,
    /// At most this many object groups per image (1 or 2).
    pub max_groups: usize,
    pub captions_per_image: usize,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            grid_size: 32,
            shapes: Shape::ALL.to_vec(),
            colors: Color::ALL.to_vec(),
            max_count: 3,
            max_groups: 2,
            captions_per_image: 5,
        }
    }
}

impl SyntheticSpec {
    fn kinds(&self) -> Vec<(Shape, Color)> {
        self.shapes
            .iter()
            .flat_map(|&s| self.colors.iter().map(move |&c| (s, c)))
            .collect()
    }

    /// Number of distinct scenes (hence distinct caption sets) available.
    pub fn scene_capacity(&self) -> usize {
        let k = self.kinds().len();
        let c = self.max_count as usize;
        let single = k * c;
        let pairs = if self.max_groups >= 2 { k * k.saturating_sub(1) / 2 * c * c } else { 0 };
        single + pairs
    }

    fn validate(&self) -> Result<()> {
        if self.shapes.is_empty() || self.colors.is_empty() {
            return Err(Error::Data("empty shape or color inventory".into()));
        }
        if !(1..=3).contains(&self.max_count) || !(1..=2).contains(&self.max_groups) {
            return Err(Error::Data("max_count must be 1..3 and max_groups 1..2".into()));
        }
        if !(1..=5).contains(&self.captions_per_image) {
            return Err(Error::Data("captions_per_image must be 1..5".into()));
        }
        if self.grid_size < GRID * 4 {
            return Err(Error::Data(format!("grid_size must be at least {}", GRID * 4)));
        }
        Ok(())
    }

    fn sample_scene(&self, rng: &mut ChaCha8Rng) -> Scene {
        let kinds = self.kinds();
        let n_groups = if self.max_groups >= 2 && kinds.len() >= 2 && rng.gen_bool(0.75) { 2 } else { 1 };
        let mut picked: Vec<(Shape, Color)> = kinds.choose_multiple(rng, n_groups).copied().collect();
        picked.sort();
        let mut groups: Vec<ObjectGroup> = picked
            .into_iter()
            .map(|(shape, color)| ObjectGroup {
                shape,
                color,
                count: rng.gen_range(1..=self.max_count),
            })
            .collect();
        groups.sort();
        let total: usize = groups.iter().map(|g| g.count as usize).sum();
        let mut cells: Vec<u8> = (0..(GRID * GRID) as u8).collect();
        cells.shuffle(rng);
        cells.truncate(total);
        Scene {
            size: self.grid_size,
            groups,
            cells,
        }
    }
}

/// One image with its reference captions.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTextPair {
    pub id: String,
    pub image: Image,
    pub captions: Vec<String>,
    /// Generator ground truth, present for synthetic pairs.
    pub scene: Option<Scene>,
}

impl ImageTextPair {
    pub fn new(id: String, image: Image, captions: Vec<String>, scene: Option<Scene>) -> Result<Self> {
        if captions.is_empty() {
            return Err(Error::Data(format!("pair {id} has no captions")));
        }
        Ok(Self {
            id,
            image,
            captions,
            scene,
        })
    }
}

/// Deterministic synthetic dataset. Every scene is distinct, so every
/// caption is unique within the dataset.
pub fn generate_synthetic_dataset(spec: &SyntheticSpec, n_pairs: usize, seed: u64) -> Result<Vec<ImageTextPair>> {
    spec.validate()?;
    if n_pairs == 0 {
        return Err(Error::Data("n_pairs must be at least 1".into()));
    }
    let capacity = spec.scene_capacity();
    if n_pairs > capacity {
        return Err(Error::Data(format!(
            "inventory supports {capacity} unique scenes, {n_pairs} requested"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seen = BTreeSet::new();
    let mut out = Vec::with_capacity(n_pairs);
    while out.len() < n_pairs {
        let scene = spec.sample_scene(&mut rng);
        if !seen.insert(scene.groups.clone()) {
            continue;
        }
        let mut captions = scene.captions();
        captions.truncate(spec.captions_per_image);
        let image = scene.render()?;
        let id = format!("syn-{seed}-{:05}", out.len());
        out.push(ImageTextPair::new(id, image, captions, Some(scene))?);
    }
    Ok(out)
}

/// Random resized crop (area fraction uniform in `[0.6, 1.0]`, square
/// window) resampled bilinearly to `size × size`, then a horizontal flip
/// with probability 0.5.
pub fn augment(image: &Image, seed: u64, size: usize) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let area: f64 = rng.gen_range(0.6..=1.0);
    let side = area.sqrt();
    let (h, w) = (image.height() as f64 * side, image.width() as f64 * side);
    let top = rng.gen_range(0.0..=(image.height() as f64 - h));
    let left = rng.gen_range(0.0..=(image.width() as f64 - w));
    let out = image.crop_resize(top, left, h, w, size);
    if rng.gen_bool(0.5) {
        out.flip_horizontal()
    } else {
        out
    }
}

/// One training batch; images are referenced by dataset index.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub indices: Vec<usize>,
    pub captions: Vec<String>,
    /// `[CLS] w1 .. wn <pad>..`, `batch × max_text_len` ids.
    pub text_ids: Vec<usize>,
    /// `true` where `text_ids` is padding.
    pub text_pad: Vec<bool>,
    /// Per-batch padded length of the LM sequences.
    pub lm_len: usize,
    /// `<bos> w1 .. wn <pad>..`, `batch × lm_len`.
    pub lm_inputs: Vec<usize>,
    /// `w1 .. wn <eos> <pad>..`, `batch × lm_len`.
    pub lm_targets: Vec<usize>,
    pub lm_pad: Vec<bool>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Tokenizes one caption per image into a batch. Captions longer than the
/// text branch allows are truncated.
pub fn collate(
    indices: &[usize],
    captions: &[String],
    vocab: &Vocabulary,
    max_text_len: usize,
) -> Result<Batch> {
    let words: Vec<Vec<usize>> = captions
        .iter()
        .map(|c| {
            let mut ids = vocab.encode(c);
            ids.truncate(max_text_len - 1);
            ids
        })
        .collect();
    let lm_len = words.iter().map(|w| w.len() + 1).max().unwrap_or(1);
    let mut batch = Batch {
        indices: indices.to_vec(),
        captions: captions.to_vec(),
        text_ids: Vec::new(),
        text_pad: Vec::new(),
        lm_len,
        lm_inputs: Vec::new(),
        lm_targets: Vec::new(),
        lm_pad: Vec::new(),
    };
    for w in &words {
        batch.text_ids.push(Vocabulary::CLS);
        batch.text_ids.extend_from_slice(w);
        batch.text_pad.extend(core::iter::repeat(false).take(w.len() + 1));
        for _ in w.len() + 1..max_text_len {
            batch.text_ids.push(Vocabulary::PAD);
            batch.text_pad.push(true);
        }
        batch.lm_inputs.push(Vocabulary::BOS);
        batch.lm_inputs.extend_from_slice(w);
        batch.lm_targets.extend_from_slice(w);
        batch.lm_targets.push(Vocabulary::EOS);
        batch.lm_pad.extend(core::iter::repeat(false).take(w.len() + 1));
        for _ in w.len() + 1..lm_len {
            batch.lm_inputs.push(Vocabulary::PAD);
            batch.lm_targets.push(Vocabulary::PAD);
            batch.lm_pad.push(true);
        }
    }
    Ok(batch)
}

/// Epoch-seeded shuffled batches with one caption sampled per image. The
/// final short batch is dropped.
pub fn make_batches(
    dataset: &[ImageTextPair],
    batch_size: usize,
    epoch_seed: u64,
    vocab: &Vocabulary,
    max_text_len: usize,
) -> Result<Vec<Batch>> {
    if batch_size < 2 {
        return Err(Error::Data("batch_size must be at least 2 for contrastive training".into()));
    }
    if dataset.len() < batch_size {
        return Err(Error::Data(format!(
            "dataset of {} pairs is smaller than batch_size {batch_size}",
            dataset.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(epoch_seed);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    order.shuffle(&mut rng);
    let picks: Vec<usize> = order
        .iter()
        .map(|&i| rng.gen_range(0..dataset[i].captions.len()))
        .collect();
    order
        .chunks_exact(batch_size)
        .zip(picks.chunks_exact(batch_size))
        .map(|(idx, pick)| {
            let caps: Vec<String> = idx
                .iter()
                .zip(pick)
                .map(|(&i, &p)| dataset[i].captions[p].clone())
                .collect();
            collate(idx, &caps, vocab, max_text_len)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_dataset() {
        let spec = SyntheticSpec::default();
        let a = generate_synthetic_dataset(&spec, 16, 7).unwrap();
        let b = generate_synthetic_dataset(&spec, 16, 7).unwrap();
        assert_eq!(a, b);
        let c = generate_synthetic_dataset(&spec, 16, 8).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn one_red_square_caption() {
        let scene = Scene {
            size: 32,
            groups: vec![ObjectGroup {
                shape: Shape::Square,
                color: Color::Red,
                count: 1,
            }],
            cells: vec![4],
        };
        for cap in scene.captions() {
            let words: Vec<&str> = cap.split(' ').collect();
            assert!(words.contains(&"red") && words.contains(&"square"), "{cap}");
        }
        let img = scene.render().unwrap();
        assert_eq!(img.pixel(16, 16), &Color::Red.rgb());
        assert_eq!(img.pixel(0, 0), &BACKGROUND);
    }

    #[test]
    fn captions_unique_across_64_pairs() {
        let data = generate_synthetic_dataset(&SyntheticSpec::default(), 64, 1).unwrap();
        let mut all = BTreeSet::new();
        for pair in &data {
            let mut own = BTreeSet::new();
            for c in &pair.captions {
                assert!(own.insert(c.clone()), "duplicate within {}", pair.id);
                assert!(all.insert(c.clone()), "duplicate across dataset: {c}");
            }
        }
        let scenes: BTreeSet<_> = data.iter().map(|p| p.scene.clone().unwrap().groups).collect();
        assert_eq!(scenes.len(), 64);
    }

    #[test]
    fn captions_mention_every_object_word() {
        for pair in generate_synthetic_dataset(&SyntheticSpec::default(), 64, 3).unwrap() {
            let scene = pair.scene.unwrap();
            for cap in &pair.captions {
                let words: Vec<&str> = cap.split(' ').collect();
                for w in scene.object_words().into_iter().chain(scene.color_words()) {
                    assert!(words.contains(&w.as_str()), "{cap} lacks {w}");
                }
            }
        }
    }

    #[test]
    fn inventory_too_small() {
        let spec = SyntheticSpec {
            shapes: vec![Shape::Circle],
            colors: vec![Color::Blue],
            ..SyntheticSpec::default()
        };
        assert_eq!(spec.scene_capacity(), 3);
        assert!(generate_synthetic_dataset(&spec, 4, 0).is_err());
        assert_eq!(generate_synthetic_dataset(&spec, 3, 0).unwrap().len(), 3);
    }

    #[test]
    fn augmentation_is_seeded_and_sized() {
        let img = generate_synthetic_dataset(&SyntheticSpec::default(), 1, 0).unwrap()[0].image.clone();
        let a = augment(&img, 42, 32);
        assert_eq!(a, augment(&img, 42, 32));
        assert_eq!((a.height(), a.width()), (32, 32));
        let small = augment(&img, 42, 16);
        assert_eq!((small.height(), small.width()), (16, 16));
        assert!(a.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn flip_is_an_involution() {
        let img = generate_synthetic_dataset(&SyntheticSpec::default(), 1, 5).unwrap()[0].image.clone();
        assert_eq!(img.flip_horizontal().flip_horizontal(), img);
        assert_ne!(img.flip_horizontal(), img);
    }

    #[test]
    fn full_window_crop_is_identity() {
        let img = generate_synthetic_dataset(&SyntheticSpec::default(), 1, 9).unwrap()[0].image.clone();
        let same = img.crop_resize(0.0, 0.0, 32.0, 32.0, 32);
        assert!(same.data().iter().zip(img.data()).all(|(a, b)| (a - b).abs() < 1e-12));
    }
}
