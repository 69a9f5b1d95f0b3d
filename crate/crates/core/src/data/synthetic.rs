//! Desk-scale stand-in for a captioning corpus: 1–3 coloured shapes on a
//! grid, captioned from fixed templates.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::karpathy::ANNOTATIONS_FILE;
use super::ppm::{write_ppm, RgbImage};
use super::Split;
use crate::config::{config_hash, FORMAT_VERSION};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Color {
    Red,
    Green,
    Blue,
    Yellow,
}

impl Color {
    pub const ALL: [Color; 4] = [Color::Red, Color::Green, Color::Blue, Color::Yellow];

    pub fn name(self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Green => "green",
            Color::Blue => "blue",
            Color::Yellow => "yellow",
        }
    }

    pub fn rgb(self) -> [u8; 3] {
        match self {
            Color::Red => [230, 40, 40],
            Color::Green => [40, 200, 60],
            Color::Blue => [50, 80, 235],
            Color::Yellow => [235, 215, 40],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Circle,
    Square,
    Triangle,
}

impl Shape {
    pub const ALL: [Shape; 3] = [Shape::Circle, Shape::Square, Shape::Triangle];

    pub fn name(self) -> &'static str {
        match self {
            Shape::Circle => "circle",
            Shape::Square => "square",
            Shape::Triangle => "triangle",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlacedShape {
    pub color: Color,
    pub shape: Shape,
    /// Grid cell in raster order.
    pub cell: usize,
    /// Centre offset from the cell centre, in pixels.
    pub jitter: (i32, i32),
}

/// Shapes sorted by cell; captions list them in this order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyntheticScene {
    pub shapes: Vec<PlacedShape>,
}

impl SyntheticScene {
    pub fn sample<R: Rng + ?Sized>(cfg: &SyntheticConfig, rng: &mut R) -> Self {
        let n_cells = cfg.grid * cfg.grid;
        let count = rng.gen_range(1..=cfg.max_shapes.min(n_cells));
        let mut cells: Vec<usize> = (0..n_cells).collect();
        cells.shuffle(rng);
        let mut cells = cells[..count].to_vec();
        cells.sort_unstable();
        let shapes = cells
            .into_iter()
            .map(|cell| PlacedShape {
                color: *Color::ALL.choose(rng).expect("nonempty"),
                shape: *Shape::ALL.choose(rng).expect("nonempty"),
                cell,
                jitter: (rng.gen_range(-1..=1), rng.gen_range(-1..=1)),
            })
            .collect();
        Self { shapes }
    }

    /// `["red circle", "blue square"]`
    pub fn entities(&self) -> Vec<String> {
        self.shapes
            .iter()
            .map(|s| format!("{} {}", s.color.name(), s.shape.name()))
            .collect()
    }
}

/// `"a red circle and a blue square"`
pub fn caption_for(scene: &SyntheticScene) -> String {
    scene
        .entities()
        .iter()
        .map(|e| format!("a {e}"))
        .collect::<Vec<_>>()
        .join(" and ")
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticConfig {
    pub image_size: usize,
    pub grid: usize,
    pub max_shapes: usize,
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            grid: 2,
            max_shapes: 3,
            train: 2000,
            val: 100,
            test: 200,
        }
    }
}

impl SyntheticConfig {
    fn validate(&self) -> Result<()> {
        if self.train == 0 || self.val == 0 || self.test == 0 {
            return Err(Error::Config("every split needs at least one image".into()));
        }
        if self.grid == 0 || self.image_size / self.grid < 12 {
            return Err(Error::Config("grid cells must be at least 12 pixels wide".into()));
        }
        if self.max_shapes == 0 {
            return Err(Error::Config("max_shapes must be positive".into()));
        }
        Ok(())
    }

    fn splits(&self) -> impl Iterator<Item = Split> {
        std::iter::repeat(Split::Train)
            .take(self.train)
            .chain(std::iter::repeat(Split::Val).take(self.val))
            .chain(std::iter::repeat(Split::Test).take(self.test))
    }
}

pub fn render_scene(cfg: &SyntheticConfig, scene: &SyntheticScene) -> RgbImage {
    let size = cfg.image_size;
    let cell = size / cfg.grid;
    let mut img = RgbImage::new(size, size);
    for s in &scene.shapes {
        let (gx, gy) = (s.cell % cfg.grid, s.cell / cfg.grid);
        let cx = (gx * cell) as f64 + cell as f64 / 2.0 - 0.5 + f64::from(s.jitter.0);
        let cy = (gy * cell) as f64 + cell as f64 / 2.0 - 0.5 + f64::from(s.jitter.1);
        let r = cell as f64 * 0.36;
        let rgb = s.color.rgb();
        for y in gy * cell..(gy + 1) * cell {
            for x in gx * cell..(gx + 1) * cell {
                let (dx, dy) = (x as f64 - cx, y as f64 - cy);
                let inside = match s.shape {
                    Shape::Circle => dx * dx + dy * dy <= r * r,
                    Shape::Square => dx.abs() <= r && dy.abs() <= r,
                    // apex up; half-width grows linearly from the apex to the base
                    Shape::Triangle => {
                        let t = (dy + r) / (2.0 * r);
                        (0.0..=1.0).contains(&t) && dx.abs() <= t * r
                    }
                };
                if inside {
                    img.put(x, y, rgb);
                }
            }
        }
    }
    img
}

/// Writes `images/*.ppm` and an annotation file under `out`; a pure function of `(cfg, seed)`.
pub fn generate_synthetic_dataset(cfg: &SyntheticConfig, seed: u64, out: &Path) -> Result<PathBuf> {
    cfg.validate()?;
    let image_dir = out.join("images");
    std::fs::create_dir_all(&image_dir).map_err(|e| Error::io(&image_dir, e))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut images = Vec::new();
    for (index, split) in cfg.splits().enumerate() {
        let scene = SyntheticScene::sample(cfg, &mut rng);
        let filename = format!("{index:05}.ppm");
        write_ppm(&image_dir.join(&filename), &render_scene(cfg, &scene))?;
        let caption = caption_for(&scene);
        let alt = format!("there is {caption}");
        let sentences: Vec<_> = [caption, alt]
            .into_iter()
            .map(|raw| json!({"tokens": crate::tokenizer::normalize(&raw), "raw": raw}))
            .collect();
        images.push(json!({
            "filepath": "images",
            "filename": filename,
            "split": split.as_str(),
            "cocoid": index,
            "sentences": sentences,
            "entities": scene.entities(),
        }));
    }
    let doc = json!({
        "dataset": "synthetic-shapes",
        "format_version": FORMAT_VERSION,
        "seed": seed,
        "config": cfg,
        "config_hash": config_hash(&(cfg, seed)),
        "images": images,
    });
    let path = out.join(ANNOTATIONS_FILE);
    let text = serde_json::to_string_pretty(&doc)?;
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_shape_caption_template() {
        let scene = SyntheticScene {
            shapes: vec![PlacedShape {
                color: Color::Blue,
                shape: Shape::Square,
                cell: 2,
                jitter: (0, 0),
            }],
        };
        assert_eq!(caption_for(&scene), "a blue square");
        assert_eq!(scene.entities(), ["blue square"]);
    }

    #[test]
    fn two_shape_caption_lists_cells_in_order() {
        let cfg = SyntheticConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let scene = SyntheticScene::sample(&cfg, &mut rng);
            assert!((1..=3).contains(&scene.shapes.len()));
            assert!(scene.shapes.windows(2).all(|w| w[0].cell < w[1].cell));
            let cap = caption_for(&scene);
            assert_eq!(cap.matches(" and ").count(), scene.shapes.len() - 1);
        }
    }

    #[test]
    fn rendered_shapes_stay_inside_their_cell() {
        let cfg = SyntheticConfig::default();
        for shape in Shape::ALL {
            let scene = SyntheticScene {
                shapes: vec![PlacedShape {
                    color: Color::Red,
                    shape,
                    cell: 3,
                    jitter: (1, 1),
                }],
            };
            let img = render_scene(&cfg, &scene);
            let lit: Vec<(usize, usize)> = (0..32)
                .flat_map(|y| (0..32).map(move |x| (x, y)))
                .filter(|&(x, y)| img.get(x, y) != [0, 0, 0])
                .collect();
            assert!(lit.len() > 40, "{shape:?} too small: {}", lit.len());
            assert!(lit.iter().all(|&(x, y)| x >= 16 && y >= 16));
        }
    }

    #[test]
    fn empty_split_is_rejected() {
        let cfg = SyntheticConfig {
            val: 0,
            ..SyntheticConfig::default()
        };
        let dir = tempfile::tempdir().unwrap();
        assert!(generate_synthetic_dataset(&cfg, 1, dir.path()).is_err());
    }
}
