//! Procedural 64×64 road scenes with programmatic edits and exact masks.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use drivedit_core::backends::named_rgb;
use drivedit_core::banks::{edit_sentence, global_sentence};
use drivedit_core::types::GlobalCategory;
use drivedit_core::{
    build_langmask, BBox, ClassLabel, EditAction, EditSpec, EditType, EmbeddingProvider, Image, LangMask, Result,
    TrainingSample,
};

pub const SIZE: usize = 64;
const HORIZON: usize = 22;
const ROAD: [f64; 3] = [0.36, 0.36, 0.38];
const PALETTE: &[&str] = &["red", "blue", "green", "yellow", "black", "white"];
const WEATHERS: &[&str] = &["Cloudy", "Foggy", "Rainy", "Snowy"];

#[derive(Clone, Debug)]
struct Vehicle {
    bbox: BBox,
    color: &'static str,
}

impl Vehicle {
    /// Nearer vehicles sit lower in the frame.
    fn distance(&self) -> f64 {
        (80.0 - self.bbox.y1 as f64).max(1.0)
    }
}

fn background() -> Image {
    Image::from_fn(SIZE, SIZE, |x, y| {
        if y < HORIZON {
            let t = y as f64 / HORIZON as f64;
            [0.55 + 0.2 * t, 0.7 + 0.15 * t, 0.9]
        } else if (x / 6) % 2 == 0 && (31..33).contains(&x) {
            [0.9, 0.9, 0.85]
        } else {
            ROAD
        }
    })
}

fn render(vehicles: &[Vehicle]) -> Image {
    let mut img = background();
    let mut order: Vec<&Vehicle> = vehicles.iter().collect();
    order.sort_by(|a, b| b.distance().total_cmp(&a.distance()));
    for v in order {
        let c = named_rgb(v.color);
        for (x, y) in v.bbox.pixels() {
            img.put_pixel(x, y, c);
        }
    }
    img
}

fn random_vehicle<R: Rng>(rng: &mut R, taken: &[Vehicle]) -> Option<Vehicle> {
    for _ in 0..20 {
        let w = rng.gen_range(10..18u32);
        let h = rng.gen_range(7..12u32);
        let x0 = rng.gen_range(2..(SIZE as u32 - w - 2));
        let y0 = rng.gen_range(HORIZON as u32 + 2..(SIZE as u32 - h - 2));
        let bbox = BBox::new(x0, y0, x0 + w, y0 + h);
        if taken
            .iter()
            .all(|t| t.bbox.pad_clip(2, SIZE, SIZE).intersect(&bbox).is_none())
        {
            return Some(Vehicle {
                bbox,
                color: PALETTE.choose(rng).expect("palette"),
            });
        }
    }
    None
}

fn caption(n: usize) -> String {
    match n {
        0 => "an empty road under a clear sky".into(),
        1 => "a road with one car under a clear sky".into(),
        _ => format!("a road with {n} cars under a clear sky"),
    }
}

fn spec(action: EditAction, v: &Vehicle, subject: &str, target: Option<&str>) -> EditSpec {
    EditSpec {
        action,
        subject_class: ClassLabel::Car,
        bbox: v.bbox,
        target_description: target.map(str::to_string),
        distance_m: v.distance(),
        instruction_sentence: edit_sentence(action, ClassLabel::Car, subject, target),
    }
}

/// Per-channel affine look for each non-sunny weather.
pub fn weather_tint(img: &Image, weather: &str) -> Image {
    let (scale, offset) = match weather {
        "Cloudy" => ([0.8, 0.8, 0.82], [0.05, 0.05, 0.06]),
        "Foggy" => ([0.55, 0.55, 0.55], [0.35, 0.35, 0.36]),
        "Rainy" => ([0.65, 0.7, 0.75], [0.0, 0.02, 0.08]),
        _ => ([0.75, 0.78, 0.8], [0.22, 0.22, 0.22]),
    };
    let mut out = img.clone();
    for y in 0..img.height() {
        for x in 0..img.width() {
            let p = img.pixel(x, y);
            out.put_pixel(x, y, [0, 1, 2].map(|c| (p[c] * scale[c] + offset[c]).clamp(0.0, 1.0)));
        }
    }
    out
}

/// `n` samples cycling through recolor, erase, paste, weather tint and
/// identity, each drawn from a per-sample generator seeded by `(seed, i)`.
pub fn make_synthetic_dataset(n: usize, seed: u64, embedder: &dyn EmbeddingProvider) -> Result<Vec<TrainingSample>> {
    let dim = embedder.dim();
    let blank = || LangMask::blank(SIZE, SIZE, dim);
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ i as u64);
        let count = rng.gen_range(1..=3);
        let mut vehicles = Vec::new();
        for _ in 0..count {
            if let Some(v) = random_vehicle(&mut rng, &vehicles) {
                vehicles.push(v);
            }
        }
        let scene = render(&vehicles);
        let cap = caption(vehicles.len());
        let sample = match i % 5 {
            0 => {
                let k = rng.gen_range(0..vehicles.len());
                let old = vehicles[k].color;
                let new = *PALETTE
                    .iter()
                    .filter(|c| **c != old)
                    .collect::<Vec<_>>()
                    .choose(&mut rng)
                    .expect("palette");
                let mut edited = vehicles.clone();
                edited[k].color = new;
                let fwd = spec(EditAction::Modify, &vehicles[k], "car", Some(new));
                let bwd = spec(EditAction::Modify, &edited[k], "car", Some(old));
                local(scene, render(&edited), &cap, fwd, bwd, SIZE, embedder)?
            }
            1 => {
                let k = rng.gen_range(0..vehicles.len());
                let v = vehicles[k].clone();
                let mut rest = vehicles.clone();
                rest.remove(k);
                let appearance = format!("{} car", v.color);
                let fwd = spec(EditAction::Delete, &v, &appearance, None);
                let bwd = spec(EditAction::Insert, &v, "", Some(&appearance));
                local(scene, render(&rest), &cap, fwd, bwd, SIZE, embedder)?
            }
            2 => match random_vehicle(&mut rng, &vehicles) {
                Some(v) => {
                    let appearance = format!("{} car", v.color);
                    let mut more = vehicles.clone();
                    more.push(v.clone());
                    let fwd = spec(EditAction::Insert, &v, "", Some(&appearance));
                    let bwd = spec(EditAction::Delete, &v, &appearance, None);
                    local(scene, render(&more), &cap, fwd, bwd, SIZE, embedder)?
                }
                None => identity(scene, &cap, blank()),
            },
            3 => {
                let w = *WEATHERS.choose(&mut rng).expect("weathers");
                TrainingSample {
                    target_image: weather_tint(&scene, w),
                    source_image: scene,
                    forward_instruction: global_sentence(GlobalCategory::Weather, w),
                    backward_instruction: global_sentence(GlobalCategory::Weather, "Sunny"),
                    forward_mask: blank(),
                    backward_mask: blank(),
                    edit_type: EditType::Global,
                }
            }
            _ => identity(scene, &cap, blank()),
        };
        out.push(sample);
    }
    Ok(out)
}

fn identity(scene: Image, cap: &str, blank: LangMask) -> TrainingSample {
    TrainingSample {
        source_image: scene.clone(),
        target_image: scene,
        forward_instruction: cap.to_string(),
        backward_instruction: cap.to_string(),
        forward_mask: blank.clone(),
        backward_mask: blank,
        edit_type: EditType::Identity,
    }
}

fn local(
    source: Image,
    target: Image,
    cap: &str,
    fwd: EditSpec,
    bwd: EditSpec,
    size: usize,
    embedder: &dyn EmbeddingProvider,
) -> Result<TrainingSample> {
    Ok(TrainingSample {
        source_image: source,
        target_image: target,
        forward_instruction: cap.to_string(),
        backward_instruction: cap.to_string(),
        forward_mask: build_langmask(&[fwd], size, size, embedder)?,
        backward_mask: build_langmask(&[bwd], size, size, embedder)?,
        edit_type: EditType::Local,
    })
}
