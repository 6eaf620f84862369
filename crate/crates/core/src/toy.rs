//! Synthetic two-domain corpus: a textured ground in the lower half and a
//! flat "sky" in the upper half, blue for sunny images and gray for cloudy
//! ones. Every image carries one sky cue box over its upper half.

use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dataset::{render_manifest, CueBox, CueVocabulary, ManifestEntry, WeatherClass};
use crate::error::{Error, Result};

pub const SUNNY_SKY: [u8; 3] = [70, 130, 220];
pub const CLOUDY_SKY: [u8; 3] = [150, 150, 150];

/// Renders one image of `class` (sunny or cloudy) at `size`×`size`.
pub fn render(class: WeatherClass, size: u32, rng: &mut impl Rng) -> RgbImage {
    let sky = match class {
        WeatherClass::Sunny => SUNNY_SKY,
        _ => CLOUDY_SKY,
    };
    let shift: [i32; 3] = std::array::from_fn(|_| rng.random_range(-12..=12));
    let ground: [i32; 3] = [
        rng.random_range(60..120),
        rng.random_range(80..140),
        rng.random_range(30..70),
    ];
    let half = size / 2;
    RgbImage::from_fn(size, size, |_, y| {
        let px: [u8; 3] = if y < half {
            std::array::from_fn(|c| (sky[c] as i32 + shift[c] + rng.random_range(-4..=4)).clamp(0, 255) as u8)
        } else {
            let n = rng.random_range(-25..=25);
            std::array::from_fn(|c| (ground[c] + n).clamp(0, 255) as u8)
        };
        Rgb(px)
    })
}

/// Writes `per_domain` sunny and cloudy images under `root/<class>/` plus a
/// manifest at `root/manifest.tsv`, returning the manifest path.
pub fn write_corpus(root: &Path, per_domain: usize, size: u32, seed: u64) -> Result<PathBuf> {
    let vocab = CueVocabulary::default();
    let sky = vocab.index_of("sky").expect("default vocabulary has sky");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut entries = Vec::with_capacity(2 * per_domain);
    for class in [WeatherClass::Sunny, WeatherClass::Cloudy] {
        std::fs::create_dir_all(root.join(class.name()))?;
        for i in 0..per_domain {
            let rel = format!("{}/{i:04}.png", class.name());
            let path = root.join(&rel);
            render(class, size, &mut rng)
                .save(&path)
                .map_err(|source| Error::Image { path, source })?;
            entries.push(ManifestEntry {
                relative_path: rel,
                class,
                boxes: vec![CueBox {
                    cue_class: sky,
                    x0: 0,
                    y0: 0,
                    x1: size,
                    y1: size / 2,
                }],
            });
        }
    }
    let manifest = root.join("manifest.tsv");
    std::fs::write(&manifest, render_manifest(&vocab, &entries))?;
    Ok(manifest)
}
