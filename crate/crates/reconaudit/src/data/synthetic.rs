//! Deterministic four-class toy dataset: bars, squares, circles, crosses.
//!
//! Every sample is generated from a seed derived from (dataset seed, split,
//! class, index), so the collection is index-stable without any stored
//! state and tests never touch the network.

use super::{DatasetSpec, Split};
use crate::util::splitmix64;

pub const SYNTHETIC_CLASS_NAMES: [&str; 4] = ["bar", "square", "circle", "cross"];

const TRAIN_PER_CLASS: usize = 100;
const TEST_PER_CLASS: usize = 50;

pub(super) fn generate(spec: &DatasetSpec) -> (Vec<u8>, Vec<u8>) {
    let (c, h, w) = spec.image_shape;
    debug_assert_eq!(c, 1);
    let per_class = match spec.split {
        Split::Train => TRAIN_PER_CLASS,
        Split::Test => TEST_PER_CLASS,
    };
    let split_tag = match spec.split {
        Split::Train => 0u64,
        Split::Test => 1u64,
    };
    let n = per_class * spec.num_classes;
    let mut pixels = vec![0u8; n * h * w];
    let mut labels = vec![0u8; n];
    for class in 0..spec.num_classes {
        for k in 0..per_class {
            let index = class * per_class + k;
            let seed = splitmix64(
                spec.synthetic_seed ^ (split_tag << 56) ^ ((class as u64) << 32) ^ k as u64,
            );
            let img = &mut pixels[index * h * w..(index + 1) * h * w];
            draw(class, seed, h, w, img);
            labels[index] = class as u8;
        }
    }
    (pixels, labels)
}

/// Tiny deterministic RNG over splitmix64; enough for placement jitter.
struct Jitter(u64);

impl Jitter {
    fn next_in(&mut self, lo: usize, hi: usize) -> usize {
        self.0 = splitmix64(self.0);
        lo + (self.0 % (hi - lo) as u64) as usize
    }

    fn intensity(&mut self) -> u8 {
        self.0 = splitmix64(self.0);
        // foreground brightness in [153, 255] ~ [0.6, 1.0]
        153 + (self.0 % 103) as u8
    }
}

fn draw(class: usize, seed: u64, h: usize, w: usize, img: &mut [u8]) {
    let mut j = Jitter(seed);
    let fg = j.intensity();
    let mut put = |y: usize, x: usize| {
        if y < h && x < w {
            img[y * w + x] = fg;
        }
    };
    match class {
        // horizontal bar spanning most of the width
        0 => {
            let thickness = j.next_in(3, 7);
            let y0 = j.next_in(2, h - thickness - 2);
            let x0 = j.next_in(1, 4);
            let x1 = w - 1 - j.next_in(1, 4);
            for y in y0..y0 + thickness {
                for x in x0..=x1 {
                    put(y, x);
                }
            }
        }
        // filled square
        1 => {
            let side = j.next_in(8, 15);
            let y0 = j.next_in(2, h - side - 2);
            let x0 = j.next_in(2, w - side - 2);
            for y in y0..y0 + side {
                for x in x0..x0 + side {
                    put(y, x);
                }
            }
        }
        // filled disk
        2 => {
            let r = j.next_in(5, 9) as isize;
            let cy = j.next_in(r as usize + 2, h - r as usize - 2) as isize;
            let cx = j.next_in(r as usize + 2, w - r as usize - 2) as isize;
            for y in (cy - r)..=(cy + r) {
                for x in (cx - r)..=(cx + r) {
                    if (y - cy) * (y - cy) + (x - cx) * (x - cx) <= r * r {
                        put(y as usize, x as usize);
                    }
                }
            }
        }
        // plus sign: one vertical and one horizontal arm
        3 => {
            let arm = j.next_in(7, 11);
            let thickness = j.next_in(3, 5);
            let cy = j.next_in(arm + 2, h - arm - 2);
            let cx = j.next_in(arm + 2, w - arm - 2);
            for y in (cy - arm)..=(cy + arm) {
                for x in (cx - thickness / 2)..=(cx + thickness / 2) {
                    put(y, x);
                }
            }
            for y in (cy - thickness / 2)..=(cy + thickness / 2) {
                for x in (cx - arm)..=(cx + arm) {
                    put(y, x);
                }
            }
        }
        _ => unreachable!("synthetic dataset has 4 classes"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::DatasetName;

    #[test]
    fn classes_are_visually_distinct() {
        let spec = DatasetSpec::new(DatasetName::SyntheticShapes, Split::Train);
        let (pixels, labels) = generate(&spec);
        assert_eq!(labels.len(), 400);
        // every image has some foreground, none is full
        for i in 0..labels.len() {
            let img = &pixels[i * 784..(i + 1) * 784];
            let lit = img.iter().filter(|&&p| p > 0).count();
            assert!(lit > 20, "image {i} nearly empty");
            assert!(lit < 700, "image {i} nearly full");
        }
    }

    #[test]
    fn same_index_same_image() {
        let spec = DatasetSpec::new(DatasetName::SyntheticShapes, Split::Train);
        let (a, _) = generate(&spec);
        let (b, _) = generate(&spec);
        assert_eq!(a, b);
    }

    #[test]
    fn splits_differ() {
        let train = DatasetSpec::new(DatasetName::SyntheticShapes, Split::Train);
        let test = DatasetSpec::new(DatasetName::SyntheticShapes, Split::Test);
        let (a, _) = generate(&train);
        let (b, _) = generate(&test);
        assert_ne!(a[..784], b[..784]);
    }
}
