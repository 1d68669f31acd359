use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ShapeClass {
    Circle,
    Square,
    Triangle,
    Cross,
}

impl ShapeClass {
    pub const ALL: [ShapeClass; 4] = [Self::Circle, Self::Square, Self::Triangle, Self::Cross];

    pub fn word(self) -> &'static str {
        match self {
            Self::Circle => "circle",
            Self::Square => "square",
            Self::Triangle => "triangle",
            Self::Cross => "cross",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Color {
    Red,
    Green,
    Blue,
    Yellow,
    White,
}

impl Color {
    pub const ALL: [Color; 5] = [Self::Red, Self::Green, Self::Blue, Self::Yellow, Self::White];

    pub fn word(self) -> &'static str {
        match self {
            Self::Red => "red",
            Self::Green => "green",
            Self::Blue => "blue",
            Self::Yellow => "yellow",
            Self::White => "white",
        }
    }

    pub fn rgb(self) -> [f32; 3] {
        match self {
            Self::Red => [1.0, 0.0, 0.0],
            Self::Green => [0.0, 1.0, 0.0],
            Self::Blue => [0.0, 0.0, 1.0],
            Self::Yellow => [1.0, 1.0, 0.0],
            Self::White => [1.0, 1.0, 1.0],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Motion {
    Static,
    Horizontal,
    Vertical,
    Diagonal,
}

impl Motion {
    pub const ALL: [Motion; 4] = [Self::Static, Self::Horizontal, Self::Vertical, Self::Diagonal];

    /// Unit displacement per frame as (dx, dy); scaled by the object speed.
    pub fn direction(self) -> (i64, i64) {
        match self {
            Self::Static => (0, 0),
            Self::Horizontal => (1, 0),
            Self::Vertical => (0, 1),
            Self::Diagonal => (1, 1),
        }
    }

    pub fn phrase(self) -> &'static str {
        match self {
            Self::Static => "stays still",
            Self::Horizontal => "moves left to right",
            Self::Vertical => "moves top to bottom",
            Self::Diagonal => "moves diagonally",
        }
    }
}

/// Pixels moved per frame by every non-static object.
pub const SPEED: i64 = 2;
pub const MIN_SIZE: u32 = 8;
pub const MAX_SIZE: u32 = 12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectSpec {
    pub shape: ShapeClass,
    pub color: Color,
    pub motion: Motion,
    /// Top-left corner at frame 0, as fractions of (width, height).
    pub start: [f32; 2],
    /// Side of the bounding square in pixels.
    pub size: u32,
}

impl ObjectSpec {
    /// Integer top-left corner at frame 0.
    pub fn origin(&self, height: usize, width: usize) -> (i64, i64) {
        (
            (self.start[0] as f64 * width as f64).round() as i64,
            (self.start[1] as f64 * height as f64).round() as i64,
        )
    }

    /// Top-left corner at frame `t`.
    pub fn position(&self, t: usize, height: usize, width: usize) -> (i64, i64) {
        let (x0, y0) = self.origin(height, width);
        let (dx, dy) = self.motion.direction();
        (x0 + dx * SPEED * t as i64, y0 + dy * SPEED * t as i64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    objects: Vec<ObjectSpec>,
    background: [f32; 3],
    frames: usize,
    height: usize,
    width: usize,
    seed: u64,
}

impl SceneSpec {
    /// Validates the 1–3 object count and that every bounding box stays in
    /// frame for all `frames`.
    pub fn new(
        objects: Vec<ObjectSpec>,
        background: [f32; 3],
        frames: usize,
        height: usize,
        width: usize,
        seed: u64,
    ) -> Result<Self> {
        if objects.is_empty() || objects.len() > 3 {
            return Err(Error::arg(format!(
                "a scene needs 1 to 3 objects, got {}",
                objects.len()
            )));
        }
        if frames == 0 || height == 0 || width == 0 {
            return Err(Error::arg("scene dimensions must be positive"));
        }
        if background.iter().any(|c| !(0.0..=1.0).contains(c)) {
            return Err(Error::arg("background color outside [0,1]"));
        }
        for (i, o) in objects.iter().enumerate() {
            let s = o.size as i64;
            for t in [0, frames - 1] {
                let (x, y) = o.position(t, height, width);
                if x < 0 || y < 0 || x + s > width as i64 || y + s > height as i64 {
                    return Err(Error::arg(format!(
                        "object {i} leaves the {width}x{height} frame at t={t}"
                    )));
                }
            }
        }
        Ok(Self {
            objects,
            background,
            frames,
            height,
            width,
            seed,
        })
    }

    /// Draws a scene entirely from `seed`: `n_objects` objects with distinct
    /// (color, shape) pairs placed so their whole trajectory stays in frame.
    pub fn random(
        seed: u64,
        n_objects: usize,
        frames: usize,
        height: usize,
        width: usize,
    ) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let grey = rng.gen_range(0.05f32..0.3);
        let mut objects: Vec<ObjectSpec> = Vec::with_capacity(n_objects);
        while objects.len() < n_objects {
            let shape = ShapeClass::ALL[rng.gen_range(0..4)];
            let color = Color::ALL[rng.gen_range(0..5)];
            let motion = Motion::ALL[rng.gen_range(0..4)];
            let size = rng.gen_range(MIN_SIZE..=MAX_SIZE);
            if objects.iter().any(|o| o.shape == shape && o.color == color) {
                continue;
            }
            let (dx, dy) = motion.direction();
            let travel = SPEED * (frames as i64 - 1);
            let max_x = width as i64 - size as i64 - dx * travel;
            let max_y = height as i64 - size as i64 - dy * travel;
            if max_x < 0 || max_y < 0 {
                return Err(Error::config(format!(
                    "a {size}px object moving {motion:?} for {frames} frames does not fit in {width}x{height}"
                )));
            }
            let x = rng.gen_range(0..=max_x);
            let y = rng.gen_range(0..=max_y);
            objects.push(ObjectSpec {
                shape,
                color,
                motion,
                start: [x as f32 / width as f32, y as f32 / height as f32],
                size,
            });
        }
        Self::new(objects, [grey; 3], frames, height, width, seed)
    }

    pub fn objects(&self) -> &[ObjectSpec] {
        &self.objects
    }

    pub fn background(&self) -> [f32; 3] {
        self.background
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn obj(motion: Motion, start: [f32; 2]) -> ObjectSpec {
        ObjectSpec {
            shape: ShapeClass::Circle,
            color: Color::Red,
            motion,
            start,
            size: 8,
        }
    }

    #[test]
    fn empty_scene_is_rejected() {
        assert!(SceneSpec::new(vec![], [0.1; 3], 8, 32, 32, 0).is_err());
    }

    #[test]
    fn four_objects_are_rejected() {
        let o = obj(Motion::Static, [0.0, 0.0]);
        assert!(SceneSpec::new(vec![o.clone(), o.clone(), o.clone(), o], [0.1; 3], 8, 32, 32, 0)
            .is_err());
    }

    #[test]
    fn trajectory_must_stay_in_frame() {
        // 24 + 8 + 14 > 32
        let o = obj(Motion::Horizontal, [0.75, 0.0]);
        assert!(SceneSpec::new(vec![o], [0.1; 3], 8, 32, 32, 0).is_err());
        let o = obj(Motion::Horizontal, [0.25, 0.0]);
        assert!(SceneSpec::new(vec![o], [0.1; 3], 8, 32, 32, 0).is_ok());
    }

    #[test]
    fn random_scenes_are_seeded_and_distinct_nouns() {
        for seed in 0..200 {
            let a = SceneSpec::random(seed, 3, 8, 32, 32).unwrap();
            assert_eq!(a, SceneSpec::random(seed, 3, 8, 32, 32).unwrap());
            let o = a.objects();
            for i in 0..o.len() {
                for j in i + 1..o.len() {
                    assert!(o[i].shape != o[j].shape || o[i].color != o[j].color);
                }
            }
        }
    }
}
