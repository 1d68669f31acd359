use serde::{Deserialize, Serialize};

use super::scene::{SceneSpec, ShapeClass};
use crate::error::{Error, Result};

/// `frames × height × width × 3` array with values in [0, 1].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoTensor {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl VideoTensor {
    pub fn new(frames: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != frames * height * width * 3 {
            return Err(Error::arg(format!(
                "video buffer has {} values, expected {frames}x{height}x{width}x3",
                data.len()
            )));
        }
        Ok(Self {
            frames,
            height,
            width,
            data,
        })
    }

    pub fn zeros(frames: usize, height: usize, width: usize) -> Self {
        Self {
            frames,
            height,
            width,
            data: vec![0.0; frames * height * width * 3],
        }
    }

    pub fn frame_len(&self) -> usize {
        self.height * self.width * 3
    }

    pub fn frame(&self, t: usize) -> &[f32] {
        let n = self.frame_len();
        &self.data[t * n..(t + 1) * n]
    }

    pub fn frame_mut(&mut self, t: usize) -> &mut [f32] {
        let n = self.frame_len();
        &mut self.data[t * n..(t + 1) * n]
    }

    pub fn pixel(&self, t: usize, y: usize, x: usize) -> [f32; 3] {
        let i = ((t * self.height + y) * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn same_shape(&self, other: &VideoTensor) -> bool {
        (self.frames, self.height, self.width) == (other.frames, other.height, other.width)
    }
}

/// Per-frame boolean mask of one object, `frames × height × width`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionMask {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub bits: Vec<bool>,
}

impl RegionMask {
    pub fn empty(frames: usize, height: usize, width: usize) -> Self {
        Self {
            frames,
            height,
            width,
            bits: vec![false; frames * height * width],
        }
    }

    pub fn get(&self, t: usize, y: usize, x: usize) -> bool {
        self.bits[(t * self.height + y) * self.width + x]
    }

    pub fn frame(&self, t: usize) -> &[bool] {
        let n = self.height * self.width;
        &self.bits[t * n..(t + 1) * n]
    }

    pub fn count_in_frame(&self, t: usize) -> usize {
        self.frame(t).iter().filter(|&&b| b).count()
    }

    /// Mean (x, y) of the set pixels in frame `t`.
    pub fn centroid(&self, t: usize) -> Option<(f64, f64)> {
        let (mut sx, mut sy, mut n) = (0.0, 0.0, 0usize);
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(t, y, x) {
                    sx += x as f64;
                    sy += y as f64;
                    n += 1;
                }
            }
        }
        (n > 0).then(|| (sx / n as f64, sy / n as f64))
    }
}

/// Whether the pixel centre `(px, py)` is inside a shape whose bounding square
/// of side `size` starts at `(x0, y0)`.
fn covers(shape: ShapeClass, size: u32, x0: i64, y0: i64, px: i64, py: i64) -> bool {
    let s = size as f64;
    let u = (px - x0) as f64 + 0.5;
    let v = (py - y0) as f64 + 0.5;
    if u < 0.0 || v < 0.0 || u > s || v > s {
        return false;
    }
    let (u, v) = (u / s, v / s);
    match shape {
        ShapeClass::Square => true,
        ShapeClass::Circle => (u - 0.5).powi(2) + (v - 0.5).powi(2) <= 0.25,
        ShapeClass::Triangle => (u - 0.5).abs() <= v / 2.0,
        ShapeClass::Cross => (u - 0.5).abs() <= 1.0 / 6.0 || (v - 0.5).abs() <= 1.0 / 6.0,
    }
}

/// Rasterises the scene with hard edges. Objects are drawn in list order, so
/// a later object occludes earlier ones and owns the shared pixels.
pub fn render_video(scene: &SceneSpec) -> (VideoTensor, Vec<RegionMask>) {
    let (t_n, h, w) = (scene.frames(), scene.height(), scene.width());
    let bg = scene.background();
    let mut video = VideoTensor::zeros(t_n, h, w);
    for px in video.data.chunks_mut(3) {
        px.copy_from_slice(&bg);
    }
    let mut owner: Vec<Option<usize>> = vec![None; t_n * h * w];
    for (oi, obj) in scene.objects().iter().enumerate() {
        let rgb = obj.color.rgb();
        for t in 0..t_n {
            let (x0, y0) = obj.position(t, h, w);
            let s = obj.size as i64;
            for py in y0.max(0)..(y0 + s).min(h as i64) {
                for px in x0.max(0)..(x0 + s).min(w as i64) {
                    if covers(obj.shape, obj.size, x0, y0, px, py) {
                        let idx = (t * h + py as usize) * w + px as usize;
                        owner[idx] = Some(oi);
                        video.data[idx * 3..idx * 3 + 3].copy_from_slice(&rgb);
                    }
                }
            }
        }
    }
    let mut masks: Vec<RegionMask> = (0..scene.objects().len())
        .map(|_| RegionMask::empty(t_n, h, w))
        .collect();
    for (idx, o) in owner.iter().enumerate() {
        if let Some(oi) = o {
            masks[*oi].bits[idx] = true;
        }
    }
    (video, masks)
}

#[cfg(test)]
mod tests {
    use super::super::scene::{Color, Motion, ObjectSpec, SPEED};
    use super::*;

    fn scene(objs: Vec<ObjectSpec>) -> SceneSpec {
        SceneSpec::new(objs, [0.1; 3], 8, 32, 32, 0).unwrap()
    }

    fn obj(shape: ShapeClass, color: Color, motion: Motion, start: [f32; 2]) -> ObjectSpec {
        ObjectSpec {
            shape,
            color,
            motion,
            start,
            size: 10,
        }
    }

    #[test]
    fn static_circle_is_constant() {
        let s = scene(vec![obj(ShapeClass::Circle, Color::Red, Motion::Static, [0.25, 0.25])]);
        let (v, m) = render_video(&s);
        for t in 1..8 {
            assert_eq!(v.frame(t), v.frame(0));
            assert_eq!(m[0].frame(t), m[0].frame(0));
        }
        assert!(m[0].count_in_frame(0) > 0);
    }

    #[test]
    fn horizontal_centroid_advances_by_speed() {
        let s = scene(vec![obj(ShapeClass::Triangle, Color::Blue, Motion::Horizontal, [0.0, 0.5])]);
        let (_, m) = render_video(&s);
        for t in 1..8 {
            let (x1, y1) = m[0].centroid(t).unwrap();
            let (x0, y0) = m[0].centroid(t - 1).unwrap();
            assert!((x1 - x0 - SPEED as f64).abs() < 1e-12);
            assert!((y1 - y0).abs() < 1e-12);
        }
    }

    #[test]
    fn masks_mark_exactly_the_object_pixels() {
        let s = scene(vec![
            obj(ShapeClass::Square, Color::Green, Motion::Static, [0.25, 0.25]),
            obj(ShapeClass::Cross, Color::Yellow, Motion::Diagonal, [0.2, 0.2]),
        ]);
        let (v, m) = render_video(&s);
        for t in 0..8 {
            for y in 0..32 {
                for x in 0..32 {
                    let px = v.pixel(t, y, x);
                    match (m[0].get(t, y, x), m[1].get(t, y, x)) {
                        (true, true) => panic!("pixel owned twice"),
                        (true, false) => assert_eq!(px, Color::Green.rgb()),
                        (false, true) => assert_eq!(px, Color::Yellow.rgb()),
                        (false, false) => assert_eq!(px, [0.1; 3]),
                    }
                }
            }
        }
    }

    #[test]
    fn later_objects_occlude_earlier_ones() {
        let a = obj(ShapeClass::Square, Color::Red, Motion::Static, [0.25, 0.25]);
        let b = obj(ShapeClass::Square, Color::Blue, Motion::Static, [0.25, 0.25]);
        let (v, m) = render_video(&scene(vec![a, b]));
        assert_eq!(m[0].count_in_frame(0), 0);
        assert_eq!(v.pixel(0, 12, 12), Color::Blue.rgb());
    }
}
