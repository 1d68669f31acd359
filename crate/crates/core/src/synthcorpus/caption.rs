use serde::{Deserialize, Serialize};

use super::scene::SceneSpec;

/// Byte range of a noun phrase in a caption and the object it names.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NounSpan {
    pub start: usize,
    pub end: usize,
    pub object: usize,
}

impl NounSpan {
    pub fn text<'a>(&self, caption: &'a str) -> &'a str {
        &caption[self.start..self.end]
    }
}

/// `a {color} {shape} {motion phrase}[ and a {color} {shape} ...]`, with one
/// span per "{color} {shape}" in object order.
pub fn caption_for(scene: &SceneSpec) -> (String, Vec<NounSpan>) {
    caption_with_offset(scene, 0)
}

pub(crate) fn caption_with_offset(scene: &SceneSpec, first_object: usize) -> (String, Vec<NounSpan>) {
    let mut text = String::new();
    let mut spans = Vec::new();
    for (i, o) in scene.objects().iter().enumerate() {
        if i > 0 {
            text.push_str(" and ");
        }
        text.push_str("a ");
        let start = text.len();
        text.push_str(o.color.word());
        text.push(' ');
        text.push_str(o.shape.word());
        spans.push(NounSpan {
            start,
            end: text.len(),
            object: first_object + i,
        });
        text.push(' ');
        text.push_str(o.motion.phrase());
    }
    (text, spans)
}

/// Every word the caption grammar can emit.
pub fn grammar_words() -> Vec<&'static str> {
    use super::scene::{Color, Motion, ShapeClass};
    let mut words = vec!["a", "and", "then"];
    words.extend(Color::ALL.iter().map(|c| c.word()));
    words.extend(ShapeClass::ALL.iter().map(|s| s.word()));
    for m in Motion::ALL {
        words.extend(m.phrase().split(' '));
    }
    words
}

#[cfg(test)]
mod tests {
    use super::super::scene::{Color, Motion, ObjectSpec, ShapeClass};
    use super::*;

    fn obj(shape: ShapeClass, color: Color, motion: Motion) -> ObjectSpec {
        ObjectSpec {
            shape,
            color,
            motion,
            start: [0.0, 0.0],
            size: 8,
        }
    }

    #[test]
    fn single_object_caption() {
        let s = SceneSpec::new(
            vec![obj(ShapeClass::Circle, Color::Red, Motion::Horizontal)],
            [0.1; 3],
            8,
            32,
            32,
            0,
        )
        .unwrap();
        let (text, spans) = caption_for(&s);
        assert_eq!(text, "a red circle moves left to right");
        assert_eq!(spans.len(), 1);
        assert_eq!(spans[0].text(&text), "red circle");
        assert_eq!(spans[0].object, 0);
    }

    #[test]
    fn two_objects_two_spans() {
        let s = SceneSpec::new(
            vec![
                obj(ShapeClass::Circle, Color::Red, Motion::Static),
                obj(ShapeClass::Cross, Color::White, Motion::Vertical),
            ],
            [0.1; 3],
            8,
            32,
            32,
            0,
        )
        .unwrap();
        let (text, spans) = caption_for(&s);
        assert_eq!(text, "a red circle stays still and a white cross moves top to bottom");
        assert_eq!(spans.len(), 2);
        assert_eq!(spans[1].text(&text), "white cross");
        assert_eq!(spans[1].object, 1);
        assert_eq!(caption_for(&s), (text, spans));
    }

    #[test]
    fn captions_are_lowercase_without_punctuation() {
        for seed in 0..50 {
            let s = SceneSpec::random(seed, 3, 8, 32, 32).unwrap();
            let (text, _) = caption_for(&s);
            assert!(text.chars().all(|c| c.is_ascii_lowercase() || c == ' '));
            let vocab = grammar_words();
            assert!(text.split(' ').all(|w| vocab.contains(&w)));
        }
    }
}
