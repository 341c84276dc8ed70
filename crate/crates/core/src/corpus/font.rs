//! Built-in stroke font.
//!
//! Glyphs live on a 4 x 6 unit cell (x right, y down, baseline at y = 6) and are
//! drawn as polylines. The advance between glyph origins is [`ADVANCE`] units.

use std::collections::HashMap;
use std::sync::OnceLock;

use crate::geometry::Point;

pub const GLYPH_WIDTH: f64 = 4.0;
pub const GLYPH_HEIGHT: f64 = 6.0;
pub const ADVANCE: f64 = 5.0;
/// Stroke half-width in font units.
pub const STROKE_HALF_WIDTH: f64 = 0.45;

/// Digits, both letter cases and 17 punctuation marks: 79 symbols.
pub const FULL_INVENTORY: &str =
    "0123456789ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz!\"#$%&'()*+,-./:?";

const GLYPHS: &[(char, &str)] = &[
    ('0', "0,0 4,0 4,6 0,6 0,0; 4,0 0,6"),
    ('1', "1,1 2,0 2,6; 1,6 3,6"),
    ('2', "0,1 1,0 3,0 4,1 4,2 0,6 4,6"),
    ('3', "0,0 4,0 2,2 3,2 4,3 4,5 3,6 1,6 0,5"),
    ('4', "3,6 3,0 0,4 4,4"),
    ('5', "4,0 0,0 0,3 3,3 4,4 4,5 3,6 0,6"),
    ('6', "4,0 1,0 0,1 0,5 1,6 3,6 4,5 4,4 3,3 0,3"),
    ('7', "0,0 4,0 1,6"),
    (
        '8',
        "1,0 3,0 4,1 4,2 3,3 1,3 0,4 0,5 1,6 3,6 4,5 4,4 3,3; 1,3 0,2 0,1 1,0",
    ),
    ('9', "4,3 1,3 0,2 0,1 1,0 3,0 4,1 4,5 3,6 0,6"),
    ('A', "0,6 2,0 4,6; 1,4 3,4"),
    ('B', "0,0 0,6 3,6 4,5 4,4 3,3 0,3; 0,0 3,0 4,1 4,2 3,3"),
    ('C', "4,0 1,0 0,1 0,5 1,6 4,6"),
    ('D', "0,0 0,6 3,6 4,5 4,1 3,0 0,0"),
    ('E', "4,0 0,0 0,6 4,6; 0,3 3,3"),
    ('F', "4,0 0,0 0,6; 0,3 3,3"),
    ('G', "4,1 3,0 1,0 0,1 0,5 1,6 3,6 4,5 4,3 2,3"),
    ('H', "0,0 0,6; 4,0 4,6; 0,3 4,3"),
    ('I', "1,0 3,0; 2,0 2,6; 1,6 3,6"),
    ('J', "1,0 4,0; 3,0 3,5 2,6 1,6 0,5"),
    ('K', "0,0 0,6; 4,0 0,4; 1,3 4,6"),
    ('L', "0,0 0,6 4,6"),
    ('M', "0,6 0,0 2,3 4,0 4,6"),
    ('N', "0,6 0,0 4,6 4,0"),
    ('O', "1,0 3,0 4,1 4,5 3,6 1,6 0,5 0,1 1,0"),
    ('P', "0,6 0,0 3,0 4,1 4,2 3,3 0,3"),
    ('Q', "1,0 3,0 4,1 4,5 3,6 1,6 0,5 0,1 1,0; 2,4 4,6"),
    ('R', "0,6 0,0 3,0 4,1 4,2 3,3 0,3; 2,3 4,6"),
    ('S', "4,1 3,0 1,0 0,1 0,2 1,3 3,3 4,4 4,5 3,6 1,6 0,5"),
    ('T', "0,0 4,0; 2,0 2,6"),
    ('U', "0,0 0,5 1,6 3,6 4,5 4,0"),
    ('V', "0,0 2,6 4,0"),
    ('W', "0,0 1,6 2,3 3,6 4,0"),
    ('X', "0,0 4,6; 4,0 0,6"),
    ('Y', "0,0 2,3 4,0; 2,3 2,6"),
    ('Z', "0,0 4,0 0,6 4,6"),
    ('a', "1,2 3,2 4,3 4,6; 4,4 1,4 0,5 1,6 3,6 4,5"),
    ('b', "0,0 0,6 3,6 4,5 4,3 3,2 0,2"),
    ('c', "4,2 1,2 0,3 0,5 1,6 4,6"),
    ('d', "4,0 4,6 1,6 0,5 0,3 1,2 4,2"),
    ('e', "0,4 4,4 4,3 3,2 1,2 0,3 0,5 1,6 4,6"),
    ('f', "4,0 3,0 2,1 2,6; 1,2 4,2"),
    ('g', "4,4 1,4 0,3 1,2 4,2 4,6 1,6"),
    ('h', "0,0 0,6; 0,3 1,2 3,2 4,3 4,6"),
    ('i', "2,2 2,6; 2,0 2,0.8"),
    ('j', "3,2 3,6 2,6 1,5; 3,0 3,0.8"),
    ('k', "0,0 0,6; 4,2 0,5; 1,4 4,6"),
    ('l', "1,0 2,0 2,6 3,6"),
    ('m', "0,6 0,2; 0,3 1,2 2,3 2,6; 2,3 3,2 4,3 4,6"),
    ('n', "0,6 0,2; 0,3 1,2 3,2 4,3 4,6"),
    ('o', "1,2 3,2 4,3 4,5 3,6 1,6 0,5 0,3 1,2"),
    ('p', "0,6 0,2 3,2 4,3 3,4 0,4"),
    ('q', "4,6 4,2 1,2 0,3 1,4 4,4"),
    ('r', "0,2 0,6; 0,3 1,2 4,2"),
    ('s', "4,2 1,2 0,3 1,4 3,4 4,5 3,6 0,6"),
    ('t', "2,0 2,5 3,6 4,6; 0,2 4,2"),
    ('u', "0,2 0,5 1,6 3,6 4,5; 4,2 4,6"),
    ('v', "0,2 2,6 4,2"),
    ('w', "0,2 1,6 2,4 3,6 4,2"),
    ('x', "0,2 4,6; 4,2 0,6"),
    ('y', "0,2 2,4; 4,2 1,6"),
    ('z', "0,2 4,2 0,6 4,6"),
    ('!', "2,0 2,4; 2,5.4 2,6"),
    ('"', "1,0 1,1.5; 3,0 3,1.5"),
    ('#', "1,0 1,6; 3,0 3,6; 0,2 4,2; 0,4 4,4"),
    ('$', "4,1 1,1 0,2 1,3 3,3 4,4 3,5 0,5; 2,0 2,6"),
    ('%', "0,6 4,0; 0,0 1,0 1,1 0,1 0,0; 3,5 4,5 4,6 3,6 3,5"),
    ('&', "4,6 1,2 1,1 2,0 3,1 0,4 0,5 1,6 2,6 4,4"),
    ('\'', "2,0 2,1.5"),
    ('(', "3,0 1,2 1,4 3,6"),
    (')', "1,0 3,2 3,4 1,6"),
    ('*', "2,1 2,5; 0,2 4,4; 4,2 0,4"),
    ('+', "2,1 2,5; 0,3 4,3"),
    (',', "2,4.5 2,5.5 1,6"),
    ('-', "0,3 4,3"),
    ('.', "2,5.4 2,6"),
    ('/', "4,0 0,6"),
    (':', "2,1.5 2,2.2; 2,4.5 2,5.2"),
    ('?', "0,1 1,0 3,0 4,1 4,2 2,3 2,4; 2,5.4 2,6"),
];

/// Polylines of one glyph in font units.
pub type Strokes = Vec<Vec<Point>>;

fn parse(spec: &str) -> Strokes {
    spec.split(';')
        .map(|line| {
            line.split_whitespace()
                .map(|p| {
                    let (x, y) = p.split_once(',').expect("glyph point");
                    Point::new(x.parse().expect("glyph x"), y.parse().expect("glyph y"))
                })
                .collect()
        })
        .collect()
}

fn table() -> &'static HashMap<char, Strokes> {
    static TABLE: OnceLock<HashMap<char, Strokes>> = OnceLock::new();
    TABLE.get_or_init(|| GLYPHS.iter().map(|&(c, s)| (c, parse(s))).collect())
}

/// Strokes for `c`, if the font has it.
pub fn glyph(c: char) -> Option<&'static Strokes> {
    table().get(&c)
}

pub fn has_glyph(c: char) -> bool {
    table().contains_key(&c)
}
