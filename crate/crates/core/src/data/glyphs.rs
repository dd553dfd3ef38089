//! 8×8 bitmap glyphs for the synthetic renderer. `#` is ink.

pub const GLYPH_SIZE: usize = 8;

const GLYPHS: &[(&str, [&str; 8])] = &[
    ("0", ["..####..", ".#....#.", ".#...##.", ".#..#.#.", ".#.#..#.", ".##...#.", ".#....#.", "..####.."]),
    ("1", ["...##...", "..###...", "...##...", "...##...", "...##...", "...##...", "...##...", ".######."]),
    ("2", ["..####..", ".#....#.", "......#.", ".....#..", "....#...", "...#....", "..#.....", ".######."]),
    ("3", [".#####..", "......#.", "......#.", "..####..", "......#.", "......#.", "......#.", ".#####.."]),
    ("4", [".....#..", "....##..", "...#.#..", "..#..#..", ".#...#..", ".######.", ".....#..", ".....#.."]),
    ("5", [".######.", ".#......", ".#......", ".#####..", "......#.", "......#.", ".#....#.", "..####.."]),
    ("6", ["..####..", ".#......", ".#......", ".#####..", ".#....#.", ".#....#.", ".#....#.", "..####.."]),
    ("7", [".######.", "......#.", ".....#..", "....#...", "...#....", "...#....", "...#....", "...#...."]),
    ("8", ["..####..", ".#....#.", ".#....#.", "..####..", ".#....#.", ".#....#.", ".#....#.", "..####.."]),
    ("9", ["..####..", ".#....#.", ".#....#.", "..#####.", "......#.", "......#.", "......#.", "..####.."]),
    ("a", ["........", "........", "..####..", "......#.", "..#####.", ".#....#.", ".#...##.", "..###.#."]),
    ("b", [".#......", ".#......", ".#......", ".#####..", ".#....#.", ".#....#.", ".#....#.", ".#####.."]),
    ("c", ["........", "........", "..####..", ".#......", ".#......", ".#......", ".#......", "..####.."]),
    ("n", ["........", "........", ".#.###..", ".##...#.", ".#....#.", ".#....#.", ".#....#.", ".#....#."]),
    ("x", ["........", "........", ".#....#.", "..#..#..", "...##...", "...##...", "..#..#..", ".#....#."]),
    ("y", ["........", "........", ".#....#.", ".#....#.", "..#..#..", "...##...", "...#....", "..#....."]),
    ("+", ["........", "...#....", "...#....", ".#####..", "...#....", "...#....", "........", "........"]),
    ("-", ["........", "........", "........", ".######.", "........", "........", "........", "........"]),
    ("=", ["........", "........", ".######.", "........", "........", ".######.", "........", "........"]),
    ("\\times", ["........", ".#....#.", "..#..#..", "...##...", "...##...", "..#..#..", ".#....#.", "........"]),
    ("(", ["....##..", "...#....", "..#.....", "..#.....", "..#.....", "..#.....", "...#....", "....##.."]),
    (")", ["..##....", "....#...", ".....#..", ".....#..", ".....#..", ".....#..", "....#...", "..##...."]),
    ("\\sqrt", ["......##", "......#.", ".....#..", ".....#..", "#...#...", ".#..#...", "..##....", "...#...."]),
];

/// The bitmap for `token`, rows top to bottom, or `None` if it has no glyph.
pub fn glyph(token: &str) -> Option<[[bool; GLYPH_SIZE]; GLYPH_SIZE]> {
    let (_, rows) = GLYPHS.iter().find(|(t, _)| *t == token)?;
    let mut out = [[false; GLYPH_SIZE]; GLYPH_SIZE];
    for (r, row) in rows.iter().enumerate() {
        for (c, ch) in row.bytes().enumerate() {
            out[r][c] = ch == b'#';
        }
    }
    Some(out)
}

pub fn has_glyph(token: &str) -> bool {
    GLYPHS.iter().any(|(t, _)| *t == token)
}
