//! Embedded RGBA sticker sprites.

/// A palette-indexed sprite; `.` is transparent.
struct Sprite {
    id: &'static str,
    rows: [&'static str; 12],
    palette: &'static [(char, [f64; 3])],
}

const SPRITES: &[Sprite] = &[
    Sprite {
        id: "star",
        rows: [
            ".....yy.....",
            ".....yy.....",
            "....yyyy....",
            "....yyyy....",
            "yyyyyyyyyyyy",
            ".yyyyyyyyyy.",
            "..yyyyyyyy..",
            "...yyyyyy...",
            "...yyyyyy...",
            "..yyy..yyy..",
            "..yy....yy..",
            ".yy......yy.",
        ],
        palette: &[('y', [1.0, 0.85, 0.1])],
    },
    Sprite {
        id: "heart",
        rows: [
            "............",
            ".rrr....rrr.",
            "rrrrr..rrrrr",
            "rrwrrrrrrrrr",
            "rrrrrrrrrrrr",
            "rrrrrrrrrrrr",
            ".rrrrrrrrrr.",
            "..rrrrrrrr..",
            "...rrrrrr...",
            "....rrrr....",
            ".....rr.....",
            "............",
        ],
        palette: &[('r', [0.95, 0.2, 0.45]), ('w', [1.0, 1.0, 1.0])],
    },
    Sprite {
        id: "smiley",
        rows: [
            "...kkkkkk...",
            "..kyyyyyyk..",
            ".kyyyyyyyyk.",
            "kyykyyyykyyk",
            "kyykyyyykyyk",
            "kyyyyyyyyyyk",
            "kyyyyyyyyyyk",
            "kykyyyyyykyk",
            "kyykkkkkkyyk",
            ".kyyyyyyyyk.",
            "..kyyyyyyk..",
            "...kkkkkk...",
        ],
        palette: &[('k', [0.1, 0.1, 0.1]), ('y', [1.0, 0.9, 0.2])],
    },
];

pub const SPRITE_SIZE: usize = 12;

pub fn asset_ids() -> impl Iterator<Item = &'static str> {
    SPRITES.iter().map(|s| s.id)
}

pub fn exists(id: &str) -> bool {
    SPRITES.iter().any(|s| s.id == id)
}

/// RGBA texel of sprite `id` at `(row, col)` in sprite coordinates.
pub fn texel(id: &str, row: usize, col: usize) -> Option<([f64; 3], f64)> {
    let sprite = SPRITES.iter().find(|s| s.id == id)?;
    let ch = sprite.rows.get(row)?.as_bytes().get(col).copied()? as char;
    if ch == '.' {
        return Some(([0.0; 3], 0.0));
    }
    let rgb = sprite.palette.iter().find(|(c, _)| *c == ch)?.1;
    Some((rgb, 1.0))
}
