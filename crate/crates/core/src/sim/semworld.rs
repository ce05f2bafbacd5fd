//! SEMWORLD v1 text format.
//!
//! ```text
//! SEMWORLD 1
//! <width> <height> <n_classes>
//! <id> <char> <name>        (n_classes lines, ids 1..=n_classes)
//! <row>                     (height rows of width chars; '.' is free)
//! ```

use std::collections::HashMap;

use super::{Cell, ClassDef, Result, SimError, World};

pub fn save_world(world: &World) -> String {
    let mut out = String::new();
    out.push_str("SEMWORLD 1\n");
    out.push_str(&format!("{} {} {}\n", world.width(), world.height(), world.n_classes()));
    for (i, c) in world.classes().iter().enumerate() {
        out.push_str(&format!("{} {} {}\n", i + 1, c.ch, c.name));
    }
    for y in 0..world.height() {
        for x in 0..world.width() {
            out.push(match world.cell(x, y) {
                Cell::Free => '.',
                Cell::Obstacle(k) => world.classes()[k as usize - 1].ch,
            });
        }
        out.push('\n');
    }
    out
}

fn parse_err(line: usize, msg: impl Into<String>) -> SimError {
    SimError::Parse { line, msg: msg.into() }
}

pub fn load_world(text: &str) -> Result<World> {
    let mut lines = text.split('\n').enumerate().map(|(i, l)| (i + 1, l));
    let mut next = |what: &str| {
        lines
            .next()
            .ok_or_else(|| parse_err(0, format!("unexpected end of input, expected {what}")))
    };

    let (n, header) = next("header")?;
    if header != "SEMWORLD 1" {
        return Err(parse_err(n, format!("bad header {header:?}, expected \"SEMWORLD 1\"")));
    }

    let (n, dims) = next("dimensions")?;
    let nums: Vec<usize> = dims
        .split(' ')
        .map(|t| t.parse().map_err(|_| parse_err(n, format!("bad number {t:?}"))))
        .collect::<Result<_>>()?;
    let &[width, height, n_classes] = nums.as_slice() else {
        return Err(parse_err(n, "expected \"width height n_classes\""));
    };
    if width == 0 || height == 0 {
        return Err(parse_err(n, "width and height must be positive"));
    }
    if n_classes == 0 || n_classes > super::MAX_CLASSES {
        return Err(parse_err(n, format!("n_classes must be in 1..={}", super::MAX_CLASSES)));
    }

    let mut classes = Vec::with_capacity(n_classes);
    let mut by_char: HashMap<char, u8> = HashMap::new();
    for expected in 1..=n_classes {
        let (n, line) = next("class declaration")?;
        let mut parts = line.splitn(3, ' ');
        let id: usize = parts
            .next()
            .and_then(|t| t.parse().ok())
            .ok_or_else(|| parse_err(n, "expected \"id char name\""))?;
        if id != expected {
            return Err(parse_err(n, format!("class id {id}, expected {expected}")));
        }
        let ch_tok = parts.next().ok_or_else(|| parse_err(n, "missing class char"))?;
        let mut chars = ch_tok.chars();
        let (Some(ch), None) = (chars.next(), chars.next()) else {
            return Err(parse_err(n, format!("class char must be one character, got {ch_tok:?}")));
        };
        if ch == '.' || by_char.contains_key(&ch) {
            return Err(parse_err(n, format!("class char {ch:?} reserved or duplicated")));
        }
        let name = parts.next().unwrap_or("").to_string();
        if name.is_empty() {
            return Err(parse_err(n, "missing class name"));
        }
        by_char.insert(ch, id as u8);
        classes.push(ClassDef { ch, name });
    }

    let mut cells = Vec::with_capacity(width * height);
    for _ in 0..height {
        let (n, row) = next("grid row")?;
        let count = row.chars().count();
        if count != width {
            return Err(parse_err(n, format!("row has {count} cells, expected {width}")));
        }
        for ch in row.chars() {
            cells.push(match ch {
                '.' => Cell::Free,
                c => Cell::Obstacle(*by_char.get(&c).ok_or_else(|| parse_err(n, format!("unknown class char {c:?}")))?),
            });
        }
    }
    for (n, rest) in lines {
        if !rest.is_empty() {
            return Err(parse_err(n, "unexpected content after grid"));
        }
    }
    World::new(width, height, cells, classes)
}
