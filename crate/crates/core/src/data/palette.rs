//! Class palette: ids, names and display colors.

use std::fmt::Write as _;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClassEntry {
    pub id: u8,
    pub name: String,
    pub rgb: [u8; 3],
}

/// Ordered class list; entry `i` has id `i` and id 0 is background.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClassPalette {
    entries: Vec<ClassEntry>,
}

pub const BACKGROUND: u8 = 0;
pub const LIVER: u8 = 1;
pub const KIDNEY: u8 = 2;
pub const GALLBLADDER: u8 = 3;
pub const VESSELS: u8 = 4;
pub const SPLEEN: u8 = 5;

impl Default for ClassPalette {
    fn default() -> Self {
        let e = |id, name: &str, rgb| ClassEntry {
            id,
            name: name.to_string(),
            rgb,
        };
        Self {
            entries: vec![
                e(BACKGROUND, "background", [0, 0, 0]),
                e(LIVER, "liver", [238, 130, 238]),
                e(KIDNEY, "kidney", [255, 255, 0]),
                e(GALLBLADDER, "gallbladder", [0, 128, 0]),
                e(VESSELS, "vessels", [255, 0, 0]),
                e(SPLEEN, "spleen", [255, 192, 203]),
            ],
        }
    }
}

impl ClassPalette {
    pub fn new(entries: Vec<ClassEntry>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::Config("palette is empty".into()));
        }
        for (i, e) in entries.iter().enumerate() {
            if e.id as usize != i {
                return Err(Error::Config(format!(
                    "palette ids must be contiguous from 0; entry {i} has id {}",
                    e.id
                )));
            }
            if entries[..i].iter().any(|o| o.rgb == e.rgb) {
                return Err(Error::Config(format!("palette color {:?} used twice", e.rgb)));
            }
        }
        Ok(Self { entries })
    }

    pub fn entries(&self) -> &[ClassEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Class ids other than background.
    pub fn organ_ids(&self) -> impl Iterator<Item = u8> + '_ {
        self.entries.iter().skip(1).map(|e| e.id)
    }

    pub fn color(&self, id: u8) -> [u8; 3] {
        self.entries[id as usize].rgb
    }

    pub fn name(&self, id: u8) -> &str {
        &self.entries[id as usize].name
    }

    /// One `id name r g b` line per class.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for e in &self.entries {
            let [r, g, b] = e.rgb;
            let _ = writeln!(s, "{} {} {r} {g} {b}", e.id, e.name);
        }
        s
    }

    /// Parses the [`ClassPalette::to_text`] format; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split_whitespace().collect();
            let bad = || Error::Config(format!("palette line {}: expected `id name r g b`", n + 1));
            if f.len() != 5 {
                return Err(bad());
            }
            let num = |s: &str| s.parse::<u8>().map_err(|_| bad());
            entries.push(ClassEntry {
                id: num(f[0])?,
                name: f[1].to_string(),
                rgb: [num(f[2])?, num(f[3])?, num(f[4])?],
            });
        }
        Self::new(entries)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_palette_roundtrips_through_text() {
        let p = ClassPalette::default();
        assert_eq!(ClassPalette::parse(&p.to_text()).unwrap(), p);
        assert_eq!(p.color(KIDNEY), [255, 255, 0]);
        assert_eq!(p.organ_ids().collect::<Vec<_>>(), vec![1, 2, 3, 4, 5]);
    }

    #[test]
    fn rejects_duplicates_and_gaps() {
        assert!(ClassPalette::parse("0 bg 0 0 0\n1 a 0 0 0\n").is_err());
        assert!(ClassPalette::parse("0 bg 0 0 0\n2 a 1 1 1\n").is_err());
        assert!(ClassPalette::parse("0 bg 0 0\n").is_err());
    }
}
