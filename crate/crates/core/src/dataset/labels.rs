//! Semantic-label quantization.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::Raster;

pub const RAW_CLASSES: usize = 150;

/// The eight scene categories and their grayscale values.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Category {
    Background,
    Wall,
    Floor,
    Stairs,
    Table,
    Chair,
    Bed,
    Person,
}

impl Category {
    pub const ALL: [Category; 8] = [
        Category::Background,
        Category::Wall,
        Category::Floor,
        Category::Stairs,
        Category::Table,
        Category::Chair,
        Category::Bed,
        Category::Person,
    ];

    pub fn value(self) -> u8 {
        match self {
            Category::Background => 0,
            Category::Wall => 36,
            Category::Floor => 72,
            Category::Stairs => 108,
            Category::Table => 144,
            Category::Chair => 180,
            Category::Bed => 216,
            Category::Person => 252,
        }
    }

    pub fn from_value(v: u8) -> Option<Category> {
        Category::ALL.into_iter().find(|c| c.value() == v)
    }

    fn is_fixed(self) -> bool {
        matches!(self, Category::Wall | Category::Floor | Category::Stairs)
    }
}

/// Label granularity.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LabelMode {
    /// Foreground / background.
    #[serde(rename = "2")]
    Two,
    /// Background / objects / humans.
    #[serde(rename = "3")]
    Three,
    /// Background / fixed / movable / humans.
    #[serde(rename = "4")]
    Four,
    #[serde(rename = "8")]
    Eight,
    /// All raw labels, spread evenly over 0..=255.
    #[serde(rename = "150")]
    Full,
}

impl LabelMode {
    pub const ALL: [LabelMode; 5] = [LabelMode::Two, LabelMode::Three, LabelMode::Four, LabelMode::Eight, LabelMode::Full];

    pub fn count(self) -> usize {
        match self {
            LabelMode::Two => 2,
            LabelMode::Three => 3,
            LabelMode::Four => 4,
            LabelMode::Eight => 8,
            LabelMode::Full => RAW_CLASSES,
        }
    }

    pub fn palette(self) -> Vec<u8> {
        match self {
            LabelMode::Two => vec![0, 252],
            LabelMode::Three => vec![0, 144, 252],
            LabelMode::Four => vec![0, 72, 180, 252],
            LabelMode::Eight => Category::ALL.iter().map(|c| c.value()).collect(),
            LabelMode::Full => (0..RAW_CLASSES).map(full_value).collect(),
        }
    }

    /// Gray value of a category in this mode (not meaningful for `Full`).
    pub fn category_value(self, c: Category) -> u8 {
        match (self, c) {
            (_, Category::Background) => 0,
            (LabelMode::Two, _) => 252,
            (LabelMode::Three | LabelMode::Four, Category::Person) => 252,
            (LabelMode::Three, _) => 144,
            (LabelMode::Four, c) if c.is_fixed() => 72,
            (LabelMode::Four, _) => 180,
            (_, c) => c.value(),
        }
    }
}

fn full_value(raw: usize) -> u8 {
    (raw as f64 * 255.0 / (RAW_CLASSES - 1) as f64).round() as u8
}

impl fmt::Display for LabelMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.count())
    }
}

impl FromStr for LabelMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        LabelMode::ALL
            .into_iter()
            .find(|m| m.count().to_string() == s)
            .ok_or_else(|| Error::Config(format!("label mode must be one of 2, 3, 4, 8, 150; got '{s}'")))
    }
}

/// Raw label → category table. Unlisted raw labels fall to background.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelMapping {
    pub wall: Vec<usize>,
    pub floor: Vec<usize>,
    pub stairs: Vec<usize>,
    pub table: Vec<usize>,
    pub chair: Vec<usize>,
    pub bed: Vec<usize>,
    pub person: Vec<usize>,
}

impl Default for LabelMapping {
    /// ADE20K indices: wall, floor, bed, person, table/desk/coffee table,
    /// chair/sofa/armchair/seat/bench, stairs/stairway.
    fn default() -> Self {
        LabelMapping {
            wall: vec![0],
            floor: vec![3],
            stairs: vec![53, 59],
            table: vec![15, 33, 64],
            chair: vec![19, 23, 30, 31, 69],
            bed: vec![7],
            person: vec![12],
        }
    }
}

impl LabelMapping {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    /// Dense lookup table of length 150.
    pub fn table(&self) -> Result<Vec<Category>> {
        let mut t = vec![Category::Background; RAW_CLASSES];
        let groups = [
            (Category::Wall, &self.wall),
            (Category::Floor, &self.floor),
            (Category::Stairs, &self.stairs),
            (Category::Table, &self.table),
            (Category::Chair, &self.chair),
            (Category::Bed, &self.bed),
            (Category::Person, &self.person),
        ];
        for (cat, ids) in groups {
            for &i in ids {
                if i >= RAW_CLASSES {
                    return Err(Error::Config(format!("raw label {i} out of range 0..{RAW_CLASSES}")));
                }
                t[i] = cat;
            }
        }
        Ok(t)
    }

    pub fn category(&self, raw: usize) -> Category {
        self.table().ok().and_then(|t| t.get(raw).copied()).unwrap_or(Category::Background)
    }
}

/// A grayscale map whose pixels all lie in its mode's palette.
#[derive(Clone, Debug, PartialEq)]
pub struct SegmentationMap {
    pub map: Raster,
    pub mode: LabelMode,
}

impl SegmentationMap {
    pub fn new(map: Raster, mode: LabelMode) -> Result<Self> {
        validate_palette(&map, mode)?;
        Ok(SegmentationMap { map, mode })
    }
}

pub fn validate_palette(map: &Raster, mode: LabelMode) -> Result<()> {
    if map.channels() != 1 {
        return Err(Error::Format(format!("segmentation map must be single-channel, got {}", map.channels())));
    }
    let mut allowed = [false; 256];
    for v in mode.palette() {
        allowed[v as usize] = true;
    }
    if let Some(bad) = map.data().iter().find(|&&v| v.fract() != 0.0 || !(0.0..=255.0).contains(&v) || !allowed[v as usize]) {
        return Err(Error::Format(format!("value {bad} is outside the {mode}-label palette")));
    }
    Ok(())
}

/// Quantize a raw label map (pixel value = raw class index).
/// Unmapped or out-of-range labels become background; their count is returned.
pub fn quantize_labels(raw: &Raster, mode: LabelMode, mapping: &LabelMapping) -> Result<(SegmentationMap, usize)> {
    if raw.channels() != 1 {
        return Err(Error::Input("raw label map must be single-channel".into()));
    }
    let table = mapping.table()?;
    let mut unmapped = 0;
    let data = raw
        .data()
        .iter()
        .map(|&v| {
            let idx = v.round() as usize;
            if mode == LabelMode::Full {
                if idx < RAW_CLASSES {
                    return full_value(idx) as f32;
                }
                unmapped += 1;
                return 0.0;
            }
            let cat = table.get(idx).copied().unwrap_or(Category::Background);
            if cat == Category::Background {
                unmapped += 1;
            }
            mode.category_value(cat) as f32
        })
        .collect();
    let map = Raster::new(raw.width(), raw.height(), 1, data)?;
    Ok((SegmentationMap { map, mode }, unmapped))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn raw(ids: &[usize]) -> Raster {
        Raster::new(ids.len(), 1, 1, ids.iter().map(|&i| i as f32).collect()).unwrap()
    }

    #[test]
    fn mode_values() {
        let m = LabelMapping::default();
        let r = raw(&[7, 0, 3, 12, 19, 15, 53, 140]);
        let (eight, unmapped) = quantize_labels(&r, LabelMode::Eight, &m).unwrap();
        assert_eq!(eight.map.data(), &[216.0, 36.0, 72.0, 252.0, 180.0, 144.0, 108.0, 0.0]);
        assert_eq!(unmapped, 1);
        let (two, _) = quantize_labels(&r, LabelMode::Two, &m).unwrap();
        assert_eq!(two.map.data(), &[252.0, 252.0, 252.0, 252.0, 252.0, 252.0, 252.0, 0.0]);
        let (four, _) = quantize_labels(&r, LabelMode::Four, &m).unwrap();
        assert_eq!(four.map.data()[4], four.map.data()[5]);
        assert_eq!(four.map.data(), &[180.0, 72.0, 72.0, 252.0, 180.0, 180.0, 72.0, 0.0]);
        let (three, _) = quantize_labels(&r, LabelMode::Three, &m).unwrap();
        assert_eq!(three.map.data(), &[144.0, 144.0, 144.0, 252.0, 144.0, 144.0, 144.0, 0.0]);
        let (full, _) = quantize_labels(&raw(&[0, 149, 74]), LabelMode::Full, &m).unwrap();
        assert_eq!(full.map.data(), &[0.0, 255.0, 127.0]);
    }

    #[test]
    fn palette_closure_all_modes() {
        let m = LabelMapping::default();
        let r = raw(&(0..150).collect::<Vec<_>>());
        for mode in LabelMode::ALL {
            let (s, _) = quantize_labels(&r, mode, &m).unwrap();
            validate_palette(&s.map, mode).unwrap();
        }
        let bad = Raster::new(1, 1, 1, vec![37.0]).unwrap();
        assert!(matches!(SegmentationMap::new(bad, LabelMode::Eight), Err(Error::Format(_))));
    }

    #[test]
    fn mode_parse() {
        assert_eq!("150".parse::<LabelMode>().unwrap(), LabelMode::Full);
        assert!("5".parse::<LabelMode>().is_err());
    }
}
