//! Text format for panorama class maps: one `x0 y0 x1 y1 class` rectangle per
//! line (half-open pixel ranges), later lines overriding earlier ones. Blank
//! lines and `#` comments are ignored.

use std::path::Path;

use lego_core::panorama::{ClassMap, Region};

use crate::error::{Error, Result};

pub fn parse_regions(text: &str) -> Result<Vec<Region>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let nums: Vec<usize> = line
            .split_whitespace()
            .map(|t| t.parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Config(format!("class map line {}: {e}", n + 1)))?;
        let [x0, y0, x1, y1, class] = nums[..] else {
            return Err(Error::Config(format!(
                "class map line {}: expected `x0 y0 x1 y1 class`, got {} fields",
                n + 1,
                nums.len()
            )));
        };
        out.push(Region { x0, y0, x1, y1, class });
    }
    Ok(out)
}

pub fn load_class_map(path: &Path, h: usize, w: usize, num_classes: usize) -> Result<ClassMap> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let regions = parse_regions(&text)?;
    if let Some(r) = regions.iter().find(|r| r.class >= num_classes) {
        return Err(Error::Config(format!("class map uses class {} of {num_classes}", r.class)));
    }
    Ok(ClassMap::from_regions(h, w, &regions)?)
}
