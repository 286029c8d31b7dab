// SPDX-License-Identifier: MIT OR Apache-2.0

//! Components ranked highly in every language setting.

use std::collections::BTreeMap;

use mtlab::corpus::Setting;
use mtlab::locate::{intersect_components, ComponentKind, Coord, LocatedComponents, Provenance};

fn main() -> mtlab::error::Result<()> {
    let shared = [Coord { layer: 3, index: 1 }, Coord { layer: 2, index: 0 }];
    let mut map = BTreeMap::new();
    for (i, s) in Setting::ALL.into_iter().enumerate() {
        let mut scored: Vec<(Coord, f64)> = shared.iter().map(|c| (*c, 1.0 + i as f64)).collect();
        scored.push((Coord { layer: 0, index: i }, 0.5));
        let top =
            LocatedComponents::from_scored(ComponentKind::Head, scored, Provenance::default())?;
        map.insert(s, top);
    }
    let common = intersect_components(&map, 3, 2)?;
    println!("shared across {} settings: {:?}", map.len(), common.items);
    Ok(())
}
