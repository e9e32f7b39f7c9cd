//! Renders one plan per building type into a single PNG strip.

use floorgen::data::{generate_sample, BuildingSpec, BuildingType};
use floorgen::grid::tile_row;

fn main() -> floorgen::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let size: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(64);
    let seed: u64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(0);
    let out = args.get(3).map(String::as_str).unwrap_or("contact_sheet.png");
    let mut plans = Vec::new();
    let mut masks = Vec::new();
    for t in BuildingType::ALL {
        let s = generate_sample(&BuildingSpec::sample(t, seed), size)?;
        println!("{t}: {} rooms, \"{}\"", s.rooms.len(), s.prompt);
        plans.push(s.plan);
        masks.push(s.mask.to_grid());
    }
    let masks: Vec<_> = masks
        .iter()
        .map(|m| floorgen::ImageGrid::from_fn(size, size, 3, |y, x, _| m.get(y, x, 0)))
        .collect();
    let top = tile_row(&plans)?;
    let bottom = tile_row(&masks)?;
    let mut data = top.data().to_vec();
    data.extend_from_slice(bottom.data());
    floorgen::ImageGrid::new(size * 2, top.width(), 3, data)?.save_png(std::path::Path::new(out))?;
    Ok(())
}
