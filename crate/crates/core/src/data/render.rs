//! Procedural floorplan rendering.
//!
//! Geometry is sampled in unit coordinates and partitioned on a fixed 64×64
//! reference grid, then rasterized at the requested size, so a 256×256
//! companion shows the same plan as its 64×64 record.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::spec::{prompt_from_spec, BuildingSpec, BuildingType, Footprint};
use crate::control::FootprintMask;
use crate::error::{Error, Result};
use crate::grid::ImageGrid;

const REFERENCE: usize = 64;
/// Smallest room side on the reference grid.
const MIN_SIDE: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RoomRole {
    Living,
    Bedroom,
    Kitchen,
    Bath,
    Office,
    Core,
    Meeting,
    Stacks,
    Reading,
    Service,
    Hall,
    Stage,
    Lobby,
    Grass,
    Pitch,
    UpperSeating,
    LowerSeating,
    Concourse,
    Court,
}

impl RoomRole {
    /// Fill colour. Every tint has Rec.709 luminance below 0.85 so rooms read
    /// as foreground against the white background.
    pub fn tint(self) -> [f32; 3] {
        match self {
            RoomRole::Living => [0.93, 0.80, 0.62],
            RoomRole::Bedroom => [0.72, 0.80, 0.93],
            RoomRole::Kitchen => [0.95, 0.72, 0.60],
            RoomRole::Bath => [0.62, 0.85, 0.88],
            RoomRole::Office => [0.78, 0.78, 0.86],
            RoomRole::Core => [0.55, 0.55, 0.58],
            RoomRole::Meeting => [0.85, 0.75, 0.90],
            RoomRole::Stacks => [0.80, 0.66, 0.50],
            RoomRole::Reading => [0.90, 0.84, 0.60],
            RoomRole::Service => [0.70, 0.70, 0.70],
            RoomRole::Hall => [0.86, 0.62, 0.62],
            RoomRole::Stage => [0.60, 0.45, 0.35],
            RoomRole::Lobby => [0.88, 0.80, 0.70],
            RoomRole::Grass => [0.45, 0.70, 0.42],
            RoomRole::Pitch => [0.35, 0.65, 0.35],
            RoomRole::UpperSeating => [0.60, 0.30, 0.35],
            RoomRole::LowerSeating => [0.80, 0.35, 0.30],
            RoomRole::Concourse => [0.82, 0.82, 0.78],
            RoomRole::Court => [0.85, 0.65, 0.40],
        }
    }
}

pub const WALL: [f32; 3] = [0.12, 0.12, 0.14];
pub const PITCH_LINE: [f32; 3] = [0.75, 0.88, 0.75];
pub const BACKGROUND: [f32; 3] = [1.0, 1.0, 1.0];

fn roles(t: BuildingType) -> (RoomRole, &'static [RoomRole]) {
    use RoomRole::*;
    match t {
        BuildingType::Studio => (Living, &[Bath, Kitchen]),
        BuildingType::OneBedroomApartment => (Living, &[Bedroom, Bath, Kitchen]),
        BuildingType::TwoBedroomApartment => (Living, &[Bedroom, Bedroom, Bath, Kitchen, Bath]),
        BuildingType::OfficeOneCore => (Office, &[Core, Meeting, Office, Meeting, Office, Service]),
        BuildingType::Library => (Stacks, &[Reading, Service, Reading, Stacks, Service]),
        BuildingType::Auditorium => (Hall, &[Stage, Lobby, Service, Lobby]),
        BuildingType::FootballStadium => (Grass, &[Pitch, LowerSeating, UpperSeating]),
        BuildingType::Arena => (Court, &[LowerSeating, Concourse]),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Room {
    pub role: RoomRole,
    /// Pixels at the rendered size, walls included.
    pub area: usize,
}

/// One generated record before it is written to disk.
#[derive(Debug, Clone)]
pub struct Sample {
    pub spec: BuildingSpec,
    pub prompt: String,
    pub mask: FootprintMask,
    pub plan: ImageGrid,
    pub rooms: Vec<Room>,
}

#[derive(Debug, Clone, Copy)]
enum Shape {
    Rect { cx: f64, cy: f64, w: f64, h: f64 },
    L { rect: [f64; 4], cut: [f64; 4] },
    Ellipse { cx: f64, cy: f64, a: f64, b: f64 },
    Rounded { cx: f64, cy: f64, w: f64, h: f64, r: f64 },
}

impl Shape {
    fn sample(kind: Footprint, rng: &mut ChaCha8Rng) -> Self {
        let centre = |rng: &mut ChaCha8Rng, extent: f64| {
            let slack = ((0.92 - extent) / 2.0).max(0.0);
            0.5 + rng.random_range(-slack..=slack)
        };
        match kind {
            Footprint::Rectangle | Footprint::LShape | Footprint::RoundedRect => {
                let w = rng.random_range(0.6..0.9);
                let h = rng.random_range(0.6..0.9);
                let cx = centre(rng, w);
                let cy = centre(rng, h);
                match kind {
                    Footprint::Rectangle => Shape::Rect { cx, cy, w, h },
                    Footprint::RoundedRect => Shape::Rounded {
                        cx,
                        cy,
                        w,
                        h,
                        r: w.min(h) * rng.random_range(0.1..0.2),
                    },
                    _ => {
                        let rect = [cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0];
                        let cw = w * rng.random_range(0.3..0.45);
                        let ch = h * rng.random_range(0.3..0.45);
                        let corner = rng.random_range(0..4);
                        let x0 = if corner % 2 == 0 { rect[0] } else { rect[2] - cw };
                        let y0 = if corner / 2 == 0 { rect[1] } else { rect[3] - ch };
                        Shape::L {
                            rect,
                            cut: [x0, y0, x0 + cw, y0 + ch],
                        }
                    }
                }
            }
            Footprint::Ellipse => {
                let a = rng.random_range(0.33..0.45);
                let b = rng.random_range(0.33..0.45);
                Shape::Ellipse {
                    cx: centre(rng, 2.0 * a),
                    cy: centre(rng, 2.0 * b),
                    a,
                    b,
                }
            }
        }
    }

    fn contains(&self, u: f64, v: f64) -> bool {
        let in_rect = |r: &[f64; 4]| u >= r[0] && u < r[2] && v >= r[1] && v < r[3];
        match *self {
            Shape::Rect { cx, cy, w, h } => (u - cx).abs() < w / 2.0 && (v - cy).abs() < h / 2.0,
            Shape::L { rect, cut } => in_rect(&rect) && !in_rect(&cut),
            Shape::Ellipse { cx, cy, a, b } => {
                let (x, y) = ((u - cx) / a, (v - cy) / b);
                x * x + y * y <= 1.0
            }
            Shape::Rounded { cx, cy, w, h, r } => {
                let dx = ((u - cx).abs() - (w / 2.0 - r)).max(0.0);
                let dy = ((v - cy).abs() - (h / 2.0 - r)).max(0.0);
                (u - cx).abs() < w / 2.0 && (v - cy).abs() < h / 2.0 && dx * dx + dy * dy <= r * r
            }
        }
    }

    fn raster(&self, size: usize) -> FootprintMask {
        let s = size as f64;
        FootprintMask::from_fn(size, size, |y, x| {
            self.contains((x as f64 + 0.5) / s, (y as f64 + 0.5) / s)
        })
    }
}

/// Half-open pixel rectangle on the reference grid.
#[derive(Debug, Clone, Copy)]
struct Cell {
    x0: usize,
    y0: usize,
    x1: usize,
    y1: usize,
}

impl Cell {
    fn area_in(&self, mask: &FootprintMask) -> usize {
        (self.y0..self.y1)
            .flat_map(|y| (self.x0..self.x1).map(move |x| (y, x)))
            .filter(|&(y, x)| mask.get(y, x))
            .count()
    }

    fn contains(&self, u: f64, v: f64) -> bool {
        let r = REFERENCE as f64;
        u * r >= self.x0 as f64 && u * r < self.x1 as f64 && v * r >= self.y0 as f64 && v * r < self.y1 as f64
    }
}

/// Recursive binary partition of the footprint's bounding box until `target`
/// cells overlap the footprint.
fn partition(mask: &FootprintMask, target: usize, rng: &mut ChaCha8Rng) -> Result<Vec<Cell>> {
    let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
    for y in 0..mask.height() {
        for x in 0..mask.width() {
            if mask.get(y, x) {
                x0 = x0.min(x);
                y0 = y0.min(y);
                x1 = x1.max(x + 1);
                y1 = y1.max(y + 1);
            }
        }
    }
    if x1 == 0 {
        return Err(Error::Generation("empty footprint".into()));
    }
    let mut cells = vec![Cell { x0, y0, x1, y1 }];
    let rooms = |cells: &[Cell]| cells.iter().filter(|c| c.area_in(mask) > 0).count();
    while rooms(&cells) < target {
        let mut order: Vec<usize> = (0..cells.len()).collect();
        order.sort_by_key(|&i| std::cmp::Reverse(cells[i].area_in(mask)));
        let mut split = None;
        'search: for i in order {
            let c = cells[i];
            let (w, h) = (c.x1 - c.x0, c.y1 - c.y0);
            let axes = if w >= h { [true, false] } else { [false, true] };
            for vertical in axes {
                let len = if vertical { w } else { h };
                if len < 2 * MIN_SIDE {
                    continue;
                }
                let lo = MIN_SIDE.max((len as f64 * 0.35).round() as usize);
                let hi = (len - MIN_SIDE).min((len as f64 * 0.65).round() as usize);
                let cut = if lo >= hi { lo } else { rng.random_range(lo..=hi) };
                let (a, b) = if vertical {
                    (Cell { x1: c.x0 + cut, ..c }, Cell { x0: c.x0 + cut, ..c })
                } else {
                    (Cell { y1: c.y0 + cut, ..c }, Cell { y0: c.y0 + cut, ..c })
                };
                split = Some((i, a, b));
                break 'search;
            }
        }
        let (i, a, b) = split.ok_or_else(|| {
            Error::Generation(format!(
                "cannot fit {target} rooms in this footprint (reached {})",
                rooms(&cells)
            ))
        })?;
        cells[i] = a;
        cells.push(b);
    }
    cells.retain(|c| c.area_in(mask) > 0);
    Ok(cells)
}

/// 8-neighbour chamfer distance to the nearest pixel outside the mask, with the
/// canvas border counted as outside.
fn inside_distance(mask: &FootprintMask) -> Vec<f64> {
    let (h, w) = (mask.height(), mask.width());
    let big = (h + w) as f64 * 2.0;
    let mut d: Vec<f64> = mask.pixels().iter().map(|&p| if p { big } else { 0.0 }).collect();
    let diag = std::f64::consts::SQRT_2;
    let at = |d: &[f64], y: isize, x: isize| -> f64 {
        if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
            0.0
        } else {
            d[y as usize * w + x as usize]
        }
    };
    for y in 0..h as isize {
        for x in 0..w as isize {
            let i = y as usize * w + x as usize;
            let best = [
                at(&d, y, x - 1) + 1.0,
                at(&d, y - 1, x) + 1.0,
                at(&d, y - 1, x - 1) + diag,
                at(&d, y - 1, x + 1) + diag,
            ]
            .into_iter()
            .fold(d[i], f64::min);
            d[i] = best;
        }
    }
    for y in (0..h as isize).rev() {
        for x in (0..w as isize).rev() {
            let i = y as usize * w + x as usize;
            let best = [
                at(&d, y, x + 1) + 1.0,
                at(&d, y + 1, x) + 1.0,
                at(&d, y + 1, x + 1) + diag,
                at(&d, y + 1, x - 1) + diag,
            ]
            .into_iter()
            .fold(d[i], f64::min);
            d[i] = best;
        }
    }
    d
}

/// Renders one record at `size`×`size`.
pub fn generate_sample(spec: &BuildingSpec, size: usize) -> Result<Sample> {
    spec.validate()?;
    if size < 16 {
        return Err(Error::validation("size", "canvas must be at least 16 pixels"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let shape = Shape::sample(spec.footprint, &mut rng);
    let mask = shape.raster(size);
    let (primary, secondary) = roles(spec.building_type);

    // label per pixel, -1 outside
    let mut labels = vec![-1i32; size * size];
    let label_roles: Vec<RoomRole>;
    let mut lines: Vec<bool> = vec![false; size * size];

    if spec.building_type.is_bowl() {
        let dist = inside_distance(&mask);
        let dmax = dist.iter().cloned().fold(0.0, f64::max).max(1.0);
        let stadium = spec.building_type == BuildingType::FootballStadium;
        label_roles = if stadium {
            vec![
                RoomRole::UpperSeating,
                RoomRole::LowerSeating,
                RoomRole::Grass,
                RoomRole::Pitch,
            ]
        } else {
            vec![RoomRole::Concourse, RoomRole::LowerSeating, RoomRole::Court]
        };
        let s = size as f64;
        // inner field box, in unit coordinates around the footprint centroid
        let (mut cu, mut cv, mut n) = (0.0, 0.0, 0.0);
        for y in 0..size {
            for x in 0..size {
                if mask.get(y, x) {
                    cu += (x as f64 + 0.5) / s;
                    cv += (y as f64 + 0.5) / s;
                    n += 1.0;
                }
            }
        }
        let (cu, cv) = (cu / n, cv / n);
        let mut hw = 0.0f64;
        let mut hh = 0.0f64;
        for y in 0..size {
            for x in 0..size {
                if mask.get(y, x) && dist[y * size + x] / dmax > 0.55 {
                    hw = hw.max(((x as f64 + 0.5) / s - cu).abs());
                    hh = hh.max(((y as f64 + 0.5) / s - cv).abs());
                }
            }
        }
        let (pw, ph) = (hw * 0.8, hh * 0.7);
        for y in 0..size {
            for x in 0..size {
                let i = y * size + x;
                if !mask.get(y, x) {
                    continue;
                }
                let f = dist[i] / dmax;
                let (u, v) = ((x as f64 + 0.5) / s - cu, (y as f64 + 0.5) / s - cv);
                labels[i] = if stadium {
                    if f < 0.3 {
                        0
                    } else if f < 0.55 {
                        1
                    } else if u.abs() < pw && v.abs() < ph {
                        3
                    } else {
                        2
                    }
                } else if f < 0.2 {
                    0
                } else if f < 0.6 {
                    1
                } else {
                    2
                };
                if stadium && labels[i] == 3 {
                    let half_px = 0.5 / s;
                    let ring = ((u * u + v * v).sqrt() - ph * 0.35).abs();
                    lines[i] = u.abs() < half_px || ring < half_px;
                }
            }
        }
    } else {
        let reference = if size == REFERENCE {
            mask.clone()
        } else {
            shape.raster(REFERENCE)
        };
        let (lo, hi) = spec.room_count_range;
        let target = rng.random_range(lo..=hi);
        let mut cells = partition(&reference, target, &mut rng)?;
        // largest cell gets the primary role
        cells.sort_by_key(|c| std::cmp::Reverse(c.area_in(&reference)));
        label_roles = (0..cells.len())
            .map(|i| {
                if i == 0 {
                    primary
                } else {
                    secondary[(i - 1) % secondary.len()]
                }
            })
            .collect();
        let s = size as f64;
        for y in 0..size {
            for x in 0..size {
                if !mask.get(y, x) {
                    continue;
                }
                let (u, v) = ((x as f64 + 0.5) / s, (y as f64 + 0.5) / s);
                let k = cells.iter().position(|c| c.contains(u, v)).unwrap_or(0);
                labels[y * size + x] = k as i32;
            }
        }
    }

    let thickness = (2 * size / REFERENCE).max(2) as isize;
    let half = (thickness / 2).max(1);
    let n = size as isize;
    let label_at = |y: isize, x: isize| -> i32 {
        if y < 0 || x < 0 || y >= n || x >= n {
            -1
        } else {
            labels[(y * n + x) as usize]
        }
    };
    let mut plan = ImageGrid::filled(size, size, 3, 1.0);
    let mut rooms: Vec<Room> = label_roles.iter().map(|&role| Room { role, area: 0 }).collect();
    for y in 0..n {
        for x in 0..n {
            let own = label_at(y, x);
            if own < 0 {
                continue;
            }
            rooms[own as usize].area += 1;
            let mut outer = false;
            for dy in -thickness..=thickness {
                for dx in -thickness..=thickness {
                    if dy.abs().max(dx.abs()) <= thickness && label_at(y + dy, x + dx) < 0 {
                        outer = true;
                    }
                }
            }
            let inner = (1..=half).any(|k| {
                [(0, k), (0, -k), (k, 0), (-k, 0)].iter().any(|&(dy, dx)| {
                    let l = label_at(y + dy, x + dx);
                    l >= 0 && l != own
                })
            });
            let colour = if outer || inner {
                WALL
            } else if lines[(y * n + x) as usize] {
                PITCH_LINE
            } else {
                label_roles[own as usize].tint()
            };
            plan.set_pixel(y as usize, x as usize, &colour);
        }
    }
    Ok(Sample {
        spec: spec.clone(),
        prompt: prompt_from_spec(spec),
        mask,
        plan,
        rooms,
    })
}
