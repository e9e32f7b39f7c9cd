use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BuildingType {
    Studio,
    OneBedroomApartment,
    TwoBedroomApartment,
    OfficeOneCore,
    Library,
    Auditorium,
    FootballStadium,
    Arena,
}

impl BuildingType {
    pub const ALL: [BuildingType; 8] = [
        BuildingType::Studio,
        BuildingType::OneBedroomApartment,
        BuildingType::TwoBedroomApartment,
        BuildingType::OfficeOneCore,
        BuildingType::Library,
        BuildingType::Auditorium,
        BuildingType::FootballStadium,
        BuildingType::Arena,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            BuildingType::Studio => "studio",
            BuildingType::OneBedroomApartment => "one_bedroom_apartment",
            BuildingType::TwoBedroomApartment => "two_bedroom_apartment",
            BuildingType::OfficeOneCore => "office_one_core",
            BuildingType::Library => "library",
            BuildingType::Auditorium => "auditorium",
            BuildingType::FootballStadium => "football_stadium",
            BuildingType::Arena => "arena",
        }
    }

    /// Words used in the generated brief.
    pub fn phrase(self) -> &'static str {
        match self {
            BuildingType::Studio => "studio apartment",
            BuildingType::OneBedroomApartment => "one bedroom apartment",
            BuildingType::TwoBedroomApartment => "two bedroom apartment",
            BuildingType::OfficeOneCore => "office with one core",
            BuildingType::Library => "library",
            BuildingType::Auditorium => "auditorium",
            BuildingType::FootballStadium => "football stadium",
            BuildingType::Arena => "arena",
        }
    }

    /// Inclusive room-count range used when sampling a spec.
    pub fn default_rooms(self) -> (usize, usize) {
        match self {
            BuildingType::Studio => (2, 3),
            BuildingType::OneBedroomApartment => (3, 4),
            BuildingType::TwoBedroomApartment => (4, 6),
            BuildingType::OfficeOneCore => (4, 7),
            BuildingType::Library => (3, 6),
            BuildingType::Auditorium => (3, 5),
            BuildingType::FootballStadium => (4, 4),
            BuildingType::Arena => (3, 3),
        }
    }

    /// Seating bowls are drawn as concentric bands rather than partitioned rooms.
    pub fn is_bowl(self) -> bool {
        matches!(self, BuildingType::FootballStadium | BuildingType::Arena)
    }

    fn footprints(self) -> &'static [Footprint] {
        use Footprint::*;
        match self {
            BuildingType::FootballStadium => &[Ellipse],
            BuildingType::Arena => &[Ellipse, RoundedRect],
            BuildingType::Auditorium => &[Rectangle, RoundedRect, LShape],
            _ => &[Rectangle, LShape, Ellipse, RoundedRect],
        }
    }
}

impl fmt::Display for BuildingType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for BuildingType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        BuildingType::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| Error::validation("building_type", format!("unknown type {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Footprint {
    Rectangle,
    LShape,
    Ellipse,
    RoundedRect,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BuildingSpec {
    pub building_type: BuildingType,
    pub footprint: Footprint,
    /// Inclusive bounds on the number of rooms.
    pub room_count_range: (usize, usize),
    pub seed: u64,
}

impl BuildingSpec {
    pub fn new(building_type: BuildingType, footprint: Footprint, seed: u64) -> Self {
        Self {
            building_type,
            footprint,
            room_count_range: building_type.default_rooms(),
            seed,
        }
    }

    /// Picks a footprint suited to the type from `seed`.
    pub fn sample(building_type: BuildingType, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xf007_9417);
        let options = building_type.footprints();
        let footprint = options[rng.random_range(0..options.len())];
        Self::new(building_type, footprint, seed)
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.room_count_range;
        if lo == 0 || lo > hi {
            return Err(Error::validation(
                "room_count_range",
                format!("({lo}, {hi}) is not a valid inclusive range"),
            ));
        }
        Ok(())
    }
}

/// `a floorplan for a {phrase}`, with the stadium wording and the article
/// adjusted to the phrase.
pub fn prompt_from_spec(spec: &BuildingSpec) -> String {
    let phrase = spec.building_type.phrase();
    if spec.building_type == BuildingType::FootballStadium {
        return format!("a floor plan for a {phrase}");
    }
    let article = match spec.building_type {
        BuildingType::OfficeOneCore | BuildingType::Auditorium | BuildingType::Arena => "an",
        _ => "a",
    };
    format!("a floorplan for {article} {phrase}")
}
