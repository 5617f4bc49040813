//! Raw behavior-log types shared by the embedding layer, the data files and the
//! serving protocol.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::Error;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BehaviorType {
    Click,
    Bookmark,
    Cart,
    Purchase,
}

impl BehaviorType {
    pub const ALL: [BehaviorType; 4] = [Self::Click, Self::Bookmark, Self::Cart, Self::Purchase];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn label(self) -> &'static str {
        match self {
            Self::Click => "click",
            Self::Bookmark => "bookmark",
            Self::Cart => "cart",
            Self::Purchase => "purchase",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scenario {
    Search,
    Recommend,
    Advert,
}

impl Scenario {
    pub const ALL: [Scenario; 3] = [Self::Search, Self::Recommend, Self::Advert];

    pub fn index(self) -> usize {
        self as usize
    }
}

/// Gap between the behavior and "now".
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Gap {
    Min5,
    Hour1,
    Hour6,
    Day1,
    Day3,
    Day7,
    Day14,
    Older,
}

impl Gap {
    pub const ALL: [Gap; 8] = [
        Self::Min5,
        Self::Hour1,
        Self::Hour6,
        Self::Day1,
        Self::Day3,
        Self::Day7,
        Self::Day14,
        Self::Older,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Self::Min5 => "5m",
            Self::Hour1 => "1h",
            Self::Hour6 => "6h",
            Self::Day1 => "1d",
            Self::Day3 => "3d",
            Self::Day7 => "7d",
            Self::Day14 => "14d",
            Self::Older => "old",
        }
    }
}

/// Gap-to-now bucket crossed with weekday/weekend and morning/evening.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct TimeBucket {
    pub gap: Gap,
    pub weekend: bool,
    pub evening: bool,
}

impl TimeBucket {
    pub const COUNT: usize = 32;

    pub fn index(self) -> usize {
        self.gap as usize * 4 + usize::from(self.weekend) * 2 + usize::from(self.evening)
    }

    pub fn from_index(i: usize) -> Option<Self> {
        (i < Self::COUNT).then(|| TimeBucket {
            gap: Gap::ALL[i / 4],
            weekend: (i / 2) % 2 == 1,
            evening: i % 2 == 1,
        })
    }

    pub fn all() -> impl Iterator<Item = TimeBucket> {
        (0..Self::COUNT).filter_map(Self::from_index)
    }
}

impl fmt::Display for TimeBucket {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}-{}-{}",
            self.gap.label(),
            if self.weekend { "weekend" } else { "workday" },
            if self.evening { "evening" } else { "morning" }
        )
    }
}

impl FromStr for TimeBucket {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        let bad = || Error::Data(format!("unknown time bucket {s:?}"));
        let mut parts = s.split('-');
        let gap = parts.next().ok_or_else(bad)?;
        let gap = *Gap::ALL.iter().find(|g| g.label() == gap).ok_or_else(bad)?;
        let weekend = match parts.next() {
            Some("workday") => false,
            Some("weekend") => true,
            _ => return Err(bad()),
        };
        let evening = match parts.next() {
            Some("morning") => false,
            Some("evening") => true,
            _ => return Err(bad()),
        };
        if parts.next().is_some() {
            return Err(bad());
        }
        Ok(TimeBucket { gap, weekend, evening })
    }
}

impl Serialize for TimeBucket {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for TimeBucket {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Item side of a behavior; also the shape of a candidate item.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ItemFeatures {
    pub item: String,
    pub shop: String,
    pub brand: String,
    pub cat: String,
    #[serde(default)]
    pub tags: Vec<String>,
}

/// One user-item interaction: item features plus the behavior property.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BehaviorRecord {
    pub item: String,
    pub shop: String,
    pub brand: String,
    pub cat: String,
    #[serde(default)]
    pub tags: Vec<String>,
    pub btype: BehaviorType,
    pub scen: Scenario,
    pub tbucket: TimeBucket,
}

impl BehaviorRecord {
    pub fn new(item: &ItemFeatures, btype: BehaviorType, scen: Scenario, tbucket: TimeBucket) -> Self {
        BehaviorRecord {
            item: item.item.clone(),
            shop: item.shop.clone(),
            brand: item.brand.clone(),
            cat: item.cat.clone(),
            tags: item.tags.clone(),
            btype,
            scen,
            tbucket,
        }
    }

    pub fn item_features(&self) -> ItemFeatures {
        ItemFeatures {
            item: self.item.clone(),
            shop: self.shop.clone(),
            brand: self.brand.clone(),
            cat: self.cat.clone(),
            tags: self.tags.clone(),
        }
    }
}

/// Categorical profile fields; absent fields read as [`UserProfile::UNKNOWN`].
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct UserProfile(pub BTreeMap<String, String>);

impl UserProfile {
    pub const UNKNOWN: &'static str = "unknown";

    pub fn get(&self, field: &str) -> &str {
        self.0.get(field).map(String::as_str).unwrap_or(Self::UNKNOWN)
    }

    pub fn with(mut self, field: &str, value: &str) -> Self {
        self.0.insert(field.to_string(), value.to_string());
        self
    }
}

/// Query tokens plus the profile; tokens may be empty.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct QueryContext {
    pub query_tokens: Vec<String>,
    pub profile: UserProfile,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn time_bucket_text_round_trip() {
        for tb in TimeBucket::all() {
            let s = tb.to_string();
            assert_eq!(s.parse::<TimeBucket>().unwrap(), tb);
            assert_eq!(TimeBucket::from_index(tb.index()), Some(tb));
        }
        assert!("2h-workday-morning".parse::<TimeBucket>().is_err());
        assert!("5m-workday".parse::<TimeBucket>().is_err());
    }

    #[test]
    fn behavior_json_field_order() {
        let item = ItemFeatures {
            item: "i1".into(),
            shop: "s1".into(),
            brand: "b1".into(),
            cat: "c1".into(),
            tags: vec!["t".into()],
        };
        let tb = TimeBucket {
            gap: Gap::Hour1,
            weekend: true,
            evening: false,
        };
        let rec = BehaviorRecord::new(&item, BehaviorType::Cart, Scenario::Search, tb);
        let json = serde_json::to_string(&rec).unwrap();
        assert_eq!(
            json,
            r#"{"item":"i1","shop":"s1","brand":"b1","cat":"c1","tags":["t"],"btype":"cart","scen":"search","tbucket":"1h-weekend-morning"}"#
        );
    }

    #[test]
    fn missing_profile_field_is_unknown() {
        let p = UserProfile::default().with("age", "25-30");
        assert_eq!(p.get("age"), "25-30");
        assert_eq!(p.get("gender"), UserProfile::UNKNOWN);
    }
}
