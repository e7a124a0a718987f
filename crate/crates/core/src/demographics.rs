//! Demographic attributes shared by every stage of an audit.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Gender {
    Male,
    Female,
    Neutral,
}

impl Gender {
    pub const ALL: [Gender; 3] = [Gender::Male, Gender::Female, Gender::Neutral];

    pub fn as_str(self) -> &'static str {
        match self {
            Gender::Male => "Male",
            Gender::Female => "Female",
            Gender::Neutral => "Neutral",
        }
    }
}

impl fmt::Display for Gender {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Gender {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "male" | "m" => Ok(Gender::Male),
            "female" | "f" => Ok(Gender::Female),
            "neutral" | "n" => Ok(Gender::Neutral),
            other => Err(format!("unknown gender `{other}`")),
        }
    }
}

/// Ethnicities injected into counterfactual variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Ethnicity {
    Arab,
    Asian,
    Black,
    Hispanic,
    White,
}

impl Ethnicity {
    pub const ALL: [Ethnicity; 5] = [
        Ethnicity::Arab,
        Ethnicity::Asian,
        Ethnicity::Black,
        Ethnicity::Hispanic,
        Ethnicity::White,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Ethnicity::Arab => "Arab",
            Ethnicity::Asian => "Asian",
            Ethnicity::Black => "Black",
            Ethnicity::Hispanic => "Hispanic",
            Ethnicity::White => "White",
        }
    }
}

impl fmt::Display for Ethnicity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Ethnicity {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "arab" => Ok(Ethnicity::Arab),
            "asian" => Ok(Ethnicity::Asian),
            "black" => Ok(Ethnicity::Black),
            "hispanic" => Ok(Ethnicity::Hispanic),
            "white" => Ok(Ethnicity::White),
            other => Err(format!("unknown ethnicity `{other}`")),
        }
    }
}

/// Parses an optional ethnicity where `None`/`none`/empty means "no ethnicity".
pub fn parse_optional_ethnicity(s: &str) -> Result<Option<Ethnicity>, String> {
    match s.trim().to_ascii_lowercase().as_str() {
        "" | "none" | "no ethnicity" | "original" => Ok(None),
        other => other.parse().map(Some),
    }
}

pub fn optional_ethnicity_str(e: Option<Ethnicity>) -> &'static str {
    e.map_or("None", Ethnicity::as_str)
}

/// Answer option label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Label {
    A,
    B,
    C,
    D,
}

impl Label {
    pub const ALL: [Label; 4] = [Label::A, Label::B, Label::C, Label::D];

    pub fn from_index(i: usize) -> Option<Label> {
        Label::ALL.get(i).copied()
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_char(c: char) -> Option<Label> {
        match c {
            'A' => Some(Label::A),
            'B' => Some(Label::B),
            'C' => Some(Label::C),
            'D' => Some(Label::D),
            _ => None,
        }
    }

    pub fn as_char(self) -> char {
        (b'A' + self as u8) as char
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.as_char())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum GenderKey {
    Is(Gender),
    Any,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum EthnicityKey {
    Is(Ethnicity),
    NoEthnicity,
    Any,
}

impl EthnicityKey {
    pub fn of(e: Option<Ethnicity>) -> Self {
        e.map_or(EthnicityKey::NoEthnicity, EthnicityKey::Is)
    }
}

/// Aggregation cell. `Any` is a wildcard used only when matching records.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct GroupKey {
    pub gender: GenderKey,
    pub ethnicity: EthnicityKey,
}

impl GroupKey {
    pub const ANY: GroupKey = GroupKey {
        gender: GenderKey::Any,
        ethnicity: EthnicityKey::Any,
    };

    pub fn exact(gender: Gender, ethnicity: Option<Ethnicity>) -> Self {
        GroupKey {
            gender: GenderKey::Is(gender),
            ethnicity: EthnicityKey::of(ethnicity),
        }
    }

    pub fn gender(gender: Gender) -> Self {
        GroupKey {
            gender: GenderKey::Is(gender),
            ethnicity: EthnicityKey::Any,
        }
    }

    pub fn ethnicity(ethnicity: Option<Ethnicity>) -> Self {
        GroupKey {
            gender: GenderKey::Any,
            ethnicity: EthnicityKey::of(ethnicity),
        }
    }

    pub fn matches(&self, gender: Gender, ethnicity: Option<Ethnicity>) -> bool {
        let g = match self.gender {
            GenderKey::Any => true,
            GenderKey::Is(want) => want == gender,
        };
        let e = match self.ethnicity {
            EthnicityKey::Any => true,
            EthnicityKey::NoEthnicity => ethnicity.is_none(),
            EthnicityKey::Is(want) => ethnicity == Some(want),
        };
        g && e
    }

    /// True when `other` matches at least every record this key matches.
    pub fn is_covered_by(&self, other: &GroupKey) -> bool {
        let g = other.gender == GenderKey::Any || other.gender == self.gender;
        let e = other.ethnicity == EthnicityKey::Any || other.ethnicity == self.ethnicity;
        g && e
    }
}

impl fmt::Display for GroupKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let g = match self.gender {
            GenderKey::Is(g) => g.as_str(),
            GenderKey::Any => "Any",
        };
        let e = match self.ethnicity {
            EthnicityKey::Is(e) => e.as_str(),
            EthnicityKey::NoEthnicity => "None",
            EthnicityKey::Any => "Any",
        };
        write!(f, "{g}/{e}")
    }
}

impl FromStr for GroupKey {
    type Err = String;

    /// Accepts `Male/Black`, `Any/None`, or a single gender (`Male`) or
    /// ethnicity (`Black`, `None`) with the other half defaulting to `Any`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let gender_key = |t: &str| -> Result<GenderKey, String> {
            if t.eq_ignore_ascii_case("any") || t == "*" {
                Ok(GenderKey::Any)
            } else {
                t.parse().map(GenderKey::Is)
            }
        };
        let ethnicity_key = |t: &str| -> Result<EthnicityKey, String> {
            if t.eq_ignore_ascii_case("any") || t == "*" {
                Ok(EthnicityKey::Any)
            } else {
                parse_optional_ethnicity(t).map(EthnicityKey::of)
            }
        };
        match s.split_once('/') {
            Some((g, e)) => Ok(GroupKey {
                gender: gender_key(g.trim())?,
                ethnicity: ethnicity_key(e.trim())?,
            }),
            None => {
                let t = s.trim();
                if let Ok(g) = gender_key(t) {
                    Ok(GroupKey {
                        gender: g,
                        ethnicity: EthnicityKey::Any,
                    })
                } else if let Ok(e) = ethnicity_key(t) {
                    Ok(GroupKey {
                        gender: GenderKey::Any,
                        ethnicity: e,
                    })
                } else {
                    Err(format!("unrecognised group `{t}`"))
                }
            }
        }
    }
}

impl Serialize for GroupKey {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for GroupKey {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

impl fmt::Display for BiasAttribute {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for BiasAttribute {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "gender" => Ok(BiasAttribute::Gender),
            "ethnicity" => Ok(BiasAttribute::Ethnicity),
            other => Err(format!("unknown bias attribute `{other}`")),
        }
    }
}

/// Which demographic attribute an analysis slices on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BiasAttribute {
    Gender,
    Ethnicity,
}

impl BiasAttribute {
    pub fn as_str(self) -> &'static str {
        match self {
            BiasAttribute::Gender => "gender",
            BiasAttribute::Ethnicity => "ethnicity",
        }
    }

    /// The groups an attribute is sliced into, reference group last.
    pub fn groups(self) -> Vec<GroupKey> {
        match self {
            BiasAttribute::Gender => Gender::ALL.into_iter().map(GroupKey::gender).collect(),
            BiasAttribute::Ethnicity => Ethnicity::ALL
                .into_iter()
                .map(|e| GroupKey::ethnicity(Some(e)))
                .chain([GroupKey::ethnicity(None)])
                .collect(),
        }
    }

    pub fn key_of(self, gender: Gender, ethnicity: Option<Ethnicity>) -> GroupKey {
        match self {
            BiasAttribute::Gender => GroupKey::gender(gender),
            BiasAttribute::Ethnicity => GroupKey::ethnicity(ethnicity),
        }
    }

    /// Neutral for gender, no-ethnicity for ethnicity.
    pub fn reference(self) -> GroupKey {
        match self {
            BiasAttribute::Gender => GroupKey::gender(Gender::Neutral),
            BiasAttribute::Ethnicity => GroupKey::ethnicity(None),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn group_key_round_trips_through_strings() {
        for key in [
            GroupKey::exact(Gender::Male, Some(Ethnicity::Black)),
            GroupKey::gender(Gender::Neutral),
            GroupKey::ethnicity(None),
            GroupKey::ANY,
        ] {
            let s = key.to_string();
            assert_eq!(s.parse::<GroupKey>().unwrap(), key, "{s}");
        }
    }

    #[test]
    fn shorthand_keys() {
        assert_eq!("Male".parse::<GroupKey>().unwrap(), GroupKey::gender(Gender::Male));
        assert_eq!(
            "Hispanic".parse::<GroupKey>().unwrap(),
            GroupKey::ethnicity(Some(Ethnicity::Hispanic))
        );
        assert_eq!("None".parse::<GroupKey>().unwrap(), GroupKey::ethnicity(None));
        assert!("Martian".parse::<GroupKey>().is_err());
    }

    #[test]
    fn wildcard_matching() {
        let k = GroupKey::gender(Gender::Female);
        assert!(k.matches(Gender::Female, Some(Ethnicity::Asian)));
        assert!(k.matches(Gender::Female, None));
        assert!(!k.matches(Gender::Male, None));
        let none = GroupKey::ethnicity(None);
        assert!(none.matches(Gender::Male, None));
        assert!(!none.matches(Gender::Male, Some(Ethnicity::White)));
    }

    #[test]
    fn labels() {
        assert_eq!(Label::from_index(1), Some(Label::B));
        assert_eq!(Label::D.index(), 3);
        assert_eq!(Label::from_char('C'), Some(Label::C));
        assert_eq!(Label::from_char('E'), None);
        assert_eq!(Label::A.to_string(), "A");
    }
}
