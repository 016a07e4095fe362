//! Word banks for sampled edits and the sentence grammar used by LangMask
//! instructions.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::Serialize;

use crate::types::{ClassLabel, EditAction, GlobalCategory, SceneType, Season, TimeOfDay, Weather};

pub const VEHICLE_COLORS: &[&str] = &["red", "blue", "green", "yellow", "black", "white", "silver", "grey"];

pub const VEHICLE_OBJECTS: &[&str] = &[
    "car",
    "truck",
    "bus",
    "motorcycle with its rider",
    "bicycle with its rider",
    "ambulance",
    "fire truck",
];

pub const CLOTHING_ADJECTIVES: &[&str] = &[
    "red",
    "blue",
    "green",
    "yellow",
    "black",
    "white",
    "casual",
    "formal",
    "businesslike",
    "vibrant",
    "summer",
    "winter",
    "sporty",
];

pub const CLOTHING_ARTICLES: &[&str] = &[
    "shirt", "jacket", "coat", "sneakers", "boots", "hat", "dress", "skirt", "trousers", "pants", "clothes",
];

pub const AGES: &[&str] = &["young", "middle-aged", "elderly"];

pub const TRAFFIC_LIGHT_COLORS: &[&str] = &["green", "red", "yellow"];

const PLURAL_ARTICLES: &[&str] = &["sneakers", "boots", "trousers", "pants", "clothes"];

/// Prefix prepended to compound-edit global prompts.
pub const REMOVE_ALL_TRAFFIC: &str = "remove all pedestrians and all vehicles from the scene";

/// Serializable snapshot of every bank, served to UIs.
#[derive(Clone, Debug, Serialize)]
pub struct AttributeBanks {
    pub weather: Vec<&'static str>,
    pub time_of_day: Vec<&'static str>,
    pub season: Vec<&'static str>,
    pub scene_type: Vec<&'static str>,
    pub vehicle_colors: &'static [&'static str],
    pub vehicle_objects: &'static [&'static str],
    pub clothing_adjectives: &'static [&'static str],
    pub clothing_articles: &'static [&'static str],
    pub ages: &'static [&'static str],
    pub traffic_light_colors: &'static [&'static str],
    pub actions: Vec<&'static str>,
}

impl Default for AttributeBanks {
    fn default() -> Self {
        Self {
            weather: Weather::names(),
            time_of_day: TimeOfDay::names(),
            season: Season::names(),
            scene_type: SceneType::names(),
            vehicle_colors: VEHICLE_COLORS,
            vehicle_objects: VEHICLE_OBJECTS,
            clothing_adjectives: CLOTHING_ADJECTIVES,
            clothing_articles: CLOTHING_ARTICLES,
            ages: AGES,
            traffic_light_colors: TRAFFIC_LIGHT_COLORS,
            actions: EditAction::ALL.iter().map(|a| a.as_str()).collect(),
        }
    }
}

pub fn with_article(noun_phrase: &str) -> String {
    let first = noun_phrase.trim_start().chars().next().unwrap_or('x');
    let article = if "aeiouAEIOU".contains(first) { "an" } else { "a" };
    format!("{article} {noun_phrase}")
}

/// "a red jacket", "red sneakers".
pub fn clothing_phrase(adjective: &str, article: &str) -> String {
    let phrase = format!("{adjective} {article}");
    if PLURAL_ARTICLES.contains(&article) {
        phrase
    } else {
        with_article(&phrase)
    }
}

/// Builds the simple sentence for one object edit.
///
/// `subject` names the existing object ("car", "white car"); `target` is the
/// sampled or user-given description. Pedestrian modifications change only
/// the clothing, so their target is a clothing phrase.
pub fn edit_sentence(action: EditAction, subject_class: ClassLabel, subject: &str, target: Option<&str>) -> String {
    let target = target.unwrap_or_default().trim();
    match action {
        EditAction::Insert => format!("insert {}", with_article(target)),
        EditAction::Delete => format!("delete the {subject}"),
        EditAction::Modify if subject_class.is_pedestrian() => {
            format!("change the {subject} to wearing {target}")
        }
        EditAction::Modify => format!("change the {subject} to {target}"),
        EditAction::Replace => format!("replace the {subject} with {}", with_article(target)),
    }
}

pub fn global_sentence(category: GlobalCategory, to_value: &str) -> String {
    format!("adjust the {} to {}", category.phrase(), to_value.to_ascii_lowercase())
}

fn pick<'a, R: Rng + ?Sized>(rng: &mut R, bank: &[&'a str], exclude: Option<&str>) -> &'a str {
    let pool: Vec<&str> = bank
        .iter()
        .copied()
        .filter(|v| exclude.is_none_or(|e| !v.eq_ignore_ascii_case(e)))
        .collect();
    let pool = if pool.is_empty() { bank.to_vec() } else { pool };
    pool.choose(rng).copied().expect("banks are non-empty")
}

pub fn sample_vehicle_color<R: Rng + ?Sized>(rng: &mut R, exclude: Option<&str>) -> String {
    pick(rng, VEHICLE_COLORS, exclude).to_string()
}

/// Color plus object, e.g. "blue truck".
pub fn sample_vehicle_target<R: Rng + ?Sized>(rng: &mut R) -> String {
    let color = pick(rng, VEHICLE_COLORS, None);
    let object = pick(rng, VEHICLE_OBJECTS, None);
    format!("{color} {object}")
}

pub fn sample_clothing<R: Rng + ?Sized>(rng: &mut R) -> String {
    let adjective = pick(rng, CLOTHING_ADJECTIVES, None);
    let article = pick(rng, CLOTHING_ARTICLES, None);
    clothing_phrase(adjective, article)
}

/// Age plus clothing, e.g. "young person wearing a red jacket".
pub fn sample_pedestrian_target<R: Rng + ?Sized>(rng: &mut R) -> String {
    let age = pick(rng, AGES, None);
    format!("{age} person wearing {}", sample_clothing(rng))
}

pub fn sample_light_color<R: Rng + ?Sized>(rng: &mut R, exclude: Option<&str>) -> String {
    pick(rng, TRAFFIC_LIGHT_COLORS, exclude).to_string()
}

/// Every bank word, lower-cased, for membership checks.
pub fn is_bank_color(word: &str) -> bool {
    VEHICLE_COLORS.contains(&word) || TRAFFIC_LIGHT_COLORS.contains(&word)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn sentences_follow_the_grammar() {
        let s = edit_sentence(EditAction::Replace, ClassLabel::Car, "car", Some("blue truck"));
        assert_eq!(s, "replace the car with a blue truck");
        let s = edit_sentence(EditAction::Modify, ClassLabel::Car, "car", Some("green"));
        assert_eq!(s, "change the car to green");
        let s = edit_sentence(EditAction::Insert, ClassLabel::Person, "", Some("middle-aged person"));
        assert_eq!(s, "insert a middle-aged person");
        let s = edit_sentence(EditAction::Insert, ClassLabel::Person, "", Some("elderly person"));
        assert_eq!(s, "insert an elderly person");
        assert_eq!(
            edit_sentence(EditAction::Delete, ClassLabel::Bus, "bus", None),
            "delete the bus"
        );
    }

    #[test]
    fn clothing_articles() {
        assert_eq!(clothing_phrase("red", "jacket"), "a red jacket");
        assert_eq!(clothing_phrase("sporty", "sneakers"), "sporty sneakers");
    }

    #[test]
    fn sampling_respects_banks_and_exclusion() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let c = sample_light_color(&mut rng, Some("red"));
            assert!(c == "green" || c == "yellow");
            let v = sample_vehicle_target(&mut rng);
            assert!(VEHICLE_COLORS.iter().any(|c| v.starts_with(c)));
            assert!(VEHICLE_OBJECTS.iter().any(|o| v.ends_with(o)));
        }
    }
}
