//! Small built-in part-of-speech lexicon for the shallow caption parser.

use std::collections::HashMap;
use std::sync::OnceLock;

/// Nouns accepted as triplet subjects.
pub const PERSON_NOUNS: &[&str] = &[
    "man", "men", "woman", "women", "person", "persons", "people", "boy", "boys", "girl",
    "girls", "child", "children", "kid", "kids", "guy", "guys", "lady", "ladies", "player",
    "players", "baby", "babies", "toddler", "teenager", "adult", "adults", "male", "female",
    "gentleman", "gentlemen", "couple", "crowd", "family", "worker", "workers", "officer",
    "chef", "student", "students", "skier", "snowboarder", "surfer", "rider", "athlete",
    "dancer", "singer", "driver", "farmer", "fisherman", "biker", "cyclist", "climber",
    "skateboarder", "swimmer", "runner", "golfer", "pitcher", "batter", "catcher", "guard",
];

/// Base forms of the verbs the parser recognizes.
pub const VERB_LEMMAS: &[&str] = &[
    "hold", "drive", "ride", "eat", "drink", "play", "run", "walk", "sit", "stand", "jump",
    "throw", "catch", "kick", "carry", "wear", "cut", "read", "watch", "look", "wash", "open",
    "close", "push", "pull", "climb", "swim", "fly", "cook", "feed", "pet", "brush", "hit",
    "swing", "skate", "ski", "surf", "race", "chase", "hug", "kiss", "lift", "point", "teach",
    "buy", "sell", "serve", "clean", "fix", "repair", "paint", "draw", "write", "type", "use",
    "make", "build", "grab", "pick", "tie", "untie", "wave", "board", "exit", "enter", "pour",
    "sip", "bite", "lick", "blow", "light", "herd", "milk", "hose", "hop", "straddle", "pack",
    "peel", "sign", "stir", "toast", "train", "greet", "inspect", "launch", "load", "operate",
    "park", "pay", "row", "sail", "scratch", "slide", "smell", "spin", "squeeze", "stab",
    "steer", "direct", "flip", "flush", "install", "adjust", "assemble", "check", "zip",
];

/// Articles, possessives and quantifiers skipped inside noun phrases.
pub const DETERMINERS: &[&str] = &[
    "a", "an", "the", "this", "that", "these", "those", "his", "her", "their", "its", "our",
    "my", "your", "some", "two", "three", "four", "five", "several", "many", "few", "each",
    "every", "one", "another", "other", "both", "small", "big", "large", "little", "young",
    "old", "red", "blue", "green", "yellow", "black", "white", "brown", "tall", "short",
];

/// Auxiliaries allowed between the subject and its verb
/// ("a man is driving a car").
pub const AUXILIARIES: &[&str] = &["is", "are", "was", "were", "be", "been", "being", "am"];

/// Prepositions skipped between the verb and its object
/// ("a man sits on a chair").
pub const PREPOSITIONS: &[&str] = &[
    "on", "in", "at", "with", "into", "onto", "over", "under", "through", "across", "along",
    "around", "behind", "beside", "near", "by", "to", "from", "of", "off", "up", "down",
    "against", "toward", "towards", "inside", "outside", "atop",
];

/// Inflected verb form -> lemma. Built once; covers -s/-es, -ing, -ed plus a
/// handful of irregular pasts/participles.
pub fn verb_forms() -> &'static HashMap<String, &'static str> {
    static FORMS: OnceLock<HashMap<String, &'static str>> = OnceLock::new();
    FORMS.get_or_init(|| {
        let mut map = HashMap::new();
        for &lemma in VERB_LEMMAS {
            for form in inflect(lemma) {
                map.entry(form).or_insert(lemma);
            }
        }
        for (form, lemma) in IRREGULAR {
            map.insert((*form).to_string(), *lemma);
        }
        map
    })
}

const IRREGULAR: &[(&str, &str)] = &[
    ("ran", "run"),
    ("sat", "sit"),
    ("stood", "stand"),
    ("ate", "eat"),
    ("eaten", "eat"),
    ("held", "hold"),
    ("rode", "ride"),
    ("ridden", "ride"),
    ("drove", "drive"),
    ("driven", "drive"),
    ("threw", "throw"),
    ("thrown", "throw"),
    ("caught", "catch"),
    ("wore", "wear"),
    ("worn", "wear"),
    ("swam", "swim"),
    ("swum", "swim"),
    ("flew", "fly"),
    ("flown", "fly"),
    ("drank", "drink"),
    ("drunk", "drink"),
    ("drew", "draw"),
    ("drawn", "draw"),
    ("wrote", "write"),
    ("written", "write"),
    ("made", "make"),
    ("built", "build"),
    ("bought", "buy"),
    ("sold", "sell"),
    ("taught", "teach"),
    ("lit", "light"),
    ("paid", "pay"),
    ("slid", "slide"),
];

fn is_vowel(c: char) -> bool {
    matches!(c, 'a' | 'e' | 'i' | 'o' | 'u')
}

/// Final-unstressed lemmas that do not double despite ending
/// consonant-vowel-consonant.
const NO_DOUBLE: &[&str] = &["open", "enter", "exit", "offer", "listen", "order", "cover"];

fn doubles_final(lemma: &str) -> bool {
    // consonant-vowel-consonant ending, final letter not w/x/y.
    if NO_DOUBLE.contains(&lemma) {
        return false;
    }
    let chars: Vec<char> = lemma.chars().collect();
    if chars.len() < 3 {
        return false;
    }
    let [a, b, c] = [chars[chars.len() - 3], chars[chars.len() - 2], chars[chars.len() - 1]];
    !is_vowel(a) && is_vowel(b) && !is_vowel(c) && !matches!(c, 'w' | 'x' | 'y')
}

fn inflect(lemma: &str) -> Vec<String> {
    let mut forms = vec![lemma.to_string()];

    // third person singular
    let third = if lemma.ends_with('s')
        || lemma.ends_with("sh")
        || lemma.ends_with("ch")
        || lemma.ends_with('x')
        || lemma.ends_with('o')
    {
        format!("{lemma}es")
    } else if lemma.ends_with('y') && !is_vowel(lemma.chars().rev().nth(1).unwrap_or('a')) {
        format!("{}ies", &lemma[..lemma.len() - 1])
    } else {
        format!("{lemma}s")
    };
    forms.push(third);

    // progressive
    let ing = if lemma.ends_with("ie") {
        format!("{}ying", &lemma[..lemma.len() - 2])
    } else if lemma.ends_with('e') && !lemma.ends_with("ee") {
        format!("{}ing", &lemma[..lemma.len() - 1])
    } else if doubles_final(lemma) {
        let last = lemma.chars().last().unwrap();
        format!("{lemma}{last}ing")
    } else {
        format!("{lemma}ing")
    };
    forms.push(ing);

    // simple past / participle (regular)
    let ed = if lemma.ends_with('e') {
        format!("{lemma}d")
    } else if lemma.ends_with('y') && !is_vowel(lemma.chars().rev().nth(1).unwrap_or('a')) {
        format!("{}ied", &lemma[..lemma.len() - 1])
    } else if doubles_final(lemma) {
        let last = lemma.chars().last().unwrap();
        format!("{lemma}{last}ed")
    } else {
        format!("{lemma}ed")
    };
    forms.push(ed);

    forms
}

pub fn is_person(token: &str) -> bool {
    PERSON_NOUNS.contains(&token)
}

pub fn verb_lemma(token: &str) -> Option<&'static str> {
    verb_forms().get(token).copied()
}

pub fn is_determiner(token: &str) -> bool {
    DETERMINERS.contains(&token)
}

pub fn is_auxiliary(token: &str) -> bool {
    AUXILIARIES.contains(&token)
}

pub fn is_preposition(token: &str) -> bool {
    PREPOSITIONS.contains(&token)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn inflections_map_back_to_lemmas() {
        for (form, lemma) in [
            ("drives", "drive"),
            ("driving", "drive"),
            ("rides", "ride"),
            ("riding", "ride"),
            ("running", "run"),
            ("sitting", "sit"),
            ("carries", "carry"),
            ("carried", "carry"),
            ("watches", "watch"),
            ("played", "play"),
            ("ate", "eat"),
            ("held", "hold"),
            ("opening", "open"),
            ("entering", "enter"),
            ("exiting", "exit"),
            ("stirring", "stir"),
            ("hopping", "hop"),
        ] {
            assert_eq!(verb_lemma(form), Some(lemma), "form {form}");
        }
        assert_eq!(verb_lemma("road"), None);
        assert_eq!(verb_lemma("on"), None);
    }

    #[test]
    fn person_lexicon_covers_spec_subjects() {
        for p in ["man", "woman", "person", "boy", "girl", "people", "player"] {
            assert!(is_person(p));
        }
        assert!(!is_person("car"));
    }
}
