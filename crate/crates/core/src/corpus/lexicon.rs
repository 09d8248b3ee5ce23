//! Closed word lists shared by the generator and the edit typer.

pub const DETERMINERS: &[&str] = &[
    "the", "a", "an", "this", "that", "these", "those", "every", "some", "many", "two", "my",
];

pub const SINGULAR_DETS: &[&str] = &["the", "a", "this", "that", "every", "my"];
pub const PLURAL_DETS: &[&str] = &["the", "these", "those", "some", "many", "two", "my"];

pub const PREPOSITIONS: &[&str] = &[
    "in", "on", "at", "to", "from", "with", "near", "under", "for", "of", "into", "by",
];

pub const PUNCTUATION: &[&str] = &[",", ".", "!", "?", ";", ":"];

pub const CONJUNCTIONS: &[&str] = &["but", "and", "so"];

/// (singular, plural)
pub const NOUNS: &[(&str, &str)] = &[
    ("cat", "cats"),
    ("dog", "dogs"),
    ("teacher", "teachers"),
    ("student", "students"),
    ("child", "children"),
    ("bird", "birds"),
    ("farmer", "farmers"),
    ("doctor", "doctors"),
    ("girl", "girls"),
    ("boy", "boys"),
    ("friend", "friends"),
    ("book", "books"),
    ("apple", "apples"),
    ("letter", "letters"),
    ("ball", "balls"),
    ("car", "cars"),
    ("box", "boxes"),
    ("person", "people"),
    ("window", "windows"),
    ("picture", "pictures"),
];

/// (third person singular, plural)
pub const VERBS: &[(&str, &str)] = &[
    ("sees", "see"),
    ("likes", "like"),
    ("finds", "find"),
    ("wants", "want"),
    ("takes", "take"),
    ("carries", "carry"),
    ("watches", "watch"),
    ("helps", "help"),
    ("has", "have"),
    ("buys", "buy"),
    ("paints", "paint"),
    ("brings", "bring"),
    ("is", "are"),
    ("was", "were"),
];

/// Location nouns and the only preposition that introduces each.
pub const PLACES: &[(&str, &str)] = &[
    ("park", "in"),
    ("garden", "in"),
    ("kitchen", "in"),
    ("table", "on"),
    ("roof", "on"),
    ("station", "at"),
    ("door", "at"),
    ("river", "near"),
    ("bridge", "under"),
    ("market", "from"),
];

pub const ADJECTIVES: &[&str] = &[
    "big", "small", "old", "young", "happy", "red", "quiet", "clever", "rich", "poor",
];

pub const PROPER_NOUNS: &[&str] = &["Anna", "Tom", "Maria", "David", "Sarah", "Peter"];

pub fn is_determiner(tok: &str) -> bool {
    DETERMINERS.contains(&tok)
}

pub fn is_preposition(tok: &str) -> bool {
    PREPOSITIONS.contains(&tok)
}

pub fn is_punctuation(tok: &str) -> bool {
    !tok.is_empty() && tok.chars().all(|c| c.is_ascii_punctuation())
}

pub fn is_verb_pair(a: &str, b: &str) -> bool {
    VERBS
        .iter()
        .any(|&(s, p)| (s == a && p == b) || (s == b && p == a))
}

pub fn is_noun_pair(a: &str, b: &str) -> bool {
    NOUNS
        .iter()
        .any(|&(s, p)| (s == a && p == b) || (s == b && p == a))
        || regular_plural(a, b)
        || regular_plural(b, a)
}

fn regular_plural(sing: &str, plural: &str) -> bool {
    let vowel_y = |s: &str| s.ends_with('y') && !s.ends_with("ay") && !s.ends_with("ey") && !s.ends_with("oy");
    plural == format!("{sing}s")
        || plural == format!("{sing}es")
        || (vowel_y(sing) && plural == format!("{}ies", &sing[..sing.len() - 1]))
}

/// Every word the grammar can emit (excluding punctuation).
pub fn all_words() -> Vec<&'static str> {
    let mut words: Vec<&str> = DETERMINERS
        .iter()
        .chain(PREPOSITIONS)
        .chain(CONJUNCTIONS)
        .chain(ADJECTIVES)
        .chain(PROPER_NOUNS)
        .copied()
        .collect();
    for &(s, p) in NOUNS.iter().chain(VERBS) {
        words.push(s);
        words.push(p);
    }
    words.extend(PLACES.iter().map(|&(n, _)| n));
    words.sort_unstable();
    words.dedup();
    words
}
