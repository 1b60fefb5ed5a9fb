use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How one side of a corpus is segmented.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Profile {
    /// Whitespace-delimited words with punctuation split off.
    SpaceTokenized,
    /// One token per character (for scripts written without spaces).
    CharTokenized,
}

impl fmt::Display for Profile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Profile::SpaceTokenized => "space",
            Profile::CharTokenized => "char",
        })
    }
}

impl FromStr for Profile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "space" | "space_tokenized" => Ok(Profile::SpaceTokenized),
            "char" | "char_tokenized" => Ok(Profile::CharTokenized),
            other => Err(Error::invalid(format!("unknown profile {other:?} (expected space or char)"))),
        }
    }
}

impl Profile {
    /// Joins tokens back into a display line.
    pub fn join(self, tokens: &[String]) -> String {
        match self {
            Profile::SpaceTokenized => tokens.join(" "),
            Profile::CharTokenized => tokens.concat(),
        }
    }
}

const SYMBOL_TABLE: &str = include_str!("../../data/symbols.tsv");

struct SymbolTable {
    space: HashMap<char, String>,
    char_: HashMap<char, String>,
}

fn unescape(field: &str) -> String {
    let mut out = String::new();
    let mut rest = field;
    while let Some(pos) = rest.find("\\u{") {
        out.push_str(&rest[..pos]);
        let tail = &rest[pos + 3..];
        let end = tail.find('}').expect("closing brace in symbol table escape");
        let code = u32::from_str_radix(&tail[..end], 16).expect("hex escape in symbol table");
        out.push(char::from_u32(code).expect("valid code point in symbol table"));
        rest = &tail[end + 1..];
    }
    out.push_str(rest);
    out
}

fn symbols() -> &'static SymbolTable {
    static TABLE: OnceLock<SymbolTable> = OnceLock::new();
    TABLE.get_or_init(|| {
        let mut space = HashMap::new();
        let mut char_ = HashMap::new();
        for line in SYMBOL_TABLE.lines() {
            if line.starts_with('#') || line.trim().is_empty() {
                continue;
            }
            let mut fields = line.split('\t');
            let (Some(profile), Some(from), Some(to)) = (fields.next(), fields.next(), fields.next()) else {
                panic!("malformed symbol table line {line:?}");
            };
            let from = unescape(from);
            let mut chars = from.chars();
            let key = chars.next().expect("non-empty source symbol");
            assert!(chars.next().is_none(), "symbol table maps single characters");
            let to = unescape(to);
            match profile {
                "any" => {
                    space.entry(key).or_insert_with(|| to.clone());
                    char_.entry(key).or_insert(to);
                }
                "space" => {
                    space.insert(key, to);
                }
                "char" => {
                    char_.insert(key, to);
                }
                other => panic!("unknown profile {other} in symbol table"),
            }
        }
        SymbolTable { space, char_ }
    })
}

/// Punctuation and symbols that become standalone tokens in space profiles.
fn is_symbol(ch: char) -> bool {
    ch.is_ascii_punctuation()
        || ('\u{2000}'..='\u{206F}').contains(&ch)
        || ('\u{3000}'..='\u{303F}').contains(&ch)
        || ('\u{FF00}'..='\u{FF0F}').contains(&ch)
        || ('\u{FF1A}'..='\u{FF20}').contains(&ch)
        || ('\u{FF3B}'..='\u{FF40}').contains(&ch)
        || ('\u{FF5B}'..='\u{FF65}').contains(&ch)
}

/// Applies the symbol table and case folding and drops control characters
/// (other than whitespace).
pub fn normalize(line: &str, profile: Profile) -> String {
    let table = match profile {
        Profile::SpaceTokenized => &symbols().space,
        Profile::CharTokenized => &symbols().char_,
    };
    let mut out = String::with_capacity(line.len());
    for ch in line.chars() {
        if ch.is_control() && !ch.is_whitespace() {
            continue;
        }
        match table.get(&ch) {
            Some(rep) => out.push_str(rep),
            None => out.push(ch),
        }
    }
    out.to_lowercase()
}

/// Normalizes a raw line and splits it into surface tokens.
pub fn preprocess(line: &str, profile: Profile) -> Vec<String> {
    let text = normalize(line, profile);
    match profile {
        Profile::CharTokenized => text
            .chars()
            .filter(|c| !c.is_whitespace())
            .map(String::from)
            .collect(),
        Profile::SpaceTokenized => {
            let mut tokens = Vec::new();
            for word in text.split_whitespace() {
                let mut current = String::new();
                for ch in word.chars() {
                    if is_symbol(ch) {
                        if !current.is_empty() {
                            tokens.push(std::mem::take(&mut current));
                        }
                        tokens.push(ch.to_string());
                    } else {
                        current.push(ch);
                    }
                }
                if !current.is_empty() {
                    tokens.push(current);
                }
            }
            tokens
        }
    }
}
