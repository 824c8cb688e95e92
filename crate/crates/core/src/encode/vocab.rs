//! Typed tokens, their canonical string forms, and the data-driven vocabulary.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Discretized monthly intensity of an activity (weeks per month), one of
/// five classes: S0, S1, S2, S3, S4+.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum IntensityLevel {
    S0,
    S1,
    S2,
    S3,
    S4Plus,
}

impl IntensityLevel {
    /// Classifies average weeks per month: exactly zero is S0, anything in
    /// (0,1) is S1, anything rounding to 4 or above is S4+, otherwise the
    /// rounded value.
    pub fn from_ratio(x: f64) -> Self {
        if x == 0.0 {
            IntensityLevel::S0
        } else if x > 4.0 {
            IntensityLevel::S4Plus
        } else if x < 1.0 {
            IntensityLevel::S1
        } else {
            match x.round() as i64 {
                1 => IntensityLevel::S1,
                2 => IntensityLevel::S2,
                3 => IntensityLevel::S3,
                _ => IntensityLevel::S4Plus,
            }
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            IntensityLevel::S0 => "S0",
            IntensityLevel::S1 => "S1",
            IntensityLevel::S2 => "S2",
            IntensityLevel::S3 => "S3",
            IntensityLevel::S4Plus => "S4+",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "S0" => IntensityLevel::S0,
            "S1" => IntensityLevel::S1,
            "S2" => IntensityLevel::S2,
            "S3" => IntensityLevel::S3,
            "S4+" => IntensityLevel::S4Plus,
            _ => return None,
        })
    }
}

/// Average weeks per month spent in an activity, discretized. Total weeks
/// are spread over the months the relationship lasted that year.
pub fn discretize_intensity(weeks_total: f64, months_total: u32) -> crate::Result<IntensityLevel> {
    if months_total == 0 {
        return Err(crate::Error::Encoding("intensity needs at least one month".into()));
    }
    if !weeks_total.is_finite() || weeks_total < 0.0 {
        return Err(crate::Error::Encoding(format!("invalid weeks total {weeks_total}")));
    }
    Ok(IntensityLevel::from_ratio(weeks_total / months_total as f64))
}

/// Category of a token. Specials come first in the vocabulary; the rest are
/// laid out in this declaration order, sorted naturally within each category.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenCategory {
    Special,
    Background,
    Month,
    Type,
    Duration,
    Income,
    Sector,
    Title,
    FirmSize,
    Province,
    PartFull,
    IntensityWork,
    IntensitySick,
    IntensityMaternity,
}

/// A vocabulary entry in typed form. The string rendering is canonical: two
/// tokens are equal exactly when their strings are equal.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Token {
    Pad,
    Unk,
    Bol,
    Eol,
    Eoy,
    Reserved(u8),
    Area(u8),
    SexF,
    SexM,
    BirthYear(i32),
    Month(u32),
    Type(u8),
    Duration(u32),
    Income(u8),
    Sector(String),
    Title(u8),
    FirmSize(u8),
    Province(u16),
    FullTime,
    PartTime,
    WorkInt(IntensityLevel),
    SickInt(IntensityLevel),
    MatInt(IntensityLevel),
}

impl Token {
    pub fn category(&self) -> TokenCategory {
        match self {
            Token::Pad | Token::Unk | Token::Bol | Token::Eol | Token::Eoy | Token::Reserved(_) => TokenCategory::Special,
            Token::Area(_) | Token::SexF | Token::SexM | Token::BirthYear(_) => TokenCategory::Background,
            Token::Month(_) => TokenCategory::Month,
            Token::Type(_) => TokenCategory::Type,
            Token::Duration(_) => TokenCategory::Duration,
            Token::Income(_) => TokenCategory::Income,
            Token::Sector(_) => TokenCategory::Sector,
            Token::Title(_) => TokenCategory::Title,
            Token::FirmSize(_) => TokenCategory::FirmSize,
            Token::Province(_) => TokenCategory::Province,
            Token::FullTime | Token::PartTime => TokenCategory::PartFull,
            Token::WorkInt(_) => TokenCategory::IntensityWork,
            Token::SickInt(_) => TokenCategory::IntensitySick,
            Token::MatInt(_) => TokenCategory::IntensityMaternity,
        }
    }

    /// Parses the canonical rendering back into a typed token.
    pub fn parse(s: &str) -> Option<Token> {
        match s {
            "[PAD]" => return Some(Token::Pad),
            "[UNK]" => return Some(Token::Unk),
            "[BOL]" => return Some(Token::Bol),
            "[EOL]" => return Some(Token::Eol),
            "[EOY]" => return Some(Token::Eoy),
            "F" => return Some(Token::SexF),
            "M" => return Some(Token::SexM),
            "FULL_TIME" => return Some(Token::FullTime),
            "PART_TIME" => return Some(Token::PartTime),
            _ => {}
        }
        if let Some(rest) = s.strip_prefix("[RES_").and_then(|r| r.strip_suffix(']')) {
            return rest.parse().ok().map(Token::Reserved);
        }
        if let Some(rest) = s.strip_prefix("[TIPO_").and_then(|r| r.strip_suffix(']')) {
            return rest.parse().ok().map(Token::Type);
        }
        if let Some(rest) = s.strip_prefix("A") {
            if rest.len() == 1 {
                if let Ok(a) = rest.parse() {
                    return Some(Token::Area(a));
                }
            }
        }
        if let Some(rest) = s.strip_prefix("YEAR_") {
            return rest.parse().ok().map(Token::BirthYear);
        }
        if let Some(rest) = s.strip_prefix("MONTH_") {
            return rest.parse().ok().map(Token::Month);
        }
        if let Some(rest) = s.strip_prefix("DUR_") {
            return rest.parse().ok().map(Token::Duration);
        }
        if let Some(rest) = s.strip_prefix("INCOME_") {
            return rest.parse().ok().map(Token::Income);
        }
        if let Some(rest) = s.strip_prefix("ATE_") {
            return Some(Token::Sector(rest.to_string()));
        }
        if let Some(rest) = s.strip_prefix("WRKT_") {
            return rest.parse().ok().map(Token::Title);
        }
        if let Some(rest) = s.strip_prefix("FSIZE_") {
            return rest.parse().ok().map(Token::FirmSize);
        }
        if let Some(rest) = s.strip_prefix("WRKP_") {
            return rest.parse().ok().map(Token::Province);
        }
        if let Some(rest) = s.strip_prefix("WRKINT_") {
            return IntensityLevel::parse(rest).map(Token::WorkInt);
        }
        if let Some(rest) = s.strip_prefix("SIKINT_") {
            return IntensityLevel::parse(rest).map(Token::SickInt);
        }
        if let Some(rest) = s.strip_prefix("MATINT_") {
            return IntensityLevel::parse(rest).map(Token::MatInt);
        }
        None
    }
}

impl fmt::Display for Token {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Token::Pad => write!(f, "[PAD]"),
            Token::Unk => write!(f, "[UNK]"),
            Token::Bol => write!(f, "[BOL]"),
            Token::Eol => write!(f, "[EOL]"),
            Token::Eoy => write!(f, "[EOY]"),
            Token::Reserved(k) => write!(f, "[RES_{k}]"),
            Token::Area(a) => write!(f, "A{a}"),
            Token::SexF => write!(f, "F"),
            Token::SexM => write!(f, "M"),
            Token::BirthYear(y) => write!(f, "YEAR_{y}"),
            Token::Month(m) => write!(f, "MONTH_{m}"),
            Token::Type(c) => write!(f, "[TIPO_{c}]"),
            Token::Duration(d) => write!(f, "DUR_{d}"),
            Token::Income(b) => write!(f, "INCOME_{b}"),
            Token::Sector(s) => write!(f, "ATE_{s}"),
            Token::Title(t) => write!(f, "WRKT_{t}"),
            Token::FirmSize(s) => write!(f, "FSIZE_{s}"),
            Token::Province(p) => write!(f, "WRKP_{p}"),
            Token::FullTime => write!(f, "FULL_TIME"),
            Token::PartTime => write!(f, "PART_TIME"),
            Token::WorkInt(l) => write!(f, "WRKINT_{}", l.label()),
            Token::SickInt(l) => write!(f, "SIKINT_{}", l.label()),
            Token::MatInt(l) => write!(f, "MATINT_{}", l.label()),
        }
    }
}

/// Compares strings by alternating alphabetic and numeric runs, so
/// `INCOME_9 < INCOME_10` and `YEAR_1942 < YEAR_1943`.
pub(crate) fn natural_cmp(a: &str, b: &str) -> std::cmp::Ordering {
    let (mut ia, mut ib) = (a.as_bytes(), b.as_bytes());
    loop {
        match (ia.first(), ib.first()) {
            (None, None) => return std::cmp::Ordering::Equal,
            (None, Some(_)) => return std::cmp::Ordering::Less,
            (Some(_), None) => return std::cmp::Ordering::Greater,
            (Some(&ca), Some(&cb)) => {
                if ca.is_ascii_digit() && cb.is_ascii_digit() {
                    let na = ia.iter().take_while(|c| c.is_ascii_digit()).count();
                    let nb = ib.iter().take_while(|c| c.is_ascii_digit()).count();
                    let va: u64 = std::str::from_utf8(&ia[..na]).expect("ascii").parse().unwrap_or(u64::MAX);
                    let vb: u64 = std::str::from_utf8(&ib[..nb]).expect("ascii").parse().unwrap_or(u64::MAX);
                    match va.cmp(&vb) {
                        std::cmp::Ordering::Equal => {
                            ia = &ia[na..];
                            ib = &ib[nb..];
                        }
                        other => return other,
                    }
                } else {
                    match ca.cmp(&cb) {
                        std::cmp::Ordering::Equal => {
                            ia = &ia[1..];
                            ib = &ib[1..];
                        }
                        other => return other,
                    }
                }
            }
        }
    }
}

pub const PAD_ID: u32 = 0;
pub const UNK_ID: u32 = 1;
pub const BOL_ID: u32 = 2;
pub const EOL_ID: u32 = 3;
pub const EOY_ID: u32 = 4;
const N_RESERVED: u8 = 6;

/// Bijective token <-> id map. Ids 0..=10 are the fixed specials (PAD, UNK,
/// BOL, EOL, EOY, six reserved slots); the rest come from the corpus the
/// vocabulary was built on, grouped by category and naturally sorted.
#[derive(Debug, Clone)]
pub struct Vocabulary {
    tokens: Vec<Token>,
    categories: Vec<TokenCategory>,
    by_string: HashMap<String, u32>,
}

impl Vocabulary {
    /// Builds from every token observed in `corpus` (training split only, by
    /// convention: unseen strings map to UNK at encode time).
    pub fn build<'a, I>(corpus: I) -> Vocabulary
    where
        I: IntoIterator<Item = &'a Token>,
    {
        let mut seen: Vec<(TokenCategory, String, Token)> = Vec::new();
        let mut dedup: HashMap<String, ()> = HashMap::new();
        for t in corpus {
            if t.category() == TokenCategory::Special {
                continue;
            }
            let s = t.to_string();
            if dedup.insert(s.clone(), ()).is_none() {
                seen.push((t.category(), s, t.clone()));
            }
        }
        seen.sort_by(|a, b| a.0.cmp(&b.0).then_with(|| natural_cmp(&a.1, &b.1)));

        let mut tokens: Vec<Token> = vec![Token::Pad, Token::Unk, Token::Bol, Token::Eol, Token::Eoy];
        tokens.extend((0..N_RESERVED).map(Token::Reserved));
        tokens.extend(seen.into_iter().map(|(_, _, t)| t));

        Self::from_tokens(tokens)
    }

    fn from_tokens(tokens: Vec<Token>) -> Vocabulary {
        let categories = tokens.iter().map(Token::category).collect();
        let by_string = tokens.iter().enumerate().map(|(i, t)| (t.to_string(), i as u32)).collect();
        Vocabulary { tokens, categories, by_string }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id_of(&self, t: &Token) -> Option<u32> {
        self.by_string.get(&t.to_string()).copied()
    }

    pub fn id_of_str(&self, s: &str) -> Option<u32> {
        self.by_string.get(s).copied()
    }

    /// Id of the token, or UNK for strings outside the vocabulary.
    pub fn id_or_unk(&self, t: &Token) -> u32 {
        self.id_of(t).unwrap_or(UNK_ID)
    }

    pub fn token(&self, id: u32) -> Result<&Token> {
        self.tokens.get(id as usize).ok_or_else(|| Error::Encoding(format!("id {id} outside the vocabulary")))
    }

    pub fn category_of(&self, id: u32) -> Result<TokenCategory> {
        self.categories.get(id as usize).copied().ok_or_else(|| Error::Encoding(format!("id {id} outside the vocabulary")))
    }

    pub fn tokens(&self) -> &[Token] {
        &self.tokens
    }

    /// Count of tokens per category, for audits.
    pub fn category_counts(&self) -> Vec<(TokenCategory, usize)> {
        let mut counts: Vec<(TokenCategory, usize)> = Vec::new();
        for c in &self.categories {
            match counts.iter_mut().find(|(k, _)| k == c) {
                Some((_, n)) => *n += 1,
                None => counts.push((*c, 1)),
            }
        }
        counts
    }

    pub fn to_json(&self) -> serde_json::Value {
        let string_to_id: serde_json::Map<String, serde_json::Value> = self
            .tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.to_string(), serde_json::Value::from(i as u32)))
            .collect();
        serde_json::json!({
            "string_to_id": string_to_id,
            "id_to_category": self.categories,
        })
    }

    pub fn from_json(v: &serde_json::Value) -> Result<Vocabulary> {
        let map = v
            .get("string_to_id")
            .and_then(|m| m.as_object())
            .ok_or_else(|| Error::Encoding("vocabulary json lacks string_to_id".into()))?;
        let mut pairs: Vec<(u32, Token)> = Vec::with_capacity(map.len());
        for (s, id) in map {
            let id = id.as_u64().ok_or_else(|| Error::Encoding(format!("bad id for {s}")))? as u32;
            let tok = Token::parse(s).ok_or_else(|| Error::Encoding(format!("unparseable token {s:?}")))?;
            pairs.push((id, tok));
        }
        pairs.sort_by_key(|(id, _)| *id);
        for (want, (got, _)) in pairs.iter().enumerate() {
            if *got != want as u32 {
                return Err(Error::Encoding(format!("vocabulary ids are not contiguous at {got}")));
            }
        }
        Ok(Self::from_tokens(pairs.into_iter().map(|(_, t)| t).collect()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        fs::write(path, serde_json::to_string_pretty(&self.to_json())?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Vocabulary> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Data(format!("cannot open vocabulary {}: {e}", path.display())))?;
        Self::from_json(&serde_json::from_str(&text)?)
    }
}
