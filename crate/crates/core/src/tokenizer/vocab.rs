use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::codes::{self, group_of, unknown_token};
use super::intervals::INTERVAL_BINS;
use super::quantiles::quantile_tokens;
use super::TokenizeError;

pub type TokenId = u32;

/// Dense token ↔ id mapping. Ids follow the sorted order of token strings, so the
/// same token set always yields the same ids and fingerprint.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    groups: Vec<String>,
    index: HashMap<String, TokenId>,
    fingerprint: u64,
}

#[derive(Serialize, Deserialize)]
struct VocabFile {
    fingerprint: String,
    tokens: Vec<String>,
    groups: Vec<String>,
}

/// First 8 bytes (big-endian) of SHA-256 over the newline-joined sorted tokens.
pub fn fingerprint_of(sorted_tokens: &[String]) -> u64 {
    let mut hasher = Sha256::new();
    for t in sorted_tokens {
        hasher.update(t.as_bytes());
        hasher.update(b"\n");
    }
    let digest = hasher.finalize();
    let mut first = [0u8; 8];
    first.copy_from_slice(&digest[..8]);
    u64::from_be_bytes(first)
}

/// Tokens present in every vocabulary regardless of the corpus.
pub fn fixed_tokens() -> impl Iterator<Item = String> {
    INTERVAL_BINS
        .iter()
        .map(|b| b.label.to_string())
        .chain(quantile_tokens())
        .chain([codes::TIMELINE_END.to_string(), codes::UNKNOWN.to_string()])
}

impl Vocabulary {
    pub fn from_tokens<I, S>(tokens: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let set: BTreeSet<String> = tokens
            .into_iter()
            .map(Into::into)
            .chain(fixed_tokens())
            .collect();
        let tokens: Vec<String> = set.into_iter().collect();
        let groups = tokens.iter().map(|t| group_of(t)).collect();
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as TokenId))
            .collect();
        let fingerprint = fingerprint_of(&tokens);
        Vocabulary {
            tokens,
            groups,
            index,
            fingerprint,
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn fingerprint(&self) -> u64 {
        self.fingerprint
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn group(&self, id: TokenId) -> Option<&str> {
        self.groups.get(id as usize).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    /// Id of `token`, falling back to its group's placeholder and then to `UNKNOWN`.
    pub fn id_or_unknown(&self, token: &str) -> TokenId {
        if let Some(id) = self.id(token) {
            return id;
        }
        self.id(&unknown_token(&group_of(token)))
            .or_else(|| self.id(codes::UNKNOWN))
            .expect("UNKNOWN is a fixed token")
    }

    /// Ids of every token whose string is in `names`; unknown names are skipped.
    pub fn ids_of<'a, I: IntoIterator<Item = &'a str>>(&self, names: I) -> Vec<TokenId> {
        names.into_iter().filter_map(|n| self.id(n)).collect()
    }

    /// Unique tokens per group label.
    pub fn group_sizes(&self) -> BTreeMap<String, usize> {
        let mut out = BTreeMap::new();
        for g in &self.groups {
            *out.entry(g.clone()).or_insert(0) += 1;
        }
        out
    }

    pub fn describe(&self, id: TokenId) -> String {
        self.token(id)
            .map(str::to_string)
            .unwrap_or_else(|| format!("<id {id}>"))
    }

    pub fn save(&self, path: &Path) -> Result<(), TokenizeError> {
        let file = VocabFile {
            fingerprint: format!("{:016x}", self.fingerprint),
            tokens: self.tokens.clone(),
            groups: self.groups.clone(),
        };
        std::fs::write(path, serde_json::to_string_pretty(&file)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, TokenizeError> {
        let file: VocabFile = serde_json::from_slice(&std::fs::read(path)?)?;
        let vocab = Vocabulary::from_tokens(file.tokens.iter().cloned());
        let stated = u64::from_str_radix(&file.fingerprint, 16)
            .map_err(|_| TokenizeError::Corrupt("bad fingerprint".into()))?;
        if vocab.tokens != file.tokens || vocab.fingerprint != stated {
            return Err(TokenizeError::Corrupt(
                "vocabulary file does not match its fingerprint".into(),
            ));
        }
        Ok(vocab)
    }
}
