//! Fixed-depth parse-tree log template mining.
//!
//! Messages are tokenized on whitespace, variable-looking tokens are masked
//! to `<*>`, and a prefix tree keyed by token count plus the first `depth`
//! tokens routes each message to a leaf of candidate templates. A message
//! joins the most similar template at or above `sim_threshold` (the template
//! generalizes differing positions to `<*>`), otherwise it founds a new one.
//! Template ids are append-only and stable.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use regex::Regex;

use crate::error::{Error, Result};

pub const WILDCARD: &str = "<*>";
pub const EMPTY_TEMPLATE: &str = "<empty>";

/// Internal nodes cap their fan-out; overflow tokens share a `<*>` child so
/// high-cardinality slots cannot explode the tree.
const MAX_CHILDREN: usize = 100;

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LogParseConfig {
    pub depth: usize,
    pub sim_threshold: f64,
    /// Tokens matching any of these patterns are masked to `<*>` before
    /// lookup. The default masks every token containing a digit.
    pub variable_patterns: Vec<String>,
}

impl Default for LogParseConfig {
    fn default() -> Self {
        LogParseConfig {
            depth: 4,
            sim_threshold: 0.4,
            variable_patterns: vec![r"\d".to_string()],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Token {
    Wild,
    Val(String),
}

impl Token {
    fn as_str(&self) -> &str {
        match self {
            Token::Wild => WILDCARD,
            Token::Val(s) => s.as_str(),
        }
    }
}

#[derive(Debug, Default)]
struct TreeNode {
    children: HashMap<String, TreeNode>,
    group: Vec<usize>,
}

fn best_candidate_in(
    templates: &[Vec<Token>],
    group: &[usize],
    tokens: &[Token],
) -> Option<(usize, f64)> {
    let mut best: Option<(usize, f64)> = None;
    for &id in group {
        let sim = TemplateIndex::similarity(&templates[id], tokens);
        if best.map(|(_, b)| sim > b).unwrap_or(true) {
            best = Some((id, sim));
        }
    }
    best
}

/// Mined templates plus the lookup tree.
#[derive(Debug)]
pub struct TemplateIndex {
    depth: usize,
    sim_threshold: f64,
    matchers: Vec<Regex>,
    patterns: Vec<String>,
    templates: Vec<Vec<Token>>,
    roots: HashMap<usize, TreeNode>,
    empty_id: Option<usize>,
}

impl TemplateIndex {
    pub fn new(cfg: &LogParseConfig) -> Result<Self> {
        let matchers = cfg
            .variable_patterns
            .iter()
            .map(|p| Regex::new(p).map_err(|e| Error::config(format!("bad variable pattern {p:?}: {e}"))))
            .collect::<Result<Vec<_>>>()?;
        Ok(TemplateIndex {
            depth: cfg.depth,
            sim_threshold: cfg.sim_threshold,
            matchers,
            patterns: cfg.variable_patterns.clone(),
            templates: Vec::new(),
            roots: HashMap::new(),
            empty_id: None,
        })
    }

    /// Number of templates L.
    pub fn len(&self) -> usize {
        self.templates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.templates.is_empty()
    }

    pub fn template_string(&self, id: usize) -> Option<String> {
        self.templates.get(id).map(|toks| {
            toks.iter()
                .map(Token::as_str)
                .collect::<Vec<_>>()
                .join(" ")
        })
    }

    fn mask(&self, token: &str) -> Token {
        let numeric = token.parse::<f64>().is_ok();
        if numeric || self.matchers.iter().any(|m| m.is_match(token)) {
            Token::Wild
        } else {
            Token::Val(token.to_string())
        }
    }

    fn tokenize(&self, message: &str) -> Vec<Token> {
        message.split_whitespace().map(|t| self.mask(t)).collect()
    }

    /// Token-overlap similarity: a position matches when the template token
    /// equals the message token or is already a wildcard.
    fn similarity(template: &[Token], tokens: &[Token]) -> f64 {
        debug_assert_eq!(template.len(), tokens.len());
        if template.is_empty() {
            return 1.0;
        }
        let hits = template
            .iter()
            .zip(tokens)
            .filter(|(t, m)| **t == Token::Wild || *t == *m)
            .count();
        hits as f64 / template.len() as f64
    }

    fn best_candidate(&self, group: &[usize], tokens: &[Token]) -> Option<(usize, f64)> {
        best_candidate_in(&self.templates, group, tokens)
    }

    /// Parses `message`, growing the vocabulary as needed. Returns the id.
    pub fn fit_insert(&mut self, message: &str) -> usize {
        let tokens = self.tokenize(message);
        if tokens.is_empty() {
            if let Some(id) = self.empty_id {
                return id;
            }
            let id = self.templates.len();
            self.templates.push(vec![Token::Val(EMPTY_TEMPLATE.into())]);
            self.empty_id = Some(id);
            return id;
        }

        let levels = self.depth.min(tokens.len());
        let templates = &mut self.templates;
        let mut node = self.roots.entry(tokens.len()).or_default();
        for tok in tokens.iter().take(levels) {
            let key = tok.as_str();
            // unseen keys fall through to an existing wildcard child, so a
            // slot that once held a variable keeps absorbing fresh values;
            // fan-out is capped either way
            let use_key = if node.children.contains_key(key) {
                key
            } else if node.children.contains_key(WILDCARD) || node.children.len() >= MAX_CHILDREN {
                WILDCARD
            } else {
                key
            };
            node = node.children.entry(use_key.to_string()).or_default();
        }

        if let Some((id, sim)) = best_candidate_in(templates, &node.group, &tokens) {
            if sim >= self.sim_threshold {
                let tmpl = &mut templates[id];
                for (t, m) in tmpl.iter_mut().zip(&tokens) {
                    if *t != Token::Wild && *t != *m {
                        *t = Token::Wild;
                    }
                }
                return id;
            }
        }
        let id = templates.len();
        templates.push(tokens);
        node.group.push(id);
        id
    }

    /// Pure lookup against a frozen index: unmatched messages map to `None`
    /// (the reserved "unseen" id). The index is not modified.
    pub fn parse_frozen(&self, message: &str) -> Option<usize> {
        let tokens = self.tokenize(message);
        if tokens.is_empty() {
            return self.empty_id;
        }
        let levels = self.depth.min(tokens.len());
        let mut node = self.roots.get(&tokens.len())?;
        for tok in tokens.iter().take(levels) {
            node = match node.children.get(tok.as_str()) {
                Some(n) => n,
                None => node.children.get(WILDCARD)?,
            };
        }
        match self.best_candidate(&node.group, &tokens) {
            Some((id, sim)) if sim >= self.sim_threshold => Some(id),
            _ => None,
        }
    }

    /// One template per line, id = line number; reloads bit-exactly.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        {
            let mut w = BufWriter::new(File::create(&tmp)?);
            for id in 0..self.templates.len() {
                writeln!(w, "{}", self.template_string(id).expect("id in range"))?;
            }
            w.flush()?;
        }
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    /// Rebuilds an index from a template file; the tree is reconstructed by
    /// re-inserting templates in id order.
    pub fn load(path: &Path, cfg: &LogParseConfig) -> Result<Self> {
        let mut index = TemplateIndex::new(cfg)?;
        let r = BufReader::new(File::open(path)?);
        for line in r.lines() {
            let line = line?;
            let tokens: Vec<Token> = line
                .split_whitespace()
                .map(|t| {
                    if t == WILDCARD {
                        Token::Wild
                    } else {
                        Token::Val(t.to_string())
                    }
                })
                .collect();
            let id = index.templates.len();
            if tokens.len() == 1 && tokens[0] == Token::Val(EMPTY_TEMPLATE.into()) {
                index.templates.push(tokens);
                if index.empty_id.is_none() {
                    index.empty_id = Some(id);
                }
                continue;
            }
            if tokens.is_empty() {
                return Err(Error::data(format!("template {id} is empty")));
            }
            let levels = index.depth.min(tokens.len());
            let mut node = index.roots.entry(tokens.len()).or_default();
            for tok in tokens.iter().take(levels) {
                node = node.children.entry(tok.as_str().to_string()).or_default();
            }
            node.group.push(id);
            index.templates.push(tokens);
        }
        Ok(index)
    }

    /// A stable fingerprint of the template list, for purity checks.
    pub fn fingerprint(&self) -> u64 {
        let mut h = 0xcbf29ce484222325u64;
        for id in 0..self.templates.len() {
            for b in self.template_string(id).expect("id in range").bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x100000001b3);
            }
            h ^= 0xff;
            h = h.wrapping_mul(0x100000001b3);
        }
        h
    }

    pub fn config(&self) -> LogParseConfig {
        LogParseConfig {
            depth: self.depth,
            sim_threshold: self.sim_threshold,
            variable_patterns: self.patterns.clone(),
        }
    }
}

/// Fits an index over `messages` in order and returns the per-message ids.
pub fn fit_and_parse(
    messages: impl IntoIterator<Item = String>,
    cfg: &LogParseConfig,
) -> Result<(TemplateIndex, Vec<usize>)> {
    let mut index = TemplateIndex::new(cfg)?;
    let ids = messages
        .into_iter()
        .map(|m| index.fit_insert(&m))
        .collect();
    Ok((index, ids))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn index() -> TemplateIndex {
        TemplateIndex::new(&LogParseConfig::default()).unwrap()
    }

    #[test]
    fn numeric_variables_share_a_template() {
        let mut idx = index();
        let a = idx.fit_insert("Route id: 5");
        let b = idx.fit_insert("Route id: 7");
        assert_eq!(a, b);
        assert_eq!(idx.template_string(a).unwrap(), "Route id: <*>");
        assert_eq!(idx.len(), 1);
    }

    #[test]
    fn identical_messages_are_idempotent() {
        let mut idx = index();
        let a = idx.fit_insert("connection pool exhausted");
        let l = idx.len();
        let b = idx.fit_insert("connection pool exhausted");
        assert_eq!(a, b);
        assert_eq!(idx.len(), l);
    }

    #[test]
    fn variable_tail_generalizes() {
        let mut idx = index();
        let a = idx.fit_insert("Exception in monitor thread while connecting to server 10.0.0.3");
        assert_eq!(
            idx.template_string(a).unwrap(),
            "Exception in monitor thread while connecting to server <*>"
        );
    }

    #[test]
    fn differing_tokens_generalize_on_join() {
        // tokens past the tree depth land in the same leaf and generalize
        let mut idx = index();
        let a = idx.fit_insert("worker finished task batch alpha cleanly");
        let b = idx.fit_insert("worker finished task batch gamma cleanly");
        assert_eq!(a, b);
        assert_eq!(
            idx.template_string(a).unwrap(),
            "worker finished task batch <*> cleanly"
        );
    }

    #[test]
    fn early_token_split_separates_templates() {
        // a differing token inside the prefix depth routes to another leaf
        let mut idx = index();
        let a = idx.fit_insert("worker alpha finished task batch cleanly");
        let b = idx.fit_insert("worker gamma finished task batch cleanly");
        assert_ne!(a, b);
    }

    #[test]
    fn empty_message_maps_to_reserved_template() {
        let mut idx = index();
        let a = idx.fit_insert("");
        let b = idx.fit_insert("   ");
        assert_eq!(a, b);
        assert_eq!(idx.template_string(a).unwrap(), EMPTY_TEMPLATE);
    }

    #[test]
    fn frozen_parse_is_pure_and_maps_unseen_to_none() {
        let mut idx = index();
        let a = idx.fit_insert("cache refresh took 12 ms");
        let fp = idx.fingerprint();
        assert_eq!(idx.parse_frozen("cache refresh took 99 ms"), Some(a));
        assert_eq!(idx.parse_frozen("totally novel shape of message here"), None);
        assert_eq!(idx.parse_frozen("cache refresh took 99 ms"), Some(a));
        assert_eq!(idx.fingerprint(), fp, "frozen parsing must not mutate");
    }

    #[test]
    fn counts_are_conserved() {
        let msgs: Vec<String> = (0..100)
            .map(|i| format!("Handled request {} in {} ms", i, i * 3))
            .collect();
        let (_, ids) = fit_and_parse(msgs.clone(), &LogParseConfig::default()).unwrap();
        assert_eq!(ids.len(), msgs.len());
    }

    #[test]
    fn save_load_roundtrip_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("templates.txt");
        let mut idx = index();
        idx.fit_insert("Route id: 5");
        idx.fit_insert("worker alpha finished");
        idx.fit_insert("worker beta finished");
        idx.fit_insert("");
        idx.save(&path).unwrap();
        let loaded = TemplateIndex::load(&path, &LogParseConfig::default()).unwrap();
        assert_eq!(loaded.len(), idx.len());
        for id in 0..idx.len() {
            assert_eq!(loaded.template_string(id), idx.template_string(id));
        }
        // identical bytes when saved again
        let path2 = dir.path().join("templates2.txt");
        loaded.save(&path2).unwrap();
        assert_eq!(
            std::fs::read(&path).unwrap(),
            std::fs::read(&path2).unwrap()
        );
        // frozen behavior matches
        assert_eq!(
            loaded.parse_frozen("Route id: 999"),
            idx.parse_frozen("Route id: 999")
        );
    }
}
