//! Dot-separated topics and `*` / `#` wildcard patterns.
//!
//! `*` matches exactly one segment and `#` matches zero or more segments.
//! Topic segments are restricted to `[A-Za-z0-9_-]` so a topic can double as
//! a log file name.

use std::fmt;
use std::str::FromStr;

use super::BusError;

fn valid_segment(s: &str) -> bool {
    !s.is_empty() && s.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-')
}

pub fn validate_topic(topic: &str) -> Result<(), BusError> {
    if topic.split('.').all(valid_segment) {
        Ok(())
    } else {
        Err(BusError::InvalidTopic(topic.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Segment {
    Literal(String),
    One,
    Rest,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TopicPattern {
    raw: String,
    segments: Vec<Segment>,
}

impl TopicPattern {
    pub fn as_str(&self) -> &str {
        &self.raw
    }

    pub fn matches(&self, topic: &str) -> bool {
        let parts: Vec<&str> = topic.split('.').collect();
        match_from(&self.segments, &parts)
    }
}

fn match_from(pattern: &[Segment], topic: &[&str]) -> bool {
    match pattern.split_first() {
        None => topic.is_empty(),
        Some((Segment::Rest, rest)) => (0..=topic.len()).any(|skip| match_from(rest, &topic[skip..])),
        Some((seg, rest)) => match topic.split_first() {
            None => false,
            Some((head, tail)) => {
                let ok = match seg {
                    Segment::Literal(l) => l == head,
                    _ => true,
                };
                ok && match_from(rest, tail)
            }
        },
    }
}

impl FromStr for TopicPattern {
    type Err = BusError;

    fn from_str(s: &str) -> Result<Self, BusError> {
        let segments = s
            .split('.')
            .map(|seg| match seg {
                "*" => Ok(Segment::One),
                "#" => Ok(Segment::Rest),
                lit if valid_segment(lit) => Ok(Segment::Literal(lit.to_string())),
                _ => Err(BusError::InvalidPattern(s.to_string())),
            })
            .collect::<Result<_, _>>()?;
        Ok(Self {
            raw: s.to_string(),
            segments,
        })
    }
}

impl fmt::Display for TopicPattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.raw)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn p(s: &str) -> TopicPattern {
        s.parse().unwrap()
    }

    /// Expands the pattern into every concrete segment list up to `max_len`
    /// over `alphabet` and checks membership.
    fn oracle(pattern: &str, topic: &str, alphabet: &[&str], max_len: usize) -> bool {
        fn expand(pat: &[&str], alphabet: &[&str], max_len: usize) -> Vec<Vec<String>> {
            let Some((head, rest)) = pat.split_first() else {
                return vec![vec![]];
            };
            let tails = expand(rest, alphabet, max_len);
            let mut out = Vec::new();
            let heads: Vec<Vec<String>> = match *head {
                "*" => alphabet.iter().map(|a| vec![a.to_string()]).collect(),
                "#" => {
                    let mut all = vec![vec![]];
                    let mut frontier = vec![vec![]];
                    for _ in 0..max_len {
                        frontier = frontier
                            .iter()
                            .flat_map(|f: &Vec<String>| {
                                alphabet.iter().map(move |a| {
                                    let mut g = f.clone();
                                    g.push(a.to_string());
                                    g
                                })
                            })
                            .collect();
                        all.extend(frontier.clone());
                    }
                    all
                }
                lit => vec![vec![lit.to_string()]],
            };
            for h in &heads {
                for t in &tails {
                    if h.len() + t.len() <= max_len {
                        out.push(h.iter().chain(t).cloned().collect());
                    }
                }
            }
            out
        }
        let pat: Vec<&str> = pattern.split('.').collect();
        let want: Vec<String> = topic.split('.').map(String::from).collect();
        expand(&pat, alphabet, max_len).contains(&want)
    }

    #[test]
    fn star_matches_one_segment() {
        assert!(p("task.*").matches("task.browser"));
        assert!(!p("task.*").matches("task.browser.open"));
        assert!(!p("task.*").matches("task"));
    }

    #[test]
    fn hash_matches_zero_or_more() {
        assert!(p("task.#").matches("task"));
        assert!(p("task.#").matches("task.submit.ops"));
        assert!(p("#").matches("gaze.dev1"));
        assert!(p("task.#.ops").matches("task.submit.x.ops"));
        assert!(!p("gaze.#").matches("task.submit"));
    }

    #[test]
    fn invalid_inputs() {
        for bad in ["", "a..b", "a.b c", "task.*x", "."] {
            assert!(bad.parse::<TopicPattern>().is_err(), "{bad}");
        }
        assert!(validate_topic("task.*").is_err());
        assert!(validate_topic("gaze.glasses-01").is_ok());
    }

    proptest! {
        #[test]
        fn matcher_agrees_with_expansion(
            pat in proptest::collection::vec(prop_oneof!["a", "b", Just("*".to_string()), Just("#".to_string())], 1..4),
            topic in proptest::collection::vec(prop_oneof!["a", "b"], 1..5),
        ) {
            let pat = pat.join(".");
            let topic = topic.join(".");
            prop_assert_eq!(p(&pat).matches(&topic), oracle(&pat, &topic, &["a", "b"], 4));
        }
    }
}
