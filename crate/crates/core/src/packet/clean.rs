use std::sync::OnceLock;

use regex::Regex;

struct Patterns {
    url: Regex,
    mention: Regex,
    hashtag: Regex,
    retweet: Regex,
    junk: Regex,
    space: Regex,
}

fn patterns() -> &'static Patterns {
    static P: OnceLock<Patterns> = OnceLock::new();
    P.get_or_init(|| Patterns {
        url: Regex::new(r"(?i)\b(?:https?://|www\.)\S*").unwrap(),
        mention: Regex::new(r"@\w+").unwrap(),
        hashtag: Regex::new(r"#(\w+)").unwrap(),
        retweet: Regex::new(r"\bRT\b:?").unwrap(),
        junk: Regex::new(
            r"[\p{Cc}\p{Extended_Pictographic}\p{Emoji_Modifier}\p{Regional_Indicator}\u{FE0F}\u{200D}\u{20E3}]",
        )
        .unwrap(),
        space: Regex::new(r"\s+").unwrap(),
    })
}

/// Cleaned text plus the hashtags it contained (lowercase, no `#`, first-seen order).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Cleaned {
    pub text: String,
    pub hashtags: Vec<String>,
}

/// Replaces control characters and emoji with spaces, strips URLs, @mentions,
/// hashtags and RT markers, then collapses whitespace. Hashtags are returned separately.
pub fn clean(raw: &str) -> Cleaned {
    let p = patterns();
    let no_junk = p.junk.replace_all(raw, " ");
    let no_urls = p.url.replace_all(&no_junk, " ");
    let mut hashtags: Vec<String> = Vec::new();
    for cap in p.hashtag.captures_iter(&no_urls) {
        push_tag(&mut hashtags, &cap[1]);
    }
    let s = p.mention.replace_all(&no_urls, " ");
    let s = p.hashtag.replace_all(&s, " ");
    let s = p.retweet.replace_all(&s, " ");
    let text = p.space.replace_all(&s, " ").trim().to_string();
    Cleaned { text, hashtags }
}

pub fn clean_text(raw: &str) -> String {
    clean(raw).text
}

/// Normalises a tag (lowercase, no leading `#`) and appends it if new.
pub(crate) fn push_tag(tags: &mut Vec<String>, raw: &str) {
    let t = raw.trim().trim_start_matches('#').to_lowercase();
    if !t.is_empty() && !tags.contains(&t) {
        tags.push(t);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn tweet_example() {
        let c = clean("Fire on 5th Ave! http://t.co/x #nyc");
        assert_eq!(c.text, "Fire on 5th Ave!");
        assert_eq!(c.hashtags, vec!["nyc"]);
    }

    #[test]
    fn strips_mentions_rt_and_emoji() {
        let c = clean("RT @bob: huge 🔥 downtown\u{7} #Fire #fire www.example.com/x");
        assert_eq!(c.text, ": huge downtown");
        assert_eq!(c.hashtags, vec!["fire"]);
    }

    #[test]
    fn url_fragment_is_not_a_hashtag() {
        let c = clean("see https://a.b/#frag now");
        assert_eq!(c.text, "see now");
        assert!(c.hashtags.is_empty());
    }

    proptest! {
        #[test]
        fn cleaning_is_idempotent(s in "[a-zA-Z0-9 #@:/.!RT\u{1F525}\u{7}-]{0,40}") {
            let once = clean_text(&s);
            prop_assert_eq!(clean_text(&once), once);
        }

        #[test]
        fn cleaning_arbitrary_unicode_is_idempotent(s in "\\PC{0,30}") {
            let once = clean_text(&s);
            prop_assert_eq!(clean_text(&once), once);
        }
    }
}
