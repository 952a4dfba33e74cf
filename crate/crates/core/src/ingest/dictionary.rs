use std::collections::{BTreeSet, HashMap};
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

use super::flows::normalize_hostname;

/// Model-input categories in canonical feature order.
pub const MODEL_CATEGORIES: [&str; 5] = ["communication", "social_media", "streaming", "productivity", "system"];

pub const SYSTEM_CATEGORY: &str = "system";

pub const UNMAPPED: &str = "UNMAPPED";

/// Hostname → application → behavioral category mapping.
#[derive(Debug, Clone, Default)]
pub struct Dictionary {
    host_to_app: HashMap<String, String>,
    app_to_category: HashMap<String, String>,
    categories: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HostMapping<'a> {
    pub app: Option<&'a str>,
    pub category: Option<&'a str>,
}

impl HostMapping<'_> {
    pub fn app_or_unmapped(&self) -> &str {
        self.app.unwrap_or(UNMAPPED)
    }

    pub fn category_or_unmapped(&self) -> &str {
        self.category.unwrap_or(UNMAPPED)
    }
}

impl Dictionary {
    pub fn new<I, J>(host_to_app: I, app_to_category: J) -> Result<Self>
    where
        I: IntoIterator<Item = (String, String)>,
        J: IntoIterator<Item = (String, String)>,
    {
        let host_to_app: HashMap<String, String> = host_to_app
            .into_iter()
            .map(|(h, a)| (normalize_hostname(&h), a))
            .collect();
        let app_to_category: HashMap<String, String> = app_to_category.into_iter().collect();

        let mut orphans: Vec<&str> = host_to_app
            .values()
            .filter(|app| !app_to_category.contains_key(*app))
            .map(String::as_str)
            .collect();
        if !orphans.is_empty() {
            orphans.sort_unstable();
            orphans.dedup();
            return Err(Error::Config(format!(
                "apps without a category: {}",
                orphans.join(", ")
            )));
        }

        let extra: BTreeSet<&str> = app_to_category
            .values()
            .map(String::as_str)
            .filter(|c| !MODEL_CATEGORIES.contains(c))
            .collect();
        let categories = MODEL_CATEGORIES
            .iter()
            .copied()
            .chain(extra)
            .map(str::to_string)
            .collect();

        Ok(Dictionary {
            host_to_app,
            app_to_category,
            categories,
        })
    }

    /// Read `hostname,app` and `app,category` CSV files.
    pub fn from_readers<R1: Read, R2: Read>(hosts: R1, apps: R2) -> Result<Self> {
        let hosts = read_pairs(hosts, "hostname", "app")?;
        let apps = read_pairs(apps, "app", "category")?;
        Self::new(hosts, apps)
    }

    pub fn from_files(hosts: &Path, apps: &Path) -> Result<Self> {
        Self::from_readers(std::fs::File::open(hosts)?, std::fs::File::open(apps)?)
    }

    pub fn write<W1: Write, W2: Write>(&self, hosts: W1, apps: W2) -> Result<()> {
        let mut w = csv::Writer::from_writer(hosts);
        w.write_record(["hostname", "app"])?;
        let mut pairs: Vec<_> = self.host_to_app.iter().collect();
        pairs.sort();
        for (h, a) in pairs {
            w.write_record([h, a])?;
        }
        w.flush()?;
        let mut w = csv::Writer::from_writer(apps);
        w.write_record(["app", "category"])?;
        let mut pairs: Vec<_> = self.app_to_category.iter().collect();
        pairs.sort();
        for (a, c) in pairs {
            w.write_record([a, c])?;
        }
        w.flush()?;
        Ok(())
    }

    /// All categories: the five model-input categories first, then any
    /// other dictionary categories in lexical order.
    pub fn categories(&self) -> &[String] {
        &self.categories
    }

    pub fn category_index(&self, category: &str) -> Option<usize> {
        self.categories.iter().position(|c| c == category)
    }

    pub fn category_of_app(&self, app: &str) -> Option<&str> {
        self.app_to_category.get(app).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.host_to_app.len()
    }

    pub fn is_empty(&self) -> bool {
        self.host_to_app.is_empty()
    }

    /// Longest-suffix match over dot-separated labels.
    pub fn map_hostname(&self, hostname: &str) -> HostMapping<'_> {
        let host = hostname.trim_end_matches('.');
        if host.is_empty() {
            return HostMapping {
                app: None,
                category: None,
            };
        }
        // suffixes in decreasing length: the whole name, then after each dot
        let starts = std::iter::once(0).chain(host.match_indices('.').map(|(i, _)| i + 1));
        for start in starts {
            if let Some(app) = self.host_to_app.get(&host[start..]) {
                return HostMapping {
                    app: Some(app),
                    category: self.category_of_app(app),
                };
            }
        }
        HostMapping {
            app: None,
            category: None,
        }
    }
}

fn read_pairs<R: Read>(input: R, left: &str, right: &str) -> Result<Vec<(String, String)>> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(input);
    let headers = reader.headers()?.clone();
    let li = headers.iter().position(|h| h == left);
    let ri = headers.iter().position(|h| h == right);
    let (Some(li), Some(ri)) = (li, ri) else {
        return Err(Error::Config(format!("dictionary file needs columns `{left},{right}`")));
    };
    let mut out = Vec::new();
    for row in reader.records() {
        let row = row?;
        let (Some(l), Some(r)) = (row.get(li), row.get(ri)) else {
            continue;
        };
        if !l.is_empty() && !r.is_empty() {
            out.push((l.to_string(), r.to_string()));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn dict(hosts: &[(&str, &str)], apps: &[(&str, &str)]) -> Dictionary {
        Dictionary::new(
            hosts.iter().map(|(a, b)| (a.to_string(), b.to_string())),
            apps.iter().map(|(a, b)| (a.to_string(), b.to_string())),
        )
        .unwrap()
    }

    /// Scan every suffix and keep the longest key that matches.
    fn brute_force<'a>(d: &'a Dictionary, host: &str) -> Option<&'a str> {
        let labels: Vec<&str> = host.split('.').collect();
        let mut best: Option<(usize, &str)> = None;
        for i in 0..labels.len() {
            let suffix = labels[i..].join(".");
            if let Some(app) = d.host_to_app.get(&suffix) {
                if best.is_none_or(|(len, _)| suffix.len() > len) {
                    best = Some((suffix.len(), app.as_str()));
                }
            }
        }
        best.map(|(_, a)| a)
    }

    #[test]
    fn empty_dictionary_unmapped() {
        let d = Dictionary::default();
        let m = d.map_hostname("example.com");
        assert_eq!((m.app_or_unmapped(), m.category_or_unmapped()), (UNMAPPED, UNMAPPED));
    }

    #[test]
    fn subdomain_matches_suffix() {
        let d = dict(&[("whatsapp.com", "wa")], &[("wa", "communication")]);
        let m = d.map_hostname("web.whatsapp.com");
        assert_eq!(m.app, Some("wa"));
        assert_eq!(m.category, Some("communication"));
        assert_eq!(brute_force(&d, "web.whatsapp.com"), Some("wa"));
    }

    #[test]
    fn longest_suffix_wins() {
        let d = dict(
            &[("google.com", "google"), ("drive.google.com", "gdrive")],
            &[("google", "productivity"), ("gdrive", "productivity")],
        );
        assert_eq!(d.map_hostname("drive.google.com").app, Some("gdrive"));
        assert_eq!(d.map_hostname("x.drive.google.com").app, Some("gdrive"));
        assert_eq!(d.map_hostname("mail.google.com").app, Some("google"));
        // label boundary: "oogle.com" is not a label suffix of "google.com"
        let d2 = dict(&[("oogle.com", "o")], &[("o", "system")]);
        assert_eq!(d2.map_hostname("google.com").app, None);
    }

    #[test]
    fn orphan_app_rejected() {
        let err = Dictionary::new([("a.com".to_string(), "a".to_string())], std::iter::empty());
        assert!(matches!(err, Err(Error::Config(_))));
    }

    #[test]
    fn category_order_is_canonical_then_lexical() {
        let d = dict(&[("x.com", "x"), ("y.com", "y")], &[("x", "gaming"), ("y", "cdn")]);
        let cats: Vec<&str> = d.categories().iter().map(String::as_str).collect();
        assert_eq!(&cats[..5], &MODEL_CATEGORIES);
        assert_eq!(&cats[5..], ["cdn", "gaming"]);
    }

    #[test]
    fn csv_round_trip() {
        let d = dict(&[("a.com", "a"), ("b.org", "b")], &[("a", "streaming"), ("b", "cdn")]);
        let (mut h, mut a) = (Vec::new(), Vec::new());
        d.write(&mut h, &mut a).unwrap();
        let d2 = Dictionary::from_readers(h.as_slice(), a.as_slice()).unwrap();
        assert_eq!(d2.map_hostname("x.a.com").category, Some("streaming"));
        assert_eq!(d2.categories(), d.categories());
    }

    proptest! {
        #[test]
        fn matches_brute_force(
            keys in proptest::collection::vec("[abc]{1,2}(\\.[abc]{1,2}){0,2}", 0..8),
            host in "[abc]{1,2}(\\.[abc]{1,2}){0,3}",
        ) {
            let hosts: Vec<(String, String)> =
                keys.iter().enumerate().map(|(i, k)| (k.clone(), format!("app{i}"))).collect();
            let apps: Vec<(String, String)> =
                (0..keys.len()).map(|i| (format!("app{i}"), "system".to_string())).collect();
            let d = Dictionary::new(hosts, apps).unwrap();
            prop_assert_eq!(d.map_hostname(&host).app, brute_force(&d, &host));
        }
    }
}
