//! Monochrome icons for the image–word test.

use serde::Serialize;

pub struct Icon {
    pub image_id: &'static str,
    pub word: &'static str,
    /// SVG body inside a 64×64 view box.
    body: &'static str,
}

impl Icon {
    pub fn svg(&self) -> String {
        format!(
            r##"<svg xmlns="http://www.w3.org/2000/svg" viewBox="0 0 64 64" width="256" height="256" fill="#111" stroke="#111"><title>{}</title>{}</svg>"##,
            self.word, self.body
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct AssetEntry {
    pub image_id: &'static str,
    pub word: &'static str,
    pub path: String,
}

pub const ICONS: [Icon; 16] = [
    Icon {
        image_id: "img01",
        word: "sun",
        body: r##"<circle cx="32" cy="32" r="12"/><g stroke-width="4" stroke-linecap="round"><line x1="32" y1="4" x2="32" y2="14"/><line x1="32" y1="50" x2="32" y2="60"/><line x1="4" y1="32" x2="14" y2="32"/><line x1="50" y1="32" x2="60" y2="32"/><line x1="12" y1="12" x2="19" y2="19"/><line x1="45" y1="45" x2="52" y2="52"/><line x1="12" y1="52" x2="19" y2="45"/><line x1="45" y1="19" x2="52" y2="12"/></g>"##,
    },
    Icon {
        image_id: "img02",
        word: "moon",
        body: r##"<path d="M40 6a26 26 0 1 0 18 40A22 22 0 0 1 40 6z"/>"##,
    },
    Icon {
        image_id: "img03",
        word: "star",
        body: r##"<polygon points="32,4 40,24 62,24 44,37 51,58 32,45 13,58 20,37 2,24 24,24"/>"##,
    },
    Icon {
        image_id: "img04",
        word: "heart",
        body: r##"<path d="M32 58 8 34C-2 24 6 6 20 8c6 1 10 5 12 9 2-4 6-8 12-9 14-2 22 16 12 26z"/>"##,
    },
    Icon {
        image_id: "img05",
        word: "house",
        body: r##"<polygon points="32,6 4,30 12,30 12,58 52,58 52,30 60,30"/><rect x="27" y="40" width="10" height="18" fill="#fff" stroke="none"/>"##,
    },
    Icon {
        image_id: "img06",
        word: "tree",
        body: r##"<polygon points="32,4 54,40 10,40"/><rect x="27" y="40" width="10" height="18"/>"##,
    },
    Icon {
        image_id: "img07",
        word: "fish",
        body: r##"<ellipse cx="28" cy="32" rx="20" ry="12"/><polygon points="44,32 60,20 60,44"/><circle cx="18" cy="29" r="2.5" fill="#fff" stroke="none"/>"##,
    },
    Icon {
        image_id: "img08",
        word: "key",
        body: r##"<circle cx="16" cy="32" r="11" fill="none" stroke-width="6"/><rect x="26" y="29" width="32" height="6"/><rect x="48" y="35" width="6" height="10"/><rect x="38" y="35" width="6" height="7"/>"##,
    },
    Icon {
        image_id: "img09",
        word: "bell",
        body: r##"<path d="M32 6c-11 0-18 9-18 20v14l-6 8h48l-6-8V26c0-11-7-20-18-20z"/><circle cx="32" cy="54" r="5"/>"##,
    },
    Icon {
        image_id: "img10",
        word: "cloud",
        body: r##"<circle cx="22" cy="36" r="12"/><circle cx="36" cy="28" r="14"/><circle cx="48" cy="38" r="10"/><rect x="14" y="38" width="36" height="10"/>"##,
    },
    Icon {
        image_id: "img11",
        word: "umbrella",
        body: r##"<path d="M4 32a28 26 0 0 1 56 0z"/><path d="M32 32v20a6 6 0 0 1-12 0" fill="none" stroke-width="4"/>"##,
    },
    Icon {
        image_id: "img12",
        word: "cup",
        body: r##"<path d="M10 14h36v26a14 14 0 0 1-14 14h-8a14 14 0 0 1-14-14z"/><path d="M46 20h4a8 8 0 0 1 0 16h-4" fill="none" stroke-width="4"/>"##,
    },
    Icon {
        image_id: "img13",
        word: "leaf",
        body: r##"<path d="M8 56C8 24 28 8 58 6c-2 30-18 50-50 50z"/><line x1="8" y1="56" x2="40" y2="24" stroke="#fff" stroke-width="3"/>"##,
    },
    Icon {
        image_id: "img14",
        word: "anchor",
        body: r##"<circle cx="32" cy="10" r="5" fill="none" stroke-width="4"/><g fill="none" stroke-width="5" stroke-linecap="round"><line x1="32" y1="15" x2="32" y2="56"/><line x1="20" y1="24" x2="44" y2="24"/><path d="M8 36c0 12 10 20 24 20s24-8 24-20"/></g>"##,
    },
    Icon {
        image_id: "img15",
        word: "flag",
        body: r##"<rect x="10" y="4" width="5" height="56"/><polygon points="15,6 56,16 15,28"/>"##,
    },
    Icon {
        image_id: "img16",
        word: "arrow",
        body: r##"<rect x="6" y="27" width="34" height="10"/><polygon points="36,12 60,32 36,52"/>"##,
    },
];

pub fn icon(image_id: &str) -> Option<&'static Icon> {
    ICONS.iter().find(|i| i.image_id == image_id)
}

pub fn manifest() -> Vec<AssetEntry> {
    ICONS
        .iter()
        .map(|i| AssetEntry {
            image_id: i.image_id,
            word: i.word,
            path: format!("/api/v1/assets/{}", i.image_id),
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    #[test]
    fn ids_and_words_are_unique() {
        let ids: HashSet<_> = ICONS.iter().map(|i| i.image_id).collect();
        let words: HashSet<_> = ICONS.iter().map(|i| i.word).collect();
        assert_eq!((ids.len(), words.len()), (16, 16));
        assert!(ICONS.iter().all(|i| i.svg().starts_with("<svg") && i.svg().ends_with("</svg>")));
        assert_eq!(icon("img07").unwrap().word, "fish");
        assert!(icon("img17").is_none());
    }
}
