//! The bundled 200-review mini corpus: 20 users by 10 hotels, built from a
//! closed-form rule so it can be regenerated and checked byte for byte.

use std::path::{Path, PathBuf};

use serde_json::json;

pub const USERS: usize = 20;
pub const ITEMS: usize = 10;

const KEYWORDS: [&str; 11] = [
    "bed", "breakfast", "staff", "location", "wifi", "pool", "bathroom", "parking", "view", "price", "noise",
];
const GOOD: [&str; 5] = ["excellent", "wonderful", "great", "comfortable", "lovely"];
const BAD: [&str; 5] = ["terrible", "poor", "disappointing", "awful", "cramped"];

pub const MINI_CONFIG: &str = r#"[run]
seed = 7
output_dir = "out"

[dataset]
path = "reviews.jsonl"
format = "jsonl"
min_interactions = 5

[domain]
name = "accommodation"

[gateway]
backend = "mock"

[clustering]
k_u = 6
k_i = 6
max_iter = 50
restarts = 4
representatives = 5

[classifier]
tune_budget = 0

[classifier.params]
n_estimators = 50
eta = 0.3
max_depth = 4
min_child_weight = 1.0
colsample_bytree = 1.0
gamma = 0.0
use_weight = false

[explainer]
top_k = 5
"#;

/// The two aspects user `u` cares about.
fn user_aspects(u: usize) -> [usize; 2] {
    [u % 11, (3 * u + 5) % 11]
}

/// Whether hotel `i` does well on aspect `a`.
fn item_good_at(i: usize, a: usize) -> bool {
    (a + 2 * i) % 3 != 0
}

/// One JSON line per review, users outer, items inner.
pub fn mini_reviews() -> Vec<String> {
    let mut lines = Vec::with_capacity(USERS * ITEMS);
    for u in 0..USERS {
        for i in 0..ITEMS {
            let aspects = user_aspects(u);
            let mut good = 0;
            let mut sentences = vec![format!("Stayed at hotel {i} for {} nights.", 1 + (u + i) % 4)];
            for (k, &a) in aspects.iter().enumerate() {
                let pick = (u + i + k) % 5;
                let adj = if item_good_at(i, a) {
                    good += 1;
                    GOOD[pick]
                } else {
                    BAD[pick]
                };
                sentences.push(format!("The {} was {adj}.", KEYWORDS[a]));
            }
            let rating = match good {
                0 => 1 + (u + i) % 2,
                1 => 3,
                _ => 4 + (u + i) % 2,
            };
            let line = json!({
                "id": format!("r{u:02}{i:02}"),
                "user": format!("u{u:02}"),
                "item": format!("h{i:02}"),
                "rating": rating,
                "text": sentences.join(" "),
            });
            lines.push(line.to_string());
        }
    }
    lines
}

pub fn mini_reviews_jsonl() -> String {
    let mut s = mini_reviews().join("\n");
    s.push('\n');
    s
}

/// Writes `reviews.jsonl` and `config.toml` into `dir`; returns the config path.
pub fn write_mini_fixture(dir: &Path) -> std::io::Result<PathBuf> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("reviews.jsonl"), mini_reviews_jsonl())?;
    let config = dir.join("config.toml");
    std::fs::write(&config, MINI_CONFIG)?;
    Ok(config)
}
