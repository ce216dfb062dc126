//! Synthetic benchmark generator. Stands in for real benchmark data in tests
//! and demos: random but valid episodes with placeholder screenshots.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::action::{Action, BBox, Button, Dims, Direction, Point};
use crate::task::{write_episodes, Episode, Observation, StepTask, TaskError};

/// A valid 1×1 grayscale PNG.
pub const PLACEHOLDER_PNG: [u8; 67] = [
    0x89, 0x50, 0x4e, 0x47, 0x0d, 0x0a, 0x1a, 0x0a, 0x00, 0x00, 0x00, 0x0d, 0x49, 0x48, 0x44, 0x52, 0x00, 0x00, 0x00,
    0x01, 0x00, 0x00, 0x00, 0x01, 0x08, 0x00, 0x00, 0x00, 0x00, 0x3a, 0x7e, 0x9b, 0x55, 0x00, 0x00, 0x00, 0x0a, 0x49,
    0x44, 0x41, 0x54, 0x78, 0x9c, 0x63, 0x68, 0x00, 0x00, 0x00, 0x82, 0x00, 0x81, 0x77, 0xcd, 0x72, 0xb6, 0x00, 0x00,
    0x00, 0x00, 0x49, 0x45, 0x4e, 0x44, 0xae, 0x42, 0x60, 0x82,
];

const APPS: [&str; 6] = ["Maps", "Clock", "Contacts", "Settings", "Chrome", "Calendar"];
const WORDS: [&str; 8] = ["coffee", "weather today", "alarm 7am", "Alice", "wifi", "news", "flight 302", "pizza near me"];

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FixtureSpec {
    pub benchmark: String,
    pub episodes: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub seed: u64,
    pub dims: Dims,
    /// Share of episodes that end without STOP.
    pub truncated_share: f64,
}

impl Default for FixtureSpec {
    fn default() -> Self {
        FixtureSpec {
            benchmark: "synthetic".into(),
            episodes: 12,
            min_len: 3,
            max_len: 9,
            seed: 7,
            dims: Dims { width: 1080.0, height: 2400.0 },
            truncated_share: 0.0,
        }
    }
}

impl FixtureSpec {
    /// Step counts the generator will produce, in episode order.
    pub fn declared_lengths(&self) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        (0..self.episodes).map(|_| rng.gen_range(self.min_len..=self.max_len)).collect()
    }
}

fn random_point(rng: &mut ChaCha8Rng) -> Point {
    Point::new(rng.gen_range(60..=940), rng.gen_range(60..=940)).expect("in range")
}

fn random_step_action(rng: &mut ChaCha8Rng, first: bool) -> (Action, Option<BBox>) {
    if first && rng.gen_bool(0.3) {
        return (Action::Open { app: APPS.choose(rng).expect("nonempty").to_string() }, None);
    }
    let roll = rng.gen_range(0..100);
    match roll {
        0..=44 => {
            let p = random_point(rng);
            let bbox = rng.gen_bool(0.75).then(|| {
                let (w, h) = (rng.gen_range(20..=60), rng.gen_range(10..=40));
                BBox::new(p.x as i64 - w, p.y as i64 - h, p.x as i64 + w, p.y as i64 + h).expect("inside screen")
            });
            (Action::Click { point: p }, bbox)
        }
        45..=52 => (Action::LongPress { point: random_point(rng), duration_ms: Some(1000) }, None),
        53..=67 => (Action::Scroll { point: random_point(rng), direction: *Direction::ALL.choose(rng).expect("nonempty") }, None),
        68..=79 => (Action::Type { text: WORDS.choose(rng).expect("nonempty").to_string(), submit: rng.gen_bool(0.3) }, None),
        80..=91 => (Action::Press { button: *[Button::Back, Button::Home].choose(rng).expect("nonempty") }, None),
        _ => (Action::Wait { duration_ms: None }, None),
    }
}

/// Generate episodes, writing one placeholder screenshot per step under
/// `dir/screens/`.
pub fn generate_episodes(spec: &FixtureSpec, dir: &Path) -> std::io::Result<Vec<Episode>> {
    let screens = dir.join("screens");
    fs::create_dir_all(&screens)?;
    let lengths = spec.declared_lengths();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x5eed);
    let mut out = Vec::with_capacity(lengths.len());
    for (e, len) in lengths.into_iter().enumerate() {
        let id = format!("{}-{e:03}", spec.benchmark);
        let app = APPS[e % APPS.len()].to_string();
        let truncated = rng.gen_bool(spec.truncated_share);
        let goal = format!("In {app}, do task {e}");
        let mut steps = Vec::with_capacity(len);
        for i in 0..len {
            let path: PathBuf = screens.join(format!("{id}_{i:02}.png"));
            fs::write(&path, PLACEHOLDER_PNG)?;
            let (gt_action, gt_bbox) = if i + 1 == len && !truncated {
                (Action::Stop { status: "finish".into() }, None)
            } else {
                random_step_action(&mut rng, i == 0)
            };
            steps.push(StepTask {
                episode_id: id.clone(),
                step_index: i,
                instruction_high: goal.clone(),
                instruction_low: Some(format!("sub-goal {}", i + 1)),
                observation: Observation { screenshot: path, text_desc: None, dims: spec.dims },
                gt_action,
                gt_bbox,
            });
        }
        out.push(Episode {
            id,
            app,
            device: "phone".into(),
            benchmark: spec.benchmark.clone(),
            split: "test".into(),
            steps,
            extra: Vec::new(),
        });
    }
    Ok(out)
}

/// Generate and write `dir/episodes.jsonl`; returns its path and the episodes.
pub fn write_fixture_benchmark(spec: &FixtureSpec, dir: &Path) -> Result<(PathBuf, Vec<Episode>), TaskError> {
    let path = dir.join("episodes.jsonl");
    let episodes =
        generate_episodes(spec, dir).map_err(|source| TaskError::Unwritable { path: dir.to_path_buf(), source })?;
    write_episodes(&path, &episodes)?;
    Ok((path, episodes))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::task::{load_episodes, LoadOptions};

    #[test]
    fn counts_match_declaration_and_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let spec = FixtureSpec { episodes: 20, truncated_share: 0.2, ..Default::default() };
        let (path, eps) = write_fixture_benchmark(&spec, dir.path()).unwrap();
        let report = load_episodes(&path, &LoadOptions::default()).unwrap();
        assert!(report.rejections.is_empty(), "{:?}", report.rejections);
        let lens: Vec<usize> = report.episodes.iter().map(Episode::len).collect();
        assert_eq!(lens, spec.declared_lengths());
        assert_eq!(report.episodes, eps);
        assert!(eps.iter().any(Episode::is_truncated));
    }
}
