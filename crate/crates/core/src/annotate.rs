//! Human rating sessions: feasibility correctness and naturalness of synthetic images.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::manifest::write_atomic;
use crate::model::{AttributeCategory, Feasibility, FilterStatus, ImageKind, Manifest};
use crate::prompts::render_prompt;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotationItem {
    pub image_id: String,
    pub prompt: String,
    pub category: AttributeCategory,
    pub feasibility: Feasibility,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rating {
    pub annotator_id: String,
    pub image_id: String,
    pub feasibility_correct: bool,
    /// 1 (unnatural) to 5 (most natural).
    pub naturalness: u8,
    /// Seconds since the Unix epoch.
    pub timestamp: u64,
}

impl Rating {
    pub fn validate(&self) -> Result<()> {
        if !(1..=5).contains(&self.naturalness) {
            return Err(Error::InvalidRating(format!("naturalness {} outside 1..=5", self.naturalness)));
        }
        if self.annotator_id.trim().is_empty() {
            return Err(Error::InvalidRating("empty annotator id".into()));
        }
        Ok(())
    }
}

/// Stratified sample of accepted synthetic images: up to `per_cell` per (category, feasibility).
pub fn sample_items(manifest: &Manifest, per_cell: usize, seed: u64) -> Result<Vec<AnnotationItem>> {
    let mut cells: BTreeMap<(AttributeCategory, Feasibility), Vec<AnnotationItem>> = BTreeMap::new();
    for rec in &manifest.images {
        if rec.kind != ImageKind::Synthetic || rec.filter_status != FilterStatus::Accepted {
            continue;
        }
        let Some(prompt) = rec.prompt_id.as_deref().and_then(|p| manifest.prompt(p)) else {
            return Err(Error::Schema(format!("synthetic image `{}` has no prompt", rec.image_id)));
        };
        let class = manifest
            .class(rec.class_id)
            .ok_or_else(|| Error::Schema(format!("class {} not in manifest", rec.class_id)))?;
        cells.entry((prompt.category, prompt.feasibility)).or_default().push(AnnotationItem {
            image_id: rec.image_id.clone(),
            prompt: render_prompt(prompt, class),
            category: prompt.category,
            feasibility: prompt.feasibility,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for (_, mut items) in cells {
        items.shuffle(&mut rng);
        items.truncate(per_cell);
        items.sort_by(|a, b| a.image_id.cmp(&b.image_id));
        out.extend(items);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationSession {
    pub seed: u64,
    pub items: Vec<AnnotationItem>,
    /// Keyed by (annotator, image); a later rating replaces an earlier one.
    ratings: BTreeMap<String, BTreeMap<String, Rating>>,
}

impl AnnotationSession {
    pub fn new(items: Vec<AnnotationItem>, seed: u64) -> Result<Self> {
        let mut seen = BTreeSet::new();
        for it in &items {
            if !seen.insert(it.image_id.as_str()) {
                return Err(Error::Schema(format!("duplicate annotation item `{}`", it.image_id)));
            }
        }
        Ok(AnnotationSession { seed, items, ratings: BTreeMap::new() })
    }

    pub fn item(&self, image_id: &str) -> Option<&AnnotationItem> {
        self.items.iter().find(|i| i.image_id == image_id)
    }

    /// Item order for one annotator; the same for every call.
    pub fn order_for(&self, annotator: &str) -> Vec<usize> {
        let d = Sha256::new().chain_update(self.seed.to_le_bytes()).chain_update(annotator.as_bytes()).finalize();
        let s = u64::from_le_bytes(d[..8].try_into().expect("8 bytes"));
        let mut idx: Vec<usize> = (0..self.items.len()).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(s));
        idx
    }

    /// The next item this annotator has not rated, or `None` when done.
    pub fn next_for(&self, annotator: &str) -> Option<&AnnotationItem> {
        let rated = self.ratings.get(annotator);
        self.order_for(annotator)
            .into_iter()
            .map(|i| &self.items[i])
            .find(|it| !rated.is_some_and(|r| r.contains_key(&it.image_id)))
    }

    pub fn submit(&mut self, rating: Rating) -> Result<()> {
        rating.validate()?;
        if self.item(&rating.image_id).is_none() {
            return Err(Error::UnknownItem(rating.image_id));
        }
        self.ratings.entry(rating.annotator_id.clone()).or_default().insert(rating.image_id.clone(), rating);
        Ok(())
    }

    pub fn rated_count(&self, annotator: &str) -> usize {
        self.ratings.get(annotator).map_or(0, |r| r.len())
    }

    /// All ratings, ordered by annotator then image.
    pub fn ratings(&self) -> Vec<Rating> {
        self.ratings.values().flat_map(|m| m.values().cloned()).collect()
    }

    pub fn export_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["annotator_id", "image_id", "category", "feasibility", "feasibility_correct", "naturalness", "timestamp"])
            .map_err(csv_err)?;
        for r in self.ratings() {
            let item = self.item(&r.image_id).expect("ratings only reference known items");
            w.write_record([
                r.annotator_id.as_str(),
                r.image_id.as_str(),
                item.category.as_str(),
                item.feasibility.as_str(),
                if r.feasibility_correct { "true" } else { "false" },
                &r.naturalness.to_string(),
                &r.timestamp.to_string(),
            ])
            .map_err(csv_err)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Config(format!("csv: {e}")))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path.as_ref(), serde_json::to_string_pretty(self)?.as_bytes())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Config(format!("csv: {e}"))
}

/// One line of the rating summary. `category == None` is the average over categories.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub category: Option<AttributeCategory>,
    pub feasibility: Feasibility,
    pub n: usize,
    /// Percentage of ratings marking the claimed feasibility as correct.
    pub correctness: f64,
    /// Mean naturalness, rounded to 2 decimals.
    pub naturalness: f64,
}

fn round2(v: f64) -> f64 {
    (v * 100.0).round() / 100.0
}

/// Per (category, feasibility) correctness % and mean naturalness, then one averaged row per
/// feasibility over the categories present.
pub fn aggregate_ratings(items: &[AnnotationItem], ratings: &[Rating]) -> Result<Vec<AggregateRow>> {
    if ratings.is_empty() {
        return Err(Error::EmptyInput("ratings"));
    }
    let by_id: BTreeMap<&str, &AnnotationItem> = items.iter().map(|i| (i.image_id.as_str(), i)).collect();
    let mut cells: BTreeMap<(Feasibility, AttributeCategory), (usize, usize, u64)> = BTreeMap::new();
    for r in ratings {
        r.validate()?;
        let item = by_id.get(r.image_id.as_str()).ok_or_else(|| Error::UnknownItem(r.image_id.clone()))?;
        let c = cells.entry((item.feasibility, item.category)).or_default();
        c.0 += 1;
        c.1 += r.feasibility_correct as usize;
        c.2 += r.naturalness as u64;
    }
    let mut rows = Vec::new();
    for feas in Feasibility::ALL {
        let mut sub = Vec::new();
        for cat in AttributeCategory::ALL {
            if let Some(&(n, ok, nat)) = cells.get(&(feas, cat)) {
                let correctness = 100.0 * ok as f64 / n as f64;
                let naturalness = nat as f64 / n as f64;
                sub.push((correctness, naturalness, n));
                rows.push(AggregateRow { category: Some(cat), feasibility: feas, n, correctness: round2(correctness), naturalness: round2(naturalness) });
            }
        }
        if !sub.is_empty() {
            let k = sub.len() as f64;
            rows.push(AggregateRow {
                category: None,
                feasibility: feas,
                n: sub.iter().map(|s| s.2).sum(),
                correctness: round2(sub.iter().map(|s| s.0).sum::<f64>() / k),
                naturalness: round2(sub.iter().map(|s| s.1).sum::<f64>() / k),
            });
        }
    }
    Ok(rows)
}

pub fn format_summary(rows: &[AggregateRow]) -> String {
    let mut out = String::from("feasibility category    n     correct%  naturalness\n");
    for r in rows {
        out.push_str(&format!(
            "{:<11} {:<10} {:>5} {:>9.2} {:>12.2}\n",
            r.feasibility.as_str(),
            r.category.map_or("average", |c| c.as_str()),
            r.n,
            r.correctness,
            r.naturalness
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn items(n: usize) -> Vec<AnnotationItem> {
        (0..n)
            .map(|i| AnnotationItem {
                image_id: format!("img{i}"),
                prompt: format!("prompt {i}"),
                category: AttributeCategory::ALL[i % 3],
                feasibility: Feasibility::ALL[(i / 3) % 2],
            })
            .collect()
    }

    fn rating(a: &str, id: &str, ok: bool, nat: u8) -> Rating {
        Rating { annotator_id: a.into(), image_id: id.into(), feasibility_correct: ok, naturalness: nat, timestamp: 0 }
    }

    #[test]
    fn each_item_served_once_then_done() {
        let mut s = AnnotationSession::new(items(7), 3).unwrap();
        let mut seen = BTreeSet::new();
        while let Some(it) = s.next_for("ann1").cloned() {
            assert!(seen.insert(it.image_id.clone()));
            s.submit(rating("ann1", &it.image_id, true, 4)).unwrap();
        }
        assert_eq!(seen.len(), 7);
        assert!(s.next_for("ann2").is_some());
    }

    #[test]
    fn order_is_stable_per_annotator() {
        let s = AnnotationSession::new(items(20), 3).unwrap();
        assert_eq!(s.order_for("a"), s.order_for("a"));
        assert_ne!(s.order_for("a"), s.order_for("b"));
    }

    #[test]
    fn invalid_and_unknown_rejected() {
        let mut s = AnnotationSession::new(items(2), 0).unwrap();
        assert!(matches!(s.submit(rating("a", "img0", true, 6)), Err(Error::InvalidRating(_))));
        assert!(matches!(s.submit(rating("a", "img0", true, 0)), Err(Error::InvalidRating(_))));
        assert!(matches!(s.submit(rating("a", "nope", true, 3)), Err(Error::UnknownItem(_))));
        assert!(s.ratings().is_empty());
    }

    #[test]
    fn resubmission_overwrites() {
        let mut s = AnnotationSession::new(items(2), 0).unwrap();
        s.submit(rating("a", "img0", true, 2)).unwrap();
        s.submit(rating("a", "img0", false, 5)).unwrap();
        assert_eq!(s.ratings(), vec![rating("a", "img0", false, 5)]);
        let csv = s.export_csv().unwrap();
        assert_eq!(csv.lines().count(), 2);
        assert!(csv.lines().nth(1).unwrap().starts_with("a,img0,background,feasible,false,5,"));
    }

    #[test]
    fn duplicate_items_rejected() {
        let mut it = items(2);
        it[1].image_id = "img0".into();
        assert!(AnnotationSession::new(it, 0).is_err());
    }

    #[test]
    fn session_round_trips_through_disk() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = AnnotationSession::new(items(3), 9).unwrap();
        s.submit(rating("a", "img1", true, 3)).unwrap();
        s.save(dir.path().join("s.json")).unwrap();
        assert_eq!(AnnotationSession::load(dir.path().join("s.json")).unwrap(), s);
    }

    #[test]
    fn aggregate_hand_computed() {
        let it = items(6);
        // img0 bg/F, img1 color/F, img2 texture/F, img3 bg/IF, img4 color/IF, img5 texture/IF
        let r = vec![
            rating("a", "img0", true, 5),
            rating("b", "img0", false, 4),
            rating("c", "img0", true, 4),
            rating("a", "img1", true, 3),
            rating("a", "img2", true, 2),
            rating("a", "img3", false, 1),
            rating("b", "img3", true, 2),
        ];
        let rows = aggregate_ratings(&it, &r).unwrap();
        let bg_f = &rows[0];
        assert_eq!((bg_f.n, bg_f.correctness, bg_f.naturalness), (3, 66.67, 4.33));
        let avg_f = rows.iter().find(|r| r.category.is_none() && r.feasibility == Feasibility::Feasible).unwrap();
        // (66.666 + 100 + 100) / 3, (4.333 + 3 + 2) / 3
        assert_eq!((avg_f.correctness, avg_f.naturalness), (88.89, 3.11));
        let bg_if = rows.iter().find(|r| r.category == Some(AttributeCategory::Background) && r.feasibility == Feasibility::Infeasible).unwrap();
        assert_eq!((bg_if.correctness, bg_if.naturalness), (50.0, 1.5));
        assert_eq!(rows.len(), 3 + 1 + 1 + 1);
        assert!(aggregate_ratings(&it, &[]).is_err());
    }

    #[test]
    fn all_perfect() {
        let it = items(6);
        let r: Vec<Rating> = it.iter().map(|i| rating("a", &i.image_id, true, 5)).collect();
        for row in aggregate_ratings(&it, &r).unwrap() {
            assert_eq!((row.correctness, row.naturalness), (100.0, 5.0));
        }
    }

    proptest! {
        #[test]
        fn export_is_loss_free(posts in proptest::collection::vec((0usize..3, 0usize..5, any::<bool>(), 1u8..=5), 0..40)) {
            let mut s = AnnotationSession::new(items(5), 1).unwrap();
            let mut expected = BTreeMap::new();
            for (a, i, ok, nat) in posts {
                let r = rating(&format!("ann{a}"), &format!("img{i}"), ok, nat);
                s.submit(r.clone()).unwrap();
                expected.insert((r.annotator_id.clone(), r.image_id.clone()), r);
            }
            prop_assert_eq!(s.ratings(), expected.into_values().collect::<Vec<_>>());
            prop_assert_eq!(s.export_csv().unwrap().lines().count(), s.ratings().len() + 1);
        }
    }
}
