//! Synthetic-to-real ratio sweeps with nested, seeded subsamples.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{AttributeCategory, Feasibility, Manifest};
use crate::train::{load_train_data, DataRegime, Example, FeasibilityRegime, Regime, TrainData};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScalingPoint {
    pub ratio: u32,
    pub n_syn: usize,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingCurve {
    pub category: AttributeCategory,
    pub feasibility: Feasibility,
    pub points: Vec<ScalingPoint>,
}

/// The first `n` items of one seeded shuffle, so larger `n` always contain smaller ones.
pub fn nested_subsample<T: Clone>(items: &[T], n: usize, seed: u64) -> Result<Vec<T>> {
    if n > items.len() {
        return Err(Error::Precondition(format!("cannot take {n} of {}", items.len())));
    }
    let mut idx: Vec<usize> = (0..items.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok(idx[..n].iter().map(|&i| items[i].clone()).collect())
}

/// One curve: for each ratio r, train on all real examples plus `r·|real|` synthetic ones.
pub fn scaling_curve(
    real: &[Example],
    syn: &[Example],
    class_names: &[String],
    ratios: &[u32],
    seed: u64,
    mut train_fn: impl FnMut(u32, &TrainData) -> Result<f64>,
) -> Result<Vec<ScalingPoint>> {
    if ratios.is_empty() {
        return Err(Error::EmptyInput("ratio list"));
    }
    let max = *ratios.iter().max().expect("non-empty");
    let needed = max as usize * real.len();
    if needed > syn.len() {
        return Err(Error::InsufficientSynthetic { ratio: max, needed, available: syn.len() });
    }
    let mut points = Vec::with_capacity(ratios.len());
    for &r in ratios {
        let n_syn = r as usize * real.len();
        let data = TrainData { real: real.to_vec(), syn: nested_subsample(syn, n_syn, seed)?, class_names: class_names.to_vec() };
        let accuracy = train_fn(r, &data)?;
        points.push(ScalingPoint { ratio: r, n_syn, accuracy });
    }
    Ok(points)
}

/// Sweep every (category, feasibility) pool of accepted synthetic images in the manifest.
/// `train_fn` receives the pool key, the ratio and the training data, and returns accuracy.
pub fn scaling_run(
    manifest: &Manifest,
    root: &Path,
    ratios: &[u32],
    seed: u64,
    mut train_fn: impl FnMut(AttributeCategory, Feasibility, u32, &TrainData) -> Result<f64>,
) -> Result<Vec<ScalingCurve>> {
    let data = load_train_data(manifest, root, Regime::new(DataRegime::Mixed, FeasibilityRegime::Mix))?;
    let mut pools: BTreeMap<(AttributeCategory, Feasibility), Vec<Example>> = BTreeMap::new();
    for ex in data.syn {
        let prompt = manifest
            .image(&ex.id)
            .and_then(|rec| rec.prompt_id.as_deref())
            .and_then(|p| manifest.prompt(p))
            .ok_or_else(|| Error::Schema(format!("synthetic image `{}` has no prompt", ex.id)))?;
        pools.entry((prompt.category, prompt.feasibility)).or_default().push(ex);
    }
    let mut curves = Vec::new();
    for ((category, feasibility), syn) in pools {
        let points = scaling_curve(&data.real, &syn, &data.class_names, ratios, seed, |r, d| train_fn(category, feasibility, r, d))?;
        curves.push(ScalingCurve { category, feasibility, points });
    }
    Ok(curves)
}

/// Static SVG line plot of accuracy against ratio, one polyline per curve.
pub fn plot_svg(curves: &[ScalingCurve]) -> String {
    const W: f64 = 480.0;
    const H: f64 = 320.0;
    const PAD: f64 = 40.0;
    const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];
    let all: Vec<&ScalingPoint> = curves.iter().flat_map(|c| &c.points).collect();
    let (rmin, rmax) = all.iter().fold((u32::MAX, 0), |(lo, hi), p| (lo.min(p.ratio), hi.max(p.ratio)));
    let (amin, amax) = all.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| (lo.min(p.accuracy), hi.max(p.accuracy)));
    let rspan = (rmax.saturating_sub(rmin)).max(1) as f64;
    let aspan = if (amax - amin).abs() < 1e-9 { 1.0 } else { amax - amin };
    let x = |r: u32| PAD + (r.saturating_sub(rmin)) as f64 / rspan * (W - 2.0 * PAD);
    let y = |a: f64| H - PAD - (a - amin) / aspan * (H - 2.0 * PAD);

    let mut svg = format!("<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" viewBox=\"0 0 {W} {H}\">\n");
    svg.push_str(&format!(
        "<line x1=\"{PAD}\" y1=\"{b}\" x2=\"{r}\" y2=\"{b}\" stroke=\"black\"/><line x1=\"{PAD}\" y1=\"{PAD}\" x2=\"{PAD}\" y2=\"{b}\" stroke=\"black\"/>\n",
        b = H - PAD,
        r = W - PAD
    ));
    if !all.is_empty() {
        svg.push_str(&format!("<text x=\"{}\" y=\"{}\" font-size=\"11\">ratio (syn:real)</text>\n", W / 2.0 - 40.0, H - 8.0));
        svg.push_str(&format!("<text x=\"4\" y=\"{}\" font-size=\"11\">{amax:.1}</text>\n", PAD + 4.0));
        svg.push_str(&format!("<text x=\"4\" y=\"{}\" font-size=\"11\">{amin:.1}</text>\n", H - PAD));
    }
    for (i, c) in curves.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let pts: Vec<String> = c.points.iter().map(|p| format!("{:.1},{:.1}", x(p.ratio), y(p.accuracy))).collect();
        svg.push_str(&format!("<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"2\" points=\"{}\"/>\n", pts.join(" ")));
        for p in &c.points {
            svg.push_str(&format!("<circle cx=\"{:.1}\" cy=\"{:.1}\" r=\"3\" fill=\"{color}\"/>\n", x(p.ratio), y(p.accuracy)));
        }
        svg.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" font-size=\"11\" fill=\"{color}\">{} {}</text>\n",
            W - PAD - 110.0,
            PAD + 14.0 * i as f64,
            c.category,
            c.feasibility.short()
        ));
    }
    svg.push_str("</svg>\n");
    svg
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::RgbImage;
    use proptest::prelude::*;

    fn ex(id: usize) -> Example {
        Example { id: format!("e{id}"), image: RgbImage::new(1, 1), label: id % 2 }
    }

    #[test]
    fn five_ratios_give_five_points() {
        let real: Vec<Example> = (0..3).map(ex).collect();
        let syn: Vec<Example> = (100..115).map(ex).collect();
        let pts = scaling_curve(&real, &syn, &["a".into(), "b".into()], &[1, 2, 3, 4, 5], 7, |r, d| {
            assert_eq!(d.syn.len(), r as usize * 3);
            Ok(r as f64)
        })
        .unwrap();
        assert_eq!(pts.len(), 5);
        assert_eq!(pts.iter().map(|p| p.n_syn).collect::<Vec<_>>(), vec![3, 6, 9, 12, 15]);
    }

    #[test]
    fn insufficient_synthetic() {
        let real: Vec<Example> = (0..3).map(ex).collect();
        let syn: Vec<Example> = (100..108).map(ex).collect();
        let err = scaling_curve(&real, &syn, &[], &[1, 3], 0, |_, _| Ok(0.0)).unwrap_err();
        assert!(matches!(err, Error::InsufficientSynthetic { ratio: 3, needed: 9, available: 8 }));
    }

    #[test]
    fn svg_has_one_polyline_per_curve() {
        let c = |f| ScalingCurve {
            category: AttributeCategory::Color,
            feasibility: f,
            points: vec![ScalingPoint { ratio: 1, n_syn: 2, accuracy: 50.0 }, ScalingPoint { ratio: 2, n_syn: 4, accuracy: 60.0 }],
        };
        let svg = plot_svg(&[c(Feasibility::Feasible), c(Feasibility::Infeasible)]);
        assert_eq!(svg.matches("<polyline").count(), 2);
        assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
    }

    proptest! {
        #[test]
        fn subsamples_are_nested(len in 1usize..60, a in 0usize..60, b in 0usize..60, seed in any::<u64>()) {
            let items: Vec<usize> = (0..len).collect();
            let (small, big) = (a.min(b).min(len), a.max(b).min(len));
            let s = nested_subsample(&items, small, seed).unwrap();
            let l = nested_subsample(&items, big, seed).unwrap();
            prop_assert!(s.iter().all(|x| l.contains(x)));
            let mut dedup = l.clone();
            dedup.sort_unstable();
            dedup.dedup();
            prop_assert_eq!(dedup.len(), l.len());
        }
    }
}
