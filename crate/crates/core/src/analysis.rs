//! Cosine-similarity ranking of sentence pairs: how many pairs of each gold
//! group land in the top-k most similar pairs under a model's encodings.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::Example;
use crate::error::{Error, Result};
use crate::nn::Target;
use crate::run::AnyModel;

/// `u·v / (‖u‖‖v‖)`, clamped to [−1, 1].
pub fn cosine(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::Contract(format!("cosine of vectors of length {} and {}", u.len(), v.len())));
    }
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    let nu = u.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nv = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    if nu == 0.0 || nv == 0.0 {
        return Err(Error::UndefinedMetric("cosine with a zero vector".into()));
    }
    Ok((dot / (nu * nv)).clamp(-1.0, 1.0))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairScore {
    pub id: usize,
    pub group: String,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RankDistribution {
    pub k: usize,
    /// Pairs per gold group among the top `k`; every group present in the
    /// input appears, possibly with count zero.
    pub counts: BTreeMap<String, usize>,
}

/// Sorts by descending score (ties by ascending id) and counts the groups
/// of the first `k` pairs.
pub fn topk_distribution(pairs: &[PairScore], k: usize) -> Result<RankDistribution> {
    if k > pairs.len() {
        return Err(Error::Contract(format!("top-{k} requested from {} pairs", pairs.len())));
    }
    let mut order: Vec<&PairScore> = pairs.iter().collect();
    order.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.id.cmp(&b.id)));
    let mut counts: BTreeMap<String, usize> = pairs.iter().map(|p| (p.group.clone(), 0)).collect();
    for p in &order[..k] {
        *counts.get_mut(&p.group).expect("seeded above") += 1;
    }
    Ok(RankDistribution { k, counts })
}

/// Quartile label `Q1`..`Q4` of each gold value, by rank among all golds.
/// Equal golds always share a quartile: the one of their first rank.
pub fn quartile_groups(golds: &[f64]) -> Vec<String> {
    let n = golds.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| golds[a].total_cmp(&golds[b]).then(a.cmp(&b)));
    let mut out = vec![String::new(); n];
    let mut q = 0;
    for (rank, &i) in order.iter().enumerate() {
        let tied = rank > 0 && golds[order[rank - 1]] == golds[i];
        if !tied {
            q = rank * 4 / n;
        }
        out[i] = format!("Q{}", q + 1);
    }
    out
}

/// Gold group of every pair: the class label for classification tasks,
/// the gold quartile for regression tasks.
pub fn gold_groups(examples: &[Example]) -> Vec<String> {
    if examples.iter().all(|e| matches!(e.label, Target::Class(_))) {
        return examples
            .iter()
            .map(|e| match e.label {
                Target::Class(c) => format!("label={c}"),
                Target::Real(_) => unreachable!(),
            })
            .collect();
    }
    let golds: Vec<f64> = examples
        .iter()
        .map(|e| match e.label {
            Target::Class(c) => c as f64,
            Target::Real(y) => y,
        })
        .collect();
    quartile_groups(&golds)
}

/// Cosine between the model's encodings of the two sentences of every pair,
/// each sentence encoded on its own.
pub fn pair_scores(model: &AnyModel, examples: &[Example], groups: &[String]) -> Result<Vec<PairScore>> {
    if groups.len() != examples.len() {
        return Err(Error::Contract("one gold group per pair required".into()));
    }
    examples
        .iter()
        .zip(groups)
        .map(|(e, g)| {
            let s2 = e
                .s2
                .as_deref()
                .ok_or_else(|| Error::Contract(format!("example {} is not a sentence pair", e.id)))?;
            let score = cosine(&model.cls_vector(&e.s1)?, &model.cls_vector(s2)?)?;
            Ok(PairScore {
                id: e.id,
                group: g.clone(),
                score,
            })
        })
        .collect()
}

pub const COSINE_KS: [usize; 3] = [100, 200, 300];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CosineRow {
    pub k: usize,
    pub baseline: RankDistribution,
    pub idpg: RankDistribution,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CosineReport {
    pub pairs: usize,
    /// Pairs per gold group in the whole set.
    pub group_sizes: BTreeMap<String, usize>,
    pub rows: Vec<CosineRow>,
}

/// Ranks every pair under both models and tabulates the top-`k` group
/// counts for each `k`.
pub fn compare_models(baseline: &AnyModel, idpg: &AnyModel, examples: &[Example], ks: &[usize]) -> Result<CosineReport> {
    let groups = gold_groups(examples);
    let base = pair_scores(baseline, examples, &groups)?;
    let ours = pair_scores(idpg, examples, &groups)?;
    let mut group_sizes = BTreeMap::new();
    for g in &groups {
        *group_sizes.entry(g.clone()).or_insert(0) += 1;
    }
    let rows = ks
        .iter()
        .map(|&k| {
            Ok(CosineRow {
                k,
                baseline: topk_distribution(&base, k)?,
                idpg: topk_distribution(&ours, k)?,
            })
        })
        .collect::<Result<_>>()?;
    Ok(CosineReport {
        pairs: examples.len(),
        group_sizes,
        rows,
    })
}

impl CosineReport {
    /// One table per `k`: a row per gold group with both models' counts.
    pub fn render(&self) -> String {
        let mut s = String::new();
        for row in &self.rows {
            let _ = writeln!(s, "top-{} of {} pairs", row.k, self.pairs);
            let _ = writeln!(s, "{:<10} {:>8} {:>8} {:>8}", "group", "size", "baseline", "idpg");
            for (g, size) in &self.group_sizes {
                let _ = writeln!(
                    s,
                    "{:<10} {:>8} {:>8} {:>8}",
                    g, size, row.baseline.counts[g], row.idpg.counts[g]
                );
            }
            s.push('\n');
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ps(id: usize, group: &str, score: f64) -> PairScore {
        PairScore {
            id,
            group: group.into(),
            score,
        }
    }

    #[test]
    fn cosine_hand_values() {
        assert!((cosine(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(cosine(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        let expect = 11.0 / (5.0f64.sqrt() * 25.0f64.sqrt());
        assert!((cosine(&[1.0, 2.0], &[3.0, 4.0]).unwrap() - expect).abs() < 1e-15);
        assert!((expect - 0.98386991).abs() < 1e-8);
        assert!(matches!(cosine(&[0.0, 0.0], &[1.0, 1.0]), Err(Error::UndefinedMetric(_))));
        assert!(matches!(cosine(&[1.0], &[1.0, 1.0]), Err(Error::Contract(_))));
    }

    #[test]
    fn hand_sorted_top_two() {
        let pairs = [ps(0, "A", 0.9), ps(1, "B", 0.5), ps(2, "A", 0.1)];
        let d = topk_distribution(&pairs, 2).unwrap();
        assert_eq!(d.counts, BTreeMap::from([("A".into(), 1), ("B".into(), 1)]));
        let all = topk_distribution(&pairs, 3).unwrap();
        assert_eq!(all.counts, BTreeMap::from([("A".into(), 2), ("B".into(), 1)]));
        assert!(matches!(topk_distribution(&pairs, 4), Err(Error::Contract(_))));
    }

    #[test]
    fn equal_scores_rank_by_id() {
        let pairs = [ps(3, "C", 0.5), ps(1, "B", 0.5), ps(0, "A", 0.5), ps(2, "C", 0.5)];
        let d = topk_distribution(&pairs, 2).unwrap();
        assert_eq!(d.counts, BTreeMap::from([("A".into(), 1), ("B".into(), 1), ("C".into(), 0)]));
    }

    #[test]
    fn quartiles_split_by_rank() {
        let g = quartile_groups(&[0.1, 0.9, 0.5, 0.3, 0.7, 0.2, 0.8, 0.6]);
        assert_eq!(g, ["Q1", "Q4", "Q2", "Q2", "Q3", "Q1", "Q4", "Q3"]);
        let tied = quartile_groups(&[1.0, 1.0, 1.0, 2.0]);
        assert_eq!(tied, ["Q1", "Q1", "Q1", "Q4"]);
    }

    #[test]
    fn identical_models_rank_identically() {
        use crate::accountant::Method;
        use crate::data::{synth_task, SynthKind};
        use crate::nn::TransformerConfig;
        use crate::run::ModelSection;
        use crate::train::Precision;

        let ds = synth_task(SynthKind::PairOverlap, 60, 4);
        let section = ModelSection {
            method: Method::MIdpgPhm,
            dims: crate::accountant::Dims {
                m: Some(4),
                t: Some(2),
                n: Some(2),
                ..Default::default()
            },
            transformer: TransformerConfig {
                hidden: 8,
                ffn_inner: 16,
                vocab_size: 20,
                max_seq: 16,
                ..TransformerConfig::default()
            },
            embedding_table: None,
        };
        let (a, _) = AnyModel::build(&section, &ds, Precision::F64, 1).unwrap();
        let report = compare_models(&a, &a.clone(), &ds.train, &[10, 20, 36]).unwrap();
        assert_eq!(report.group_sizes.values().sum::<usize>(), 36);
        for row in &report.rows {
            assert_eq!(row.baseline, row.idpg);
            assert_eq!(row.idpg.counts.values().sum::<usize>(), row.k);
        }
        assert!(report.render().contains("top-20 of 36 pairs"));
    }

    proptest! {
        #[test]
        fn counts_conserved_and_match_brute_force(
            raw in proptest::collection::vec((0u8..4, -100i32..100), 1..60),
            kf in 0.0f64..=1.0,
        ) {
            let pairs: Vec<PairScore> = raw
                .iter()
                .enumerate()
                .map(|(i, &(g, s))| ps(i, &format!("g{g}"), s as f64 / 100.0))
                .collect();
            let k = (kf * pairs.len() as f64).floor() as usize;
            let d = topk_distribution(&pairs, k).unwrap();
            prop_assert_eq!(d.counts.values().sum::<usize>(), k);
            // Selection by repeated maximum with the same tie rule.
            let mut left: Vec<&PairScore> = pairs.iter().collect();
            let mut brute: BTreeMap<String, usize> = pairs.iter().map(|p| (p.group.clone(), 0)).collect();
            for _ in 0..k {
                let mut best = 0;
                for (j, p) in left.iter().enumerate() {
                    let b = left[best];
                    if p.score > b.score || (p.score == b.score && p.id < b.id) {
                        best = j;
                    }
                }
                *brute.get_mut(&left.remove(best).group).unwrap() += 1;
            }
            prop_assert_eq!(d.counts, brute);
        }
    }
}
