//! Cross-model data-quality evaluation and in-context sample selection.
//!
//! Every sample of the merged dataset is scored by all `K` per-backend models;
//! the spread of the probabilities they give the sample's own label is its
//! cross-model variability. A candidate pool mixes the most and least variable
//! samples, and the fused model ranks the pool by gradient influence to pick
//! the in-context feedback set.

use std::collections::HashMap;

use rand::seq::index::sample as sample_indices;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stm::{LastLayerGradient, SparseVector, StmModel};

/// `p_{k',i}[y_i]`: row `k'` holds scorer model `k'`'s probabilities for every sample.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityMatrix {
    rows: Vec<Vec<f64>>,
}

impl ProbabilityMatrix {
    pub fn new(rows: Vec<Vec<f64>>) -> Result<Self> {
        let n = rows.first().map_or(0, Vec::len);
        for (k, row) in rows.iter().enumerate() {
            if row.len() != n {
                return Err(Error::InvalidInput(format!(
                    "probability row {k} has {} entries, expected {n}",
                    row.len()
                )));
            }
            if let Some(p) = row.iter().find(|p| !(0.0..=1.0).contains(*p)) {
                return Err(Error::InvalidInput(format!(
                    "probability {p} in row {k} is outside [0, 1]"
                )));
            }
        }
        Ok(ProbabilityMatrix { rows })
    }

    /// Fills the matrix by running every scorer over the featurized samples.
    pub fn from_models(models: &[&StmModel], features: &[SparseVector], labels: &[usize]) -> Result<Self> {
        let rows = std::thread::scope(|scope| {
            let handles: Vec<_> = models
                .iter()
                .map(|model| {
                    scope.spawn(move || {
                        features
                            .iter()
                            .zip(labels)
                            .map(|(x, &y)| model.predict_features(x)[y])
                            .collect::<Vec<f64>>()
                    })
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("scorer thread panicked"))
                .collect()
        });
        Self::new(rows)
    }

    pub fn num_scorers(&self) -> usize {
        self.rows.len()
    }

    pub fn num_samples(&self) -> usize {
        self.rows.first().map_or(0, Vec::len)
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    pub fn column(&self, sample: usize) -> Vec<f64> {
        self.rows.iter().map(|row| row[sample]).collect()
    }

    /// Lowest probability any scorer gives the sample's label.
    pub fn min_probability(&self, sample: usize) -> f64 {
        self.rows
            .iter()
            .map(|row| row[sample])
            .fold(f64::INFINITY, f64::min)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StdMode {
    /// Divide by `K`.
    #[default]
    Population,
    /// Divide by `K − 1`.
    Sample,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScorerKind {
    #[default]
    GradientAlignment,
    VariabilityRank,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SelectionConfig {
    pub alpha: f64,
    pub r_candidates: usize,
    pub s_incontext: usize,
    pub scorer: ScorerKind,
    pub std_mode: StdMode,
    pub reference_threshold: f64,
    pub reference_cap: usize,
    /// Fraction of samples kept when the agreement threshold selects nothing.
    pub reference_relaxed_quantile: f64,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        SelectionConfig {
            alpha: 0.5,
            r_candidates: 40,
            s_incontext: 8,
            scorer: ScorerKind::GradientAlignment,
            std_mode: StdMode::Population,
            reference_threshold: 0.9,
            reference_cap: 256,
            reference_relaxed_quantile: 0.1,
        }
    }
}

impl SelectionConfig {
    pub fn validate(&self) -> Vec<String> {
        let mut problems = Vec::new();
        if !(0.0..=1.0).contains(&self.alpha) {
            problems.push(format!("alpha must be in [0, 1], got {}", self.alpha));
        }
        if self.r_candidates == 0 {
            problems.push("r_candidates must be positive".into());
        }
        if self.s_incontext == 0 {
            problems.push("s_incontext must be positive".into());
        }
        if self.s_incontext > self.r_candidates {
            problems.push(format!(
                "s_incontext ({}) must not exceed r_candidates ({})",
                self.s_incontext, self.r_candidates
            ));
        }
        if !(0.0..=1.0).contains(&self.reference_threshold) {
            problems.push("reference_threshold must be in [0, 1]".into());
        }
        if self.reference_cap == 0 {
            problems.push("reference_cap must be positive".into());
        }
        if !(self.reference_relaxed_quantile > 0.0 && self.reference_relaxed_quantile <= 1.0) {
            problems.push("reference_relaxed_quantile must be in (0, 1]".into());
        }
        problems
    }
}

fn std_dev(values: &[f64], mode: StdMode) -> f64 {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let ss: f64 = values.iter().map(|v| (v - mean) * (v - mean)).sum();
    let denom = match mode {
        StdMode::Population => n,
        StdMode::Sample => n - 1.0,
    };
    (ss / denom).sqrt()
}

/// Per-sample standard deviation of the scorer probabilities.
pub fn cross_model_variability(matrix: &ProbabilityMatrix, mode: StdMode) -> Result<Vec<f64>> {
    if matrix.num_scorers() < 2 {
        return Err(Error::Unsupported(format!(
            "cross-model variability needs at least 2 scorer models, got {}; \
             single-model runs must use random candidate selection",
            matrix.num_scorers()
        )));
    }
    Ok((0..matrix.num_samples())
        .map(|i| std_dev(&matrix.column(i), mode))
        .collect())
}

/// Size of the high-variability group: `αR` rounded half up.
pub fn high_count(alpha: f64, r: usize) -> usize {
    ((alpha * r as f64 + 0.5).floor() as usize).min(r)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CandidateSet {
    /// Positions of high-variability candidates, most variable first.
    pub high: Vec<usize>,
    /// Positions of low-variability candidates, least variable first.
    pub low: Vec<usize>,
}

impl CandidateSet {
    pub fn positions(&self) -> Vec<usize> {
        self.high.iter().chain(&self.low).copied().collect()
    }

    pub fn len(&self) -> usize {
        self.high.len() + self.low.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Picks `round(αR)` samples with the highest variability, then fills the
/// remaining `R − round(αR)` with the lowest among the rest. Ties are broken by
/// ascending sample id.
pub fn select_candidates(scores: &[f64], ids: &[&str], alpha: f64, r: usize) -> Result<CandidateSet> {
    if scores.len() != ids.len() {
        return Err(Error::InvalidInput(format!(
            "{} scores for {} ids",
            scores.len(),
            ids.len()
        )));
    }
    if scores.len() < r {
        return Err(Error::InvalidInput(format!(
            "only {} samples for {r} candidates; lower r_candidates",
            scores.len()
        )));
    }
    let mut by_high: Vec<usize> = (0..scores.len()).collect();
    by_high.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then_with(|| ids[a].cmp(ids[b])));
    let n_high = high_count(alpha, r);
    let high: Vec<usize> = by_high[..n_high].to_vec();

    let mut taken = vec![false; scores.len()];
    high.iter().for_each(|&i| taken[i] = true);
    let mut by_low: Vec<usize> = (0..scores.len()).filter(|&i| !taken[i]).collect();
    by_low.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]).then_with(|| ids[a].cmp(ids[b])));
    let low = by_low[..r - n_high].to_vec();
    Ok(CandidateSet { high, low })
}

/// Uniformly random candidate pool; used when variability is unavailable.
pub fn random_candidates<R: Rng>(n: usize, r: usize, rng: &mut R) -> Result<Vec<usize>> {
    if n < r {
        return Err(Error::InvalidInput(format!(
            "only {n} samples for {r} candidates; lower r_candidates"
        )));
    }
    let mut picked = sample_indices(rng, n, r).into_vec();
    picked.sort_unstable();
    Ok(picked)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReferenceKind {
    /// Every scorer gave the label probability at or above the threshold.
    Agreement,
    /// Nothing met the threshold; the most confident quantile was used instead.
    RelaxedQuantile,
    Empty,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceSet {
    pub positions: Vec<usize>,
    pub kind: ReferenceKind,
}

/// Samples all scorers agree on, most confident first, capped at `cap`.
pub fn reference_set(
    matrix: &ProbabilityMatrix,
    ids: &[&str],
    threshold: f64,
    cap: usize,
    relaxed_quantile: f64,
) -> ReferenceSet {
    let n = matrix.num_samples();
    let confidence: Vec<f64> = (0..n).map(|i| matrix.min_probability(i)).collect();
    let mut ranked: Vec<usize> = (0..n).collect();
    ranked.sort_by(|&a, &b| {
        confidence[b]
            .total_cmp(&confidence[a])
            .then_with(|| ids[a].cmp(ids[b]))
    });
    let agreeing: Vec<usize> = ranked
        .iter()
        .copied()
        .filter(|&i| confidence[i] >= threshold)
        .take(cap)
        .collect();
    if !agreeing.is_empty() {
        return ReferenceSet {
            positions: agreeing,
            kind: ReferenceKind::Agreement,
        };
    }
    let keep = ((n as f64 * relaxed_quantile).ceil() as usize).clamp(1, cap).min(n);
    if keep == 0 {
        return ReferenceSet {
            positions: Vec::new(),
            kind: ReferenceKind::Empty,
        };
    }
    ReferenceSet {
        positions: ranked[..keep].to_vec(),
        kind: ReferenceKind::RelaxedQuantile,
    }
}

/// Weighted mean last-layer gradient `ḡ = (1/|ref|) Σ w_r g_r` over a reference set.
#[derive(Debug, Clone, PartialEq)]
pub struct MeanGradient {
    pub weight_part: HashMap<usize, Vec<f64>>,
    pub bias_part: Vec<f64>,
}

impl MeanGradient {
    pub fn new(gradients: &[LastLayerGradient], weights: &[f64]) -> Result<Self> {
        if gradients.is_empty() {
            return Err(Error::InvalidInput("mean gradient of an empty reference set".into()));
        }
        if gradients.len() != weights.len() {
            return Err(Error::InvalidInput("one weight per reference gradient required".into()));
        }
        let classes = gradients[0].residual.len();
        let scale = 1.0 / gradients.len() as f64;
        let mut weight_part: HashMap<usize, Vec<f64>> = HashMap::new();
        let mut bias_part = vec![0.0; classes];
        for (g, &w) in gradients.iter().zip(weights) {
            for (c, &r) in g.residual.iter().enumerate() {
                let coeff = scale * w * r;
                bias_part[c] += coeff;
                for (f, x) in g.features.iter() {
                    weight_part.entry(f).or_insert_with(|| vec![0.0; classes])[c] += coeff * x;
                }
            }
        }
        Ok(MeanGradient {
            weight_part,
            bias_part,
        })
    }

    pub fn dot(&self, g: &LastLayerGradient) -> f64 {
        g.residual
            .iter()
            .enumerate()
            .map(|(c, &r)| {
                let w: f64 = g
                    .features
                    .iter()
                    .filter_map(|(f, x)| self.weight_part.get(&f).map(|col| col[c] * x))
                    .sum();
                r * (w + self.bias_part[c])
            })
            .sum()
    }

    pub fn squared_norm(&self) -> f64 {
        self.weight_part
            .values()
            .flat_map(|col| col.iter())
            .chain(&self.bias_part)
            .map(|v| v * v)
            .sum()
    }
}

/// Gradient-alignment influence: `g(z) · ḡ` for every candidate under `model`.
pub fn influence_scores(
    model: &StmModel,
    candidate_features: &[&SparseVector],
    candidate_labels: &[usize],
    reference: &MeanGradient,
) -> Vec<f64> {
    candidate_features
        .iter()
        .zip(candidate_labels)
        .map(|(x, &y)| reference.dot(&model.gradient_features(x, y)))
        .collect()
}

/// Indices of the `s` highest scores, descending, ties by ascending id.
pub fn select_top_s(scores: &[f64], ids: &[&str], s: usize) -> Result<Vec<usize>> {
    if scores.len() != ids.len() {
        return Err(Error::InvalidInput("one id per score required".into()));
    }
    if s > scores.len() {
        return Err(Error::InvalidInput(format!(
            "cannot select {s} from {} candidates",
            scores.len()
        )));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then_with(|| ids[a].cmp(ids[b])));
    order.truncate(s);
    Ok(order)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredId {
    pub sample_id: String,
    pub score: f64,
}

/// Per-round record of how the feedback set was chosen.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionReport {
    pub group: String,
    pub candidate_strategy: String,
    pub candidates_high: Vec<ScoredId>,
    pub candidates_low: Vec<ScoredId>,
    pub scorer: ScorerKind,
    pub reference_kind: ReferenceKind,
    pub reference_size: usize,
    pub selected: Vec<ScoredId>,
    #[serde(default)]
    pub warnings: Vec<String>,
}

impl SelectionReport {
    pub fn selected_ids(&self) -> Vec<String> {
        self.selected.iter().map(|s| s.sample_id.clone()).collect()
    }
}

/// How the `R` candidates are drawn.
pub enum CandidateStrategy<'a, R: Rng> {
    Variability(&'a ProbabilityMatrix),
    Random(&'a mut R),
}

/// Inputs describing the pool a feedback set is drawn from.
pub struct SelectionPool<'a> {
    pub ids: Vec<&'a str>,
    pub features: Vec<&'a SparseVector>,
    pub labels: Vec<usize>,
    pub weights: Vec<f64>,
}

/// Full selection step: candidates, reference gradient, influence ranking, top-S.
/// Returns pool positions of the selected samples in rank order plus the report.
pub fn select_feedback<R: Rng>(
    group: &str,
    pool: &SelectionPool<'_>,
    strategy: CandidateStrategy<'_, R>,
    agreement: &ProbabilityMatrix,
    ranking_model: &StmModel,
    config: &SelectionConfig,
) -> Result<(Vec<usize>, SelectionReport)> {
    let n = pool.ids.len();
    let mut warnings = Vec::new();

    let (candidates, variability, strategy_name) = match strategy {
        CandidateStrategy::Variability(matrix) => {
            let d = cross_model_variability(matrix, config.std_mode)?;
            let set = select_candidates(&d, &pool.ids, config.alpha, config.r_candidates)?;
            (set, Some(d), "variability")
        }
        CandidateStrategy::Random(rng) => {
            let picked = random_candidates(n, config.r_candidates, rng)?;
            (
                CandidateSet {
                    high: Vec::new(),
                    low: picked,
                },
                None,
                "random",
            )
        }
    };
    let positions = candidates.positions();
    let d_of = |i: usize| variability.as_ref().map_or(0.0, |d| d[i]);

    let reference = reference_set(
        agreement,
        &pool.ids,
        config.reference_threshold,
        config.reference_cap,
        config.reference_relaxed_quantile,
    );
    if reference.kind == ReferenceKind::RelaxedQuantile {
        warnings.push(format!(
            "group {group}: no sample reached agreement probability {}; reference set relaxed to the top {} by confidence",
            config.reference_threshold,
            reference.positions.len()
        ));
    }

    let mut scorer = config.scorer;
    if scorer == ScorerKind::GradientAlignment && reference.positions.is_empty() {
        warnings.push(format!(
            "group {group}: empty reference set; falling back to variability-rank ordering"
        ));
        scorer = ScorerKind::VariabilityRank;
    }

    let scores: Vec<f64> = match scorer {
        ScorerKind::GradientAlignment => {
            let gradients: Vec<_> = reference
                .positions
                .iter()
                .map(|&i| ranking_model.gradient_features(pool.features[i], pool.labels[i]))
                .collect();
            let ref_weights: Vec<f64> = reference.positions.iter().map(|&i| pool.weights[i]).collect();
            let mean = MeanGradient::new(&gradients, &ref_weights)?;
            let feats: Vec<&SparseVector> = positions.iter().map(|&i| pool.features[i]).collect();
            let labels: Vec<usize> = positions.iter().map(|&i| pool.labels[i]).collect();
            influence_scores(ranking_model, &feats, &labels, &mean)
        }
        ScorerKind::VariabilityRank => positions.iter().map(|&i| d_of(i)).collect(),
    };

    let cand_ids: Vec<&str> = positions.iter().map(|&i| pool.ids[i]).collect();
    let top = select_top_s(&scores, &cand_ids, config.s_incontext)?;
    let selected_positions: Vec<usize> = top.iter().map(|&t| positions[t]).collect();

    let scored = |list: &[usize]| {
        list.iter()
            .map(|&i| ScoredId {
                sample_id: pool.ids[i].to_string(),
                score: d_of(i),
            })
            .collect()
    };
    let report = SelectionReport {
        group: group.to_string(),
        candidate_strategy: strategy_name.to_string(),
        candidates_high: scored(&candidates.high),
        candidates_low: scored(&candidates.low),
        scorer,
        reference_kind: reference.kind.clone(),
        reference_size: reference.positions.len(),
        selected: top
            .iter()
            .map(|&t| ScoredId {
                sample_id: cand_ids[t].to_string(),
                score: scores[t],
            })
            .collect(),
        warnings,
    };
    Ok((selected_positions, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::LabelSchema;
    use crate::stm::Featurizer;

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("s{i:03}")).collect()
    }

    #[test]
    fn variability_by_hand() {
        let m = ProbabilityMatrix::new(vec![vec![0.2, 0.4], vec![0.8, 0.4]]).unwrap();
        let d = cross_model_variability(&m, StdMode::Population).unwrap();
        assert!((d[0] - 0.3).abs() < 1e-15);
        assert_eq!(d[1], 0.0);

        let six: Vec<Vec<f64>> = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6].iter().map(|&p| vec![p]).collect();
        let d = cross_model_variability(&ProbabilityMatrix::new(six).unwrap(), StdMode::Population).unwrap();
        assert!((d[0] - 0.170783).abs() < 1e-6);
    }

    #[test]
    fn single_scorer_is_unsupported() {
        let m = ProbabilityMatrix::new(vec![vec![0.5]]).unwrap();
        assert!(matches!(
            cross_model_variability(&m, StdMode::Population),
            Err(Error::Unsupported(_))
        ));
    }

    #[test]
    fn sample_std_switch() {
        let m = ProbabilityMatrix::new(vec![vec![0.2], vec![0.8]]).unwrap();
        let d = cross_model_variability(&m, StdMode::Sample).unwrap();
        assert!((d[0] - 0.18f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn probability_matrix_rejects_bad_entries() {
        assert!(ProbabilityMatrix::new(vec![vec![0.5], vec![1.5]]).is_err());
        assert!(ProbabilityMatrix::new(vec![vec![0.5], vec![0.5, 0.1]]).is_err());
    }

    #[test]
    fn half_and_half_split() {
        let names = ids(100);
        let id_refs: Vec<&str> = names.iter().map(String::as_str).collect();
        let d: Vec<f64> = (0..100).map(|i| ((i * 37) % 100) as f64 / 100.0).collect();
        let c = select_candidates(&d, &id_refs, 0.5, 40).unwrap();
        assert_eq!((c.high.len(), c.low.len()), (20, 20));
        assert!(c.high.iter().all(|&i| d[i] >= 0.8));
        assert!(c.low.iter().all(|&i| d[i] < 0.2));
    }

    #[test]
    fn alpha_zero_takes_lowest() {
        let names = ids(20);
        let id_refs: Vec<&str> = names.iter().map(String::as_str).collect();
        let d: Vec<f64> = (0..20).rev().map(|i| i as f64).collect();
        let c = select_candidates(&d, &id_refs, 0.0, 10).unwrap();
        assert!(c.high.is_empty());
        let mut low = c.low.clone();
        low.sort();
        assert_eq!(low, (10..20).collect::<Vec<_>>());
    }

    #[test]
    fn all_ties_take_smallest_ids() {
        let names = vec!["d", "b", "a", "f", "c", "e"];
        let c = select_candidates(&[0.1; 6], &names, 0.5, 4).unwrap();
        let pick = |v: &[usize]| v.iter().map(|&i| names[i]).collect::<Vec<_>>();
        assert_eq!(pick(&c.high), vec!["a", "b"]);
        assert_eq!(pick(&c.low), vec!["c", "d"]);
    }

    #[test]
    fn too_few_samples_for_r() {
        let err = select_candidates(&[0.1, 0.2], &["a", "b"], 0.5, 4).unwrap_err();
        assert!(err.to_string().contains("lower r_candidates"));
    }

    #[test]
    fn rounding_half_up() {
        assert_eq!(high_count(0.5, 40), 20);
        assert_eq!(high_count(0.5, 5), 3);
        assert_eq!(high_count(0.25, 10), 3);
        assert_eq!(high_count(1.0, 10), 10);
        assert_eq!(high_count(0.0, 10), 0);
    }

    #[test]
    fn top_s_orders_and_breaks_ties() {
        assert_eq!(select_top_s(&[5.0, 1.0, 9.0], &["a", "b", "c"], 2).unwrap(), vec![2, 0]);
        assert_eq!(select_top_s(&[1.0, 1.0, 2.0], &["z", "y", "x"], 3).unwrap(), vec![2, 1, 0]);
        assert!(select_top_s(&[1.0], &["a"], 2).is_err());
    }

    #[test]
    fn reference_set_relaxes_when_nothing_agrees() {
        let m = ProbabilityMatrix::new(vec![vec![0.6, 0.7, 0.95], vec![0.6, 0.8, 0.5]]).unwrap();
        let names = ["a", "b", "c"];
        let r = reference_set(&m, &names, 0.9, 256, 0.1);
        assert_eq!(r.kind, ReferenceKind::RelaxedQuantile);
        assert_eq!(r.positions, vec![1]);
        let r = reference_set(&m, &names, 0.5, 256, 0.1);
        assert_eq!(r.kind, ReferenceKind::Agreement);
        assert_eq!(r.positions, vec![1, 0, 2]);
        let r = reference_set(&m, &names, 0.5, 2, 0.1);
        assert_eq!(r.positions, vec![1, 0]);
    }

    #[test]
    fn zero_gradient_candidate_scores_zero() {
        let schema = LabelSchema::from_keys("t", &["a", "b"]).unwrap();
        let mut model = StmModel::zeros(Featurizer::with_dim(5), schema);
        let reference = MeanGradient::new(&[model.last_layer_gradient("x y", 0)], &[1.0]).unwrap();
        model.bias = vec![1e6, 0.0];
        let x = model.featurizer.featurize("x z");
        let scores = influence_scores(&model, &[&x], &[0], &reference);
        assert_eq!(scores, vec![0.0]);
    }

    #[test]
    fn self_alignment_gives_squared_norm() {
        let schema = LabelSchema::from_keys("t", &["a", "b", "c"]).unwrap();
        let mut model = StmModel::zeros(Featurizer::with_dim(5), schema);
        model.bias = vec![0.3, -0.2, 0.1];
        let g = model.last_layer_gradient("p q r", 1);
        let mean = MeanGradient::new(std::slice::from_ref(&g), &[1.0]).unwrap();
        assert!((mean.dot(&g) - mean.squared_norm()).abs() < 1e-12);
    }
}
