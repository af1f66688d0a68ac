//! Learned group convolution.
//!
//! A 1×1 convolution whose `O×R` filter matrix `F` is split row-wise into `G`
//! equal filter groups. Training multiplies `F` by a binary mask `M`; at each
//! condensing stage every group drops its least important input columns,
//! ranked by the L1 norm of the column within the group. After the last stage
//! each group keeps `⌊R/C⌋` columns and the layer is structurally a group
//! convolution preceded by a channel gather.

use std::f64::consts::PI;

use rand::Rng;

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Columns each group keeps after condensing stage `stage` (stage 0 = none).
///
/// `keep(s) = R − ⌊s·(R − ⌊R/C⌋)/(C − 1)⌋`, which is `R` at `s = 0` and
/// `⌊R/C⌋` at `s = C − 1`.
pub fn keep_count(in_channels: usize, condense_factor: usize, stage: usize) -> usize {
    if condense_factor <= 1 || stage == 0 {
        return in_channels;
    }
    let stage = stage.min(condense_factor - 1);
    let last = in_channels / condense_factor;
    in_channels - stage * (in_channels - last) / (condense_factor - 1)
}

/// `lr = ½·lr0·(1 + cos(π·t/T))`.
pub fn cosine_lr(step: usize, total: usize, lr0: f64) -> Result<f64> {
    if total == 0 {
        return Err(Error::Schedule("cosine schedule needs T > 0".into()));
    }
    if step > total {
        return Err(Error::Schedule(format!("step {step} beyond T = {total}")));
    }
    Ok(0.5 * lr0 * (1.0 + (PI * step as f64 / total as f64).cos()))
}

/// When condensing stages end during a run of `total_epochs` epochs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CondensationSchedule {
    pub total_epochs: usize,
    pub condense_factor: usize,
    pub groups: usize,
    /// `M / (2(C − 1))` epochs, zero when `C = 1`.
    pub stage_len: usize,
}

impl CondensationSchedule {
    pub fn new(total_epochs: usize, condense_factor: usize, groups: usize) -> Result<Self> {
        if condense_factor == 0 || groups == 0 {
            return Err(Error::Schedule("C and G must be >= 1".into()));
        }
        let stage_len = if condense_factor == 1 {
            0
        } else {
            total_epochs / (2 * (condense_factor - 1))
        };
        if condense_factor > 1 && stage_len == 0 {
            return Err(Error::Schedule(format!(
                "{total_epochs} epochs are too few for {} condensing stages",
                condense_factor - 1
            )));
        }
        Ok(CondensationSchedule {
            total_epochs,
            condense_factor,
            groups,
            stage_len,
        })
    }

    pub fn stages(&self) -> usize {
        self.condense_factor.saturating_sub(1)
    }

    /// Epoch counts after which pruning happens, one per stage.
    pub fn boundaries(&self) -> Vec<usize> {
        (1..=self.stages()).map(|s| s * self.stage_len).collect()
    }

    /// Stage to apply at the end of epoch `epoch` (1-based count of completed
    /// epochs), if any.
    pub fn tick(&self, epoch: usize) -> Option<usize> {
        if self.stage_len == 0 || epoch == 0 || !epoch.is_multiple_of(self.stage_len) {
            return None;
        }
        let s = epoch / self.stage_len;
        (s <= self.stages()).then_some(s)
    }

    /// Epochs spent condensing; the remainder is the optimization stage.
    pub fn condensing_epochs(&self) -> usize {
        self.stages() * self.stage_len
    }

    /// Whether 0-based epoch `epoch` lies inside the condensing window.
    pub fn is_condensing(&self, epoch: usize) -> bool {
        epoch < self.condensing_epochs()
    }

    pub fn keep(&self, in_channels: usize, stage: usize) -> usize {
        keep_count(in_channels, self.condense_factor, stage)
    }
}

/// Per-group column scores `Σ_i |F^g_{ij}·M^g_{ij}|` of a row-major `O×R`
/// matrix split into `groups` contiguous row blocks.
pub fn column_importance<T: Element>(
    weight: &[T],
    mask: &[T],
    rows: usize,
    cols: usize,
    groups: usize,
    group: usize,
) -> Vec<T> {
    let per = rows / groups;
    let mut score = vec![T::zero(); cols];
    for i in group * per..(group + 1) * per {
        let w = &weight[i * cols..(i + 1) * cols];
        let m = &mask[i * cols..(i + 1) * cols];
        for j in 0..cols {
            score[j] += (w[j] * m[j]).abs();
        }
    }
    score
}

/// Unmasked columns of `group`. Errors if the rows of the group disagree.
pub fn group_columns<T: Element>(
    mask: &[T],
    rows: usize,
    cols: usize,
    groups: usize,
    group: usize,
) -> Result<Vec<usize>> {
    let per = rows / groups;
    let first = &mask[group * per * cols..(group * per + 1) * cols];
    for i in group * per + 1..(group + 1) * per {
        if &mask[i * cols..(i + 1) * cols] != first {
            return Err(Error::invalid(
                "lgc",
                format!("mask rows of group {group} differ (row {i})"),
            ));
        }
    }
    Ok((0..cols).filter(|&j| first[j] != T::zero()).collect())
}

/// In every group keeps the `keep` highest-scoring live columns (ties go to
/// the lower column index) and zeroes both mask and weight elsewhere.
pub fn prune_columns<T: Element>(
    weight: &mut [T],
    mask: &mut [T],
    rows: usize,
    cols: usize,
    groups: usize,
    keep: usize,
) -> Result<()> {
    let per = rows / groups;
    for g in 0..groups {
        let alive = group_columns(mask, rows, cols, groups, g)?;
        if keep > alive.len() {
            return Err(Error::Schedule(format!(
                "group {g} has {} live columns, cannot keep {keep}",
                alive.len()
            )));
        }
        let score = column_importance(weight, mask, rows, cols, groups, g);
        let mut ranked = alive;
        ranked.sort_by(|&a, &b| {
            score[b]
                .partial_cmp(&score[a])
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.cmp(&b))
        });
        for &j in &ranked[keep..] {
            for i in g * per..(g + 1) * per {
                mask[i * cols + j] = T::zero();
                weight[i * cols + j] = T::zero();
            }
        }
    }
    Ok(())
}

/// Training-form learned group convolution (1×1 kernel).
#[derive(Debug, Clone)]
pub struct LearnedGroupConv<T> {
    /// `[O, R, 1, 1]`.
    pub weight: Tensor<T>,
    /// Same shape as `weight`, entries in {0, 1}.
    pub mask: Tensor<T>,
    pub groups: usize,
    pub condense_factor: usize,
    /// Number of condensing stages applied so far.
    pub stage: usize,
}

impl<T: Element> LearnedGroupConv<T> {
    pub fn new<R: Rng + ?Sized>(
        in_channels: usize,
        out_channels: usize,
        groups: usize,
        condense_factor: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let weight = Tensor::randn(
            &[out_channels, in_channels, 1, 1],
            (2.0 / in_channels as f64).sqrt(),
            rng,
        );
        Self::from_weight(weight, groups, condense_factor)
    }

    /// Wraps an existing `[O, R, 1, 1]` or `[O, R]` weight with an all-ones mask.
    pub fn from_weight(weight: Tensor<T>, groups: usize, condense_factor: usize) -> Result<Self> {
        let o = weight.dim(0);
        let r = weight.len() / o.max(1);
        let weight = weight.reshape(&[o, r, 1, 1])?;
        if groups == 0 || !o.is_multiple_of(groups) {
            return Err(Error::Indivisible {
                op: "learned group conv",
                what: "output channels O",
                value: o,
                divisor: groups.max(1),
            });
        }
        if condense_factor == 0 {
            return Err(Error::invalid("learned group conv", "C must be >= 1"));
        }
        if condense_factor > 1 && r / condense_factor == 0 {
            return Err(Error::invalid(
                "learned group conv",
                format!("R = {r} leaves no input per group at C = {condense_factor}"),
            ));
        }
        let mask = Tensor::ones(weight.shape());
        Ok(LearnedGroupConv {
            weight,
            mask,
            groups,
            condense_factor,
            stage: 0,
        })
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dim(0)
    }

    pub fn in_channels(&self) -> usize {
        self.weight.dim(1)
    }

    /// `Σ_i |F^g_{ij}|` over the masked weights of group `group`.
    pub fn importance(&self, group: usize) -> Result<Vec<T>> {
        if group >= self.groups {
            return Err(Error::invalid(
                "importance",
                format!("group {group} >= G = {}", self.groups),
            ));
        }
        Ok(column_importance(
            self.weight.data(),
            self.mask.data(),
            self.out_channels(),
            self.in_channels(),
            self.groups,
            group,
        ))
    }

    pub fn keep(&self, stage: usize) -> usize {
        keep_count(self.in_channels(), self.condense_factor, stage)
    }

    /// Applies condensing stage `stage`, which must directly follow the last
    /// applied stage.
    pub fn condense(&mut self, stage: usize) -> Result<()> {
        if stage == 0 || stage >= self.condense_factor {
            return Err(Error::Schedule(format!(
                "stage {stage} outside [1, {}]",
                self.condense_factor.saturating_sub(1)
            )));
        }
        if stage != self.stage + 1 {
            return Err(Error::Schedule(format!(
                "stage {stage} requested after stage {}",
                self.stage
            )));
        }
        let (prev, next) = (self.keep(stage - 1), self.keep(stage));
        if next >= prev {
            return Err(Error::Schedule(format!(
                "keep({stage}) = {next} does not shrink from {prev} (R = {}, C = {})",
                self.in_channels(),
                self.condense_factor
            )));
        }
        let (rows, cols) = (self.out_channels(), self.in_channels());
        prune_columns(
            self.weight.data_mut(),
            self.mask.data_mut(),
            rows,
            cols,
            self.groups,
            next,
        )?;
        self.stage = stage;
        Ok(())
    }

    /// Applies every remaining stage at once.
    pub fn condense_fully(&mut self) -> Result<()> {
        while self.stage + 1 < self.condense_factor {
            self.condense(self.stage + 1)?;
        }
        Ok(())
    }

    pub fn is_fully_condensed(&self) -> bool {
        self.stage + 1 >= self.condense_factor
    }

    /// Sorted live input columns of `group`.
    pub fn surviving_columns(&self, group: usize) -> Result<Vec<usize>> {
        group_columns(
            self.mask.data(),
            self.out_channels(),
            self.in_channels(),
            self.groups,
            group,
        )
    }

    /// Number of unmasked weights.
    pub fn surviving_weights(&self) -> usize {
        self.mask.data().iter().filter(|&&m| m != T::zero()).count()
    }

    /// Raw penalty `Σ_g Σ_j ‖(F⊙M)^g_{:,j}‖₂`.
    pub fn group_lasso_penalty(&self) -> T {
        let masked: Vec<T> = self
            .weight
            .data()
            .iter()
            .zip(self.mask.data())
            .map(|(&w, &m)| w * m)
            .collect();
        crate::ops::group_lasso(
            &masked,
            self.out_channels(),
            self.in_channels(),
            self.groups,
        )
        .expect("validated at construction")
        .0
    }

    /// Records `F⊙M` on the graph and returns (masked weight, raw weight leaf).
    pub fn masked_weight(&self, g: &mut Graph<T>) -> Result<(Var, Var)> {
        let w = g.input(self.weight.clone());
        let m = g.constant(self.mask.clone());
        Ok((g.mul(w, m)?, w))
    }
}

/// `loss + λ·Σ penalties`; returns `loss` itself when `λ = 0`.
pub fn apply_group_lasso_to_loss<T: Element>(
    g: &mut Graph<T>,
    loss: Var,
    penalties: &[Var],
    lambda: f64,
) -> Result<Var> {
    if lambda < 0.0 {
        return Err(Error::invalid(
            "group lasso",
            format!("lambda {lambda} < 0"),
        ));
    }
    if lambda == 0.0 || penalties.is_empty() {
        return Ok(loss);
    }
    let mut total = penalties[0];
    for &p in &penalties[1..] {
        total = g.add(total, p)?;
    }
    let scaled = g.scale(total, T::from_f64_lossy(lambda));
    g.add(loss, scaled)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn layer(rows: &[&[f64]], groups: usize, c: usize) -> LearnedGroupConv<f64> {
        let o = rows.len();
        let r = rows[0].len();
        let data = rows.iter().flat_map(|r| r.iter().copied()).collect();
        LearnedGroupConv::from_weight(Tensor::from_vec(&[o, r], data).unwrap(), groups, c).unwrap()
    }

    #[test]
    fn importance_is_column_l1() {
        let l = layer(&[&[1.0, -2.0, 0.0], &[3.0, 0.0, 1.0]], 1, 3);
        assert_eq!(l.importance(0).unwrap(), vec![4.0, 2.0, 1.0]);
        assert!(l.importance(1).is_err());
    }

    #[test]
    fn zero_group_scores_zero() {
        let l = layer(&[&[0.0, 0.0], &[0.0, 0.0]], 1, 2);
        assert_eq!(l.importance(0).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn masked_column_scores_zero() {
        let mut l = layer(&[&[5.0, 1.0], &[5.0, 1.0]], 1, 2);
        l.mask.data_mut()[0] = 0.0;
        l.mask.data_mut()[2] = 0.0;
        assert_eq!(l.importance(0).unwrap(), vec![0.0, 2.0]);
    }

    #[test]
    fn keep_sequence_r12_c4() {
        let ks: Vec<usize> = (1..=3).map(|s| keep_count(12, 4, s)).collect();
        assert_eq!(ks, vec![9, 6, 3]);
        assert_eq!(keep_count(12, 4, 0), 12);
    }

    #[test]
    fn c2_removes_ceil_half() {
        for r in 2..20 {
            assert_eq!(r - keep_count(r, 2, 1), r.div_ceil(2));
        }
    }

    #[test]
    fn ties_keep_lower_index() {
        let mut l = layer(&[&[1.0, 1.0, 1.0, 1.0]], 1, 4);
        l.condense(1).unwrap();
        assert_eq!(l.surviving_columns(0).unwrap(), vec![0, 1, 2]);
    }

    #[test]
    fn condense_must_follow_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut l = LearnedGroupConv::<f64>::new(12, 8, 4, 4, &mut rng).unwrap();
        assert!(l.condense(2).is_err());
        assert!(l.condense(0).is_err());
        l.condense(1).unwrap();
        assert!(l.condense(1).is_err());
        assert!(l.condense(4).is_err());
    }

    #[test]
    fn keep_strictly_shrinks_whenever_r_at_least_c() {
        for c in 2..10 {
            for r in c..64 {
                let ks: Vec<usize> = (0..c).map(|s| keep_count(r, c, s)).collect();
                assert!(ks.windows(2).all(|w| w[1] < w[0]), "R={r} C={c}: {ks:?}");
                assert_eq!(ks[c - 1], r / c);
            }
        }
    }

    #[test]
    fn layer_narrower_than_c_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(LearnedGroupConv::<f64>::new(3, 2, 1, 4, &mut rng).is_err());
        assert!(LearnedGroupConv::<f64>::new(4, 2, 1, 4, &mut rng).is_ok());
    }

    #[test]
    fn condense_fully_reaches_floor() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut l = LearnedGroupConv::<f64>::new(13, 6, 3, 5, &mut rng).unwrap();
        l.condense_fully().unwrap();
        assert!(l.is_fully_condensed());
        for g in 0..3 {
            assert_eq!(l.surviving_columns(g).unwrap().len(), 13 / 5);
        }
        assert_eq!(l.surviving_weights(), 6 * (13 / 5));
    }

    #[test]
    fn group_lasso_value() {
        let l = layer(&[&[3.0, 0.0], &[4.0, 0.0]], 1, 2);
        assert_eq!(l.group_lasso_penalty(), 5.0);
        let z = layer(&[&[0.0, 0.0], &[0.0, 0.0]], 2, 2);
        assert_eq!(z.group_lasso_penalty(), 0.0);
    }

    #[test]
    fn cosine_endpoints() {
        assert!((cosine_lr(0, 100, 0.1).unwrap() - 0.1).abs() < 1e-12);
        assert!((cosine_lr(50, 100, 0.1).unwrap() - 0.05).abs() < 1e-12);
        assert!(cosine_lr(100, 100, 0.1).unwrap().abs() < 1e-12);
        assert!(cosine_lr(0, 0, 0.1).is_err());
    }

    #[test]
    fn schedule_boundaries() {
        let s = CondensationSchedule::new(300, 4, 4).unwrap();
        assert_eq!(s.boundaries(), vec![50, 100, 150]);
        assert_eq!(s.tick(50), Some(1));
        assert_eq!(s.tick(150), Some(3));
        assert_eq!(s.tick(151), None);
        assert_eq!(s.tick(200), None);
        assert_eq!(s.tick(0), None);
        let s = CondensationSchedule::new(300, 2, 4).unwrap();
        assert_eq!(s.boundaries(), vec![150]);
        let s = CondensationSchedule::new(10, 1, 1).unwrap();
        assert!(s.boundaries().is_empty());
        assert!(CondensationSchedule::new(3, 4, 4).is_err());
    }

    #[test]
    fn lasso_lambda_zero_leaves_loss() {
        let mut g = Graph::<f64>::new();
        let loss = g.constant(Tensor::scalar(1.5));
        let p = g.constant(Tensor::scalar(5.0));
        assert_eq!(
            apply_group_lasso_to_loss(&mut g, loss, &[p], 0.0).unwrap(),
            loss
        );
        let out = apply_group_lasso_to_loss(&mut g, loss, &[p], 1e-5).unwrap();
        assert!((g.value(out).data()[0] - (1.5 + 5e-5)).abs() < 1e-15);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn random_layer(
            groups: usize,
            per: usize,
            r: usize,
            c: usize,
            seed: u64,
        ) -> LearnedGroupConv<f64> {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            LearnedGroupConv::new(r, groups * per, groups, c, &mut rng).unwrap()
        }

        proptest! {
            #[test]
            fn keep_counts_shrink_to_floor(c in 2..9usize, extra in 0..40usize) {
                let r = c + extra;
                let seq: Vec<usize> = (0..c).map(|s| keep_count(r, c, s)).collect();
                prop_assert_eq!(seq[0], r);
                prop_assert_eq!(seq[c - 1], r / c);
                prop_assert!(seq.windows(2).all(|w| w[1] < w[0]));
            }

            #[test]
            fn cosine_is_non_increasing(total in 1..5000usize, lr0 in 0.0f64..10.0) {
                let mut prev = f64::INFINITY;
                for t in 0..=total {
                    let lr = cosine_lr(t, total, lr0).unwrap();
                    prop_assert!(lr <= prev);
                    prev = lr;
                }
            }

            #[test]
            fn masks_only_shrink_and_stay_group_uniform(
                groups in 1..5usize, per in 1..4usize, c in 2..6usize, extra in 0..20usize, seed in any::<u64>()
            ) {
                let r = c + extra;
                let mut l = random_layer(groups, per, r, c, seed);
                let mut prev = l.mask.clone();
                for stage in 1..c {
                    l.condense(stage).unwrap();
                    for (a, b) in l.mask.data().iter().zip(prev.data()) {
                        prop_assert!(a <= b);
                    }
                    for g in 0..groups {
                        prop_assert_eq!(l.surviving_columns(g).unwrap().len(), keep_count(r, c, stage));
                    }
                    for (w, m) in l.weight.data().iter().zip(l.mask.data()) {
                        if *m == 0.0 {
                            prop_assert_eq!(*w, 0.0);
                        }
                    }
                    prev = l.mask.clone();
                }
                prop_assert_eq!(l.surviving_weights(), groups * per * (r / c));
            }

            #[test]
            fn pruning_is_scale_invariant(
                groups in 1..4usize, per in 1..4usize, c in 2..5usize, extra in 0..12usize,
                seed in any::<u64>(), scale in 0.01f64..100.0
            ) {
                let r = c + extra;
                let mut a = random_layer(groups, per, r, c, seed);
                let mut b = a.clone();
                b.weight.data_mut().iter_mut().for_each(|w| *w *= scale);
                a.condense_fully().unwrap();
                b.condense_fully().unwrap();
                prop_assert_eq!(a.mask.data(), b.mask.data());
            }

            #[test]
            fn first_stage_keeps_largest_l1_columns(
                groups in 1..4usize, per in 1..4usize, c in 2..5usize, extra in 0..12usize, seed in any::<u64>()
            ) {
                let r = c + extra;
                let mut l = random_layer(groups, per, r, c, seed);
                let w = l.weight.data().to_vec();
                l.condense(1).unwrap();
                let keep = keep_count(r, c, 1);
                for g in 0..groups {
                    let mut cols: Vec<(f64, usize)> = (0..r)
                        .map(|j| ((g * per..(g + 1) * per).map(|i| w[i * r + j].abs()).sum::<f64>(), j))
                        .collect();
                    cols.sort_by(|x, y| y.0.partial_cmp(&x.0).unwrap().then(x.1.cmp(&y.1)));
                    let mut expect: Vec<usize> = cols[..keep].iter().map(|p| p.1).collect();
                    expect.sort_unstable();
                    prop_assert_eq!(l.surviving_columns(g).unwrap(), expect);
                }
            }

            #[test]
            fn pruned_columns_never_return(seed in any::<u64>(), boost in 1.0f64..1e6) {
                let mut l = random_layer(2, 2, 12, 4, seed);
                l.condense(1).unwrap();
                let dead = l.mask.data().iter().position(|&m| m == 0.0).unwrap();
                // A large weight on a masked position must not revive it.
                l.weight.data_mut()[dead] = boost;
                l.condense(2).unwrap();
                prop_assert_eq!(l.mask.data()[dead], 0.0);
            }
        }
    }
}
