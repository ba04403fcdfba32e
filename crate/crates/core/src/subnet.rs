//! Width-based subnetworks.
//!
//! A [`Mask`] keeps a subset of neurons in every hidden layer; input and
//! output layers are never masked. The number of neurons kept at level `p`
//! in a hidden layer of width `h` is `⌈h·s^(p−1)⌉`, where `s` is the shrink
//! ratio. Level 1 is the full model and level `P` the smallest.
//!
//! Three mask families share that size rule and differ only in *which*
//! neurons they keep:
//!
//! * [`MaskKind::Width`]: the prefix `{0, …, k−1}`, so masks are nested.
//! * [`MaskKind::Dropout`]: a uniformly random `k`-subset.
//! * [`MaskKind::Rolling`]: a circular window starting at `round mod h`.
//!
//! [`aggregate`] averages each parameter over the updates whose mask covers
//! it and leaves uncovered parameters at their previous global value.

use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{count_params, flops_per_example, Arch, Layer, Model};

/// Number of size levels `P` and the per-level hidden shrink ratio `s`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LevelSpec {
    pub levels: usize,
    pub shrink: f64,
}

impl Default for LevelSpec {
    fn default() -> Self {
        Self {
            levels: 5,
            shrink: 0.5,
        }
    }
}

impl LevelSpec {
    pub fn new(levels: usize, shrink: f64) -> Result<Self> {
        let spec = Self { levels, shrink };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels == 0 {
            return Err(Error::InvalidLevelSpec("P must be ≥ 1".into()));
        }
        if !(self.shrink > 0.0 && self.shrink <= 1.0) {
            return Err(Error::InvalidLevelSpec(format!(
                "shrink ratio {} outside (0, 1]",
                self.shrink
            )));
        }
        Ok(())
    }

    pub fn check_level(&self, level: usize) -> Result<()> {
        if level == 0 || level > self.levels {
            return Err(Error::LevelOutOfRange {
                level,
                max: self.levels,
            });
        }
        Ok(())
    }

    /// `⌈h·s^(level−1)⌉`, never below 1.
    pub fn kept_width(&self, full: usize, level: usize) -> usize {
        let exact = full as f64 * self.shrink.powi(level as i32 - 1);
        // tolerate round-off in products like 3·(1/3)
        let k = (exact - 1e-9).ceil() as usize;
        k.clamp(1, full)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskKind {
    Width,
    Dropout,
    Rolling,
}

/// Sorted kept-neuron indices for every layer of an architecture.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    full_widths: Vec<usize>,
    /// One sorted index set per layer, including the (always full) input and
    /// output layers.
    kept: Vec<Vec<usize>>,
    level: usize,
    kind: MaskKind,
}

impl Mask {
    /// Identity subnetwork.
    pub fn full(arch: &Arch) -> Self {
        Self {
            full_widths: arch.widths().to_vec(),
            kept: arch.widths().iter().map(|&w| (0..w).collect()).collect(),
            level: 1,
            kind: MaskKind::Width,
        }
    }

    /// Builds a mask from explicit hidden-layer index sets.
    pub fn from_hidden(
        arch: &Arch,
        hidden: Vec<Vec<usize>>,
        level: usize,
        kind: MaskKind,
    ) -> Result<Self> {
        let widths = arch.widths();
        if hidden.len() != widths.len() - 2 {
            return Err(Error::IncongruentMask(format!(
                "{} hidden index sets for {} hidden layers",
                hidden.len(),
                widths.len() - 2
            )));
        }
        let mut kept = Vec::with_capacity(widths.len());
        kept.push((0..widths[0]).collect());
        for (l, mut idx) in hidden.into_iter().enumerate() {
            idx.sort_unstable();
            idx.dedup();
            let h = widths[l + 1];
            if idx.is_empty() || idx.last().is_some_and(|&i| i >= h) {
                return Err(Error::IncongruentMask(format!(
                    "hidden layer {l} indices must be non-empty and below {h}"
                )));
            }
            kept.push(idx);
        }
        kept.push((0..*widths.last().expect("arch")).collect());
        Ok(Self {
            full_widths: widths.to_vec(),
            kept,
            level,
            kind,
        })
    }

    pub fn level(&self) -> usize {
        self.level
    }

    pub fn kind(&self) -> MaskKind {
        self.kind
    }

    pub fn full_widths(&self) -> &[usize] {
        &self.full_widths
    }

    /// Kept indices of layer `l` (0 = input).
    pub fn kept(&self, l: usize) -> &[usize] {
        &self.kept[l]
    }

    /// Widths of the induced subnetwork.
    pub fn sub_widths(&self) -> Vec<usize> {
        self.kept.iter().map(Vec::len).collect()
    }

    pub fn param_count(&self) -> u64 {
        count_params(&self.sub_widths())
    }

    pub fn flops_per_example(&self) -> u64 {
        flops_per_example(&self.sub_widths())
    }

    pub fn is_subset_of(&self, other: &Mask) -> bool {
        self.full_widths == other.full_widths
            && self
                .kept
                .iter()
                .zip(&other.kept)
                .all(|(a, b)| a.iter().all(|i| b.binary_search(i).is_ok()))
    }

    fn check_congruent(&self, arch: &Arch) -> Result<()> {
        if self.full_widths != arch.widths() {
            return Err(Error::IncongruentMask(format!(
                "mask built for {:?}, model is {:?}",
                self.full_widths,
                arch.widths()
            )));
        }
        Ok(())
    }
}

fn hidden_sizes(arch: &Arch, level: usize, spec: &LevelSpec) -> Result<Vec<(usize, usize)>> {
    spec.validate()?;
    spec.check_level(level)?;
    Ok(arch
        .hidden_widths()
        .iter()
        .map(|&h| (h, spec.kept_width(h, level)))
        .collect())
}

/// Prefix mask; `width_mask(p + 1) ⊆ width_mask(p)`.
pub fn width_mask(arch: &Arch, level: usize, spec: &LevelSpec) -> Result<Mask> {
    let hidden = hidden_sizes(arch, level, spec)?
        .into_iter()
        .map(|(_, k)| (0..k).collect())
        .collect();
    Mask::from_hidden(arch, hidden, level, MaskKind::Width)
}

/// Uniformly random subset of the level's size in every hidden layer.
pub fn dropout_mask<R: Rng + ?Sized>(
    arch: &Arch,
    level: usize,
    spec: &LevelSpec,
    rng: &mut R,
) -> Result<Mask> {
    let hidden = hidden_sizes(arch, level, spec)?
        .into_iter()
        .map(|(h, k)| rand::seq::index::sample(rng, h, k).into_vec())
        .collect();
    Mask::from_hidden(arch, hidden, level, MaskKind::Dropout)
}

/// Circular window of the level's size starting at `round mod h`.
pub fn rolling_mask(arch: &Arch, level: usize, spec: &LevelSpec, round: usize) -> Result<Mask> {
    let hidden = hidden_sizes(arch, level, spec)?
        .into_iter()
        .map(|(h, k)| {
            let start = round % h;
            (0..k).map(|j| (start + j) % h).collect()
        })
        .collect();
    Mask::from_hidden(arch, hidden, level, MaskKind::Rolling)
}

/// Parameters of a subnetwork together with the mask that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct SubModel {
    pub mask: Mask,
    pub model: Model,
}

/// Slices rows by the output-side kept set and columns by the input-side set.
pub fn extract(global: &Model, mask: &Mask) -> Result<SubModel> {
    mask.check_congruent(global.arch())?;
    let layers = global
        .layers()
        .iter()
        .enumerate()
        .map(|(l, layer)| {
            let rows = mask.kept(l + 1);
            let cols = mask.kept(l);
            Layer {
                weight: layer.weight.select(Axis(0), rows).select(Axis(1), cols),
                bias: layer.bias.select(Axis(0), rows),
            }
        })
        .collect();
    let arch = global.arch().with_widths(mask.sub_widths())?;
    Ok(SubModel {
        mask: mask.clone(),
        model: Model::from_layers(arch, layers)?,
    })
}

/// Writes a submodel's values back into their positions in `target`.
pub fn embed(sub: &SubModel, target: &mut Model) -> Result<()> {
    sub.mask.check_congruent(target.arch())?;
    check_sub_shape(sub)?;
    for (l, (dst, src)) in target
        .layers_mut()
        .iter_mut()
        .zip(sub.model.layers())
        .enumerate()
    {
        let rows = sub.mask.kept(l + 1);
        let cols = sub.mask.kept(l);
        for (ri, &r) in rows.iter().enumerate() {
            dst.bias[r] = src.bias[ri];
            for (ci, &c) in cols.iter().enumerate() {
                dst.weight[[r, c]] = src.weight[[ri, ci]];
            }
        }
    }
    Ok(())
}

fn check_sub_shape(sub: &SubModel) -> Result<()> {
    if sub.model.arch().widths() != sub.mask.sub_widths().as_slice() {
        return Err(Error::IncongruentMask(format!(
            "submodel widths {:?} do not match mask {:?}",
            sub.model.arch().widths(),
            sub.mask.sub_widths()
        )));
    }
    Ok(())
}

/// Coverage-averaged aggregation.
///
/// Each scalar position takes the arithmetic mean of the updates that cover
/// it, summed in list order; positions no update covers keep their value in
/// `global`. A weight is covered when both of its endpoint neurons are kept;
/// a bias when its output neuron is kept.
pub fn aggregate(global: &Model, updates: &[SubModel]) -> Result<Model> {
    for sub in updates {
        sub.mask.check_congruent(global.arch())?;
        check_sub_shape(sub)?;
    }
    let mut out = global.clone();
    for (l, layer) in out.layers_mut().iter_mut().enumerate() {
        let mut w_sum = Array2::<f64>::zeros(layer.weight.dim());
        let mut w_cnt = Array2::<u32>::zeros(layer.weight.dim());
        let mut b_sum = Array1::<f64>::zeros(layer.bias.len());
        let mut b_cnt = Array1::<u32>::zeros(layer.bias.len());
        for sub in updates {
            let src = &sub.model.layers()[l];
            let rows = sub.mask.kept(l + 1);
            let cols = sub.mask.kept(l);
            for (ri, &r) in rows.iter().enumerate() {
                b_sum[r] += src.bias[ri];
                b_cnt[r] += 1;
                let src_row = src.weight.row(ri);
                let mut sum_row = w_sum.row_mut(r);
                let mut cnt_row = w_cnt.row_mut(r);
                for (ci, &c) in cols.iter().enumerate() {
                    sum_row[c] += src_row[ci];
                    cnt_row[c] += 1;
                }
            }
        }
        ndarray::Zip::from(&mut layer.weight)
            .and(&w_sum)
            .and(&w_cnt)
            .for_each(|w, &s, &n| {
                if n > 0 {
                    *w = s / f64::from(n);
                }
            });
        ndarray::Zip::from(&mut layer.bias)
            .and(&b_sum)
            .and(&b_cnt)
            .for_each(|b, &s, &n| {
                if n > 0 {
                    *b = s / f64::from(n);
                }
            });
    }
    Ok(out)
}
