//! Multi-scale pooled feature extraction: turns tapped activations into
//! the seven fixed-size representations C2..F2.
//!
//! Conv taps go through a two-stage reduction (average pooling down to a
//! 7-wide grid, then overlapping 3/2 max pooling) so every conv
//! representation is a 3x3 grid regardless of the input side. The patch
//! and its horizontal mirror are both run; flipped conv maps are
//! mirrored back along width before averaging.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::netdef::{forward, ExecMode, NetworkSpec, TapPoint, WeightStore};
use crate::tensor::{pool2d, PoolMode, Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PoolStage {
    pub window: usize,
    pub stride: usize,
}

/// The per-tap stage pair: optional average stage, then max stage.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PoolSchedule {
    pub average: Option<PoolStage>,
    pub max: Option<PoolStage>,
}

/// Derives the stage pair that reduces a `side x side` conv tap to 3x3.
///
/// - side > 7: average with stride `side/7` and window `side - 6*stride`
///   (exactly 7 windows fit, so the intermediate side is exactly 7;
///   sides 28 and 14 give the published avg(4,4) and avg(2,2)), then
///   max(3, 2);
/// - side == 7: max(3, 2) only;
/// - sides 4..6: a single max with window `side - 2`, stride 1;
/// - side == 3: identity.
pub fn derive_schedule(spatial_side: usize) -> Result<PoolSchedule> {
    match spatial_side {
        0..=2 => Err(Error::Argument(format!(
            "no pooling schedule for side {spatial_side} < 3"
        ))),
        3 => Ok(PoolSchedule { average: None, max: None }),
        4..=6 => Ok(PoolSchedule {
            average: None,
            max: Some(PoolStage { window: spatial_side - 2, stride: 1 }),
        }),
        7 => Ok(PoolSchedule { average: None, max: Some(PoolStage { window: 3, stride: 2 }) }),
        side => {
            let stride = side / 7;
            Ok(PoolSchedule {
                average: Some(PoolStage { window: side - 6 * stride, stride }),
                max: Some(PoolStage { window: 3, stride: 2 }),
            })
        }
    }
}

fn apply_schedule<T: Scalar>(map: &Tensor<T>) -> Result<Tensor<T>> {
    let (_, h, w) = map.dims3()?;
    if h != w {
        return Err(Error::Shape(format!("pool schedule expects a square map, got {h}x{w}")));
    }
    let schedule = derive_schedule(h)?;
    let mut cur = map.clone();
    if let Some(avg) = schedule.average {
        cur = pool2d(&cur, PoolMode::Average, avg.window, avg.stride)?;
    }
    if let Some(max) = schedule.max {
        cur = pool2d(&cur, PoolMode::Max, max.window, max.stride)?;
    }
    Ok(cur)
}

/// Extraction provenance carried alongside the feature vectors.
#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct Provenance {
    pub weights_hash: u64,
    pub input_id: u32,
    pub flip_averaged: bool,
}

/// The named pooled representations of one face.
#[derive(Clone, Debug, PartialEq)]
pub struct RepresentationSet<T> {
    reps: BTreeMap<TapPoint, Vec<T>>,
    pub provenance: Provenance,
}

impl<T: Scalar> RepresentationSet<T> {
    pub fn get(&self, tap: TapPoint) -> Option<&[T]> {
        self.reps.get(&tap).map(Vec::as_slice)
    }

    pub fn taps(&self) -> impl Iterator<Item = (TapPoint, &[T])> {
        self.reps.iter().map(|(t, v)| (*t, v.as_slice()))
    }

    pub fn len(&self) -> usize {
        self.reps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.reps.is_empty()
    }

    pub fn insert(&mut self, tap: TapPoint, features: Vec<T>) {
        self.reps.insert(tap, features);
    }

    pub fn empty() -> Self {
        RepresentationSet { reps: BTreeMap::new(), provenance: Provenance::default() }
    }
}

/// Runs the patch and its horizontal mirror through the network and
/// pools every requested tap down to its fixed-size vector.
pub fn extract_taps<T: Scalar>(
    spec: &NetworkSpec,
    store: &WeightStore<T>,
    center_patch: &Tensor<T>,
    taps: &[TapPoint],
) -> Result<RepresentationSet<T>> {
    let mirrored = center_patch.mirror_width()?;
    let direct = forward(spec, store, center_patch, taps, ExecMode::Infer, None)?;
    let flipped = forward(spec, store, &mirrored, taps, ExecMode::Infer, None)?;

    let half = T::from_f64(0.5);
    let mut reps = BTreeMap::new();
    for &tap in taps {
        let a = &direct.taps[&tap];
        let b = &flipped.taps[&tap];
        let pooled = if tap.is_fc() {
            // FC vectors carry no spatial axis: plain average.
            let mut avg = a.clone();
            avg.add_scaled(b, T::one())?;
            avg.scaled(half)
        } else {
            // Mirror the flipped map back along width before averaging,
            // then reduce to the 3x3 grid.
            let mut avg = a.clone();
            avg.add_scaled(&b.mirror_width()?, T::one())?;
            apply_schedule(&avg.scaled(half))?
        };
        reps.insert(tap, pooled.into_data());
    }
    Ok(RepresentationSet {
        reps,
        provenance: Provenance {
            weights_hash: store.content_hash(),
            input_id: 0,
            flip_averaged: true,
        },
    })
}

/// Extracts all seven representations (requires the build geometry).
pub fn extract<T: Scalar>(
    spec: &NetworkSpec,
    store: &WeightStore<T>,
    center_patch: &Tensor<T>,
) -> Result<RepresentationSet<T>> {
    extract_taps(spec, store, center_patch, &TapPoint::ALL)
}

/// Face half kept by the C6 condensation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Region {
    Upper,
    Lower,
}

/// Crops the pooled C6 grid to its upper or lower two rows, giving the
/// condensed 256x2x3 feature (length 1536).
pub fn condense_c6<T: Scalar>(set: &RepresentationSet<T>, region: Region) -> Result<Vec<T>> {
    let c6 = set
        .get(TapPoint::Conv6)
        .ok_or_else(|| Error::Argument("representation set has no C6 entry".into()))?;
    if c6.len() != 256 * 9 {
        return Err(Error::Shape(format!("C6 must have length 2304, got {}", c6.len())));
    }
    let rows: [usize; 2] = match region {
        Region::Upper => [0, 1],
        Region::Lower => [1, 2],
    };
    let mut out = Vec::with_capacity(256 * 6);
    for ch in 0..256 {
        for &r in &rows {
            let base = ch * 9 + r * 3;
            out.extend_from_slice(&c6[base..base + 3]);
        }
    }
    Ok(out)
}

/// Representation lengths from the published dimension column.
pub fn expected_len(tap: TapPoint) -> usize {
    match tap {
        TapPoint::Conv2 => 3 * 3 * 192,
        TapPoint::Conv3 | TapPoint::Conv4 | TapPoint::Conv5 => 3 * 3 * 384,
        TapPoint::Conv6 => 3 * 3 * 256,
        TapPoint::Fc1 | TapPoint::Fc2 => 512,
    }
}
