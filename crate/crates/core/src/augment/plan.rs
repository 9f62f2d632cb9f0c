use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::ops::{apply, OpParams};
use super::{AugmentationSet, OpId};
use crate::error::{MastError, Result};
use crate::image::Image;

/// One operator's draw for one view. A non-fired operator is the identity.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ViewParams {
    pub fired: bool,
    pub params: OpParams,
}

/// Selected operators (set positions, canonical order) plus independent
/// parameter draws for the two views.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompositionPlan {
    pub selected_ops: Vec<usize>,
    pub op_ids: Vec<OpId>,
    pub per_view_params: [Vec<ViewParams>; 2],
}

impl CompositionPlan {
    pub fn empty() -> Self {
        Self {
            selected_ops: Vec::new(),
            op_ids: Vec::new(),
            per_view_params: [Vec::new(), Vec::new()],
        }
    }

    pub fn len(&self) -> usize {
        self.selected_ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.selected_ops.is_empty()
    }

    /// Same operators, fresh parameters for both views.
    pub fn redraw<R: Rng + ?Sized>(&self, rng: &mut R, set: &AugmentationSet) -> Result<Self> {
        Ok(Self {
            selected_ops: self.selected_ops.clone(),
            op_ids: self.op_ids.clone(),
            per_view_params: sample_params(rng, set, &self.selected_ops)?,
        })
    }
}

/// Draws per-view parameters for the given set positions.
pub fn sample_params<R: Rng + ?Sized>(
    rng: &mut R,
    set: &AugmentationSet,
    selected: &[usize],
) -> Result<[Vec<ViewParams>; 2]> {
    let mut views = [Vec::with_capacity(selected.len()), Vec::with_capacity(selected.len())];
    for view in views.iter_mut() {
        for &k in selected {
            let op = set
                .get(k)
                .ok_or_else(|| MastError::contract(format!("operator index {k} out of range")))?;
            let fired = rng.gen::<f64>() < op.probability;
            let (lo, hi) = op.magnitude_range;
            let magnitude = if hi > lo { rng.gen_range(lo..=hi) } else { lo };
            let aux = [rng.gen(), rng.gen(), rng.gen(), rng.gen()];
            let seed = rng.gen();
            view.push(ViewParams {
                fired,
                params: OpParams { magnitude, aux, seed },
            });
        }
    }
    Ok(views)
}

/// Uniformly selects `k_effective` distinct operators of `set` and draws
/// both views' parameters.
pub fn sample_composition<R: Rng + ?Sized>(
    rng: &mut R,
    set: &AugmentationSet,
    k_effective: usize,
) -> Result<CompositionPlan> {
    if k_effective == 0 || k_effective > set.len() {
        return Err(MastError::contract(format!(
            "k_effective {k_effective} must lie in [1, {}]",
            set.len()
        )));
    }
    let mut selected = index::sample(rng, set.len(), k_effective).into_vec();
    selected.sort_unstable();
    let op_ids = selected.iter().map(|&k| set.ops()[k].id).collect();
    let per_view_params = sample_params(rng, set, &selected)?;
    Ok(CompositionPlan {
        selected_ops: selected,
        op_ids,
        per_view_params,
    })
}

fn render(img: &Image, ops: &[OpId], params: &[ViewParams]) -> Result<Image> {
    let mut out = img.clone();
    for (op, vp) in ops.iter().zip(params) {
        if vp.fired {
            out = apply(*op, &vp.params, &out)?;
        }
    }
    Ok(out)
}

/// Renders the two views of `img` described by `plan`.
pub fn make_views(img: &Image, plan: &CompositionPlan) -> Result<(Image, Image)> {
    let [p0, p1] = &plan.per_view_params;
    if p0.len() != plan.op_ids.len() || p1.len() != plan.op_ids.len() {
        return Err(MastError::contract("plan parameters do not match its operators"));
    }
    Ok((render(img, &plan.op_ids, p0)?, render(img, &plan.op_ids, p1)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn img() -> Image {
        let data: Vec<f32> = (0..3 * 8 * 8).map(|i| ((i * 7) % 13) as f32 / 13.0).collect();
        Image::new(8, 8, data).unwrap()
    }

    #[test]
    fn single_op_compositions() {
        let set = AugmentationSet::named("mast5").unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let plan = sample_composition(&mut rng, &set, 1).unwrap();
        assert_eq!(plan.len(), 1);
        let all = sample_composition(&mut rng, &set, 5).unwrap();
        assert_eq!(all.selected_ops, vec![0, 1, 2, 3, 4]);
        assert!(matches!(
            sample_composition(&mut rng, &set, 6),
            Err(MastError::Contract(_))
        ));
        assert!(sample_composition(&mut rng, &set, 0).is_err());
    }

    #[test]
    fn single_op_selection_is_uniform() {
        let set = AugmentationSet::named("mast5").unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mut counts = [0usize; 5];
        for _ in 0..10_000 {
            let plan = sample_composition(&mut rng, &set, 1).unwrap();
            counts[plan.selected_ops[0]] += 1;
        }
        for c in counts {
            assert!((1800..=2200).contains(&c), "{counts:?}");
        }
    }

    #[test]
    fn empty_plan_returns_the_input_twice() {
        let (a, b) = make_views(&img(), &CompositionPlan::empty()).unwrap();
        assert_eq!(a, img());
        assert_eq!(b, img());
    }

    #[test]
    fn flip_only_plan_gives_identical_views() {
        let set = AugmentationSet::from_ids(&[OpId::RandomFlip]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut plan = sample_composition(&mut rng, &set, 1).unwrap();
        for v in plan.per_view_params.iter_mut() {
            v[0].fired = true;
        }
        let (a, b) = make_views(&img(), &plan).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, img());
    }

    #[test]
    fn noise_views_differ() {
        let mut op = super::super::AugmentationOp::new(OpId::GaussianNoise);
        op.probability = 1.0;
        let set = AugmentationSet::new(vec![op]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let differing = (0..100)
            .filter(|_| {
                let plan = sample_composition(&mut rng, &set, 1).unwrap();
                let (a, b) = make_views(&img(), &plan).unwrap();
                a != b
            })
            .count();
        assert_eq!(differing, 100);
    }

    #[test]
    fn same_seed_same_plan_and_views() {
        let set = AugmentationSet::named("mast15").unwrap();
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(9);
            let plan = sample_composition(&mut rng, &set, 6).unwrap();
            let views = make_views(&img(), &plan).unwrap();
            (plan, views)
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn redraw_keeps_operators() {
        let set = AugmentationSet::named("mast15").unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let plan = sample_composition(&mut rng, &set, 4).unwrap();
        let other = plan.redraw(&mut rng, &set).unwrap();
        assert_eq!(plan.selected_ops, other.selected_ops);
        assert_ne!(plan.per_view_params, other.per_view_params);
    }
}
