//! Merging the explicit and implicit views into one representation, and
//! dot-product scoring.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{xavier, DenseMatrix, ParamId, ParamStore, Tape, Var};

/// How the two views are merged.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FusionMode {
    /// Softmax over one learned score per view.
    Attention,
    /// Concatenate both views and project.
    Concat,
    /// Sum the per-view mapped vectors.
    Add,
}

impl std::str::FromStr for FusionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "attention" => Ok(Self::Attention),
            "concat" => Ok(Self::Concat),
            "add" => Ok(Self::Add),
            _ => Err(Error::Config(format!(
                "fusion mode `{s}` (expected attention, concat or add)"
            ))),
        }
    }
}

impl std::fmt::Display for FusionMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Attention => "attention",
            Self::Concat => "concat",
            Self::Add => "add",
        })
    }
}

/// Per-view map with its bias.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ViewMap {
    pub weight: ParamId,
    pub bias: ParamId,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FusionParams {
    pub explicit: ViewMap,
    pub implicit: ViewMap,
    /// Shared value map `2d → d_F`.
    pub value: ViewMap,
    /// Shared score map `2d → 1`.
    pub score: ViewMap,
    /// Projection `4d → d_F` used by [`FusionMode::Concat`].
    pub concat: ViewMap,
    pub dim: usize,
    pub fused_dim: usize,
}

impl FusionParams {
    /// `dim` is the width of one view's `[h ‖ z]` half, i.e. `d`.
    pub fn init<R: Rng>(store: &mut ParamStore, rng: &mut R, dim: usize, fused_dim: usize) -> Self {
        let mut map = |name: &str, rows: usize, cols: usize| ViewMap {
            weight: store.add(format!("fuse.{name}.w"), xavier(rng, rows, cols)),
            bias: store.add(format!("fuse.{name}.b"), DenseMatrix::zeros(1, cols)),
        };
        let two = 2 * dim;
        Self {
            explicit: map("er", two, two),
            implicit: map("ir", two, two),
            value: map("v", two, fused_dim),
            score: map("s", two, 1),
            concat: map("cat", 2 * two, fused_dim),
            dim,
            fused_dim,
        }
    }

    /// Parameters a mode actually reads.
    pub fn ids_for(&self, mode: FusionMode, explicit: bool, implicit: bool) -> Vec<ParamId> {
        let pair = |m: &ViewMap| [m.weight, m.bias];
        let mut out = Vec::new();
        match mode {
            FusionMode::Concat if explicit && implicit => out.extend(pair(&self.concat)),
            _ => {
                if explicit {
                    out.extend(pair(&self.explicit));
                }
                if implicit {
                    out.extend(pair(&self.implicit));
                }
                out.extend(pair(&self.value));
                if mode == FusionMode::Attention && explicit && implicit {
                    out.extend(pair(&self.score));
                }
            }
        }
        out
    }
}

fn affine<'a>(tape: &mut Tape<'a>, store: &ParamStore, x: Var, m: &ViewMap) -> Result<Var> {
    let w = tape.param(store, m.weight);
    let xw = tape.matmul(x, w)?;
    let b = tape.param(store, m.bias);
    tape.add(xw, b)
}

/// `[h ‖ z]`, original representation first.
pub fn concat_views<'a>(tape: &mut Tape<'a>, h: Var, z: Var) -> Result<Var> {
    tape.concat_cols(h, z)
}

/// Mapped vector `ĥ = W_v·tanh(W_view·h′ + b_view) + b_v` and the scalar
/// score `W_s·tanh(…) + b_s` of one view.
pub fn view_head<'a>(
    tape: &mut Tape<'a>,
    store: &ParamStore,
    h: Var,
    view: &ViewMap,
    params: &FusionParams,
) -> Result<(Var, Var)> {
    let pre = affine(tape, store, h, view)?;
    let u = tape.tanh(pre);
    let mapped = affine(tape, store, u, &params.value)?;
    let score = affine(tape, store, u, &params.score)?;
    Ok((mapped, score))
}

/// Dual-head attention fusion. Returns `h^F` (`B × d_F`) and the view
/// weights (`B × 2`, explicit first).
pub fn dual_head_fuse<'a>(
    tape: &mut Tape<'a>,
    store: &ParamStore,
    explicit: Var,
    implicit: Var,
    params: &FusionParams,
) -> Result<(Var, Var)> {
    let (he, se) = view_head(tape, store, explicit, &params.explicit, params)?;
    let (hi, si) = view_head(tape, store, implicit, &params.implicit, params)?;
    let logits = tape.concat_cols(se, si)?;
    let weights = tape.softmax_rows(logits);
    let we = tape.slice_cols(weights, 0, 1)?;
    let wi = tape.slice_cols(weights, 1, 1)?;
    let a = tape.mul(he, we)?;
    let b = tape.mul(hi, wi)?;
    Ok((tape.add(a, b)?, weights))
}

/// Fused representation under any mode; a missing view falls back to the
/// other view's mapped vector.
pub fn fuse<'a>(
    tape: &mut Tape<'a>,
    store: &ParamStore,
    mode: FusionMode,
    explicit: Option<Var>,
    implicit: Option<Var>,
    params: &FusionParams,
) -> Result<Var> {
    let single = |tape: &mut Tape<'a>, h: Var, view: &ViewMap| -> Result<Var> {
        let pre = affine(tape, store, h, view)?;
        let u = tape.tanh(pre);
        affine(tape, store, u, &params.value)
    };
    match (explicit, implicit) {
        (Some(e), Some(i)) => match mode {
            FusionMode::Attention => Ok(dual_head_fuse(tape, store, e, i, params)?.0),
            FusionMode::Concat => {
                let both = tape.concat_cols(e, i)?;
                affine(tape, store, both, &params.concat)
            }
            FusionMode::Add => {
                let a = single(tape, e, &params.explicit)?;
                let b = single(tape, i, &params.implicit)?;
                tape.add(a, b)
            }
        },
        (Some(e), None) => single(tape, e, &params.explicit),
        (None, Some(i)) => single(tape, i, &params.implicit),
        (None, None) => Err(Error::Config("at least one view must be enabled".into())),
    }
}

/// Inner product of a user and a concept representation.
pub fn predict_score(user: &[f64], concept: &[f64]) -> Result<f64> {
    if user.len() != concept.len() {
        return Err(Error::shape(format!(
            "score of widths {} and {}",
            user.len(),
            concept.len()
        )));
    }
    Ok(user.iter().zip(concept).map(|(a, b)| a * b).sum())
}

/// Row-wise inner products of two equally shaped batches, as a column.
pub fn score_rows<'a>(tape: &mut Tape<'a>, users: Var, concepts: Var) -> Result<Var> {
    if tape.shape(users) != tape.shape(concepts) {
        return Err(Error::shape(format!(
            "scoring {:?} against {:?}",
            tape.shape(users),
            tape.shape(concepts)
        )));
    }
    let prod = tape.mul(users, concepts)?;
    Ok(tape.row_sums(prod))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck::check_gradients;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DenseMatrix {
        DenseMatrix::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0))
    }

    fn setup(seed: u64) -> (ChaCha8Rng, ParamStore, FusionParams) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let params = FusionParams::init(&mut store, &mut rng, 2, 3);
        (rng, store, params)
    }

    #[test]
    fn concat_cases() {
        let mut tape = Tape::new();
        let z = tape.constant(DenseMatrix::zeros(1, 2));
        let v = tape.constant(DenseMatrix::row_vector(&[3.0, 4.0]));
        let c = concat_views(&mut tape, z, v).unwrap();
        assert_eq!(tape.value(c).values(), &[0.0, 0.0, 3.0, 4.0]);
    }

    #[test]
    fn weights_are_convex_and_output_reconstructs() {
        let (mut rng, store, params) = setup(0);
        let mut tape = Tape::new();
        let e = tape.constant(rand_matrix(&mut rng, 50, 4));
        let i = tape.constant(rand_matrix(&mut rng, 50, 4));
        let (h, w) = dual_head_fuse(&mut tape, &store, e, i, &params).unwrap();
        let (he, _) = view_head(&mut tape, &store, e, &params.explicit, &params).unwrap();
        let (hi, _) = view_head(&mut tape, &store, i, &params.implicit, &params).unwrap();
        let (wv, hv, hev, hiv) = (tape.value(w), tape.value(h), tape.value(he), tape.value(hi));
        for r in 0..50 {
            assert!((wv.get(r, 0) + wv.get(r, 1) - 1.0).abs() <= 1e-12);
            for c in 0..3 {
                let want = wv.get(r, 0) * hev.get(r, c) + wv.get(r, 1) * hiv.get(r, c);
                assert!((hv.get(r, c) - want).abs() <= 1e-10);
            }
        }
    }

    #[test]
    fn symmetric_views_split_evenly() {
        let (mut rng, mut store, params) = setup(1);
        let w = store.get(params.explicit.weight).clone();
        *store.get_mut(params.implicit.weight) = w;
        let b = rand_matrix(&mut rng, 1, 4);
        *store.get_mut(params.explicit.bias) = b.clone();
        *store.get_mut(params.implicit.bias) = b;
        let mut tape = Tape::new();
        let x = tape.constant(rand_matrix(&mut rng, 3, 4));
        let (h, wts) = dual_head_fuse(&mut tape, &store, x, x, &params).unwrap();
        assert!(tape.value(wts).values().iter().all(|&v| v == 0.5));
        let (he, _) = view_head(&mut tape, &store, x, &params.explicit, &params).unwrap();
        assert!(tape.value(h).max_abs_diff(tape.value(he)) <= 1e-15);
    }

    #[test]
    fn swapping_views_with_their_maps_is_invariant() {
        let (mut rng, store, params) = setup(2);
        let ex = rand_matrix(&mut rng, 5, 4);
        let im = rand_matrix(&mut rng, 5, 4);
        let run = |s: &ParamStore, a: &DenseMatrix, b: &DenseMatrix| {
            let mut tape = Tape::new();
            let (a, b) = (tape.constant(a.clone()), tape.constant(b.clone()));
            let (h, _) = dual_head_fuse(&mut tape, s, a, b, &params).unwrap();
            tape.value(h).clone()
        };
        let mut swapped = store.clone();
        for (x, y) in [
            (params.explicit.weight, params.implicit.weight),
            (params.explicit.bias, params.implicit.bias),
        ] {
            *swapped.get_mut(x) = store.get(y).clone();
            *swapped.get_mut(y) = store.get(x).clone();
        }
        assert!(run(&store, &ex, &im).max_abs_diff(&run(&swapped, &im, &ex)) <= 1e-10);
    }

    #[test]
    fn fusion_gradients() {
        for seed in 0..5 {
            let (mut rng, store, params) = setup(seed);
            let ex = rand_matrix(&mut rng, 3, 4);
            let im = rand_matrix(&mut rng, 3, 4);
            for mode in [FusionMode::Attention, FusionMode::Concat, FusionMode::Add] {
                let report = check_gradients(&store, &[], 1e-5, |tape, s| {
                    let (a, b) = (tape.constant(ex.clone()), tape.constant(im.clone()));
                    let h = fuse(tape, s, mode, Some(a), Some(b), &params)?;
                    Ok(tape.sum_squares(h))
                })
                .unwrap();
                assert!(report.max_rel_error() <= 1e-4, "{mode}: {:?}", report.worst());
            }
        }
    }

    #[test]
    fn mode_parameter_sets() {
        let (_, _, p) = setup(0);
        assert_eq!(p.ids_for(FusionMode::Attention, true, true).len(), 8);
        assert_eq!(p.ids_for(FusionMode::Concat, true, true).len(), 2);
        assert_eq!(p.ids_for(FusionMode::Add, true, true).len(), 6);
        assert_eq!(p.ids_for(FusionMode::Attention, true, false).len(), 4);
        let mut tape = Tape::new();
        assert!(fuse(&mut tape, &ParamStore::new(), FusionMode::Add, None, None, &p).is_err());
    }

    #[test]
    fn score_cases() {
        assert_eq!(predict_score(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        let u = [0.6, 0.8];
        assert!((predict_score(&u, &u).unwrap() - 1.0).abs() < 1e-15);
        assert!(predict_score(&[1.0], &[1.0, 2.0]).is_err());
        let items = [[0.3, -0.2], [0.9, 0.1], [-0.5, 0.5]];
        let rank = |scale: f64| {
            let mut idx: Vec<usize> = (0..3).collect();
            let s: Vec<f64> = items
                .iter()
                .map(|k| predict_score(&[u[0] * scale, u[1] * scale], k).unwrap())
                .collect();
            idx.sort_by(|&a, &b| s[b].total_cmp(&s[a]));
            idx
        };
        assert_eq!(rank(1.0), rank(2.0));
    }

    #[test]
    fn modes_parse() {
        for m in [FusionMode::Attention, FusionMode::Concat, FusionMode::Add] {
            assert_eq!(m.to_string().parse::<FusionMode>().unwrap(), m);
        }
        assert!("sum".parse::<FusionMode>().is_err());
    }
}
