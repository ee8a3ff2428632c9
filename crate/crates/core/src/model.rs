//! The full recommender: both relation encoders, prototype attention per
//! view and node type, contrastive terms, and fusion.

use std::ops::Range;

use crate::config::{RunConfig, Variant};
use crate::error::{Error, Result};
use crate::explicit::{explicit_forward, ExplicitGraph, ExplicitParams, RelationBasis};
use crate::fusion::{concat_views, fuse, FusionParams};
use crate::hin::Hin;
use crate::implicit::{multichannel_forward, ImplicitGraph, ImplicitParams};
use crate::proto::{gat_encode_batch, infonce_pair_loss, kmeans_prototypes, GatParams};
use crate::rng::{self, Stream};
use crate::tensor::{DenseMatrix, ParamId, ParamStore, Tape, Var};

/// Graph-derived constants a forward pass reads.
#[derive(Clone, Debug)]
pub struct GraphInputs {
    pub explicit: ExplicitGraph,
    pub implicit: ImplicitGraph,
    pub features: DenseMatrix,
    /// Global index ranges of the user and item blocks.
    pub users: Range<usize>,
    pub items: Range<usize>,
}

impl GraphInputs {
    /// `graph` should carry only training interactions.
    pub fn new(graph: &Hin, features: DenseMatrix, user_type: usize, item_type: usize) -> Result<Self> {
        if features.rows() != graph.node_count() {
            return Err(Error::shape(format!(
                "{} feature rows for {} nodes",
                features.rows(),
                graph.node_count()
            )));
        }
        Ok(Self {
            explicit: ExplicitGraph::new(graph)?,
            implicit: ImplicitGraph::new(graph),
            features,
            users: graph.block(user_type),
            items: graph.block(item_type),
        })
    }

    pub fn n_users(&self) -> usize {
        self.users.len()
    }

    pub fn n_items(&self) -> usize {
        self.items.len()
    }
}

/// Attention parameters per (node type, view).
#[derive(Clone, Debug, PartialEq)]
pub struct ViewGats {
    pub user_er: GatParams,
    pub user_ir: GatParams,
    pub concept_er: GatParams,
    pub concept_ir: GatParams,
}

/// Prototype matrices per (node type, view); absent for disabled views.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct PrototypeBank {
    pub user_er: Option<DenseMatrix>,
    pub user_ir: Option<DenseMatrix>,
    pub concept_er: Option<DenseMatrix>,
    pub concept_ir: Option<DenseMatrix>,
}

impl PrototypeBank {
    pub const NAMES: [&'static str; 4] = ["proto.user_er", "proto.user_ir", "proto.concept_er", "proto.concept_ir"];

    pub fn slots(&self) -> [&Option<DenseMatrix>; 4] {
        [&self.user_er, &self.user_ir, &self.concept_er, &self.concept_ir]
    }

    pub fn slots_mut(&mut self) -> [&mut Option<DenseMatrix>; 4] {
        [&mut self.user_er, &mut self.user_ir, &mut self.concept_er, &mut self.concept_ir]
    }
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: RunConfig,
    pub store: ParamStore,
    pub basis: RelationBasis,
    pub explicit: ExplicitParams,
    pub implicit: ImplicitParams,
    pub gats: ViewGats,
    pub fusion: FusionParams,
    active: Vec<bool>,
}

/// Outputs of one batch forward.
pub struct BatchOutput {
    pub users: Var,
    pub concepts: Var,
    pub contrast: Option<Var>,
}

impl Model {
    /// All parameter groups are created for every variant, so variants that
    /// share a seed start from the same values; disabled groups are masked.
    pub fn new(config: &RunConfig, adjacency_count: usize) -> Result<Self> {
        config.validate()?;
        let relations = adjacency_count
            .checked_sub(1)
            .filter(|&r| r > 0)
            .ok_or_else(|| Error::Config("graph has no relations".into()))?;
        let mut store = ParamStore::new();
        let mut rng = rng::stream(config.seed, Stream::Init);
        let (d0, d) = (config.dim_input, config.dim_hidden);
        let basis = RelationBasis::init(&mut store, &mut rng, relations, config.bases, d0)?;
        let explicit = ExplicitParams::init(&mut store, &mut rng, relations, d0, d, config.layers_er)?;
        let implicit = ImplicitParams::init(
            &mut store,
            &mut rng,
            adjacency_count,
            config.hops,
            config.channels,
            d0,
            d,
            config.layers_ir,
        )?;
        let gats = ViewGats {
            user_er: GatParams::init(&mut store, &mut rng, "gat.user_er", d),
            user_ir: GatParams::init(&mut store, &mut rng, "gat.user_ir", d),
            concept_er: GatParams::init(&mut store, &mut rng, "gat.concept_er", d),
            concept_ir: GatParams::init(&mut store, &mut rng, "gat.concept_ir", d),
        };
        let fusion = FusionParams::init(&mut store, &mut rng, d, config.dim_fused);
        let mut model = Self {
            config: config.clone(),
            store,
            basis,
            explicit,
            implicit,
            gats,
            fusion,
            active: Vec::new(),
        };
        model.active = model.compute_active();
        Ok(model)
    }

    pub fn variant(&self) -> Variant {
        self.config.variant()
    }

    fn compute_active(&self) -> Vec<bool> {
        let v = self.variant();
        let mut active = vec![false; self.store.len()];
        let mut on = |ids: &mut dyn Iterator<Item = ParamId>| {
            for id in ids {
                active[id.0] = true;
            }
        };
        if v.explicit {
            on(&mut [self.basis.bases, self.basis.coefficients].into_iter());
            on(&mut self.explicit.ids());
            on(&mut self.gats.user_er.ids().into_iter());
            on(&mut self.gats.concept_er.ids().into_iter());
        }
        if v.implicit {
            on(&mut self.implicit.ids());
            on(&mut self.gats.user_ir.ids().into_iter());
            on(&mut self.gats.concept_ir.ids().into_iter());
        }
        on(&mut self.fusion.ids_for(v.fusion, v.explicit, v.implicit).into_iter());
        active
    }

    /// Whether a parameter takes part in this variant (trained and
    /// regularized).
    pub fn is_active(&self, id: ParamId) -> bool {
        self.active[id.0]
    }

    pub fn active_ids(&self) -> Vec<ParamId> {
        self.store.ids().filter(|&id| self.is_active(id)).collect()
    }

    /// Whole-graph states of each enabled view.
    pub fn encode<'a>(&self, tape: &mut Tape<'a>, inputs: &'a GraphInputs) -> Result<(Option<Var>, Option<Var>)> {
        let v = self.variant();
        let x = tape.constant(inputs.features.clone());
        let er = if v.explicit {
            Some(explicit_forward(tape, &self.store, &inputs.explicit, x, &self.basis, &self.explicit)?)
        } else {
            None
        };
        let ir = if v.implicit {
            Some(multichannel_forward(tape, &self.store, &inputs.implicit, x, &self.implicit)?)
        } else {
            None
        };
        Ok((er, ir))
    }

    /// Clusters the current user and concept states of every enabled view.
    pub fn refresh_prototypes(&self, inputs: &GraphInputs, seed: u64) -> Result<PrototypeBank> {
        let mut tape = Tape::new();
        let (er, ir) = self.encode(&mut tape, inputs)?;
        let cl = &self.config.cl;
        let block = |v: Option<Var>, range: &Range<usize>, n: usize, slot: u64| -> Result<Option<DenseMatrix>> {
            let Some(v) = v else { return Ok(None) };
            let rows: Vec<usize> = range.clone().collect();
            let points = tape.value(v).select_rows(&rows);
            let n = n.min(points.rows());
            let set = kmeans_prototypes(&points, n, rng::derive_seed(seed, &[slot]))?;
            Ok(Some(set.prototypes))
        };
        Ok(PrototypeBank {
            user_er: block(er, &inputs.users, cl.prototypes_user, 0)?,
            user_ir: block(ir, &inputs.users, cl.prototypes_user, 1)?,
            concept_er: block(er, &inputs.items, cl.prototypes_concept, 2)?,
            concept_ir: block(ir, &inputs.items, cl.prototypes_concept, 3)?,
        })
    }

    /// Fused representations for the listed users and items (local ids),
    /// plus the weighted contrastive loss when requested and applicable.
    pub fn forward_batch<'a>(
        &self,
        tape: &mut Tape<'a>,
        inputs: &'a GraphInputs,
        bank: &PrototypeBank,
        users: &[usize],
        items: &[usize],
        with_contrast: bool,
    ) -> Result<BatchOutput> {
        let (er, ir) = self.encode(tape, inputs)?;
        let user_rows: Vec<usize> = users.iter().map(|&u| inputs.users.start + u).collect();
        let item_rows: Vec<usize> = items.iter().map(|&k| inputs.items.start + k).collect();
        let g = &self.gats;
        let (user_f, user_cl) = self.side(
            tape,
            er,
            ir,
            &user_rows,
            (&bank.user_er, &bank.user_ir),
            (&g.user_er, &g.user_ir),
            with_contrast,
        )?;
        let (item_f, item_cl) = self.side(
            tape,
            er,
            ir,
            &item_rows,
            (&bank.concept_er, &bank.concept_ir),
            (&g.concept_er, &g.concept_ir),
            with_contrast,
        )?;
        let cl = &self.config.cl;
        let contrast = match (user_cl, item_cl) {
            (None, None) => None,
            (u, k) => {
                let mut total: Option<Var> = None;
                for (term, w) in [(u, cl.alpha_user), (k, cl.alpha_concept)] {
                    if let Some(t) = term {
                        let s = tape.scale(t, w);
                        total = Some(match total {
                            None => s,
                            Some(acc) => tape.add(acc, s)?,
                        });
                    }
                }
                total
            }
        };
        Ok(BatchOutput {
            users: user_f,
            concepts: item_f,
            contrast,
        })
    }

    #[allow(clippy::too_many_arguments)]
    fn side<'a>(
        &self,
        tape: &mut Tape<'a>,
        er: Option<Var>,
        ir: Option<Var>,
        rows: &[usize],
        protos: (&Option<DenseMatrix>, &Option<DenseMatrix>),
        gats: (&GatParams, &GatParams),
        with_contrast: bool,
    ) -> Result<(Var, Option<Var>)> {
        let view = |tape: &mut Tape<'a>,
                        h: Option<Var>,
                        p: &Option<DenseMatrix>,
                        gat: &GatParams|
         -> Result<Option<(Var, Var)>> {
            let Some(h) = h else { return Ok(None) };
            let p = p
                .as_ref()
                .ok_or_else(|| Error::Usage("prototypes missing for an enabled view".into()))?;
            let hb = tape.gather_rows(h, rows)?;
            let (z, _) = gat_encode_batch(tape, &self.store, hb, p, gat)?;
            Ok(Some((hb, z)))
        };
        let e = view(tape, er, protos.0, gats.0)?;
        let i = view(tape, ir, protos.1, gats.1)?;
        let he = e.map(|(h, z)| concat_views(tape, h, z)).transpose()?;
        let hi = i.map(|(h, z)| concat_views(tape, h, z)).transpose()?;
        let fused = fuse(tape, &self.store, self.variant().fusion, he, hi, &self.fusion)?;
        let contrast = match (e, i) {
            (Some((h_er, z_er)), Some((h_ir, z_ir))) if with_contrast && rows.len() >= 2 => {
                let a = self.chunked_infonce(tape, h_er, z_er, z_ir)?;
                let b = self.chunked_infonce(tape, h_ir, z_ir, z_er)?;
                Some(tape.add(a, b)?)
            }
            _ => None,
        };
        Ok((fused, contrast))
    }

    fn chunked_infonce<'a>(&self, tape: &mut Tape<'a>, anchor: Var, pos: Var, neg: Var) -> Result<Var> {
        let tau = self.config.cl.tau;
        let n = tape.shape(anchor).0;
        let size = self.config.cl.sub_batch.unwrap_or(n).min(n);
        let mut total: Option<Var> = None;
        let mut start = 0;
        while start < n {
            let len = size.min(n - start);
            // a trailing chunk of one row has no negatives to contrast with
            if len >= 2 {
                let parts: Vec<Var> = [anchor, pos, neg]
                    .iter()
                    .map(|&v| tape.slice_rows(v, start, len))
                    .collect::<Result<_>>()?;
                let l = infonce_pair_loss(tape, parts[0], parts[1], parts[2], tau)?;
                total = Some(match total {
                    None => l,
                    Some(acc) => tape.add(acc, l)?,
                });
            }
            start += len;
        }
        Ok(total.unwrap_or_else(|| tape.constant(DenseMatrix::zeros(1, 1))))
    }

    /// Fused representations of every user and every item.
    pub fn representations(&self, inputs: &GraphInputs, bank: &PrototypeBank) -> Result<(DenseMatrix, DenseMatrix)> {
        let users: Vec<usize> = (0..inputs.n_users()).collect();
        let items: Vec<usize> = (0..inputs.n_items()).collect();
        let mut tape = Tape::new();
        let out = self.forward_batch(&mut tape, inputs, bank, &users, &items, false)?;
        Ok((tape.value(out.users).clone(), tape.value(out.concepts).clone()))
    }

    /// `n_users × n_items` score table.
    pub fn score_matrix(&self, inputs: &GraphInputs, bank: &PrototypeBank) -> Result<DenseMatrix> {
        let (u, k) = self.representations(inputs, bank)?;
        Ok(u.matmul(&k.transpose())?)
    }

    /// `Σ‖θ‖²` over active parameters.
    pub fn l2<'a>(&self, tape: &mut Tape<'a>) -> Result<Var> {
        let mut total: Option<Var> = None;
        for id in self.active_ids() {
            let p = tape.param(&self.store, id);
            let s = tape.sum_squares(p);
            total = Some(match total {
                None => s,
                Some(acc) => tape.add(acc, s)?,
            });
        }
        Ok(total.unwrap_or_else(|| tape.constant(DenseMatrix::zeros(1, 1))))
    }

    /// `name=norm` for every parameter, for diagnostics.
    pub fn norm_snapshot(&self) -> String {
        self.store
            .iter()
            .map(|(_, name, m)| format!("{name}={:.3e}", m.frobenius()))
            .collect::<Vec<_>>()
            .join(" ")
    }
}
