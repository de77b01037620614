use serde::{Deserialize, Serialize};

use super::SymbolicScene;
use crate::error::{Error, Result};
use crate::nn::layers::{add_embedding, embed_many};
use crate::nn::{Activation, FeedForwardLayer, Graph, LayerNorm, ParamId, ParamStore, RngState, Tensor, Var};
use crate::worldgen::WorldSchema;

/// Where edge vectors come from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EdgeSource {
    /// `LayerNorm(FeedForward(o_i ⊕ o_j))` over the object vectors.
    Learned,
    /// Embeddings of the annotated predicates in both directions.
    Annotated,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LookConfig {
    pub slots: usize,
    pub noise_std: f64,
    pub slot_dropout: f64,
    pub permute_slots: bool,
    pub lambda_box: f64,
    pub edge_source: EdgeSource,
    /// Adds annotated predicate embeddings inside the learned edge layer,
    /// standing in for pairwise visual evidence.
    pub relation_evidence: bool,
}

impl Default for LookConfig {
    fn default() -> Self {
        Self {
            slots: 12,
            noise_std: 0.0,
            slot_dropout: 0.0,
            permute_slots: true,
            lambda_box: 1.0,
            edge_source: EdgeSource::Annotated,
            relation_evidence: false,
        }
    }
}

/// Row of ordered pair `(i, j)`, `i != j`, in an `n (n - 1)` edge table.
pub fn pair_index(n: usize, i: usize, j: usize) -> usize {
    debug_assert!(i != j && i < n && j < n);
    i * (n - 1) + if j < i { j } else { j - 1 }
}

/// Ordered pairs in edge-table order.
pub fn ordered_pairs(n: usize) -> Vec<(usize, usize)> {
    (0..n)
        .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct VectorSceneGraph {
    /// `N x D`, one row per slot.
    pub objects: Tensor,
    /// `N (N - 1) x D`, rows ordered by [`pair_index`].
    pub edges: Tensor,
    pub slot_count: usize,
    /// Position in `scene.objects` held by each slot.
    pub slot_to_object: Vec<Option<usize>>,
}

impl VectorSceneGraph {
    pub fn object(&self, i: usize) -> &[f64] {
        self.objects.row(i)
    }

    pub fn edge(&self, i: usize, j: usize) -> &[f64] {
        self.edges.row(pair_index(self.slot_count, i, j))
    }

    pub fn is_finite(&self) -> bool {
        self.objects.is_finite() && self.edges.is_finite()
    }
}

/// Object and edge vectors of one scene living on a tape.
#[derive(Clone, Debug)]
pub struct EncodedScene {
    pub objects: Var,
    pub edges: Var,
    pub slot_to_object: Vec<Option<usize>>,
}

impl EncodedScene {
    pub fn to_graph(&self, g: &Graph) -> VectorSceneGraph {
        VectorSceneGraph {
            objects: g.value(self.objects).clone(),
            edges: g.value(self.edges).clone(),
            slot_count: self.slot_to_object.len(),
            slot_to_object: self.slot_to_object.clone(),
        }
    }

    /// Gold bits per slot for a bitmap indexed by scene position.
    pub fn slot_bits(&self, bitmap: &[bool]) -> Vec<usize> {
        self.slot_to_object
            .iter()
            .map(|s| s.is_some_and(|p| bitmap.get(p).copied().unwrap_or(false)) as usize)
            .collect()
    }
}

/// Parameters that turn a symbolic scene into slot vectors and edges.
#[derive(Clone, Debug)]
pub struct SceneEncoder {
    pub dim: usize,
    /// Categories plus a final "no object" row.
    pub category: ParamId,
    /// Per metaconcept: values plus a final "unspecified" row.
    pub attributes: Vec<ParamId>,
    pub bbox: FeedForwardLayer,
    pub edge_ff: FeedForwardLayer,
    pub edge_ln: LayerNorm,
    /// Predicates plus a final "no relation" row, for `i -> j` and `j -> i`.
    pub relation_out: ParamId,
    pub relation_in: ParamId,
}

impl SceneEncoder {
    pub fn new(store: &mut ParamStore, prefix: &str, schema: &WorldSchema, dim: usize, rng: &mut RngState) -> Self {
        let attributes = schema
            .metaconcepts
            .iter()
            .map(|m| add_embedding(store, &format!("{prefix}.attr.{}", m.name), m.values.len() + 1, dim, rng))
            .collect();
        let p = schema.predicates.len() + 1;
        Self {
            dim,
            category: add_embedding(store, &format!("{prefix}.category"), schema.categories.len() + 1, dim, rng),
            attributes,
            bbox: FeedForwardLayer::new(store, &format!("{prefix}.box"), 4, dim, Activation::Identity, rng),
            edge_ff: FeedForwardLayer::new(store, &format!("{prefix}.edge.ff"), 2 * dim, dim, Activation::Identity, rng),
            edge_ln: LayerNorm::new(store, &format!("{prefix}.edge.ln"), dim),
            relation_out: add_embedding(store, &format!("{prefix}.relation_out"), p, dim, rng),
            relation_in: add_embedding(store, &format!("{prefix}.relation_in"), p, dim, rng),
        }
    }

    /// Vectors of the real objects, in scene order, without noise.
    fn object_rows(&self, g: &mut Graph, scene: &SymbolicScene, schema: &WorldSchema) -> Result<Var> {
        let cats = scene
            .objects
            .iter()
            .map(|o| {
                schema
                    .category_index(&o.category)
                    .ok_or_else(|| Error::Schema(format!("unknown category {}", o.category)))
            })
            .collect::<Result<Vec<_>>>()?;
        let mut acc = embed_many(g, self.category, &cats)?;
        for (mi, m) in schema.metaconcepts.iter().enumerate() {
            let idx = scene
                .objects
                .iter()
                .map(|o| match o.attributes.get(&m.name) {
                    Some(v) => schema
                        .value_index(mi, v)
                        .ok_or_else(|| Error::Schema(format!("value {v} not in {}", m.name))),
                    None => Ok(m.values.len()),
                })
                .collect::<Result<Vec<_>>>()?;
            let e = embed_many(g, self.attributes[mi], &idx)?;
            acc = g.add(acc, e)?;
        }
        let boxes: Vec<f64> = scene.objects.iter().flat_map(|o| o.bbox).collect();
        let b = g.constant(Tensor::matrix(scene.objects.len(), 4, boxes)?);
        let b = self.bbox.forward(g, b)?;
        Ok(g.add(acc, b)?)
    }

    /// Slot vectors and edges for `scene`. The rng drives noise, dropout and
    /// the slot permutation; with `permute_slots` off, slot `i` holds object `i`.
    pub fn encode(
        &self,
        g: &mut Graph,
        scene: &SymbolicScene,
        schema: &WorldSchema,
        cfg: &LookConfig,
        rng: &mut RngState,
    ) -> Result<EncodedScene> {
        let n = cfg.slots;
        if scene.objects.len() > n {
            return Err(Error::Capacity {
                objects: scene.objects.len(),
                slots: n,
            });
        }
        let kept: Vec<usize> = (0..scene.objects.len())
            .filter(|_| cfg.slot_dropout <= 0.0 || !rng.bernoulli(cfg.slot_dropout))
            .collect();
        let mut items: Vec<Option<usize>> = kept.iter().map(|&p| Some(p)).collect();
        items.resize(n, None);
        if cfg.permute_slots {
            rng.shuffle(&mut items);
        }
        let no_object = schema.categories.len();
        let table_rows = scene.objects.len();
        let objects = if table_rows == 0 {
            embed_many(g, self.category, &vec![no_object; n])?
        } else {
            let real = self.object_rows(g, scene, schema)?;
            let real = if cfg.noise_std > 0.0 {
                let noise = (0..table_rows * self.dim).map(|_| cfg.noise_std * rng.normal()).collect();
                let noise = g.constant(Tensor::matrix(table_rows, self.dim, noise)?);
                g.add(real, noise)?
            } else {
                real
            };
            let empty = embed_many(g, self.category, &[no_object])?;
            let table = g.concat_rows(&[real, empty])?;
            let rows: Vec<usize> = items.iter().map(|s| s.unwrap_or(table_rows)).collect();
            g.gather_rows(table, &rows)?
        };
        let edges = if n < 2 {
            g.constant(Tensor::zeros(&[0, self.dim]))
        } else {
            match cfg.edge_source {
                EdgeSource::Learned => {
                    let evidence = if cfg.relation_evidence {
                        Some(self.annotated_edges(g, scene, schema, &items)?)
                    } else {
                        None
                    };
                    self.learned_edges(g, objects, n, evidence)?
                }
                EdgeSource::Annotated => self.annotated_edges(g, scene, schema, &items)?,
            }
        };
        Ok(EncodedScene {
            objects,
            edges,
            slot_to_object: items,
        })
    }

    fn learned_edges(&self, g: &mut Graph, objects: Var, n: usize, evidence: Option<Var>) -> Result<Var> {
        let left = self.edge_ff.weight_block(g, objects, 0, self.dim)?;
        let right = self.edge_ff.weight_block(g, objects, self.dim, self.dim)?;
        let pairs = ordered_pairs(n);
        let li: Vec<usize> = pairs.iter().map(|p| p.0).collect();
        let ri: Vec<usize> = pairs.iter().map(|p| p.1).collect();
        let l = g.gather_rows(left, &li)?;
        let r = g.gather_rows(right, &ri)?;
        let pre = g.add(l, r)?;
        let bias = g.param(self.edge_ff.bias);
        let mut pre = g.add_row(pre, bias)?;
        if let Some(e) = evidence {
            pre = g.add(pre, e)?;
        }
        Ok(self.edge_ln.forward(g, pre)?)
    }

    fn annotated_edges(
        &self,
        g: &mut Graph,
        scene: &SymbolicScene,
        schema: &WorldSchema,
        items: &[Option<usize>],
    ) -> Result<Var> {
        let none = schema.predicates.len();
        let label = |a: Option<usize>, b: Option<usize>| -> usize {
            match (a, b) {
                (Some(a), Some(b)) => scene
                    .predicate_between(a, b)
                    .and_then(|p| schema.predicate_index(p))
                    .unwrap_or(none),
                _ => none,
            }
        };
        let pairs = ordered_pairs(items.len());
        let out_idx: Vec<usize> = pairs.iter().map(|&(i, j)| label(items[i], items[j])).collect();
        let in_idx: Vec<usize> = pairs.iter().map(|&(i, j)| label(items[j], items[i])).collect();
        let a = embed_many(g, self.relation_out, &out_idx)?;
        let b = embed_many(g, self.relation_in, &in_idx)?;
        Ok(g.add(a, b)?)
    }
}

/// Edge vector of one ordered pair: `LayerNorm(FeedForward(o_i ⊕ o_j))`.
pub fn build_edge_vector(g: &mut Graph, enc: &SceneEncoder, o_i: Var, o_j: Var) -> Result<Var> {
    let (a, b) = (g.value(o_i).shape().to_vec(), g.value(o_j).shape().to_vec());
    if a != b {
        return Err(Error::Nn(crate::nn::NnError::Dimension(format!(
            "build_edge_vector: shapes {a:?} and {b:?}"
        ))));
    }
    let x = g.concat_cols(&[o_i, o_j])?;
    let y = enc.edge_ff.forward(g, x)?;
    Ok(enc.edge_ln.forward(g, y)?)
}

/// Runs the encoder on its own tape and returns plain tensors.
pub fn embed_scene(
    store: &ParamStore,
    enc: &SceneEncoder,
    scene: &SymbolicScene,
    schema: &WorldSchema,
    cfg: &LookConfig,
    rng: &mut RngState,
) -> Result<VectorSceneGraph> {
    let mut g = Graph::new(store);
    let e = enc.encode(&mut g, scene, schema, cfg, rng)?;
    Ok(e.to_graph(&g))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeMap;

    fn setup(dim: usize) -> (ParamStore, SceneEncoder, WorldSchema) {
        let schema = WorldSchema::default();
        let mut store = ParamStore::new();
        let enc = SceneEncoder::new(&mut store, "look", &schema, dim, &mut RngState::new(3));
        (store, enc, schema)
    }

    fn scene() -> SymbolicScene {
        serde_json::from_str(
            r#"{"scene_id":"s","objects":[
                {"id":0,"category":"girl","attributes":{"color":"pink"},"box":[0.1,0.1,0.3,0.6]},
                {"id":1,"category":"hamburger","attributes":{"color":"yellow"},"box":[0.3,0.4,0.1,0.1]}],
               "relations":[[0,"holding",1]]}"#,
        )
        .unwrap()
    }

    #[test]
    fn pair_index_enumerates_edges() {
        for n in 1..6 {
            let pairs = ordered_pairs(n);
            assert_eq!(pairs.len(), n * (n - 1));
            for (r, &(i, j)) in pairs.iter().enumerate() {
                assert_eq!(pair_index(n, i, j), r);
            }
        }
    }

    #[test]
    fn empty_scene_gives_identical_no_object_slots() {
        let (store, enc, schema) = setup(8);
        let cfg = LookConfig {
            slots: 4,
            ..Default::default()
        };
        let empty = SymbolicScene {
            scene_id: "e".into(),
            objects: vec![],
            relations: vec![],
        };
        let v = embed_scene(&store, &enc, &empty, &schema, &cfg, &mut RngState::new(0)).unwrap();
        assert_eq!(v.objects.rows(), 4);
        assert_eq!(v.edges.rows(), 12);
        for i in 1..4 {
            assert_eq!(v.object(i), v.object(0));
        }
        assert!(v.slot_to_object.iter().all(|s| s.is_none()));
    }

    #[test]
    fn capacity_error() {
        let (store, enc, schema) = setup(8);
        let cfg = LookConfig {
            slots: 1,
            ..Default::default()
        };
        assert!(matches!(
            embed_scene(&store, &enc, &scene(), &schema, &cfg, &mut RngState::new(0)),
            Err(Error::Capacity { objects: 2, slots: 1 })
        ));
    }

    #[test]
    fn deterministic_and_complete() {
        let (store, enc, schema) = setup(8);
        for src in [EdgeSource::Learned, EdgeSource::Annotated] {
            let cfg = LookConfig {
                slots: 5,
                edge_source: src,
                ..Default::default()
            };
            let a = embed_scene(&store, &enc, &scene(), &schema, &cfg, &mut RngState::new(9)).unwrap();
            let b = embed_scene(&store, &enc, &scene(), &schema, &cfg, &mut RngState::new(9)).unwrap();
            assert_eq!(a, b);
            assert_eq!(a.edges.rows(), 20);
            assert!(a.is_finite());
        }
    }

    #[test]
    fn slot_vector_is_sum_of_parts() {
        let (store, enc, schema) = setup(6);
        let cfg = LookConfig {
            slots: 3,
            permute_slots: false,
            ..Default::default()
        };
        let v = embed_scene(&store, &enc, &scene(), &schema, &cfg, &mut RngState::new(0)).unwrap();
        let girl = schema.category_index("girl").unwrap();
        let pink = schema.value_index(0, "pink").unwrap();
        let w = store.value(enc.bbox.weight);
        let b = store.value(enc.bbox.bias);
        let bbox = [0.1, 0.1, 0.3, 0.6];
        for d in 0..6 {
            let mut want = store.value(enc.category).row(girl)[d] + store.value(enc.attributes[0]).row(pink)[d];
            for (mi, m) in schema.metaconcepts.iter().enumerate().skip(1) {
                want += store.value(enc.attributes[mi]).row(m.values.len())[d];
            }
            want += b.data()[d] + (0..4).map(|k| w.row(d)[k] * bbox[k]).sum::<f64>();
            assert!((v.object(0)[d] - want).abs() < 1e-12);
        }
        assert_eq!(v.object(2), store.value(enc.category).row(schema.categories.len()));
        assert_eq!(v.slot_to_object, vec![Some(0), Some(1), None]);
    }

    #[test]
    fn noise_has_configured_spread() {
        let (store, enc, schema) = setup(4);
        let one = SymbolicScene {
            scene_id: "o".into(),
            objects: vec![super::super::SymbolicObject {
                id: 0,
                category: "dog".into(),
                attributes: BTreeMap::new(),
                bbox: [0.2, 0.2, 0.2, 0.2],
            }],
            relations: vec![],
        };
        let clean_cfg = LookConfig {
            slots: 1,
            ..Default::default()
        };
        let clean = embed_scene(&store, &enc, &one, &schema, &clean_cfg, &mut RngState::new(0)).unwrap();
        let noisy_cfg = LookConfig {
            noise_std: 0.1,
            ..clean_cfg
        };
        let mut rng = RngState::new(5);
        let mut diffs = Vec::new();
        for _ in 0..10_000 {
            let v = embed_scene(&store, &enc, &one, &schema, &noisy_cfg, &mut rng).unwrap();
            diffs.extend(v.object(0).iter().zip(clean.object(0)).map(|(a, b)| a - b));
        }
        let n = diffs.len() as f64;
        let mean = diffs.iter().sum::<f64>() / n;
        let std = (diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / n).sqrt();
        assert!((std - 0.1).abs() < 0.003, "{std}");
    }

    #[test]
    fn edge_vector_is_normalized_and_ordered() {
        let (mut store, enc, _) = setup(4);
        // asymmetric weights
        let w = store.get_mut(enc.edge_ff.weight);
        for (k, x) in w.value.data_mut().iter_mut().enumerate() {
            *x = (k as f64 * 0.37).sin();
        }
        let mut g = Graph::new(&store);
        let a = g.constant(Tensor::matrix(1, 4, vec![1.0, 0.0, -1.0, 2.0]).unwrap());
        let b = g.constant(Tensor::matrix(1, 4, vec![0.5, 0.5, 0.0, -3.0]).unwrap());
        let ab = build_edge_vector(&mut g, &enc, a, b).unwrap();
        let ba = build_edge_vector(&mut g, &enc, b, a).unwrap();
        let mean: f64 = g.value(ab).data().iter().sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-9);
        assert_ne!(g.value(ab), g.value(ba));
        assert_eq!(enc.edge_ff.in_dim, 8);
        let bad = g.constant(Tensor::matrix(1, 3, vec![0.0; 3]).unwrap());
        assert!(build_edge_vector(&mut g, &enc, a, bad).is_err());
    }

    #[test]
    fn batched_edges_match_single_pair() {
        let (store, enc, schema) = setup(6);
        let cfg = LookConfig {
            slots: 4,
            edge_source: EdgeSource::Learned,
            ..Default::default()
        };
        let mut g = Graph::new(&store);
        let e = enc.encode(&mut g, &scene(), &schema, &cfg, &mut RngState::new(2)).unwrap();
        for (i, j) in ordered_pairs(4) {
            let oi = g.gather_rows(e.objects, &[i]).unwrap();
            let oj = g.gather_rows(e.objects, &[j]).unwrap();
            let single = build_edge_vector(&mut g, &enc, oi, oj).unwrap();
            let row = g.value(e.edges).row(pair_index(4, i, j)).to_vec();
            for (x, y) in g.value(single).data().iter().zip(&row) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn annotated_edges_encode_both_directions() {
        let (store, enc, schema) = setup(4);
        let cfg = LookConfig {
            slots: 3,
            permute_slots: false,
            ..Default::default()
        };
        let v = embed_scene(&store, &enc, &scene(), &schema, &cfg, &mut RngState::new(0)).unwrap();
        let hold = schema.predicate_index("holding").unwrap();
        let none = schema.predicates.len();
        let out = store.value(enc.relation_out);
        let inn = store.value(enc.relation_in);
        for d in 0..4 {
            assert_eq!(v.edge(0, 1)[d], out.row(hold)[d] + inn.row(none)[d]);
            assert_eq!(v.edge(1, 0)[d], out.row(none)[d] + inn.row(hold)[d]);
        }
    }

    #[test]
    fn distinct_objects_get_distinct_vectors() {
        let (store, enc, schema) = setup(16);
        let cfg = LookConfig {
            slots: 12,
            permute_slots: false,
            ..Default::default()
        };
        let mut rng = RngState::new(11);
        for i in 0..200 {
            let s = crate::worldgen::sample_scene(&schema, &mut rng, &Default::default(), &i.to_string());
            let v = embed_scene(&store, &enc, &s, &schema, &cfg, &mut rng).unwrap();
            for a in 0..s.objects.len() {
                for b in 0..a {
                    let (x, y) = (&s.objects[a], &s.objects[b]);
                    if x.category != y.category || x.attributes != y.attributes {
                        assert_ne!(v.object(a), v.object(b));
                    }
                }
            }
        }
    }
}
