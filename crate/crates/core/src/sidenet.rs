//! Cross-modal gated side adapter network.
//!
//! One tower per modality, each a stack of `L` adapter blocks. The input of
//! tower `t` at side layer `l` is a softmax-gated mixture of the tower's own
//! entry-projected backbone state (`H`) and the previous-layer outputs of
//! every tower (cross variant) or of tower `t` alone (independent variant):
//!
//! ```text
//! h^t_l = Adapter^t_l( a_H · P^t_l(b^t_l) + Σ_m a_m · h^m_{l-1} )
//! ```
//!
//! Layers are 0-based. The initial state `h^m_{-1}` is a separate entry
//! projection of the first retained backbone state, and side layer `l`
//! consumes retained state `l` (or `l-1` under [`Pairing::Previous`]).
//!
//! Gate logit vectors are ordered `[H, towers...]` in configured modality
//! order; the independent variant uses `[H, own]`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{softmax_in_place, Graph, ParamId, ParamStore, Tensor, Var};
use crate::error::{Error, Result};
use crate::modality::Modality;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SideVariant {
    #[default]
    Cross,
    Independent,
}

impl std::fmt::Display for SideVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Cross => "cross",
            Self::Independent => "independent",
        })
    }
}

/// Which retained backbone state feeds side layer `l`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pairing {
    #[default]
    Current,
    Previous,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SideConfig {
    pub modalities: Vec<Modality>,
    pub d_side: usize,
    /// Adapter bottleneck width; `None` means `d_side / 4`.
    pub bottleneck: Option<usize>,
    pub num_side_layers: usize,
    pub variant: SideVariant,
    pub pairing: Pairing,
}

impl Default for SideConfig {
    fn default() -> Self {
        Self {
            modalities: Modality::ALL.to_vec(),
            d_side: 512,
            bottleneck: None,
            num_side_layers: 6,
            variant: SideVariant::Cross,
            pairing: Pairing::Current,
        }
    }
}

impl SideConfig {
    pub fn bottleneck(&self) -> usize {
        self.bottleneck.unwrap_or((self.d_side / 4).max(1))
    }

    /// Length of each gate logit vector.
    pub fn gate_len(&self) -> usize {
        match self.variant {
            SideVariant::Cross => self.modalities.len() + 1,
            SideVariant::Independent => 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.modalities.len() < 2 {
            return Err(Error::Config(format!(
                "the side network needs at least 2 modalities, got {}",
                self.modalities.len()
            )));
        }
        let mut seen = self.modalities.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != self.modalities.len() {
            return Err(Error::Config("duplicate modality in side config".into()));
        }
        if self.d_side == 0 || self.bottleneck() == 0 || self.num_side_layers == 0 {
            return Err(Error::Config("d_side, bottleneck and num_side_layers must be positive".into()));
        }
        Ok(())
    }

    /// Retained-state index feeding side layer `l`.
    pub fn backbone_index(&self, l: usize) -> usize {
        match self.pairing {
            Pairing::Current => l,
            Pairing::Previous => l.saturating_sub(1),
        }
    }
}

#[derive(Clone, Debug)]
pub struct AdapterIds {
    pub down_w: ParamId,
    pub down_b: ParamId,
    pub up_w: ParamId,
    pub up_b: ParamId,
}

#[derive(Clone, Debug)]
pub struct LayerIds {
    pub entry_w: ParamId,
    pub entry_b: ParamId,
    pub gate: ParamId,
    pub adapter: AdapterIds,
}

#[derive(Clone, Debug)]
pub struct TowerIds {
    pub modality: Modality,
    pub init_w: ParamId,
    pub init_b: ParamId,
    pub layers: Vec<LayerIds>,
}

#[derive(Clone, Debug)]
pub struct SideNet {
    pub config: SideConfig,
    pub towers: Vec<TowerIds>,
}

/// Forward outputs: the top-layer state of every tower plus the softmaxed
/// gate rows used at each layer (`gates[tower][layer]`, each `1 × G`).
#[derive(Clone, Debug)]
pub struct SideOutput {
    pub finals: Vec<Var>,
    pub gates: Vec<Vec<Var>>,
}

/// Default gate logits: `ln(G - 1)` on `H`, zero elsewhere, so `H` gets
/// weight one half and the remaining entries share the other half.
pub fn default_gate_logits(len: usize) -> Vec<f64> {
    let mut v = vec![0.0; len];
    v[0] = ((len - 1) as f64).ln();
    v
}

impl SideNet {
    /// Register all side parameters in `store`. `d_models` gives each
    /// modality's backbone width.
    pub fn new<R: Rng>(
        config: SideConfig,
        d_models: &BTreeMap<Modality, usize>,
        store: &mut ParamStore,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let ds = config.d_side;
        let b = config.bottleneck();
        let g = config.gate_len();
        let mut towers = Vec::with_capacity(config.modalities.len());
        for &m in &config.modalities {
            let dm = *d_models
                .get(&m)
                .ok_or_else(|| Error::MissingModality(format!("no backbone width for {m}")))?;
            let std_e = 1.0 / (dm as f64).sqrt();
            let p = format!("sidenet.{m}");
            let init_w = store.normal(format!("{p}.init.entry.w"), dm, ds, std_e, rng)?;
            let init_b = store.zeros(format!("{p}.init.entry.b"), 1, ds)?;
            let mut layers = Vec::with_capacity(config.num_side_layers);
            for l in 0..config.num_side_layers {
                let q = format!("{p}.layer{l}");
                layers.push(LayerIds {
                    entry_w: store.normal(format!("{q}.entry.w"), dm, ds, std_e, rng)?,
                    entry_b: store.zeros(format!("{q}.entry.b"), 1, ds)?,
                    gate: store.add(format!("{q}.gate"), Tensor::row_vector(default_gate_logits(g)), false)?,
                    adapter: AdapterIds {
                        down_w: store.normal(format!("{q}.down.w"), ds, b, 1.0 / (ds as f64).sqrt(), rng)?,
                        down_b: store.zeros(format!("{q}.down.b"), 1, b)?,
                        up_w: store.zeros(format!("{q}.up.w"), b, ds)?,
                        up_b: store.zeros(format!("{q}.up.b"), 1, ds)?,
                    },
                });
            }
            towers.push(TowerIds {
                modality: m,
                init_w,
                init_b,
                layers,
            });
        }
        Ok(Self { config, towers })
    }

    pub fn tower_index(&self, m: Modality) -> Option<usize> {
        self.towers.iter().position(|t| t.modality == m)
    }

    /// Trainable linear map `d_model → d_side` for (tower, layer).
    pub fn entry_project(&self, g: &mut Graph, store: &ParamStore, tower: usize, layer: usize, x: Var) -> Result<Var> {
        let ids = &self.towers[tower].layers[layer];
        let w = g.param(store, ids.entry_w);
        let b = g.param(store, ids.entry_b);
        g.linear(x, w, b)
    }

    /// One gated side layer for tower `t`. `prev` holds every
    /// tower's previous state in tower order; `own_backbone` is the tower's
    /// already projected backbone state. Returns `(h^t_l, gate weights)`.
    pub fn side_layer_forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        tower: usize,
        layer: usize,
        prev: &[Var],
        own_backbone: Var,
    ) -> Result<(Var, Var)> {
        let ids = &self.towers[tower].layers[layer];
        let logits = g.param(store, ids.gate);
        let mut inputs = vec![own_backbone];
        match self.config.variant {
            SideVariant::Cross => inputs.extend_from_slice(prev),
            SideVariant::Independent => inputs.push(prev[tower]),
        }
        let (weights, mix) = gated_mixture(g, logits, &inputs)?;
        let a = &ids.adapter;
        let (dw, db) = (g.param(store, a.down_w), g.param(store, a.down_b));
        let (uw, ub) = (g.param(store, a.up_w), g.param(store, a.up_b));
        let out = adapter_forward(g, mix, dw, db, uw, ub)?;
        Ok((out, weights))
    }

    /// Full side network over a batch of items. `states[m]` lists the
    /// retained-layer backbone states (`items × d_model` each) of modality `m`.
    pub fn side_forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        states: &BTreeMap<Modality, Vec<Var>>,
    ) -> Result<SideOutput> {
        let cfg = &self.config;
        let mut per_tower = Vec::with_capacity(self.towers.len());
        for t in &self.towers {
            let s = states
                .get(&t.modality)
                .ok_or_else(|| Error::MissingModality(format!("hidden states for {} are missing", t.modality)))?;
            let need = (0..cfg.num_side_layers).map(|l| cfg.backbone_index(l)).max().unwrap_or(0) + 1;
            if s.len() < need {
                return Err(Error::Config(format!(
                    "{} provides {} retained layers but the side network needs {need}",
                    t.modality,
                    s.len()
                )));
            }
            per_tower.push(s);
        }

        let mut prev = Vec::with_capacity(self.towers.len());
        for (t, ids) in self.towers.iter().enumerate() {
            let w = g.param(store, ids.init_w);
            let b = g.param(store, ids.init_b);
            prev.push(g.linear(per_tower[t][0], w, b)?);
        }
        let mut gates = vec![Vec::with_capacity(cfg.num_side_layers); self.towers.len()];
        for l in 0..cfg.num_side_layers {
            let mut next = Vec::with_capacity(self.towers.len());
            for t in 0..self.towers.len() {
                let hb = self.entry_project(g, store, t, l, per_tower[t][cfg.backbone_index(l)])?;
                let (h, w) = self.side_layer_forward(g, store, t, l, &prev, hb)?;
                next.push(h);
                gates[t].push(w);
            }
            prev = next;
        }
        Ok(SideOutput { finals: prev, gates })
    }

    /// Softmaxed gate values, `[tower][layer] → G` entries.
    pub fn gate_values(&self, store: &ParamStore) -> Vec<Vec<Vec<f64>>> {
        self.towers
            .iter()
            .map(|t| {
                t.layers
                    .iter()
                    .map(|l| {
                        let mut v = store.value(l.gate).data().to_vec();
                        softmax_in_place(&mut v, 1.0);
                        v
                    })
                    .collect()
            })
            .collect()
    }

    /// Gate heatmap CSV with header `tower,layer,H,text,image,video,audio`;
    /// modalities a gate does not cover are left empty.
    pub fn gate_heatmap_csv(&self, store: &ParamStore) -> String {
        let mut s = String::from("tower,layer,H,text,image,video,audio\n");
        for (t, layers) in self.towers.iter().zip(self.gate_values(store)) {
            let cols: Vec<Modality> = match self.config.variant {
                SideVariant::Cross => self.config.modalities.clone(),
                SideVariant::Independent => vec![t.modality],
            };
            for (l, v) in layers.iter().enumerate() {
                let mut cells = vec![String::new(); 4];
                for (m, x) in cols.iter().zip(&v[1..]) {
                    cells[m.id() as usize] = format!("{x}");
                }
                let _ = writeln!(s, "{},{},{},{}", t.modality, l, v[0], cells.join(","));
            }
        }
        s
    }

    pub fn export_gate_heatmap(&self, store: &ParamStore, path: &Path) -> Result<()> {
        std::fs::write(path, self.gate_heatmap_csv(store)).map_err(|e| Error::io(path, e))
    }

    /// Every side parameter id, in registration order.
    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut out = Vec::new();
        for t in &self.towers {
            out.push(t.init_w);
            out.push(t.init_b);
            for l in &t.layers {
                let a = &l.adapter;
                out.extend([l.entry_w, l.entry_b, l.gate, a.down_w, a.down_b, a.up_w, a.up_b]);
            }
        }
        out
    }
}

/// Softmax the `1 × K` logits and mix the `K` same-shaped inputs.
pub fn gated_mixture(g: &mut Graph, logits: Var, inputs: &[Var]) -> Result<(Var, Var)> {
    let w = g.softmax(logits, 1.0)?;
    let mix = g.weighted_sum(w, inputs)?;
    Ok((w, mix))
}

/// Bottleneck adapter with residual: `x + gelu(x·down + b_down)·up + b_up`.
pub fn adapter_forward(g: &mut Graph, x: Var, down_w: Var, down_b: Var, up_w: Var, up_b: Var) -> Result<Var> {
    let h = g.linear(x, down_w, down_b)?;
    let h = g.gelu(h)?;
    let h = g.linear(h, up_w, up_b)?;
    g.add(x, h)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::finite_diff_check_params;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn build(variant: SideVariant, ms: &[Modality], dm: usize, ds: usize, layers: usize) -> (SideNet, ParamStore) {
        let cfg = SideConfig {
            modalities: ms.to_vec(),
            d_side: ds,
            bottleneck: Some(2),
            num_side_layers: layers,
            variant,
            pairing: Pairing::Current,
        };
        let widths = ms.iter().map(|&m| (m, dm)).collect();
        let mut store = ParamStore::new();
        let net = SideNet::new(cfg, &widths, &mut store, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        (net, store)
    }

    fn random_states(g: &mut Graph, ms: &[Modality], items: usize, dm: usize, layers: usize, seed: u64) -> BTreeMap<Modality, Vec<Var>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ms.iter()
            .map(|&m| {
                let v = (0..layers)
                    .map(|_| {
                        let data = (0..items * dm).map(|_| rng.gen_range(-1.0..1.0)).collect();
                        g.constant(Tensor::from_vec(items, dm, data).unwrap())
                    })
                    .collect();
                (m, v)
            })
            .collect()
    }

    const TI: [Modality; 2] = [Modality::Text, Modality::Image];

    #[test]
    fn entry_projection_cases() {
        let (net, mut store) = build(SideVariant::Cross, &TI, 4, 4, 1);
        let ids = net.towers[0].layers[0].clone();
        *store.value_mut(ids.entry_w) = Tensor::identity(4);
        let mut g = Graph::new();
        let x = g.constant(Tensor::row_vector(vec![0.5, -1.0, 2.0, 3.0]));
        let y = net.entry_project(&mut g, &store, 0, 0, x).unwrap();
        assert_eq!(g.value(y).data(), &[0.5, -1.0, 2.0, 3.0]);

        *store.value_mut(ids.entry_b) = Tensor::row_vector(vec![1.0, 2.0, 3.0, 4.0]);
        let z = g.constant(Tensor::zeros(1, 4));
        let y = net.entry_project(&mut g, &store, 0, 0, z).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, 2.0, 3.0, 4.0]);

        let w = Tensor::from_rows(&[
            vec![1.0, 0.0, 2.0, 0.0],
            vec![0.0, 1.0, 0.0, -1.0],
            vec![3.0, 0.0, 0.0, 0.0],
            vec![0.0, 0.5, 0.0, 1.0],
        ])
        .unwrap();
        *store.value_mut(ids.entry_w) = w;
        let x = g.constant(Tensor::row_vector(vec![1.0, 2.0, 3.0, 4.0]));
        let y = net.entry_project(&mut g, &store, 0, 0, x).unwrap();
        // x·W by hand, plus bias
        assert_eq!(g.value(y).data(), &[10.0 + 1.0, 4.0 + 2.0, 2.0 + 3.0, 2.0 + 4.0]);
    }

    #[test]
    fn adapter_cases() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::row_vector(vec![1.0, 0.0]));
        let down = g.constant(Tensor::identity(2));
        let zb2 = g.constant(Tensor::zeros(1, 2));
        let up0 = g.constant(Tensor::zeros(2, 2));
        let y = adapter_forward(&mut g, x, down, zb2, up0, zb2).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, 0.0]);

        let zero = g.constant(Tensor::zeros(1, 2));
        let y = adapter_forward(&mut g, zero, down, zb2, up0, zb2).unwrap();
        assert_eq!(g.value(y).data(), &[0.0, 0.0]);

        // down = I, up routes the first bottleneck unit to the first output
        let up = g.constant(Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 0.0]]).unwrap());
        let y = adapter_forward(&mut g, x, down, zb2, up, zb2).unwrap();
        let v = g.value(y).data();
        assert!((v[0] - 1.841345).abs() < 1e-5, "{v:?}");
        assert_eq!(v[1], 0.0);
    }

    #[test]
    fn hand_mixture_and_uniform_gates() {
        let mut g = Graph::new();
        let logits = g.constant(Tensor::row_vector(vec![0.2f64.ln(), 0.5f64.ln(), 0.3f64.ln()]));
        let hb = g.constant(Tensor::row_vector(vec![1.0, 1.0]));
        let t = g.constant(Tensor::row_vector(vec![1.0, 0.0]));
        let i = g.constant(Tensor::row_vector(vec![0.0, 1.0]));
        let (_, mix) = gated_mixture(&mut g, logits, &[hb, t, i]).unwrap();
        let v = g.value(mix).data();
        assert!((v[0] - 0.7).abs() < 1e-12 && (v[1] - 0.5).abs() < 1e-12, "{v:?}");

        let z = g.constant(Tensor::zeros(1, 5));
        let ins: Vec<Var> = (0..5).map(|_| hb).collect();
        let (w, _) = gated_mixture(&mut g, z, &ins).unwrap();
        assert!(g.value(w).data().iter().all(|&x| (x - 0.2).abs() < 1e-15));
    }

    #[test]
    fn gate_lengths_and_init_heatmap() {
        let (cross, cs) = build(SideVariant::Cross, &Modality::ALL, 4, 4, 3);
        let (ind, is) = build(SideVariant::Independent, &Modality::ALL, 4, 4, 3);
        assert_eq!(cs.value(cross.towers[0].layers[0].gate).cols(), 5);
        assert_eq!(is.value(ind.towers[0].layers[0].gate).cols(), 2);
        for tower in cross.gate_values(&cs) {
            for v in tower {
                assert!((v[0] - 0.5).abs() < 1e-12);
                assert!(v[1..].iter().all(|&x| (x - 0.125).abs() < 1e-12));
            }
        }
        let csv = cross.gate_heatmap_csv(&cs);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "tower,layer,H,text,image,video,audio");
        assert_eq!(lines.len(), 1 + 4 * 3);
        for line in &lines[1..] {
            let sum: f64 = line.split(',').skip(2).filter(|c| !c.is_empty()).map(|c| c.parse::<f64>().unwrap()).sum();
            assert!((sum - 1.0).abs() < 1e-6);
        }
        let csv = ind.gate_heatmap_csv(&is);
        let row = csv.lines().nth(1).unwrap();
        assert_eq!(row, "text,0,0.5,0.5,,,");
    }

    #[test]
    fn identity_at_init_with_backbone_one_hot() {
        let (net, mut store) = build(SideVariant::Cross, &Modality::ALL, 6, 4, 3);
        for t in &net.towers {
            for l in &t.layers {
                *store.value_mut(l.gate) = Tensor::row_vector(vec![1e3, 0.0, 0.0, 0.0, 0.0]);
            }
        }
        let mut g = Graph::new();
        let states = random_states(&mut g, &Modality::ALL, 3, 6, 3, 1);
        let out = net.side_forward(&mut g, &store, &states).unwrap();
        for (t, f) in out.finals.iter().enumerate() {
            let top = states[&net.towers[t].modality][2];
            let proj = net.entry_project(&mut g, &store, t, 2, top).unwrap();
            assert_eq!(g.value(*f).data(), g.value(proj).data());
        }
    }

    #[test]
    fn cross_dependency_and_independence() {
        for variant in [SideVariant::Cross, SideVariant::Independent] {
            let (net, mut store) = build(variant, &Modality::ALL, 5, 4, 2);
            // make adapters non-trivial
            let mut rng = ChaCha8Rng::seed_from_u64(9);
            for t in &net.towers {
                for l in &t.layers {
                    let w = store.value_mut(l.adapter.up_w);
                    w.data_mut().iter_mut().for_each(|x| *x = rng.gen_range(-0.5..0.5));
                }
            }
            let run = |bump: f64| {
                let mut g = Graph::new();
                let mut states = random_states(&mut g, &Modality::ALL, 2, 5, 2, 3);
                let img = states.get_mut(&Modality::Image).unwrap();
                for v in img.iter_mut() {
                    let t = g.value(*v).map(|x| x + bump);
                    *v = g.constant(t);
                }
                let out = net.side_forward(&mut g, &store, &states).unwrap();
                g.value(out.finals[0]).clone()
            };
            let (a, b) = (run(0.0), run(1e-3));
            let diff: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
            match variant {
                SideVariant::Cross => assert!(diff > 1e-8, "cross variant must depend on image"),
                SideVariant::Independent => assert_eq!(diff, 0.0),
            }
        }
    }

    #[test]
    fn zeroed_tower_propagates_through_layers() {
        // 2 modalities, 2 layers. Image entry projections are zero, text gates
        // are one-hot on the previous image state, so text's mixtures vanish.
        let (net, mut store) = build(SideVariant::Cross, &TI, 3, 3, 2);
        let img = &net.towers[1];
        for id in [img.init_w, img.init_b] {
            store.value_mut(id).fill(0.0);
        }
        for l in &img.layers {
            store.value_mut(l.entry_w).fill(0.0);
            *store.value_mut(l.gate) = Tensor::row_vector(vec![1e3, -1e3, -1e3]);
        }
        for l in &net.towers[0].layers {
            *store.value_mut(l.gate) = Tensor::row_vector(vec![-1e3, -1e3, 1e3]);
        }
        let mut g = Graph::new();
        let states = random_states(&mut g, &TI, 2, 3, 2, 4);
        let out = net.side_forward(&mut g, &store, &states).unwrap();
        assert!(g.value(out.finals[0]).data().iter().all(|&x| x == 0.0));
        // partially on image: text output scales with the non-image share
        for l in &net.towers[0].layers {
            *store.value_mut(l.gate) = Tensor::row_vector(vec![0.0, -1e3, 0.0]);
        }
        let mut g = Graph::new();
        let states = random_states(&mut g, &TI, 2, 3, 2, 4);
        let out = net.side_forward(&mut g, &store, &states).unwrap();
        let hb1 = net.entry_project(&mut g, &store, 0, 1, states[&Modality::Text][1]).unwrap();
        let half = g.value(hb1).map(|x| 0.5 * x);
        for (a, b) in g.value(out.finals[0]).data().iter().zip(half.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn missing_modality_is_named() {
        let (net, store) = build(SideVariant::Cross, &TI, 3, 3, 1);
        let mut g = Graph::new();
        let mut states = random_states(&mut g, &TI, 1, 3, 1, 0);
        states.remove(&Modality::Image);
        let err = net.side_forward(&mut g, &store, &states).unwrap_err().to_string();
        assert!(err.contains("image"), "{err}");
    }

    #[test]
    fn nan_input_is_a_hard_error() {
        let (net, store) = build(SideVariant::Cross, &TI, 3, 3, 1);
        let mut g = Graph::new();
        let mut states = random_states(&mut g, &TI, 1, 3, 1, 0);
        let bad = g.constant(Tensor::row_vector(vec![f64::NAN, 0.0, 0.0]));
        states.get_mut(&Modality::Text).unwrap()[0] = bad;
        assert!(net.side_forward(&mut g, &store, &states).is_err());
    }

    #[test]
    fn side_layer_gradients_match_finite_differences() {
        let (net, mut store) = build(SideVariant::Cross, &TI, 3, 4, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let ids = net.param_ids();
        for &id in &ids {
            let v = store.value_mut(id);
            v.data_mut().iter_mut().for_each(|x| *x += rng.gen_range(-0.3..0.3));
        }
        let mut sg = Graph::new();
        let states_t: Vec<(Modality, Vec<Tensor>)> = random_states(&mut sg, &TI, 2, 3, 2, 6)
            .into_iter()
            .map(|(m, v)| (m, v.iter().map(|x| sg.value(*x).clone()).collect()))
            .collect();
        let err = finite_diff_check_params(
            &mut store,
            &ids,
            |g, s| {
                let states = states_t
                    .iter()
                    .map(|(m, v)| (*m, v.iter().map(|t| g.constant(t.clone())).collect()))
                    .collect();
                let out = net.side_forward(g, s, &states)?;
                let a = g.concat_cols(&out.finals)?;
                let sq = g.mul(a, a)?;
                g.sum(sq)
            },
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-4, "{err}");
    }
}
