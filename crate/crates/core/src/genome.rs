//! Fixed-dimension encoding of a perturbation chain.
//!
//! A genome is a point in the unit box: one selection key per registry
//! entry, followed by the normalised parameters of every perturbation in
//! registry order. Decoding ranks the enabled perturbations by key
//! (random-key decoding) and keeps the top `k`; the parameter block of each
//! selected perturbation is mapped onto its calibrated interval. Parameters
//! of unselected perturbations stay dormant in the vector.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imgcore::{Image, Mask};
use crate::perturb::{self, ParamBounds, PerturbationKind, Registry};

pub const DEFAULT_CHAIN_LEN: usize = 6;

/// Where each perturbation's parameters sit inside the flat vector.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GenomeLayout {
    keys: usize,
    offsets: Vec<(usize, usize)>,
}

impl GenomeLayout {
    pub fn new(registry: &Registry) -> Self {
        let mut at = registry.len();
        let offsets = registry
            .specs()
            .iter()
            .map(|s| {
                let start = at;
                at += s.params().len();
                (start, s.params().len())
            })
            .collect();
        Self {
            keys: registry.len(),
            offsets,
        }
    }

    pub fn dim(&self) -> usize {
        self.keys + self.offsets.iter().map(|(_, n)| n).sum::<usize>()
    }

    pub fn key_count(&self) -> usize {
        self.keys
    }

    /// Range of the parameter block of registry entry `index`.
    pub fn params_range(&self, index: usize) -> std::ops::Range<usize> {
        let (start, n) = self.offsets[index];
        start..start + n
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Genome {
    pub selection_keys: Vec<f64>,
    pub param_block: Vec<f64>,
    pub seed: u64,
}

impl Genome {
    /// Splits a flat optimizer vector into keys and parameter block.
    pub fn from_vector(layout: &GenomeLayout, v: &[f64], seed: u64) -> Result<Self> {
        if v.len() != layout.dim() {
            return Err(Error::invalid(format!(
                "genome vector has {} coordinates, layout needs {}",
                v.len(),
                layout.dim()
            )));
        }
        if let Some(x) = v.iter().find(|x| !(0.0..=1.0).contains(*x)) {
            return Err(Error::invalid(format!(
                "genome coordinate {x} outside [0, 1]"
            )));
        }
        Ok(Self {
            selection_keys: v[..layout.keys].to_vec(),
            param_block: v[layout.keys..].to_vec(),
            seed,
        })
    }

    pub fn to_vector(&self) -> Vec<f64> {
        let mut v = self.selection_keys.clone();
        v.extend_from_slice(&self.param_block);
        v
    }

    pub fn dim(&self) -> usize {
        self.selection_keys.len() + self.param_block.len()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChainLink {
    pub name: PerturbationKind,
    pub params: Vec<f64>,
}

/// Ordered perturbations with denormalised parameters. Serialises as a
/// JSON list of `{name, params}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Chain(pub Vec<ChainLink>);

impl Chain {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.0.iter().map(|l| l.name.as_str()).collect()
    }

    pub fn position_of(&self, kind: PerturbationKind) -> Option<usize> {
        self.0.iter().position(|l| l.name == kind)
    }
}

/// Random-key decoding of `genome` into a chain of `k` enabled perturbations.
pub fn decode(
    genome: &Genome,
    registry: &Registry,
    bounds: &ParamBounds,
    k: usize,
) -> Result<Chain> {
    let layout = GenomeLayout::new(registry);
    if genome.selection_keys.len() != layout.keys
        || genome.param_block.len() != layout.dim() - layout.keys
    {
        return Err(Error::invalid(format!(
            "genome shape ({}, {}) does not fit the registry",
            genome.selection_keys.len(),
            genome.param_block.len()
        )));
    }
    if k > registry.enabled_count() {
        return Err(Error::invalid(format!(
            "chain length {k} exceeds the {} enabled perturbations",
            registry.enabled_count()
        )));
    }
    let mut ranked: Vec<usize> = (0..registry.len())
        .filter(|&i| !registry.is_disabled(registry.specs()[i].kind()))
        .collect();
    // descending key, ties by registry index
    ranked.sort_by(|&a, &b| {
        genome.selection_keys[b]
            .total_cmp(&genome.selection_keys[a])
            .then(a.cmp(&b))
    });
    let keys = layout.keys;
    ranked
        .into_iter()
        .take(k)
        .map(|i| {
            let spec = &registry.specs()[i];
            let r = layout.params_range(i);
            let block = &genome.param_block[r.start - keys..r.end - keys];
            let params = bounds
                .for_spec(spec)?
                .iter()
                .zip(block)
                .map(|(b, &t)| b.denormalize(t))
                .collect();
            Ok(ChainLink {
                name: spec.kind(),
                params,
            })
        })
        .collect::<Result<Vec<_>>>()
        .map(Chain)
}

/// 64-bit finaliser from SplitMix64.
#[inline]
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed handed to the perturbation at chain position `position`.
#[inline]
pub fn sub_seed(seed: u64, position: usize) -> u64 {
    seed ^ mix64(position as u64)
}

/// Applies the chain left to right.
pub fn apply_chain(
    chain: &Chain,
    registry: &Registry,
    img: &Image,
    mask: &Mask,
    seed: u64,
) -> Result<(Image, Mask)> {
    let mut cur = (img.clone(), mask.clone());
    for (pos, link) in chain.0.iter().enumerate() {
        let spec = registry.get(link.name);
        cur = perturb::apply(spec, &link.params, &cur.0, &cur.1, sub_seed(seed, pos))?;
    }
    Ok(cur)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::perturb::{neutral_params, ParamBound};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn uniform_genome(layout: &GenomeLayout, keys: Vec<f64>, t: f64) -> Genome {
        let mut v = keys;
        v.resize(layout.dim(), t);
        Genome::from_vector(layout, &v, 1).unwrap()
    }

    #[test]
    fn sorted_keys_select_registry_prefix() {
        let reg = Registry::builtin();
        let layout = GenomeLayout::new(&reg);
        let keys: Vec<f64> = (0..12).map(|i| 1.0 - 0.05 * i as f64).collect();
        let g = uniform_genome(&layout, keys, 0.5);
        let chain = decode(&g, &reg, &ParamBounds::hard(&reg), 6).unwrap();
        let expect: Vec<_> = reg.specs()[..6].iter().map(|s| s.name()).collect();
        assert_eq!(chain.names(), expect);
    }

    #[test]
    fn equal_keys_break_ties_by_index() {
        let reg = Registry::builtin();
        let layout = GenomeLayout::new(&reg);
        let g = uniform_genome(&layout, vec![0.3; 12], 0.5);
        let chain = decode(&g, &reg, &ParamBounds::hard(&reg), 6).unwrap();
        let expect: Vec<_> = reg.specs()[..6].iter().map(|s| s.name()).collect();
        assert_eq!(chain.names(), expect);
    }

    #[test]
    fn endpoints_map_onto_calibrated_interval() {
        let reg = Registry::builtin();
        let layout = GenomeLayout::new(&reg);
        let mut bounds = ParamBounds::hard(&reg);
        bounds.insert(
            "brightness",
            "delta",
            ParamBound {
                neutral: 0.0,
                calibrated_min: -0.1,
                calibrated_max: 0.3,
            },
        );
        let bi = reg.index_of(PerturbationKind::Brightness);
        let mut keys = vec![0.0; 12];
        keys[bi] = 1.0;
        for (t, expect) in [(0.0, -0.1), (1.0, 0.3), (0.5, 0.1)] {
            let g = uniform_genome(&layout, keys.clone(), t);
            let chain = decode(&g, &reg, &bounds, 1).unwrap();
            assert_eq!(chain.0[0].name, PerturbationKind::Brightness);
            assert!((chain.0[0].params[0] - expect).abs() < 1e-15);
        }
    }

    #[test]
    fn disabled_are_skipped_and_k_is_checked() {
        let reg = Registry::builtin()
            .with_disabled([PerturbationKind::GaussianBlur, PerturbationKind::Brightness]);
        let layout = GenomeLayout::new(&reg);
        let g = uniform_genome(&layout, vec![0.5; 12], 0.5);
        let chain = decode(&g, &reg, &ParamBounds::hard(&reg), 10).unwrap();
        assert!(chain.position_of(PerturbationKind::GaussianBlur).is_none());
        assert!(chain.position_of(PerturbationKind::Brightness).is_none());
        assert!(decode(&g, &reg, &ParamBounds::hard(&reg), 11).is_err());
    }

    #[test]
    fn mixed_six_link_chain_is_reachable() {
        use PerturbationKind::*;
        let reg = Registry::builtin();
        let layout = GenomeLayout::new(&reg);
        let want = [GaussianBlur, GaussianNoise, Affine, Zoom, Rain, Padding];
        let mut keys = vec![0.0; 12];
        for (rank, k) in want.iter().enumerate() {
            keys[reg.index_of(*k)] = 1.0 - 0.1 * rank as f64;
        }
        let g = uniform_genome(&layout, keys, 0.2);
        let chain = decode(&g, &reg, &ParamBounds::hard(&reg), 6).unwrap();
        assert_eq!(
            chain.0.iter().map(|l| l.name).collect::<Vec<_>>(),
            want.to_vec()
        );
    }

    #[test]
    fn neutral_chain_is_identity_and_single_link_matches_apply() {
        let reg = Registry::builtin();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let img = Image::new(
            12,
            9,
            (0..12 * 9 * 3).map(|_| rng.random::<f32>()).collect(),
        )
        .unwrap();
        let mask = Mask::from_fn(12, 9, |x, y| x > y);
        let neutral = Chain(
            reg.specs()[..6]
                .iter()
                .map(|s| ChainLink {
                    name: s.kind(),
                    params: neutral_params(s),
                })
                .collect(),
        );
        assert_eq!(
            apply_chain(&neutral, &reg, &img, &mask, 5).unwrap(),
            (img.clone(), mask.clone())
        );

        let spec = reg.get(PerturbationKind::GaussianNoise);
        let single = Chain(vec![ChainLink {
            name: spec.kind(),
            params: vec![0.2],
        }]);
        let via_chain = apply_chain(&single, &reg, &img, &mask, 77).unwrap();
        let direct = perturb::apply(spec, &[0.2], &img, &mask, sub_seed(77, 0)).unwrap();
        assert_eq!(via_chain, direct);
    }

    #[test]
    fn chain_order_matters() {
        let reg = Registry::builtin();
        let img = Image::new(
            16,
            16,
            (0..16 * 16 * 3)
                .map(|i| if (i / 3) % 16 < 8 { 0.2 } else { 0.8 })
                .collect(),
        )
        .unwrap();
        let mask = Mask::filled(16, 16, false);
        let blur = ChainLink {
            name: PerturbationKind::GaussianBlur,
            params: vec![1.5],
        };
        let noise = ChainLink {
            name: PerturbationKind::GaussianNoise,
            params: vec![0.1],
        };
        let a = apply_chain(
            &Chain(vec![blur.clone(), noise.clone()]),
            &reg,
            &img,
            &mask,
            3,
        )
        .unwrap();
        let b = apply_chain(&Chain(vec![noise, blur]), &reg, &img, &mask, 3).unwrap();
        assert_ne!(a.0, b.0);
    }

    #[test]
    fn chain_json_is_a_list_of_name_and_params() {
        let chain = Chain(vec![ChainLink {
            name: PerturbationKind::Zoom,
            params: vec![0.5, 0.25, 1.5],
        }]);
        let s = serde_json::to_string(&chain).unwrap();
        assert_eq!(s, r#"[{"name":"zoom","params":[0.5,0.25,1.5]}]"#);
        assert_eq!(serde_json::from_str::<Chain>(&s).unwrap(), chain);
    }

    #[test]
    fn genome_vector_roundtrip_and_validation() {
        let reg = Registry::builtin();
        let layout = GenomeLayout::new(&reg);
        assert_eq!(layout.dim(), 12 + reg.param_count());
        let v: Vec<f64> = (0..layout.dim()).map(|i| (i as f64 * 0.37) % 1.0).collect();
        let g = Genome::from_vector(&layout, &v, 4).unwrap();
        assert_eq!(g.to_vector(), v);
        assert!(Genome::from_vector(&layout, &v[1..], 4).is_err());
        let mut bad = v.clone();
        bad[3] = 1.2;
        assert!(Genome::from_vector(&layout, &bad, 4).is_err());
    }
}
