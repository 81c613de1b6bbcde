//! Deterministic attribute scenes, their captions, and corrupted captions
//! with recorded ground truth.
//!
//! A scene holds one to three distinct objects, each with a color and a count.
//! Its caption lists objects in id order as `count color object .` clauses
//! followed by `<eos>`. Corruptions mirror the codebook's existence,
//! identity, attribute and counting errors.

pub mod vocab;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::PreferenceSample;
use crate::model::{InputContext, TokenId};
use vocab::{COLORS, COLOR_BASE, COUNTS, COUNT_BASE, EOS, OBJECTS, OBJECT_BASE, PERIOD};

pub const NUM_OBJECTS: usize = OBJECTS.len();
pub const NUM_COLORS: usize = COLORS.len();
pub const MAX_COUNT: u8 = COUNTS.len() as u8;
pub const MAX_SCENE_OBJECTS: usize = 3;
/// Per-object block: presence flag, color one-hot, count one-hot.
pub const FEATURES_PER_OBJECT: usize = 1 + NUM_COLORS + COUNTS.len();
pub const LATENT_DIM: usize = NUM_OBJECTS * FEATURES_PER_OBJECT;
pub const CLAUSE_LEN: usize = 4;
/// Longest possible corrupted caption: one inserted clause plus `<eos>`.
pub const MAX_CAPTION_LEN: usize = (MAX_SCENE_OBJECTS + 1) * CLAUSE_LEN + 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ObjectId(pub u8);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ColorId(pub u8);

impl ObjectId {
    pub fn token(self) -> TokenId {
        OBJECT_BASE + self.0 as usize
    }

    pub fn name(self) -> &'static str {
        OBJECTS[self.0 as usize]
    }
}

impl ColorId {
    pub fn token(self) -> TokenId {
        COLOR_BASE + self.0 as usize
    }
}

pub fn count_token(count: u8) -> TokenId {
    COUNT_BASE + count as usize - 1
}

/// One `count color object` fact.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneObject {
    pub object: ObjectId,
    pub color: ColorId,
    pub count: u8,
}

impl SceneObject {
    pub fn clause(&self) -> [TokenId; CLAUSE_LEN] {
        [count_token(self.count), self.color.token(), self.object.token(), PERIOD]
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Scene {
    pub objects: Vec<SceneObject>,
    pub seed: u64,
}

impl Scene {
    pub fn validate(&self) -> Result<()> {
        if self.objects.is_empty() || self.objects.len() > MAX_SCENE_OBJECTS {
            return Err(Error::contract(format!("scene with {} objects", self.objects.len())));
        }
        for w in self.objects.windows(2) {
            if w[0].object >= w[1].object {
                return Err(Error::contract("scene objects must be distinct and sorted by id"));
            }
        }
        for o in &self.objects {
            if o.object.0 as usize >= NUM_OBJECTS
                || o.color.0 as usize >= NUM_COLORS
                || !(1..=MAX_COUNT).contains(&o.count)
            {
                return Err(Error::contract(format!("invalid scene object {o:?}")));
            }
        }
        Ok(())
    }

    pub fn contains(&self, object: ObjectId) -> bool {
        self.objects.iter().any(|o| o.object == object)
    }

    pub fn get(&self, object: ObjectId) -> Option<&SceneObject> {
        self.objects.iter().find(|o| o.object == object)
    }

    /// Fixed-size one-hot featurization used as the image latent.
    pub fn featurize(&self) -> Vec<f64> {
        let mut v = vec![0.0; LATENT_DIM];
        for o in &self.objects {
            let base = o.object.0 as usize * FEATURES_PER_OBJECT;
            v[base] = 1.0;
            v[base + 1 + o.color.0 as usize] = 1.0;
            v[base + 1 + NUM_COLORS + o.count as usize - 1] = 1.0;
        }
        v
    }
}

/// SplitMix64 step, used to derive independent per-item seeds.
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed
        .wrapping_add(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(index.wrapping_mul(0xBF58_476D_1CE4_E5B9));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Scene distribution knobs.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldConfig {
    /// Chance that each drawn object brings its companion (ids paired as
    /// `2k`, `2k+1`) into the scene. Zero gives independent objects.
    pub companion_prob: f64,
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.companion_prob) {
            return Err(Error::contract(format!(
                "companion_prob {} outside [0, 1]",
                self.companion_prob
            )));
        }
        Ok(())
    }
}

pub fn companion(object: ObjectId) -> ObjectId {
    ObjectId(object.0 ^ 1)
}

pub fn generate_scene(seed: u64) -> Scene {
    generate_scene_in(seed, &WorldConfig::default())
}

pub fn generate_scene_in(seed: u64, world: &WorldConfig) -> Scene {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = match rng.random_range(0..10) {
        0..=1 => 1,
        2..=5 => 2,
        _ => 3,
    };
    let mut ids: Vec<u8> = (0..NUM_OBJECTS as u8).collect();
    ids.shuffle(&mut rng);
    let mut chosen: Vec<u8> = Vec::with_capacity(n);
    for id in ids {
        if chosen.len() == n {
            break;
        }
        if chosen.contains(&id) {
            continue;
        }
        chosen.push(id);
        let partner = companion(ObjectId(id)).0;
        if chosen.len() < n
            && !chosen.contains(&partner)
            && world.companion_prob > 0.0
            && rng.random_bool(world.companion_prob)
        {
            chosen.push(partner);
        }
    }
    chosen.sort_unstable();
    let objects = chosen
        .into_iter()
        .map(|id| SceneObject {
            object: ObjectId(id),
            color: ColorId(rng.random_range(0..NUM_COLORS as u8)),
            count: rng.random_range(1..=MAX_COUNT),
        })
        .collect();
    Scene { objects, seed }
}

pub fn render_clauses(clauses: &[SceneObject]) -> Vec<TokenId> {
    let mut out: Vec<TokenId> = clauses.iter().flat_map(SceneObject::clause).collect();
    out.push(EOS);
    out
}

/// Ground-truth caption of a scene.
pub fn render_caption(scene: &Scene) -> Vec<TokenId> {
    render_clauses(&scene.objects)
}

/// Parses `count color object .` clauses terminated by `<eos>`, in order.
pub fn parse_clauses(tokens: &[TokenId]) -> Result<Vec<SceneObject>> {
    let Some((&last, body)) = tokens.split_last() else {
        return Err(Error::Caption("empty caption".into()));
    };
    if last != EOS {
        return Err(Error::Caption("caption must end with <eos>".into()));
    }
    if body.len() % CLAUSE_LEN != 0 {
        return Err(Error::Caption(format!("{} tokens do not form clauses", body.len())));
    }
    body.chunks(CLAUSE_LEN)
        .map(|c| {
            let ok = vocab::is_count(c[0]) && vocab::is_color(c[1]) && vocab::is_object(c[2]) && c[3] == PERIOD;
            if !ok {
                return Err(Error::Caption(format!("bad clause `{}`", vocab::detokenize(c))));
            }
            Ok(SceneObject {
                count: (c[0] - COUNT_BASE + 1) as u8,
                color: ColorId((c[1] - COLOR_BASE) as u8),
                object: ObjectId((c[2] - OBJECT_BASE) as u8),
            })
        })
        .collect()
}

/// Inverse of [`render_caption`] for valid scenes. The seed is not part of
/// the caption and is taken from the caller.
pub fn parse_caption(tokens: &[TokenId], seed: u64) -> Result<Scene> {
    let scene = Scene {
        objects: parse_clauses(tokens)?,
        seed,
    };
    scene.validate().map_err(|e| Error::Caption(e.to_string()))?;
    Ok(scene)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CorruptionKind {
    ObjectSwap,
    ColorSwap,
    CountOffByOne,
    FabricatedInsertion,
    ObjectOmission,
}

impl CorruptionKind {
    pub const ALL: [CorruptionKind; 5] = [
        CorruptionKind::ObjectSwap,
        CorruptionKind::ColorSwap,
        CorruptionKind::CountOffByOne,
        CorruptionKind::FabricatedInsertion,
        CorruptionKind::ObjectOmission,
    ];

    /// Changes the set of objects mentioned in the caption.
    pub fn is_structural(self) -> bool {
        matches!(
            self,
            CorruptionKind::ObjectSwap | CorruptionKind::FabricatedInsertion | CorruptionKind::ObjectOmission
        )
    }

    /// Codebook category this corruption instantiates.
    pub fn codebook_category(self) -> &'static str {
        match self {
            CorruptionKind::ObjectSwap => "identity/object",
            CorruptionKind::ColorSwap => "attribute/color",
            CorruptionKind::CountOffByOne => "counting/number",
            CorruptionKind::FabricatedInsertion => "existence/fabricated",
            CorruptionKind::ObjectOmission => "existence/omission",
        }
    }

    pub fn from_codebook_category(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.codebook_category() == name)
    }

    fn targets_scene_object(self) -> bool {
        self != CorruptionKind::FabricatedInsertion
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "value")]
pub enum Replacement {
    Object(ObjectId),
    Color(ColorId),
    Count(u8),
    Clause(SceneObject),
    Removed,
}

/// One injected error. `target` indexes the scene's objects, except for
/// insertions where it is the clause position in the corrupted caption.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Corruption {
    pub category: CorruptionKind,
    pub target: usize,
    pub replacement: Replacement,
}

fn absent_object(scene: &Scene, rng: &mut ChaCha8Rng) -> ObjectId {
    let absent: Vec<u8> = (0..NUM_OBJECTS as u8)
        .filter(|&id| !scene.contains(ObjectId(id)))
        .collect();
    ObjectId(*absent.choose(rng).expect("scenes leave absent objects"))
}

fn allowed_kinds(scene: &Scene, first: Option<(CorruptionKind, usize)>) -> Vec<CorruptionKind> {
    let n = scene.objects.len();
    CorruptionKind::ALL
        .into_iter()
        .filter(|&k| {
            if k == CorruptionKind::ObjectOmission && n < 2 {
                return false;
            }
            match first {
                None => true,
                Some((f, _)) if f == k => false,
                Some((f, _)) if f.is_structural() && k.is_structural() => false,
                // second object-level error must land on a different object
                Some((f, _)) if f.targets_scene_object() && k.targets_scene_object() => n >= 2,
                Some(_) => true,
            }
        })
        .collect()
}

/// Draw weight of each kind. Structural kinds are favored because at most
/// one per caption is allowed; 8:3 evens out the overall category counts.
fn kind_weight(kind: &CorruptionKind) -> u32 {
    if kind.is_structural() {
        8
    } else {
        3
    }
}

/// Applies one or two corruptions to a ground-truth caption.
///
/// At most one corruption changes which objects are mentioned, and two
/// object-level corruptions never share a target, so the recorded list can be
/// recovered exactly by comparing the parsed captions.
pub fn corrupt(scene: &Scene, caption: &[TokenId], corruption_seed: u64) -> Result<(Vec<TokenId>, Vec<Corruption>)> {
    scene.validate()?;
    if caption != render_caption(scene).as_slice() {
        return Err(Error::contract("caption does not match scene"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(corruption_seed);
    let n = scene.objects.len();

    let first_kind = *allowed_kinds(scene, None)
        .choose_weighted(&mut rng, kind_weight)
        .expect("non-empty");
    let first_target = if first_kind.targets_scene_object() {
        rng.random_range(0..n)
    } else {
        0
    };
    let mut plan = vec![(first_kind, first_target)];
    if rng.random_bool(0.5) {
        let options = allowed_kinds(scene, Some((first_kind, first_target)));
        if let Ok(&second) = options.choose_weighted(&mut rng, kind_weight) {
            let target = if second.targets_scene_object() {
                let others: Vec<usize> = (0..n)
                    .filter(|&i| !first_kind.targets_scene_object() || i != first_target)
                    .collect();
                *others.choose(&mut rng).expect("checked by allowed_kinds")
            } else {
                0
            };
            plan.push((second, target));
        }
    }
    // insertions are placed last so their position refers to the final caption
    plan.sort_by_key(|(k, _)| *k == CorruptionKind::FabricatedInsertion);

    let mut clauses: Vec<Option<SceneObject>> = scene.objects.iter().copied().map(Some).collect();
    let mut records = Vec::with_capacity(plan.len());
    for (kind, target) in plan {
        let replacement = match kind {
            CorruptionKind::ObjectSwap => {
                let new = absent_object(scene, &mut rng);
                clauses[target].as_mut().expect("present").object = new;
                Replacement::Object(new)
            }
            CorruptionKind::ColorSwap => {
                let old = scene.objects[target].color.0;
                let new = (old + rng.random_range(1..NUM_COLORS as u8)) % NUM_COLORS as u8;
                clauses[target].as_mut().expect("present").color = ColorId(new);
                Replacement::Color(ColorId(new))
            }
            CorruptionKind::CountOffByOne => {
                let old = scene.objects[target].count;
                let new = match old {
                    1 => 2,
                    c if c == MAX_COUNT => MAX_COUNT - 1,
                    c if rng.random_bool(0.5) => c + 1,
                    c => c - 1,
                };
                clauses[target].as_mut().expect("present").count = new;
                Replacement::Count(new)
            }
            CorruptionKind::ObjectOmission => {
                clauses[target] = None;
                Replacement::Removed
            }
            CorruptionKind::FabricatedInsertion => {
                let clause = SceneObject {
                    object: absent_object(scene, &mut rng),
                    color: ColorId(rng.random_range(0..NUM_COLORS as u8)),
                    count: rng.random_range(1..=MAX_COUNT),
                };
                let remaining = clauses.iter().filter(|c| c.is_some()).count();
                let position = rng.random_range(0..=remaining);
                let mut kept: Vec<Option<SceneObject>> = clauses.iter().copied().filter(Option::is_some).collect();
                kept.insert(position, Some(clause));
                clauses = kept;
                records.push(Corruption {
                    category: kind,
                    target: position,
                    replacement: Replacement::Clause(clause),
                });
                continue;
            }
        };
        records.push(Corruption {
            category: kind,
            target,
            replacement,
        });
    }
    let final_clauses: Vec<SceneObject> = clauses.into_iter().flatten().collect();
    let rejected = render_clauses(&final_clauses);
    debug_assert_ne!(rejected, caption);
    records.sort_by_key(|c| (c.category, c.target));
    Ok((rejected, records))
}

/// Question used for captioning turns.
pub fn caption_question() -> Vec<TokenId> {
    vec![vocab::DESCRIBE, vocab::QMARK]
}

/// A generated preference pair with its scene and injected errors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldSample {
    pub seed: u64,
    pub scene: Scene,
    pub chosen_tokens: Vec<TokenId>,
    pub rejected_tokens: Vec<TokenId>,
    pub corruptions: Vec<Corruption>,
}

impl WorldSample {
    pub fn context(&self) -> InputContext {
        InputContext::new(self.scene.featurize(), caption_question())
    }

    pub fn preference(&self) -> PreferenceSample {
        PreferenceSample {
            context: self.context(),
            chosen: self.chosen_tokens.clone(),
            rejected: self.rejected_tokens.clone(),
        }
    }
}

pub fn make_sample(item_seed: u64) -> Result<WorldSample> {
    make_sample_in(item_seed, &WorldConfig::default())
}

pub fn make_sample_in(item_seed: u64, world: &WorldConfig) -> Result<WorldSample> {
    let scene = generate_scene_in(item_seed, world);
    let chosen = render_caption(&scene);
    let (rejected, corruptions) = corrupt(&scene, &chosen, derive_seed(item_seed, 0xC0))?;
    Ok(WorldSample {
        seed: item_seed,
        scene,
        chosen_tokens: chosen,
        rejected_tokens: rejected,
        corruptions,
    })
}

pub fn make_preference_dataset(n: usize, seed: u64) -> Result<Vec<WorldSample>> {
    make_preference_dataset_in(n, seed, &WorldConfig::default())
}

pub fn make_preference_dataset_in(n: usize, seed: u64, world: &WorldConfig) -> Result<Vec<WorldSample>> {
    world.validate()?;
    if n == 0 {
        return Err(Error::contract("dataset size must be at least 1"));
    }
    (0..n as u64)
        .map(|i| make_sample_in(derive_seed(seed, i), world))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scenes_are_deterministic() {
        assert_eq!(generate_scene(0), generate_scene(0));
    }

    #[test]
    fn thousand_scenes_are_valid() {
        for seed in 0..1000 {
            generate_scene(seed).validate().unwrap();
        }
    }

    #[test]
    fn featurization_has_fixed_width() {
        assert_eq!(LATENT_DIM, 20 * (8 + 4 + 1));
        for seed in 0..50 {
            let f = generate_scene(seed).featurize();
            assert_eq!(f.len(), LATENT_DIM);
            let s = generate_scene(seed);
            assert_eq!(f.iter().filter(|v| **v == 1.0).count(), 3 * s.objects.len());
        }
    }

    #[test]
    fn single_object_caption_is_one_clause() {
        let scene = Scene {
            objects: vec![SceneObject {
                object: ObjectId(1),
                color: ColorId(1),
                count: 2,
            }],
            seed: 0,
        };
        let c = render_caption(&scene);
        assert_eq!(vocab::detokenize(&c), "two blue dog . <eos>");
        assert_eq!(parse_caption(&c, 0).unwrap(), scene);
    }

    #[test]
    fn malformed_captions_are_rejected() {
        assert!(parse_caption(&[], 0).is_err());
        assert!(parse_caption(&vocab::tokenize("two blue dog .").unwrap(), 0).is_err());
        assert!(parse_caption(&vocab::tokenize("blue two dog . <eos>").unwrap(), 0).is_err());
        // unsorted objects are not a valid scene
        assert!(parse_caption(&vocab::tokenize("one red dog . one red cup . <eos>").unwrap(), 0).is_err());
    }

    #[test]
    fn count_off_by_one_stays_in_range() {
        for seed in 0..300 {
            let s = make_sample(seed).unwrap();
            for c in &s.corruptions {
                if let Replacement::Count(n) = c.replacement {
                    let old = s.scene.objects[c.target].count;
                    assert_eq!((i16::from(n) - i16::from(old)).abs(), 1);
                    assert!((1..=MAX_COUNT).contains(&n));
                }
            }
        }
    }

    #[test]
    fn fabricated_insertion_adds_one_absent_object() {
        let mut seen = 0;
        for seed in 0..300 {
            let s = make_sample(seed).unwrap();
            if s.corruptions
                .iter()
                .any(|c| c.category == CorruptionKind::FabricatedInsertion)
            {
                seen += 1;
                let parsed = parse_clauses(&s.rejected_tokens).unwrap();
                let extra: Vec<_> = parsed.iter().filter(|o| !s.scene.contains(o.object)).collect();
                assert_eq!(extra.len(), 1);
                assert_eq!(parsed.len(), s.scene.objects.len() + 1);
            }
        }
        assert!(seen > 0);
    }

    #[test]
    fn single_object_scenes_never_lose_their_object() {
        for seed in 0..500 {
            let s = make_sample(seed).unwrap();
            if s.scene.objects.len() == 1 {
                assert!(!s
                    .corruptions
                    .iter()
                    .any(|c| c.category == CorruptionKind::ObjectOmission));
            }
        }
    }

    #[test]
    fn dataset_of_one_is_consistent() {
        let d = make_preference_dataset(1, 5).unwrap();
        assert_eq!(d.len(), 1);
        let s = &d[0];
        assert_eq!(s.context().image_latent, s.scene.featurize());
        assert_eq!(s.chosen_tokens, render_caption(&s.scene));
        assert_ne!(s.chosen_tokens, s.rejected_tokens);
        assert!(make_preference_dataset(0, 5).is_err());
    }
}
