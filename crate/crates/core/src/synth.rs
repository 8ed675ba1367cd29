//! Synthetic modality-grounded preference data.
//!
//! A seeded world of entity types stands in for the external captioning and
//! tagging models. Each entity type has an audio signature and (for
//! objects) a visual signature; a scene's audio features are the sum of its
//! sounding entities' signatures and its visual features the sum of its
//! visible objects' signatures, plus small Gaussian noise. Questions are
//! therefore answerable from the right modality and not from the wrong one.
//!
//! The pipeline mirrors the three stages of the data recipe:
//! 1. per-modality annotation ([`Annotator`], backed by [`WorldOracle`]);
//! 2. five-way entity classification and yes/no answer assignment
//!    ([`classify_entity`], [`answer_for`]);
//! 3. hard-negative rejected responses drawn from the irrelevant modality
//!    ([`build_pair`]).
//!
//! # Vocabulary and prompts
//!
//! With `K` entity types the response vocabulary has `K + 2` items:
//! `0 = yes`, `1 = no`, `2 + e = caption summarizing entity e`. The prompt
//! table has `2K + 3` entries: `e` asks whether entity `e` is visible,
//! `K + e` whether it is making sound, then the visual, audio and joint
//! audiovisual caption prompts.
//!
//! # Dataset file
//!
//! One JSON object per line with keys in this order: `version`,
//! `scene_refs` (`[visual scene, audio scene]`), `question_kind`,
//! `prompt_id`, `modality_tag`, `matched`, `y_w`, `y_l`, `audio`, `visual`,
//! and for evaluation items `ground_truth` and `task_group`. A sidecar
//! `<file>.stats.json` records the world and scene configuration (so the
//! oracle can be rebuilt) plus summary statistics.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{EvalItem, TaskGroup};
use crate::policy::{ModalityContext, ModalityTag};
use crate::seeding;

pub const YES: usize = 0;
pub const NO: usize = 1;
pub const CAPTION_BASE: usize = 2;

pub const RECORD_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Answer {
    Yes,
    No,
}

impl Answer {
    pub fn response_id(self) -> usize {
        match self {
            Answer::Yes => YES,
            Answer::No => NO,
        }
    }

    pub fn from_response_id(id: usize) -> Option<Self> {
        match id {
            YES => Some(Answer::Yes),
            NO => Some(Answer::No),
            _ => None,
        }
    }

    pub fn opposite(self) -> Self {
        match self {
            Answer::Yes => Answer::No,
            Answer::No => Answer::Yes,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntityKind {
    Object,
    PureSound,
}

/// An entity as it appears in one audiovisual context. For a pure sound,
/// `visible` means the sound is attached to the visible scene.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Entity {
    pub entity_id: usize,
    pub visible: bool,
    pub sounding: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntityCategory {
    InViewSoundSource,
    InViewSound,
    InViewSilentObject,
    OutOfViewSoundSource,
    OutOfViewSound,
}

pub fn classify_entity(e: &Entity, kind: EntityKind) -> Result<EntityCategory> {
    match (kind, e.visible, e.sounding) {
        (_, false, false) => Err(Error::Domain(format!(
            "entity {} is neither visible nor sounding",
            e.entity_id
        ))),
        (EntityKind::Object, true, true) => Ok(EntityCategory::InViewSoundSource),
        (EntityKind::Object, true, false) => Ok(EntityCategory::InViewSilentObject),
        (EntityKind::Object, false, true) => Ok(EntityCategory::OutOfViewSoundSource),
        (EntityKind::PureSound, _, false) => Err(Error::Domain(format!(
            "pure sound {} must be sounding",
            e.entity_id
        ))),
        (EntityKind::PureSound, true, true) => Ok(EntityCategory::InViewSound),
        (EntityKind::PureSound, false, true) => Ok(EntityCategory::OutOfViewSound),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuestionKind {
    VisualPresence,
    AudioPresence,
    VisualCaption,
    AudioCaption,
    AudiovisualCaption,
}

impl QuestionKind {
    pub fn modality_tag(self) -> ModalityTag {
        match self {
            QuestionKind::VisualPresence | QuestionKind::VisualCaption => ModalityTag::VisualRelated,
            QuestionKind::AudioPresence | QuestionKind::AudioCaption => ModalityTag::AudioRelated,
            QuestionKind::AudiovisualCaption => ModalityTag::Audiovisual,
        }
    }

    pub fn is_presence(self) -> bool {
        matches!(self, QuestionKind::VisualPresence | QuestionKind::AudioPresence)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            QuestionKind::VisualPresence => "visual_presence",
            QuestionKind::AudioPresence => "audio_presence",
            QuestionKind::VisualCaption => "visual_caption",
            QuestionKind::AudioCaption => "audio_caption",
            QuestionKind::AudiovisualCaption => "audiovisual_caption",
        }
    }
}

/// Yes/no answer table for presence questions; `None` means the
/// combination is never asked.
pub fn answer_for(category: EntityCategory, question: QuestionKind) -> Option<Answer> {
    use EntityCategory::*;
    match (question, category) {
        (QuestionKind::VisualPresence, InViewSoundSource) => Some(Answer::Yes),
        (QuestionKind::VisualPresence, OutOfViewSoundSource | OutOfViewSound) => Some(Answer::No),
        (QuestionKind::AudioPresence, InViewSoundSource | InViewSound) => Some(Answer::Yes),
        (QuestionKind::AudioPresence, InViewSilentObject) => Some(Answer::No),
        _ => None,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WorldConfig {
    pub seed: u64,
    pub n_entity_types: usize,
    /// The last `n_pure_sounds` entity types are sounds without a visual form.
    pub n_pure_sounds: usize,
    pub d_audio: usize,
    pub d_visual: usize,
    pub feature_noise: f64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            n_entity_types: 6,
            n_pure_sounds: 2,
            d_audio: 8,
            d_visual: 8,
            feature_noise: 0.05,
        }
    }
}

/// Distribution of entities within a scene.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneParams {
    pub min_entities: usize,
    pub max_entities: usize,
    /// Probability an object is both visible and sounding.
    pub p_visible_and_sounding: f64,
    /// Probability an object is visible and silent; the rest are heard but
    /// out of view.
    pub p_visible_only: f64,
    /// Probability a pure sound is attached to the visible scene.
    pub p_sound_attached: f64,
}

impl Default for SceneParams {
    fn default() -> Self {
        Self {
            min_entities: 1,
            max_entities: 4,
            p_visible_and_sounding: 0.6,
            p_visible_only: 0.2,
            p_sound_attached: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub scene_id: usize,
    pub entities: Vec<Entity>,
    pub audio_feat: Vec<f64>,
    pub visual_feat: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct World {
    config: WorldConfig,
    kinds: Vec<EntityKind>,
    audio_signatures: Vec<Vec<f64>>,
    visual_signatures: Vec<Vec<f64>>,
}

/// Seeded random unit vectors, orthogonalized while the dimension allows.
fn signatures(count: usize, dim: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(count);
    for i in 0..count {
        let mut v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        if i < dim {
            for prev in &out {
                let dot: f64 = v.iter().zip(prev).map(|(a, b)| a * b).sum();
                for (x, p) in v.iter_mut().zip(prev) {
                    *x -= dot * p;
                }
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        out.push(v.into_iter().map(|x| x / norm).collect());
    }
    out
}

impl World {
    pub fn new(config: WorldConfig) -> Result<Self> {
        if config.n_entity_types == 0 || config.n_pure_sounds >= config.n_entity_types {
            return Err(Error::Config(
                "world needs at least one object type and n_pure_sounds < n_entity_types".into(),
            ));
        }
        if config.d_audio == 0 || config.d_visual == 0 {
            return Err(Error::Config("feature dimensions must be positive".into()));
        }
        if !(config.feature_noise >= 0.0 && config.feature_noise.is_finite()) {
            return Err(Error::Config("feature_noise must be non-negative".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seeding::derive(config.seed, &[0x5167]));
        let k = config.n_entity_types;
        let kinds = (0..k)
            .map(|e| {
                if e >= k - config.n_pure_sounds {
                    EntityKind::PureSound
                } else {
                    EntityKind::Object
                }
            })
            .collect();
        let audio_signatures = signatures(k, config.d_audio, &mut rng);
        let visual_signatures = signatures(k, config.d_visual, &mut rng);
        Ok(Self {
            config,
            kinds,
            audio_signatures,
            visual_signatures,
        })
    }

    pub fn config(&self) -> &WorldConfig {
        &self.config
    }

    pub fn n_entity_types(&self) -> usize {
        self.config.n_entity_types
    }

    pub fn kind(&self, entity_id: usize) -> EntityKind {
        self.kinds[entity_id]
    }

    pub fn vocab(&self) -> usize {
        self.config.n_entity_types + CAPTION_BASE
    }

    pub fn n_prompts(&self) -> usize {
        2 * self.config.n_entity_types + 3
    }

    pub fn caption_response(&self, entity_id: usize) -> usize {
        CAPTION_BASE + entity_id
    }

    pub fn prompt_id(&self, question: QuestionKind, entity: Option<usize>) -> usize {
        let k = self.config.n_entity_types;
        match question {
            QuestionKind::VisualPresence => entity.expect("presence prompt needs an entity"),
            QuestionKind::AudioPresence => k + entity.expect("presence prompt needs an entity"),
            QuestionKind::VisualCaption => 2 * k,
            QuestionKind::AudioCaption => 2 * k + 1,
            QuestionKind::AudiovisualCaption => 2 * k + 2,
        }
    }

    pub fn decode_prompt(&self, prompt_id: usize) -> Option<(QuestionKind, Option<usize>)> {
        let k = self.config.n_entity_types;
        match prompt_id {
            p if p < k => Some((QuestionKind::VisualPresence, Some(p))),
            p if p < 2 * k => Some((QuestionKind::AudioPresence, Some(p - k))),
            p if p == 2 * k => Some((QuestionKind::VisualCaption, None)),
            p if p == 2 * k + 1 => Some((QuestionKind::AudioCaption, None)),
            p if p == 2 * k + 2 => Some((QuestionKind::AudiovisualCaption, None)),
            _ => None,
        }
    }

    /// Scene `scene_id` of the scene set identified by `seed`.
    pub fn scene(&self, params: &SceneParams, seed: u64, scene_id: usize) -> Scene {
        let mut rng = ChaCha8Rng::seed_from_u64(seeding::derive(seed, &[scene_id as u64]));
        let k = self.config.n_entity_types;
        let hi = params.max_entities.clamp(1, k);
        let lo = params.min_entities.clamp(1, hi);
        let count = rng.random_range(lo..=hi);
        let mut types: Vec<usize> = (0..k).collect();
        types.shuffle(&mut rng);
        let mut chosen: Vec<usize> = types.into_iter().take(count).collect();
        chosen.sort_unstable();
        let entities: Vec<Entity> = chosen
            .into_iter()
            .map(|entity_id| {
                let u: f64 = rng.random();
                match self.kinds[entity_id] {
                    EntityKind::Object => {
                        let (visible, sounding) = if u < params.p_visible_and_sounding {
                            (true, true)
                        } else if u < params.p_visible_and_sounding + params.p_visible_only {
                            (true, false)
                        } else {
                            (false, true)
                        };
                        Entity {
                            entity_id,
                            visible,
                            sounding,
                        }
                    }
                    EntityKind::PureSound => Entity {
                        entity_id,
                        visible: u < params.p_sound_attached,
                        sounding: true,
                    },
                }
            })
            .collect();

        let noise = Normal::new(0.0, self.config.feature_noise).expect("validated noise");
        let mut audio_feat: Vec<f64> = (0..self.config.d_audio).map(|_| noise.sample(&mut rng)).collect();
        let mut visual_feat: Vec<f64> = (0..self.config.d_visual).map(|_| noise.sample(&mut rng)).collect();
        for e in &entities {
            if e.sounding {
                for (x, s) in audio_feat.iter_mut().zip(&self.audio_signatures[e.entity_id]) {
                    *x += s;
                }
            }
            if e.visible && self.kinds[e.entity_id] == EntityKind::Object {
                for (x, s) in visual_feat.iter_mut().zip(&self.visual_signatures[e.entity_id]) {
                    *x += s;
                }
            }
        }
        Scene {
            scene_id,
            entities,
            audio_feat,
            visual_feat,
        }
    }

    pub fn scenes(&self, params: &SceneParams, seed: u64, n_scenes: usize) -> Vec<Scene> {
        (0..n_scenes).map(|i| self.scene(params, seed, i)).collect()
    }

    pub fn context(&self, visual_scene: &Scene, audio_scene: &Scene, prompt_id: usize) -> ModalityContext {
        let tag = self
            .decode_prompt(prompt_id)
            .map(|(q, _)| q.modality_tag())
            .unwrap_or(ModalityTag::Audiovisual);
        ModalityContext {
            audio: audio_scene.audio_feat.clone(),
            visual: visual_scene.visual_feat.clone(),
            prompt_id,
            modality_tag: tag,
        }
    }
}

/// Per-modality scene annotation.
pub trait Annotator {
    /// Object types visible in the video.
    fn visible_objects(&self, scene: &Scene) -> BTreeSet<usize>;
    /// Entity types audible in the audio track, each with whether its source
    /// is attached to the visible scene.
    fn sounding_entities(&self, scene: &Scene) -> BTreeMap<usize, bool>;
    fn kind(&self, entity_id: usize) -> EntityKind;
}

/// Annotator that reads the ground truth of the synthetic world.
#[derive(Debug, Clone, Copy)]
pub struct WorldOracle<'w> {
    pub world: &'w World,
}

impl Annotator for WorldOracle<'_> {
    fn visible_objects(&self, scene: &Scene) -> BTreeSet<usize> {
        scene
            .entities
            .iter()
            .filter(|e| e.visible && self.world.kind(e.entity_id) == EntityKind::Object)
            .map(|e| e.entity_id)
            .collect()
    }

    fn sounding_entities(&self, scene: &Scene) -> BTreeMap<usize, bool> {
        scene
            .entities
            .iter()
            .filter(|e| e.sounding)
            .map(|e| (e.entity_id, e.visible))
            .collect()
    }

    fn kind(&self, entity_id: usize) -> EntityKind {
        self.world.kind(entity_id)
    }
}

/// Entities present in the audiovisual context formed by the video of
/// `visual_scene` and the audio of `audio_scene`.
///
/// Objects are visible when seen in the video and sounding when heard in
/// the audio. A pure sound is in view only when its source is attached to
/// the scene and the context is matched.
pub fn context_entities<A: Annotator>(
    annotator: &A,
    visual_scene: &Scene,
    audio_scene: &Scene,
) -> Vec<(Entity, EntityKind)> {
    let matched = visual_scene.scene_id == audio_scene.scene_id;
    let visible = annotator.visible_objects(visual_scene);
    let sounding = annotator.sounding_entities(audio_scene);
    let ids: BTreeSet<usize> = visible.iter().copied().chain(sounding.keys().copied()).collect();
    ids.into_iter()
        .map(|id| {
            let kind = annotator.kind(id);
            let entity = match kind {
                EntityKind::Object => Entity {
                    entity_id: id,
                    visible: visible.contains(&id),
                    sounding: sounding.contains_key(&id),
                },
                EntityKind::PureSound => Entity {
                    entity_id: id,
                    visible: matched && sounding.get(&id).copied().unwrap_or(false),
                    sounding: sounding.contains_key(&id),
                },
            };
            (entity, kind)
        })
        .collect()
}

/// Correct response id for a prompt in a context, or `None` when the
/// question is not asked about this context.
pub fn ground_truth<A: Annotator>(
    annotator: &A,
    visual_scene: &Scene,
    audio_scene: &Scene,
    question: QuestionKind,
    entity: Option<usize>,
) -> Option<usize> {
    let entities = context_entities(annotator, visual_scene, audio_scene);
    match question {
        QuestionKind::VisualPresence | QuestionKind::AudioPresence => {
            let target = entity?;
            let (e, kind) = entities.iter().find(|(e, _)| e.entity_id == target)?;
            let category = classify_entity(e, *kind).ok()?;
            answer_for(category, question).map(Answer::response_id)
        }
        QuestionKind::VisualCaption => annotator
            .visible_objects(visual_scene)
            .first()
            .map(|e| CAPTION_BASE + e),
        QuestionKind::AudioCaption => annotator
            .sounding_entities(audio_scene)
            .keys()
            .next()
            .map(|e| CAPTION_BASE + e),
        QuestionKind::AudiovisualCaption => entities
            .iter()
            .filter(|(e, k)| {
                classify_entity(e, *k).ok() == Some(EntityCategory::InViewSoundSource)
            })
            .map(|(e, _)| CAPTION_BASE + e.entity_id)
            .next(),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PreferencePair {
    pub context: ModalityContext,
    pub question_kind: QuestionKind,
    pub y_w: usize,
    pub y_l: usize,
    pub matched: bool,
    /// `(visual scene, audio scene)`
    pub scene_refs: (usize, usize),
}

/// Rejected caption drawn from the other modality's entities, falling back to
/// the next caption id when the other modality offers nothing different.
fn caption_negative(chosen: usize, other: impl IntoIterator<Item = usize>, n_types: usize) -> usize {
    other
        .into_iter()
        .map(|e| CAPTION_BASE + e)
        .find(|&c| c != chosen)
        .unwrap_or(CAPTION_BASE + (chosen - CAPTION_BASE + 1) % n_types)
}

/// Builds one preference pair, or returns `None` (skip) when no entity in the
/// context is eligible for the question (or for the requested answer).
pub fn build_pair<A: Annotator>(
    world: &World,
    annotator: &A,
    visual_scene: &Scene,
    audio_scene: &Scene,
    question: QuestionKind,
    target: Option<Answer>,
    rng: &mut impl Rng,
) -> Option<PreferencePair> {
    let matched = visual_scene.scene_id == audio_scene.scene_id;
    let (prompt_id, y_w, y_l) = if question.is_presence() {
        let eligible: Vec<(usize, Answer)> = context_entities(annotator, visual_scene, audio_scene)
            .into_iter()
            .filter_map(|(e, kind)| {
                let answer = answer_for(classify_entity(&e, kind).ok()?, question)?;
                Some((e.entity_id, answer))
            })
            .filter(|(_, a)| target.is_none_or(|t| t == *a))
            .collect();
        let &(entity, answer) = eligible.choose(rng)?;
        // The rejected answer is the one the irrelevant modality suggests
        // (heard → "visible", seen → "making sound"); when that agrees with
        // the truth the answer is inverted.
        (
            world.prompt_id(question, Some(entity)),
            answer.response_id(),
            answer.opposite().response_id(),
        )
    } else {
        let k = world.n_entity_types();
        let y_w = ground_truth(annotator, visual_scene, audio_scene, question, None)?;
        let y_l = match question {
            QuestionKind::VisualCaption => {
                caption_negative(y_w, annotator.sounding_entities(audio_scene).into_keys(), k)
            }
            QuestionKind::AudioCaption => {
                caption_negative(y_w, annotator.visible_objects(visual_scene), k)
            }
            _ => {
                let unimodal = context_entities(annotator, visual_scene, audio_scene)
                    .into_iter()
                    .filter(|(e, _)| e.visible != e.sounding)
                    .map(|(e, _)| e.entity_id);
                caption_negative(y_w, unimodal, k)
            }
        };
        (world.prompt_id(question, None), y_w, y_l)
    };
    Some(PreferencePair {
        context: world.context(visual_scene, audio_scene, prompt_id),
        question_kind: question,
        y_w,
        y_l,
        matched,
        scene_refs: (visual_scene.scene_id, audio_scene.scene_id),
    })
}

/// Generator settings for the preference dataset.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetConfig {
    pub n: usize,
    pub n_scenes: usize,
    pub matched_ratio: f64,
    /// Fraction of presence questions; the rest are captions.
    pub presence_fraction: f64,
    /// Fraction of joint audiovisual caption pairs.
    pub av_fraction: f64,
    /// Alternate yes/no targets on presence questions.
    pub balance_answers: bool,
    pub seed: u64,
    pub scene: SceneParams,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            n: 2000,
            n_scenes: 500,
            matched_ratio: 0.5,
            presence_fraction: 0.75,
            av_fraction: 0.0,
            balance_answers: true,
            seed: 0,
            scene: SceneParams::default(),
        }
    }
}

impl DatasetConfig {
    fn validate(&self) -> Result<()> {
        if self.n_scenes == 0 {
            return Err(Error::Config("dataset needs at least one scene".into()));
        }
        for (name, v) in [
            ("matched_ratio", self.matched_ratio),
            ("presence_fraction", self.presence_fraction),
            ("av_fraction", self.av_fraction),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{name} must lie in [0, 1], got {v}")));
            }
        }
        if self.matched_ratio < 1.0 && self.n_scenes < 2 {
            return Err(Error::Config("mismatched contexts need at least two scenes".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub records: usize,
    pub matched: usize,
    pub matched_ratio: f64,
    pub per_task: BTreeMap<String, usize>,
    pub per_modality: BTreeMap<String, usize>,
    pub chosen_yes: usize,
    pub chosen_no: usize,
    pub chosen_caption: usize,
}

impl DatasetStats {
    pub fn from_pairs(pairs: &[PreferencePair]) -> Self {
        let mut stats = DatasetStats {
            records: pairs.len(),
            ..Default::default()
        };
        for p in pairs {
            stats.matched += usize::from(p.matched);
            *stats.per_task.entry(p.question_kind.as_str().into()).or_default() += 1;
            *stats
                .per_modality
                .entry(p.context.modality_tag.as_str().into())
                .or_default() += 1;
            match p.y_w {
                YES => stats.chosen_yes += 1,
                NO => stats.chosen_no += 1,
                _ => stats.chosen_caption += 1,
            }
        }
        stats.matched_ratio = if pairs.is_empty() {
            0.0
        } else {
            stats.matched as f64 / pairs.len() as f64
        };
        stats
    }
}

const MAX_ATTEMPTS: usize = 10_000;

fn draw_scenes<'s>(scenes: &'s [Scene], matched: bool, rng: &mut impl Rng) -> (&'s Scene, &'s Scene) {
    let v = rng.random_range(0..scenes.len());
    if matched {
        return (&scenes[v], &scenes[v]);
    }
    let mut a = rng.random_range(0..scenes.len() - 1);
    if a >= v {
        a += 1;
    }
    (&scenes[v], &scenes[a])
}

/// Assembles the preference dataset in memory. Deterministic under `cfg.seed`.
pub fn assemble_dataset(world: &World, cfg: &DatasetConfig) -> Result<(Vec<PreferencePair>, DatasetStats)> {
    cfg.validate()?;
    let scenes = world.scenes(&cfg.scene, scene_seed(cfg.seed), cfg.n_scenes);
    let oracle = WorldOracle { world };

    let n_matched = (cfg.matched_ratio * cfg.n as f64).round() as usize;
    let mut matched_flags: Vec<bool> = (0..cfg.n).map(|i| i < n_matched).collect();
    matched_flags.shuffle(&mut ChaCha8Rng::seed_from_u64(seeding::derive(cfg.seed, &[1])));

    let mut pairs = Vec::with_capacity(cfg.n);
    for (i, &matched) in matched_flags.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seeding::derive(cfg.seed, &[2, i as u64]));
        let u: f64 = rng.random();
        let visual_side = rng.random_bool(0.5);
        let question = if u < cfg.av_fraction {
            QuestionKind::AudiovisualCaption
        } else if u < cfg.av_fraction + (1.0 - cfg.av_fraction) * cfg.presence_fraction {
            if visual_side {
                QuestionKind::VisualPresence
            } else {
                QuestionKind::AudioPresence
            }
        } else if visual_side {
            QuestionKind::VisualCaption
        } else {
            QuestionKind::AudioCaption
        };
        let target = (cfg.balance_answers && question.is_presence())
            .then_some(if (i / 2) % 2 == 0 { Answer::Yes } else { Answer::No });

        let mut built = None;
        for _ in 0..MAX_ATTEMPTS {
            let (vs, aus) = draw_scenes(&scenes, matched, &mut rng);
            if let Some(p) = build_pair(world, &oracle, vs, aus, question, target, &mut rng) {
                built = Some(p);
                break;
            }
        }
        let pair = built.ok_or_else(|| {
            Error::Config(format!(
                "no eligible context found for record {i} ({}, matched={matched}); scene distribution is infeasible",
                question.as_str()
            ))
        })?;
        pairs.push(pair);
    }
    let stats = DatasetStats::from_pairs(&pairs);
    Ok((pairs, stats))
}

/// Scene-set seed used by a dataset seed.
pub fn scene_seed(dataset_seed: u64) -> u64 {
    seeding::derive(dataset_seed, &[0x5ce7e])
}

/// One line of a dataset or evaluation-item file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub version: u32,
    pub scene_refs: [usize; 2],
    pub question_kind: QuestionKind,
    pub prompt_id: usize,
    pub modality_tag: ModalityTag,
    pub matched: bool,
    pub y_w: usize,
    pub y_l: usize,
    pub audio: Vec<f64>,
    pub visual: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ground_truth: Option<Answer>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub task_group: Option<TaskGroup>,
}

impl Record {
    pub fn from_pair(p: &PreferencePair) -> Self {
        Self {
            version: RECORD_VERSION,
            scene_refs: [p.scene_refs.0, p.scene_refs.1],
            question_kind: p.question_kind,
            prompt_id: p.context.prompt_id,
            modality_tag: p.context.modality_tag,
            matched: p.matched,
            y_w: p.y_w,
            y_l: p.y_l,
            audio: p.context.audio.clone(),
            visual: p.context.visual.clone(),
            ground_truth: None,
            task_group: None,
        }
    }

    pub fn from_eval_item(item: &EvalItem, scene_refs: (usize, usize), matched: bool) -> Self {
        let truth = item.ground_truth;
        Self {
            version: RECORD_VERSION,
            scene_refs: [scene_refs.0, scene_refs.1],
            question_kind: item.question_kind,
            prompt_id: item.context.prompt_id,
            modality_tag: item.context.modality_tag,
            matched,
            y_w: truth.response_id(),
            y_l: truth.opposite().response_id(),
            audio: item.context.audio.clone(),
            visual: item.context.visual.clone(),
            ground_truth: Some(truth),
            task_group: Some(item.task_group),
        }
    }

    pub fn context(&self) -> ModalityContext {
        ModalityContext {
            audio: self.audio.clone(),
            visual: self.visual.clone(),
            prompt_id: self.prompt_id,
            modality_tag: self.modality_tag,
        }
    }

    pub fn to_pair(&self) -> PreferencePair {
        PreferencePair {
            context: self.context(),
            question_kind: self.question_kind,
            y_w: self.y_w,
            y_l: self.y_l,
            matched: self.matched,
            scene_refs: (self.scene_refs[0], self.scene_refs[1]),
        }
    }

    pub fn to_eval_item(&self) -> Option<EvalItem> {
        Some(EvalItem {
            context: self.context(),
            question_kind: self.question_kind,
            ground_truth: self.ground_truth?,
            task_group: self.task_group?,
        })
    }
}

/// What a data file contains.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FileKind {
    Preference,
    Eval,
    Natural,
}

/// Contents of `<file>.stats.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub version: u32,
    pub kind: FileKind,
    pub world: WorldConfig,
    pub scene: SceneParams,
    pub scene_seed: u64,
    pub n_scenes: usize,
    pub stats: DatasetStats,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".stats.json");
    path.with_file_name(name)
}

pub fn write_records(path: &Path, records: &[Record], sidecar: &Sidecar) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for r in records {
        let line = serde_json::to_string(r).expect("records serialize");
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    let side = sidecar_path(path);
    let text = serde_json::to_string_pretty(sidecar).expect("sidecar serializes");
    std::fs::write(&side, text + "\n").map_err(|e| Error::io(&side, e))
}

pub fn read_sidecar(path: &Path) -> Result<Sidecar> {
    let side = sidecar_path(path);
    let text = std::fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: side,
        line: e.line(),
        msg: e.to_string(),
    })
}

/// Reads every record, failing on the first malformed line.
pub fn read_records(path: &Path) -> Result<Vec<Record>> {
    let (records, errors) = read_records_lenient(path)?;
    if let Some((line, msg)) = errors.into_iter().next() {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            line,
            msg,
        });
    }
    Ok(records.into_iter().map(|(_, r)| r).collect())
}

/// Reads records, collecting per-line parse errors instead of stopping.
/// Line numbers are 1-based; blank lines are skipped.
#[allow(clippy::type_complexity)]
pub fn read_records_lenient(path: &Path) -> Result<(Vec<(usize, Record)>, Vec<(usize, String)>)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut records = Vec::new();
    let mut errors = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<Record>(&line) {
            Ok(r) => records.push((i + 1, r)),
            Err(e) => errors.push((i + 1, e.to_string())),
        }
    }
    Ok((records, errors))
}

/// Assembles a dataset and writes it with its sidecar.
pub fn assemble_dataset_to_file(world: &World, cfg: &DatasetConfig, path: &Path) -> Result<DatasetStats> {
    let (pairs, stats) = assemble_dataset(world, cfg)?;
    let records: Vec<Record> = pairs.iter().map(Record::from_pair).collect();
    let sidecar = Sidecar {
        version: RECORD_VERSION,
        kind: FileKind::Preference,
        world: *world.config(),
        scene: cfg.scene,
        scene_seed: scene_seed(cfg.seed),
        n_scenes: cfg.n_scenes,
        stats: stats.clone(),
    };
    write_records(path, &records, &sidecar)?;
    Ok(stats)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub line: usize,
    pub reasons: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub records: usize,
    pub violations: Vec<Violation>,
    pub parse_errors: Vec<(usize, String)>,
}

impl VerifyReport {
    pub fn is_clean(&self) -> bool {
        self.violations.is_empty() && self.parse_errors.is_empty()
    }
}

/// Re-derives every record from the world oracle and reports mismatches.
pub fn verify_records(
    world: &World,
    scene_params: &SceneParams,
    scene_seed: u64,
    n_scenes: usize,
    records: &[(usize, Record)],
) -> Vec<Violation> {
    let oracle = WorldOracle { world };
    let mut cache: BTreeMap<usize, Scene> = BTreeMap::new();
    let mut scene = |id: usize| -> Scene {
        cache
            .entry(id)
            .or_insert_with(|| world.scene(scene_params, scene_seed, id))
            .clone()
    };
    let mut violations = Vec::new();
    for (line, r) in records {
        let mut reasons = Vec::new();
        let [vid, aid] = r.scene_refs;
        if vid >= n_scenes || aid >= n_scenes {
            reasons.push(format!("scene reference out of range ({vid}, {aid})"));
            violations.push(Violation { line: *line, reasons });
            continue;
        }
        let (vs, aus) = (scene(vid), scene(aid));
        if r.matched != (vid == aid) {
            reasons.push("matched flag disagrees with scene references".into());
        }
        if r.y_w == r.y_l {
            reasons.push("chosen and rejected responses are identical".into());
        }
        match world.decode_prompt(r.prompt_id) {
            None => reasons.push(format!("unknown prompt id {}", r.prompt_id)),
            Some((question, entity)) => {
                if question != r.question_kind {
                    reasons.push("question kind disagrees with prompt id".into());
                }
                if question.modality_tag() != r.modality_tag {
                    reasons.push("modality tag inconsistent with question kind".into());
                }
                match ground_truth(&oracle, &vs, &aus, question, entity) {
                    None => reasons.push("question is not answerable in this context".into()),
                    Some(truth) => {
                        if r.y_w != truth {
                            reasons.push(format!("chosen response {} but oracle says {truth}", r.y_w));
                        }
                        if r.y_l == truth {
                            reasons.push("rejected response is consistent with the relevant modality".into());
                        }
                        if let Some(gt) = r.ground_truth {
                            if gt.response_id() != truth {
                                reasons.push("ground_truth field disagrees with oracle".into());
                            }
                        }
                    }
                }
            }
        }
        if r.audio != aus.audio_feat || r.visual != vs.visual_feat {
            reasons.push("inline features differ from the referenced scenes".into());
        }
        if !reasons.is_empty() {
            violations.push(Violation { line: *line, reasons });
        }
    }
    violations
}

/// Verifies a dataset file against the oracle described by its sidecar.
pub fn verify_dataset(path: &Path) -> Result<VerifyReport> {
    let (records, parse_errors) = read_records_lenient(path)?;
    if records.is_empty() {
        return Ok(VerifyReport {
            records: 0,
            violations: Vec::new(),
            parse_errors,
        });
    }
    let side = read_sidecar(path)?;
    let world = World::new(side.world)?;
    let violations = verify_records(&world, &side.scene, side.scene_seed, side.n_scenes, &records);
    Ok(VerifyReport {
        records: records.len(),
        violations,
        parse_errors,
    })
}

/// Settings for the supervised warm-up corpus.
///
/// The corpus imitates ordinary audiovisual QA: every context is matched,
/// questions ask about any entity type, and answers are the literal truth
/// (a "no" is usually an entity absent from both modalities). The two
/// modalities agree on most items, which is the co-occurrence a
/// conventionally pretrained model absorbs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NaturalCorpusConfig {
    pub n: usize,
    pub n_scenes: usize,
    pub presence_fraction: f64,
    /// Fraction of presence questions whose answer is "yes".
    pub yes_fraction: f64,
    pub seed: u64,
    pub scene: SceneParams,
}

impl Default for NaturalCorpusConfig {
    fn default() -> Self {
        Self {
            n: 2000,
            n_scenes: 500,
            presence_fraction: 0.75,
            yes_fraction: 0.5,
            seed: 1,
            scene: SceneParams::default(),
        }
    }
}

pub fn natural_corpus(world: &World, cfg: &NaturalCorpusConfig) -> Result<Vec<PreferencePair>> {
    if cfg.n_scenes == 0 {
        return Err(Error::Config("natural corpus needs at least one scene".into()));
    }
    if !(0.0..=1.0).contains(&cfg.yes_fraction) {
        return Err(Error::Config("yes_fraction must lie in [0, 1]".into()));
    }
    let scenes = world.scenes(&cfg.scene, scene_seed(cfg.seed), cfg.n_scenes);
    let oracle = WorldOracle { world };
    let k = world.n_entity_types();
    let objects: Vec<usize> = (0..k).filter(|&e| world.kind(e) == EntityKind::Object).collect();
    let mut out = Vec::with_capacity(cfg.n);
    for i in 0..cfg.n {
        let mut rng = ChaCha8Rng::seed_from_u64(seeding::derive(cfg.seed, &[3, i as u64]));
        let want_yes = rng.random_bool(cfg.yes_fraction);
        let visual_side = rng.random_bool(0.5);
        let presence = rng.random::<f64>() < cfg.presence_fraction;
        let mut built = None;
        for _ in 0..MAX_ATTEMPTS {
            let s = &scenes[rng.random_range(0..scenes.len())];
            let (question, entity, truth) = if presence {
                if visual_side {
                    let e = *objects.choose(&mut rng).expect("world has objects");
                    let seen = oracle.visible_objects(s).contains(&e);
                    (QuestionKind::VisualPresence, Some(e), if seen { YES } else { NO })
                } else {
                    let e = rng.random_range(0..k);
                    let heard = oracle.sounding_entities(s).contains_key(&e);
                    (QuestionKind::AudioPresence, Some(e), if heard { YES } else { NO })
                }
            } else {
                let q = if visual_side {
                    QuestionKind::VisualCaption
                } else {
                    QuestionKind::AudioCaption
                };
                match ground_truth(&oracle, s, s, q, None) {
                    Some(t) => (q, None, t),
                    None => continue,
                }
            };
            if presence && (truth == YES) != want_yes {
                continue;
            }
            let rejected = match truth {
                YES => NO,
                NO => YES,
                c => CAPTION_BASE + (c - CAPTION_BASE + 1 + rng.random_range(0..k - 1)) % k,
            };
            built = Some(PreferencePair {
                context: world.context(s, s, world.prompt_id(question, entity)),
                question_kind: question,
                y_w: truth,
                y_l: rejected,
                matched: true,
                scene_refs: (s.scene_id, s.scene_id),
            });
            break;
        }
        out.push(built.ok_or_else(|| Error::Config("natural corpus generation failed".into()))?);
    }
    Ok(out)
}

/// Settings for the synthetic hallucination benchmark.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalSetConfig {
    pub n: usize,
    pub n_scenes: usize,
    pub seed: u64,
    pub scene: SceneParams,
}

impl Default for EvalSetConfig {
    fn default() -> Self {
        Self {
            n: 2000,
            n_scenes: 500,
            seed: 2,
            scene: SceneParams::default(),
        }
    }
}

/// An evaluation item with the scenes it came from.
#[derive(Debug, Clone, PartialEq)]
pub struct SourcedEvalItem {
    pub item: EvalItem,
    pub scene_refs: (usize, usize),
    pub matched: bool,
}

/// True when the prompt-irrelevant modality, read on its own, suggests the
/// opposite of the correct answer.
fn is_cross_modal_conflict<A: Annotator>(
    annotator: &A,
    visual_scene: &Scene,
    audio_scene: &Scene,
    question: QuestionKind,
    entity: usize,
    truth: Answer,
) -> bool {
    let suggests_yes = match question {
        QuestionKind::VisualPresence => annotator.sounding_entities(audio_scene).contains_key(&entity),
        QuestionKind::AudioPresence => annotator.visible_objects(visual_scene).contains(&entity),
        _ => return false,
    };
    suggests_yes != (truth == Answer::Yes)
}

/// Balanced yes/no benchmark with four task groups.
///
/// * `adv_hallucination`: visual presence on matched contexts;
/// * `vda_hallucination`: audio presence on matched contexts;
/// * `matching`: presence questions on mismatched contexts;
/// * `dominance`: presence questions where the irrelevant modality
///   contradicts the answer.
///
/// Targets alternate yes/no; a `(group, answer)` combination the table cannot
/// produce (e.g. a "yes" dominance item about visibility) falls back to the
/// other question kind.
pub fn generate_eval_items(world: &World, cfg: &EvalSetConfig) -> Result<Vec<SourcedEvalItem>> {
    if cfg.n_scenes < 2 {
        return Err(Error::Config("evaluation set needs at least two scenes".into()));
    }
    let scenes = world.scenes(&cfg.scene, scene_seed(cfg.seed), cfg.n_scenes);
    let oracle = WorldOracle { world };
    let groups = [
        TaskGroup::AdvHallucination,
        TaskGroup::VdaHallucination,
        TaskGroup::Matching,
        TaskGroup::Dominance,
    ];
    let mut out = Vec::with_capacity(cfg.n);
    for i in 0..cfg.n {
        let mut rng = ChaCha8Rng::seed_from_u64(seeding::derive(cfg.seed, &[4, i as u64]));
        let target = if i % 2 == 0 { Answer::Yes } else { Answer::No };
        let group = groups[(i / 2) % groups.len()];
        let mut built = None;
        for _ in 0..MAX_ATTEMPTS {
            let (matched, question) = match group {
                TaskGroup::AdvHallucination => (true, QuestionKind::VisualPresence),
                TaskGroup::VdaHallucination => (true, QuestionKind::AudioPresence),
                TaskGroup::Matching | TaskGroup::Dominance => {
                    let q = if rng.random_bool(0.5) {
                        QuestionKind::VisualPresence
                    } else {
                        QuestionKind::AudioPresence
                    };
                    (group == TaskGroup::Dominance && rng.random_bool(0.5), q)
                }
            };
            let (vs, aus) = draw_scenes(&scenes, matched, &mut rng);
            let candidates: Vec<usize> = context_entities(&oracle, vs, aus)
                .into_iter()
                .filter_map(|(e, kind)| {
                    let answer = answer_for(classify_entity(&e, kind).ok()?, question)?;
                    let conflict =
                        is_cross_modal_conflict(&oracle, vs, aus, question, e.entity_id, answer);
                    (answer == target && (group != TaskGroup::Dominance || conflict))
                        .then_some(e.entity_id)
                })
                .collect();
            if let Some(&entity) = candidates.choose(&mut rng) {
                let prompt_id = world.prompt_id(question, Some(entity));
                built = Some(SourcedEvalItem {
                    item: EvalItem {
                        context: world.context(vs, aus, prompt_id),
                        question_kind: question,
                        ground_truth: target,
                        task_group: group,
                    },
                    scene_refs: (vs.scene_id, aus.scene_id),
                    matched: vs.scene_id == aus.scene_id,
                });
                break;
            }
        }
        out.push(built.ok_or_else(|| {
            Error::Config(format!("cannot generate evaluation item {i} for group {group:?}"))
        })?);
    }
    Ok(out)
}

pub fn write_eval_items(world: &World, cfg: &EvalSetConfig, items: &[SourcedEvalItem], path: &Path) -> Result<()> {
    let records: Vec<Record> = items
        .iter()
        .map(|s| Record::from_eval_item(&s.item, s.scene_refs, s.matched))
        .collect();
    let pairs: Vec<PreferencePair> = records.iter().map(Record::to_pair).collect();
    let sidecar = Sidecar {
        version: RECORD_VERSION,
        kind: FileKind::Eval,
        world: *world.config(),
        scene: cfg.scene,
        scene_seed: scene_seed(cfg.seed),
        n_scenes: cfg.n_scenes,
        stats: DatasetStats::from_pairs(&pairs),
    };
    write_records(path, &records, &sidecar)
}

pub fn write_natural_corpus(world: &World, cfg: &NaturalCorpusConfig, pairs: &[PreferencePair], path: &Path) -> Result<()> {
    let records: Vec<Record> = pairs.iter().map(Record::from_pair).collect();
    let sidecar = Sidecar {
        version: RECORD_VERSION,
        kind: FileKind::Natural,
        world: *world.config(),
        scene: cfg.scene,
        scene_seed: scene_seed(cfg.seed),
        n_scenes: cfg.n_scenes,
        stats: DatasetStats::from_pairs(pairs),
    };
    write_records(path, &records, &sidecar)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn world() -> World {
        World::new(WorldConfig::default()).unwrap()
    }

    fn scene_with(world: &World, id: usize, entities: Vec<Entity>) -> Scene {
        let mut s = world.scene(&SceneParams::default(), 0, id);
        s.entities = entities;
        s
    }

    #[test]
    fn taxonomy_examples() {
        let e = |visible, sounding| Entity { entity_id: 0, visible, sounding };
        assert_eq!(
            classify_entity(&e(true, true), EntityKind::Object).unwrap(),
            EntityCategory::InViewSoundSource
        );
        assert_eq!(
            classify_entity(&e(true, false), EntityKind::Object).unwrap(),
            EntityCategory::InViewSilentObject
        );
        assert_eq!(
            classify_entity(&e(false, true), EntityKind::Object).unwrap(),
            EntityCategory::OutOfViewSoundSource
        );
        assert_eq!(
            classify_entity(&e(true, true), EntityKind::PureSound).unwrap(),
            EntityCategory::InViewSound
        );
        assert_eq!(
            classify_entity(&e(false, true), EntityKind::PureSound).unwrap(),
            EntityCategory::OutOfViewSound
        );
        assert!(classify_entity(&e(false, false), EntityKind::Object).is_err());
        assert!(classify_entity(&e(true, false), EntityKind::PureSound).is_err());
    }

    #[test]
    fn answer_table() {
        use EntityCategory::*;
        use QuestionKind::*;
        assert_eq!(answer_for(InViewSoundSource, VisualPresence), Some(Answer::Yes));
        assert_eq!(answer_for(InViewSilentObject, AudioPresence), Some(Answer::No));
        assert_eq!(answer_for(OutOfViewSound, VisualPresence), Some(Answer::No));
        assert_eq!(answer_for(OutOfViewSoundSource, VisualPresence), Some(Answer::No));
        assert_eq!(answer_for(InViewSoundSource, AudioPresence), Some(Answer::Yes));
        assert_eq!(answer_for(InViewSound, AudioPresence), Some(Answer::Yes));
        assert_eq!(answer_for(InViewSilentObject, VisualPresence), None);
        assert_eq!(answer_for(OutOfViewSound, AudioPresence), None);
        assert_eq!(answer_for(InViewSound, VisualPresence), None);
        assert_eq!(answer_for(InViewSoundSource, VisualCaption), None);
    }

    #[test]
    fn prompt_table_round_trip() {
        let w = world();
        for p in 0..w.n_prompts() {
            let (q, e) = w.decode_prompt(p).unwrap();
            assert_eq!(w.prompt_id(q, e), p);
        }
        assert!(w.decode_prompt(w.n_prompts()).is_none());
        assert_eq!(w.vocab(), 8);
        assert_eq!(w.n_prompts(), 15);
    }

    #[test]
    fn matched_visible_only_audio_question_rejects_with_yes() {
        let w = world();
        let s = scene_with(&w, 0, vec![Entity { entity_id: 1, visible: true, sounding: false }]);
        let oracle = WorldOracle { world: &w };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = build_pair(&w, &oracle, &s, &s, QuestionKind::AudioPresence, None, &mut rng).unwrap();
        assert_eq!((p.y_w, p.y_l), (NO, YES));
        assert!(p.matched);
        assert_eq!(p.context.modality_tag, ModalityTag::AudioRelated);
    }

    #[test]
    fn mismatched_heard_but_unseen_visual_question() {
        let w = world();
        let vs = scene_with(&w, 0, vec![Entity { entity_id: 0, visible: true, sounding: false }]);
        let aus = scene_with(&w, 1, vec![Entity { entity_id: 2, visible: true, sounding: true }]);
        let oracle = WorldOracle { world: &w };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = build_pair(&w, &oracle, &vs, &aus, QuestionKind::VisualPresence, Some(Answer::No), &mut rng)
            .unwrap();
        assert_eq!(w.decode_prompt(p.context.prompt_id), Some((QuestionKind::VisualPresence, Some(2))));
        assert_eq!((p.y_w, p.y_l), (NO, YES));
        assert!(!p.matched);
        assert_eq!(p.scene_refs, (0, 1));
    }

    #[test]
    fn identical_entity_sets_still_give_distinct_responses() {
        let w = world();
        let ents = vec![Entity { entity_id: 3, visible: true, sounding: true }];
        let a = scene_with(&w, 0, ents.clone());
        let b = scene_with(&w, 1, ents);
        let oracle = WorldOracle { world: &w };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for q in [
            QuestionKind::VisualPresence,
            QuestionKind::AudioPresence,
            QuestionKind::VisualCaption,
            QuestionKind::AudioCaption,
            QuestionKind::AudiovisualCaption,
        ] {
            let p = build_pair(&w, &oracle, &a, &b, q, None, &mut rng).unwrap();
            assert_ne!(p.y_w, p.y_l, "{q:?}");
        }
    }

    #[test]
    fn no_eligible_entity_is_a_skip() {
        let w = world();
        // Only a visible silent object: never asked as a visual-presence question.
        let s = scene_with(&w, 0, vec![Entity { entity_id: 0, visible: true, sounding: false }]);
        let oracle = WorldOracle { world: &w };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(build_pair(&w, &oracle, &s, &s, QuestionKind::VisualPresence, None, &mut rng).is_none());
    }

    #[test]
    fn features_encode_the_right_modality() {
        let w = world();
        let s = w.scene(&SceneParams::default(), 9, 4);
        let sig_dot = |feat: &[f64], sig: &[f64]| feat.iter().zip(sig).map(|(a, b)| a * b).sum::<f64>();
        for e in &s.entities {
            let heard = sig_dot(&s.audio_feat, &w.audio_signatures[e.entity_id]);
            assert_eq!(heard > 0.5, e.sounding, "audio evidence for {e:?}");
            let seen = sig_dot(&s.visual_feat, &w.visual_signatures[e.entity_id]);
            let visible_object = e.visible && w.kind(e.entity_id) == EntityKind::Object;
            assert_eq!(seen > 0.5, visible_object, "visual evidence for {e:?}");
        }
    }

    #[test]
    fn full_matched_ratio() {
        let w = world();
        let cfg = DatasetConfig { n: 100, matched_ratio: 1.0, ..Default::default() };
        let (pairs, stats) = assemble_dataset(&w, &cfg).unwrap();
        assert_eq!(pairs.len(), 100);
        assert!(pairs.iter().all(|p| p.matched));
        assert_eq!(stats.matched, 100);
    }

    #[test]
    fn infeasible_configs_are_rejected() {
        let w = world();
        let cfg = DatasetConfig { n_scenes: 0, ..Default::default() };
        assert!(matches!(assemble_dataset(&w, &cfg), Err(Error::Config(_))));
        let cfg = DatasetConfig { matched_ratio: 1.5, ..Default::default() };
        assert!(assemble_dataset(&w, &cfg).is_err());
    }

    #[test]
    fn eval_items_are_balanced_and_consistent() {
        let w = world();
        let cfg = EvalSetConfig { n: 400, ..Default::default() };
        let items = generate_eval_items(&w, &cfg).unwrap();
        let yes = items.iter().filter(|s| s.item.ground_truth == Answer::Yes).count();
        assert_eq!(yes, 200);
        let oracle = WorldOracle { world: &w };
        let scenes = w.scenes(&cfg.scene, scene_seed(cfg.seed), cfg.n_scenes);
        for s in &items {
            let (q, e) = w.decode_prompt(s.item.context.prompt_id).unwrap();
            assert_eq!(q, s.item.question_kind);
            let truth = ground_truth(&oracle, &scenes[s.scene_refs.0], &scenes[s.scene_refs.1], q, e);
            assert_eq!(truth, Some(s.item.ground_truth.response_id()));
            match s.item.task_group {
                TaskGroup::AdvHallucination => assert_eq!(q, QuestionKind::VisualPresence),
                TaskGroup::VdaHallucination => assert_eq!(q, QuestionKind::AudioPresence),
                TaskGroup::Matching => assert!(!s.matched),
                TaskGroup::Dominance => assert!(is_cross_modal_conflict(
                    &oracle,
                    &scenes[s.scene_refs.0],
                    &scenes[s.scene_refs.1],
                    q,
                    e.unwrap(),
                    s.item.ground_truth
                )),
            }
        }
    }

    #[test]
    fn natural_corpus_is_matched_and_truthful() {
        let w = world();
        let cfg = NaturalCorpusConfig { n: 200, ..Default::default() };
        let pairs = natural_corpus(&w, &cfg).unwrap();
        assert_eq!(pairs.len(), 200);
        assert!(pairs.iter().all(|p| p.matched && p.y_w != p.y_l));
    }
}
