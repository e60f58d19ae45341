//! Train/test manifests for the domain-shift protocols.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::scene::{Action, Context, SceneSpec, Species, Viewpoint, MAX_FRAMES, MIN_FRAMES, NUM_ACTIONS};
use super::DatagenError;
use crate::numerics::Rng;
use crate::TaskMode;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProtocolKind {
    CrossSpecies,
    CrossView,
    CrossContext,
    InDomain,
}

impl ProtocolKind {
    pub fn name(self) -> &'static str {
        match self {
            ProtocolKind::CrossSpecies => "cross_species",
            ProtocolKind::CrossView => "cross_view",
            ProtocolKind::CrossContext => "cross_context",
            ProtocolKind::InDomain => "in_domain",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [ProtocolKind::CrossSpecies, ProtocolKind::CrossView, ProtocolKind::CrossContext, ProtocolKind::InDomain]
            .into_iter()
            .find(|k| k.name() == s)
    }
}

/// Allowed values of each domain axis for one split.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainSet {
    pub species: Vec<Species>,
    pub viewpoints: Vec<Viewpoint>,
    pub contexts: Vec<Context>,
}

impl DomainSet {
    pub fn new(species: &[Species], viewpoints: &[Viewpoint], contexts: &[Context]) -> Self {
        DomainSet { species: species.to_vec(), viewpoints: viewpoints.to_vec(), contexts: contexts.to_vec() }
    }

    fn check(&self, what: &str) -> Result<(), DatagenError> {
        if self.species.is_empty() || self.viewpoints.is_empty() || self.contexts.is_empty() {
            return Err(DatagenError::ImpossibleSplit(format!("{what} split has an empty domain axis")));
        }
        Ok(())
    }
}

/// Per-species action distribution used when sampling labels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", deny_unknown_fields)]
pub enum Imbalance {
    Uniform,
    /// Each species gets `softmax(strength * z)` over actions, `z` standard
    /// normal drawn from a stream keyed by `seed` and the species name.
    Skewed { strength: f64, seed: u64 },
}

impl Imbalance {
    pub fn profile(&self, species: Species) -> [f64; NUM_ACTIONS] {
        match self {
            Imbalance::Uniform => [1.0 / NUM_ACTIONS as f64; NUM_ACTIONS],
            Imbalance::Skewed { strength, seed } => {
                let mut r = Rng::new(*seed).split("imbalance").split(species.name());
                let logits: Vec<f64> = (0..NUM_ACTIONS).map(|_| strength * r.normal()).collect();
                let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
                let total: f64 = exps.iter().sum();
                let mut out = [0.0; NUM_ACTIONS];
                for (o, e) in out.iter_mut().zip(exps) {
                    *o = e / total;
                }
                out
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProtocolSpec {
    pub kind: ProtocolKind,
    pub train_domains: DomainSet,
    pub test_domains: DomainSet,
    /// Clips per value of the protocol's domain axis.
    pub train_per_domain: usize,
    pub test_per_domain: usize,
    pub min_frames: usize,
    pub max_frames: usize,
    pub imbalance: Imbalance,
    pub seed: u64,
}

impl ProtocolSpec {
    fn base(kind: ProtocolKind, train: DomainSet, test: DomainSet) -> Self {
        ProtocolSpec {
            kind,
            train_domains: train,
            test_domains: test,
            train_per_domain: 20,
            test_per_domain: 10,
            min_frames: 16,
            max_frames: 16,
            imbalance: Imbalance::Uniform,
            seed: 0,
        }
    }

    pub fn cross_species(train: &[Species], test: &[Species]) -> Self {
        let v = [Viewpoint::ThirdPerson];
        let c = [Context::Plain];
        Self::base(ProtocolKind::CrossSpecies, DomainSet::new(train, &v, &c), DomainSet::new(test, &v, &c))
    }

    /// Train on third-person clips and test on ego clips, or the reverse.
    pub fn cross_view(reverse: bool) -> Self {
        let (a, b) = if reverse { (Viewpoint::Ego, Viewpoint::ThirdPerson) } else { (Viewpoint::ThirdPerson, Viewpoint::Ego) };
        let c = [Context::Plain];
        Self::base(ProtocolKind::CrossView, DomainSet::new(Species::ALL, &[a], &c), DomainSet::new(Species::ALL, &[b], &c))
    }

    pub fn cross_context(train: &[Context], test: &[Context]) -> Self {
        let v = [Viewpoint::ThirdPerson];
        Self::base(ProtocolKind::CrossContext, DomainSet::new(Species::ALL, &v, train), DomainSet::new(Species::ALL, &v, test))
    }

    pub fn in_domain(species: &[Species]) -> Self {
        let d = DomainSet::new(species, &[Viewpoint::ThirdPerson], &[Context::Plain]);
        Self::base(ProtocolKind::InDomain, d.clone(), d)
    }

    pub fn with_counts(mut self, train_per_domain: usize, test_per_domain: usize) -> Self {
        self.train_per_domain = train_per_domain;
        self.test_per_domain = test_per_domain;
        self
    }

    pub fn with_frames(mut self, min: usize, max: usize) -> Self {
        self.min_frames = min;
        self.max_frames = max;
        self
    }

    pub fn with_imbalance(mut self, imbalance: Imbalance) -> Self {
        self.imbalance = imbalance;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    fn axis_len(&self, set: &DomainSet) -> usize {
        match self.kind {
            ProtocolKind::CrossSpecies | ProtocolKind::InDomain => set.species.len(),
            ProtocolKind::CrossView => set.viewpoints.len(),
            ProtocolKind::CrossContext => set.contexts.len(),
        }
    }

    fn validate(&self) -> Result<(), DatagenError> {
        fn disjoint<T: PartialEq>(a: &[T], b: &[T]) -> bool {
            a.iter().all(|x| !b.contains(x))
        }
        self.train_domains.check("train")?;
        self.test_domains.check("test")?;
        if self.train_per_domain == 0 || self.test_per_domain == 0 {
            return Err(DatagenError::ImpossibleSplit("counts must be at least 1 per domain".into()));
        }
        if self.min_frames < MIN_FRAMES || self.max_frames > MAX_FRAMES || self.min_frames > self.max_frames {
            return Err(DatagenError::InvalidSpec(format!(
                "frame range [{}, {}] outside [{MIN_FRAMES}, {MAX_FRAMES}]",
                self.min_frames, self.max_frames
            )));
        }
        let (tr, te) = (&self.train_domains, &self.test_domains);
        let ok = match self.kind {
            ProtocolKind::CrossSpecies => disjoint(&tr.species, &te.species),
            ProtocolKind::CrossView => disjoint(&tr.viewpoints, &te.viewpoints),
            ProtocolKind::CrossContext => disjoint(&tr.contexts, &te.contexts),
            ProtocolKind::InDomain => tr == te,
        };
        if !ok {
            return Err(DatagenError::ImpossibleSplit(format!(
                "{}: train and test domains must be {}",
                self.kind.name(),
                if self.kind == ProtocolKind::InDomain { "identical" } else { "disjoint along the protocol axis" }
            )));
        }
        Ok(())
    }

    /// Total clips across train, out-of-domain test and in-domain test.
    pub fn total_clips(&self) -> usize {
        self.train_per_domain * self.axis_len(&self.train_domains)
            + self.test_per_domain * self.axis_len(&self.test_domains)
            + self.test_per_domain * self.axis_len(&self.train_domains)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub id: String,
    pub scene: SceneSpec,
    pub labels: Vec<Action>,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub name: String,
    pub task_mode: TaskMode,
    pub entries: Vec<ManifestEntry>,
    /// Label counts per species, indexed by action.
    pub class_counts: BTreeMap<Species, [usize; NUM_ACTIONS]>,
}

impl DatasetManifest {
    pub fn new(name: impl Into<String>, task_mode: TaskMode, entries: Vec<ManifestEntry>) -> Self {
        let mut m = DatasetManifest { name: name.into(), task_mode, entries, class_counts: BTreeMap::new() };
        m.class_counts = m.count_classes();
        m
    }

    fn count_classes(&self) -> BTreeMap<Species, [usize; NUM_ACTIONS]> {
        let mut counts = BTreeMap::new();
        for e in &self.entries {
            let row = counts.entry(e.scene.species).or_insert([0; NUM_ACTIONS]);
            for a in &e.labels {
                row[a.index()] += 1;
            }
        }
        counts
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn validate(&self) -> Result<(), DatagenError> {
        let mut seen = BTreeSet::new();
        for e in &self.entries {
            if !seen.insert(&e.id) {
                return Err(DatagenError::InvalidManifest(format!("duplicate clip id {}", e.id)));
            }
            if e.labels != e.scene.labels() {
                return Err(DatagenError::InvalidManifest(format!("labels of {} disagree with its scene", e.id)));
            }
            e.scene.validate()?;
        }
        if self.class_counts != self.count_classes() {
            return Err(DatagenError::InvalidManifest("class counts disagree with entries".into()));
        }
        Ok(())
    }

    pub fn species(&self) -> BTreeSet<Species> {
        self.entries.iter().map(|e| e.scene.species).collect()
    }

    pub fn viewpoints(&self) -> BTreeSet<Viewpoint> {
        self.entries.iter().map(|e| e.scene.viewpoint).collect()
    }

    pub fn contexts(&self) -> BTreeSet<Context> {
        self.entries.iter().map(|e| e.scene.context).collect()
    }

    /// Entries whose species is `s`, as a manifest of its own.
    pub fn restrict_species(&self, s: Species) -> DatasetManifest {
        let entries = self.entries.iter().filter(|e| e.scene.species == s).cloned().collect();
        DatasetManifest::new(format!("{}[{}]", self.name, s), self.task_mode, entries)
    }
}

/// The three manifests a protocol produces. `test_in_domain` holds fresh clips
/// drawn from the training domains.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProtocolSplits {
    pub spec: ProtocolSpec,
    pub train: DatasetManifest,
    pub test: DatasetManifest,
    pub test_in_domain: DatasetManifest,
}

fn draw_split(spec: &ProtocolSpec, root: &Rng, tag: &str, domains: &DomainSet, per_domain: usize, split: Split) -> Vec<ManifestEntry> {
    let axis: Vec<String> = match spec.kind {
        ProtocolKind::CrossSpecies | ProtocolKind::InDomain => domains.species.iter().map(|s| s.to_string()).collect(),
        ProtocolKind::CrossView => domains.viewpoints.iter().map(|s| s.to_string()).collect(),
        ProtocolKind::CrossContext => domains.contexts.iter().map(|s| s.to_string()).collect(),
    };
    let mut entries = Vec::with_capacity(axis.len() * per_domain);
    for (d, value) in axis.iter().enumerate() {
        for i in 0..per_domain {
            let id = format!("{}-{tag}-{value}-{i:04}", spec.kind.name());
            let mut r = root.split(&id);
            let pick = |r: &mut Rng, n: usize| r.below(n);
            let species = match spec.kind {
                ProtocolKind::CrossSpecies | ProtocolKind::InDomain => domains.species[d],
                _ => domains.species[pick(&mut r, domains.species.len())],
            };
            let viewpoint = match spec.kind {
                ProtocolKind::CrossView => domains.viewpoints[d],
                _ => domains.viewpoints[pick(&mut r, domains.viewpoints.len())],
            };
            let context = match spec.kind {
                ProtocolKind::CrossContext => domains.contexts[d],
                _ => domains.contexts[pick(&mut r, domains.contexts.len())],
            };
            let profile = spec.imbalance.profile(species);
            let u = r.uniform();
            let mut acc = 0.0;
            let mut action = Action::ALL[NUM_ACTIONS - 1];
            for (k, p) in profile.iter().enumerate() {
                acc += p;
                if u < acc {
                    action = Action::ALL[k];
                    break;
                }
            }
            let frames = spec.min_frames + r.below(spec.max_frames - spec.min_frames + 1);
            let scene = SceneSpec::new(action, species, viewpoint, context, frames, r.next_u64());
            entries.push(ManifestEntry { id, labels: scene.labels(), scene, split });
        }
    }
    entries
}

pub fn make_protocol(spec: &ProtocolSpec) -> Result<ProtocolSplits, DatagenError> {
    spec.validate()?;
    let root = Rng::new(spec.seed).split("protocol");
    let name = spec.kind.name();
    let train = draw_split(spec, &root, "train", &spec.train_domains, spec.train_per_domain, Split::Train);
    let test = draw_split(spec, &root, "test", &spec.test_domains, spec.test_per_domain, Split::Test);
    let test_in = draw_split(spec, &root, "test_in", &spec.train_domains, spec.test_per_domain, Split::Test);
    Ok(ProtocolSplits {
        spec: spec.clone(),
        train: DatasetManifest::new(format!("{name}/train"), TaskMode::SingleLabel, train),
        test: DatasetManifest::new(format!("{name}/test"), TaskMode::SingleLabel, test),
        test_in_domain: DatasetManifest::new(format!("{name}/test_in"), TaskMode::SingleLabel, test_in),
    })
}

/// Give a fraction `rate` of clips a second sprite with an independent action.
/// Any `rate > 0` switches the manifest to multi-label.
pub fn multi_label_variant(manifest: &DatasetManifest, rate: f64, seed: u64) -> Result<DatasetManifest, DatagenError> {
    if !(0.0..=1.0).contains(&rate) {
        return Err(DatagenError::InvalidSpec(format!("pair rate {rate} outside [0, 1]")));
    }
    if rate == 0.0 {
        return Ok(manifest.clone());
    }
    let root = Rng::new(seed).split("multi-label");
    let entries = manifest
        .entries
        .iter()
        .map(|e| {
            let mut r = root.split(&e.id);
            let mut e = e.clone();
            if r.uniform() < rate {
                e.scene.partner = Some(Action::ALL[r.below(NUM_ACTIONS)]);
                e.labels = e.scene.labels();
            }
            e
        })
        .collect();
    Ok(DatasetManifest::new(format!("{}+pairs", manifest.name), TaskMode::MultiLabel, entries))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cross_species_keeps_test_shapes_out_of_train() {
        let spec = ProtocolSpec::cross_species(&[Species::Circle, Species::Square], &[Species::Triangle]).with_counts(5, 4);
        let p = make_protocol(&spec).unwrap();
        assert!(!p.train.species().contains(&Species::Triangle));
        assert_eq!(p.test.species().into_iter().collect::<Vec<_>>(), vec![Species::Triangle]);
        assert_eq!(p.train.len() + p.test.len() + p.test_in_domain.len(), spec.total_clips());
        assert_eq!(spec.total_clips(), 10 + 4 + 8);
    }

    #[test]
    fn overlapping_species_is_impossible() {
        let spec = ProtocolSpec::cross_species(&[Species::Circle], &[Species::Circle]);
        assert!(matches!(make_protocol(&spec), Err(DatagenError::ImpossibleSplit(_))));
        let spec = ProtocolSpec::cross_species(&[], &[Species::Circle]);
        assert!(make_protocol(&spec).is_err());
    }

    #[test]
    fn cross_view_and_reverse() {
        let fwd = make_protocol(&ProtocolSpec::cross_view(false).with_counts(3, 3)).unwrap();
        assert_eq!(fwd.train.viewpoints().into_iter().collect::<Vec<_>>(), vec![Viewpoint::ThirdPerson]);
        assert_eq!(fwd.test.viewpoints().into_iter().collect::<Vec<_>>(), vec![Viewpoint::Ego]);
        let rev = make_protocol(&ProtocolSpec::cross_view(true).with_counts(3, 3)).unwrap();
        assert_eq!(rev.train.viewpoints().into_iter().collect::<Vec<_>>(), vec![Viewpoint::Ego]);
    }

    #[test]
    fn cross_context_disjoint_backgrounds() {
        let spec = ProtocolSpec::cross_context(&[Context::Plain, Context::Gradient], &[Context::Textured]).with_counts(4, 4);
        let p = make_protocol(&spec).unwrap();
        assert!(p.train.contexts().is_disjoint(&p.test.contexts()));
        assert_eq!(p.test_in_domain.contexts(), p.train.contexts());
    }

    #[test]
    fn manifests_validate_and_ids_unique() {
        let p = make_protocol(&ProtocolSpec::in_domain(Species::ALL).with_counts(6, 2).with_frames(8, 20)).unwrap();
        for m in [&p.train, &p.test, &p.test_in_domain] {
            m.validate().unwrap();
        }
        let mut bad = p.train.clone();
        bad.entries[1].id = bad.entries[0].id.clone();
        assert!(bad.validate().is_err());
    }

    #[test]
    fn multi_label_rates() {
        let p = make_protocol(&ProtocolSpec::in_domain(&[Species::Star]).with_counts(20, 1)).unwrap();
        assert_eq!(multi_label_variant(&p.train, 0.0, 1).unwrap(), p.train);
        let all = multi_label_variant(&p.train, 1.0, 1).unwrap();
        assert_eq!(all.task_mode, TaskMode::MultiLabel);
        for e in &all.entries {
            let n = e.labels.len();
            let expected = if e.scene.partner == Some(e.scene.action) { 1 } else { 2 };
            assert_eq!(n, expected);
        }
        all.validate().unwrap();
        assert!(multi_label_variant(&p.train, 1.5, 1).is_err());
    }

    #[test]
    fn skewed_profiles_are_distributions_and_stable() {
        let imb = Imbalance::Skewed { strength: 1.0, seed: 3 };
        let a = imb.profile(Species::Star);
        assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(a, imb.profile(Species::Star));
        assert_ne!(a, imb.profile(Species::Circle));
    }
}
