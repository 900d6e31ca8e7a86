//! Dataset manifest: factual/counterfactual image pairs with annotations.
//!
//! The manifest is a single JSON document. Image and mask paths are relative
//! to the manifest's directory.
//!
//! ```json
//! {
//!   "version": "1",
//!   "image_width": 480,
//!   "image_height": 480,
//!   "instances": [{
//!     "id": "parrot-01", "category": "birds",
//!     "subject_name": "parrot", "neutral_name": "bird", "attribute_name": "leg",
//!     "canonical_count": 2, "counterfactual_count": 3,
//!     "factual_image": "img/parrot-01.png", "cf_image": "img/parrot-01-cf.png",
//!     "annotation": { "mask": "mask/parrot-01.png", "bbox": [120, 300, 260, 420] },
//!     "shuffle_seed": 17
//!   }]
//! }
//! ```

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::region::{BBox, BinaryMask, RegionAnnotation};

pub const DEFAULT_IMAGE_SIZE: u32 = 480;

#[derive(Debug, Error)]
pub enum ManifestError {
    #[error("failed to read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed manifest: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("invalid manifest: {0}")]
    Manifest(String),
    #[error("instance {id}: {violation}")]
    Instance { id: String, violation: String },
    #[error("instance {id}: missing {what} file {}", path.display())]
    MissingFile {
        id: String,
        what: &'static str,
        path: PathBuf,
    },
}

/// The ten object categories, declared in report column order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    Birds,
    BugsInsects,
    CurrencySymbols,
    FunctionalObjects,
    Housing,
    Mammals,
    Landmarks,
    Transportation,
    SeaCreatures,
    Food,
}

impl Category {
    pub const ALL: [Category; 10] = [
        Category::Birds,
        Category::BugsInsects,
        Category::CurrencySymbols,
        Category::FunctionalObjects,
        Category::Housing,
        Category::Mammals,
        Category::Landmarks,
        Category::Transportation,
        Category::SeaCreatures,
        Category::Food,
    ];

    /// Column header used in report tables.
    pub fn short_name(self) -> &'static str {
        match self {
            Category::Birds => "Birds",
            Category::BugsInsects => "Bugs",
            Category::CurrencySymbols => "Curr.",
            Category::FunctionalObjects => "Func.",
            Category::Housing => "Hous.",
            Category::Mammals => "Mamm.",
            Category::Landmarks => "Land.",
            Category::Transportation => "Trans.",
            Category::SeaCreatures => "Sea",
            Category::Food => "Food",
        }
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.short_name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImageKind {
    Factual,
    Counterfactual,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotationRef {
    pub mask: PathBuf,
    pub bbox: BBox,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstanceRecord {
    pub id: String,
    pub category: Category,
    pub subject_name: String,
    pub neutral_name: String,
    /// Singular part name, e.g. "leg".
    pub attribute_name: String,
    /// Plural override for irregular part names; "+s" otherwise.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attribute_plural: Option<String>,
    pub canonical_count: u32,
    pub counterfactual_count: u32,
    pub factual_image: PathBuf,
    pub cf_image: PathBuf,
    pub annotation: AnnotationRef,
    pub shuffle_seed: u64,
}

impl InstanceRecord {
    pub fn attribute_plural(&self) -> String {
        self.attribute_plural
            .clone()
            .unwrap_or_else(|| format!("{}s", self.attribute_name))
    }

    pub fn image(&self, kind: ImageKind) -> &Path {
        match kind {
            ImageKind::Factual => &self.factual_image,
            ImageKind::Counterfactual => &self.cf_image,
        }
    }

    /// The count visible in the given image.
    pub fn expected_count(&self, kind: ImageKind) -> u32 {
        match kind {
            ImageKind::Factual => self.canonical_count,
            ImageKind::Counterfactual => self.counterfactual_count,
        }
    }
}

/// A violated per-instance count invariant.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CountViolation {
    CanonicalCountZero,
    CountsEqual,
}

impl fmt::Display for CountViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CountViolation::CanonicalCountZero => "canonical-count-zero",
            CountViolation::CountsEqual => "counts-equal",
        })
    }
}

pub fn validate_counts(instance: &InstanceRecord) -> Vec<CountViolation> {
    let mut out = Vec::new();
    if instance.canonical_count == 0 {
        out.push(CountViolation::CanonicalCountZero);
    }
    if instance.canonical_count == instance.counterfactual_count {
        out.push(CountViolation::CountsEqual);
    }
    out
}

fn default_size() -> u32 {
    DEFAULT_IMAGE_SIZE
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: String,
    #[serde(default = "default_size")]
    pub image_width: u32,
    #[serde(default = "default_size")]
    pub image_height: u32,
    pub instances: Vec<InstanceRecord>,
    /// Directory relative paths resolve against; set on load.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl Manifest {
    /// Parses a manifest document and checks the schema-level invariants
    /// (sizes, unique ids, counts). Files are not touched.
    pub fn from_json(text: &str, base_dir: impl Into<PathBuf>) -> Result<Self, ManifestError> {
        let mut m: Manifest = serde_json::from_str(text)?;
        m.base_dir = base_dir.into();
        m.check_schema()?;
        Ok(m)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("manifest serializes");
        s.push('\n');
        s
    }

    pub fn resolve(&self, rel: &Path) -> PathBuf {
        self.base_dir.join(rel)
    }

    pub fn get(&self, id: &str) -> Option<&InstanceRecord> {
        self.instances.iter().find(|i| i.id == id)
    }

    /// Loads the instance's mask and bounding box.
    pub fn load_annotation(&self, instance: &InstanceRecord) -> Result<RegionAnnotation, ManifestError> {
        let invalid = |violation: String| ManifestError::Instance {
            id: instance.id.clone(),
            violation,
        };
        let path = self.resolve(&instance.annotation.mask);
        let mask = BinaryMask::load(&path).map_err(|e| invalid(e.to_string()))?;
        if (mask.width(), mask.height()) != (self.image_width, self.image_height) {
            return Err(invalid(format!(
                "mask is {}x{}, expected {}x{}",
                mask.width(),
                mask.height(),
                self.image_width,
                self.image_height
            )));
        }
        RegionAnnotation::new(mask, instance.annotation.bbox).map_err(|e| invalid(e.to_string()))
    }

    pub fn category_histogram(&self) -> BTreeMap<Category, usize> {
        let mut h = BTreeMap::new();
        for inst in &self.instances {
            *h.entry(inst.category).or_default() += 1;
        }
        h
    }

    fn check_schema(&self) -> Result<(), ManifestError> {
        if self.version.trim().is_empty() {
            return Err(ManifestError::Manifest("version must be non-empty".into()));
        }
        if self.image_width == 0 || self.image_height == 0 {
            return Err(ManifestError::Manifest(format!(
                "image size {}x{} must be positive",
                self.image_width, self.image_height
            )));
        }
        let mut seen = HashSet::new();
        for inst in &self.instances {
            if !seen.insert(inst.id.as_str()) {
                return Err(ManifestError::Instance {
                    id: inst.id.clone(),
                    violation: "duplicate id".into(),
                });
            }
            if let Some(v) = validate_counts(inst).first() {
                return Err(ManifestError::Instance {
                    id: inst.id.clone(),
                    violation: v.to_string(),
                });
            }
            let bbox = inst.annotation.bbox;
            if bbox.is_empty() || !bbox.fits(self.image_width, self.image_height) {
                return Err(ManifestError::Instance {
                    id: inst.id.clone(),
                    violation: format!("bbox {:?} is empty or outside the image", <[u32; 4]>::from(bbox)),
                });
            }
        }
        Ok(())
    }

    /// Checks every referenced file: images exist and decode to the declared
    /// size, masks are binary, match the size, and overlap their bbox.
    pub fn check_files(&self) -> Result<(), ManifestError> {
        for inst in &self.instances {
            for (what, rel) in [
                ("factual image", &inst.factual_image),
                ("counterfactual image", &inst.cf_image),
                ("mask", &inst.annotation.mask),
            ] {
                let path = self.resolve(rel);
                if !path.is_file() {
                    return Err(ManifestError::MissingFile {
                        id: inst.id.clone(),
                        what,
                        path,
                    });
                }
            }
            for rel in [&inst.factual_image, &inst.cf_image] {
                let path = self.resolve(rel);
                let dims = image::image_dimensions(&path).map_err(|e| ManifestError::Instance {
                    id: inst.id.clone(),
                    violation: format!("cannot decode {}: {e}", path.display()),
                })?;
                if dims != (self.image_width, self.image_height) {
                    return Err(ManifestError::Instance {
                        id: inst.id.clone(),
                        violation: format!(
                            "{} is {}x{}, expected {}x{}",
                            rel.display(),
                            dims.0,
                            dims.1,
                            self.image_width,
                            self.image_height
                        ),
                    });
                }
            }
            self.load_annotation(inst)?;
        }
        Ok(())
    }
}

/// Reads, parses and fully validates a manifest, including referenced files.
pub fn load_manifest(path: &Path) -> Result<Manifest, ManifestError> {
    let text = std::fs::read_to_string(path).map_err(|source| ManifestError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let manifest = Manifest::from_json(&text, base)?;
    manifest.check_files()?;
    Ok(manifest)
}

pub fn save_manifest(manifest: &Manifest, path: &Path) -> Result<(), ManifestError> {
    std::fs::write(path, manifest.to_json()).map_err(|source| ManifestError::Io {
        path: path.to_path_buf(),
        source,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    pub(crate) fn parrot() -> InstanceRecord {
        InstanceRecord {
            id: "parrot-01".into(),
            category: Category::Birds,
            subject_name: "parrot".into(),
            neutral_name: "bird".into(),
            attribute_name: "leg".into(),
            attribute_plural: None,
            canonical_count: 2,
            counterfactual_count: 3,
            factual_image: "img/parrot.png".into(),
            cf_image: "img/parrot-cf.png".into(),
            annotation: AnnotationRef {
                mask: "mask/parrot.png".into(),
                bbox: BBox::new(10, 10, 40, 40),
            },
            shuffle_seed: 7,
        }
    }

    fn doc(instances: Vec<InstanceRecord>) -> String {
        Manifest {
            version: "1".into(),
            image_width: 480,
            image_height: 480,
            instances,
            base_dir: PathBuf::new(),
        }
        .to_json()
    }

    #[test]
    fn minimal_manifest_parses() {
        let m = Manifest::from_json(&doc(vec![parrot()]), "").unwrap();
        assert_eq!(m.instances.len(), 1);
        assert_eq!(m.image_width, 480);
    }

    #[test]
    fn default_size_applies() {
        let text = r#"{"version":"1","instances":[]}"#;
        let m = Manifest::from_json(text, "").unwrap();
        assert_eq!((m.image_width, m.image_height), (480, 480));
    }

    #[test]
    fn equal_counts_rejected_with_id() {
        let mut p = parrot();
        p.counterfactual_count = 2;
        let err = Manifest::from_json(&doc(vec![p]), "").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("parrot-01") && msg.contains("counts-equal"), "{msg}");
    }

    #[test]
    fn duplicate_ids_rejected() {
        let err = Manifest::from_json(&doc(vec![parrot(), parrot()]), "").unwrap_err();
        assert!(err.to_string().contains("duplicate id"));
    }

    #[test]
    fn unknown_category_is_a_parse_error() {
        let text = doc(vec![parrot()]).replace("\"birds\"", "\"reptiles\"");
        assert!(matches!(Manifest::from_json(&text, ""), Err(ManifestError::Parse(_))));
    }

    #[test]
    fn zero_size_rejected() {
        let text = doc(vec![]).replace("\"image_width\": 480", "\"image_width\": 0");
        assert!(matches!(Manifest::from_json(&text, ""), Err(ManifestError::Manifest(_))));
    }

    #[test]
    fn count_violations() {
        let with = |o, a| {
            let mut p = parrot();
            p.canonical_count = o;
            p.counterfactual_count = a;
            validate_counts(&p)
        };
        assert_eq!(with(2, 4), vec![]);
        assert_eq!(with(0, 2), vec![CountViolation::CanonicalCountZero]);
        assert_eq!(with(3, 3), vec![CountViolation::CountsEqual]);
        assert_eq!(
            with(0, 0),
            vec![CountViolation::CanonicalCountZero, CountViolation::CountsEqual]
        );
    }

    #[test]
    fn garbage_never_panics() {
        for text in ["", "{", "[]", "null", r#"{"version":1}"#, r#"{"version":"1","instances":[{}]}"#] {
            assert!(Manifest::from_json(text, "").is_err());
        }
    }

    #[test]
    fn plural_override() {
        let mut p = parrot();
        assert_eq!(p.attribute_plural(), "legs");
        p.attribute_name = "foot".into();
        p.attribute_plural = Some("feet".into());
        assert_eq!(p.attribute_plural(), "feet");
    }

    fn instance_strategy() -> impl Strategy<Value = InstanceRecord> {
        (
            "[a-z]{1,8}",
            prop::sample::select(Category::ALL.to_vec()),
            1u32..12,
            0u32..12,
            any::<u64>(),
            (0u32..200, 0u32..200, 1u32..200, 1u32..200),
            prop::option::of("[a-z]{2,6}"),
        )
            .prop_filter("counts differ", |(_, _, o, a, ..)| o != a)
            .prop_map(|(name, category, o, a, seed, (x, y, w, h), plural)| InstanceRecord {
                id: format!("{name}-{seed}"),
                category,
                subject_name: name.clone(),
                neutral_name: "object".into(),
                attribute_name: "wheel".into(),
                attribute_plural: plural,
                canonical_count: o,
                counterfactual_count: a,
                factual_image: format!("img/{name}.png").into(),
                cf_image: format!("img/{name}-cf.png").into(),
                annotation: AnnotationRef {
                    mask: format!("mask/{name}.png").into(),
                    bbox: BBox::new(x, y, x + w, y + h),
                },
                shuffle_seed: seed,
            })
    }

    proptest! {
        #[test]
        fn json_round_trip(instances in prop::collection::vec(instance_strategy(), 0..6)) {
            let mut seen = HashSet::new();
            let instances: Vec<_> = instances.into_iter().filter(|i| seen.insert(i.id.clone())).collect();
            let m = Manifest {
                version: "1".into(),
                image_width: 480,
                image_height: 480,
                instances,
                base_dir: PathBuf::from("data"),
            };
            let back = Manifest::from_json(&m.to_json(), "data").unwrap();
            prop_assert_eq!(back, m);
        }

        #[test]
        fn arbitrary_text_never_panics(text in ".{0,200}") {
            let _ = Manifest::from_json(&text, "");
        }
    }
}
