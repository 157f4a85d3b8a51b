//! Class vocabulary, the four-level cell hierarchy and cross-model class maps.
//!
//! Class ids are dense, start at 0 (`background`) and follow the canonical
//! roster order. Every tie in the crate is broken by ascending [`ClassId`].

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::Path;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const BUILTIN_JSON: &str = include_str!("taxonomy.json");

/// Dense class identifier.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ClassId(pub u8);

impl ClassId {
    pub const BACKGROUND: ClassId = ClassId(0);
    pub const STROMA: ClassId = ClassId(1);
    pub const SMOOTH_MUSCLE: ClassId = ClassId(2);
    pub const EPITHELIAL_TISSUE: ClassId = ClassId(3);
    pub const LEUKOCYTE: ClassId = ClassId(4);
    pub const ENDOTHELIAL: ClassId = ClassId(5);
    pub const RED_BLOOD_CELL: ClassId = ClassId(6);
    pub const LYMPHOCYTE: ClassId = ClassId(7);
    pub const PLASMA_CELL: ClassId = ClassId(8);
    pub const MYELOID_CELL: ClassId = ClassId(9);
    pub const EOSINOPHIL: ClassId = ClassId(10);
    pub const NEUTROPHIL: ClassId = ClassId(11);
    pub const EPITHELIAL_CELL_NUCLEUS: ClassId = ClassId(12);
    pub const FIBROBLAST: ClassId = ClassId(13);
    pub const MITOTIC_CELL: ClassId = ClassId(14);

    /// Number of classes in the built-in roster.
    pub const BUILTIN_COUNT: usize = 15;

    /// Leukocyte subtypes used by force-mode reassignment (hierarchy levels 3 and 4).
    pub const LEUKOCYTE_SUBTYPES: [ClassId; 5] = [
        ClassId::LYMPHOCYTE,
        ClassId::PLASMA_CELL,
        ClassId::MYELOID_CELL,
        ClassId::EOSINOPHIL,
        ClassId::NEUTROPHIL,
    ];

    #[inline]
    pub fn index(self) -> usize {
        self.0 as usize
    }

    /// Canonical name in the built-in taxonomy, or `class_<id>` for extension ids.
    pub fn name(self) -> String {
        Taxonomy::builtin()
            .name_of(self)
            .map(str::to_owned)
            .unwrap_or_else(|| format!("class_{}", self.0))
    }
}

impl fmt::Display for ClassId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match Taxonomy::builtin().name_of(*self) {
            Some(name) => f.write_str(name),
            None => write!(f, "class_{}", self.0),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassInfo {
    pub id: u8,
    pub name: String,
    pub abbreviation: String,
    #[serde(default)]
    pub aliases: Vec<String>,
}

/// Ordered hierarchy levels; within a level, list order is the tie-break order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Hierarchy {
    levels: Vec<Vec<ClassId>>,
}

impl Hierarchy {
    pub const LEVELS: usize = 4;

    pub fn new(levels: Vec<Vec<ClassId>>) -> Result<Self> {
        if levels.len() != Self::LEVELS {
            return Err(Error::InvalidTaxonomy(format!(
                "hierarchy must have {} levels, found {}",
                Self::LEVELS,
                levels.len()
            )));
        }
        let mut seen = std::collections::HashSet::new();
        for (i, level) in levels.iter().enumerate() {
            if level.is_empty() {
                return Err(Error::InvalidTaxonomy(format!("hierarchy level {} is empty", i + 1)));
            }
            for c in level {
                if !seen.insert(*c) {
                    return Err(Error::InvalidTaxonomy(format!(
                        "class {} appears in more than one hierarchy slot",
                        c.0
                    )));
                }
            }
        }
        Ok(Hierarchy { levels })
    }

    pub fn levels(&self) -> &[Vec<ClassId>] {
        &self.levels
    }

    /// 1-based level containing `c`.
    pub fn level_of(&self, c: ClassId) -> Option<usize> {
        self.levels.iter().position(|l| l.contains(&c)).map(|i| i + 1)
    }

    /// All hierarchy classes in level order.
    pub fn classes(&self) -> impl Iterator<Item = ClassId> + '_ {
        self.levels.iter().flatten().copied()
    }
}

#[derive(Deserialize, Serialize)]
struct TaxonomyDoc {
    #[serde(default)]
    schema_version: u32,
    classes: Vec<ClassInfo>,
    hierarchy: Vec<Vec<String>>,
}

/// The closed class vocabulary plus hierarchy. Immutable once built.
#[derive(Clone, Debug)]
pub struct Taxonomy {
    classes: Vec<ClassInfo>,
    lookup: HashMap<String, ClassId>,
    hierarchy: Hierarchy,
}

fn normalize(name: &str) -> String {
    name.trim()
        .to_ascii_lowercase()
        .chars()
        .map(|c| if c == ' ' || c == '-' { '_' } else { c })
        .collect()
}

impl Taxonomy {
    /// The embedded default taxonomy.
    pub fn builtin() -> &'static Taxonomy {
        static BUILTIN: OnceLock<Taxonomy> = OnceLock::new();
        BUILTIN.get_or_init(|| Taxonomy::from_json(BUILTIN_JSON).expect("embedded taxonomy is valid"))
    }

    pub fn builtin_json() -> &'static str {
        BUILTIN_JSON
    }

    pub fn from_path(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    /// Parses and validates a taxonomy document.
    ///
    /// Extension taxonomies must keep the built-in roster at its canonical
    /// ids (the pipeline addresses those classes directly) and may append
    /// further classes or reshape the hierarchy.
    pub fn from_json(text: &str) -> Result<Self> {
        let doc: TaxonomyDoc = serde_json::from_str(text)?;
        if doc.classes.is_empty() {
            return Err(Error::InvalidTaxonomy("no classes".into()));
        }
        if doc.classes.len() > u8::MAX as usize + 1 {
            return Err(Error::InvalidTaxonomy("more than 256 classes".into()));
        }
        let mut classes = doc.classes;
        classes.sort_by_key(|c| c.id);
        for (i, c) in classes.iter().enumerate() {
            if c.id as usize != i {
                return Err(Error::InvalidTaxonomy(format!(
                    "class ids must be dense from 0; expected id {i}, found {}",
                    c.id
                )));
            }
        }
        if normalize(&classes[0].name) != "background" {
            return Err(Error::InvalidTaxonomy("id 0 is reserved for `background`".into()));
        }

        let mut lookup = HashMap::new();
        for c in &classes {
            let id = ClassId(c.id);
            for key in std::iter::once(&c.name)
                .chain(std::iter::once(&c.abbreviation))
                .chain(c.aliases.iter())
            {
                let key = normalize(key);
                if key.is_empty() {
                    continue;
                }
                if let Some(prev) = lookup.insert(key.clone(), id) {
                    if prev != id {
                        return Err(Error::InvalidTaxonomy(format!(
                            "name `{key}` refers to both class {} and class {}",
                            prev.0, id.0
                        )));
                    }
                }
            }
        }

        let mut levels = Vec::with_capacity(doc.hierarchy.len());
        for level in &doc.hierarchy {
            let mut ids = Vec::with_capacity(level.len());
            for name in level {
                let id = lookup.get(&normalize(name)).copied().ok_or_else(|| {
                    Error::InvalidTaxonomy(format!("hierarchy names unknown class `{name}`"))
                })?;
                ids.push(id);
            }
            levels.push(ids);
        }
        let hierarchy = Hierarchy::new(levels)?;

        let tax = Taxonomy { classes, lookup, hierarchy };
        tax.check_builtin_roster()?;
        Ok(tax)
    }

    fn check_builtin_roster(&self) -> Result<()> {
        const CANONICAL: [&str; ClassId::BUILTIN_COUNT] = [
            "background",
            "stroma",
            "smooth_muscle",
            "epithelial_tissue",
            "leukocyte",
            "endothelial",
            "red_blood_cell",
            "lymphocyte",
            "plasma_cell",
            "myeloid_cell",
            "eosinophil",
            "neutrophil",
            "epithelial_cell_nucleus",
            "fibroblast",
            "mitotic_cell",
        ];
        for (id, name) in CANONICAL.iter().enumerate() {
            match self.classes.get(id) {
                Some(c) if normalize(&c.name) == *name => {}
                Some(c) => {
                    return Err(Error::InvalidTaxonomy(format!(
                        "id {id} must be `{name}`, found `{}`",
                        c.name
                    )))
                }
                None => return Err(Error::InvalidTaxonomy(format!("missing canonical class `{name}`"))),
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn classes(&self) -> &[ClassInfo] {
        &self.classes
    }

    pub fn ids(&self) -> impl Iterator<Item = ClassId> + '_ {
        self.classes.iter().map(|c| ClassId(c.id))
    }

    pub fn hierarchy(&self) -> &Hierarchy {
        &self.hierarchy
    }

    pub fn contains(&self, c: ClassId) -> bool {
        c.index() < self.classes.len()
    }

    /// Case-insensitive lookup by name, abbreviation or alias.
    pub fn resolve(&self, name: &str) -> Result<ClassId> {
        self.lookup.get(&normalize(name)).copied().ok_or_else(|| Error::UnknownClass {
            name: name.to_owned(),
            vocabulary: self.classes.iter().map(|c| c.name.as_str()).collect::<Vec<_>>().join(", "),
        })
    }

    pub fn name_of(&self, c: ClassId) -> Option<&str> {
        self.classes.get(c.index()).map(|c| c.name.as_str())
    }

    pub fn abbreviation_of(&self, c: ClassId) -> Option<&str> {
        self.classes.get(c.index()).map(|c| c.abbreviation.as_str())
    }

    pub fn level_of(&self, c: ClassId) -> Option<usize> {
        self.hierarchy.level_of(c)
    }

    pub fn to_json(&self) -> String {
        let doc = TaxonomyDoc {
            schema_version: 1,
            classes: self.classes.clone(),
            hierarchy: self
                .hierarchy
                .levels()
                .iter()
                .map(|l| l.iter().map(|c| self.classes[c.index()].name.clone()).collect())
                .collect(),
        };
        serde_json::to_string_pretty(&doc).expect("taxonomy serializes")
    }
}

/// Source-class to evaluation-class association used when comparing models
/// with different class definitions. `None` marks an unmapped class.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClassMap {
    table: Vec<Option<ClassId>>,
}

#[derive(Deserialize)]
struct ClassMapDoc {
    #[serde(default)]
    default: Option<String>,
    #[serde(default)]
    map: BTreeMap<String, Option<String>>,
}

impl ClassMap {
    pub fn identity(tax: &Taxonomy) -> Self {
        ClassMap { table: tax.ids().map(Some).collect() }
    }

    /// Builds a map from an explicit table indexed by source class id.
    ///
    /// The table must be idempotent: every evaluation class maps to itself.
    pub fn new(table: Vec<Option<ClassId>>) -> Result<Self> {
        for (src, dst) in table.iter().enumerate() {
            if let Some(dst) = dst {
                match table.get(dst.index()) {
                    Some(Some(back)) if back == dst => {}
                    _ => {
                        return Err(Error::InvalidClassMap(format!(
                            "class {src} maps to {dst}, but {dst} does not map to itself"
                        )))
                    }
                }
            }
        }
        Ok(ClassMap { table })
    }

    /// Parses `{"default": "identity"|"unmapped", "map": {"src": "dst"|null}}`.
    ///
    /// Without a `default`, every class of the taxonomy must be listed.
    pub fn from_json(text: &str, tax: &Taxonomy) -> Result<Self> {
        let doc: ClassMapDoc = serde_json::from_str(text)?;
        let mut table: Vec<Option<Option<ClassId>>> = vec![None; tax.len()];
        for (src, dst) in &doc.map {
            let src = tax.resolve(src)?;
            let dst = match dst {
                Some(d) => Some(tax.resolve(d)?),
                None => None,
            };
            table[src.index()] = Some(dst);
        }
        let default = doc.default.as_deref().map(normalize);
        let mut missing = Vec::new();
        let table = table
            .into_iter()
            .enumerate()
            .map(|(i, entry)| match entry {
                Some(v) => v,
                None => match default.as_deref() {
                    Some("identity") => Some(ClassId(i as u8)),
                    Some("unmapped") => None,
                    _ => {
                        missing.push(tax.classes()[i].name.clone());
                        None
                    }
                },
            })
            .collect();
        if let Some(d) = default.as_deref() {
            if d != "identity" && d != "unmapped" {
                return Err(Error::InvalidClassMap(format!(
                    "default must be `identity` or `unmapped`, found `{d}`"
                )));
            }
        }
        if !missing.is_empty() {
            return Err(Error::InvalidClassMap(format!(
                "map is not total; unlisted classes: {}",
                missing.join(", ")
            )));
        }
        ClassMap::new(table)
    }

    pub fn from_path(path: impl AsRef<Path>, tax: &Taxonomy) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text, tax)
    }

    /// Maps a source class. Classes beyond the table are unmapped.
    #[inline]
    pub fn apply(&self, c: ClassId) -> Option<ClassId> {
        self.table.get(c.index()).copied().flatten()
    }

    /// Evaluation classes (the image of the map), ascending.
    pub fn targets(&self) -> Vec<ClassId> {
        let mut t: Vec<ClassId> = self.table.iter().flatten().copied().collect();
        t.sort();
        t.dedup();
        t
    }

    pub fn len(&self) -> usize {
        self.table.len()
    }

    pub fn is_empty(&self) -> bool {
        self.table.is_empty()
    }
}
