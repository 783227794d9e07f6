//! Interaction logs, knowledge-graph triples, the per-item attribute table
//! and the transH energy used as the knowledge-embedding loss term.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::diff::{ParamId, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// String ids mapped to dense indices in first-seen order.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Vocab {
    names: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get_or_insert(&mut self, name: &str) -> usize {
        if let Some(&id) = self.index.get(name) {
            return id;
        }
        let id = self.names.len();
        self.names.push(name.to_string());
        self.index.insert(name.to_string(), id);
        id
    }

    pub fn id(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn name(&self, id: usize) -> &str {
        &self.names[id]
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Interaction {
    pub user: usize,
    pub item: usize,
    pub timestamp: i64,
}

/// Deduplicated interactions plus the user and item vocabularies.
#[derive(Clone, Debug)]
pub struct InteractionLog {
    pub users: Vocab,
    pub items: Vocab,
    pub interactions: Vec<Interaction>,
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn tsv_fields<'a>(line: &'a str, path: &Path, lineno: usize, want: usize) -> Result<Vec<&'a str>> {
    let fields: Vec<&str> = line.split('\t').map(str::trim).collect();
    if fields.len() != want || fields.iter().any(|f| f.is_empty()) {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            line: lineno,
            msg: format!("expected {want} non-empty tab-separated fields, got {:?}", line),
        });
    }
    Ok(fields)
}

impl InteractionLog {
    /// Reads `user \t item \t timestamp` rows. A first line whose third field
    /// is literally `timestamp` is a header.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::parse(&read_text(path)?, path)
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut users = Vocab::new();
        let mut items = Vocab::new();
        let mut rows: Vec<Option<Interaction>> = Vec::new();
        let mut latest: HashMap<(usize, usize), usize> = HashMap::new();

        for (i, raw) in text.lines().enumerate() {
            let lineno = i + 1;
            let line = raw.trim_end_matches('\r');
            if line.trim().is_empty() {
                continue;
            }
            let f = tsv_fields(line, path, lineno, 3)?;
            if lineno == 1 && f[2].eq_ignore_ascii_case("timestamp") {
                continue;
            }
            let timestamp: i64 = f[2].parse().map_err(|_| Error::Parse {
                path: path.to_path_buf(),
                line: lineno,
                msg: format!("timestamp {:?} is not an integer", f[2]),
            })?;
            let user = users.get_or_insert(f[0]);
            let item = items.get_or_insert(f[1]);
            let record = Interaction { user, item, timestamp };
            match latest.get(&(user, item)) {
                Some(&prev) => {
                    let kept = rows[prev].expect("live duplicate");
                    if timestamp >= kept.timestamp {
                        rows[prev] = None;
                        latest.insert((user, item), rows.len());
                        rows.push(Some(record));
                    }
                }
                None => {
                    latest.insert((user, item), rows.len());
                    rows.push(Some(record));
                }
            }
        }
        let interactions: Vec<Interaction> = rows.into_iter().flatten().collect();
        if interactions.is_empty() {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: 0,
                msg: "no interactions".into(),
            });
        }
        Ok(Self {
            users,
            items,
            interactions,
        })
    }

    /// Interaction count per item, indexed by item id.
    pub fn popularity(&self) -> Vec<usize> {
        let mut counts = vec![0; self.items.len()];
        for r in &self.interactions {
            counts[r.item] += 1;
        }
        counts
    }
}

/// One `(head, relation, tail)` fact. `relation` is the 1-based attribute
/// slot; row 0 of an item representation is the item itself.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Triple {
    pub head: usize,
    pub relation: usize,
    pub tail: usize,
}

/// Per-entity attribute slots. Entities that never appear as a head have
/// all slots empty.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttributeTable {
    m: usize,
    slots: Vec<Vec<Vec<usize>>>,
}

impl AttributeTable {
    pub fn new(m: usize) -> Self {
        Self { m, slots: Vec::new() }
    }

    pub fn attributes(&self) -> usize {
        self.m
    }

    /// Tail entities of attribute `relation` (1-based) for `entity`.
    pub fn values(&self, entity: usize, relation: usize) -> &[usize] {
        debug_assert!(relation >= 1 && relation <= self.m);
        self.slots
            .get(entity)
            .map_or(&[][..], |s| s[relation - 1].as_slice())
    }

    fn attach(&mut self, t: Triple) {
        if self.slots.len() <= t.head {
            self.slots.resize(t.head + 1, vec![Vec::new(); self.m]);
        }
        let slot = &mut self.slots[t.head][t.relation - 1];
        if !slot.contains(&t.tail) {
            slot.push(t.tail);
        }
    }
}

/// Triples with their vocabularies and the attribute table derived from them.
#[derive(Clone, Debug)]
pub struct KnowledgeGraph {
    pub entities: Vocab,
    /// Relation names in slot order; slot `i` (1-based) is `relations[i - 1]`.
    pub relations: Vec<String>,
    pub triples: Vec<Triple>,
    pub attributes: AttributeTable,
}

impl KnowledgeGraph {
    pub fn empty(m: usize) -> Self {
        Self {
            entities: Vocab::new(),
            relations: Vec::new(),
            triples: Vec::new(),
            attributes: AttributeTable::new(m),
        }
    }

    /// Reads `head \t relation \t tail` rows. With `relation_order`, slots
    /// follow that list and unlisted relations are rejected; otherwise slots
    /// follow first appearance in the file.
    pub fn load(path: impl AsRef<Path>, m: usize, relation_order: Option<&[String]>) -> Result<Self> {
        let path = path.as_ref();
        Self::parse(&read_text(path)?, path, m, relation_order)
    }

    pub fn parse(text: &str, path: &Path, m: usize, relation_order: Option<&[String]>) -> Result<Self> {
        let mut kg = Self::empty(m);
        if let Some(order) = relation_order {
            if order.len() > m {
                return Err(Error::Config(format!(
                    "{} relations listed but M = {m}",
                    order.len()
                )));
            }
            kg.relations = order.to_vec();
        }
        let mut seen_facts = std::collections::HashSet::new();
        for (i, raw) in text.lines().enumerate() {
            let lineno = i + 1;
            let line = raw.trim_end_matches('\r');
            if line.trim().is_empty() {
                continue;
            }
            let f = tsv_fields(line, path, lineno, 3)?;
            let relation = match kg.relations.iter().position(|r| r == f[1]) {
                Some(p) => p + 1,
                None if relation_order.is_some() => {
                    return Err(Error::Config(format!(
                        "{}:{lineno}: relation {:?} is not in the configured relation order",
                        path.display(),
                        f[1]
                    )))
                }
                None => {
                    kg.relations.push(f[1].to_string());
                    if kg.relations.len() > m {
                        return Err(Error::Config(format!(
                            "{} declares more than M = {m} relations ({:?})",
                            path.display(),
                            kg.relations
                        )));
                    }
                    kg.relations.len()
                }
            };
            let head = kg.entities.get_or_insert(f[0]);
            let tail = kg.entities.get_or_insert(f[2]);
            let triple = Triple { head, relation, tail };
            if seen_facts.insert((head, relation, tail)) {
                kg.triples.push(triple);
                kg.attributes.attach(triple);
            }
        }
        Ok(kg)
    }

    /// Maps every item onto its head entity, creating entities for items
    /// that have no triples. Returns the item → entity table.
    pub fn link_items(&mut self, items: &Vocab) -> Vec<usize> {
        items
            .names()
            .iter()
            .map(|name| self.entities.get_or_insert(name))
            .collect()
    }
}

/// Parameter handles of the transH scorer: entity embeddings plus one
/// hyperplane normal and one translation per relation (row `r - 1`).
#[derive(Clone, Copy, Debug)]
pub struct TransH {
    pub entities: ParamId,
    pub normals: ParamId,
    pub translations: ParamId,
}

impl TransH {
    /// Energy `‖(h − wᵀh w) + d − (t − wᵀt w)‖²` for each triple, as a
    /// `B × 1` column.
    pub fn energies(&self, tape: &mut Tape, triples: &[Triple]) -> Result<Var> {
        if triples.is_empty() {
            return Err(Error::invalid("transH: empty triple batch"));
        }
        let rows = |table: ParamId, pick: &dyn Fn(&Triple) -> usize| -> Vec<Vec<(ParamId, usize)>> {
            triples.iter().map(|t| vec![(table, pick(t))]).collect()
        };
        let h = tape.bag(rows(self.entities, &|t| t.head))?;
        let t = tape.bag(rows(self.entities, &|t| t.tail))?;
        let w = tape.bag(rows(self.normals, &|t| t.relation - 1))?;
        let d = tape.bag(rows(self.translations, &|t| t.relation - 1))?;
        let ph = project(tape, h, w)?;
        let pt = project(tape, t, w)?;
        let shifted = tape.add(ph, d)?;
        let residual = tape.sub(shifted, pt)?;
        Ok(tape.row_sq_norm(residual))
    }

    /// Mean transH energy over a non-empty batch.
    pub fn batch_loss(&self, tape: &mut Tape, triples: &[Triple]) -> Result<Var> {
        let e = self.energies(tape, triples)?;
        Ok(tape.mean(e))
    }
}

/// Projection onto the hyperplane with unit normal `w` (row-wise).
fn project(tape: &mut Tape, x: Var, w: Var) -> Result<Var> {
    let along = tape.row_dot(x, w)?;
    let normal_part = tape.scale_rows(w, along)?;
    tape.sub(x, normal_part)
}

/// Rescales every row of `t` to unit L2 norm. Zero rows are left alone.
pub fn renormalize_rows(t: &mut Tensor) {
    for i in 0..t.rows() {
        let row = t.row_slice_mut(i);
        let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            row.iter_mut().for_each(|x| *x /= norm);
        }
    }
}
