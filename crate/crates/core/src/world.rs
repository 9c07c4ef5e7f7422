//! The synthetic scene-grid world.
//!
//! A [`Scene`] is an 8×8 grid of cells, each empty or holding one of twelve
//! colored shapes, plus a black or white background. Captions, edit
//! instructions and VQA items all have exact programmatic oracles here:
//! `describe`, `apply_edit`, `filter_edit`, `clause_check`.

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::codec::Word;
use crate::error::{contract, Result};

pub const GRID: usize = 8;
pub const CELLS: usize = GRID * GRID;
pub const MAX_OBJECTS: usize = 6;
pub const NUM_TYPES: usize = 12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Color {
    Red,
    Green,
    Blue,
    Yellow,
}

impl Color {
    pub const ALL: [Color; 4] = [Color::Red, Color::Green, Color::Blue, Color::Yellow];

    pub fn index(self) -> usize {
        self as usize
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shape {
    Circle,
    Square,
    Triangle,
}

impl Shape {
    pub const ALL: [Shape; 3] = [Shape::Circle, Shape::Square, Shape::Triangle];

    pub fn index(self) -> usize {
        self as usize
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Background {
    Black,
    White,
}

impl Background {
    pub const ALL: [Background; 2] = [Background::Black, Background::White];

    pub fn index(self) -> usize {
        self as usize
    }
}

/// A (color, shape) pair. Type index is `color * 3 + shape`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ObjType {
    pub color: Color,
    pub shape: Shape,
}

impl ObjType {
    pub const fn new(color: Color, shape: Shape) -> Self {
        ObjType { color, shape }
    }

    pub fn index(self) -> usize {
        self.color.index() * 3 + self.shape.index()
    }

    pub fn from_index(i: usize) -> Self {
        assert!(i < NUM_TYPES, "object type index {i}");
        ObjType { color: Color::ALL[i / 3], shape: Shape::ALL[i % 3] }
    }

    pub fn all() -> impl Iterator<Item = ObjType> {
        (0..NUM_TYPES).map(ObjType::from_index)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub enum Cell {
    #[default]
    Empty,
    Object(ObjType),
}

impl Cell {
    pub fn object(self) -> Option<ObjType> {
        match self {
            Cell::Empty => None,
            Cell::Object(o) => Some(o),
        }
    }
}

pub fn row_col(cell: usize) -> (usize, usize) {
    (cell / GRID, cell % GRID)
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Scene {
    pub cells: [Cell; CELLS],
    pub background: Background,
}

impl Scene {
    pub fn empty(background: Background) -> Self {
        Scene { cells: [Cell::Empty; CELLS], background }
    }

    pub fn with_objects(background: Background, objects: &[(usize, ObjType)]) -> Self {
        let mut s = Scene::empty(background);
        for &(cell, obj) in objects {
            s.cells[cell] = Cell::Object(obj);
        }
        s
    }

    /// Occupied cells in raster order.
    pub fn objects(&self) -> impl Iterator<Item = (usize, ObjType)> + '_ {
        self.cells.iter().enumerate().filter_map(|(i, c)| c.object().map(|o| (i, o)))
    }

    pub fn object_count(&self) -> usize {
        self.objects().count()
    }

    pub fn count(&self, obj: ObjType) -> usize {
        self.objects().filter(|&(_, o)| o == obj).count()
    }

    pub fn type_counts(&self) -> [usize; NUM_TYPES] {
        let mut c = [0; NUM_TYPES];
        for (_, o) in self.objects() {
            c[o.index()] += 1;
        }
        c
    }

    /// Cell codes 0..=11 for objects and 12 for empty (dataset file format).
    pub fn cell_codes(&self) -> Vec<u8> {
        self.cells
            .iter()
            .map(|c| c.object().map_or(NUM_TYPES as u8, |o| o.index() as u8))
            .collect()
    }

    pub fn from_cell_codes(codes: &[u8], background: Background) -> Result<Self> {
        if codes.len() != CELLS {
            return contract(format!("scene needs {CELLS} cells, got {}", codes.len()));
        }
        let mut s = Scene::empty(background);
        for (i, &c) in codes.iter().enumerate() {
            s.cells[i] = match c as usize {
                NUM_TYPES => Cell::Empty,
                k if k < NUM_TYPES => Cell::Object(ObjType::from_index(k)),
                k => return contract(format!("cell code {k} out of range")),
            };
        }
        Ok(s)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Relation {
    LeftOf,
    RightOf,
    Above,
    Below,
}

impl Relation {
    pub const ALL: [Relation; 4] = [Relation::LeftOf, Relation::RightOf, Relation::Above, Relation::Below];

    /// Strict row/column predicate between two cells.
    pub fn holds(self, subject: usize, object: usize) -> bool {
        let ((sr, sc), (or, oc)) = (row_col(subject), row_col(object));
        match self {
            Relation::LeftOf => sc < oc,
            Relation::RightOf => sc > oc,
            Relation::Above => sr < or,
            Relation::Below => sr > or,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Clause {
    Count { n: u8, obj: ObjType },
    Relation { subject: ObjType, relation: Relation, object: ObjType },
    Background(Background),
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct Caption {
    pub clauses: Vec<Clause>,
}

impl Caption {
    pub fn new(clauses: Vec<Clause>) -> Self {
        Caption { clauses }
    }

    /// Well-formedness: counts in 1..=6, no duplicate Count per type, at most
    /// one Background clause, relations between two different types.
    pub fn validate(&self) -> Result<()> {
        let mut seen = [false; NUM_TYPES];
        let mut backgrounds = 0;
        for c in &self.clauses {
            match *c {
                Clause::Count { n, obj } => {
                    if !(1..=MAX_OBJECTS as u8).contains(&n) {
                        return contract(format!("count {n} outside 1..=6"));
                    }
                    if std::mem::replace(&mut seen[obj.index()], true) {
                        return contract(format!("duplicate count clause for {obj:?}"));
                    }
                }
                Clause::Relation { subject, object, .. } => {
                    if subject == object {
                        return contract("relation between identical types");
                    }
                }
                Clause::Background(_) => backgrounds += 1,
            }
        }
        if backgrounds > 1 {
            return contract("more than one background clause");
        }
        Ok(())
    }

    pub fn count_for(&self, obj: ObjType) -> Option<u8> {
        self.clauses.iter().find_map(|c| match *c {
            Clause::Count { n, obj: o } if o == obj => Some(n),
            _ => None,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Up,
    Down,
    Left,
    Right,
}

impl Direction {
    pub const ALL: [Direction; 4] = [Direction::Up, Direction::Down, Direction::Left, Direction::Right];

    fn delta(self) -> (isize, isize) {
        match self {
            Direction::Up => (-1, 0),
            Direction::Down => (1, 0),
            Direction::Left => (0, -1),
            Direction::Right => (0, 1),
        }
    }
}

/// Edit operation kinds, also the edit-suite categories.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EditOp {
    Add,
    Remove,
    Replace,
    Recolor,
    Move,
    SetBackground,
}

impl EditOp {
    pub const ALL: [EditOp; 6] =
        [EditOp::Add, EditOp::Remove, EditOp::Replace, EditOp::Recolor, EditOp::Move, EditOp::SetBackground];
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum EditInstruction {
    Add { obj: ObjType, cell: usize },
    Remove { obj: ObjType },
    Replace { old: ObjType, new: ObjType },
    Recolor { obj: ObjType, color: Color },
    Move { obj: ObjType, direction: Direction, steps: u8 },
    SetBackground { color: Background },
}

impl EditInstruction {
    pub fn op(&self) -> EditOp {
        match self {
            EditInstruction::Add { .. } => EditOp::Add,
            EditInstruction::Remove { .. } => EditOp::Remove,
            EditInstruction::Replace { .. } => EditOp::Replace,
            EditInstruction::Recolor { .. } => EditOp::Recolor,
            EditInstruction::Move { .. } => EditOp::Move,
            EditInstruction::SetBackground { .. } => EditOp::SetBackground,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct VqaItem {
    pub question: Vec<Word>,
    pub answer: Vec<Word>,
    pub scene_id: u64,
}

/// Uniformly place `k ∈ [min, max]` objects on distinct cells.
pub fn sample_scene<R: Rng>(rng: &mut R, min_objects: usize, max_objects: usize) -> Scene {
    assert!(min_objects <= max_objects && max_objects <= MAX_OBJECTS, "object bounds {min_objects}..={max_objects}");
    let background = Background::ALL[rng.gen_range(0..2)];
    let k = rng.gen_range(min_objects..=max_objects);
    let mut scene = Scene::empty(background);
    for cell in sample(rng, CELLS, k) {
        scene.cells[cell] = Cell::Object(ObjType::from_index(rng.gen_range(0..NUM_TYPES)));
    }
    scene
}

/// Canonical caption: Count clauses in type order, at most one Relation
/// between the two lowest-indexed objects of different types, then Background.
pub fn describe(scene: &Scene) -> Caption {
    let counts = scene.type_counts();
    let mut clauses: Vec<Clause> = counts
        .iter()
        .enumerate()
        .filter(|(_, &n)| n > 0)
        .map(|(i, &n)| Clause::Count { n: n as u8, obj: ObjType::from_index(i) })
        .collect();
    let mut objs = scene.objects();
    if let Some((ca, a)) = objs.next() {
        if let Some((cb, b)) = objs.find(|&(_, o)| o != a) {
            let relation = if row_col(ca).0 == row_col(cb).0 { Relation::LeftOf } else { Relation::Above };
            clauses.push(Clause::Relation { subject: a, relation, object: b });
        }
    }
    clauses.push(Clause::Background(scene.background));
    Caption::new(clauses)
}

fn shifted(cell: usize, direction: Direction, steps: u8) -> Option<usize> {
    let (r, c) = row_col(cell);
    let (dr, dc) = direction.delta();
    let nr = r as isize + dr * steps as isize;
    let nc = c as isize + dc * steps as isize;
    let range = 0..GRID as isize;
    (range.contains(&nr) && range.contains(&nc)).then(|| nr as usize * GRID + nc as usize)
}

/// Plausibility: selectors match, add targets an empty cell, moves stay on
/// the grid and do not land on an unselected object.
fn plausible(scene: &Scene, edit: &EditInstruction) -> bool {
    match *edit {
        EditInstruction::Add { cell, .. } => cell < CELLS && scene.cells[cell] == Cell::Empty,
        EditInstruction::Remove { obj } => scene.count(obj) > 0,
        EditInstruction::Replace { old, new } => scene.count(old) > 0 && old != new,
        EditInstruction::Recolor { obj, color } => scene.count(obj) > 0 && color != obj.color,
        EditInstruction::Move { obj, direction, steps } => {
            if !(1..=3).contains(&steps) || scene.count(obj) == 0 {
                return false;
            }
            scene.objects().filter(|&(_, o)| o == obj).all(|(cell, _)| match shifted(cell, direction, steps) {
                Some(dst) => scene.cells[dst].object().is_none_or(|o| o == obj),
                None => false,
            })
        }
        EditInstruction::SetBackground { .. } => true,
    }
}

fn apply_unchecked(scene: &Scene, edit: &EditInstruction) -> Scene {
    let mut out = scene.clone();
    match *edit {
        EditInstruction::Add { obj, cell } => out.cells[cell] = Cell::Object(obj),
        EditInstruction::Remove { obj } => {
            for c in out.cells.iter_mut().filter(|c| c.object() == Some(obj)) {
                *c = Cell::Empty;
            }
        }
        EditInstruction::Replace { old, new } => {
            for c in out.cells.iter_mut().filter(|c| c.object() == Some(old)) {
                *c = Cell::Object(new);
            }
        }
        EditInstruction::Recolor { obj, color } => {
            for c in out.cells.iter_mut().filter(|c| c.object() == Some(obj)) {
                *c = Cell::Object(ObjType::new(color, obj.shape));
            }
        }
        EditInstruction::Move { obj, direction, steps } => {
            let sources: Vec<usize> = scene.objects().filter(|&(_, o)| o == obj).map(|(c, _)| c).collect();
            for &s in &sources {
                out.cells[s] = Cell::Empty;
            }
            for &s in &sources {
                out.cells[shifted(s, direction, steps).expect("plausible move")] = Cell::Object(obj);
            }
        }
        EditInstruction::SetBackground { color } => out.background = color,
    }
    out
}

/// True iff the edit is plausible, changes the scene, and changes its description.
pub fn filter_edit(scene: &Scene, edit: &EditInstruction) -> bool {
    if !plausible(scene, edit) {
        return false;
    }
    let after = apply_unchecked(scene, edit);
    after != *scene && describe(&after) != describe(scene)
}

pub fn apply_edit(scene: &Scene, edit: &EditInstruction) -> Result<Scene> {
    if !filter_edit(scene, edit) {
        return contract(format!("edit {edit:?} is not valid for this scene"));
    }
    Ok(apply_unchecked(scene, edit))
}

/// Cells an edit may touch, and whether it touches the background.
pub fn edit_footprint(scene: &Scene, edit: &EditInstruction) -> (Vec<usize>, bool) {
    let matches = |obj: ObjType| scene.objects().filter(move |&(_, o)| o == obj).map(|(c, _)| c);
    match *edit {
        EditInstruction::Add { cell, .. } => (vec![cell], false),
        EditInstruction::Remove { obj } | EditInstruction::Replace { old: obj, .. } | EditInstruction::Recolor { obj, .. } => {
            (matches(obj).collect(), false)
        }
        EditInstruction::Move { obj, direction, steps } => {
            let mut cells: Vec<usize> = matches(obj).collect();
            let dst: Vec<usize> = cells.iter().filter_map(|&c| shifted(c, direction, steps)).collect();
            cells.extend(dst);
            cells.sort_unstable();
            cells.dedup();
            (cells, false)
        }
        EditInstruction::SetBackground { .. } => (Vec::new(), true),
    }
}

/// Every valid instruction of one op kind, in a fixed enumeration order.
pub fn valid_edits(scene: &Scene, op: EditOp) -> Vec<EditInstruction> {
    let mut present: Vec<ObjType> = scene.objects().map(|(_, o)| o).collect();
    present.sort();
    present.dedup();
    let candidates: Vec<EditInstruction> = match op {
        EditOp::Add => ObjType::all()
            .flat_map(|obj| (0..CELLS).map(move |cell| EditInstruction::Add { obj, cell }))
            .collect(),
        EditOp::Remove => present.iter().map(|&obj| EditInstruction::Remove { obj }).collect(),
        EditOp::Replace => present
            .iter()
            .flat_map(|&old| ObjType::all().map(move |new| EditInstruction::Replace { old, new }))
            .collect(),
        EditOp::Recolor => present
            .iter()
            .flat_map(|&obj| Color::ALL.into_iter().map(move |color| EditInstruction::Recolor { obj, color }))
            .collect(),
        EditOp::Move => present
            .iter()
            .flat_map(|&obj| {
                Direction::ALL
                    .into_iter()
                    .flat_map(move |direction| (1..=3).map(move |steps| EditInstruction::Move { obj, direction, steps }))
            })
            .collect(),
        EditOp::SetBackground => {
            Background::ALL.into_iter().map(|color| EditInstruction::SetBackground { color }).collect()
        }
    };
    candidates.into_iter().filter(|e| filter_edit(scene, e)).collect()
}

/// Uniform over ops that have at least one valid instruction, then uniform over its arguments.
pub fn make_edit<R: Rng>(rng: &mut R, scene: &Scene) -> EditInstruction {
    let mut by_op: Vec<Vec<EditInstruction>> =
        EditOp::ALL.iter().map(|&op| valid_edits(scene, op)).filter(|v| !v.is_empty()).collect();
    let i = rng.gen_range(0..by_op.len());
    let options = &mut by_op[i];
    options.swap_remove(rng.gen_range(0..options.len()))
}

/// Same op family as `make_edit` but forced to a given op; `None` if the op has no valid instruction.
pub fn make_edit_of<R: Rng>(rng: &mut R, scene: &Scene, op: EditOp) -> Option<EditInstruction> {
    let options = valid_edits(scene, op);
    (!options.is_empty()).then(|| options[rng.gen_range(0..options.len())])
}

pub fn synthesize_target_description(scene: &Scene, edit: &EditInstruction) -> Result<Caption> {
    Ok(describe(&apply_edit(scene, edit)?))
}

pub fn count_word(n: usize) -> Word {
    Word::NUMBERS[n]
}

/// One question from the three templates; queried types are drawn from the
/// scene's objects half of the time so counting answers are not all "zero".
pub fn gen_vqa<R: Rng>(rng: &mut R, scene: &Scene, scene_id: u64) -> VqaItem {
    let present: Vec<ObjType> = scene.objects().map(|(_, o)| o).collect();
    let pick = |rng: &mut R| {
        if !present.is_empty() && rng.gen_bool(0.5) {
            present[rng.gen_range(0..present.len())]
        } else {
            ObjType::from_index(rng.gen_range(0..NUM_TYPES))
        }
    };
    let (question, answer) = match rng.gen_range(0..3) {
        0 => {
            let obj = pick(rng);
            (
                vec![Word::How, Word::Many, Word::from_color(obj.color), Word::from_shape(obj.shape)],
                vec![count_word(scene.count(obj))],
            )
        }
        1 => (vec![Word::What, Word::Is, Word::The, Word::BackgroundWord], vec![Word::from_background(scene.background)]),
        _ => {
            let obj = pick(rng);
            let yes = scene.count(obj) > 0;
            (
                vec![Word::Is, Word::There, Word::from_color(obj.color), Word::from_shape(obj.shape)],
                vec![if yes { Word::Yes } else { Word::No }],
            )
        }
    };
    VqaItem { question, answer, scene_id }
}

/// Counts per type (12 entries) followed by the background one-hot.
pub fn feature_vector(scene: &Scene) -> [f64; 14] {
    let mut v = [0.0; 14];
    for (i, &n) in scene.type_counts().iter().enumerate() {
        v[i] = n as f64;
    }
    v[NUM_TYPES + scene.background.index()] = 1.0;
    v
}

/// The feature vector a caption implies. Relation participants count as one
/// object each unless a Count clause already covers their type.
pub fn expected_vector(caption: &Caption) -> Result<[f64; 14]> {
    caption.validate()?;
    let mut v = [0.0; 14];
    for c in &caption.clauses {
        match *c {
            Clause::Count { n, obj } => v[obj.index()] = n as f64,
            Clause::Background(bg) => v[NUM_TYPES + bg.index()] = 1.0,
            Clause::Relation { .. } => {}
        }
    }
    for c in &caption.clauses {
        if let Clause::Relation { subject, object, .. } = *c {
            for t in [subject, object] {
                if caption.count_for(t).is_none() && v[t.index()] == 0.0 {
                    v[t.index()] = 1.0;
                }
            }
        }
    }
    Ok(v)
}

pub fn clause_holds(scene: &Scene, clause: &Clause) -> bool {
    match *clause {
        Clause::Count { n, obj } => scene.count(obj) == n as usize,
        Clause::Relation { subject, relation, object } => scene
            .objects()
            .filter(|&(_, o)| o == subject)
            .any(|(sc, _)| scene.objects().filter(|&(_, o)| o == object).any(|(oc, _)| relation.holds(sc, oc))),
        Clause::Background(bg) => scene.background == bg,
    }
}

/// (satisfied, total) clause counts.
pub fn clause_check(scene: &Scene, caption: &Caption) -> Result<(usize, usize)> {
    if caption.clauses.is_empty() {
        return contract("clause_check on an empty caption");
    }
    let sat = caption.clauses.iter().filter(|c| clause_holds(scene, c)).count();
    Ok((sat, caption.clauses.len()))
}
