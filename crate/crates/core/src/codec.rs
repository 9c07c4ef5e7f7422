//! Tokenizers: the lossless discrete image codec, the frozen continuous
//! understanding features, and the closed word-level text vocabulary with
//! caption / instruction grammars.

use unigrid_numerics::{Real, Tensor};

use crate::error::{contract, Error, Result};
use crate::world::{
    row_col, Background, Caption, Cell, Clause, Color, Direction, EditInstruction, ObjType, Relation, Scene, Shape,
    CELLS, GRID, NUM_TYPES,
};

pub const EMPTY_BLACK: usize = 12;
pub const EMPTY_WHITE: usize = 13;
pub const MASK: usize = 14;
/// Image token ids including MASK.
pub const IMAGE_VOCAB: usize = 15;
/// Ids a finalized sequence may contain.
pub const IMAGE_CLASSES: usize = 14;
/// Width of one continuous understanding feature.
pub const D_U: usize = 20;

macro_rules! vocab {
    ($($v:ident = $s:literal),* $(,)?) => {
        #[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
        pub enum Word { $($v),* }

        impl Word {
            pub const ALL: &'static [Word] = &[$(Word::$v),*];

            pub fn as_str(self) -> &'static str {
                match self { $(Word::$v => $s),* }
            }
        }
    };
}

vocab! {
    Pad = "<pad>", Bos = "<bos>", Eos = "<eos>", Sep = "<sep>",
    Zero = "zero", One = "one", Two = "two", Three = "three",
    Four = "four", Five = "five", Six = "six", Seven = "seven",
    Red = "red", Green = "green", Blue = "blue", Yellow = "yellow",
    Circle = "circle", Square = "square", Triangle = "triangle",
    Black = "black", White = "white",
    LeftOf = "left_of", RightOf = "right_of", Above = "above", Below = "below",
    Add = "add", Remove = "remove", Replace = "replace", Recolor = "recolor", Move = "move",
    SetBackground = "set_background",
    Up = "up", Down = "down", Left = "left", Right = "right",
    Comma = ",", BackgroundWord = "background", At = "at", With = "with", To = "to",
    How = "how", Many = "many", What = "what", Is = "is", The = "the", There = "there",
    Yes = "yes", No = "no",
}

pub const TEXT_VOCAB: usize = 48;

impl Word {
    pub const NUMBERS: [Word; 8] =
        [Word::Zero, Word::One, Word::Two, Word::Three, Word::Four, Word::Five, Word::Six, Word::Seven];

    pub fn id(self) -> usize {
        self as usize
    }

    pub fn from_id(id: usize) -> Result<Word> {
        Word::ALL.get(id).copied().ok_or_else(|| Error::Vocabulary(format!("id {id}")))
    }

    pub fn parse(s: &str) -> Result<Word> {
        Word::ALL.iter().copied().find(|w| w.as_str() == s).ok_or_else(|| Error::Vocabulary(s.to_string()))
    }

    pub fn from_color(c: Color) -> Word {
        [Word::Red, Word::Green, Word::Blue, Word::Yellow][c.index()]
    }

    pub fn from_shape(s: Shape) -> Word {
        [Word::Circle, Word::Square, Word::Triangle][s.index()]
    }

    pub fn from_background(b: Background) -> Word {
        [Word::Black, Word::White][b.index()]
    }

    pub fn color(self) -> Option<Color> {
        Color::ALL.into_iter().find(|&c| Word::from_color(c) == self)
    }

    pub fn shape(self) -> Option<Shape> {
        Shape::ALL.into_iter().find(|&s| Word::from_shape(s) == self)
    }

    pub fn background(self) -> Option<Background> {
        Background::ALL.into_iter().find(|&b| Word::from_background(b) == self)
    }

    pub fn number(self) -> Option<usize> {
        Word::NUMBERS.iter().position(|&w| w == self)
    }
}

pub fn encode_g(scene: &Scene) -> Vec<usize> {
    let empty = match scene.background {
        Background::Black => EMPTY_BLACK,
        Background::White => EMPTY_WHITE,
    };
    scene.cells.iter().map(|c| c.object().map_or(empty, ObjType::index)).collect()
}

/// Inverse of [`encode_g`]. Background is the majority empty-cell id, ties go to black.
pub fn decode_g(tokens: &[usize]) -> Result<Scene> {
    if tokens.len() != CELLS {
        return contract(format!("image sequence of length {}", tokens.len()));
    }
    let mut cells = [Cell::Empty; CELLS];
    let (mut black, mut white) = (0, 0);
    for (i, &t) in tokens.iter().enumerate() {
        match t {
            t if t < NUM_TYPES => cells[i] = Cell::Object(ObjType::from_index(t)),
            EMPTY_BLACK => black += 1,
            EMPTY_WHITE => white += 1,
            MASK => return Err(Error::Incomplete(i)),
            t => return contract(format!("image token {t} out of range")),
        }
    }
    let background = if white > black { Background::White } else { Background::Black };
    Ok(Scene { cells, background })
}

/// Frozen per-cell features `[64, D_U]`: type one-hot, background one-hot,
/// normalized (row, col), four zeros.
pub fn encode_u<T: Real>(scene: &Scene) -> Tensor<T> {
    let mut data = vec![T::zero(); CELLS * D_U];
    let scale = (GRID - 1) as f64;
    for (i, cell) in scene.cells.iter().enumerate() {
        let row = &mut data[i * D_U..(i + 1) * D_U];
        if let Some(o) = cell.object() {
            row[o.index()] = T::one();
        }
        row[NUM_TYPES + scene.background.index()] = T::one();
        let (r, c) = row_col(i);
        row[14] = T::c(r as f64 / scale);
        row[15] = T::c(c as f64 / scale);
    }
    Tensor::new(vec![CELLS, D_U], data).expect("feature shape")
}

pub fn encode_text(words: &[&str]) -> Result<Vec<usize>> {
    words.iter().map(|w| Word::parse(w).map(Word::id)).collect()
}

pub fn decode_text(ids: &[usize]) -> Result<Vec<&'static str>> {
    ids.iter().map(|&i| Word::from_id(i).map(Word::as_str)).collect()
}

pub fn words_to_ids(words: &[Word]) -> Vec<usize> {
    words.iter().map(|w| w.id()).collect()
}

pub fn ids_to_words(ids: &[usize]) -> Result<Vec<Word>> {
    ids.iter().map(|&i| Word::from_id(i)).collect()
}

/// Whitespace-separated words.
pub fn parse_words(text: &str) -> Result<Vec<Word>> {
    text.split_whitespace().map(Word::parse).collect()
}

pub fn render_words(words: &[Word]) -> String {
    words.iter().map(|w| w.as_str()).collect::<Vec<_>>().join(" ")
}

fn obj_words(o: ObjType) -> [Word; 2] {
    [Word::from_color(o.color), Word::from_shape(o.shape)]
}

fn relation_word(r: Relation) -> Word {
    [Word::LeftOf, Word::RightOf, Word::Above, Word::Below][r as usize]
}

fn direction_word(d: Direction) -> Word {
    [Word::Up, Word::Down, Word::Left, Word::Right][d as usize]
}

/// `<n> <color> <shape>` / `<c> <s> <rel> <c> <s>` / `background <bg>`, joined by `,`.
pub fn caption_words(caption: &Caption) -> Vec<Word> {
    let mut out = Vec::new();
    for (i, clause) in caption.clauses.iter().enumerate() {
        if i > 0 {
            out.push(Word::Comma);
        }
        match *clause {
            Clause::Count { n, obj } => {
                out.push(Word::NUMBERS[n as usize]);
                out.extend(obj_words(obj));
            }
            Clause::Relation { subject, relation, object } => {
                out.extend(obj_words(subject));
                out.push(relation_word(relation));
                out.extend(obj_words(object));
            }
            Clause::Background(b) => out.extend([Word::BackgroundWord, Word::from_background(b)]),
        }
    }
    out
}

fn grammar<T>(what: &str, words: &[Word]) -> Result<T> {
    contract(format!("cannot parse {what}: {:?}", render_words(words)))
}

fn parse_obj(w: &[Word]) -> Option<ObjType> {
    Some(ObjType::new(w[0].color()?, w[1].shape()?))
}

fn parse_clause(w: &[Word]) -> Result<Clause> {
    let clause = match w {
        [n, c, s] => n
            .number()
            .filter(|n| (1..=6).contains(n))
            .zip(parse_obj(&[*c, *s]))
            .map(|(n, obj)| Clause::Count { n: n as u8, obj }),
        [c1, s1, r, c2, s2] => {
            let relation = Relation::ALL.into_iter().find(|&x| relation_word(x) == *r);
            match (parse_obj(&[*c1, *s1]), relation, parse_obj(&[*c2, *s2])) {
                (Some(subject), Some(relation), Some(object)) => Some(Clause::Relation { subject, relation, object }),
                _ => None,
            }
        }
        [Word::BackgroundWord, b] => b.background().map(Clause::Background),
        _ => None,
    };
    clause.map_or_else(|| grammar("clause", w), Ok)
}

/// Inverse of [`caption_words`]; the result is validated.
pub fn parse_caption(words: &[Word]) -> Result<Caption> {
    if words.is_empty() {
        return Ok(Caption::default());
    }
    let clauses = words.split(|&w| w == Word::Comma).map(parse_clause).collect::<Result<Vec<_>>>()?;
    let caption = Caption::new(clauses);
    caption.validate()?;
    Ok(caption)
}

pub fn edit_words(edit: &EditInstruction) -> Vec<Word> {
    let mut out = Vec::new();
    match *edit {
        EditInstruction::Add { obj, cell } => {
            let (r, c) = row_col(cell);
            out.push(Word::Add);
            out.extend(obj_words(obj));
            out.extend([Word::At, Word::NUMBERS[r], Word::NUMBERS[c]]);
        }
        EditInstruction::Remove { obj } => {
            out.push(Word::Remove);
            out.extend(obj_words(obj));
        }
        EditInstruction::Replace { old, new } => {
            out.push(Word::Replace);
            out.extend(obj_words(old));
            out.push(Word::With);
            out.extend(obj_words(new));
        }
        EditInstruction::Recolor { obj, color } => {
            out.push(Word::Recolor);
            out.extend(obj_words(obj));
            out.extend([Word::To, Word::from_color(color)]);
        }
        EditInstruction::Move { obj, direction, steps } => {
            out.push(Word::Move);
            out.extend(obj_words(obj));
            out.extend([direction_word(direction), Word::NUMBERS[steps as usize]]);
        }
        EditInstruction::SetBackground { color } => {
            out.extend([Word::SetBackground, Word::from_background(color)]);
        }
    }
    out
}

pub fn parse_edit(words: &[Word]) -> Result<EditInstruction> {
    let obj = |i: usize| parse_obj(&words[i..i + 2]);
    let edit = match words {
        [Word::Add, _, _, Word::At, r, c] => match (obj(1), r.number(), c.number()) {
            (Some(obj), Some(r), Some(c)) => Some(EditInstruction::Add { obj, cell: r * GRID + c }),
            _ => None,
        },
        [Word::Remove, _, _] => obj(1).map(|obj| EditInstruction::Remove { obj }),
        [Word::Replace, _, _, Word::With, _, _] => {
            obj(1).zip(obj(4)).map(|(old, new)| EditInstruction::Replace { old, new })
        }
        [Word::Recolor, _, _, Word::To, c] => match (obj(1), c.color()) {
            (Some(obj), Some(color)) if color != obj.color => Some(EditInstruction::Recolor { obj, color }),
            _ => None,
        },
        [Word::Move, _, _, d, n] => {
            let direction = Direction::ALL.into_iter().find(|&x| direction_word(x) == *d);
            match (obj(1), direction, n.number()) {
                (Some(obj), Some(direction), Some(steps @ 1..=3)) => {
                    Some(EditInstruction::Move { obj, direction, steps: steps as u8 })
                }
                _ => None,
            }
        }
        [Word::SetBackground, b] => b.background().map(|color| EditInstruction::SetBackground { color }),
        _ => None,
    };
    edit.map_or_else(|| grammar("edit instruction", words), Ok)
}

/// `[{"word": .., "id": ..}, ..]` in id order.
pub fn vocab_json() -> serde_json::Value {
    serde_json::Value::Array(
        Word::ALL.iter().map(|w| serde_json::json!({ "word": w.as_str(), "id": w.id() })).collect(),
    )
}
