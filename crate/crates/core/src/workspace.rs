//! Ground-truth tabletop scene, qualitative spatial relations and the
//! arithmetic rules of the number-block task.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Default workspace extent in millimetres.
pub const WORKSPACE_WIDTH: f64 = 1000.0;
pub const WORKSPACE_HEIGHT: f64 = 600.0;
/// Default block side length in millimetres.
pub const BLOCK_SIDE: f64 = 40.0;
/// Default expression band (y interval, mm).
pub const BAND_MIN_Y: f64 = 250.0;
pub const BAND_MAX_Y: f64 = 350.0;
/// Adjacent digits closer than this multiple of the footprint merge into one operand.
pub const DIGIT_MERGE_FACTOR: f64 = 1.5;
/// Band blocks separated by more than this multiple of the footprint start a new group.
pub const GROUP_GAP_FACTOR: f64 = 2.5;

const AREA_EPS: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum WorkspaceError {
    #[error("unknown id {0}")]
    UnknownId(u32),
    #[error("block {moved} would overlap block {other}")]
    OverlapViolation { moved: u32, other: u32 },
    #[error("block {0} would leave the workspace bounds")]
    OutOfBounds(u32),
    #[error("duplicate block id {0}")]
    DuplicateId(u32),
    #[error("invalid symbol {0:?}")]
    InvalidSymbol(String),
    #[error("invalid scene: {0}")]
    InvalidScene(String),
    #[error("malformed expression: {0}")]
    MalformedExpression(String),
    #[error("fixture line {line}: {message}")]
    Fixture { line: usize, message: String },
}

#[derive(Debug, Error, Clone, Copy, PartialEq, Eq)]
pub enum ArithmeticError {
    #[error("division by zero")]
    DivisionByZero,
    #[error("division leaves a remainder")]
    NonIntegerResult,
    #[error("integer overflow")]
    Overflow,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn dot(self, other: Point) -> f64 {
        self.x * other.x + self.y * other.y
    }

    pub fn norm(self) -> f64 {
        self.x.hypot(self.y)
    }

    pub fn distance(self, other: Point) -> f64 {
        (self - other).norm()
    }
}

impl std::ops::Add for Point {
    type Output = Point;
    fn add(self, rhs: Point) -> Point {
        Point::new(self.x + rhs.x, self.y + rhs.y)
    }
}

impl std::ops::Sub for Point {
    type Output = Point;
    fn sub(self, rhs: Point) -> Point {
        Point::new(self.x - rhs.x, self.y - rhs.y)
    }
}

impl std::ops::Mul<f64> for Point {
    type Output = Point;
    fn mul(self, rhs: f64) -> Point {
        Point::new(self.x * rhs, self.y * rhs)
    }
}

/// Axis-aligned rectangle in millimetres.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rect {
    pub min_x: f64,
    pub min_y: f64,
    pub max_x: f64,
    pub max_y: f64,
}

impl Rect {
    pub const fn new(min_x: f64, min_y: f64, max_x: f64, max_y: f64) -> Self {
        Self { min_x, min_y, max_x, max_y }
    }

    pub fn centered(center: Point, width: f64, height: f64) -> Self {
        Self::new(
            center.x - width / 2.0,
            center.y - height / 2.0,
            center.x + width / 2.0,
            center.y + height / 2.0,
        )
    }

    pub fn width(&self) -> f64 {
        self.max_x - self.min_x
    }

    pub fn height(&self) -> f64 {
        self.max_y - self.min_y
    }

    pub fn center(&self) -> Point {
        Point::new((self.min_x + self.max_x) / 2.0, (self.min_y + self.max_y) / 2.0)
    }

    pub fn contains_point(&self, p: Point) -> bool {
        p.x >= self.min_x && p.x <= self.max_x && p.y >= self.min_y && p.y <= self.max_y
    }

    pub fn contains_rect(&self, other: &Rect) -> bool {
        other.min_x >= self.min_x
            && other.max_x <= self.max_x
            && other.min_y >= self.min_y
            && other.max_y <= self.max_y
    }

    pub fn intersection_area(&self, other: &Rect) -> f64 {
        let w = self.max_x.min(other.max_x) - self.min_x.max(other.min_x);
        let h = self.max_y.min(other.max_y) - self.min_y.max(other.min_y);
        if w <= 0.0 || h <= 0.0 {
            0.0
        } else {
            w * h
        }
    }

    pub fn overlaps(&self, other: &Rect) -> bool {
        self.intersection_area(other) > AREA_EPS
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Operator {
    Add,
    Sub,
    Mul,
    Div,
}

impl Operator {
    pub fn apply(self, lhs: i64, rhs: i64) -> Result<i64, ArithmeticError> {
        match self {
            Operator::Add => lhs.checked_add(rhs).ok_or(ArithmeticError::Overflow),
            Operator::Sub => lhs.checked_sub(rhs).ok_or(ArithmeticError::Overflow),
            Operator::Mul => lhs.checked_mul(rhs).ok_or(ArithmeticError::Overflow),
            Operator::Div => {
                if rhs == 0 {
                    Err(ArithmeticError::DivisionByZero)
                } else if lhs % rhs != 0 {
                    Err(ArithmeticError::NonIntegerResult)
                } else {
                    lhs.checked_div(rhs).ok_or(ArithmeticError::Overflow)
                }
            }
        }
    }
}

/// Face symbol of a number block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Symbol {
    Digit(u8),
    Op(Operator),
    Equals,
}

impl Symbol {
    pub const MINUS: Symbol = Symbol::Op(Operator::Sub);

    /// Every symbol in canonical order.
    pub fn all() -> Vec<Symbol> {
        let mut v: Vec<Symbol> = (0..10).map(Symbol::Digit).collect();
        v.extend([
            Symbol::Op(Operator::Add),
            Symbol::Op(Operator::Sub),
            Symbol::Op(Operator::Mul),
            Symbol::Op(Operator::Div),
            Symbol::Equals,
        ]);
        v
    }

    pub fn as_char(self) -> char {
        match self {
            Symbol::Digit(d) => char::from(b'0' + d),
            Symbol::Op(Operator::Add) => '+',
            Symbol::Op(Operator::Sub) => '−',
            Symbol::Op(Operator::Mul) => '×',
            Symbol::Op(Operator::Div) => '÷',
            Symbol::Equals => '=',
        }
    }

    /// ASCII spelling used in fixture files and logs.
    pub fn as_ascii(self) -> char {
        match self {
            Symbol::Op(Operator::Sub) => '-',
            Symbol::Op(Operator::Mul) => '*',
            Symbol::Op(Operator::Div) => '/',
            other => other.as_char(),
        }
    }

    pub fn from_char(c: char) -> Option<Symbol> {
        Some(match c {
            '0'..='9' => Symbol::Digit(c as u8 - b'0'),
            '+' => Symbol::Op(Operator::Add),
            '-' | '−' => Symbol::Op(Operator::Sub),
            '*' | 'x' | '×' => Symbol::Op(Operator::Mul),
            '/' | '÷' => Symbol::Op(Operator::Div),
            '=' => Symbol::Equals,
            _ => return None,
        })
    }

    pub fn is_digit(self) -> bool {
        matches!(self, Symbol::Digit(_))
    }

    /// Block symbols needed to spell `value` left to right, with a leading
    /// minus block for negative values.
    pub fn spell(value: i64) -> Vec<Symbol> {
        let mut out = Vec::new();
        if value < 0 {
            out.push(Symbol::MINUS);
        }
        out.extend(
            value
                .unsigned_abs()
                .to_string()
                .bytes()
                .map(|b| Symbol::Digit(b - b'0')),
        );
        out
    }
}

impl fmt::Display for Symbol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.as_char())
    }
}

impl FromStr for Symbol {
    type Err = WorkspaceError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut chars = s.chars();
        match (chars.next(), chars.next()) {
            (Some(c), None) => {
                Symbol::from_char(c).ok_or_else(|| WorkspaceError::InvalidSymbol(s.to_string()))
            }
            _ => Err(WorkspaceError::InvalidSymbol(s.to_string())),
        }
    }
}

impl Serialize for Symbol {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        let mut buf = [0u8; 4];
        s.serialize_str(self.as_char().encode_utf8(&mut buf))
    }
}

impl<'de> Deserialize<'de> for Symbol {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Zone {
    ExpressionRow,
    CandidateTray,
    Held,
    OffTable,
}

impl Zone {
    pub fn is_on_table(self) -> bool {
        matches!(self, Zone::ExpressionRow | Zone::CandidateTray)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Zone::ExpressionRow => "expression_row",
            Zone::CandidateTray => "candidate_tray",
            Zone::Held => "held",
            Zone::OffTable => "off_table",
        }
    }
}

impl FromStr for Zone {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "expression_row" => Ok(Zone::ExpressionRow),
            "candidate_tray" => Ok(Zone::CandidateTray),
            "held" => Ok(Zone::Held),
            "off_table" => Ok(Zone::OffTable),
            other => Err(format!("unknown zone {other:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Pose {
    pub x: f64,
    pub y: f64,
    pub theta: f64,
}

impl Pose {
    pub const fn new(x: f64, y: f64, theta: f64) -> Self {
        Self { x, y, theta }
    }

    pub fn position(&self) -> Point {
        Point::new(self.x, self.y)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockInstance {
    pub block_id: u32,
    pub symbol: Symbol,
    pub pose: Pose,
    pub footprint: f64,
    pub zone: Zone,
}

impl BlockInstance {
    /// Axis-aligned footprint square; rotation is ignored for contact tests.
    pub fn footprint_rect(&self) -> Rect {
        Rect::centered(self.pose.position(), self.footprint, self.footprint)
    }

    pub fn anchor(&self) -> Point {
        self.pose.position()
    }
}

/// Ground-truth workspace state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    /// Keyed by block id.
    pub blocks: BTreeMap<u32, BlockInstance>,
    pub workspace_bounds: Rect,
    /// Inclusive y-interval of the expression row.
    pub expression_band: (f64, f64),
    pub frame_index: u64,
    pub timestamp: f64,
}

impl Default for Scene {
    fn default() -> Self {
        Scene::empty()
    }
}

impl Scene {
    pub fn empty() -> Self {
        Scene {
            blocks: BTreeMap::new(),
            workspace_bounds: Rect::new(0.0, 0.0, WORKSPACE_WIDTH, WORKSPACE_HEIGHT),
            expression_band: (BAND_MIN_Y, BAND_MAX_Y),
            frame_index: 0,
            timestamp: 0.0,
        }
    }

    /// Builds a scene from blocks and checks every invariant.
    pub fn new(blocks: Vec<BlockInstance>) -> Result<Self, WorkspaceError> {
        let mut scene = Scene::empty();
        for block in blocks {
            let id = block.block_id;
            if scene.blocks.insert(id, block).is_some() {
                return Err(WorkspaceError::DuplicateId(id));
            }
        }
        scene.validate()?;
        Ok(scene)
    }

    pub fn in_band(&self, p: Point) -> bool {
        p.y >= self.expression_band.0 && p.y <= self.expression_band.1
    }

    /// Zone an on-table block at `p` belongs to.
    pub fn zone_at(&self, p: Point) -> Zone {
        if self.in_band(p) {
            Zone::ExpressionRow
        } else {
            Zone::CandidateTray
        }
    }

    pub fn block(&self, id: u32) -> Result<&BlockInstance, WorkspaceError> {
        self.blocks.get(&id).ok_or(WorkspaceError::UnknownId(id))
    }

    pub fn on_table(&self) -> impl Iterator<Item = &BlockInstance> {
        self.blocks.values().filter(|b| b.zone.is_on_table())
    }

    pub fn held(&self) -> impl Iterator<Item = &BlockInstance> {
        self.blocks.values().filter(|b| b.zone == Zone::Held)
    }

    /// Checks the scene invariants.
    pub fn validate(&self) -> Result<(), WorkspaceError> {
        let b = &self.workspace_bounds;
        if !(b.width() > 0.0 && b.height() > 0.0) {
            return Err(WorkspaceError::InvalidScene("empty workspace bounds".into()));
        }
        let (lo, hi) = self.expression_band;
        if !(lo < hi && lo >= b.min_y && hi <= b.max_y) {
            return Err(WorkspaceError::InvalidScene(
                "expression band must lie inside the workspace".into(),
            ));
        }
        for block in self.blocks.values() {
            if !(block.footprint > 0.0) {
                return Err(WorkspaceError::InvalidScene(format!(
                    "block {} has non-positive footprint",
                    block.block_id
                )));
            }
            if block.zone.is_on_table() {
                if !b.contains_rect(&block.footprint_rect()) {
                    return Err(WorkspaceError::OutOfBounds(block.block_id));
                }
                if block.zone != self.zone_at(block.anchor()) {
                    return Err(WorkspaceError::InvalidScene(format!(
                        "block {} zone {} disagrees with its position",
                        block.block_id,
                        block.zone.as_str()
                    )));
                }
            }
        }
        let on_table: Vec<&BlockInstance> = self.on_table().collect();
        for (i, a) in on_table.iter().enumerate() {
            for other in &on_table[i + 1..] {
                if a.footprint_rect().overlaps(&other.footprint_rect()) {
                    return Err(WorkspaceError::OverlapViolation {
                        moved: a.block_id,
                        other: other.block_id,
                    });
                }
            }
        }
        Ok(())
    }

    /// First on-table block overlapping a square of `side` centred at `p`,
    /// ignoring `exclude`.
    pub fn first_overlap(&self, p: Point, side: f64, exclude: u32) -> Option<u32> {
        let rect = Rect::centered(p, side, side);
        self.on_table()
            .filter(|b| b.block_id != exclude)
            .find(|b| b.footprint_rect().overlaps(&rect))
            .map(|b| b.block_id)
    }

    /// On-table block whose footprint contains `p`.
    pub fn block_at(&self, p: Point) -> Option<&BlockInstance> {
        self.on_table().find(|b| b.footprint_rect().contains_point(p))
    }
}

/// Where a mutation sends a block.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Placement {
    /// Put down on the table; the zone follows from the position.
    Table { pose: Pose },
    /// Lifted by a hand or gripper; pose tracks the carrier.
    Held { pose: Pose },
    OffTable,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Mutation {
    pub block_id: u32,
    pub to: Placement,
}

impl Mutation {
    pub fn place(block_id: u32, x: f64, y: f64) -> Self {
        Mutation {
            block_id,
            to: Placement::Table { pose: Pose::new(x, y, 0.0) },
        }
    }

    pub fn lift(block_id: u32, pose: Pose) -> Self {
        Mutation { block_id, to: Placement::Held { pose } }
    }
}

/// Applies `mutation`, returning a new scene with the next frame index.
/// Fails without touching the input scene.
pub fn apply_mutation(scene: &Scene, mutation: &Mutation) -> Result<Scene, WorkspaceError> {
    let block = scene.block(mutation.block_id)?;
    let mut moved = block.clone();
    match mutation.to {
        Placement::Table { pose } => {
            let rect = Rect::centered(pose.position(), block.footprint, block.footprint);
            if !scene.workspace_bounds.contains_rect(&rect) {
                return Err(WorkspaceError::OutOfBounds(block.block_id));
            }
            if let Some(other) = scene.first_overlap(pose.position(), block.footprint, block.block_id)
            {
                return Err(WorkspaceError::OverlapViolation { moved: block.block_id, other });
            }
            moved.pose = pose;
            moved.zone = scene.zone_at(pose.position());
        }
        Placement::Held { pose } => {
            moved.pose = pose;
            moved.zone = Zone::Held;
        }
        Placement::OffTable => moved.zone = Zone::OffTable,
    }
    let mut next = scene.clone();
    next.blocks.insert(moved.block_id, moved);
    next.frame_index += 1;
    Ok(next)
}

/// Closed set of placement relations, in a screen-down frame (`above`
/// decreases y).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QualitativeRelation {
    RightOf,
    LeftOf,
    Above,
    Below,
}

impl QualitativeRelation {
    pub const ALL: [QualitativeRelation; 4] = [
        QualitativeRelation::RightOf,
        QualitativeRelation::LeftOf,
        QualitativeRelation::Above,
        QualitativeRelation::Below,
    ];

    pub fn direction(self) -> Point {
        match self {
            QualitativeRelation::RightOf => Point::new(1.0, 0.0),
            QualitativeRelation::LeftOf => Point::new(-1.0, 0.0),
            QualitativeRelation::Above => Point::new(0.0, -1.0),
            QualitativeRelation::Below => Point::new(0.0, 1.0),
        }
    }

    pub fn inverse(self) -> Self {
        match self {
            QualitativeRelation::RightOf => QualitativeRelation::LeftOf,
            QualitativeRelation::LeftOf => QualitativeRelation::RightOf,
            QualitativeRelation::Above => QualitativeRelation::Below,
            QualitativeRelation::Below => QualitativeRelation::Above,
        }
    }

    pub fn is_horizontal(self) -> bool {
        matches!(self, QualitativeRelation::RightOf | QualitativeRelation::LeftOf)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            QualitativeRelation::RightOf => "right_of",
            QualitativeRelation::LeftOf => "left_of",
            QualitativeRelation::Above => "above",
            QualitativeRelation::Below => "below",
        }
    }
}

impl FromStr for QualitativeRelation {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        QualitativeRelation::ALL
            .into_iter()
            .find(|r| r.as_str() == s)
            .ok_or_else(|| format!("unknown relation {s:?}"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RelationTolerance {
    pub min_along: f64,
    pub max_perp: f64,
}

impl RelationTolerance {
    pub fn for_footprint(side: f64) -> Self {
        RelationTolerance { min_along: 0.25 * side, max_perp: 0.5 * side }
    }
}

impl Default for RelationTolerance {
    fn default() -> Self {
        Self::for_footprint(BLOCK_SIDE)
    }
}

/// Anything that resolves integer ids to planar anchors.
pub trait AnchorLookup {
    fn anchor_of(&self, id: u32) -> Option<Point>;
}

impl AnchorLookup for Scene {
    fn anchor_of(&self, id: u32) -> Option<Point> {
        self.blocks.get(&id).map(BlockInstance::anchor)
    }
}

impl AnchorLookup for BTreeMap<u32, Point> {
    fn anchor_of(&self, id: u32) -> Option<Point> {
        self.get(&id).copied()
    }
}

/// Relation test on raw anchors.
pub fn relation_between(
    subject: Point,
    reference: Point,
    relation: QualitativeRelation,
    tolerance: RelationTolerance,
) -> bool {
    let d = subject - reference;
    let dir = relation.direction();
    let along = d.dot(dir);
    let perp = (d - dir * along).norm();
    along > 0.0 && along >= tolerance.min_along && perp <= tolerance.max_perp
}

pub fn relation_holds<L: AnchorLookup + ?Sized>(
    lookup: &L,
    subject_id: u32,
    reference_id: u32,
    relation: QualitativeRelation,
    tolerance: RelationTolerance,
) -> Result<bool, WorkspaceError> {
    let subject = lookup.anchor_of(subject_id).ok_or(WorkspaceError::UnknownId(subject_id))?;
    let reference =
        lookup.anchor_of(reference_id).ok_or(WorkspaceError::UnknownId(reference_id))?;
    Ok(relation_between(subject, reference, relation, tolerance))
}

/// One segmented term of an expression row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Term {
    Number { value: i64, block_ids: Vec<u32> },
    Operator { op: Symbol, block_id: u32 },
    Equals { block_id: u32 },
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ExpressionParse {
    /// Band blocks sorted by ascending anchor x.
    pub tokens: Vec<(Symbol, u32)>,
    pub terms: Vec<Term>,
    /// The row ends with `=`.
    pub complete: bool,
    /// Value of `lhs op rhs` once the row reaches `=` and is evaluable.
    pub value: Option<i64>,
    /// Result already written to the right of `=`, if any.
    pub written_result: Option<i64>,
}

impl ExpressionParse {
    /// Block id of the `=` token.
    pub fn equals_id(&self) -> Option<u32> {
        self.terms.iter().find_map(|t| match t {
            Term::Equals { block_id } => Some(*block_id),
            _ => None,
        })
    }

    /// `lhs op rhs` when the row has reached the equals sign.
    pub fn operation(&self) -> Option<(i64, Operator, i64)> {
        match self.terms.as_slice() {
            [Term::Number { value: a, .. }, Term::Operator { op: Symbol::Op(op), .. }, Term::Number { value: b, .. }, Term::Equals { .. }, ..] => {
                Some((*a, *op, *b))
            }
            _ => None,
        }
    }
}

/// A band token located on the row: symbol, id and anchor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RowToken {
    pub symbol: Symbol,
    pub id: u32,
    pub anchor: Point,
}

/// Splits tokens (any order) into left-to-right groups separated by gaps
/// larger than `group_gap`.
pub fn group_row(mut tokens: Vec<RowToken>, group_gap: f64) -> Vec<Vec<RowToken>> {
    sort_row(&mut tokens);
    let mut groups: Vec<Vec<RowToken>> = Vec::new();
    for tok in tokens {
        match groups.last_mut() {
            Some(g) if tok.anchor.x - g.last().map_or(f64::MIN, |t| t.anchor.x) <= group_gap => {
                g.push(tok)
            }
            _ => groups.push(vec![tok]),
        }
    }
    groups
}

fn sort_row(tokens: &mut [RowToken]) {
    tokens.sort_by(|a, b| a.anchor.x.total_cmp(&b.anchor.x).then(a.id.cmp(&b.id)));
}

/// Parses a row of tokens as `number op number = [−]number`, accepting any
/// prefix of that shape.
pub fn parse_row(mut tokens: Vec<RowToken>, merge_gap: f64) -> Result<ExpressionParse, WorkspaceError> {
    sort_row(&mut tokens);
    let mut terms: Vec<Term> = Vec::new();
    let mut prev: Option<RowToken> = None;
    let mut pending_sign: Option<u32> = None;
    for tok in &tokens {
        match tok.symbol {
            Symbol::Digit(d) => {
                let extends = matches!(
                    (prev, terms.last()),
                    (Some(p), Some(Term::Number { .. }))
                        if p.symbol.is_digit() && tok.anchor.x - p.anchor.x < merge_gap
                );
                if extends {
                    if let Some(Term::Number { value, block_ids }) = terms.last_mut() {
                        let magnitude = value
                            .checked_abs()
                            .and_then(|m| m.checked_mul(10))
                            .and_then(|m| m.checked_add(i64::from(d)))
                            .ok_or_else(|| {
                                WorkspaceError::MalformedExpression("operand too large".into())
                            })?;
                        *value = if *value < 0 { -magnitude } else { magnitude };
                        block_ids.push(tok.id);
                    }
                } else {
                    let position = terms.len();
                    // number slots are 0, 2 and 4 (the result)
                    if !matches!(position, 0 | 2 | 4) {
                        return Err(WorkspaceError::MalformedExpression(format!(
                            "unexpected digit {} at term {position}",
                            tok.symbol
                        )));
                    }
                    let mut block_ids = Vec::new();
                    let mut value = i64::from(d);
                    if let Some(sign) = pending_sign.take() {
                        block_ids.push(sign);
                        value = -value;
                    }
                    block_ids.push(tok.id);
                    terms.push(Term::Number { value, block_ids });
                }
            }
            Symbol::Op(op) => {
                if terms.len() == 4 && op == Operator::Sub && pending_sign.is_none() {
                    pending_sign = Some(tok.id);
                } else if terms.len() == 1 && pending_sign.is_none() {
                    terms.push(Term::Operator { op: tok.symbol, block_id: tok.id });
                } else {
                    return Err(WorkspaceError::MalformedExpression(format!(
                        "unexpected operator {} at term {}",
                        tok.symbol,
                        terms.len()
                    )));
                }
            }
            Symbol::Equals => {
                if terms.len() != 3 {
                    return Err(WorkspaceError::MalformedExpression(format!(
                        "unexpected '=' at term {}",
                        terms.len()
                    )));
                }
                terms.push(Term::Equals { block_id: tok.id });
            }
        }
        prev = Some(*tok);
    }
    if pending_sign.is_some() {
        return Err(WorkspaceError::MalformedExpression("dangling sign".into()));
    }
    let complete = matches!(terms.last(), Some(Term::Equals { .. }));
    let mut parse = ExpressionParse {
        tokens: tokens.iter().map(|t| (t.symbol, t.id)).collect(),
        terms,
        complete,
        value: None,
        written_result: None,
    };
    if let Some((a, op, b)) = parse.operation() {
        parse.value = evaluate(a, op, b).ok();
    }
    if let Some(Term::Number { value, .. }) = parse.terms.get(4) {
        parse.written_result = Some(*value);
    }
    Ok(parse)
}

pub fn band_tokens(scene: &Scene) -> Vec<RowToken> {
    scene
        .on_table()
        .filter(|b| b.zone == Zone::ExpressionRow)
        .map(|b| RowToken { symbol: b.symbol, id: b.block_id, anchor: b.anchor() })
        .collect()
}

/// Parses the blocks of the expression row.
pub fn parse_expression(scene: &Scene) -> Result<ExpressionParse, WorkspaceError> {
    parse_row(band_tokens(scene), DIGIT_MERGE_FACTOR * typical_footprint(scene))
}

pub fn typical_footprint(scene: &Scene) -> f64 {
    scene.blocks.values().next().map_or(BLOCK_SIDE, |b| b.footprint)
}

/// Exact integer evaluation of `lhs op rhs`.
pub fn evaluate(lhs: i64, op: Operator, rhs: i64) -> Result<i64, ArithmeticError> {
    op.apply(lhs, rhs)
}

/// Reads a scene fixture: one `id symbol x y theta zone` record per line,
/// `#` comments, optional `@bounds minx miny maxx maxy` and `@band lo hi`
/// directives. Block side defaults to [`BLOCK_SIDE`] and may be changed with
/// `@footprint side`.
pub fn parse_scene_fixture(text: &str) -> Result<Scene, WorkspaceError> {
    let mut scene = Scene::empty();
    let mut side = BLOCK_SIDE;
    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let err = |message: String| WorkspaceError::Fixture { line: line_no, message };
        let fields: Vec<&str> = line.split_whitespace().collect();
        let num = |s: &str| s.parse::<f64>().map_err(|_| err(format!("bad number {s:?}")));
        match fields[0] {
            "@bounds" if fields.len() == 5 => {
                scene.workspace_bounds =
                    Rect::new(num(fields[1])?, num(fields[2])?, num(fields[3])?, num(fields[4])?);
            }
            "@band" if fields.len() == 3 => {
                scene.expression_band = (num(fields[1])?, num(fields[2])?);
            }
            "@footprint" if fields.len() == 2 => side = num(fields[1])?,
            d if d.starts_with('@') => return Err(err(format!("bad directive {line:?}"))),
            _ => {
                if fields.len() != 6 {
                    return Err(err(format!("expected 6 fields, found {}", fields.len())));
                }
                let block_id =
                    fields[0].parse::<u32>().map_err(|_| err(format!("bad id {:?}", fields[0])))?;
                let symbol: Symbol = fields[1].parse().map_err(|e: WorkspaceError| err(e.to_string()))?;
                let pose = Pose::new(num(fields[2])?, num(fields[3])?, num(fields[4])?);
                let zone: Zone = fields[5].parse().map_err(err)?;
                let block = BlockInstance { block_id, symbol, pose, footprint: side, zone };
                if scene.blocks.insert(block_id, block).is_some() {
                    return Err(err(format!("duplicate block id {block_id}")));
                }
            }
        }
    }
    scene.validate()?;
    Ok(scene)
}

/// Writes a scene in the fixture format read by [`parse_scene_fixture`].
pub fn write_scene_fixture(scene: &Scene) -> String {
    let b = scene.workspace_bounds;
    let mut out = format!(
        "@bounds {} {} {} {}\n@band {} {}\n@footprint {}\n",
        b.min_x,
        b.min_y,
        b.max_x,
        b.max_y,
        scene.expression_band.0,
        scene.expression_band.1,
        typical_footprint(scene)
    );
    for block in scene.blocks.values() {
        out.push_str(&format!(
            "{} {} {} {} {} {}\n",
            block.block_id,
            block.symbol.as_ascii(),
            block.pose.x,
            block.pose.y,
            block.pose.theta,
            block.zone.as_str()
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn block(id: u32, sym: char, x: f64, y: f64) -> BlockInstance {
        let symbol = Symbol::from_char(sym).unwrap();
        let zone = if (BAND_MIN_Y..=BAND_MAX_Y).contains(&y) {
            Zone::ExpressionRow
        } else {
            Zone::CandidateTray
        };
        BlockInstance { block_id: id, symbol, pose: Pose::new(x, y, 0.0), footprint: BLOCK_SIDE, zone }
    }

    fn anchors(pairs: &[(u32, (f64, f64))]) -> BTreeMap<u32, Point> {
        pairs.iter().map(|&(id, (x, y))| (id, Point::new(x, y))).collect()
    }

    #[test]
    fn relation_examples() {
        let tol = RelationTolerance { min_along: 10.0, max_perp: 20.0 };
        let m = anchors(&[(1, (540.0, 300.0)), (2, (500.0, 300.0)), (3, (540.0, 330.0))]);
        assert!(relation_holds(&m, 1, 2, QualitativeRelation::RightOf, tol).unwrap());
        let same = anchors(&[(1, (500.0, 300.0)), (2, (500.0, 300.0))]);
        assert!(!relation_holds(&same, 1, 2, QualitativeRelation::RightOf, tol).unwrap());
        // displacement (40, 30): along 40 passes, perpendicular 30 > 20
        assert!(!relation_holds(&m, 3, 2, QualitativeRelation::RightOf, tol).unwrap());
        assert_eq!(
            relation_holds(&m, 9, 2, QualitativeRelation::RightOf, tol),
            Err(WorkspaceError::UnknownId(9))
        );
    }

    #[test]
    fn relation_directions_are_distinct_axis_units() {
        let dirs: Vec<Point> = QualitativeRelation::ALL.iter().map(|r| r.direction()).collect();
        for (i, a) in dirs.iter().enumerate() {
            assert_eq!(a.norm(), 1.0);
            assert!(a.x == 0.0 || a.y == 0.0);
            for b in &dirs[i + 1..] {
                assert_ne!(a, b);
            }
        }
        assert_eq!(QualitativeRelation::Above.direction(), Point::new(0.0, -1.0));
    }

    #[test]
    fn parses_two_plus_three() {
        let scene = Scene::new(vec![
            block(0, '2', 200.0, 300.0),
            block(1, '+', 250.0, 300.0),
            block(2, '3', 300.0, 300.0),
            block(3, '=', 350.0, 300.0),
            block(4, '5', 200.0, 450.0),
        ])
        .unwrap();
        let p = parse_expression(&scene).unwrap();
        assert_eq!(p.tokens.len(), 4);
        assert!(p.complete);
        assert_eq!(p.value, Some(5));
        assert_eq!(p.equals_id(), Some(3));
    }

    #[test]
    fn parses_multiplication_and_empty_band() {
        let scene = Scene::new(vec![
            block(0, '7', 200.0, 300.0),
            block(1, 'x', 260.0, 300.0),
            block(2, '8', 320.0, 300.0),
            block(3, '=', 380.0, 300.0),
        ])
        .unwrap();
        assert_eq!(parse_expression(&scene).unwrap().value, Some(56));

        let empty = Scene::new(vec![block(0, '1', 100.0, 450.0)]).unwrap();
        let p = parse_expression(&empty).unwrap();
        assert!(p.tokens.is_empty());
        assert!(!p.complete);
        assert_eq!(p.value, None);
    }

    #[test]
    fn merges_close_digits_and_reads_signed_results() {
        let scene = Scene::new(vec![
            block(0, '1', 100.0, 300.0),
            block(1, '2', 145.0, 300.0),
            block(2, '-', 200.0, 300.0),
            block(3, '5', 250.0, 300.0),
            block(4, '=', 300.0, 300.0),
            block(5, '-', 345.0, 300.0),
            block(6, '7', 390.0, 300.0),
        ])
        .unwrap();
        let p = parse_expression(&scene).unwrap();
        assert_eq!(p.operation(), Some((12, Operator::Sub, 5)));
        assert_eq!(p.value, Some(7));
        assert_eq!(p.written_result, Some(-7));
        assert!(!p.complete);
    }

    #[test]
    fn far_apart_digits_do_not_merge() {
        let scene = Scene::new(vec![block(0, '1', 100.0, 300.0), block(1, '2', 170.0, 300.0)]).unwrap();
        assert!(matches!(
            parse_expression(&scene),
            Err(WorkspaceError::MalformedExpression(_))
        ));
    }

    #[test]
    fn consecutive_operators_are_malformed() {
        let scene = Scene::new(vec![
            block(0, '2', 100.0, 300.0),
            block(1, '+', 150.0, 300.0),
            block(2, '*', 200.0, 300.0),
        ])
        .unwrap();
        assert!(matches!(
            parse_expression(&scene),
            Err(WorkspaceError::MalformedExpression(_))
        ));
    }

    #[test]
    fn evaluate_examples() {
        assert_eq!(evaluate(2, Operator::Add, 3), Ok(5));
        assert_eq!(evaluate(4, Operator::Sub, 4), Ok(0));
        assert_eq!(evaluate(7, Operator::Div, 2), Err(ArithmeticError::NonIntegerResult));
        assert_eq!(evaluate(7, Operator::Div, 0), Err(ArithmeticError::DivisionByZero));
    }

    #[test]
    fn spell_includes_sign() {
        assert_eq!(Symbol::spell(56), vec![Symbol::Digit(5), Symbol::Digit(6)]);
        assert_eq!(Symbol::spell(-4), vec![Symbol::MINUS, Symbol::Digit(4)]);
        assert_eq!(Symbol::spell(0), vec![Symbol::Digit(0)]);
    }

    #[test]
    fn mutation_examples() {
        let scene = Scene::new(vec![
            block(1, '=', 300.0, 300.0),
            block(10, '3', 200.0, 450.0),
            block(11, '5', 300.0, 450.0),
        ])
        .unwrap();
        let moved = apply_mutation(&scene, &Mutation::place(10, 250.0, 300.0)).unwrap();
        assert_eq!(moved.blocks[&10].zone, Zone::ExpressionRow);
        assert_eq!(moved.frame_index, scene.frame_index + 1);

        let same = apply_mutation(&scene, &Mutation::place(10, 200.0, 450.0)).unwrap();
        assert_eq!(same.blocks, scene.blocks);
        assert_eq!(same.frame_index, 1);

        assert_eq!(
            apply_mutation(&scene, &Mutation::place(10, 310.0, 450.0)),
            Err(WorkspaceError::OverlapViolation { moved: 10, other: 11 })
        );
        assert_eq!(
            apply_mutation(&scene, &Mutation::place(10, 990.0, 450.0)),
            Err(WorkspaceError::OutOfBounds(10))
        );
        assert_eq!(
            apply_mutation(&scene, &Mutation::place(99, 0.0, 0.0)),
            Err(WorkspaceError::UnknownId(99))
        );
    }

    #[test]
    fn fixture_round_trip() {
        let text = "# fig 3 start\n0 2 200 300 0 expression_row\n1 = 700 450 0 candidate_tray\n10 3 400 450 0 candidate_tray\n";
        let scene = parse_scene_fixture(text).unwrap();
        assert_eq!(scene.blocks.len(), 3);
        assert_eq!(scene.blocks[&1].symbol, Symbol::Equals);
        let again = parse_scene_fixture(&write_scene_fixture(&scene)).unwrap();
        assert_eq!(again, scene);
    }

    #[test]
    fn fixture_errors_carry_line_numbers() {
        let err = parse_scene_fixture("0 2 200 300 0 expression_row\n1 ? 1 1 0 held\n").unwrap_err();
        assert!(matches!(err, WorkspaceError::Fixture { line: 2, .. }));
        let wrong_zone = parse_scene_fixture("0 2 200 450 0 expression_row\n");
        assert!(matches!(wrong_zone, Err(WorkspaceError::InvalidScene(_))));
    }
}
