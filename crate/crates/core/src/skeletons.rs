//! Farm/pipe/seq skeleton algebra and its normal-form reduction.
//!
//! Applications describe their parallel structure as a tree of three node
//! kinds: `seq(name)` applies one named processor to each stream item,
//! `pipe(a, b, ...)` feeds each item through stages in order, and `farm(x)`
//! replicates its inner expression over workers. Before execution every tree
//! is reduced to its normal form: a single farm whose worker applies the
//! tree's seq leaves left to right. [`eval_sequential`] is the sequential
//! reference semantics used to validate that reduction.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use thiserror::Error;

use crate::protocol::JobPlan;

/// Algebraic tree of the parallel structure of an application.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SkeletonExpr {
    /// A single named processor applied to each task.
    Seq(String),
    /// Stages applied in order; must have at least one stage.
    Pipe(Vec<SkeletonExpr>),
    /// Replication wrapper; semantically the identity on the stream.
    Farm(Box<SkeletonExpr>),
}

impl SkeletonExpr {
    pub fn seq(name: impl Into<String>) -> Self {
        SkeletonExpr::Seq(name.into())
    }

    pub fn farm(inner: SkeletonExpr) -> Self {
        SkeletonExpr::Farm(Box::new(inner))
    }

    pub fn pipe(stages: Vec<SkeletonExpr>) -> Self {
        SkeletonExpr::Pipe(stages)
    }

    /// Seq leaves, left to right.
    pub fn leaves(&self) -> Vec<&str> {
        let mut out = Vec::new();
        self.collect_leaves(&mut out);
        out
    }

    fn collect_leaves<'a>(&'a self, out: &mut Vec<&'a str>) {
        match self {
            SkeletonExpr::Seq(name) => out.push(name),
            SkeletonExpr::Pipe(stages) => {
                for s in stages {
                    s.collect_leaves(out);
                }
            }
            SkeletonExpr::Farm(inner) => inner.collect_leaves(out),
        }
    }

    fn check_no_empty_pipe(&self) -> Result<(), SkeletonError> {
        match self {
            SkeletonExpr::Seq(_) => Ok(()),
            SkeletonExpr::Pipe(stages) => {
                if stages.is_empty() {
                    return Err(SkeletonError::EmptyExpression);
                }
                stages.iter().try_for_each(Self::check_no_empty_pipe)
            }
            SkeletonExpr::Farm(inner) => inner.check_no_empty_pipe(),
        }
    }
}

impl fmt::Display for SkeletonExpr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SkeletonExpr::Seq(name) => write!(f, "seq({name})"),
            SkeletonExpr::Pipe(stages) => {
                write!(f, "pipe(")?;
                for (i, s) in stages.iter().enumerate() {
                    if i > 0 {
                        write!(f, ", ")?;
                    }
                    write!(f, "{s}")?;
                }
                write!(f, ")")
            }
            SkeletonExpr::Farm(inner) => write!(f, "farm({inner})"),
        }
    }
}

/// The reduced form of a skeleton tree: one farm whose worker applies these
/// processors in order to each task.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NormalForm {
    stages: Vec<String>,
}

impl NormalForm {
    pub fn stages(&self) -> &[String] {
        &self.stages
    }

    /// The normal form as a skeleton tree, `farm(pipe(seq(s1), ...))`.
    pub fn to_expr(&self) -> SkeletonExpr {
        SkeletonExpr::farm(SkeletonExpr::pipe(
            self.stages.iter().map(SkeletonExpr::seq).collect(),
        ))
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum SkeletonError {
    #[error("skeleton contains an empty pipe")]
    EmptyExpression,
    #[error("unknown processor {0:?}")]
    UnknownProcessor(String),
}

/// Reduces `expr` to its normal form: farm wrappers are erased and pipe
/// nests flatten into the left-to-right sequence of seq leaves.
pub fn normalize(expr: &SkeletonExpr) -> Result<NormalForm, SkeletonError> {
    expr.check_no_empty_pipe()?;
    let stages: Vec<String> = expr.leaves().into_iter().map(String::from).collect();
    debug_assert!(!stages.is_empty());
    Ok(NormalForm { stages })
}

/// A pure per-task transform, the evaluation-time meaning of one processor.
pub type StageFn = Arc<dyn Fn(&[u8]) -> Vec<u8> + Send + Sync>;

/// Name-to-transform table for [`eval_sequential`].
#[derive(Clone, Default)]
pub struct StageTable {
    fns: BTreeMap<String, StageFn>,
}

impl StageTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(
        &mut self,
        name: impl Into<String>,
        f: impl Fn(&[u8]) -> Vec<u8> + Send + Sync + 'static,
    ) {
        self.fns.insert(name.into(), Arc::new(f));
    }

    pub fn get(&self, name: &str) -> Option<&StageFn> {
        self.fns.get(name)
    }
}

/// Sequential reference evaluation: per-task outputs in input order.
///
/// `Seq` applies its processor to each task, `Pipe` chains stages, `Farm`
/// is the identity on the stream. Processors must be deterministic for this
/// to serve as an oracle.
pub fn eval_sequential(
    expr: &SkeletonExpr,
    tasks: &[Vec<u8>],
    table: &StageTable,
) -> Result<Vec<Vec<u8>>, SkeletonError> {
    expr.check_no_empty_pipe()?;
    // Fail on unknown names even for an empty task list.
    for leaf in expr.leaves() {
        if table.get(leaf).is_none() {
            return Err(SkeletonError::UnknownProcessor(leaf.to_string()));
        }
    }
    tasks
        .iter()
        .map(|t| eval_task(expr, t.clone(), table))
        .collect()
}

fn eval_task(
    expr: &SkeletonExpr,
    input: Vec<u8>,
    table: &StageTable,
) -> Result<Vec<u8>, SkeletonError> {
    match expr {
        SkeletonExpr::Seq(name) => {
            let f = table
                .get(name)
                .ok_or_else(|| SkeletonError::UnknownProcessor(name.clone()))?;
            Ok(f(&input))
        }
        SkeletonExpr::Pipe(stages) => {
            let mut cur = input;
            for s in stages {
                cur = eval_task(s, cur, table)?;
            }
            Ok(cur)
        }
        SkeletonExpr::Farm(inner) => eval_task(inner, input, table),
    }
}

/// A job as submitted by a user: the skeleton plus per-processor
/// configuration blobs. Processors without an entry run with empty config.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct JobSpec {
    pub skeleton: SkeletonExpr,
    pub processor_config: BTreeMap<String, Vec<u8>>,
}

impl JobSpec {
    pub fn new(skeleton: SkeletonExpr) -> Self {
        JobSpec {
            skeleton,
            processor_config: BTreeMap::new(),
        }
    }

    /// Normalizes the skeleton into the executable plan shipped to workers.
    pub fn to_plan(&self) -> Result<JobPlan, SkeletonError> {
        let normal = normalize(&self.skeleton)?;
        Ok(JobPlan {
            stages: normal.stages().to_vec(),
            config: self.processor_config.clone(),
        })
    }
}

#[derive(Debug, Error, PartialEq)]
#[error("skeleton syntax error at byte {at}: {what}")]
pub struct ParseError {
    pub at: usize,
    pub what: String,
}

/// Parses the textual skeleton syntax: `farm(x)`, `pipe(x, y, ...)`,
/// `seq(name)`.
pub fn parse(src: &str) -> Result<SkeletonExpr, ParseError> {
    let mut p = Parser {
        src: src.as_bytes(),
        pos: 0,
    };
    let expr = p.expr()?;
    p.skip_ws();
    if p.pos != p.src.len() {
        return Err(p.err("trailing input after expression"));
    }
    Ok(expr)
}

struct Parser<'a> {
    src: &'a [u8],
    pos: usize,
}

impl Parser<'_> {
    fn err(&self, what: &str) -> ParseError {
        ParseError {
            at: self.pos,
            what: what.to_string(),
        }
    }

    fn skip_ws(&mut self) {
        while self.pos < self.src.len() && self.src[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
    }

    fn expect(&mut self, ch: u8) -> Result<(), ParseError> {
        self.skip_ws();
        if self.pos < self.src.len() && self.src[self.pos] == ch {
            self.pos += 1;
            Ok(())
        } else {
            Err(self.err(&format!("expected {:?}", ch as char)))
        }
    }

    fn word(&mut self) -> String {
        self.skip_ws();
        let start = self.pos;
        while self.pos < self.src.len() {
            let c = self.src[self.pos];
            if c.is_ascii_alphanumeric() || matches!(c, b'_' | b'-' | b'.') {
                self.pos += 1;
            } else {
                break;
            }
        }
        String::from_utf8_lossy(&self.src[start..self.pos]).into_owned()
    }

    fn expr(&mut self) -> Result<SkeletonExpr, ParseError> {
        let head = self.word();
        match head.as_str() {
            "seq" => {
                self.expect(b'(')?;
                let name = self.word();
                if name.is_empty() {
                    return Err(self.err("seq needs a processor name"));
                }
                self.expect(b')')?;
                Ok(SkeletonExpr::Seq(name))
            }
            "farm" => {
                self.expect(b'(')?;
                let inner = self.expr()?;
                self.expect(b')')?;
                Ok(SkeletonExpr::farm(inner))
            }
            "pipe" => {
                self.expect(b'(')?;
                let mut stages = vec![self.expr()?];
                loop {
                    self.skip_ws();
                    if self.pos < self.src.len() && self.src[self.pos] == b',' {
                        self.pos += 1;
                        stages.push(self.expr()?);
                    } else {
                        break;
                    }
                }
                self.expect(b')')?;
                Ok(SkeletonExpr::Pipe(stages))
            }
            "" => Err(self.err("expected seq(), farm() or pipe()")),
            other => Err(self.err(&format!("unknown skeleton {other:?}"))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn table() -> StageTable {
        let mut t = StageTable::new();
        t.insert("identity", |b: &[u8]| b.to_vec());
        t.insert("rev", |b: &[u8]| b.iter().rev().copied().collect());
        for i in 0u8..6 {
            t.insert(format!("app{i}"), move |b: &[u8]| {
                let mut v = b.to_vec();
                v.push(i);
                v
            });
        }
        t
    }

    #[test]
    fn farm_of_seq_is_already_normal() {
        let e = SkeletonExpr::farm(SkeletonExpr::seq("f"));
        assert_eq!(normalize(&e).unwrap().stages(), ["f"]);
    }

    #[test]
    fn pipe_of_farms_flattens() {
        let e = SkeletonExpr::pipe(vec![
            SkeletonExpr::farm(SkeletonExpr::seq("f")),
            SkeletonExpr::farm(SkeletonExpr::seq("g")),
        ]);
        assert_eq!(normalize(&e).unwrap().stages(), ["f", "g"]);
    }

    #[test]
    fn nested_pipes_flatten_in_leaf_order() {
        let e = SkeletonExpr::farm(SkeletonExpr::pipe(vec![
            SkeletonExpr::seq("a"),
            SkeletonExpr::pipe(vec![SkeletonExpr::seq("b"), SkeletonExpr::seq("c")]),
        ]));
        assert_eq!(normalize(&e).unwrap().stages(), ["a", "b", "c"]);
    }

    #[test]
    fn empty_pipe_is_rejected() {
        let e = SkeletonExpr::farm(SkeletonExpr::pipe(vec![]));
        assert_eq!(normalize(&e), Err(SkeletonError::EmptyExpression));
        assert_eq!(
            eval_sequential(&e, &[b"x".to_vec()], &table()),
            Err(SkeletonError::EmptyExpression)
        );
    }

    #[test]
    fn eval_identity() {
        let e = SkeletonExpr::seq("identity");
        let out = eval_sequential(&e, &[b"x".to_vec()], &table()).unwrap();
        assert_eq!(out, vec![b"x".to_vec()]);
    }

    #[test]
    fn eval_pipe_is_composition() {
        let t = table();
        let piped = SkeletonExpr::pipe(vec![SkeletonExpr::seq("app0"), SkeletonExpr::seq("rev")]);
        let tasks = vec![b"ab".to_vec(), b"".to_vec()];
        let out = eval_sequential(&piped, &tasks, &t).unwrap();
        let composed: Vec<Vec<u8>> = tasks
            .iter()
            .map(|x| {
                let mut v = x.clone();
                v.push(0);
                v.iter().rev().copied().collect()
            })
            .collect();
        assert_eq!(out, composed);
    }

    #[test]
    fn eval_unknown_processor() {
        let e = SkeletonExpr::seq("nope");
        assert_eq!(
            eval_sequential(&e, &[], &table()),
            Err(SkeletonError::UnknownProcessor("nope".into()))
        );
    }

    #[test]
    fn parse_round_trips_display() {
        let src = "farm(pipe(seq(a), farm(seq(b)), pipe(seq(c), seq(d))))";
        let e = parse(src).unwrap();
        assert_eq!(parse(&e.to_string()).unwrap(), e);
        assert_eq!(e.leaves(), ["a", "b", "c", "d"]);
    }

    #[test]
    fn parse_rejects_garbage() {
        assert!(parse("").is_err());
        assert!(parse("map(seq(a))").is_err());
        assert!(parse("seq()").is_err());
        assert!(parse("pipe()").is_err());
        assert!(parse("seq(a) extra").is_err());
        assert!(parse("farm(seq(a)").is_err());
    }

    fn arb_expr() -> impl Strategy<Value = SkeletonExpr> {
        let leaf = prop_oneof![
            (0u8..6).prop_map(|i| SkeletonExpr::seq(format!("app{i}"))),
            Just(SkeletonExpr::seq("rev")),
            Just(SkeletonExpr::seq("identity")),
        ];
        leaf.prop_recursive(4, 32, 4, |inner| {
            prop_oneof![
                inner.clone().prop_map(SkeletonExpr::farm),
                prop::collection::vec(inner, 1..4).prop_map(SkeletonExpr::Pipe),
            ]
        })
    }

    proptest! {
        #[test]
        fn normalization_preserves_semantics(
            expr in arb_expr(),
            tasks in prop::collection::vec(prop::collection::vec(any::<u8>(), 0..16), 0..8),
        ) {
            let t = table();
            let direct = eval_sequential(&expr, &tasks, &t).unwrap();
            let normal = normalize(&expr).unwrap();
            let reduced = eval_sequential(&normal.to_expr(), &tasks, &t).unwrap();
            prop_assert_eq!(direct, reduced);
        }

        #[test]
        fn normalization_is_idempotent(expr in arb_expr()) {
            let once = normalize(&expr).unwrap();
            let twice = normalize(&once.to_expr()).unwrap();
            prop_assert_eq!(once, twice);
        }

        #[test]
        fn stage_count_equals_leaf_count(expr in arb_expr()) {
            let normal = normalize(&expr).unwrap();
            prop_assert_eq!(normal.stages().len(), expr.leaves().len());
        }
    }
}
