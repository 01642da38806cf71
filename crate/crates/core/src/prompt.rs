//! Prompt collection, prompt-to-token assembly and language prototypes.
//!
//! The collection holds `J` groups of `L` prompts, each an `M x E` matrix of
//! context vectors shared by every class. A class prompt is those rows plus
//! the class-token embedding.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::encoders::{EmbeddingTable, FrozenTextEncoder};
use crate::error::{config_err, dim_err, Error, Result};
use crate::rng::{self, Stream};

/// Standard deviation of the initial context entries.
pub const PROMPT_INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassPosition {
    Front,
    Middle,
    #[default]
    End,
}

impl fmt::Display for ClassPosition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ClassPosition::Front => "front",
            ClassPosition::Middle => "middle",
            ClassPosition::End => "end",
        })
    }
}

impl FromStr for ClassPosition {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "front" => Ok(ClassPosition::Front),
            "middle" => Ok(ClassPosition::Middle),
            "end" => Ok(ClassPosition::End),
            other => config_err(format!("unknown class-token position `{other}`")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptCollection {
    /// `[J, L, M, E]`
    pub tensor: Tensor,
    pub position: ClassPosition,
}

impl PromptCollection {
    pub fn new(
        groups: usize,
        per_group: usize,
        context_len: usize,
        embed: usize,
        position: ClassPosition,
        stream: &mut Stream,
    ) -> Result<Self> {
        if groups == 0 || per_group == 0 || context_len == 0 || embed == 0 {
            return config_err("prompt collection sizes must be positive");
        }
        Ok(Self {
            tensor: rng::normal(
                &[groups, per_group, context_len, embed],
                PROMPT_INIT_STD,
                stream,
            ),
            position,
        })
    }

    pub fn groups(&self) -> usize {
        self.tensor.shape()[0]
    }

    pub fn per_group(&self) -> usize {
        self.tensor.shape()[1]
    }

    pub fn context_len(&self) -> usize {
        self.tensor.shape()[2]
    }

    pub fn embed(&self) -> usize {
        self.tensor.shape()[3]
    }

    fn check_group(&self, j: usize) -> Result<()> {
        if j >= self.groups() {
            return Err(Error::Index {
                what: "prompt groups",
                index: j,
                len: self.groups(),
            });
        }
        Ok(())
    }

    /// The `M x E` context matrix of prompt `l` in group `j`.
    pub fn prompt(&self, j: usize, l: usize) -> Result<Tensor> {
        self.check_group(j)?;
        if l >= self.per_group() {
            return Err(Error::Index {
                what: "prompts per group",
                index: l,
                len: self.per_group(),
            });
        }
        let n = self.context_len() * self.embed();
        let start = (j * self.per_group() + l) * n;
        Tensor::new(
            vec![self.context_len(), self.embed()],
            self.tensor.data()[start..start + n].to_vec(),
        )
    }

    /// Text features of every prompt for class `k`, `[J * L]` rows of `D`.
    pub fn all_features(
        &self,
        text: &FrozenTextEncoder,
        table: &EmbeddingTable,
        k: usize,
    ) -> Result<Vec<Tensor>> {
        let mut out = Vec::with_capacity(self.groups() * self.per_group());
        for j in 0..self.groups() {
            for l in 0..self.per_group() {
                let tokens = build_prompt_text(&self.prompt(j, l)?, k, table, self.position)?;
                out.push(text.encode_text(&tokens)?);
            }
        }
        Ok(out)
    }
}

/// Concatenates the context rows with the class-token row on the tape.
pub fn build_prompt_text_on(
    tape: &mut Tape,
    context: Var,
    class_row: Var,
    position: ClassPosition,
) -> Result<Var> {
    let shape = tape.try_value(context)?.shape().to_vec();
    let cls = tape.try_value(class_row)?.shape().to_vec();
    if shape.len() != 2 || cls.len() != 2 || cls[0] != 1 || cls[1] != shape[1] {
        return dim_err(format!(
            "prompt context {shape:?} and class row {cls:?} do not conform"
        ));
    }
    match position {
        ClassPosition::Front => tape.concat(&[class_row, context], 0),
        ClassPosition::End => tape.concat(&[context, class_row], 0),
        ClassPosition::Middle => {
            let half = shape[0] / 2;
            let head = tape.slice(context, 0, half)?;
            let tail = tape.slice(context, half, shape[0] - half)?;
            tape.concat(&[head, class_row, tail], 0)
        }
    }
}

pub fn build_prompt_text(
    context: &Tensor,
    k: usize,
    table: &EmbeddingTable,
    position: ClassPosition,
) -> Result<Tensor> {
    let row = table.row(k)?;
    let mut tape = Tape::new();
    let c = tape.constant(context.clone());
    let r = tape.constant(row);
    let t = build_prompt_text_on(&mut tape, c, r, position)?;
    Ok(tape.value(t).clone())
}

/// Per-step view of a registered prompt tensor: context matrices are sliced
/// from the `[J, L, M, E]` parameter lazily and cached.
pub struct PromptGraph {
    pub tensor: Var,
    position: ClassPosition,
    contexts: Vec<Option<Var>>,
    groups: Vec<Option<Var>>,
    class_rows: Vec<Var>,
    per_group: usize,
}

impl PromptGraph {
    pub fn new(
        tape: &mut Tape,
        collection: &PromptCollection,
        table: &EmbeddingTable,
        trainable: bool,
    ) -> Result<Self> {
        let tensor = tape.leaf(collection.tensor.clone(), trainable);
        Self::attach(tape, tensor, collection, table)
    }

    /// Wraps an already registered `[J, L, M, E]` node.
    pub fn attach(
        tape: &mut Tape,
        tensor: Var,
        collection: &PromptCollection,
        table: &EmbeddingTable,
    ) -> Result<Self> {
        if tape.try_value(tensor)?.shape() != collection.tensor.shape() {
            return dim_err("registered prompts do not match the collection shape");
        }
        if table.embed() != collection.embed() {
            return dim_err(format!(
                "prompt width {} does not match class-token width {}",
                collection.embed(),
                table.embed()
            ));
        }
        let class_rows = (0..table.classes())
            .map(|k| table.row(k).map(|r| tape.constant(r)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            tensor,
            position: collection.position,
            contexts: vec![None; collection.groups() * collection.per_group()],
            groups: vec![None; collection.groups()],
            class_rows,
            per_group: collection.per_group(),
        })
    }

    fn context(&mut self, tape: &mut Tape, j: usize, l: usize) -> Result<Var> {
        let groups = self.groups.len();
        if j >= groups {
            return Err(Error::Index {
                what: "prompt groups",
                index: j,
                len: groups,
            });
        }
        if l >= self.per_group {
            return Err(Error::Index {
                what: "prompts per group",
                index: l,
                len: self.per_group,
            });
        }
        if let Some(v) = self.contexts[j * self.per_group + l] {
            return Ok(v);
        }
        let g = match self.groups[j] {
            Some(g) => g,
            None => {
                let g = tape.row(self.tensor, j)?;
                self.groups[j] = Some(g);
                g
            }
        };
        let c = tape.row(g, l)?;
        self.contexts[j * self.per_group + l] = Some(c);
        Ok(c)
    }

    /// Mean text feature of the prompts `ls` of group `j` for class `k`.
    pub fn group_feature(
        &mut self,
        tape: &mut Tape,
        text: &FrozenTextEncoder,
        j: usize,
        k: usize,
        ls: &[usize],
    ) -> Result<Var> {
        if ls.is_empty() {
            return config_err("group feature over zero prompts");
        }
        let Some(&class_row) = self.class_rows.get(k) else {
            return Err(Error::Index {
                what: "classes",
                index: k,
                len: self.class_rows.len(),
            });
        };
        let mut feats = Vec::with_capacity(ls.len());
        for &l in ls {
            let ctx = self.context(tape, j, l)?;
            let tokens = build_prompt_text_on(tape, ctx, class_row, self.position)?;
            feats.push(text.encode_on(tape, tokens)?);
        }
        if feats.len() == 1 {
            return Ok(feats[0]);
        }
        let stacked = tape.stack(&feats)?;
        tape.reduce_mean(stacked, 0)
    }
}

/// Mean over all `L` prompts of group `j` for class `k`.
pub fn group_text_feature(
    collection: &PromptCollection,
    text: &FrozenTextEncoder,
    table: &EmbeddingTable,
    j: usize,
    k: usize,
) -> Result<Tensor> {
    collection.check_group(j)?;
    let mut tape = Tape::new();
    let mut graph = PromptGraph::new(&mut tape, collection, table, false)?;
    let ls: Vec<usize> = (0..collection.per_group()).collect();
    let f = graph.group_feature(&mut tape, text, j, k, &ls)?;
    Ok(tape.value(f).clone())
}

/// Mean of all `J * L` prompt features of class `k`.
pub fn language_prototype(
    collection: &PromptCollection,
    text: &FrozenTextEncoder,
    table: &EmbeddingTable,
    k: usize,
) -> Result<Tensor> {
    let feats = (0..collection.groups())
        .map(|j| group_text_feature(collection, text, table, j, k))
        .collect::<Result<Vec<_>>>()?;
    let d = feats[0].numel();
    let mut out = vec![0.0; d];
    for f in &feats {
        for (o, v) in out.iter_mut().zip(f.data()) {
            *o += v;
        }
    }
    Ok(Tensor::vector(
        out.into_iter().map(|v| v / feats.len() as f64).collect(),
    ))
}

/// `K x D` language prototypes.
pub fn language_prototypes(
    collection: &PromptCollection,
    text: &FrozenTextEncoder,
    table: &EmbeddingTable,
) -> Result<Vec<Tensor>> {
    (0..table.classes())
        .map(|k| language_prototype(collection, text, table, k))
        .collect()
}

/// Group-level spread of the prompt collection.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptDiversity {
    /// Mean over every entry of the group's prompt features, per group.
    pub group_means: Vec<f64>,
    /// Population standard deviation of `group_means`.
    pub std: f64,
}

pub fn prompt_diversity(
    collection: &PromptCollection,
    text: &FrozenTextEncoder,
    table: &EmbeddingTable,
) -> Result<PromptDiversity> {
    let mut group_means = Vec::with_capacity(collection.groups());
    for j in 0..collection.groups() {
        let mut sum = 0.0;
        let mut count = 0usize;
        for k in 0..table.classes() {
            for l in 0..collection.per_group() {
                let tokens =
                    build_prompt_text(&collection.prompt(j, l)?, k, table, collection.position)?;
                let f = text.encode_text(&tokens)?;
                sum += f.data().iter().sum::<f64>();
                count += f.numel();
            }
        }
        group_means.push(sum / count as f64);
    }
    let n = group_means.len() as f64;
    let mean = group_means.iter().sum::<f64>() / n;
    let std = (group_means.iter().map(|m| (m - mean).powi(2)).sum::<f64>() / n).sqrt();
    Ok(PromptDiversity { group_means, std })
}
