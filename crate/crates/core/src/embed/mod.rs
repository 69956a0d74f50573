//! Visual token sequence: cell encoder, GIN stack with layer aggregation,
//! global raster embedding and 2-D position embeddings.

mod gin;
mod position;
mod raster;

use serde::{Deserialize, Serialize};

pub use gin::{aggregate_layers, gin_combine, GinLayer, GinStack};
pub use position::{quantize, sine_position_embedding, sinusoid, PeMode, POS_BINS};
pub use raster::{rasterize, CHANNELS, GRID};

use crate::error::{Error, Result};
use crate::graph::GraphBuilder;
use crate::nn::{Init, Linear, Mlp2};
use crate::scalar::Scalar;
use crate::scene::{Scene, NUM_ATTRS};
use crate::tensor::{ParamId, ParamStore, Tape, Tensor, Var};

/// Model variants compared in the ablation study.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    Full,
    NoGraph,
    NoGnn,
    FrozenEncoder,
    NoGlobal,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Full,
        Variant::NoGraph,
        Variant::NoGnn,
        Variant::FrozenEncoder,
        Variant::NoGlobal,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoGraph => "no-graph",
            Variant::NoGnn => "no-gnn",
            Variant::FrozenEncoder => "frozen-encoder",
            Variant::NoGlobal => "no-global",
        }
    }

    pub fn uses_global(self) -> bool {
        self != Variant::NoGlobal
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| format!("unknown variant {s:?} (full, no-graph, no-gnn, frozen-encoder, no-global)"))
    }
}

/// Model-independent per-scene inputs, computed once.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneInput {
    pub n: usize,
    /// Standardized attributes, one row per cell.
    pub attrs: Vec<Vec<f64>>,
    pub neighbors: Vec<Vec<usize>>,
    pub row_bins: Vec<usize>,
    pub col_bins: Vec<usize>,
    /// `[GRID·GRID × CHANNELS]`.
    pub raster: Vec<f64>,
}

impl SceneInput {
    pub fn new(scene: &Scene, builder: &GraphBuilder) -> Result<Self> {
        let graph = builder.build(scene)?;
        let attrs: Vec<Vec<f64>> = scene.cells.iter().map(|c| builder.scaler.transform(&c.attrs)).collect();
        Ok(Self {
            n: graph.n,
            raster: rasterize(scene, &attrs),
            attrs,
            neighbors: graph.adjacency,
            row_bins: graph.coords.iter().map(|&(_, y)| quantize(y)).collect(),
            col_bins: graph.coords.iter().map(|&(x, _)| quantize(x)).collect(),
        })
    }

    pub fn attr_tensor<T: Scalar>(&self) -> Tensor<T> {
        let data = self.attrs.iter().flatten().map(|&v| T::of(v)).collect();
        Tensor::from_vec(&[self.n, NUM_ATTRS], data).expect("attribute rows have fixed width")
    }

    pub fn raster_tensor<T: Scalar>(&self, shape: &[usize]) -> Tensor<T> {
        Tensor::from_vec(shape, self.raster.iter().map(|&v| T::of(v)).collect()).expect("raster size is fixed")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbedConfig {
    pub variant: Variant,
    pub d_model: usize,
    pub gnn_layers: usize,
    pub encoder_width: usize,
    pub pe_mode: PeMode,
    pub agg_include_input: bool,
}

impl EmbedConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || !self.d_model.is_multiple_of(2) {
            return Err(Error::InvalidConfig(format!("d_model {} must be even", self.d_model)));
        }
        if self.gnn_layers == 0 || self.encoder_width == 0 {
            return Err(Error::InvalidConfig("gnn_layers and encoder_width must be positive".into()));
        }
        Ok(())
    }
}

/// Encoder-side token sequence for one scene.
#[derive(Debug, Clone)]
pub struct EmbeddingSequence {
    pub tokens: Var,
    /// False for padding slots.
    pub valid: Vec<bool>,
    /// Index of the first cell (or grid) token.
    pub cell_offset: usize,
    pub cell_tokens: usize,
}

impl EmbeddingSequence {
    pub fn len(&self) -> usize {
        self.valid.len()
    }

    pub fn is_empty(&self) -> bool {
        self.valid.is_empty()
    }

    /// Appends `extra` masked zero slots.
    pub fn pad<T: Scalar>(&self, tape: &mut Tape<T>, extra: usize) -> Result<Self> {
        let d = tape.value(self.tokens).cols();
        let zeros = tape.constant(Tensor::zeros(&[extra, d]))?;
        let tokens = tape.concat_rows(&[self.tokens, zeros])?;
        let mut valid = self.valid.clone();
        valid.extend(std::iter::repeat_n(false, extra));
        Ok(Self {
            tokens,
            valid,
            ..*self
        })
    }
}

/// Intermediate cell states exposed for inspection.
pub struct CellStates {
    pub h0: Var,
    pub layers: Vec<Var>,
    pub output: Var,
}

#[derive(Debug, Clone)]
pub struct Embedder {
    pub config: EmbedConfig,
    pub cell_encoder: Mlp2,
    pub gin: GinStack,
    pub global: Mlp2,
    pub grid_proj: Linear,
    pub pe_tables: (ParamId, ParamId),
}

/// Name prefix of the cell-encoder parameters.
pub const CELL_ENCODER_PREFIX: &str = "cell_encoder.";

impl Embedder {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, init: &mut Init, config: EmbedConfig) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let cell_encoder = Mlp2::new(store, init, "cell_encoder", NUM_ATTRS, config.encoder_width, d);
        let gin = GinStack::new(store, init, d, config.gnn_layers, config.agg_include_input);
        let global = Mlp2::new(store, init, "global", GRID * GRID * CHANNELS, d, d);
        let grid_proj = Linear::new(store, init, "grid_proj", CHANNELS, d);
        let half = d / 2;
        let pe_tables = (
            store.add("pe.row", init.normal(&[POS_BINS, half], 0.1)),
            store.add("pe.col", init.normal(&[POS_BINS, d - half], 0.1)),
        );
        Ok(Self {
            config,
            cell_encoder,
            gin,
            global,
            grid_proj,
            pe_tables,
        })
    }

    /// `H(0)`: the cell encoder applied row-wise to standardized attributes.
    pub fn encode_cells<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, input: &SceneInput) -> Result<Var> {
        if input.n == 0 {
            return Err(Error::EmptyScene);
        }
        let x = tape.constant(input.attr_tensor())?;
        self.cell_encoder.forward(tape, store, x)
    }

    pub fn cell_states<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        input: &SceneInput,
    ) -> Result<CellStates> {
        let h0 = self.encode_cells(tape, store, input)?;
        let layers = self.gin.layer_states(tape, store, h0, &input.neighbors)?;
        let alpha = tape.param(store, self.gin.alpha);
        let mut all = Vec::with_capacity(layers.len() + 1);
        if self.gin.include_input {
            all.push(h0);
        }
        all.extend(&layers);
        let output = aggregate_layers(tape, alpha, &all)?;
        Ok(CellStates { h0, layers, output })
    }

    /// The global embedding `e` as a `[1 × d]` row.
    pub fn global_embedding<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        input: &SceneInput,
    ) -> Result<Var> {
        let x = tape.constant(input.raster_tensor(&[1, GRID * GRID * CHANNELS]))?;
        self.global.forward(tape, store, x)
    }

    /// Position embeddings for the given bins, or `None` in `PeMode::None`.
    pub fn position_embedding<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        row_bins: &[usize],
        col_bins: &[usize],
    ) -> Result<Option<Var>> {
        match self.config.pe_mode {
            PeMode::None => Ok(None),
            PeMode::Sine => {
                let pe = sine_position_embedding(row_bins, col_bins, self.config.d_model);
                Ok(Some(tape.constant(pe)?))
            }
            PeMode::Learned => {
                let rows = tape.param(store, self.pe_tables.0);
                let cols = tape.param(store, self.pe_tables.1);
                let r = tape.gather_rows(rows, row_bins)?;
                let c = tape.gather_rows(cols, col_bins)?;
                Ok(Some(tape.concat_cols(&[r, c])?))
            }
        }
    }

    fn grid_tokens<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, input: &SceneInput) -> Result<Var> {
        let x = tape.constant(input.raster_tensor(&[GRID * GRID, CHANNELS]))?;
        let tokens = self.grid_proj.forward(tape, store, x)?;
        let centers: Vec<usize> = (0..GRID).map(|g| quantize((g as f64 + 0.5) / GRID as f64)).collect();
        let row_bins: Vec<usize> = (0..GRID * GRID).map(|i| centers[i / GRID]).collect();
        let col_bins: Vec<usize> = (0..GRID * GRID).map(|i| centers[i % GRID]).collect();
        match self.position_embedding(tape, store, &row_bins, &col_bins)? {
            Some(pe) => tape.add(tokens, pe),
            None => Ok(tokens),
        }
    }

    /// Token sequence for the configured variant. Position embeddings are
    /// added to cell (or grid) tokens only.
    pub fn build_sequence<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        input: &SceneInput,
    ) -> Result<EmbeddingSequence> {
        let variant = self.config.variant;
        let cells = match variant {
            Variant::NoGraph => self.grid_tokens(tape, store, input)?,
            Variant::NoGnn => {
                let h0 = self.encode_cells(tape, store, input)?;
                self.add_cell_positions(tape, store, input, h0)?
            }
            Variant::Full | Variant::FrozenEncoder | Variant::NoGlobal => {
                let ho = self.cell_states(tape, store, input)?.output;
                self.add_cell_positions(tape, store, input, ho)?
            }
        };
        let cell_tokens = tape.value(cells).rows();
        let (tokens, cell_offset) = if variant.uses_global() {
            let e = self.global_embedding(tape, store, input)?;
            (tape.concat_rows(&[e, cells])?, 1)
        } else {
            (cells, 0)
        };
        Ok(EmbeddingSequence {
            tokens,
            valid: vec![true; cell_offset + cell_tokens],
            cell_offset,
            cell_tokens,
        })
    }

    fn add_cell_positions<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        input: &SceneInput,
        h: Var,
    ) -> Result<Var> {
        match self.position_embedding(tape, store, &input.row_bins, &input.col_bins)? {
            Some(pe) => tape.add(h, pe),
            None => Ok(h),
        }
    }
}
