//! Problem container: named variables flattened into one decision vector,
//! PSD blocks affine in that vector, linear equalities and a linear objective.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::affine::AffineMatrix;
use crate::error::SdpError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum VariableKind {
    Scalar,
    Symmetric { dim: usize },
}

impl VariableKind {
    pub fn num_coords(&self) -> usize {
        match *self {
            VariableKind::Scalar => 1,
            VariableKind::Symmetric { dim } => dim * (dim + 1) / 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Variable {
    pub name: String,
    #[serde(flatten)]
    pub kind: VariableKind,
    pub offset: usize,
}

/// Handle to a scalar decision variable (its coordinate in the flat vector).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ScalarVar(pub usize);

impl ScalarVar {
    /// `y * coeff` as an affine matrix.
    pub fn times(&self, coeff: DMatrix<f64>) -> AffineMatrix {
        AffineMatrix::term(self.0, coeff)
    }

    /// The 1x1 expression `y`.
    pub fn expr(&self) -> AffineMatrix {
        self.times(DMatrix::from_element(1, 1, 1.0))
    }

    pub fn value(&self, y: &DVector<f64>) -> f64 {
        y[self.0]
    }
}

/// Handle to a symmetric matrix variable stored as its upper triangle,
/// column by column.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SymVar {
    pub offset: usize,
    pub dim: usize,
}

impl SymVar {
    pub fn coord(&self, i: usize, j: usize) -> usize {
        let (i, j) = if i <= j { (i, j) } else { (j, i) };
        self.offset + j * (j + 1) / 2 + i
    }

    /// The matrix variable itself.
    pub fn expr(&self) -> AffineMatrix {
        let n = self.dim;
        let mut out = AffineMatrix::zeros(n, n);
        for j in 0..n {
            for i in 0..=j {
                let mut e = DMatrix::zeros(n, n);
                e[(i, j)] = 1.0;
                e[(j, i)] = 1.0;
                out.terms.insert(self.coord(i, j), e);
            }
        }
        out
    }

    pub fn value(&self, y: &DVector<f64>) -> DMatrix<f64> {
        DMatrix::from_fn(self.dim, self.dim, |i, j| y[self.coord(i, j)])
    }

    pub fn trace_coeffs(&self) -> Vec<(usize, f64)> {
        (0..self.dim).map(|i| (self.coord(i, i), 1.0)).collect()
    }
}

/// `expr ⪰ 0`; `expr` must be square and symmetric for every decision value.
#[derive(Clone, Debug, PartialEq)]
pub struct PsdBlock {
    pub tag: String,
    pub expr: AffineMatrix,
}

impl PsdBlock {
    pub fn dim(&self) -> usize {
        self.expr.nrows()
    }
}

/// `sum coeffs[k].1 * y[coeffs[k].0] == rhs`
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearEquality {
    pub tag: String,
    pub coeffs: Vec<(usize, f64)>,
    pub rhs: f64,
}

/// minimize `objective . y + objective_offset` subject to every block being PSD
/// and every equality holding.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SdpProblem {
    pub variables: Vec<Variable>,
    pub num_coords: usize,
    pub blocks: Vec<PsdBlock>,
    pub equalities: Vec<LinearEquality>,
    pub objective: Vec<(usize, f64)>,
    pub objective_offset: f64,
}

impl SdpProblem {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_scalar(&mut self, name: &str) -> ScalarVar {
        let offset = self.push_variable(name, VariableKind::Scalar);
        ScalarVar(offset)
    }

    pub fn add_symmetric(&mut self, name: &str, dim: usize) -> SymVar {
        let offset = self.push_variable(name, VariableKind::Symmetric { dim });
        SymVar { offset, dim }
    }

    fn push_variable(&mut self, name: &str, kind: VariableKind) -> usize {
        let offset = self.num_coords;
        self.variables.push(Variable { name: name.to_string(), kind, offset });
        self.num_coords += kind.num_coords();
        offset
    }

    pub fn variable(&self, name: &str) -> Option<&Variable> {
        self.variables.iter().find(|v| v.name == name)
    }

    /// Adds `expr ⪰ 0`. The expression is symmetrized; an asymmetric input
    /// beyond rounding is rejected.
    pub fn add_psd(&mut self, tag: &str, expr: AffineMatrix) -> Result<(), SdpError> {
        if expr.nrows() != expr.ncols() {
            return Err(SdpError::InvalidProblem(format!(
                "block '{tag}' is {}x{}, not square",
                expr.nrows(),
                expr.ncols()
            )));
        }
        let check = |m: &DMatrix<f64>| {
            let scale = 1.0 + m.amax();
            (m - m.transpose()).amax() <= 1e-9 * scale
        };
        if !check(&expr.constant) || !expr.terms.values().all(check) {
            return Err(SdpError::InvalidProblem(format!("block '{tag}' is not symmetric")));
        }
        if let Some((&v, _)) = expr.terms.iter().next_back() {
            if v >= self.num_coords {
                return Err(SdpError::InvalidProblem(format!("block '{tag}' references unknown coordinate {v}")));
            }
        }
        let sym = |m: &DMatrix<f64>| (m + m.transpose()) * 0.5;
        let mut expr = AffineMatrix {
            constant: sym(&expr.constant),
            terms: expr.terms.iter().map(|(&v, m)| (v, sym(m))).collect(),
        };
        expr.prune();
        self.blocks.push(PsdBlock { tag: tag.to_string(), expr });
        Ok(())
    }

    pub fn add_equality(&mut self, tag: &str, coeffs: Vec<(usize, f64)>, rhs: f64) {
        self.equalities.push(LinearEquality { tag: tag.to_string(), coeffs, rhs });
    }

    pub fn set_objective(&mut self, coeffs: Vec<(usize, f64)>) {
        self.objective = coeffs;
    }

    pub fn objective_vector(&self) -> DVector<f64> {
        let mut c = DVector::zeros(self.num_coords);
        for &(i, v) in &self.objective {
            c[i] += v;
        }
        c
    }

    pub fn objective_value(&self, y: &DVector<f64>) -> f64 {
        self.objective.iter().map(|&(i, v)| v * y[i]).sum::<f64>() + self.objective_offset
    }

    pub fn blocks_with_tag<'a>(&'a self, tag: &'a str) -> impl Iterator<Item = &'a PsdBlock> + 'a {
        self.blocks.iter().filter(move |b| b.tag == tag)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&SdpProblemJson::from(self)).expect("problem serialization is infallible")
    }

    pub fn from_json(text: &str) -> Result<Self, SdpError> {
        let raw: SdpProblemJson =
            serde_json::from_str(text).map_err(|e| SdpError::InvalidProblem(format!("malformed problem JSON: {e}")))?;
        raw.into_problem()
    }
}

/// One upper-triangle entry of a block coefficient; `var == None` is the constant term.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Triplet {
    pub var: Option<usize>,
    pub row: usize,
    pub col: usize,
    pub value: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct BlockJson {
    tag: String,
    dim: usize,
    entries: Vec<Triplet>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct SdpProblemJson {
    variables: Vec<Variable>,
    num_coords: usize,
    blocks: Vec<BlockJson>,
    equalities: Vec<LinearEquality>,
    objective: Vec<(usize, f64)>,
    objective_offset: f64,
}

fn upper_triplets(var: Option<usize>, m: &DMatrix<f64>, out: &mut Vec<Triplet>) {
    for j in 0..m.ncols() {
        for i in 0..=j {
            if m[(i, j)] != 0.0 {
                out.push(Triplet { var, row: i, col: j, value: m[(i, j)] });
            }
        }
    }
}

impl From<&SdpProblem> for SdpProblemJson {
    fn from(p: &SdpProblem) -> Self {
        let blocks = p
            .blocks
            .iter()
            .map(|b| {
                let mut entries = Vec::new();
                upper_triplets(None, &b.expr.constant, &mut entries);
                for (&v, m) in &b.expr.terms {
                    upper_triplets(Some(v), m, &mut entries);
                }
                BlockJson { tag: b.tag.clone(), dim: b.dim(), entries }
            })
            .collect();
        Self {
            variables: p.variables.clone(),
            num_coords: p.num_coords,
            blocks,
            equalities: p.equalities.clone(),
            objective: p.objective.clone(),
            objective_offset: p.objective_offset,
        }
    }
}

impl SdpProblemJson {
    fn into_problem(self) -> Result<SdpProblem, SdpError> {
        let declared: usize = self.variables.iter().map(|v| v.kind.num_coords()).sum();
        if declared != self.num_coords {
            return Err(SdpError::InvalidProblem("variable sizes do not add up to num_coords".into()));
        }
        let mut p = SdpProblem {
            variables: self.variables,
            num_coords: self.num_coords,
            blocks: Vec::new(),
            equalities: self.equalities,
            objective: self.objective,
            objective_offset: self.objective_offset,
        };
        for b in self.blocks {
            let mut expr = AffineMatrix::zeros(b.dim, b.dim);
            for t in b.entries {
                if t.row >= b.dim || t.col >= b.dim {
                    return Err(SdpError::InvalidProblem(format!("entry outside block '{}'", b.tag)));
                }
                let m = match t.var {
                    None => &mut expr.constant,
                    Some(v) => expr.terms.entry(v).or_insert_with(|| DMatrix::zeros(b.dim, b.dim)),
                };
                m[(t.row, t.col)] = t.value;
                m[(t.col, t.row)] = t.value;
            }
            p.add_psd(&b.tag, expr)?;
        }
        Ok(p)
    }
}
