use crate::error::{Error, Result};
use crate::model::ModelView;
use crate::tensor::{dot, norm_sq};

/// Denominator of the edit coefficient.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum EditMode {
    /// `‖C(x_r)_ℓ‖²`, the literal reading.
    #[default]
    Faithful,
    /// `‖E x_r‖²`, which makes the edit a projection onto the nullspace of
    /// `E x_r`.
    Corrected,
}

impl EditMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "faithful" => Ok(EditMode::Faithful),
            "corrected" => Ok(EditMode::Corrected),
            other => Err(Error::invalid(format!("unknown edit mode `{other}`"))),
        }
    }
}

/// Move the senses of `target` away from `removed` and, if given, towards
/// `added`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EditSpec {
    pub target: usize,
    pub removed: usize,
    pub added: Option<usize>,
    pub mode: EditMode,
}

impl EditSpec {
    pub fn validate(&self, vocab_size: usize) -> Result<()> {
        for w in [Some(self.target), Some(self.removed), self.added].into_iter().flatten() {
            if w >= vocab_size {
                return Err(Error::OutOfRange {
                    what: "token id",
                    index: w,
                    limit: vocab_size,
                });
            }
        }
        if self.added == Some(self.removed) {
            return Err(Error::invalid("removed and added words must differ"));
        }
        Ok(())
    }
}

/// For every sense ℓ of the target:
/// `C̃_ℓ = C_ℓ + (C_ℓᵀ E x_r / D_ℓ) (E x_a / φ − E x_r)` with
/// `φ = ‖E x_a‖² / ‖E x_r‖²`. Without an added word the bracket is `−E x_r`.
pub fn knowledge_edit<'m>(view: &ModelView<'m>, spec: &EditSpec) -> Result<ModelView<'m>> {
    let e = view.model().embeddings();
    spec.validate(e.rows())?;
    let er = e.row(spec.removed);
    let rr = norm_sq(er);
    if rr == 0.0 {
        return Err(Error::Numeric("embedding of the removed word is zero".into()));
    }
    let dir: Vec<f64> = match spec.added {
        Some(a) => {
            let ea = e.row(a);
            let phi = norm_sq(ea) / rr;
            if phi == 0.0 {
                return Err(Error::Numeric("embedding of the added word is zero".into()));
            }
            ea.iter().zip(er).map(|(x, y)| x / phi - y).collect()
        }
        None => er.iter().map(|y| -y).collect(),
    };
    let removed_senses = match spec.mode {
        EditMode::Faithful => Some(view.sense_vectors(spec.removed)?),
        EditMode::Corrected => None,
    };
    let mut c = view.sense_vectors(spec.target)?;
    for l in 0..c.rows() {
        let den = match &removed_senses {
            Some(r) => norm_sq(r.row(l)),
            None => rr,
        };
        let num = dot(c.row(l), er);
        if num == 0.0 {
            continue;
        }
        if den == 0.0 {
            return Err(Error::Numeric(format!("edit denominator is zero for sense {l}")));
        }
        let coef = num / den;
        for (x, d) in c.row_mut(l).iter_mut().zip(&dir) {
            *x += coef * d;
        }
    }
    view.with_senses(spec.target, c)
}
