use evalexpr::{build_operator_tree, ContextWithMutableVariables, DefaultNumericTypes, HashMapContext, Node, Value};

use crate::error::{Error, Result};

/// Weight function `q(pi)` for the weighted MSM, written as an arithmetic
/// expression in the variable `pi`, e.g. `"0.5 * pi + 0.25"`.
#[derive(Clone, Debug)]
pub struct WeightExpr {
    source: String,
    tree: Node<DefaultNumericTypes>,
}

impl PartialEq for WeightExpr {
    fn eq(&self, other: &Self) -> bool {
        self.source == other.source
    }
}

impl WeightExpr {
    pub fn parse(source: &str) -> Result<WeightExpr> {
        let tree = build_operator_tree::<DefaultNumericTypes>(source)
            .map_err(|e| Error::config(format!("weight expression `{source}`: {e}")))?;
        if let Some(var) = tree.iter_variable_identifiers().find(|v| *v != "pi") {
            return Err(Error::config(format!(
                "weight expression `{source}` uses unknown variable `{var}` (only `pi` is bound)"
            )));
        }
        let expr = WeightExpr {
            source: source.to_owned(),
            tree,
        };
        expr.eval(0.5)?;
        Ok(expr)
    }

    pub fn source(&self) -> &str {
        &self.source
    }

    /// `q(pi)`; must land in `[0, 1)`.
    pub fn eval(&self, pi: f64) -> Result<f64> {
        let mut ctx = HashMapContext::<DefaultNumericTypes>::new();
        ctx.set_value("pi".into(), Value::Float(pi))
            .map_err(|e| Error::config(e.to_string()))?;
        let q = self
            .tree
            .eval_number_with_context(&ctx)
            .map_err(|e| Error::config(format!("weight expression `{}`: {e}", self.source)))?;
        if !(0.0..1.0).contains(&q) {
            return Err(Error::config(format!(
                "weight expression `{}` gave {q} at pi = {pi}; expected a value in [0, 1)",
                self.source
            )));
        }
        Ok(q)
    }
}
