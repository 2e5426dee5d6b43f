//! Per-layer trainable parameter tables.

use std::fmt;

use whvi::models::Regressor;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamRow {
    pub group: String,
    pub tensor: String,
    pub shape: Vec<usize>,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamReport {
    pub rows: Vec<ParamRow>,
}

impl ParamReport {
    pub fn total(&self) -> usize {
        self.rows.iter().map(|r| r.count).sum()
    }

    /// `(group, total)` in first-appearance order.
    pub fn group_totals(&self) -> Vec<(String, usize)> {
        let mut out: Vec<(String, usize)> = Vec::new();
        for r in &self.rows {
            match out.iter_mut().find(|(g, _)| *g == r.group) {
                Some((_, n)) => *n += r.count,
                None => out.push((r.group.clone(), r.count)),
            }
        }
        out
    }

    pub fn group_total(&self, group: &str) -> Option<usize> {
        self.group_totals()
            .into_iter()
            .find(|(g, _)| g == group)
            .map(|(_, n)| n)
    }
}

pub fn param_report(model: &dyn Regressor) -> ParamReport {
    let store = model.store();
    let rows = model
        .param_groups()
        .into_iter()
        .flat_map(|(group, ids)| ids.into_iter().map(move |id| (group.clone(), id)))
        .map(|(group, id)| {
            let value = store.get(id);
            ParamRow {
                group,
                tensor: store.name(id).to_string(),
                shape: value.shape().to_vec(),
                count: value.len(),
            }
        })
        .collect();
    ParamReport { rows }
}

impl fmt::Display for ParamReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let shape = |s: &[usize]| {
            let dims: Vec<String> = s.iter().map(ToString::to_string).collect();
            format!("[{}]", dims.join("×"))
        };
        let totals = self.group_totals();
        let w_tensor = self
            .rows
            .iter()
            .map(|r| r.tensor.len())
            .chain(totals.iter().map(|(g, _)| g.len() + 8))
            .max()
            .unwrap_or(0)
            .max(6);
        let w_shape = self
            .rows
            .iter()
            .map(|r| shape(&r.shape).chars().count())
            .max()
            .unwrap_or(0)
            .max(5);
        writeln!(f, "{:<w_tensor$}  {:<w_shape$}  {:>10}", "tensor", "shape", "params")?;
        for (group, total) in &totals {
            for r in self.rows.iter().filter(|r| &r.group == group) {
                let s = shape(&r.shape);
                let pad = w_shape + s.len() - s.chars().count();
                writeln!(f, "{:<w_tensor$}  {:<pad$}  {:>10}", r.tensor, s, r.count)?;
            }
            writeln!(
                f,
                "{:<w_tensor$}  {:<w_shape$}  {:>10}",
                format!("  {group} total"),
                "",
                total
            )?;
        }
        write!(f, "{:<w_tensor$}  {:<w_shape$}  {:>10}", "total", "", self.total())
    }
}
